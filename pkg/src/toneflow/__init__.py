"""Desk-scale rectified-flow editing of synthetic tonal audio.

A toy diffusion transformer trained by velocity matching on an additive-
synthesis corpus, inverted and edited with a second-order flow solver and
self-attention K/V injection, evaluated with chroma/CQT/Frechet metrics.
"""

from .dsp import Signal
from .editing import AttentionCache, EditConfig, EditResult, edit, edit_clip, guided_velocity, invert_and_cache, sweep
from .flow import CANONICAL, FlowState, Schedule, TimeGrid, euler_step, integrate, interpolate, path_velocity
from .metrics import MetricReport, alignment, chroma_similarity, cqt_pcc, frechet_distance, gaussian_stats
from .net import AttentionTap, Conditioning, NetConfig, VelocityNet, gradient_check, load_checkpoint
from .solver import InversionResult, SolverConfig, convergence_order, invert, reconstruct, rf_solver_step
from .synth import ClipSpec, Corpus, ground_truth_edit, make_corpus, render_clip
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionCache",
    "AttentionTap",
    "CANONICAL",
    "ClipSpec",
    "Conditioning",
    "Corpus",
    "EditConfig",
    "EditResult",
    "FlowState",
    "InversionResult",
    "MetricReport",
    "NetConfig",
    "Schedule",
    "Signal",
    "SolverConfig",
    "TimeGrid",
    "TrainConfig",
    "VelocityNet",
    "alignment",
    "chroma_similarity",
    "convergence_order",
    "cqt_pcc",
    "edit",
    "edit_clip",
    "euler_step",
    "frechet_distance",
    "gaussian_stats",
    "gradient_check",
    "ground_truth_edit",
    "guided_velocity",
    "integrate",
    "interpolate",
    "invert",
    "invert_and_cache",
    "load_checkpoint",
    "make_corpus",
    "path_velocity",
    "reconstruct",
    "render_clip",
    "rf_solver_step",
    "sweep",
    "train",
]
