"""Zero-shot editing pipeline: guided velocities, inversion with attention
caching, denoising with K/V feature injection, and hyperparameter sweeps.

The pipeline runs in flow-token space (standardized latent tokens). A clip is
inverted from the data end (t=1) to noise under its source conditioning with
a low guidance scale, recording the key/value tensors of the late inversion
steps in the chosen single blocks. Denoising then runs from that noise under
the target conditioning at a high guidance scale; at each denoising step
whose time segment corresponds to a cached inversion step, the cached
tensors replace the live ones according to the strategy. Everything is
deterministic given the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import latents, metrics
from .errors import CacheMissError
from .flow import FlowState, TimeGrid
from .net import AttentionTap, Conditioning, VelocityNet
from .solver import estimate_time_derivative
from .synth import STYLES, TIMBRES

STRATEGIES = ("V", "K", "KV", "none")


@dataclass(frozen=True)
class EditConfig:
    """Knobs of one edit run; defaults follow the working configuration."""

    step_count: int = 25
    source_cfg: float = 1.0
    target_cfg: float = 20.0
    strategy: str = "KV"
    injection_steps: int = 0
    injection_block_start: int = 1  # 1-based single-block index
    solver: str = "rf2"
    delta_t: float = 0.01

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.step_count < 1:
            raise ValueError("step_count must be >= 1")
        if not (0 <= self.injection_steps <= self.step_count):
            raise ValueError("injection_steps must lie in [0, step_count]")
        if self.injection_block_start < 1:
            raise ValueError("injection_block_start is 1-based and must be >= 1")
        if self.solver not in ("euler", "rf2"):
            raise ValueError(f"unknown solver {self.solver!r}")

    def validate_for(self, net: VelocityNet) -> None:
        if self.strategy != "none" and self.injection_block_start > net.config.single_blocks:
            raise ValueError(
                f"injection_block_start {self.injection_block_start} exceeds the {net.config.single_blocks} single blocks"
            )

    @property
    def injecting(self) -> bool:
        return self.strategy != "none" and self.injection_steps > 0


@dataclass
class AttentionCache:
    """Recorded (inversion step, single block) -> K/V tensors.

    The recorded step set is the final ``injection_steps`` inversion steps
    (the ones nearest t=0); the recorded block set is the single blocks with
    1-based index >= ``block_start``.
    """

    entries: dict
    step_count: int
    injection_steps: int
    block_start: int
    single_blocks: int

    @property
    def expected_count(self) -> int:
        return self.injection_steps * (self.single_blocks - self.block_start + 1)

    def validate(self) -> None:
        if len(self.entries) != self.expected_count:
            raise CacheMissError(f"cache holds {len(self.entries)} entries, expected {self.expected_count}")
        for key, slot in self.entries.items():
            for name in ("k", "v"):
                if not np.all(np.isfinite(slot[name])):
                    raise CacheMissError(f"non-finite cached tensor {name} at {key}")

    def recorded_steps(self) -> set[int]:
        return set(range(self.step_count - self.injection_steps, self.step_count))

    def recorded_blocks(self) -> set[int]:
        return set(range(self.block_start - 1, self.single_blocks))

    def filtered(self, injection_steps: int, block_start: int) -> "AttentionCache":
        """Sub-cache for a smaller injection window / higher block start."""
        if injection_steps > self.injection_steps or block_start < self.block_start:
            raise CacheMissError("requested window exceeds what was recorded")
        steps = set(range(self.step_count - injection_steps, self.step_count))
        blocks = set(range(block_start - 1, self.single_blocks))
        sub = AttentionCache(
            entries={key: slot for key, slot in self.entries.items() if key[0] in steps and key[1] in blocks},
            step_count=self.step_count,
            injection_steps=injection_steps,
            block_start=block_start,
            single_blocks=self.single_blocks,
        )
        sub.validate()
        return sub


@dataclass
class EditResult:
    edited: np.ndarray
    noise: np.ndarray
    velocity_norms: np.ndarray
    injected_steps: np.ndarray
    config: EditConfig
    step_velocities: Optional[list[np.ndarray]] = None

    def edited_latents(self) -> np.ndarray:
        """Edited flow tokens converted back to raw log-mel latents."""
        tokens = self.edited if self.edited.ndim == 3 else self.edited[None]
        out = np.stack([latents.latent_from_flow_tokens(tok) for tok in tokens])
        return out if self.edited.ndim == 3 else out[0]


def guided_velocity(
    net: VelocityNet,
    z: np.ndarray,
    t: float,
    cond: Conditioning,
    null_cond: Optional[Conditioning] = None,
    scale: float = 1.0,
    tap: Optional[AttentionTap] = None,
) -> np.ndarray:
    """Classifier-free guided velocity v_null + s * (v_cond - v_null).

    Exactly one network evaluation when the scale collapses the formula
    (s=1 conditional, s=0 unconditional), two otherwise. The conditional
    branch is evaluated first and is the one a recording tap observes; a
    replacement tap applies to every branch.
    """
    if null_cond is None:
        null_cond = Conditioning.null()
    if scale == 1.0:
        return net.forward(z, t, cond, tap)
    replay = tap if (tap is not None and tap.mode == "replace") else None
    if scale == 0.0:
        return net.forward(z, t, null_cond, replay)
    v_cond = net.forward(z, t, cond, tap)
    v_null = net.forward(z, t, null_cond, replay)
    return v_null + scale * (v_cond - v_null)


def correspondence(denoise_step: int, step_count: int) -> int:
    """Inversion step covering the same time segment as a denoising step."""
    if not (0 <= denoise_step < step_count):
        raise ValueError(f"step {denoise_step} outside [0, {step_count})")
    return step_count - 1 - denoise_step


def _segment_increment(net, z, t_eval, h, cond, null_cond, scale, cfg: EditConfig, tap):
    """One solver increment with the tap applied per the editing semantics."""
    v0 = guided_velocity(net, z, t_eval, cond, null_cond, scale, tap)
    if cfg.solver == "euler":
        return h * v0, v0

    replay = tap if (tap is not None and tap.mode == "replace") else None

    def probe_field(zz, tt, _unused):
        return guided_velocity(net, zz, tt, cond, null_cond, scale, replay)

    v_dot = estimate_time_derivative(
        probe_field, FlowState(z, t_eval), cfg.delta_t, None, v0=v0, direction=h
    )
    return h * v0 + (0.5 * h * h) * v_dot, v0


def invert_and_cache(
    net: VelocityNet,
    source_tokens: np.ndarray,
    source_cond: Conditioning,
    config: EditConfig,
    record_all: bool = False,
) -> tuple[np.ndarray, AttentionCache, list[np.ndarray]]:
    """Invert a source latent to noise, caching K/V of late inversion steps.

    Recording covers the final ``injection_steps`` inversion steps in the
    single blocks with index >= ``injection_block_start``; ``record_all``
    widens recording to every step and block (useful for sweeps, which
    filter the cache per cell afterwards). Only the conditional branch of
    the principal evaluation of each step is recorded; finite-difference
    probe evaluations are not.
    """
    config.validate_for(net)
    z = np.asarray(source_tokens, dtype=np.float64)
    if record_all:
        n, m = config.step_count, 1
    elif config.strategy == "none":
        n, m = 0, config.injection_block_start
    else:
        n, m = config.injection_steps, config.injection_block_start
    single_blocks = net.config.single_blocks
    record_steps = set(range(config.step_count - n, config.step_count))
    blocks = tuple(range(m - 1, single_blocks))

    tap = AttentionTap(mode="record", blocks=blocks)
    null_cond = Conditioning.null()
    grid = TimeGrid.uniform(config.step_count, "reverse")
    trajectory = [z.copy()]
    for k, (t_from, t_to) in enumerate(grid.segments()):
        step_tap = None
        if k in record_steps:
            tap.step_key = k
            step_tap = tap
        increment, _ = _segment_increment(
            net, z, t_from, t_to - t_from, source_cond, null_cond, config.source_cfg, config, step_tap
        )
        z = z + increment
        if not np.all(np.isfinite(z)):
            raise ArithmeticError(f"non-finite latent during inversion step {k}")
        trajectory.append(z.copy())

    cache = AttentionCache(
        entries={key: {"k": slot["k"], "v": slot["v"]} for key, slot in tap.store.items()},
        step_count=config.step_count,
        injection_steps=n,
        block_start=m,
        single_blocks=single_blocks,
    )
    cache.validate()
    return z, cache, trajectory


def edit(
    net: VelocityNet,
    noise_tokens: np.ndarray,
    cache: Optional[AttentionCache],
    target_cond: Conditioning,
    config: EditConfig,
    keep_step_velocities: bool = False,
) -> EditResult:
    """Denoise from inverted noise under target conditioning with injection.

    Denoising step j corresponds to inversion step N-1-j; the first
    ``injection_steps`` denoising steps therefore replay the cached final
    inversion steps. An expected-but-missing cache slot is a hard error.
    """
    config.validate_for(net)
    z = np.asarray(noise_tokens, dtype=np.float64)
    if config.injecting:
        if cache is None:
            raise CacheMissError("injection requested but no attention cache supplied")
        usable = cache
        if (cache.injection_steps, cache.block_start) != (config.injection_steps, config.injection_block_start):
            usable = cache.filtered(config.injection_steps, config.injection_block_start)
        usable.validate()
        if usable.step_count != config.step_count:
            raise CacheMissError(
                f"cache was recorded for {usable.step_count} steps, edit uses {config.step_count}"
            )
        blocks = tuple(sorted(usable.recorded_blocks()))
        recorded = usable.recorded_steps()
        entries = usable.entries
    else:
        blocks, recorded, entries = (), set(), {}

    null_cond = Conditioning.null()
    grid = TimeGrid.uniform(config.step_count, "forward")
    norms = np.empty(config.step_count)
    injected = np.zeros(config.step_count, dtype=bool)
    velocities = [] if keep_step_velocities else None
    for j, (t_from, t_to) in enumerate(grid.segments()):
        k = correspondence(j, config.step_count)
        step_tap = None
        if config.injecting and k in recorded:
            step_tap = AttentionTap(mode="replace", strategy=config.strategy, blocks=blocks, step_key=k, cache=entries)
            injected[j] = True
        increment, v0 = _segment_increment(
            net, z, t_from, t_to - t_from, target_cond, null_cond, config.target_cfg, config, step_tap
        )
        z = z + increment
        if not np.all(np.isfinite(z)):
            raise ArithmeticError(f"non-finite latent during denoising step {j}")
        norms[j] = float(np.sqrt(np.mean(v0 * v0)))
        if velocities is not None:
            velocities.append(v0.copy())

    return EditResult(
        edited=z,
        noise=np.asarray(noise_tokens, dtype=np.float64).copy(),
        velocity_norms=norms,
        injected_steps=injected,
        config=config,
        step_velocities=velocities,
    )


def edit_clip(
    net: VelocityNet,
    source_latent: np.ndarray,
    source_cond: Conditioning,
    target_cond: Conditioning,
    config: EditConfig,
) -> tuple[EditResult, np.ndarray]:
    """Full pipeline on one raw log-mel latent; returns (result, edited latent)."""
    tokens = latents.flow_tokens(source_latent)
    noise, cache, _ = invert_and_cache(net, tokens, source_cond, config)
    result = edit(net, noise, cache if config.injecting else None, target_cond, config)
    return result, result.edited_latents()


@dataclass
class SweepRow:
    injection_steps: int
    block_start: int
    fidelity: float
    transferability: float
    clip_count: int


def sweep(
    net: VelocityNet,
    clips: Sequence,
    prototypes: dict[str, np.ndarray],
    n_values: Sequence[int],
    m_values: Sequence[int],
    strategy: str = "V",
    config: EditConfig = EditConfig(),
    target_shift: int = 1,
) -> list[SweepRow]:
    """Injection-steps x block-start grid over a batch of corpus clips.

    Every clip is edited toward the timbre class ``target_shift`` positions
    after its own. Inversion runs once per corpus with full recording; each
    grid cell filters the cache and denoises the whole batch at once. Rows
    report mean melody fidelity against the source latent and mean alignment
    with the target-class prototype.
    """
    if not clips or not list(n_values) or not list(m_values):
        raise ValueError("sweep needs clips and nonempty n/m grids")
    base = replace(config, strategy=strategy)
    base.validate_for(net)

    source_lat = [clip.latent for clip in clips]
    tokens = np.stack([latents.flow_tokens(lat) for lat in source_lat])
    timbre_idx = np.array([TIMBRES.index(clip.spec.timbre) for clip in clips])
    style_idx = np.array([STYLES.index(clip.spec.style) for clip in clips])
    target_idx = (timbre_idx + target_shift) % len(TIMBRES)
    source_cond = Conditioning.for_labels(timbre_idx, style_idx)
    target_cond = Conditioning.for_labels(target_idx, style_idx)

    full = replace(base, injection_steps=base.step_count, injection_block_start=1)
    noise, cache, _ = invert_and_cache(net, tokens, source_cond, full, record_all=True)

    rows = []
    for n in n_values:
        for m in m_values:
            cell = replace(base, injection_steps=int(n), injection_block_start=int(m))
            result = edit(net, noise, cache if cell.injecting else None, target_cond, cell)
            edited = result.edited_latents()
            fidelities = [
                metrics.latent_melody_similarity(src, out) for src, out in zip(source_lat, edited)
            ]
            transfers = [
                metrics.alignment(out, prototypes[TIMBRES[ti]]) for out, ti in zip(edited, target_idx)
            ]
            rows.append(
                SweepRow(
                    injection_steps=int(n),
                    block_start=int(m),
                    fidelity=float(np.mean(fidelities)),
                    transferability=float(np.mean(transfers)),
                    clip_count=len(clips),
                )
            )
    return rows
