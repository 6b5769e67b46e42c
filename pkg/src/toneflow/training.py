"""Velocity-matching training for the toy transformer: adaptive moment
estimation on the hand-derived gradients, with classifier-free conditioning
dropout so the null branch is usable for guidance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import latents
from .errors import TrainingDivergedError
from .net import NULL_TOKEN, Conditioning, NetConfig, VelocityNet
from .synth import Corpus, STYLES, TIMBRES


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    null_prob: float = 0.1
    seed: int = 0


class Adam:
    """Standard adaptive moment estimation with bias correction."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def update(self, params: dict, grads: dict) -> None:
        cfg = self.cfg
        self.step_count += 1
        correct1 = 1.0 - cfg.beta1**self.step_count
        correct2 = 1.0 - cfg.beta2**self.step_count
        for name, grad in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            params[name] -= cfg.learning_rate * (m / correct1) / (np.sqrt(v / correct2) + cfg.adam_eps)


@dataclass
class TrainResult:
    net: VelocityNet
    losses: np.ndarray
    config: TrainConfig

    def smoothed(self, window: int = 50) -> np.ndarray:
        return smoothed_losses(self.losses, window)

    @property
    def initial_loss(self) -> float:
        return float(self.losses[0])

    @property
    def final_smoothed_loss(self) -> float:
        return float(self.smoothed()[-1])


def smoothed_losses(losses: np.ndarray, window: int = 50) -> np.ndarray:
    """Trailing moving average; the early entries average what is available."""
    losses = np.asarray(losses, dtype=np.float64)
    out = np.empty_like(losses)
    csum = np.concatenate([[0.0], np.cumsum(losses)])
    for i in range(losses.size):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def dataset_from_corpus(corpus: Corpus) -> list[tuple[np.ndarray, int, int]]:
    """(flow-space tokens, timbre index, style index) triples for training."""
    return [
        (latents.flow_tokens(clip.latent), TIMBRES.index(clip.spec.timbre), STYLES.index(clip.spec.style))
        for clip in corpus.clips
    ]


def train(
    dataset: Sequence[tuple[np.ndarray, int, int]],
    net: Optional[VelocityNet] = None,
    config: TrainConfig = TrainConfig(),
    net_config: Optional[NetConfig] = None,
    fixed_noise: Optional[np.ndarray] = None,
) -> TrainResult:
    """Velocity matching on (data tokens, labels) triples.

    Each step pairs fresh unit-normal noise with sampled data tokens at
    uniform times; a fraction of items trains the learned null conditioning.
    ``fixed_noise`` (one noise latent per dataset item) freezes the coupling
    instead, which lets a single pair be memorized exactly. Divergence
    (non-finite loss) raises naming the offending step.
    """
    if len(dataset) == 0:
        raise ValueError("training needs a nonempty dataset")
    if net is None:
        net = VelocityNet(net_config if net_config is not None else NetConfig())
    tokens = np.stack([item[0] for item in dataset])
    timbre_ids = np.array([item[1] for item in dataset], dtype=np.int64)
    style_ids = np.array([item[2] for item in dataset], dtype=np.int64)
    if fixed_noise is not None and np.shape(fixed_noise) != tokens.shape:
        raise ValueError("fixed_noise must supply one noise latent per dataset item")

    rng = np.random.default_rng(config.seed)
    optimizer = Adam(net.params, config)
    losses = np.empty(config.steps)
    for step in range(config.steps):
        pick = rng.integers(0, len(dataset), size=config.batch_size)
        z1 = tokens[pick]
        z0 = fixed_noise[pick] if fixed_noise is not None else rng.standard_normal(z1.shape)
        t = rng.uniform(size=config.batch_size)
        ids = np.stack([timbre_ids[pick], 4 + style_ids[pick]], axis=-1)
        ids[rng.uniform(size=config.batch_size) < config.null_prob] = NULL_TOKEN
        cond = Conditioning(token_ids=ids)

        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = net.loss_and_grads(z0, z1, t, cond)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite at step {step}")
            optimizer.update(net.params, grads)
        losses[step] = loss
    return TrainResult(net=net, losses=losses, config=config)
