"""Shared fixtures: the synthetic corpora and the trained toy checkpoint.

Training the toy model takes a few minutes, so the checkpoint (and its loss
curve) is cached on disk under .toy_cache/, keyed by a hash of every input
that determines it bitwise: net config, training recipe, and corpus
parameters. Delete the directory to force a retrain.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

# Single-threaded BLAS: the workload is many small matrix products, where
# thread synchronization costs more than it saves, and a fixed reduction
# order keeps runs bitwise reproducible. The env vars only help if numpy is
# not loaded yet (pytest plugins may beat us to it), so the runtime limiter
# is applied as well.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

try:
    from threadpoolctl import threadpool_limits

    _BLAS_LIMIT = threadpool_limits(limits=1)
except ImportError:  # pragma: no cover - the env vars above still apply
    _BLAS_LIMIT = None

from toneflow.net import NetConfig, VelocityNet, load_checkpoint
from toneflow.synth import Corpus, make_corpus
from toneflow.training import TrainConfig, dataset_from_corpus, train

CACHE_DIR = Path(__file__).resolve().parent.parent / ".toy_cache"

TRAIN_CORPUS_SPEC = {"count_per_class": 16, "seed": 11, "split": "train"}
EVAL_CORPUS_SPEC = {"count_per_class": 10, "seed": 23, "split": "eval"}
TOY_NET_CONFIG = NetConfig()
TOY_TRAIN_CONFIG = TrainConfig(steps=1500, batch_size=16, seed=0)


def toy_cache_paths() -> tuple[Path, Path]:
    key = hashlib.sha256(
        json.dumps(
            {
                "net": TOY_NET_CONFIG.__dict__,
                "train": TOY_TRAIN_CONFIG.__dict__,
                "corpus": TRAIN_CORPUS_SPEC,
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()[:12]
    return CACHE_DIR / f"toy-{key}.tfc", CACHE_DIR / f"toy-{key}.losses.npy"


def build_toy_checkpoint(verbose: bool = False) -> tuple[VelocityNet, np.ndarray]:
    ckpt_path, losses_path = toy_cache_paths()
    if ckpt_path.exists() and losses_path.exists():
        return load_checkpoint(ckpt_path), np.load(losses_path)
    corpus = make_corpus(**TRAIN_CORPUS_SPEC)
    dataset = dataset_from_corpus(corpus)
    if verbose:
        print(f"training toy checkpoint ({TOY_TRAIN_CONFIG.steps} steps) ...")
    result = train(dataset, net=VelocityNet(TOY_NET_CONFIG), config=TOY_TRAIN_CONFIG)
    CACHE_DIR.mkdir(exist_ok=True)
    result.net.save(ckpt_path)
    np.save(losses_path, result.losses)
    return result.net, result.losses


@pytest.fixture(scope="session")
def toy_net():
    net, _ = build_toy_checkpoint()
    return net


@pytest.fixture(scope="session")
def toy_losses():
    _, losses = build_toy_checkpoint()
    return losses


@pytest.fixture(scope="session")
def train_corpus() -> Corpus:
    return make_corpus(**TRAIN_CORPUS_SPEC)


@pytest.fixture(scope="session")
def eval_corpus() -> Corpus:
    return make_corpus(**EVAL_CORPUS_SPEC)
