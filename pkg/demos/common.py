"""Shared helper for the demo scripts: find or build a trained checkpoint."""

import os
from pathlib import Path

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

REPO = Path(__file__).resolve().parent.parent
CACHE = REPO / ".toy_cache"


def load_or_train_net(checkpoint=None, quick_steps=400):
    """Load the given checkpoint, else reuse the test-suite cache, else train
    a quick (demo-quality) model on a small corpus."""
    from toneflow.net import load_checkpoint
    from toneflow.synth import make_corpus
    from toneflow.training import TrainConfig, dataset_from_corpus, train

    if checkpoint:
        print(f"loading checkpoint {checkpoint}")
        return load_checkpoint(checkpoint)
    cached = sorted(CACHE.glob("toy-*.tfc"))
    if cached:
        print(f"loading cached checkpoint {cached[0]}")
        return load_checkpoint(cached[0])
    print(f"no checkpoint found; training a quick {quick_steps}-step model (about a minute) ...")
    corpus = make_corpus(8, seed=11)
    result = train(dataset_from_corpus(corpus), config=TrainConfig(steps=quick_steps, batch_size=16))
    return result.net
