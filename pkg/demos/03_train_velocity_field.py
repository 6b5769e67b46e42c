"""Train the toy velocity field by velocity matching and watch the loss.

The network starts with a zero output head, so the first losses sit near
mean(z1^2) + 1 (the expected squared norm of the straight-path velocity);
training regresses the field onto z1 - z0 along interpolated states.

Run: python demos/03_train_velocity_field.py [steps] [out.tfc]
"""

import sys

import numpy as np

from toneflow import make_corpus
from toneflow.training import TrainConfig, dataset_from_corpus, smoothed_losses, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = sys.argv[2] if len(sys.argv) > 2 else None

corpus = make_corpus(8, seed=11)
dataset = dataset_from_corpus(corpus)
print(f"training on {len(dataset)} clips for {steps} steps (batch 16) ...")
result = train(dataset, config=TrainConfig(steps=steps, batch_size=16, seed=0))

smooth = smoothed_losses(result.losses)
expected0 = float(np.mean(np.stack([d[0] for d in dataset]) ** 2)) + 1.0
print(f"initial loss {result.losses[0]:.3f} (predicted {expected0:.3f})")
for mark in (0.1, 0.25, 0.5, 1.0):
    i = min(int(mark * steps), steps - 1)
    print(f"  step {i:5d}: smoothed loss {smooth[i]:.4f}")
print(f"reduction factor so far: {result.losses[0] / smooth[-1]:.1f}x")

if out:
    result.net.save(out)
    print(f"saved checkpoint to {out}")
