"""The transferability-fidelity trade-off: sweep injection steps (n) and the
injection block start (m), then print the two aggregate curves.

Run: python demos/06_tradeoff_sweep.py [checkpoint.tfc]
"""

import sys

import numpy as np

from common import load_or_train_net
from toneflow import make_corpus
from toneflow.editing import EditConfig, sweep
from toneflow.metrics import class_prototypes, spearman_rank_correlation

net = load_or_train_net(sys.argv[1] if len(sys.argv) > 1 else None)
corpus = make_corpus(3, seed=23, split="eval")
protos = class_prototypes((c.spec.timbre, c.latent) for c in corpus.clips)

n_values = [4, 12, 25]
m_values = [1, 2, 3, 4]
print(f"sweeping n in {n_values} x m in {m_values} over {len(corpus.clips)} clips ...")
rows = sweep(net, corpus.clips, protos, n_values, m_values, strategy="V",
             config=EditConfig(step_count=25, target_cfg=20.0))

print("\n  n   m   fidelity  transferability")
for r in rows:
    print(f"  {r.injection_steps:2d}  {r.block_start}   {r.fidelity:+.3f}    {r.transferability:+.3f}")

fid_by_n = [float(np.mean([r.fidelity for r in rows if r.injection_steps == n])) for n in n_values]
tran_by_m = [float(np.mean([r.transferability for r in rows if r.block_start == m])) for m in m_values]
print(f"\nmean fidelity per n:        {[round(v, 3) for v in fid_by_n]}")
print(f"mean transferability per m: {[round(v, 3) for v in tran_by_m]}")
print(f"spearman(fidelity, n) = {spearman_rank_correlation(n_values, fid_by_n):+.2f}")
print(f"spearman(transferability, m) = {spearman_rank_correlation(m_values, tran_by_m):+.2f}")
print("\nmore injected steps preserve more of the source; starting injection at a")
print("later block leaves more room for the target class to assert itself.")
