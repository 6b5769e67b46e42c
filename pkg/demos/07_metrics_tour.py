"""The metric suite on signals we fully control: chroma similarity under
transposition, constant-Q correlation across timbres, the toy embedding, and
the Frechet distance between embedding Gaussians.

Run: python demos/07_metrics_tour.py
"""

import numpy as np

from toneflow import make_corpus
from toneflow.metrics import (
    alignment,
    chroma_similarity,
    class_prototypes,
    cqt_pcc,
    embed_latent,
    frechet_distance,
    gaussian_stats,
)
from toneflow.synth import ClipSpec, ground_truth_edit, render_clip

corpus = make_corpus(3, seed=13)
clip = corpus.clips[0]
print(f"reference clip: {clip.clip_id} ({clip.spec.timbre}/{clip.spec.style})")

# chroma similarity: identical pitch content scores high, transposition low
same_timbre = ground_truth_edit(clip.spec, timbre="hollow" if clip.spec.timbre != "hollow" else "bright")
shifted = ClipSpec(
    melody=tuple((p + 6, d) for p, d in clip.spec.melody),
    timbre=clip.spec.timbre,
    style=clip.spec.style,
    seed=clip.spec.seed,
)
tritone, _ = render_clip(shifted)
print(f"chroma similarity, same melody other timbre: {chroma_similarity(clip.signal, same_timbre.signal):.3f}")
print(f"chroma similarity, tritone transposition:    {chroma_similarity(clip.signal, tritone):.3f}")

# constant-Q correlation is the timbral counterpart: it drops across classes
print(f"cqt pcc, same melody other timbre:           {cqt_pcc(clip.signal, same_timbre.signal):.3f}")

# prototypes classify held-out clips by cosine alignment
held_out = make_corpus(2, seed=99, split="eval")
protos = class_prototypes((c.spec.timbre, c.latent) for c in corpus.clips)
hits = sum(
    max(protos, key=lambda k: alignment(c.latent, protos[k])) == c.spec.timbre for c in held_out.clips
)
print(f"nearest-prototype timbre accuracy on held-out clips: {hits}/{len(held_out.clips)}")

# Frechet distance between embedding Gaussians: zero against itself, and it
# grows as the comparison corpus drifts away
emb_a = np.stack([embed_latent(c.latent) for c in corpus.clips])
stats_a = gaussian_stats(emb_a)
print(f"frechet distance(corpus, corpus) = {frechet_distance(stats_a, stats_a):.2e}")
emb_b = emb_a + np.array([1.0] + [0.0] * 31)
print(f"frechet distance after shifting one mean coordinate by 1: "
      f"{frechet_distance(stats_a, gaussian_stats(emb_b)):.3f}")
