"""Deterministic synthetic tonal corpus with controllable melody, timbre class
(harmonic amplitude profile) and style class (rhythm and articulation).

Each note is additive synthesis over the harmonics that fit under its
class's bandwidth ceiling. Timbre classes are spectrally separable on
purpose so that the toy embedding can tell them apart; style classes
reshape note envelopes and timing without touching pitch content, which
keeps melody comparisons across classes meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, latents

TIMBRES = ("bright", "hollow", "plucked", "bowed")
STYLES = ("straight", "swing", "sustained", "staccato")

MIDI_MIN, MIDI_MAX = 36, 84
# Exactly 256 STFT frames (window 1024, hop 256 at 16 kHz): no padded frames
# in the fixed-shape latent.
DEFAULT_DURATION = (1024 + 255 * 256) / 16000.0
DEFAULT_NOTES = 8
DEFAULT_NOTE_DURATION = DEFAULT_DURATION / DEFAULT_NOTES
MAX_HARMONICS = 32

MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


@dataclass(frozen=True)
class ClipSpec:
    """Full recipe for one clip; rendering is a pure function of this."""

    melody: tuple[tuple[int, float], ...]
    timbre: str
    style: str
    seed: int = 0
    duration: float = DEFAULT_DURATION
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        object.__setattr__(self, "melody", tuple((int(p), float(d)) for p, d in self.melody))
        if self.timbre not in TIMBRES:
            raise ValueError(f"unknown timbre {self.timbre!r}")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")
        for pitch, dur in self.melody:
            if not (MIDI_MIN <= pitch <= MIDI_MAX):
                raise ValueError(f"pitch {pitch} outside [{MIDI_MIN}, {MIDI_MAX}]")
            if dur <= 0:
                raise ValueError("note durations must be positive")
        total = sum(d for _, d in self.melody)
        hop_seconds = dsp.STFT_HOP / self.sample_rate
        if abs(total - self.duration) > hop_seconds:
            raise ValueError(
                f"melody spans {total:.4f}s but the clip lasts {self.duration:.4f}s (over one hop apart)"
            )

    def with_classes(self, timbre: str | None = None, style: str | None = None) -> "ClipSpec":
        return ClipSpec(
            melody=self.melody,
            timbre=timbre or self.timbre,
            style=style or self.style,
            seed=self.seed,
            duration=self.duration,
            sample_rate=self.sample_rate,
        )


@dataclass
class CorpusClip:
    clip_id: str
    spec: ClipSpec
    signal: dsp.Signal
    latent: np.ndarray
    split: str


@dataclass
class Corpus:
    clips: list[CorpusClip]
    seed: int

    def by_timbre(self, timbre: str) -> list[CorpusClip]:
        return [c for c in self.clips if c.spec.timbre == timbre]

    def by_style(self, style: str) -> list[CorpusClip]:
        return [c for c in self.clips if c.spec.style == style]


# Amplitude rolloffs and bandwidth ceilings are chosen jointly so the four
# per-band log-energy profiles stay linearly separable by the toy embedding
# across melodies and styles.
HARMONIC_CEILING_HZ = {
    "bright": 6000.0,
    "hollow": 3000.0,
    "plucked": 7600.0,
    "bowed": 1500.0,
}


def _harmonic_amplitude(timbre: str, h: int) -> float:
    if timbre == "bright":
        return 1.0 / h
    if timbre == "hollow":
        return 1.0 / h**1.5 if h % 2 == 1 else 0.0  # even harmonics silent
    if timbre == "plucked":
        return 1.0 / h**0.35  # spectrally rich; decay comes from the envelope
    return 1.0 / h**2  # bowed


def _timbre_envelope(timbre: str, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    if timbre == "plucked":
        return np.exp(-7.0 * t)
    if timbre == "bowed":
        attack = min(0.15, max(n / sr * 0.4, 1e-3))
        return np.clip(t / attack, 0.0, 1.0)
    return np.ones(n)


def _style_timing(style: str, melody) -> list[tuple[int, float, float]]:
    """(pitch, onset, slot duration) per note after rhythm shaping."""
    out = []
    onset = 0.0
    for i, (pitch, dur) in enumerate(melody):
        slot = dur * (4.0 / 3.0 if i % 2 == 0 else 2.0 / 3.0) if style == "swing" else dur
        out.append((pitch, onset, slot))
        onset += slot
    return out


def _style_envelope(style: str, n: int, sr: int) -> np.ndarray:
    """Articulation envelope; decays rather than gates so the log-mel floor
    is rarely hit and band statistics stay timbre-dominated."""
    t_rel = np.arange(n) / max(n, 1)
    if style == "staccato":
        return np.exp(-3.0 * t_rel)
    return np.ones(n)


NOISE_BED_AMP = 4e-3  # fixed post-normalization hiss keeps bands off the log floor
TARGET_RMS = 0.1


def render_clip(spec: ClipSpec) -> tuple[dsp.Signal, np.ndarray]:
    """Additive synthesis of one clip; returns (signal, log-mel latent)."""
    sr = spec.sample_rate
    total = int(round(spec.duration * sr))
    mix = np.zeros(total)
    rng = np.random.default_rng(spec.seed)

    for pitch, onset, dur in _style_timing(spec.style, spec.melody):
        start = int(round(onset * sr))
        n = min(int(round(dur * sr)), total - start)
        if n <= 0:
            continue
        t = np.arange(n) / sr
        f0 = midi_to_hz(pitch)
        if spec.style == "sustained":
            f0 = f0 * (1.0 + 0.003 * np.sin(2.0 * np.pi * 5.5 * t))
        note = np.zeros(n)
        h_max = max(1, min(MAX_HARMONICS, int(HARMONIC_CEILING_HZ[spec.timbre] / midi_to_hz(pitch))))
        for h in range(1, h_max + 1):
            amp = _harmonic_amplitude(spec.timbre, h)
            if amp == 0.0:
                continue
            freq = f0 * h  # scalar, or per-sample array under vibrato
            phase = rng.uniform(0.0, 2.0 * np.pi)
            inst_phase = np.cumsum(np.broadcast_to(freq, (n,))) / sr
            note += amp * np.sin(2.0 * np.pi * inst_phase + phase)
        envelope = _timbre_envelope(spec.timbre, n, sr) * _style_envelope(spec.style, n, sr)
        fade = min(max(int(0.005 * sr), 1), n // 2)
        if fade > 0:
            envelope[:fade] *= np.linspace(0.0, 1.0, fade)
            envelope[-fade:] *= np.linspace(1.0, 0.0, fade)
        mix[start : start + n] += note * envelope

    rms = float(np.sqrt(np.mean(mix * mix)))
    if rms > 0:
        mix = TARGET_RMS * mix / rms
    mix = mix + NOISE_BED_AMP * rng.standard_normal(total)
    peak = float(np.max(np.abs(mix)))
    if peak > 0.99:
        mix = 0.99 * mix / peak
    signal = dsp.Signal(mix, sr)
    return signal, latents.mel_latent(signal)


def random_melody(
    rng: np.random.Generator, notes: int = DEFAULT_NOTES, note_duration: float = DEFAULT_NOTE_DURATION
) -> tuple[tuple[int, float], ...]:
    """Scale-degree random walk on C major, confined to roughly A3..G5.

    The narrow register keeps band-energy profiles timbre-dominated rather
    than register-dominated, which the toy embedding relies on.
    """
    degree = int(rng.integers(15, 20))
    melody = []
    for _ in range(notes):
        octave, step = divmod(degree, 7)
        pitch = 24 + 12 * octave + MAJOR_SCALE[step]
        # occasional chromatic accidental decorrelates the pitch-class
        # content of different melodies
        if rng.uniform() < 0.2:
            pitch += int(rng.choice([-1, 1]))
        melody.append((int(np.clip(pitch, MIDI_MIN, MIDI_MAX)), note_duration))
        degree += int(rng.integers(-2, 3))
        degree = int(np.clip(degree, 13, 25))
    return tuple(melody)


def make_corpus(count_per_class: int, seed: int = 0, split: str = "train") -> Corpus:
    """Balanced corpus: exactly ``count_per_class`` clips per timbre class.

    Styles rotate round-robin within each timbre class; melodies come from a
    seeded random walk, so equal seeds give identical corpora.
    """
    if count_per_class < 1:
        raise ValueError("count_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    clips = []
    index = 0
    for i in range(count_per_class):
        for timbre in TIMBRES:
            style = STYLES[(i + TIMBRES.index(timbre)) % len(STYLES)]
            spec = ClipSpec(
                melody=random_melody(rng),
                timbre=timbre,
                style=style,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
            signal, latent = render_clip(spec)
            clips.append(CorpusClip(f"{split}_{index:04d}", spec, signal, latent, split))
            index += 1
    return Corpus(clips=clips, seed=seed)


@dataclass
class RenderedEdit:
    signal: dsp.Signal
    latent: np.ndarray
    unchanged: bool


def ground_truth_edit(spec: ClipSpec, timbre: str | None = None, style: str | None = None) -> RenderedEdit:
    """Re-render the identical melody under the target class: the ideal edit.

    Editing toward the clip's own class returns the source render, flagged.
    """
    target = spec.with_classes(timbre, style)
    unchanged = target == spec
    signal, latent = render_clip(target)
    return RenderedEdit(signal=signal, latent=latent, unchanged=unchanged)


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write WAVs plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in corpus.clips:
        wav_rel = f"wavs/{clip.clip_id}.wav"
        dsp.wav_write(out / wav_rel, clip.signal)
        entries.append(
            {
                "id": clip.clip_id,
                "wav": wav_rel,
                "split": clip.split,
                "timbre": clip.spec.timbre,
                "style": clip.spec.style,
                "seed": clip.spec.seed,
                "duration": clip.spec.duration,
                "sample_rate": clip.spec.sample_rate,
                "melody": [[p, d] for p, d in clip.spec.melody],
            }
        )
    manifest = {"version": 1, "seed": corpus.seed, "clips": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_corpus(corpus_dir) -> Corpus:
    """Rebuild a corpus from its manifest; latents are recomputed from WAVs."""
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    clips = []
    for entry in manifest["clips"]:
        spec = ClipSpec(
            melody=tuple((int(p), float(d)) for p, d in entry["melody"]),
            timbre=entry["timbre"],
            style=entry["style"],
            seed=entry["seed"],
            duration=entry["duration"],
            sample_rate=entry["sample_rate"],
        )
        signal = dsp.wav_read(root / entry["wav"])
        clips.append(CorpusClip(entry["id"], spec, signal, latents.mel_latent(signal), entry["split"]))
    return Corpus(clips=clips, seed=manifest["seed"])
