"""Signal-processing kernels: STFT, mel spectrogram, constant-Q transform,
chromagram folding, and 16-bit PCM WAV I/O.

Everything is implemented directly on numpy. The constant-Q transform uses
per-bin matched complex kernels evaluated as one dense matrix product per
clip; at desk-scale clip lengths this stays fast and easy to audit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import WavFormatError

DEFAULT_SAMPLE_RATE = 16000
STFT_WINDOW = 1024
STFT_HOP = 256
MEL_BANDS = 16
LOG_FLOOR = 1e-10

CQT_F_MIN = 440.0 / 2.0 ** (45.0 / 12.0)  # C1, three octaves plus a major sixth below A4
CQT_BINS_PER_OCTAVE = 12
CQT_OCTAVES = 7
CQT_HOP = 512

PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")


@dataclass(frozen=True)
class Signal:
    """Mono audio: sample array plus its rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class CqtSpectrum:
    """Constant-Q magnitudes (bins x frames) on a geometric frequency grid."""

    magnitudes: np.ndarray
    bin_frequencies: np.ndarray
    bins_per_octave: int
    f_min: float


@dataclass(frozen=True)
class Chromagram:
    """Per-frame energy over the 12 pitch classes, L2-normalized per frame.

    Silent frames stay all-zero; ``voiced`` marks the frames with energy.
    """

    energies: np.ndarray
    voiced: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.energies.shape[0] != 12:
            raise ValueError("chromagram needs 12 pitch-class rows")
        object.__setattr__(self, "voiced", np.linalg.norm(self.energies, axis=0) > 0.0)


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window; confines a bin-centered sine to three DFT bins."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(length) / length))


def frame_signal(samples: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    """Slice into overlapping frames: count = floor((len - window)/hop) + 1."""
    if hop <= 0 or window_len < hop:
        raise ValueError("need window_len >= hop > 0")
    if samples.size < window_len:
        raise ValueError(f"signal length {samples.size} shorter than window {window_len}")
    count = (samples.size - window_len) // hop + 1
    idx = np.arange(window_len)[None, :] + hop * np.arange(count)[:, None]
    return samples[idx]


def stft(signal: Signal, window_len: int = STFT_WINDOW, hop: int = STFT_HOP) -> np.ndarray:
    """Hann-windowed short-time Fourier transform, shape (frames, window//2 + 1)."""
    frames = frame_signal(signal.samples, window_len, hop)
    return np.fft.rfft(frames * hann_window(window_len)[None, :], axis=1)


def mel_frequency(hz: np.ndarray) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, window_len: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, window//2 + 1)."""
    n_bins = window_len // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / window_len
    mel_points = np.linspace(0.0, float(mel_frequency(sample_rate / 2.0)), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


def mel_spectrogram(
    signal: Signal,
    n_mels: int = MEL_BANDS,
    window_len: int = STFT_WINDOW,
    hop: int = STFT_HOP,
) -> np.ndarray:
    """Log mel energies, shape (n_mels, frames), floored at log(1e-10)."""
    spectrum = stft(signal, window_len, hop)
    power = np.abs(spectrum) ** 2
    bank = mel_filterbank(n_mels, window_len, signal.sample_rate)
    mel_power = bank @ power.T
    return np.log(np.maximum(mel_power, LOG_FLOOR))


def cqt(
    signal: Signal,
    f_min: float = CQT_F_MIN,
    bins_per_octave: int = CQT_BINS_PER_OCTAVE,
    octaves: int = CQT_OCTAVES,
    hop: int = CQT_HOP,
) -> CqtSpectrum:
    """Constant-Q magnitudes from per-bin matched complex sinusoid kernels.

    Each bin k has center frequency f_min * 2^(k / bpo) and a Hann-windowed
    kernel whose length keeps Q = 1/(2^(1/bpo) - 1) constant. Frames are
    centered every ``hop`` samples; the signal is zero-padded at the edges.
    """
    sr = signal.sample_rate
    if f_min * 2.0**octaves >= sr / 2.0:
        raise ValueError(
            f"top of the CQT range {f_min * 2.0 ** octaves:.1f} Hz reaches the Nyquist frequency {sr / 2.0:.1f} Hz"
        )
    n_bins = bins_per_octave * octaves
    freqs = f_min * 2.0 ** (np.arange(n_bins) / bins_per_octave)
    q_factor = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    lengths = np.ceil(q_factor * sr / freqs).astype(int)
    max_len = int(lengths[0])

    kernels = np.zeros((n_bins, max_len), dtype=np.complex128)
    for k in range(n_bins):
        n_k = int(lengths[k])
        offset = (max_len - n_k) // 2  # center every kernel in the common support
        n = np.arange(n_k)
        window = hann_window(n_k)
        kernels[k, offset : offset + n_k] = window * np.exp(-2j * np.pi * freqs[k] * n / sr) / window.sum()

    samples = signal.samples
    n_frames = 1 + (samples.size - 1) // hop
    pad = max_len // 2
    padded = np.concatenate([np.zeros(pad), samples, np.zeros(pad + max_len)])
    idx = np.arange(max_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx]
    real = frames @ kernels.real.T
    imag = frames @ kernels.imag.T
    magnitudes = np.sqrt(real**2 + imag**2).T
    return CqtSpectrum(magnitudes=magnitudes, bin_frequencies=freqs, bins_per_octave=bins_per_octave, f_min=f_min)


def chroma_from_cqt(spectrum: CqtSpectrum, silence_floor: float = 1e-9) -> Chromagram:
    """Fold constant-Q bins modulo the octave into 12 pitch-class rows.

    Per-frame L2 normalization; frames whose total magnitude falls below
    ``silence_floor`` (relative to the loudest frame) are zeroed and flagged
    as unvoiced.
    """
    if spectrum.bins_per_octave % 12 != 0:
        raise ValueError("bins_per_octave must be divisible by 12 for chroma folding")
    per_class = spectrum.bins_per_octave // 12
    n_bins, n_frames = spectrum.magnitudes.shape
    classes = (np.arange(n_bins) // per_class) % 12
    energies = np.zeros((12, n_frames))
    for pc in range(12):
        energies[pc] = spectrum.magnitudes[classes == pc].sum(axis=0)
    norms = np.linalg.norm(energies, axis=0)
    threshold = silence_floor * max(float(norms.max()), 1e-300)
    voiced = norms > threshold
    energies[:, ~voiced] = 0.0
    energies[:, voiced] /= norms[voiced]
    return Chromagram(energies=energies)


def wav_write(path, signal: Signal) -> None:
    """Write mono 16-bit PCM, little-endian. Samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(signal.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    data = pcm.tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(data)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, 1, 1, signal.sample_rate, signal.sample_rate * 2, 2, 16))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(data)))
        fh.write(data)


def wav_read(path) -> Signal:
    """Read mono 16-bit PCM WAV; malformed input raises with the byte offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF":
        raise WavFormatError("missing RIFF tag at offset 0")
    if blob[8:12] != b"WAVE":
        raise WavFormatError("missing WAVE tag at offset 8")

    sample_rate = None
    offset = 12
    while offset + 8 <= len(blob):
        chunk_id = blob[offset : offset + 4]
        (chunk_size,) = struct.unpack_from("<I", blob, offset + 4)
        body = offset + 8
        if body + chunk_size > len(blob):
            raise WavFormatError(f"chunk {chunk_id!r} at offset {offset} overruns file end")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavFormatError(f"fmt chunk too short at offset {offset}")
            audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", blob, body)
            if audio_format != 1:
                raise WavFormatError(f"unsupported encoding {audio_format} at offset {body}")
            if channels != 1:
                raise WavFormatError(f"expected mono, got {channels} channels at offset {body + 2}")
            if bits != 16:
                raise WavFormatError(f"expected 16-bit samples, got {bits} at offset {body + 14}")
            sample_rate = rate
        elif chunk_id == b"data":
            if sample_rate is None:
                raise WavFormatError(f"data chunk at offset {offset} precedes fmt chunk")
            pcm = np.frombuffer(blob, dtype="<i2", count=chunk_size // 2, offset=body)
            return Signal(pcm.astype(np.float64) / 32767.0, sample_rate)
        offset = body + chunk_size + (chunk_size & 1)
    raise WavFormatError(f"no data chunk found before offset {offset}")
