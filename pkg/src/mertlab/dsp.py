"""Time-frequency features on the 75 Hz model frame grid (hop 320 at 24 kHz).

Frame ``t`` of every teacher feature is centred on sample ``t * hop``; a clip of
``n`` samples yields ``n // hop`` frames so features line up one-to-one with the
convolutional encoder output.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct, rfft

from . import containers
from .audio_io import AudioClip

HOP = 320
FRAME_RATE = 75.0
N_MELS = 229
MEL_FFT = 4096
CQT_LOG_FLOOR = 1e-4
CHROMA_CONTEXT = (10, 11)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    frame_rate: float
    kind: str
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"feature matrix must be frames x dims with frames >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.kind} features contain non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CQTParams:
    f_min: float = 32.70
    bins_per_octave: int = 12
    n_bins: int = 84
    hop: int = HOP
    sample_rate: int = 24000

    def __post_init__(self):
        if self.f_min <= 0 or self.bins_per_octave < 1 or self.n_bins < 1 or self.hop < 1:
            raise ValueError(f"invalid CQT parameters {self}")
        if self.f_max >= self.sample_rate / 2:
            raise ValueError(f"CQT top edge {self.f_max:.1f} Hz reaches Nyquist ({self.sample_rate / 2} Hz)")

    @property
    def f_max(self) -> float:
        return self.f_min * 2.0 ** (self.n_bins / self.bins_per_octave)

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def center_frequencies(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)


def n_frames(n_samples: int, hop: int = HOP) -> int:
    return max(1, n_samples // hop)


def _center_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad <= 0:
        return x
    if x.size < 2:
        return np.pad(x, pad)
    return np.pad(x, pad, mode="reflect")


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


# ---------------------------------------------------------------- STFT family


def stft(clip: AudioClip, window_size: int = 2048, hop: int = HOP) -> FeatureMatrix:
    """Centre-padded Hann STFT magnitude, ``1 + len // hop`` frames."""
    if not window_size >= hop > 0:
        raise ValueError(f"need window_size >= hop > 0, got {window_size} and {hop}")
    x = _center_pad(clip.samples, window_size // 2)
    frames = 1 + clip.samples.size // hop
    need = (frames - 1) * hop + window_size
    if x.size < need:
        x = np.pad(x, (0, need - x.size))
    win = sliding_window_view(x, window_size)[: (frames - 1) * hop + 1 : hop]
    mag = np.abs(rfft(win * hann(window_size), axis=1))
    return FeatureMatrix(mag, clip.sample_rate / hop, "stft_mag", clip.source_id)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular (peak 1) filters evenly spaced on the mel scale from 0 Hz to Nyquist."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lower = (fft_freqs[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - fft_freqs[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    return np.maximum(0.0, np.minimum(lower, upper))


def _model_grid(fm_values: np.ndarray, n_samples: int, hop: int) -> np.ndarray:
    return fm_values[: n_frames(n_samples, hop)]


def log_mel(clip: AudioClip, n_mels: int = N_MELS, n_fft: int = MEL_FFT, hop: int = HOP) -> FeatureMatrix:
    """``log(1 + mel-filtered magnitude)`` on the model frame grid."""
    mag = stft(clip, n_fft, hop).values
    mel = mag @ mel_filterbank(n_mels, n_fft, clip.sample_rate).T
    values = _model_grid(np.log1p(mel), clip.samples.size, hop)
    return FeatureMatrix(values, clip.sample_rate / hop, "logmel", clip.source_id)


def stack_context(values: np.ndarray, left: int, right: int) -> np.ndarray:
    """Concatenate frames ``t-left .. t+right`` per row, replicating edge frames."""
    if left < 0 or right < 0:
        raise ValueError("context sizes must be non-negative")
    if left == right == 0:
        return values
    n = values.shape[0]
    idx = np.clip(np.arange(n)[:, None] + np.arange(-left, right + 1)[None, :], 0, n - 1)
    return values[idx].reshape(n, -1)


def _context(context) -> tuple[int, int]:
    if isinstance(context, int):
        return context, context
    left, right = context
    return int(left), int(right)


def mfcc(clip: AudioClip, n_coeffs: int = 20, context_stack: int | tuple[int, int] = 0, n_mels: int = N_MELS) -> FeatureMatrix:
    """Orthonormal DCT-II of log-Mel frames, optionally context-stacked."""
    if n_coeffs > n_mels:
        raise ValueError(f"n_coeffs ({n_coeffs}) cannot exceed n_mels ({n_mels})")
    lm = log_mel(clip, n_mels)
    coeffs = dct(lm.values, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    left, right = _context(context_stack)
    return FeatureMatrix(stack_context(coeffs, left, right), lm.frame_rate, "mfcc", clip.source_id)


# ---------------------------------------------------------------- CQT family


def _cqt_kernels(params: CQTParams) -> tuple[np.ndarray, int]:
    """Dense (N_max, 2 * n_bins) matrix of centred [real | imag] kernels."""
    sr = params.sample_rate
    freqs = params.center_frequencies()
    lengths = 2 * np.floor(params.q * sr / freqs / 2).astype(int) + 1
    n_max = int(lengths.max())
    half_max = n_max // 2
    kern = np.zeros((n_max, 2 * params.n_bins))
    for k, (f, n) in enumerate(zip(freqs, lengths)):
        w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / (n - 1))
        w = w / w.sum()
        tau = np.arange(n) - n // 2
        phase = 2 * np.pi * f * tau / sr
        rows = slice(half_max - n // 2, half_max + n // 2 + 1)
        kern[rows, k] = w * np.cos(phase)
        kern[rows, params.n_bins + k] = -w * np.sin(phase)
    return kern, n_max


_KERNEL_CACHE: dict[CQTParams, tuple[np.ndarray, int]] = {}


def cqt_magnitude(clip: AudioClip, params: CQTParams | None = None) -> np.ndarray:
    """Linear CQT magnitudes (frames x n_bins); a unit-amplitude bin-centre sine reads about 0.5."""
    params = params or CQTParams(sample_rate=clip.sample_rate)
    if params.sample_rate != clip.sample_rate:
        raise ValueError(f"CQT parameters are for {params.sample_rate} Hz, clip is {clip.sample_rate} Hz")
    if params not in _KERNEL_CACHE:
        _KERNEL_CACHE[params] = _cqt_kernels(params)
    kern, n_max = _KERNEL_CACHE[params]
    half = n_max // 2
    # zero padding: a reflected tone flips phase at the edge and smears the first frames
    x = np.pad(clip.samples, half)
    frames = n_frames(clip.samples.size, params.hop)
    need = (frames - 1) * params.hop + n_max
    if x.size < need:
        x = np.pad(x, (0, need - x.size))
    win = sliding_window_view(x, n_max)
    out = np.empty((frames, params.n_bins))
    for start in range(0, frames, 128):
        stop = min(frames, start + 128)
        block = np.ascontiguousarray(win[start * params.hop : (stop - 1) * params.hop + 1 : params.hop]) @ kern
        out[start:stop] = np.hypot(block[:, : params.n_bins], block[:, params.n_bins :])
    return out


def cqt(clip: AudioClip, params: CQTParams | None = None, floor: float = CQT_LOG_FLOOR) -> FeatureMatrix:
    """Log-magnitude constant-Q transform, one frame per model frame."""
    params = params or CQTParams(sample_rate=clip.sample_rate)
    mag = cqt_magnitude(clip, params)
    return FeatureMatrix(np.log(np.maximum(mag, floor)), clip.sample_rate / params.hop, "cqt", clip.source_id)


def chroma(clip: AudioClip, context_stack: int | tuple[int, int] = 0, params: CQTParams | None = None) -> FeatureMatrix:
    """12-bin pitch-class profile folded from CQT magnitudes, L2-normalised per frame.

    Class 0 is C. ``context_stack`` is either a symmetric half-width or a
    ``(left, right)`` pair; ``(10, 11)`` gives 12 * 22 = 264 dims.
    """
    params = params or CQTParams(sample_rate=clip.sample_rate)
    mag = cqt_magnitude(clip, params)
    midi = 69.0 + 12.0 * np.log2(params.center_frequencies() / 440.0)
    pcs = np.round(midi).astype(int) % 12
    folded = np.zeros((mag.shape[0], 12))
    for pc in range(12):
        folded[:, pc] = mag[:, pcs == pc].sum(axis=1)
    norms = np.linalg.norm(folded, axis=1, keepdims=True)
    folded = np.where(norms > 1e-12, folded / np.where(norms > 1e-12, norms, 1.0), 0.0)
    left, right = _context(context_stack)
    return FeatureMatrix(stack_context(folded, left, right), clip.sample_rate / params.hop, "chroma", clip.source_id)


# ---------------------------------------------------------------- persistence


def write_features(path: str | Path, fm: FeatureMatrix) -> None:
    meta = {"kind": fm.kind, "frames": fm.frames, "dims": fm.dims, "frame_rate": fm.frame_rate,
            "source_id": fm.source_id, "byte_order": "little"}
    containers.write(path, containers.FEATURE_MAGIC, meta, {"values": fm.values.astype(np.float32)})


def read_features(path: str | Path) -> FeatureMatrix:
    meta, arrays = containers.read(path, containers.FEATURE_MAGIC)
    values = arrays["values"]
    if values.shape != (meta["frames"], meta["dims"]):
        raise containers.ContainerError(f"{path}: header shape disagrees with payload {values.shape}")
    return FeatureMatrix(values.astype(np.float64), meta["frame_rate"], meta["kind"], meta.get("source_id", ""))


EXTRACTORS = {
    "logmel": lambda clip: log_mel(clip),
    "chroma": lambda clip: chroma(clip, CHROMA_CONTEXT),
    "mfcc": lambda clip: mfcc(clip),
    "cqt": lambda clip: cqt(clip),
}
