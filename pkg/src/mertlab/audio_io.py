"""Mono audio clips: WAV read/write, resampling, segmentation, corpus manifests."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

log = logging.getLogger(__name__)

CANONICAL_RATE = 24000

_PCM = 0x0001
_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE data."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedCodecError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    padded: bool = False
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size < 1:
            raise ValueError("an AudioClip needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"clip {self.source_id!r} contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


def _clip_unit(samples: np.ndarray, source_id: str) -> np.ndarray:
    over = int(np.count_nonzero(np.abs(samples) > 1.0))
    if over:
        log.warning("clip %s: %d samples outside [-1, 1] were clipped", source_id, over)
        samples = np.clip(samples, -1.0, 1.0)
    return samples


def load_wav(path: str | Path, source_id: str | None = None) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file as a mono clip (stereo is averaged)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise WavFormatError("file too short for a RIFF header", 0)
    if data[0:4] != b"RIFF":
        raise WavFormatError("missing RIFF tag", 0)
    if data[8:12] != b"WAVE":
        raise WavFormatError("missing WAVE tag", 8)

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(data):
                raise WavFormatError("truncated fmt chunk", pos)
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavFormatError("truncated extensible fmt chunk", pos)
                (tag,) = struct.unpack_from("<H", data, body + 24)
            fmt = (tag, channels, rate, block_align, bits, pos)
        elif cid == b"data":
            end = min(body + size, len(data))
            payload = (body, end)
            break
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavFormatError("no fmt chunk before data", pos)
    if payload is None:
        raise WavFormatError("no data chunk", pos)

    tag, channels, rate, block_align, bits, fmt_pos = fmt
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{channels}-channel audio is not supported")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"format tag {tag:#06x} with {bits} bits per sample is not supported")
    if rate <= 0:
        raise WavFormatError("sample rate must be positive", fmt_pos + 12)

    start, end = payload
    frame_bytes = dtype.itemsize * channels
    n_frames = (end - start) // frame_bytes
    if n_frames < 1:
        raise WavFormatError("data chunk holds no complete frames", start)
    raw = np.frombuffer(data, dtype=dtype, count=n_frames * channels, offset=start)
    samples = raw.astype(np.float64).reshape(n_frames, channels) * scale
    if not np.all(np.isfinite(samples)):
        raise WavFormatError("non-finite float samples", start)
    mono = samples.mean(axis=1)
    sid = source_id if source_id is not None else path.stem
    return AudioClip(_clip_unit(mono, sid), int(rate), sid)


def write_wav(path: str | Path, clip: AudioClip, pcm16: bool = False) -> None:
    """Write a mono WAV file, float32 by default."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        body = np.round(x * 32767.0).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    else:
        body = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(body)) + body
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited (Kaiser-windowed sinc, polyphase) resampling.

    Output length is ``round(len * target / source)``.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.source_id, clip.padded, dict(clip.labels))
    g = gcd(int(target_rate), int(clip.sample_rate))
    up, down = target_rate // g, clip.sample_rate // g
    y = resample_poly(clip.samples, up, down)
    n_out = max(1, int(round(clip.samples.size * target_rate / clip.sample_rate)))
    if y.size >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.size))
    return AudioClip(y, int(target_rate), clip.source_id, clip.padded, dict(clip.labels))


def segment_clip(
    clip: AudioClip,
    seconds: float,
    mode: str = "sequential",
    seed: int = 0,
    align: int = 1,
) -> list[AudioClip]:
    """Cut fixed-length windows from a clip.

    ``random`` returns one uniformly placed window whose offset is a multiple of
    ``align`` samples; ``sequential`` tiles non-overlapping windows and drops the
    short remainder. A clip shorter than the window comes back zero-padded with
    ``padded=True``.
    """
    if seconds <= 0:
        raise ValueError("segment length must be positive")
    if mode not in ("random", "sequential"):
        raise ValueError(f"unknown segmentation mode {mode!r}")
    width = int(round(seconds * clip.sample_rate))
    n = clip.samples.size
    if n < width:
        padded = np.pad(clip.samples, (0, width - n))
        return [AudioClip(padded, clip.sample_rate, clip.source_id, True, dict(clip.labels))]
    if mode == "random":
        rng = np.random.default_rng(seed)
        slots = (n - width) // align + 1
        offsets = [int(rng.integers(0, slots)) * align]
    else:
        offsets = [i * width for i in range(n // width)]
    return [
        AudioClip(clip.samples[o : o + width].copy(), clip.sample_rate, f"{clip.source_id}@{o}", False, dict(clip.labels))
        for o in offsets
    ]


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    path: Path
    labels: dict[str, str]

    @property
    def source_id(self) -> str:
        return self.labels.get("id", self.path.stem)


def parse_manifest_line(line: str, base: Path | None = None) -> ManifestEntry:
    path_part, _, label_part = line.rstrip("\n").partition("\t")
    labels = {}
    for item in filter(None, label_part.split(";")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"malformed label {item!r} in manifest line {line!r}")
        labels[key.strip()] = value.strip()
    p = Path(path_part)
    if base is not None and not p.is_absolute():
        p = base / p
    return ManifestEntry(p, labels)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    return [parse_manifest_line(line, path.parent) for line in lines if line.strip()]


def format_manifest_line(path: str | Path, labels: dict) -> str:
    return f"{path}\t" + ";".join(f"{k}={v}" for k, v in labels.items())


def write_manifest(path: str | Path, entries: list[tuple[str | Path, dict]]) -> None:
    text = "".join(format_manifest_line(p, lab) + "\n" for p, lab in entries)
    Path(path).write_text(text, encoding="utf-8")


def load_manifest_clips(path: str | Path, target_rate: int = CANONICAL_RATE) -> list[AudioClip]:
    clips = []
    for entry in read_manifest(path):
        clip = load_wav(entry.path, entry.source_id)
        if clip.sample_rate != target_rate:
            clip = resample(clip, target_rate)
        clip.labels = dict(entry.labels)
        clips.append(clip)
    return clips
