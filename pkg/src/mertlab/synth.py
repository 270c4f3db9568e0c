"""Deterministic synthetic audio with analytic labels.

The labelled task generators produce the desk-scale downstream tasks: pitch
(24 semitone classes), chord root (12 classes), beat tracking (click tracks) and
an arousal-style regression (slope of the amplitude envelope).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import CANONICAL_RATE, AudioClip, write_manifest, write_wav

KINDS = ("sine", "harmonic_tone", "triad_chord", "click_track", "noise")
PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    kind: str
    fundamental: float = 440.0
    duration: float = 1.0
    amplitude: float = 0.5
    harmonics: int = 6
    beat_period: float = 0.5
    seed: int = 0
    quality: str = "major"


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


def hz_to_midi(hz: float) -> float:
    return 69.0 + 12.0 * np.log2(hz / 440.0)


def _fade(x: np.ndarray, sr: int, seconds: float = 0.005) -> np.ndarray:
    n = min(int(seconds * sr), x.size // 2)
    if n > 0:
        ramp = np.linspace(0.0, 1.0, n, endpoint=False)
        x[:n] *= ramp
        x[-n:] *= ramp[::-1]
    return x


def _harmonic(f0: float, t: np.ndarray, sr: int, harmonics: int, rng: np.random.Generator) -> np.ndarray:
    rolloff = rng.uniform(0.3, 0.9)
    out = np.zeros_like(t)
    total = 0.0
    for h in range(1, max(harmonics, 1) + 1):
        if h * f0 >= sr / 2:
            break
        a = rolloff ** (h - 1)
        out += a * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        total += a
    return out / total if total else out


def synth(spec: SynthSpec, sample_rate: int = CANONICAL_RATE) -> AudioClip:
    """Render ``spec``; the returned clip's ``labels`` hold the ground truth."""
    if spec.kind not in KINDS:
        raise SynthError(f"unknown synth kind {spec.kind!r}")
    if spec.duration <= 0:
        raise SynthError("duration must be positive")
    nyquist = sample_rate / 2
    top = spec.fundamental * (1.5 if spec.kind == "triad_chord" else 1.0)
    if spec.kind != "noise" and not 0 < top < nyquist:
        raise SynthError(f"fundamental {spec.fundamental} Hz is outside (0, {nyquist}) Hz")

    n = max(1, int(round(spec.duration * sample_rate)))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(spec.seed)
    labels: dict = {"kind": spec.kind}

    if spec.kind == "sine":
        x = np.sin(2 * np.pi * spec.fundamental * t)
        labels.update(pitch_hz=spec.fundamental, midi=round(float(hz_to_midi(spec.fundamental)), 3))
    elif spec.kind == "harmonic_tone":
        x = _fade(_harmonic(spec.fundamental, t, sample_rate, spec.harmonics, rng), sample_rate)
        labels.update(pitch_hz=spec.fundamental, midi=round(float(hz_to_midi(spec.fundamental)), 3))
    elif spec.kind == "triad_chord":
        if spec.quality not in ("major", "minor"):
            raise SynthError(f"unknown triad quality {spec.quality!r}")
        third = 4 if spec.quality == "major" else 3
        x = sum(
            _harmonic(spec.fundamental * 2 ** (iv / 12), t, sample_rate, spec.harmonics, rng) for iv in (0, third, 7)
        ) / 3.0
        x = _fade(x, sample_rate)
        root = int(round(hz_to_midi(spec.fundamental))) % 12
        labels.update(root=root, root_name=PITCH_CLASSES[root], quality=spec.quality)
    elif spec.kind == "click_track":
        if spec.beat_period <= 0:
            raise SynthError("beat_period must be positive")
        x = np.zeros(n)
        beats = []
        k = 0
        while k * spec.beat_period < spec.duration - 1e-12:
            beat = round(k * spec.beat_period, 9)
            start = int(round(beat * sample_rate))
            m = min(n - start, int(0.03 * sample_rate))
            tt = np.arange(m) / sample_rate
            x[start : start + m] += np.exp(-tt / 0.005) * np.sin(2 * np.pi * spec.fundamental * tt)
            beats.append(beat)
            k += 1
        labels.update(beats=beats, beat_period=spec.beat_period)
    else:
        x = rng.uniform(-1.0, 1.0, n)

    x = np.clip(spec.amplitude * x, -1.0, 1.0)
    return AudioClip(x, sample_rate, f"{spec.kind}-{spec.seed}", labels=labels)


# ---------------------------------------------------------------- labelled corpora


def _split_for(i: int, n: int) -> str:
    """60/20/20 train/valid/test by position within a class."""
    r = i / n
    return "train" if r < 0.6 else ("valid" if r < 0.8 else "test")


def pretrain_corpus(n_clips: int = 64, seconds: float = 2.0, seed: int = 0, sample_rate: int = CANONICAL_RATE) -> list[AudioClip]:
    """Short 'music-like' clips: runs of notes and chords, sometimes over a click track."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    clips = []
    for i in range(n_clips):
        x = np.zeros(n)
        pos = 0
        while pos < n:
            length = min(n - pos, int(rng.uniform(0.25, 0.75) * sample_rate))
            kind = "triad_chord" if rng.random() < 0.4 else "harmonic_tone"
            midi = int(rng.integers(40, 80))
            spec = SynthSpec(
                kind=kind,
                fundamental=midi_to_hz(midi),
                duration=length / sample_rate,
                amplitude=float(rng.uniform(0.2, 0.8)),
                harmonics=int(rng.integers(1, 9)),
                seed=int(rng.integers(2**31)),
                quality="major" if rng.random() < 0.5 else "minor",
            )
            seg = synth(spec, sample_rate).samples
            x[pos : pos + seg.size] += seg[: n - pos]
            pos += seg.size
        if rng.random() < 0.3:
            clicks = synth(
                SynthSpec("click_track", fundamental=1500.0, duration=seconds, amplitude=0.3,
                          beat_period=float(rng.uniform(0.3, 0.7)), seed=i),
                sample_rate,
            )
            x = x + clicks.samples
        clips.append(AudioClip(np.clip(x, -1, 1), sample_rate, f"pre{i:04d}", labels={"split": "train"}))
    return clips


def pitch_task(n_per_class: int = 10, n_classes: int = 24, base_midi: int = 48, seconds: float = 1.0,
               seed: int = 0, sample_rate: int = CANONICAL_RATE) -> list[AudioClip]:
    """Harmonic tones with random timbre and level; label ``pitch`` = semitone class index."""
    rng = np.random.default_rng(seed)
    clips = []
    for c in range(n_classes):
        for i in range(n_per_class):
            spec = SynthSpec("harmonic_tone", fundamental=midi_to_hz(base_midi + c) * 2 ** (rng.uniform(-0.2, 0.2) / 12),
                             duration=seconds, amplitude=float(rng.uniform(0.1, 0.8)),
                             harmonics=int(rng.integers(1, 10)), seed=int(rng.integers(2**31)))
            clip = synth(spec, sample_rate)
            noise = rng.normal(0, 0.01, clip.samples.size)
            clips.append(AudioClip(np.clip(clip.samples + noise, -1, 1), sample_rate, f"pitch{c:02d}_{i:03d}",
                                   labels={"pitch": c, "split": _split_for(i, n_per_class)}))
    return clips


def chord_task(n_per_class: int = 10, seconds: float = 1.0, seed: int = 0,
               sample_rate: int = CANONICAL_RATE) -> list[AudioClip]:
    """Major/minor triads in random octaves; label ``root`` = pitch class of the root."""
    rng = np.random.default_rng(seed)
    clips = []
    for root in range(12):
        for i in range(n_per_class):
            midi = 36 + root + 12 * int(rng.integers(0, 3))
            spec = SynthSpec("triad_chord", fundamental=midi_to_hz(midi), duration=seconds,
                             amplitude=float(rng.uniform(0.2, 0.8)), harmonics=int(rng.integers(1, 8)),
                             seed=int(rng.integers(2**31)), quality="major" if rng.random() < 0.5 else "minor")
            clip = synth(spec, sample_rate)
            clips.append(AudioClip(clip.samples, sample_rate, f"chord{root:02d}_{i:03d}",
                                   labels={"root": root, "quality": spec.quality, "split": _split_for(i, n_per_class)}))
    return clips


def beat_task(n_clips: int = 20, seconds: float = 4.0, seed: int = 0, sample_rate: int = CANONICAL_RATE) -> list[AudioClip]:
    """Click tracks over a sustained tone; label ``beats`` = onset times in seconds."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        period = float(rng.uniform(0.4, 0.8))
        clicks = synth(SynthSpec("click_track", fundamental=float(rng.uniform(800, 2000)), duration=seconds,
                                 amplitude=0.6, beat_period=period, seed=i), sample_rate)
        bed = synth(SynthSpec("harmonic_tone", fundamental=midi_to_hz(int(rng.integers(40, 70))), duration=seconds,
                              amplitude=0.2, harmonics=4, seed=int(rng.integers(2**31))), sample_rate)
        x = np.clip(clicks.samples + bed.samples, -1, 1)
        clips.append(AudioClip(x, sample_rate, f"beat{i:03d}",
                               labels={"beats": clicks.labels["beats"], "split": _split_for(i, n_clips)}))
    return clips


def arousal_task(n_clips: int = 60, seconds: float = 1.0, seed: int = 0, sample_rate: int = CANONICAL_RATE) -> list[AudioClip]:
    """Tones under a linear gain ramp; label ``slope`` = gain change per second."""
    rng = np.random.default_rng(seed)
    clips = []
    n = int(round(seconds * sample_rate))
    for i in range(n_clips):
        g0, g1 = rng.uniform(0.05, 0.9, size=2)
        tone = synth(SynthSpec("harmonic_tone", fundamental=midi_to_hz(int(rng.integers(45, 75))), duration=seconds,
                               amplitude=1.0, harmonics=int(rng.integers(1, 8)), seed=int(rng.integers(2**31))),
                     sample_rate)
        x = tone.samples * np.linspace(g0, g1, n)
        clips.append(AudioClip(x, sample_rate, f"arousal{i:03d}",
                               labels={"slope": float((g1 - g0) / seconds), "split": _split_for(i, n_clips)}))
    return clips


TASKS = {"pitch": pitch_task, "chord": chord_task, "beat": beat_task, "arousal": arousal_task}


def _label_text(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(f"{v:.12g}" for v in value)
    return str(value)


def write_corpus(clips: list[AudioClip], out_dir: str | Path, manifest_name: str = "manifest.tsv") -> Path:
    """Write clips as float32 WAV files plus a manifest carrying their labels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clips:
        name = f"{clip.source_id}.wav"
        write_wav(out_dir / name, clip)
        labels = {"id": clip.source_id}
        labels.update({k: _label_text(v) for k, v in clip.labels.items()})
        entries.append((name, labels))
    manifest = out_dir / manifest_name
    write_manifest(manifest, entries)
    return manifest
