"""Acoustic teachers: K-means codebooks, a residual K-means codec, and target bundles."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers, dsp
from .audio_io import AudioClip

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    """Not enough distinct rows to place every centroid."""


class AlignmentError(RuntimeError):
    """Teacher features disagree on frame count (an internal invariant breach)."""


@dataclass
class Codebook:
    centroids: np.ndarray
    feature_kind: str = ""
    training_inertia_trace: list[float] = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def standardize(self, rows: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return rows
        return (rows - self.mean) / self.std


def _rows(features) -> np.ndarray:
    if isinstance(features, dsp.FeatureMatrix):
        return features.values
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], dsp.FeatureMatrix):
        return np.concatenate([f.values for f in features], axis=0)
    return np.asarray(features, dtype=np.float64)


def standardization_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def _assign(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (lowest index on ties) and the exact squared distance."""
    c_sq = _sq_norms(c)
    labels = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        xb = x[s : s + chunk]
        x_sq = _sq_norms(xb)
        d = x_sq[:, None] - 2.0 * (xb @ c.T) + c_sq[None, :]
        best = d.min(axis=1)
        slack = 1e-9 * (x_sq + c_sq.max()) + 1e-300
        near = d <= (best + slack)[:, None]
        lab = np.argmax(near, axis=1)
        for i in np.flatnonzero(near.sum(axis=1) > 1):
            cand = np.flatnonzero(near[i])
            exact = ((c[cand] - xb[i]) ** 2).sum(axis=1)
            lab[i] = cand[np.argmin(exact)]
        labels[s : s + chunk] = lab
    diff = x - c[labels]
    return labels, _sq_norms(diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _canonical_order(c: np.ndarray) -> np.ndarray:
    return c[np.lexsort(c.T[::-1])]


def kmeans_fit(
    features,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    feature_kind: str = "",
    standardize: bool = False,
) -> Codebook:
    """Lloyd's algorithm from a seeded k-means++ start.

    Rows are put in lexicographic order first, so the result does not depend on
    input row order; centroids are emitted sorted by their coordinates. Stops
    when the largest centroid move falls below ``tol`` relative to the centroid
    scale, or after ``max_iters``. The inertia trace (one entry per assignment
    step) is nonincreasing.
    """
    x = _rows(features)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D row matrix, got shape {x.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    mean = std = None
    if standardize:
        mean, std = standardization_stats(x)
        x = (x - mean) / std
    x = x[np.lexsort(x.T[::-1])]
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < k:
        raise DegenerateDataError(f"{feature_kind or 'features'}: {n_distinct} distinct rows for k={k}")

    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    labels, dist = _assign(x, c)
    trace = [float(dist.sum())]
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        c_new = c.copy()
        filled = counts > 0
        c_new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            far = np.argsort(-dist, kind="stable")
            for j, i in zip(empty, far):
                c_new[j] = x[i]
        new_labels, new_dist = _assign(x, c_new)
        inertia = float(new_dist.sum())
        if inertia > trace[-1]:
            # only reachable through rounding at the fixed point
            break
        shift = float(np.sqrt(((c_new - c) ** 2).sum(axis=1).max()))
        scale = max(float(np.sqrt(_sq_norms(c).max())), 1e-12)
        c, labels, dist = c_new, new_labels, new_dist
        trace.append(inertia)
        if shift <= tol * scale:
            break
    return Codebook(_canonical_order(c), feature_kind, trace, mean, std)


def kmeans_assign(features, codebook: Codebook) -> np.ndarray:
    x = _rows(features)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise ValueError(f"feature dims {x.shape[-1]} do not match codebook dims {codebook.dim} ({codebook.feature_kind})")
    labels, _ = _assign(codebook.standardize(x), codebook.centroids)
    return labels


# ---------------------------------------------------------------- residual VQ


@dataclass
class RVQCodec:
    stages: list[Codebook]
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    residual_energy: list[float] = field(default_factory=list)
    feature_kind: str = "logmel"

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def standardize(self, rows: np.ndarray) -> np.ndarray:
        return rows if self.mean is None else (rows - self.mean) / self.std


def rvq_fit(
    features,
    stages: int = 8,
    k: int = 1024,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    standardize: bool = True,
    feature_kind: str = "logmel",
) -> RVQCodec:
    """Fit ``stages`` K-means codebooks, each on the residual left by the previous ones.

    ``residual_energy[j]`` is the mean squared residual entry after stage ``j``.
    """
    x = _rows(features)
    mean = std = None
    if standardize:
        mean, std = standardization_stats(x)
        x = (x - mean) / std
    residual = x.copy()
    books, energy = [], []
    for j in range(stages):
        cb = kmeans_fit(residual, k, seed=seed + j, max_iters=max_iters, tol=tol, feature_kind=f"{feature_kind}/rvq{j}")
        labels, _ = _assign(residual, cb.centroids)
        residual = residual - cb.centroids[labels]
        books.append(cb)
        energy.append(float(np.mean(residual**2)))
    return RVQCodec(books, mean, std, energy, feature_kind)


def rvq_encode(features, codec: RVQCodec) -> np.ndarray:
    """L x n_stages token matrix."""
    x = _rows(features)
    if x.ndim != 2 or x.shape[1] != codec.dim:
        raise ValueError(f"feature dims {x.shape[-1]} do not match codec dims {codec.dim}")
    residual = codec.standardize(x)
    tokens = np.empty((x.shape[0], codec.n_stages), dtype=np.int64)
    for j, cb in enumerate(codec.stages):
        labels, _ = _assign(residual, cb.centroids)
        tokens[:, j] = labels
        residual = residual - cb.centroids[labels]
    return tokens


def rvq_decode(tokens: np.ndarray, codec: RVQCodec, standardized: bool = False) -> dsp.FeatureMatrix:
    """Sum of the selected codewords; mapped back to feature units unless ``standardized``."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != codec.n_stages:
        raise ValueError(f"expected an L x {codec.n_stages} token matrix, got {tokens.shape}")
    out = np.zeros((tokens.shape[0], codec.dim))
    for j, cb in enumerate(codec.stages):
        col = tokens[:, j]
        if col.size and (col.min() < 0 or col.max() >= cb.k):
            raise IndexError(f"stage {j} token out of range [0, {cb.k})")
        out += cb.centroids[col]
    if not standardized and codec.mean is not None:
        out = out * codec.std + codec.mean
    return dsp.FeatureMatrix(out, dsp.FRAME_RATE, codec.feature_kind)


# ---------------------------------------------------------------- teachers and targets


@dataclass
class TeacherConfig:
    kind: str = "rvq"  # "kmeans" | "rvq"
    kmeans_k: tuple[int, int] = (300, 200)
    rvq_stages: int = 8
    rvq_k: int = 1024
    rvq_standardize: bool = True
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-6
    chroma_context: tuple[int, int] = dsp.CHROMA_CONTEXT
    cqt: dsp.CQTParams = field(default_factory=dsp.CQTParams)

    def __post_init__(self):
        if self.kind not in ("kmeans", "rvq"):
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        self.kmeans_k = tuple(self.kmeans_k)
        self.chroma_context = tuple(self.chroma_context)
        if isinstance(self.cqt, dict):
            self.cqt = dsp.CQTParams(**self.cqt)


@dataclass
class TargetBundle:
    acoustic_tokens: np.ndarray
    cqt_target: dsp.FeatureMatrix
    vocab_sizes: tuple[int, ...]
    source_id: str = ""
    frame_rate: float = dsp.FRAME_RATE

    def __post_init__(self):
        self.acoustic_tokens = np.asarray(self.acoustic_tokens, dtype=np.int64)
        if self.acoustic_tokens.shape[0] != self.cqt_target.frames:
            raise AlignmentError(
                f"{self.source_id}: {self.acoustic_tokens.shape[0]} token frames vs {self.cqt_target.frames} CQT frames"
            )

    @property
    def frames(self) -> int:
        return self.acoustic_tokens.shape[0]

    def crop(self, start: int, length: int) -> TargetBundle:
        cq = dsp.FeatureMatrix(self.cqt_target.values[start : start + length], self.frame_rate, "cqt", self.source_id)
        return TargetBundle(self.acoustic_tokens[start : start + length], cq, self.vocab_sizes, self.source_id)


@dataclass
class Teacher:
    config: TeacherConfig
    codebooks: list[Codebook] = field(default_factory=list)
    codec: RVQCodec | None = None

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        if self.config.kind == "rvq":
            return tuple(cb.k for cb in self.codec.stages)
        return tuple(cb.k for cb in self.codebooks)


def _teacher_features(clip: AudioClip, config: TeacherConfig) -> dict[str, dsp.FeatureMatrix]:
    feats = {"logmel": dsp.log_mel(clip)}
    if config.kind == "kmeans":
        feats["chroma"] = dsp.chroma(clip, config.chroma_context, config.cqt)
    return feats


def fit_teacher(clips: list[AudioClip], config: TeacherConfig) -> Teacher:
    feats = [_teacher_features(c, config) for c in clips]
    logmel = np.concatenate([f["logmel"].values for f in feats])
    if config.kind == "rvq":
        codec = rvq_fit(logmel, config.rvq_stages, config.rvq_k, config.seed, config.max_iters, config.tol,
                        standardize=config.rvq_standardize)
        return Teacher(config, codec=codec)
    chroma_rows = np.concatenate([f["chroma"].values for f in feats])
    k_mel, k_chroma = config.kmeans_k
    books = [
        kmeans_fit(logmel, k_mel, config.seed, config.max_iters, config.tol, "logmel", standardize=True),
        kmeans_fit(chroma_rows, k_chroma, config.seed + 1, config.max_iters, config.tol, "chroma", standardize=True),
    ]
    return Teacher(config, codebooks=books)


def build_targets(clip: AudioClip, teacher: Teacher) -> TargetBundle:
    """Acoustic tokens (L x J) and the log-CQT target, frame-aligned at 75 Hz."""
    feats = _teacher_features(clip, teacher.config)
    cq = dsp.cqt(clip, teacher.config.cqt)
    lengths = {name: f.frames for name, f in feats.items()} | {"cqt": cq.frames}
    if len(set(lengths.values())) != 1:
        raise AlignmentError(f"{clip.source_id}: frame counts disagree {lengths}")
    if teacher.config.kind == "rvq":
        tokens = rvq_encode(feats["logmel"], teacher.codec)
    else:
        tokens = np.stack(
            [kmeans_assign(feats["logmel"], teacher.codebooks[0]), kmeans_assign(feats["chroma"], teacher.codebooks[1])],
            axis=1,
        )
    return TargetBundle(tokens, cq, teacher.vocab_sizes, clip.source_id)


# ---------------------------------------------------------------- persistence


def _codebook_meta(cb: Codebook) -> dict:
    return {"feature_kind": cb.feature_kind, "k": cb.k, "dim": cb.dim, "inertia_trace": cb.training_inertia_trace,
            "standardized": cb.mean is not None}


def write_codebook(path: str | Path, cb: Codebook) -> None:
    arrays = {"centroids": cb.centroids.astype(np.float32)}
    if cb.mean is not None:
        arrays["mean"] = cb.mean.astype(np.float32)
        arrays["std"] = cb.std.astype(np.float32)
    containers.write(path, containers.CODEBOOK_MAGIC, {"type": "kmeans", **_codebook_meta(cb)}, arrays)


def read_codebook(path: str | Path) -> Codebook:
    meta, arrays = containers.read(path, containers.CODEBOOK_MAGIC)
    if meta.get("type") != "kmeans":
        raise containers.ContainerError(f"{path} holds a {meta.get('type')} codebook, not kmeans")
    c = arrays["centroids"].astype(np.float64)
    mean = arrays["mean"].astype(np.float64) if "mean" in arrays else None
    std = arrays["std"].astype(np.float64) if "std" in arrays else None
    return Codebook(c, meta["feature_kind"], list(meta["inertia_trace"]), mean, std)


def write_codec(path: str | Path, codec: RVQCodec) -> None:
    arrays = {f"stage{j}": cb.centroids.astype(np.float32) for j, cb in enumerate(codec.stages)}
    if codec.mean is not None:
        arrays["mean"] = codec.mean.astype(np.float32)
        arrays["std"] = codec.std.astype(np.float32)
    meta = {"type": "rvq", "feature_kind": codec.feature_kind, "stages": codec.n_stages,
            "k": [cb.k for cb in codec.stages], "dim": codec.dim, "residual_energy": codec.residual_energy,
            "inertia_traces": [cb.training_inertia_trace for cb in codec.stages]}
    containers.write(path, containers.CODEBOOK_MAGIC, meta, arrays)


def read_codec(path: str | Path) -> RVQCodec:
    meta, arrays = containers.read(path, containers.CODEBOOK_MAGIC)
    if meta.get("type") != "rvq":
        raise containers.ContainerError(f"{path} holds a {meta.get('type')} codebook, not rvq")
    books = [
        Codebook(arrays[f"stage{j}"].astype(np.float64), f"{meta['feature_kind']}/rvq{j}", list(meta["inertia_traces"][j]))
        for j in range(meta["stages"])
    ]
    mean = arrays["mean"].astype(np.float64) if "mean" in arrays else None
    std = arrays["std"].astype(np.float64) if "std" in arrays else None
    return RVQCodec(books, mean, std, list(meta["residual_energy"]), meta["feature_kind"])


def write_targets(path: str | Path, bundle: TargetBundle) -> None:
    meta = {"source_id": bundle.source_id, "frames": bundle.frames, "frame_rate": bundle.frame_rate,
            "vocab_sizes": list(bundle.vocab_sizes), "cqt_bins": bundle.cqt_target.dims}
    arrays = {"tokens": bundle.acoustic_tokens.astype(np.int32), "cqt": bundle.cqt_target.values.astype(np.float32)}
    containers.write(path, containers.TARGET_MAGIC, meta, arrays)


def read_targets(path: str | Path) -> TargetBundle:
    meta, arrays = containers.read(path, containers.TARGET_MAGIC)
    cq = dsp.FeatureMatrix(arrays["cqt"].astype(np.float64), meta["frame_rate"], "cqt", meta["source_id"])
    return TargetBundle(arrays["tokens"].astype(np.int64), cq, tuple(meta["vocab_sizes"]), meta["source_id"],
                        meta["frame_rate"])
