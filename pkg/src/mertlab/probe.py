"""Frozen-representation probing: windowed embedding extraction, a one-hidden-layer
MLP probe with a learning-rate grid, and the evaluation metrics."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import grad as G
from .audio_io import AudioClip
from .dsp import FeatureMatrix, write_features
from .model import Encoder
from .optim import Adam

log = logging.getLogger(__name__)

TASK_TYPES = ("multiclass", "multilabel", "regression", "framewise")
HOP = 320


class DegenerateTaskError(ValueError):
    pass


class MetricError(ValueError):
    pass


class KeyEncodingError(ValueError):
    pass


@dataclass
class ProbeConfig:
    hidden_units: int = 512
    batch_size: int = 64
    lr_grid: tuple[float, ...] = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2)
    dropout: float = 0.25
    max_epochs: int = 100
    early_stop_patience: int = 10
    lr_plateau_patience: int = 5
    lr_plateau_factor: float = 0.1
    layer: int | str = -1  # hidden-state index, or "mean" over all hidden states
    window_seconds: float = 5.0
    seed: int = 0

    def __post_init__(self):
        self.lr_grid = tuple(float(v) for v in self.lr_grid)
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")
        if self.early_stop_patience < 1 or self.lr_plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.hidden_units < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("hidden_units, batch_size and max_epochs must be >= 1")
        if isinstance(self.layer, str) and self.layer != "mean":
            self.layer = int(self.layer)
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")


# ---------------------------------------------------------------- embeddings


@dataclass
class Embedding:
    values: np.ndarray  # (d_model,) or (frames, d_model)
    padded: bool
    windows: int
    source_id: str = ""


def resolve_layer(model: Encoder, layer) -> int | str:
    if layer == "mean":
        return "mean"
    n = model.config.n_layers + 1
    layer = int(layer)
    if not -n <= layer < n:
        raise IndexError(f"layer {layer} out of range for {n} hidden states (0..{n - 1} or negative)")
    return layer % n


def _as_model(model) -> Encoder:
    if isinstance(model, Encoder):
        return model
    from .pretrain import load_model

    return load_model(model)


def _windows(clip: AudioClip, window: int) -> list[tuple[np.ndarray, int]]:
    """Non-overlapping windows of ``window`` samples; the tail (or a short clip) is zero-padded.

    Returns (samples, valid frames) pairs.
    """
    x = clip.samples
    out = []
    for start in range(0, max(1, x.size), window):
        seg = x[start : start + window]
        valid = max(1, seg.size // HOP)
        if seg.size < window:
            seg = np.pad(seg, (0, window - seg.size))
        out.append((seg, valid))
    return out


def embed_clips(model, clips: list[AudioClip], layer=-1, window_seconds: float = 5.0,
                framewise: bool = False, batch_windows: int = 16) -> list[Embedding]:
    """Embeddings for many clips; windows are batched through the frozen encoder.

    Clip-level: frame-mean per window, then the mean over windows. Framewise:
    the valid frames of every window concatenated in time order. Frames that
    only cover zero padding are never pooled.
    """
    model = _as_model(model)
    which = resolve_layer(model, layer)
    window = max(HOP, int(round(window_seconds * clips[0].sample_rate / HOP)) * HOP) if clips else HOP
    jobs = []
    flags = []
    for ci, clip in enumerate(clips):
        wins = _windows(clip, window)
        flags.append(len(clip.samples) < window or clip.padded or len(clip.samples) % window != 0)
        jobs.extend((ci, seg, valid) for seg, valid in wins)
    per_clip: list[list[np.ndarray]] = [[] for _ in clips]
    with G.no_grad():
        for s in range(0, len(jobs), batch_windows):
            chunk = jobs[s : s + batch_windows]
            waves = np.stack([seg for _, seg, _ in chunk]).astype(model.dtype)
            out = model.forward(waves)
            if which == "mean":
                h = np.mean([hs.data for hs in out.hidden_states], axis=0)
            else:
                h = out.hidden_states[which].data
            for b, (ci, _, valid) in enumerate(chunk):
                frames = h[b, :valid].astype(np.float64)
                per_clip[ci].append(frames if framewise else frames.mean(axis=0))
    result = []
    for ci, clip in enumerate(clips):
        parts = per_clip[ci]
        values = np.concatenate(parts) if framewise else np.mean(parts, axis=0)
        result.append(Embedding(values, bool(flags[ci]), len(parts), clip.source_id))
    return result


def extract_embeddings(model, clip: AudioClip, layer=-1, window_seconds: float = 5.0, framewise: bool = False) -> Embedding:
    """Embedding of one clip from a frozen encoder (or checkpoint path)."""
    return embed_clips(model, [clip], layer, window_seconds, framewise)[0]


def parameter_hash(model: Encoder) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- metrics


def metric_accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    if pred.ndim == labels.ndim + 1:
        pred = pred.argmax(axis=-1)
    if pred.shape != labels.shape:
        raise MetricError(f"predictions {pred.shape} and labels {labels.shape} differ")
    if labels.size == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean(pred == labels))


def _binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(scores)  # average ranks: ties count one half
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _per_tag(scores, labels, fn, name: str, return_excluded: bool):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError(f"{name}: scores {s.shape} and labels {y.shape} differ")
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    values, excluded = [], 0
    for j in range(y.shape[1]):
        col = y[:, j].astype(bool)
        if col.all() or not col.any():
            excluded += 1
            continue
        values.append(fn(s[:, j], col))
    if excluded:
        log.info("%s: %d tag(s) with a single class excluded from the macro average", name, excluded)
    if not values:
        raise MetricError(f"{name}: every tag has a single class in the labels")
    value = float(np.mean(values))
    return (value, excluded) if return_excluded else value


def metric_roc_auc(scores, labels, return_excluded: bool = False):
    """Binary or macro-averaged multilabel ROC-AUC (ties count one half)."""
    return _per_tag(scores, labels, _binary_auc, "roc_auc", return_excluded)


def _binary_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # precision at each distinct threshold, credited once per positive at that threshold
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp = np.cumsum(y)[last]
    counts = last + 1
    pos_here = np.diff(np.r_[0, tp])
    return float(np.sum(pos_here * (tp / counts)) / y.sum())


def metric_average_precision(scores, labels, return_excluded: bool = False):
    """Average over positives of the precision at that positive's score (ties share a threshold)."""
    return _per_tag(scores, labels, _binary_ap, "average_precision", return_excluded)


def metric_r2(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise MetricError(f"r2: predictions {p.shape} and labels {y.shape} differ")
    if p.ndim == 1:
        p, y = p[:, None], y[:, None]
    ss_res = np.sum((y - p) ** 2, axis=0)
    ss_tot = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    per = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), np.where(ss_res == 0, 1.0, 0.0))
    return float(per.mean())


_PITCH_NAMES = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_MODES = {"major": "major", "maj": "major", "minor": "minor", "min": "minor"}


def parse_key(key) -> tuple[int, str]:
    """``(pitch_class, "major"|"minor")`` or a string such as ``"F# minor"`` / ``"Bb:maj"``."""
    if isinstance(key, str):
        parts = key.replace(":", " ").split()
        if len(parts) != 2 or not parts[0] or parts[0][0].upper() not in _PITCH_NAMES:
            raise KeyEncodingError(f"cannot parse key {key!r}")
        name = parts[0]
        pc = _PITCH_NAMES[name[0].upper()]
        for acc in name[1:]:
            if acc == "#":
                pc += 1
            elif acc == "b":
                pc -= 1
            else:
                raise KeyEncodingError(f"cannot parse key {key!r}")
        mode = _MODES.get(parts[1].lower())
        if mode is None:
            raise KeyEncodingError(f"unknown mode in key {key!r}")
        return pc % 12, mode
    try:
        pc, mode = key
    except (TypeError, ValueError):
        raise KeyEncodingError(f"key must be (pitch_class, mode), got {key!r}") from None
    if isinstance(pc, bool) or not isinstance(pc, (int, np.integer)) or not 0 <= pc < 12:
        raise KeyEncodingError(f"pitch class must be an integer in [0, 12), got {pc!r}")
    if mode not in _MODES:
        raise KeyEncodingError(f"mode must be major or minor, got {mode!r}")
    return int(pc), _MODES[mode]


def key_credit(pred, true) -> float:
    """1.0 exact, 0.5 fifth above (same mode), 0.3 relative, 0.2 parallel, else 0."""
    pp, pm = parse_key(pred)
    tp, tm = parse_key(true)
    if (pp, pm) == (tp, tm):
        return 1.0
    if pm == tm and (pp - tp) % 12 == 7:
        return 0.5
    if tm == "major" and pm == "minor" and (pp - tp) % 12 == 9:
        return 0.3
    if tm == "minor" and pm == "major" and (pp - tp) % 12 == 3:
        return 0.3
    if pp == tp and pm != tm:
        return 0.2
    return 0.0


def metric_refined_key_accuracy(pred_keys, true_keys) -> float:
    if len(pred_keys) != len(true_keys):
        raise MetricError(f"{len(pred_keys)} predicted keys vs {len(true_keys)} reference keys")
    if not len(true_keys):
        raise MetricError("refined key accuracy of an empty set")
    return float(np.mean([key_credit(p, t) for p, t in zip(pred_keys, true_keys)]))


def match_events(pred_events, true_events, tolerance: float = 0.02) -> int:
    """Size of a maximum one-to-one matching with |pred - true| <= tolerance.

    On a line with a common tolerance, sweeping both sorted lists and matching
    whenever the current pair is within tolerance is optimal.
    """
    p = np.sort(np.asarray(pred_events, dtype=np.float64))
    t = np.sort(np.asarray(true_events, dtype=np.float64))
    i = j = matched = 0
    while i < p.size and j < t.size:
        if abs(p[i] - t[j]) <= tolerance:
            matched += 1
            i += 1
            j += 1
        elif p[i] < t[j]:
            i += 1
        else:
            j += 1
    return matched


def metric_beat_f_measure(pred_events, true_events, tolerance: float = 0.02) -> float:
    n_pred, n_true = len(pred_events), len(true_events)
    if n_pred == 0 and n_true == 0:
        return 1.0
    if n_pred == 0 or n_true == 0:
        return 0.0
    m = match_events(pred_events, true_events, tolerance)
    if m == 0:
        return 0.0
    precision, recall = m / n_pred, m / n_true
    return 2 * precision * recall / (precision + recall)


def pick_events(probabilities, frame_rate: float = 75.0, threshold: float = 0.5) -> list[float]:
    """Times of local maxima above ``threshold`` (plateaus report their first frame)."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        return []
    left = np.r_[-np.inf, p[:-1]]
    right = np.r_[p[1:], -np.inf]
    peaks = np.flatnonzero((p > threshold) & (p > left) & (p >= right))
    return (peaks / frame_rate).tolist()


# ---------------------------------------------------------------- probe model


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    split_sizes: dict
    best_lr: float
    seed: int
    valid_value: float = float("nan")
    grid: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Probe:
    task_type: str
    params: dict
    mean: np.ndarray
    std: np.ndarray
    classes: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None

    def _logits(self, X: np.ndarray, rng=None, dropout: float = 0.0) -> G.Tensor:
        x = G.Tensor(((X - self.mean) / self.std).astype(np.float32))
        h = G.relu(x @ self.params["w1"] + self.params["b1"])
        h = G.dropout(h, dropout, rng)
        return h @ self.params["w2"] + self.params["b2"]

    def scores(self, X) -> np.ndarray:
        """Class probabilities, tag/frame probabilities, or de-standardised regression outputs."""
        with G.no_grad():
            z = self._logits(np.asarray(X, dtype=np.float64)).data.astype(np.float64)
        if self.task_type == "multiclass":
            z = np.exp(z - z.max(axis=1, keepdims=True))
            return z / z.sum(axis=1, keepdims=True)
        if self.task_type in ("multilabel", "framewise"):
            out = 1.0 / (1.0 + np.exp(-z))
            return out[:, 0] if self.task_type == "framewise" else out
        out = z * self.y_std + self.y_mean
        return out[:, 0] if out.shape[1] == 1 else out

    def predict(self, X) -> np.ndarray:
        s = self.scores(X)
        if self.task_type == "multiclass":
            return self.classes[s.argmax(axis=1)]
        return s


def _split_indices(split) -> dict[str, np.ndarray]:
    split = np.asarray(split)
    out = {name: np.flatnonzero(split == name) for name in ("train", "valid", "test")}
    for name in ("train", "valid", "test"):
        if out[name].size == 0:
            raise DegenerateTaskError(f"split {name!r} is empty")
    return out


def beat_frame_targets(events, n_frames: int, frame_rate: float = 75.0) -> np.ndarray:
    """Frame labels: the frame nearest each event plus its two neighbours."""
    y = np.zeros(n_frames)
    for t in events:
        c = int(round(t * frame_rate))
        y[max(0, c - 1) : min(n_frames, c + 2)] = 1.0
    return y


class _Task:
    """Uniform view of the four task types: training rows, targets and the selection metric."""

    def __init__(self, X, y, task_type: str, split, task: str):
        if task_type not in TASK_TYPES:
            raise ValueError(f"task_type must be one of {TASK_TYPES}")
        self.type = task_type
        self.task = task
        self.idx = _split_indices(split)
        if task_type == "framewise":
            self.seqs = [np.asarray(s, dtype=np.float64) for s in X]
            self.events = [list(e) for e in y]
            self.frame_y = [beat_frame_targets(e, len(s)) for s, e in zip(self.seqs, self.events)]
            tr = self.idx["train"]
            self.X_train = np.concatenate([self.seqs[i] for i in tr])
            self.y_train = np.concatenate([self.frame_y[i] for i in tr])[:, None]
            if self.y_train.all() or not self.y_train.any():
                raise DegenerateTaskError(f"task {task}: training frames are all one class")
            self.n_out = 1
            self.metric = "beat_f_measure"
            return
        self.X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        tr = self.idx["train"]
        self.X_train = self.X[tr]
        if task_type == "multiclass":
            self.classes = np.unique(y[tr])
            if self.classes.size < 2:
                raise DegenerateTaskError(f"task {task}: training labels contain a single class ({self.classes[0]!r})")
            self.y = y
            self.y_train = np.searchsorted(self.classes, y[tr])
            self.n_out = self.classes.size
            self.metric = "accuracy"
        elif task_type == "multilabel":
            self.y = y.astype(np.float64)
            col = self.y[tr]
            if all(col[:, j].all() or not col[:, j].any() for j in range(col.shape[1])):
                raise DegenerateTaskError(f"task {task}: every tag has a single class in the training labels")
            self.y_train = col
            self.n_out = col.shape[1]
            self.metric = "roc_auc"
        else:
            self.y = y.astype(np.float64)
            yt = self.y[tr].reshape(len(tr), -1)
            self.y_mean = yt.mean(axis=0)
            self.y_std = yt.std(axis=0)
            if np.any(self.y_std == 0):
                raise DegenerateTaskError(f"task {task}: regression targets are constant on the training split")
            self.y_train = (yt - self.y_mean) / self.y_std
            self.n_out = yt.shape[1]
            self.metric = "r2"

    def loss(self, logits: G.Tensor, rows: np.ndarray) -> G.Tensor:
        t = self.y_train[rows]
        if self.type == "multiclass":
            logp = G.log_softmax(logits, axis=-1)
            return -G.mean(logp[np.arange(rows.size), t])
        if self.type in ("multilabel", "framewise"):
            return G.bce_with_logits(logits, t)
        return G.mse(logits, t.astype(np.float32))

    def evaluate(self, probe: Probe, name: str) -> float:
        idx = self.idx[name]
        if self.type == "framewise":
            return float(np.mean([metric_beat_f_measure(pick_events(probe.scores(self.seqs[i])), self.events[i])
                                  for i in idx]))
        s = probe.scores(self.X[idx])
        if self.type == "multiclass":
            return metric_accuracy(probe.classes[s.argmax(axis=1)], self.y[idx])
        if self.type == "multilabel":
            return metric_roc_auc(s, self.y[idx])
        return metric_r2(s, self.y[idx])


def _init_params(d_in: int, hidden: int, n_out: int, rng: np.random.Generator) -> dict:
    def uni(fan_in, shape):
        b = 1.0 / math.sqrt(fan_in)
        return G.Tensor(rng.uniform(-b, b, shape).astype(np.float32), requires_grad=True)

    return {"w1": uni(d_in, (d_in, hidden)), "b1": uni(d_in, (hidden,)),
            "w2": uni(hidden, (hidden, n_out)), "b2": uni(hidden, (n_out,))}


def _fit_one(task: _Task, probe_template: dict, config: ProbeConfig, lr: float, rng: np.random.Generator):
    d_in = task.X_train.shape[1]
    params = _init_params(d_in, config.hidden_units, task.n_out, rng)
    probe = Probe(task.type, params, **probe_template)
    opt = Adam(lr=lr, betas=(0.9, 0.999), eps=1e-8)
    cur_lr = lr
    best = -np.inf
    best_params = {k: v.data.copy() for k, v in params.items()}
    best_epoch = 0
    since_best = since_plateau = 0
    plateau_best = -np.inf
    n = task.X_train.shape[0]
    epochs = 0
    for epoch in range(config.max_epochs):
        epochs = epoch + 1
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            rows = order[s : s + config.batch_size]
            logits = probe._logits(task.X_train[rows], rng, config.dropout)
            loss = task.loss(logits, rows)
            G.zero_grad(params.values())
            G.backward(loss)
            opt.step(params, {k: p.grad for k, p in params.items()}, cur_lr)
        G.zero_grad(params.values())
        value = task.evaluate(probe, "valid")
        if value > best:
            best, best_epoch, since_best = value, epoch, 0
            best_params = {k: v.data.copy() for k, v in params.items()}
        else:
            since_best += 1
        if value > plateau_best:
            plateau_best, since_plateau = value, 0
        else:
            since_plateau += 1
            if since_plateau >= config.lr_plateau_patience:
                cur_lr *= config.lr_plateau_factor
                since_plateau = 0
        if since_best >= config.early_stop_patience:
            break
    for k, v in best_params.items():
        params[k].data = v
    return probe, best, best_epoch, epochs


def lr_stream(seed: int, lr: float) -> np.random.Generator:
    """Independent generator per (seed, learning rate) grid point."""
    return np.random.default_rng([int(seed), int(round(lr * 1e9))])


def train_probe(embeddings, labels, task_type: str, config: ProbeConfig | None = None, split=None,
                task: str = "task") -> tuple[Probe, MetricReport]:
    """Grid search over ``config.lr_grid`` selecting by the validation metric; reports the test metric.

    For ``framewise`` tasks ``embeddings`` is a list of (frames, d) arrays and
    ``labels`` a list of event-time lists, with ``split`` given per clip.
    """
    config = config or ProbeConfig()
    if split is None:
        raise DegenerateTaskError(f"task {task}: a train/valid/test split is required")
    t = _Task(embeddings, labels, task_type, split, task)
    mean = t.X_train.mean(axis=0)
    std = t.X_train.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    template = {"mean": mean, "std": std, "classes": getattr(t, "classes", None),
                "y_mean": getattr(t, "y_mean", None), "y_std": getattr(t, "y_std", None)}
    grid, best_probe, best_value, best_lr = [], None, -np.inf, None
    for lr in config.lr_grid:
        probe, value, epoch, epochs = _fit_one(t, template, config, lr, lr_stream(config.seed, lr))
        grid.append({"lr": lr, "valid": value, "best_epoch": epoch, "epochs": epochs})
        if value > best_value:
            best_probe, best_value, best_lr = probe, value, lr
    sizes = {k: int(v.size) for k, v in t.idx.items()}
    report = MetricReport(task, t.metric, t.evaluate(best_probe, "test"), sizes, best_lr, config.seed,
                          best_value, grid)
    return best_probe, report


# ---------------------------------------------------------------- ledgers and export


def task_hash(task: str, labels, split, task_type: str, config: ProbeConfig) -> str:
    payload = {"task": task, "type": task_type, "split": [str(s) for s in split],
               "labels": json.loads(json.dumps(labels, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))),
               "probe": asdict(config)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def append_result(path: str | Path, report: MetricReport, config_hash: str, extra: dict | None = None) -> dict:
    record = {"task": report.task, "metric": report.metric, "value": report.value, "config_hash": config_hash,
              "best_lr": report.best_lr, "seed": report.seed, "split_sizes": report.split_sizes}
    record.update(extra or {})
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
    return record


def export_embeddings(model, clips: list[AudioClip], out_dir: str | Path, layer=-1, window_seconds: float = 5.0,
                      framewise: bool = False) -> Path:
    """One MERTFEAT file per clip, an ``index.tsv`` (source_id, file) and a ``labels.tsv`` table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    embs = embed_clips(model, clips, layer, window_seconds, framewise)
    index_lines, label_lines = [], []
    for i, (clip, emb) in enumerate(zip(clips, embs)):
        name = f"emb{i:05d}.mertfeat"
        values = emb.values if emb.values.ndim == 2 else emb.values[None, :]
        write_features(out / name, FeatureMatrix(values, 75.0 if framewise else 0.0, f"embedding:{layer}", clip.source_id))
        index_lines.append(f"{clip.source_id}\t{name}")
        label_lines.append(f"{clip.source_id}\t{json.dumps(clip.labels, sort_keys=True, default=str)}")
    (out / "index.tsv").write_text("\n".join(index_lines) + ("\n" if index_lines else ""))
    (out / "labels.tsv").write_text("\n".join(label_lines) + ("\n" if label_lines else ""))
    return out / "index.tsv"


def read_embedding_index(path: str | Path) -> dict[str, Path]:
    base = Path(path).parent
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            sid, name = line.split("\t")
            out[sid] = base / name
    return out


__all__ = [
    "ProbeConfig", "Embedding", "MetricReport", "Probe", "DegenerateTaskError", "MetricError", "KeyEncodingError",
    "extract_embeddings", "embed_clips", "train_probe", "metric_accuracy", "metric_roc_auc",
    "metric_average_precision", "metric_r2", "metric_refined_key_accuracy", "metric_beat_f_measure",
    "match_events", "pick_events", "export_embeddings", "append_result",
]
