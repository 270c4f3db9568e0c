"""Masked-prediction pretraining: span masks, in-batch noise mixup, the combined
acoustic (cosine-similarity NCE) + musical (CQT regression) loss, the optimisation
step with global-norm clipping, checkpoints and the training loop."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import containers
from . import grad as G
from .audio_io import AudioClip
from .grad import NonFiniteError, Tensor
from .model import Encoder, ModelConfig
from .optim import Adam, clip_by_global_norm
from .teachers import TargetBundle

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)


class TrainingDataError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    alpha: float = 1.0
    musical_weight: float = 1.0
    mixup_prob: float = 0.5
    mixup_gain: tuple[float, float] = (0.1, 0.5)
    mixup_excerpt: tuple[float, float] = (0.2, 1.0)  # seconds
    lr: float = 5e-4
    warmup_steps: int = 30
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_clips: int = 8
    steps: int = 300
    segment_seconds: float = 1.0
    mask_span: int = 5
    mask_prob: float = 0.08
    codebook_mode: str = "all"  # all | single:<j> | random
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.mixup_gain = tuple(self.mixup_gain)
        self.mixup_excerpt = tuple(self.mixup_excerpt)
        self.betas = tuple(self.betas)
        for name in ("mixup_prob", "mask_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")
        parse_codebook_mode(self.codebook_mode)


def parse_codebook_mode(mode: str) -> tuple[str, int | None]:
    if mode in ("all", "random"):
        return mode, None
    if mode.startswith("single:"):
        return "single", int(mode.split(":", 1)[1])
    raise ValueError(f"codebook_mode must be 'all', 'random' or 'single:<j>', got {mode!r}")


# ---------------------------------------------------------------- masking


@dataclass
class MaskSpec:
    masked_indices: np.ndarray
    length: int
    span: int
    start_prob: float
    seed: int

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        m[self.masked_indices] = True
        return m


def sample_mask(length: int, span: int = 5, start_prob: float = 0.08, seed: int = 0) -> MaskSpec:
    """Each frame starts a masked span of ``span`` frames with probability ``start_prob``."""
    if length < 1:
        raise ValueError("cannot mask an empty sequence")
    if span < 1:
        raise ValueError("span must be >= 1")
    starts = np.flatnonzero(np.random.default_rng(seed).random(length) < start_prob)
    m = np.zeros(length, dtype=bool)
    for s in starts:
        m[s : s + span] = True
    return MaskSpec(np.flatnonzero(m), length, span, start_prob, seed)


def expected_coverage(span: int, start_prob: float) -> float:
    """Probability that an interior frame is masked."""
    return 1.0 - (1.0 - start_prob) ** span


# ---------------------------------------------------------------- mixup


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mixup_waves(
    waves: np.ndarray,
    prob: float,
    gain_range: tuple[float, float],
    rng,
    sample_rate: int = 24000,
    excerpt_range: tuple[float, float] = (0.2, 1.0),
) -> np.ndarray:
    """In-batch noise mixup on a (B, N) array; see :func:`mixup`."""
    rng = _as_rng(rng)
    out = np.array(waves, copy=True)
    B, N = out.shape
    if B < 2 or prob <= 0:
        if B < 2 and prob > 0:
            log.info("mixup needs at least two clips in a batch; batch left unchanged")
        return out
    for b in range(B):
        if rng.random() >= prob:
            continue
        donor = int(rng.integers(B - 1))
        donor += donor >= b
        length = min(N, max(1, int(rng.uniform(*excerpt_range) * sample_rate)))
        src = int(rng.integers(N - length + 1))
        dst = int(rng.integers(N - length + 1))
        gain = rng.uniform(*gain_range)
        out[b, dst : dst + length] += gain * waves[donor, src : src + length]
    np.clip(out, -1.0, 1.0, out=out)
    return out


def mixup(
    batch: list[AudioClip],
    prob: float = 0.5,
    gain_range: tuple[float, float] = (0.1, 0.5),
    seed=0,
    excerpt_range: tuple[float, float] = (0.2, 1.0),
) -> list[AudioClip]:
    """Add a gain-scaled excerpt of another clip from the same batch, with probability ``prob`` per clip.

    Lengths are preserved and the result is clipped to [-1, 1]. Only the
    student input is augmented; targets come from the clean clips.
    """
    if not batch:
        return []
    lengths = {len(c) for c in batch}
    if len(lengths) != 1:
        raise ValueError("mixup expects equal-length clips")
    waves = np.stack([c.samples for c in batch])
    mixed = mixup_waves(waves, prob, gain_range, seed, batch[0].sample_rate, excerpt_range)
    return [AudioClip(m, c.sample_rate, c.source_id, c.padded, dict(c.labels)) for m, c in zip(mixed, batch)]


# ---------------------------------------------------------------- losses


def _mask_rows(mask, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, MaskSpec):
        return np.asarray(mask.masked_indices, dtype=np.int64)
    m = np.asarray(mask)
    return np.flatnonzero(m) if m.dtype == bool else m.astype(np.int64)


def nce_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over masked frames of -log softmax(logits)[target].

    ``mask`` is a MaskSpec, a boolean frame mask or an index array; ``None``
    means every row is a masked frame.
    """
    targets = np.asarray(targets, dtype=np.int64)
    rows = _mask_rows(mask, logits.shape[0])
    if rows is not None:
        if rows.size == 0:
            warnings.warn("nce_loss: empty mask, loss defined as 0", RuntimeWarning, stacklevel=2)
            return Tensor(np.zeros((), dtype=logits.dtype))
        logits = logits[rows]
        targets = targets[rows]
    if logits.shape[0] == 0:
        warnings.warn("nce_loss: empty mask, loss defined as 0", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=logits.dtype))
    logp = G.log_softmax(logits, axis=-1)
    picked = logp[np.arange(targets.size), targets]
    return -G.mean(picked)


def cqt_mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over masked frames and all bins."""
    tgt = target.values if hasattr(target, "values") else np.asarray(target)
    if tuple(pred.shape) != tuple(tgt.shape):
        raise G.ShapeError(f"cqt_mse_loss: prediction {pred.shape} vs target {tgt.shape}")
    rows = _mask_rows(mask, pred.shape[0])
    if rows is not None:
        if rows.size == 0:
            warnings.warn("cqt_mse_loss: empty mask, loss defined as 0", RuntimeWarning, stacklevel=2)
            return Tensor(np.zeros((), dtype=pred.dtype))
        pred = pred[rows]
        tgt = tgt[rows]
    return G.mse(pred, tgt.astype(pred.dtype))


def selected_heads(mode: str, n_heads: int, rng: np.random.Generator | None = None) -> list[int]:
    kind, j = parse_codebook_mode(mode)
    if kind == "all":
        return list(range(n_heads))
    if kind == "single":
        if not 0 <= j < n_heads:
            raise ValueError(f"codebook {j} out of range for {n_heads} heads")
        return [j]
    return [int(_as_rng(rng).integers(n_heads))]


@dataclass
class LossReport:
    total: float
    acoustic_per_head: list[float]
    musical: float
    alpha: float
    musical_weight: float
    selected_heads: list[int]
    grad_norm_preclip: float = float("nan")
    grad_norm_postclip: float = float("nan")
    masked_token_accuracy_per_head: list[float] = field(default_factory=list)
    masked_frames: int = 0
    lr: float = 0.0
    step: int = 0
    status: str = "ok"
    diagnostic: str = ""

    def decomposition_error(self) -> float:
        """|total - (alpha * sum(selected acoustic) + musical_weight * musical)|."""
        acoustic = sum(self.acoustic_per_head[j] for j in self.selected_heads)
        return abs(self.total - (self.alpha * acoustic + self.musical_weight * self.musical))

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()})


def total_loss(
    acoustic_losses: list[Tensor],
    musical_loss: Tensor,
    alpha: float = 1.0,
    musical_weight: float = 1.0,
    selected: list[int] | None = None,
) -> tuple[Tensor, LossReport]:
    """alpha * sum(selected acoustic losses) + musical_weight * musical loss, combined in float64."""
    selected = list(range(len(acoustic_losses))) if selected is None else list(selected)
    acoustic = None
    for j in selected:
        term = G.astype(acoustic_losses[j], np.float64)
        acoustic = term if acoustic is None else acoustic + term
    musical = G.astype(musical_loss, np.float64)
    if acoustic is None:
        total = musical * musical_weight
    else:
        total = acoustic * alpha + musical * musical_weight
    report = LossReport(
        total=float(total.data),
        acoustic_per_head=[float(a.data) for a in acoustic_losses],
        musical=float(musical.data),
        alpha=alpha,
        musical_weight=musical_weight,
        selected_heads=selected,
    )
    return total, report


# ---------------------------------------------------------------- training state


@dataclass
class TrainState:
    model: Encoder
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0


def init_state(model_config: ModelConfig, train: TrainConfig, seed: int | None = None) -> TrainState:
    seed = train.seed if seed is None else seed
    model = Encoder(model_config, seed=seed)
    opt = Adam(lr=train.lr, betas=train.betas, weight_decay=train.weight_decay)
    return TrainState(model, opt, np.random.default_rng(seed + 1))


def learning_rate(train: TrainConfig, step: int) -> float:
    if train.warmup_steps and step < train.warmup_steps:
        return train.lr * (step + 1) / train.warmup_steps
    return train.lr


@dataclass
class Batch:
    waves: np.ndarray  # (B, N) clean audio
    tokens: np.ndarray  # (B, L, J)
    cqt: np.ndarray  # (B, L, bins)
    source_ids: list[str]


def make_batch(clips: list[AudioClip], targets: list[TargetBundle], frames: int | None = None,
               offsets: list[int] | None = None, hop: int = 320) -> Batch:
    """Stack frame-aligned crops of ``frames`` frames starting at ``offsets`` (in frames)."""
    waves, toks, cqts, ids = [], [], [], []
    for i, (clip, tb) in enumerate(zip(clips, targets)):
        n = tb.frames if frames is None else frames
        f0 = 0 if offsets is None else offsets[i]
        if f0 + n > tb.frames:
            raise TrainingDataError(f"{clip.source_id}: crop [{f0}, {f0 + n}) exceeds {tb.frames} target frames")
        seg = clip.samples[f0 * hop : (f0 + n) * hop]
        if seg.size < n * hop:
            seg = np.pad(seg, (0, n * hop - seg.size))
        waves.append(seg)
        toks.append(tb.acoustic_tokens[f0 : f0 + n])
        cqts.append(tb.cqt_target.values[f0 : f0 + n])
        ids.append(clip.source_id)
    return Batch(np.stack(waves), np.stack(toks), np.stack(cqts), ids)


def sample_batch(clips: list[AudioClip], targets: list[TargetBundle], train: TrainConfig,
                 rng: np.random.Generator, hop: int = 320, sample_rate: int = 24000) -> Batch:
    """Random clips (by index) and random frame-aligned crops of ``segment_seconds``."""
    frames = int(round(train.segment_seconds * sample_rate / hop))
    n = len(clips)
    idx = rng.choice(n, size=min(train.batch_clips, n), replace=False)
    offsets = []
    for i in idx:
        slack = targets[i].frames - frames
        if slack < 0:
            raise TrainingDataError(f"{clips[i].source_id}: {targets[i].frames} frames is shorter than a {frames}-frame segment")
        offsets.append(int(rng.integers(slack + 1)))
    return make_batch([clips[i] for i in idx], [targets[i] for i in idx], frames, offsets, hop)


def compute_losses(model: Encoder, waves: np.ndarray, batch: Batch, masks: list[MaskSpec], train: TrainConfig,
                   selected: list[int], rng: np.random.Generator | None = None):
    """Forward pass and loss assembly; returns (total Tensor, LossReport, masked rows)."""
    B, L = batch.tokens.shape[:2]
    out = model.forward(waves.astype(model.dtype), masks, rng)
    if out.frames != L:
        raise TrainingDataError(f"encoder produced {out.frames} frames, targets have {L}")
    flat = G.reshape(out.final, (B * L, model.config.d_model))
    rows = np.concatenate([b * L + np.asarray(m.masked_indices, dtype=np.int64) for b, m in enumerate(masks)])
    tokens = batch.tokens.reshape(B * L, -1)[rows]
    o = G.gather_rows(flat, rows)
    acoustic, accuracy = [], []
    for j in range(len(model.config.head_vocab)):
        logits = model.acoustic_logits(o, j)
        acoustic.append(nce_loss(logits, tokens[:, j]))
        accuracy.append(float(np.mean(logits.data.argmax(axis=1) == tokens[:, j])) if rows.size else 0.0)
    pred = model.predict_cqt(o)
    musical = cqt_mse_loss(pred, batch.cqt.reshape(B * L, -1)[rows])
    total, report = total_loss(acoustic, musical, train.alpha, train.musical_weight, selected)
    report.masked_token_accuracy_per_head = accuracy
    report.masked_frames = int(rows.size)
    return total, report


def train_step(state: TrainState, batch: Batch, train: TrainConfig) -> LossReport:
    """One optimisation step. Non-finite values abort the step with parameters and optimiser untouched."""
    rng = state.rng
    model = state.model
    B, L = batch.tokens.shape[:2]
    noisy = mixup_waves(batch.waves, train.mixup_prob, train.mixup_gain, rng, excerpt_range=train.mixup_excerpt)
    masks = [sample_mask(L, train.mask_span, train.mask_prob, int(rng.integers(2**62))) for _ in range(B)]
    selected = selected_heads(train.codebook_mode, len(model.config.head_vocab), rng)
    lr = learning_rate(train, state.step)
    step = state.step
    state.step += 1
    try:
        total, report = compute_losses(model, noisy, batch, masks, train, selected, rng)
        G.zero_grad(model.params.values())
        G.backward(total)
        grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {k}")
    except NonFiniteError as exc:
        log.error("step %d aborted: %s", step, exc)
        G.zero_grad(model.params.values())
        return LossReport(float("nan"), [], float("nan"), train.alpha, train.musical_weight, selected,
                          lr=lr, step=step, status="aborted", diagnostic=str(exc))
    clipped, pre, post = clip_by_global_norm(grads, train.grad_clip)
    state.optimizer.step(model.params, clipped, lr)
    G.zero_grad(model.params.values())
    report.grad_norm_preclip = pre
    report.grad_norm_postclip = post
    report.lr = lr
    report.step = step
    return report


# ---------------------------------------------------------------- evaluation


def masked_accuracy(model: Encoder, clips: list[AudioClip], targets: list[TargetBundle], train: TrainConfig,
                    seed: int = 1234, batch_size: int = 8, frames: int | None = None) -> dict:
    """Masked-token accuracy per head on fixed masks, plus the majority-class baseline.

    With ``frames`` set, every clip is cut into sequential non-overlapping crops
    of that many frames (the training segment length). The baseline predicts,
    per head, the most frequent token among the evaluated masked positions
    themselves.
    """
    rng = np.random.default_rng(seed)
    items = []
    for clip, tb in zip(clips, targets):
        if frames is None:
            items.append((clip, tb, None))
        else:
            items.extend((clip, tb, f0) for f0 in range(0, tb.frames - frames + 1, frames))
    hits = None
    all_tokens = []
    with G.no_grad():
        for s in range(0, len(items), batch_size):
            chunk = items[s : s + batch_size]
            offsets = None if frames is None else [f0 for _, _, f0 in chunk]
            batch = make_batch([c for c, _, _ in chunk], [t for _, t, _ in chunk], frames, offsets)
            B, L = batch.tokens.shape[:2]
            masks = [sample_mask(L, train.mask_span, train.mask_prob, int(rng.integers(2**62))) for _ in range(B)]
            out = model.forward(batch.waves.astype(model.dtype), masks)
            rows = np.concatenate([b * L + m.masked_indices for b, m in enumerate(masks)])
            o = G.Tensor(out.final.data.reshape(B * L, -1)[rows])
            tok = batch.tokens.reshape(B * L, -1)[rows]
            all_tokens.append(tok)
            h = np.stack([model.acoustic_logits(o, j).data.argmax(axis=1) == tok[:, j]
                          for j in range(tok.shape[1])], axis=1)
            hits = h if hits is None else np.concatenate([hits, h])
    tokens = np.concatenate(all_tokens)
    acc = hits.mean(axis=0)
    majority = np.array([np.bincount(tokens[:, j]).max() / tokens.shape[0] for j in range(tokens.shape[1])])
    return {"accuracy_per_head": acc.tolist(), "majority_per_head": majority.tolist(),
            "accuracy": float(acc.mean()), "majority": float(majority.mean()), "positions": int(tokens.shape[0])}


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, state: TrainState, config_text: str) -> None:
    arrays = {f"param.{k}": v.data for k, v in state.model.params.items()}
    arrays.update(state.optimizer.state_arrays())
    meta = {
        "config": config_text,
        "model_config": state.model.config.to_dict(),
        "step": state.step,
        "optimizer_step": state.optimizer.step_count,
        "rng_state": state.rng.bit_generator.state,
        "dtype": state.model.dtype.name,
    }
    containers.write(path, containers.CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path: str | Path, train: TrainConfig | None = None) -> tuple[TrainState, str]:
    """Restore a TrainState bit-exactly; returns (state, config text)."""
    meta, arrays = containers.read(path, containers.CHECKPOINT_MAGIC)
    model = Encoder(ModelConfig(**meta["model_config"]), seed=0, dtype=np.dtype(meta["dtype"]))
    model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    opt = Adam() if train is None else Adam(lr=train.lr, betas=train.betas, weight_decay=train.weight_decay)
    opt.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")}, meta["optimizer_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model, opt, rng, meta["step"]), meta["config"]


def load_model(path: str | Path) -> Encoder:
    state, _ = load_checkpoint(path)
    return state.model


# ---------------------------------------------------------------- loop


def check_targets(clips: list[AudioClip], targets: dict[str, TargetBundle], model_config: ModelConfig) -> list[TargetBundle]:
    missing = [c.source_id for c in clips if c.source_id not in targets]
    if missing:
        raise TrainingDataError(f"no targets for {len(missing)} clip(s): {', '.join(missing[:20])}")
    ordered = [targets[c.source_id] for c in clips]
    for tb in ordered:
        if tuple(tb.vocab_sizes) != tuple(model_config.head_vocab):
            raise TrainingDataError(
                f"{tb.source_id}: target vocabularies {tb.vocab_sizes} do not match model heads {model_config.head_vocab}")
        if tb.cqt_target.dims != model_config.cqt_bins:
            raise TrainingDataError(f"{tb.source_id}: {tb.cqt_target.dims} CQT bins, model expects {model_config.cqt_bins}")
    return ordered


def run_pretraining(
    run: RunConfig,
    clips: list[AudioClip],
    targets: dict[str, TargetBundle],
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    stop_at: int | None = None,
    log_path: str | Path | None = None,
) -> tuple[TrainState, list[LossReport]]:
    """Train from ``state`` (or a fresh seeded state) up to ``run.train.steps`` (or ``stop_at``).

    Writes one JSON line per step to ``log_path`` and, when ``out_dir`` is set,
    checkpoints every ``checkpoint_every`` steps plus a final ``final.mertckpt``.
    """
    train = run.train
    ordered = check_targets(clips, targets, run.model)
    if state is None:
        state = init_state(run.model, train, run.seed)
    end = train.steps if stop_at is None else min(stop_at, train.steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    config_text = run.canonical_text()
    reports = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        while state.step < end:
            batch = sample_batch(clips, ordered, train, state.rng)
            report = train_step(state, batch, train)
            reports.append(report)
            if log_file is not None:
                log_file.write(report.to_json() + "\n")
                log_file.flush()
            if out is not None and train.checkpoint_every and state.step % train.checkpoint_every == 0:
                save_checkpoint(out / f"step{state.step:06d}.mertckpt", state, config_text)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(out / "final.mertckpt", state, config_text)
    return state, reports
