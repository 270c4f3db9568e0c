"""Command line: synth -> features -> teach -> pretrain -> probe / export.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``MERTLAB_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, config as cfg, dsp, probe, pretrain, synth, teachers
from .audio_io import WavFormatError, UnsupportedCodecError, load_wav, read_manifest, resample
from .containers import ContainerError
from .grad import NonFiniteError

log = logging.getLogger("mertlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "MERTLAB_THREADS"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str
    seed: int
    started: str
    ended: str = ""
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    config: dict = field(default_factory=dict)
    status: str = "ok"

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"run_manifest_{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _file_hash(path: Path, extra: str = "") -> str:
    h = hashlib.sha256(extra.encode())
    h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _load_clip(path: Path, source_id: str, labels: dict | None = None):
    clip = load_wav(path, source_id)
    if clip.sample_rate != 24000:
        clip = resample(clip, 24000)
    clip.labels = dict(labels or {})
    return clip


def _manifest_clips(path: Path):
    return [_load_clip(e.path, e.source_id, e.labels) for e in read_manifest(path)]


def _write_index(path: Path, rows: list[list[str]]) -> None:
    path.write_text("".join("\t".join(r) + "\n" for r in rows))


def _read_index(path: Path) -> list[list[str]]:
    if not path.exists():
        return []
    return [line.split("\t") for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, run: cfg.RunConfig, out: Path) -> list[str]:
    if args.task == "pretrain":
        clips = synth.pretrain_corpus(args.n or run.data.n_clips, run.data.clip_seconds, run.seed)
    else:
        kwargs = {"seed": run.seed}
        if args.n:
            kwargs["n_clips" if args.task in ("beat", "arousal") else "n_per_class"] = args.n
        clips = synth.TASKS[args.task](**kwargs)
    manifest = synth.write_corpus(clips, out)
    print(f"wrote {len(clips)} clips and {manifest}")
    return [str(manifest)]


def cmd_features(args, run: cfg.RunConfig, out: Path) -> list[str]:
    kinds = [k for k in args.kinds.split(",") if k]
    unknown = [k for k in kinds if k not in dsp.EXTRACTORS]
    if unknown:
        raise UsageError(f"unknown feature kind(s) {unknown}; choose from {sorted(dsp.EXTRACTORS)}")
    entries = read_manifest(args.manifest)
    if not entries:
        print("0 clips in manifest; nothing to do")
        _write_index(out / "index.tsv", [])
        return [str(out / "index.tsv")]
    previous = {(r[0], r[1]): r for r in _read_index(out / "index.tsv")}
    rows, errors, made, skipped = [], [], 0, 0
    for i, entry in enumerate(entries):
        sid = entry.source_id
        try:
            digest = _file_hash(entry.path)
        except OSError as exc:
            errors.append([sid, str(entry.path), f"unreadable: {exc}"])
            continue
        clip = None
        for kind in kinds:
            name = f"{i:05d}.{kind}.mertfeat"
            key = f"{digest}:{kind}"
            old = previous.get((sid, kind))
            if old is not None and old[3] == key and (out / old[2]).exists():
                rows.append(old)
                skipped += 1
                continue
            try:
                if clip is None:
                    clip = _load_clip(entry.path, sid)
                dsp.write_features(out / name, dsp.EXTRACTORS[kind](clip))
            except (WavFormatError, UnsupportedCodecError, ValueError) as exc:
                errors.append([sid, str(entry.path), f"{type(exc).__name__}: {exc}"])
                break
            rows.append([sid, kind, name, key])
            made += 1
    _write_index(out / "index.tsv", rows)
    outputs = [str(out / "index.tsv")]
    if errors:
        _write_index(out / "errors.tsv", errors)
        outputs.append(str(out / "errors.tsv"))
    print(f"{len(entries)} clips: {made} feature files written, {skipped} up to date, {len(errors)} failed")
    if errors:
        raise DataError(f"{len(errors)} clip(s) failed; see {out / 'errors.tsv'}")
    return outputs


def cmd_teach(args, run: cfg.RunConfig, out: Path) -> list[str]:
    clips = _manifest_clips(args.manifest)
    if not clips:
        raise DataError("manifest has no clips to fit a teacher on")
    teacher = teachers.fit_teacher(clips, run.teacher)
    outputs = []
    if run.teacher.kind == "rvq":
        teachers.write_codec(out / "codec.mertcb", teacher.codec)
        outputs.append(str(out / "codec.mertcb"))
    else:
        for cb in teacher.codebooks:
            p = out / f"codebook_{cb.feature_kind}.mertcb"
            teachers.write_codebook(p, cb)
            outputs.append(str(p))
    tdir = out / "targets"
    tdir.mkdir(exist_ok=True)
    rows = []
    for i, clip in enumerate(clips):
        name = f"{i:05d}.merttgt"
        teachers.write_targets(tdir / name, teachers.build_targets(clip, teacher))
        rows.append([clip.source_id, name])
    _write_index(tdir / "index.tsv", rows)
    outputs.append(str(tdir / "index.tsv"))
    print(f"teacher {run.teacher.kind} vocab {teacher.vocab_sizes}; targets for {len(clips)} clips")
    return outputs


def load_target_dir(path: Path) -> dict[str, teachers.TargetBundle]:
    index = path / "index.tsv"
    if not index.exists():
        raise DataError(f"no target index at {index}")
    return {sid: teachers.read_targets(path / name) for sid, name in _read_index(index)}


def cmd_pretrain(args, run: cfg.RunConfig, out: Path) -> list[str]:
    clips = _manifest_clips(args.manifest)
    targets = load_target_dir(Path(args.targets))
    state = None
    if args.resume:
        state, _ = pretrain.load_checkpoint(args.resume, run.train)
    log_path = out / "train_log.ndjson"
    state, reports = pretrain.run_pretraining(run, clips, targets, out_dir=out, state=state, log_path=log_path)
    aborted = sum(r.status != "ok" for r in reports)
    print(f"trained to step {state.step}; {len(reports)} log records; {aborted} aborted step(s)")
    if aborted:
        raise NumericalFailure(f"{aborted} step(s) aborted on non-finite values; see {log_path}")
    return [str(out / "final.mertckpt"), str(log_path)]


def _probe_model(args, run: cfg.RunConfig):
    if args.checkpoint == "random":
        from .model import Encoder

        return Encoder(run.model, seed=run.seed), "random"
    return pretrain.load_model(args.checkpoint), str(args.checkpoint)


def _parse_label(value: str, task_type: str):
    if task_type == "regression":
        return float(value)
    if task_type == "framewise":
        return [float(v) for v in value.split(",") if v]
    return value


def cmd_probe(args, run: cfg.RunConfig, out: Path) -> list[str]:
    entries = read_manifest(args.manifest)
    clips = [_load_clip(e.path, e.source_id, e.labels) for e in entries]
    if not clips:
        raise DataError("probe manifest has no clips")
    missing = [c.source_id for c in clips if args.label not in c.labels or "split" not in c.labels]
    if missing:
        raise DataError(f"clips without '{args.label}' or 'split' labels: {', '.join(missing[:10])}")
    model, source = _probe_model(args, run)
    before = probe.parameter_hash(model)
    pc = run.probe
    framewise = args.task_type == "framewise"
    embs = probe.embed_clips(model, clips, pc.layer, pc.window_seconds, framewise)
    X = [e.values for e in embs] if framewise else np.stack([e.values for e in embs])
    y = [_parse_label(c.labels[args.label], args.task_type) for c in clips]
    split = [c.labels["split"] for c in clips]
    _, report = probe.train_probe(X, y, args.task_type, pc, split, task=args.task or args.label)
    if probe.parameter_hash(model) != before:
        raise RuntimeError("probe evaluation modified the encoder parameters")
    th = probe.task_hash(report.task, y, split, args.task_type, pc)
    ledger = out / "results.ndjson"
    probe.append_result(ledger, report, run.config_hash(), {"task_hash": th, "checkpoint": source,
                                                            "valid_value": report.valid_value})
    print(f"{report.task}: test {report.metric} = {report.value:.4f} (best lr {report.best_lr})")
    return [str(ledger)]


def cmd_export(args, run: cfg.RunConfig, out: Path) -> list[str]:
    clips = _manifest_clips(args.manifest)
    model, _ = _probe_model(args, run)
    layer = args.layer if args.layer == "mean" else int(args.layer)
    index = probe.export_embeddings(model, clips, out, layer, run.probe.window_seconds, args.framewise)
    print(f"exported {len(clips)} embeddings to {out}")
    return [str(index), str(out / "labels.tsv")]


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "teach": cmd_teach, "pretrain": cmd_pretrain,
            "probe": cmd_probe, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="config override such as train.lr=1e-3 (repeatable)")
    parser = _Parser(prog="mertlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus and manifest")
    p.add_argument("--task", choices=["pretrain", *synth.TASKS], default="pretrain")
    p.add_argument("--n", type=int, help="clips (or clips per class)")

    p = sub.add_parser("features", parents=[common], help="batch feature extraction")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--kinds", default="logmel,cqt")

    p = sub.add_parser("teach", parents=[common], help="fit a teacher and build per-clip targets")
    p.add_argument("--manifest", required=True, type=Path)

    p = sub.add_parser("pretrain", parents=[common], help="masked-prediction pretraining")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--targets", required=True, type=Path, help="target directory written by 'teach'")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", type=Path)

    for name, helptext in (("probe", "train a probe on frozen embeddings"), ("export", "export embeddings")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True, help="checkpoint path, or 'random' for a fresh encoder")
        p.add_argument("--manifest", required=True, type=Path)
        if name == "probe":
            p.add_argument("--label", required=True, help="manifest label to predict")
            p.add_argument("--task-type", choices=probe.TASK_TYPES, default="multiclass")
            p.add_argument("--task", help="task id for the results ledger (default: the label)")
        else:
            p.add_argument("--layer", default="-1")
            p.add_argument("--framewise", action="store_true")
    return parser


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if getattr(args, "steps", None) is not None:
            overrides.append(f"train.steps={args.steps}")
        run = cfg.load_config(args.config, overrides)
    except (UsageError, cfg.ConfigKeyError, TypeError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"usage error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, args.config, run.config_hash(), run.seed, _now(), config=run.to_dict())
    code = EXIT_OK
    try:
        with _thread_limit():
            manifest.outputs = COMMANDS[args.command](args, run, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (NumericalFailure, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except ContainerError as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except (DataError, pretrain.TrainingDataError, probe.DegenerateTaskError, teachers.DegenerateDataError,
            teachers.AlignmentError, WavFormatError, UnsupportedCodecError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    manifest.ended = _now()
    manifest.status = {EXIT_OK: "ok", EXIT_USAGE: "usage error", EXIT_DATA: "data error",
                       EXIT_NUMERIC: "numerical failure"}[code]
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
