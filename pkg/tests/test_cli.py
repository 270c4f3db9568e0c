import json
import shutil

import numpy as np
import pytest

from mertlab import audio_io, cli
from mertlab.audio_io import AudioClip

TINY = """
seed: 0
data: {n_clips: 6, clip_seconds: 1.0}
model:
  conv_layers: [[16, 10, 5], [16, 8, 4], [16, 4, 2], [16, 4, 2], [16, 4, 2], [16, 4, 2], [16, 2, 1]]
  d_model: 32
  n_layers: 2
  n_heads: 2
  ffn_dim: 64
  pos_conv_kernel: 16
  pos_conv_groups: 4
  head_vocab: [8, 8, 8, 8, 8, 8, 8, 8]
  codeword_dim: 16
teacher: {kind: rvq, rvq_k: 8, max_iters: 20}
train: {steps: 10, batch_clips: 4, segment_seconds: 0.5, warmup_steps: 2, lr: 0.002}
probe: {window_seconds: 1.0, max_epochs: 5, hidden_units: 32, lr_grid: [0.001, 0.01]}
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(TINY)
    return d


@pytest.fixture(scope="module")
def corpus(work):
    assert run("synth", "--config", work / "tiny.yaml", "--out", work / "corpus") == 0
    return work / "corpus" / "manifest.tsv"


@pytest.fixture(scope="module")
def teach_dir(work, corpus):
    assert run("teach", "--config", work / "tiny.yaml", "--manifest", corpus, "--out", work / "teach") == 0
    return work / "teach"


@pytest.fixture(scope="module")
def trained(work, corpus, teach_dir):
    out = work / "train"
    code = run("pretrain", "--config", work / "tiny.yaml", "--manifest", corpus, "--targets", teach_dir / "targets",
               "--steps", 10, "--out", out)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def pitch(work):
    assert run("synth", "--config", work / "tiny.yaml", "--task", "pitch", "--n", 5, "--out", work / "pitch") == 0
    return work / "pitch" / "manifest.tsv"


# ---------------------------------------------------------------- usage and manifests


def test_usage_errors_exit_one(work, capsys):
    assert run("nonsense", "--out", work / "x") == 1
    assert run("synth") == 1
    assert run("synth", "--out", work / "x", "--set", "train.bogus=1") == 1
    assert run("synth", "--out", work / "x", "--config", work / "missing.yaml") == 1
    assert "usage error" in capsys.readouterr().err


def test_every_run_writes_one_manifest(work, corpus):
    m = json.loads((work / "corpus" / "run_manifest_synth.json").read_text())
    assert m["command"] == "synth" and m["status"] == "ok" and m["seed"] == 0
    assert len(m["config_hash"]) == 16 and m["outputs"] == [str(corpus)]
    assert m["tool_version"] == "0.1.0"


def test_manifest_is_enough_to_reproduce(work, corpus, tmp_path):
    m = json.loads((work / "corpus" / "run_manifest_synth.json").read_text())
    (tmp_path / "again.yaml").write_text(json.dumps(m["config"]))
    assert run("synth", "--config", tmp_path / "again.yaml", "--out", tmp_path / "c") == 0
    again = json.loads((tmp_path / "c" / "run_manifest_synth.json").read_text())
    assert again["config_hash"] == m["config_hash"]
    for name in ("pre0000.wav", "pre0005.wav"):
        assert (tmp_path / "c" / name).read_bytes() == (work / "corpus" / name).read_bytes()


# ---------------------------------------------------------------- features


def test_features_empty_manifest(work, capsys):
    (work / "empty.tsv").write_text("")
    assert run("features", "--manifest", work / "empty.tsv", "--out", work / "feat_empty") == 0
    assert "0 clips" in capsys.readouterr().out
    assert not list((work / "feat_empty").glob("*.mertfeat"))


def test_features_idempotent(work, corpus, capsys):
    out = work / "feat"
    assert run("features", "--manifest", corpus, "--kinds", "logmel,cqt", "--out", out) == 0
    assert len(list(out.glob("*.mertfeat"))) == 12
    capsys.readouterr()
    before = {p.name: p.stat().st_mtime_ns for p in out.glob("*.mertfeat")}
    assert run("features", "--manifest", corpus, "--kinds", "logmel,cqt", "--out", out) == 0
    assert "0 feature files written, 12 up to date" in capsys.readouterr().out
    assert before == {p.name: p.stat().st_mtime_ns for p in out.glob("*.mertfeat")}


def test_features_partial_failure(work, tmp_path):
    src = tmp_path / "ten"
    src.mkdir()
    entries = []
    for i in range(10):
        name = f"c{i}.wav"
        audio_io.write_wav(src / name, AudioClip(np.random.default_rng(i).uniform(-0.5, 0.5, 4800), 24000))
        entries.append((name, {"id": f"c{i}"}))
    (src / "c3.wav").write_bytes(b"RIFF\x00\x00\x00\x00JUNKJUNK")
    audio_io.write_manifest(src / "m.tsv", entries)
    out = tmp_path / "feat"
    assert run("features", "--manifest", src / "m.tsv", "--kinds", "logmel", "--out", out) == 2
    assert len(list(out.glob("*.mertfeat"))) == 9
    errors = (out / "errors.tsv").read_text().splitlines()
    assert len(errors) == 1 and errors[0].startswith("c3\t")
    assert json.loads((out / "run_manifest_features.json").read_text())["status"] == "data error"


def test_features_unknown_kind(work, corpus):
    assert run("features", "--manifest", corpus, "--kinds", "wavelet", "--out", work / "f2") == 1


# ---------------------------------------------------------------- teach


def test_teach_rvq_outputs(teach_dir):
    assert (teach_dir / "codec.mertcb").exists()
    assert len((teach_dir / "targets" / "index.tsv").read_text().splitlines()) == 6


def test_teach_is_byte_reproducible(work, corpus, teach_dir, tmp_path):
    assert run("teach", "--config", work / "tiny.yaml", "--manifest", corpus, "--out", tmp_path) == 0
    assert (tmp_path / "codec.mertcb").read_bytes() == (teach_dir / "codec.mertcb").read_bytes()


def test_teach_kmeans_writes_two_codebooks(work, tmp_path):
    assert run("synth", "--config", work / "tiny.yaml", "--set", "data.clip_seconds=3.0", "--out", tmp_path / "c") == 0
    code = run("teach", "--config", work / "tiny.yaml", "--set", "teacher.kind=kmeans", "--set", "teacher.max_iters=3",
               "--manifest", tmp_path / "c" / "manifest.tsv", "--out", tmp_path / "t")
    assert code == 0
    assert sorted(p.name for p in tmp_path.glob("t/*.mertcb")) == ["codebook_chroma.mertcb", "codebook_logmel.mertcb"]


# ---------------------------------------------------------------- pretrain


def test_pretrain_smoke_run_logs_each_step(trained):
    lines = (trained / "train_log.ndjson").read_text().splitlines()
    assert len(lines) == 10
    assert (trained / "final.mertckpt").exists()


def test_pretrain_numerical_failure_exits_three(work, corpus, teach_dir, tmp_path):
    code = run("pretrain", "--config", work / "tiny.yaml", "--manifest", corpus, "--targets", teach_dir / "targets",
               "--steps", 3, "--set", "train.lr=1e30", "--set", "train.warmup_steps=0", "--out", tmp_path)
    assert code == 3
    assert any(json.loads(x)["status"] == "aborted" for x in (tmp_path / "train_log.ndjson").read_text().splitlines())


def test_pretrain_missing_targets_exits_two(work, corpus, tmp_path):
    code = run("pretrain", "--config", work / "tiny.yaml", "--manifest", corpus, "--targets", tmp_path / "none",
               "--out", tmp_path)
    assert code == 2


def test_checkpoint_version_mismatch_exits_two(work, pitch, trained, tmp_path, capsys):
    raw = (trained / "final.mertckpt").read_bytes().replace(b"MERTCKPT v1", b"MERTCKPT v7", 1)
    (tmp_path / "future.mertckpt").write_bytes(raw)
    code = run("export", "--config", work / "tiny.yaml", "--checkpoint", tmp_path / "future.mertckpt",
               "--manifest", pitch, "--out", tmp_path / "e")
    assert code == 2
    assert "VersionError" in capsys.readouterr().err


def test_resume_continues_to_same_parameters(work, corpus, teach_dir, trained, tmp_path):
    first = tmp_path / "a"
    assert run("pretrain", "--config", work / "tiny.yaml", "--manifest", corpus, "--targets", teach_dir / "targets",
               "--steps", 4, "--out", first) == 0
    assert run("pretrain", "--config", work / "tiny.yaml", "--manifest", corpus, "--targets", teach_dir / "targets",
               "--resume", first / "final.mertckpt", "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / "final.mertckpt").read_bytes() == (trained / "final.mertckpt").read_bytes()


# ---------------------------------------------------------------- probe and export


def test_probe_rows_share_task_hash(work, pitch, trained, tmp_path):
    for ckpt in ("random", trained / "final.mertckpt"):
        code = run("probe", "--config", work / "tiny.yaml", "--checkpoint", ckpt, "--manifest", pitch,
                   "--label", "pitch", "--out", tmp_path)
        assert code == 0
    rows = [json.loads(x) for x in (tmp_path / "results.ndjson").read_text().splitlines()]
    assert len(rows) == 2
    assert rows[0]["task_hash"] == rows[1]["task_hash"]
    assert rows[0]["checkpoint"] == "random" and rows[1]["checkpoint"].endswith("final.mertckpt")
    assert all(0.0 <= r["value"] <= 1.0 and r["metric"] == "accuracy" for r in rows)


def test_probe_missing_label_exits_two(work, pitch, tmp_path):
    code = run("probe", "--config", work / "tiny.yaml", "--checkpoint", "random", "--manifest", pitch,
               "--label", "tempo", "--out", tmp_path)
    assert code == 2


def test_export_writes_n_files_and_index(work, pitch, trained, tmp_path):
    n = len(pitch.read_text().splitlines())
    code = run("export", "--config", work / "tiny.yaml", "--checkpoint", trained / "final.mertckpt",
               "--manifest", pitch, "--layer", "mean", "--out", tmp_path)
    assert code == 0
    assert len(list(tmp_path.glob("*.mertfeat"))) == n
    assert len((tmp_path / "index.tsv").read_text().splitlines()) == n
    assert len((tmp_path / "labels.tsv").read_text().splitlines()) == n


def test_thread_env_is_validated(work, corpus, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "lots")
    assert run("synth", "--config", work / "tiny.yaml", "--out", tmp_path) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert run("synth", "--config", work / "tiny.yaml", "--out", tmp_path) == 0


def test_console_script_is_installed():
    assert shutil.which("mertlab") is not None
