import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import rankdata

from mertlab import audio_io, containers, dsp, pretrain, probe, teachers
from mertlab.audio_io import AudioClip

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
SETTINGS = settings(max_examples=60, deadline=None)


@SETTINGS
@given(st.integers(1, 400), st.integers(1, 12), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_mask_indices_valid(length, span, prob, seed):
    idx = pretrain.sample_mask(length, span, prob, seed).masked_indices
    assert np.all(np.diff(idx) > 0)
    assert idx.size == 0 or (idx[0] >= 0 and idx[-1] < length)


@SETTINGS
@given(st.integers(1, 5000), st.sampled_from([8000, 16000, 22050, 24000, 44100, 48000]))
def test_resample_length_rule(n, rate):
    clip = AudioClip(np.zeros(n), rate)
    target = 24000
    assert len(audio_io.resample(clip, target)) == max(1, round(n * target / rate))


@SETTINGS
@given(st.integers(1, 30), st.integers(0, 4), st.integers(0, 4))
def test_stack_context_rows_contain_centre(n, left, right):
    v = np.arange(n, dtype=float)[:, None]
    out = dsp.stack_context(v, left, right)
    assert out.shape == (n, left + right + 1)
    np.testing.assert_array_equal(out[:, left], v[:, 0])


@SETTINGS
@given(st.lists(finite, min_size=2, max_size=30), st.data())
def test_roc_invariant_to_monotone_maps(scores, data):
    y = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    y = np.array(y)
    if y.all() or not y.any():
        y[0], y[-1] = 1, 0
    s = np.array(scores)
    a = probe.metric_roc_auc(s, y)
    assert 0.0 <= a <= 1.0
    # ranks are an exact strictly monotone map, ties included
    assert abs(probe.metric_roc_auc(rankdata(s) * 2 - 7, y) - a) < 1e-12
    # flipping scores mirrors the AUC
    assert abs(probe.metric_roc_auc(-s, y) - (1 - a)) < 1e-12


@SETTINGS
@given(st.lists(finite, min_size=2, max_size=30), st.data())
def test_ap_in_unit_interval(scores, data):
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores))))
    if not y.any():
        y[0] = 1
    if y.all():
        y[-1] = 0
    ap = probe.metric_average_precision(np.array(scores), y)
    assert 0.0 < ap <= 1.0 + 1e-12
    # positives ranked strictly on top give a perfect score
    assert abs(probe.metric_average_precision(y + 0.0, y) - 1.0) < 1e-12


@SETTINGS
@given(st.lists(st.floats(0, 10), max_size=20), st.lists(st.floats(0, 10), max_size=20))
def test_beat_f_symmetric_and_bounded(pred, true):
    f = probe.metric_beat_f_measure(pred, true)
    assert 0.0 <= f <= 1.0
    assert f == probe.metric_beat_f_measure(true, pred)
    assert probe.metric_beat_f_measure(pred[::-1], true) == f


@SETTINGS
@given(st.integers(0, 11), st.sampled_from(["major", "minor"]), st.integers(0, 11), st.sampled_from(["major", "minor"]))
def test_key_credit_transposition_invariant(p, pm, t, tm):
    c = probe.key_credit((p, pm), (t, tm))
    assert c in (0.0, 0.2, 0.3, 0.5, 1.0)
    assert all(probe.key_credit(((p + s) % 12, pm), ((t + s) % 12, tm)) == c for s in range(12))


@SETTINGS
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 5)), elements=st.floats(-10, 10)),
       st.integers(1, 6), st.integers(0, 1000))
def test_assign_is_nearest(x, k, seed):
    c = np.random.default_rng(seed).normal(size=(k, x.shape[1]))
    labels = teachers.kmeans_assign(x, teachers.Codebook(c))
    d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
    np.testing.assert_allclose(d[np.arange(len(x)), labels], d.min(axis=1), rtol=1e-9, atol=1e-9)


@SETTINGS
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=finite),
       st.text(max_size=10))
def test_container_round_trip(values, sid):
    blob = containers.encode(containers.FEATURE_MAGIC, {"source_id": sid}, {"v": values})
    meta, arrs = containers.decode(blob, containers.FEATURE_MAGIC)
    assert meta["source_id"] == sid
    np.testing.assert_array_equal(arrs["v"], values)
    assert containers.encode(containers.FEATURE_MAGIC, {"source_id": sid}, {"v": values}) == blob


@SETTINGS
@given(st.lists(finite, min_size=2, max_size=30))
def test_r2_perfect_and_bounded_above(y):
    y = np.array(y)
    assert probe.metric_r2(y, y) == 1.0
    assert probe.metric_r2(y[::-1], y) <= 1.0
