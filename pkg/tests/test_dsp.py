import numpy as np
import pytest
from scipy.fft import idct

from mertlab import containers, dsp
from mertlab.audio_io import AudioClip

SR = 24000


def tone(hz: float, seconds: float = 1.0, amp: float = 0.5) -> AudioClip:
    t = np.arange(int(seconds * SR)) / SR
    return AudioClip(amp * np.sin(2 * np.pi * hz * t), SR, f"tone{hz:g}")


def noise(seconds: float = 1.0, seed: int = 0) -> AudioClip:
    return AudioClip(np.random.default_rng(seed).uniform(-0.5, 0.5, int(seconds * SR)), SR, "noise")


ZERO = AudioClip(np.zeros(SR), SR, "zero")


# ---------------------------------------------------------------- STFT


def test_stft_shape_and_zero():
    fm = dsp.stft(ZERO, 1024, 320)
    assert fm.values.shape == (1 + SR // 320, 513)
    assert not fm.values.any()


def test_stft_bin_centre_sine_concentrates_energy():
    n = 2048
    k = 100
    fm = dsp.stft(tone(k * SR / n), n, 320)
    frame = fm.values[fm.frames // 2] ** 2
    assert frame[k - 1 : k + 2].sum() >= 0.9 * frame.sum()


def test_stft_windowed_parseval():
    clip = noise(0.5)
    n, hop = 1024, 320
    fm = dsp.stft(clip, n, hop)
    x = np.pad(clip.samples, n // 2, mode="reflect")
    t = 7
    seg = x[t * hop : t * hop + n] * dsp.hann(n)
    mag = fm.values[t]
    # one-sided spectrum: double every bin except DC and Nyquist
    energy = (mag[0] ** 2 + mag[-1] ** 2 + 2 * np.sum(mag[1:-1] ** 2)) / n
    assert energy == pytest.approx(np.sum(seg**2), rel=1e-6)


def test_stft_short_signal_and_bad_args():
    fm = dsp.stft(AudioClip(np.ones(5), SR), 2048, 320)
    assert fm.frames == 1
    with pytest.raises(ValueError):
        dsp.stft(ZERO, 256, 320)


# ---------------------------------------------------------------- log-Mel and MFCC


def test_log_mel_defaults_and_zero():
    fm = dsp.log_mel(ZERO)
    assert fm.dims == 229 and fm.frame_rate == 75.0 and fm.frames == 75
    assert not fm.values.any()


def test_log_mel_monotone_in_level():
    quiet = dsp.log_mel(noise(0.3)).values
    loud_clip = noise(0.3)
    loud = dsp.log_mel(AudioClip(loud_clip.samples * 2, SR)).values
    assert np.all(loud >= quiet - 1e-12)


def test_mel_filterbank_shape_and_peaks():
    fb = dsp.mel_filterbank(40, 4096, SR)
    assert fb.shape == (40, 2049)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    assert np.all(np.diff(np.argmax(fb, axis=1)) > 0)


def test_mfcc_zero_and_dims():
    fm = dsp.mfcc(ZERO, 20, context_stack=2)
    assert fm.dims == 20 * 5
    assert not fm.values.any()


def test_mfcc_inverts_with_full_order():
    clip = noise(0.3, seed=3)
    lm = dsp.log_mel(clip, n_mels=64)
    coeffs = dsp.mfcc(clip, n_coeffs=64, n_mels=64).values
    np.testing.assert_allclose(idct(coeffs, type=2, norm="ortho", axis=1), lm.values, atol=1e-6)


def test_dct_of_constant_frame_has_only_dc():
    from scipy.fft import dct

    c = dct(np.full((1, 229), 3.0), type=2, norm="ortho", axis=1)
    assert abs(c[0, 0]) > 0 and np.allclose(c[0, 1:], 0.0, atol=1e-12)


def test_mfcc_rejects_too_many_coefficients():
    with pytest.raises(ValueError):
        dsp.mfcc(ZERO, n_coeffs=300)


def test_stack_context_replicates_edges():
    v = np.arange(4.0)[:, None]
    np.testing.assert_array_equal(dsp.stack_context(v, 1, 2), [[0, 0, 1, 2], [0, 1, 2, 3], [1, 2, 3, 3], [2, 3, 3, 3]])


# ---------------------------------------------------------------- chroma


def test_chroma_a4_and_octave_invariance():
    a4 = dsp.chroma(tone(440.0)).values
    a5 = dsp.chroma(tone(880.0)).values
    assert a4.shape[1] == 12
    assert np.argmax(a4.mean(axis=0)) == 9 and np.argmax(a5.mean(axis=0)) == 9
    assert np.all(a4 >= 0)


def test_chroma_zero_and_stacked_dims():
    assert not dsp.chroma(ZERO).values.any()
    assert dsp.chroma(tone(440.0), (10, 11)).dims == 264


def test_chroma_frames_are_unit_norm():
    v = dsp.chroma(tone(261.63)).values
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0)


# ---------------------------------------------------------------- CQT


def test_cqt_params_validation_and_spacing():
    p = dsp.CQTParams()
    f = p.center_frequencies()
    np.testing.assert_allclose(f[1:] / f[:-1], 2 ** (1 / 12))
    assert p.q == pytest.approx(1 / (2 ** (1 / 12) - 1))
    with pytest.raises(ValueError):
        dsp.CQTParams(f_min=200.0, n_bins=84)


@pytest.mark.parametrize("k", [24, 45, 57, 70])
def test_cqt_bin_centre_tone_peaks_at_bin(k):
    p = dsp.CQTParams()
    fm = dsp.cqt(tone(p.center_frequencies()[k]), p)
    assert fm.dims == 84 and fm.frame_rate == 75.0
    assert np.all(np.argmax(fm.values[10:-10], axis=1) == k)


def test_cqt_octave_shift_moves_argmax_by_twelve():
    p = dsp.CQTParams()
    f = p.center_frequencies()
    lo = np.argmax(dsp.cqt(tone(f[30]), p).values[37])
    hi = np.argmax(dsp.cqt(tone(2 * f[30]), p).values[37])
    assert hi - lo == 12


def test_cqt_matches_brute_force_inner_product():
    p = dsp.CQTParams()
    clip = noise(0.5, seed=9)
    mag = dsp.cqt_magnitude(clip, p)
    k, t = 50, 20
    f = p.center_frequencies()[k]
    n = 2 * int(np.floor(p.q * SR / f / 2)) + 1
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / (n - 1))
    w /= w.sum()
    tau = np.arange(n) - n // 2
    idx = t * 320 + tau
    seg = np.where((idx >= 0) & (idx < clip.samples.size), clip.samples[np.clip(idx, 0, clip.samples.size - 1)], 0.0)
    ref = abs(np.sum(seg * w * np.exp(-2j * np.pi * f * tau / SR)))
    assert mag[t, k] == pytest.approx(ref, rel=1e-9)


def test_cqt_zero_signal_is_floor():
    fm = dsp.cqt(ZERO)
    np.testing.assert_array_equal(fm.values, np.log(dsp.CQT_LOG_FLOOR))


def test_cqt_is_deterministic():
    a = dsp.cqt(noise(0.2)).values
    b = dsp.cqt(noise(0.2)).values
    assert a.tobytes() == b.tobytes()


def test_cqt_rejects_rate_mismatch():
    with pytest.raises(ValueError):
        dsp.cqt(AudioClip(np.zeros(1000), 16000), dsp.CQTParams(sample_rate=24000))


def test_frame_counts_agree_on_five_seconds():
    clip = noise(5.0)
    assert dsp.log_mel(clip).frames == dsp.chroma(clip).frames == dsp.cqt(clip).frames == 375
    assert dsp.mfcc(clip).frames == 375


# ---------------------------------------------------------------- persistence


def test_feature_container_round_trip(tmp_path):
    fm = dsp.cqt(noise(0.2))
    dsp.write_features(tmp_path / "f.mertfeat", fm)
    back = dsp.read_features(tmp_path / "f.mertfeat")
    assert back.kind == "cqt" and back.frame_rate == 75.0 and back.source_id == "noise"
    np.testing.assert_array_equal(back.values, fm.values.astype(np.float32))
    raw = (tmp_path / "f.mertfeat").read_bytes()
    assert raw.startswith(b"MERTFEAT v1\n")


def test_feature_container_rejects_wrong_version(tmp_path):
    dsp.write_features(tmp_path / "f.mertfeat", dsp.cqt(noise(0.1)))
    raw = (tmp_path / "f.mertfeat").read_bytes().replace(b"MERTFEAT v1", b"MERTFEAT v9", 1)
    (tmp_path / "g.mertfeat").write_bytes(raw)
    with pytest.raises(containers.VersionError):
        dsp.read_features(tmp_path / "g.mertfeat")


def test_feature_container_rejects_truncation(tmp_path):
    dsp.write_features(tmp_path / "f.mertfeat", dsp.cqt(noise(0.1)))
    raw = (tmp_path / "f.mertfeat").read_bytes()
    (tmp_path / "t.mertfeat").write_bytes(raw[:-10])
    with pytest.raises(containers.ContainerError):
        dsp.read_features(tmp_path / "t.mertfeat")


def test_feature_matrix_invariants():
    with pytest.raises(ValueError):
        dsp.FeatureMatrix(np.zeros((0, 3)), 75.0, "cqt")
    with pytest.raises(ValueError):
        dsp.FeatureMatrix(np.array([[np.inf]]), 75.0, "cqt")
