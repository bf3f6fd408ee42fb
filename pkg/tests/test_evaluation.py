import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from precipgan import evaluation as ev
from precipgan.networks import CriticConfig, build_critic, critic_forward
from precipgan.autodiff import Tensor
from precipgan.data import normalize


def contingency_loop(p, t, thr):
    tp = fp = fn = 0
    for a, b in zip(p.ravel(), t.ravel()):
        if a >= thr and b >= thr:
            tp += 1
        elif a >= thr:
            fp += 1
        elif b >= thr:
            fn += 1
    return tp, fp, fn


# rmse / csi ------------------------------------------------------------------


def test_rmse_examples():
    rng = np.random.default_rng(0)
    a = rng.gamma(0.5, 4.0, size=(16, 16))
    assert ev.rmse(a, a) == 0.0
    assert ev.rmse(a + 2.5, a) == pytest.approx(2.5)
    b = rng.gamma(0.5, 4.0, size=(16, 16))
    s = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        s += (x - y) ** 2
    assert ev.rmse(a, b) == pytest.approx(math.sqrt(s / a.size), rel=1e-12)
    assert ev.rmse(a, b) == ev.rmse(b, a)
    with pytest.raises(ValueError):
        ev.rmse(a, b[:8])


def test_csi_examples():
    t = np.array([[12.0, 0.0], [11.0, 0.0]])
    assert ev.csi(t, t, 10) == 1.0
    assert ev.csi_from_counts(1, 1, 2) == 0.25
    assert math.isnan(ev.csi(np.zeros((4, 4)), np.zeros((4, 4)), 10))


def test_csi_boundary_inclusive():
    assert ev.contingency(np.array([10.0]), np.array([10.0]), 10.0) == (1, 0, 0)


def test_contingency_asymmetric_csi_symmetric():
    # swapping pred and truth exchanges FP and FN; the CSI denominator is unchanged
    x = np.array([20.0, 0.0, 20.0])
    y = np.array([20.0, 20.0, 20.0])
    assert ev.contingency(x, y, 10) == (2, 0, 1)
    assert ev.contingency(y, x, 10) == (2, 1, 0)
    assert ev.csi(x, y, 10) == ev.csi(y, x, 10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_csi_swap_property(seed):
    p, t = np.random.default_rng(seed).gamma(0.5, 8.0, size=(2, 8, 8))
    tp, fp, fn = ev.contingency(p, t, 10)
    assert ev.contingency(t, p, 10) == (tp, fn, fp)
    a, b = ev.csi(p, t, 10), ev.csi(t, p, 10)
    assert (math.isnan(a) and math.isnan(b)) or a == b


def test_csi_oracle_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p = rng.gamma(0.6, 8.0, size=(16, 16))
        t = rng.gamma(0.6, 8.0, size=(16, 16))
        for thr in (10.0, 15.0):
            c = contingency_loop(p, t, thr)
            assert ev.contingency(p, t, thr) == c
            d = sum(c)
            ref = c[0] / d if d else math.nan
            got = ev.csi(p, t, thr)
            assert (math.isnan(ref) and math.isnan(got)) or got == ref


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 30))
def test_csi_in_unit_interval(seed, thr):
    rng = np.random.default_rng(seed)
    p, t = rng.gamma(0.5, 8.0, size=(2, 8, 8))
    v = ev.csi(p, t, thr)
    assert math.isnan(v) or 0.0 <= v <= 1.0


# spectra ---------------------------------------------------------------------


def test_constant_field_spectrum_zero():
    bins, p = ev.radial_power(np.full((32, 32), 4.2))
    assert np.all(p == 0.0)
    assert list(bins) == list(range(1, 17))


@pytest.mark.parametrize("k", [1, 5, 11, 16])
def test_sinusoid_single_peak(k):
    n = 32
    x = np.arange(n)
    g = np.tile(np.cos(2 * np.pi * k * x / n), (n, 1))
    bins, p = ev.radial_power(g)
    peak = int(np.argmax(p))
    assert bins[peak] == k
    others = np.delete(p, peak)
    assert np.all(others <= 1e-10 * p[peak])


def test_white_noise_flat():
    rng = np.random.default_rng(2)
    n = 32
    ps = np.array([ev.radial_power(rng.standard_normal((n, n)))[1] for _ in range(100)])
    m = ps.mean(axis=0)
    se = ps.std(axis=0, ddof=1) / np.sqrt(len(ps))
    # unit white noise has expected power 1 per coefficient
    assert m.mean() == pytest.approx(1.0, rel=0.05)
    # 3-sigma band per bin, allowing one excursion for multiple comparisons
    assert np.sum(np.abs(m - 1.0) > 3 * se) <= 1


def test_parseval():
    g = np.random.default_rng(3).gamma(0.5, 3.0, size=(32, 32))
    sums, _ = ev.radial_power_sums(g)
    d = g - g.mean()
    assert np.sum(sums) == pytest.approx(np.sum(d * d), rel=1e-8)
    dft = np.abs(np.fft.fft2(g)) ** 2
    assert np.sum(sums) == pytest.approx((dft.sum() - dft[0, 0]) / g.size, rel=1e-8)


def test_spectrum_aggregate_examples():
    rng = np.random.default_rng(4)
    a = rng.gamma(0.5, 3.0, size=(16, 16))
    c = ev.spectrum_aggregate([a, a, a])
    assert np.all(c.sigma == 0)
    b = rng.gamma(0.5, 3.0, size=(16, 16))
    c2 = ev.spectrum_aggregate([a, b])
    la = ev.power_spectrum_radial(a).mean
    lb = ev.power_spectrum_radial(b).mean
    np.testing.assert_allclose(c2.mean, (la + lb) / 2, rtol=1e-12)
    assert np.all(np.diff(c2.bins) > 0)


def test_spectrum_aggregate_oracle():
    rng = np.random.default_rng(5)
    fs = [rng.gamma(0.5, 3.0, size=(16, 16)) for _ in range(10)]
    c = ev.spectrum_aggregate(fs)
    n = 16
    k = np.fft.fftfreq(n) * n
    ky, kx = np.meshgrid(k, k, indexing="ij")
    r = np.rint(np.hypot(kx, ky)).astype(int)
    for bi, b in enumerate(c.bins):
        vals = []
        for f in fs:
            pw = np.abs(np.fft.fft2(f - f.mean())) ** 2 / f.size
            vals.append(np.log10(pw[r == b].mean() + 1e-12))
        assert c.mean[bi] == pytest.approx(np.mean(vals), rel=1e-12)
        assert c.sigma[bi] == pytest.approx(np.std(vals), rel=1e-9, abs=1e-12)
    with pytest.raises(ValueError):
        ev.spectrum_aggregate(fs[:1])


def test_high_frequency_gap_uses_top_third():
    bins = np.arange(1, 10)
    ref = ev.SpectrumCurve(bins, np.zeros(9), np.zeros(9))
    cur = ev.SpectrumCurve(bins, np.r_[np.full(6, 100.0), np.full(3, 2.0)], np.zeros(9))
    assert ev.high_frequency_gap(cur, ref) == 2.0


# critic ----------------------------------------------------------------------


def test_critic_difference():
    cfg = CriticConfig(input_size=16, widths=[4, 8])
    critic = build_critic(cfg, 0)
    rng = np.random.default_rng(6)
    hr = rng.gamma(0.5, 4.0, size=(16, 16))
    gen = rng.gamma(0.5, 4.0, size=(16, 16))
    assert ev.critic_difference(critic, hr, hr) == 0.0
    fa = critic_forward(critic, Tensor(normalize(hr)[None, None])).data[0]
    fb = critic_forward(critic, Tensor(normalize(gen)[None, None])).data[0]
    assert ev.critic_difference(critic, hr, gen) == pytest.approx(fa - fb, rel=1e-12, abs=1e-12)


# reports & ranking -------------------------------------------------------------


def _report(diffs, ids=None):
    ids = ids or [f"f{i:03d}" for i in range(len(diffs))]
    rows = [
        {"id": i, "method": "WGAN", "rmse": 1.0, "csi10": math.nan, "csi15": 0.5, "critic_score": 0.0, "critic_diff": d}
        for i, d in zip(ids, diffs)
    ]
    return ev.MetricsReport("WGAN", rows)


def test_rank_examples():
    rep = _report([0.3, -1.0, 2.0, 0.1])
    assert ev.rank_by_critic_difference(rep, 0) == ([], [], False)
    neg, pos, flag = ev.rank_by_critic_difference(_report([1.0] * 5), 2)
    assert [r["id"] for r in neg] == ["f000", "f001"] == [r["id"] for r in pos]
    neg, pos, flag = ev.rank_by_critic_difference(rep, 10)
    assert flag and len(neg) == 4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30), st.integers(0, 10))
def test_rank_matches_sort_oracle(diffs, k):
    rep = _report(diffs)
    neg, pos, _ = ev.rank_by_critic_difference(rep, k)
    pairs = list(zip(diffs, [f"f{i:03d}" for i in range(len(diffs))]))
    assert [r["id"] for r in neg] == [i for _, i in sorted(pairs)][:k]
    assert [r["id"] for r in pos] == [i for _, i in sorted(pairs, key=lambda p: (-p[0], p[1]))][:k]


def test_evaluate_method_and_report_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    truths = [rng.gamma(0.6, 8.0, size=(16, 16)) for _ in range(5)]
    preds = [t + rng.normal(0, 2, size=t.shape).clip(-t) for t in truths]
    ids = [f"f{i}" for i in range(5)]
    critic = build_critic(CriticConfig(input_size=16, widths=[4, 8]), 1)
    rep = ev.evaluate_method("SRCNN", ids, preds, truths, critic)
    agg = rep.aggregate()
    assert agg["rmse"] == pytest.approx(np.mean([ev.rmse(p, t) for p, t in zip(preds, truths)]))
    v = rep.column("csi10")
    assert agg["csi10"] == pytest.approx(np.nanmean(v))
    ev.write_report_csv([rep], tmp_path / "r.csv")
    back, aggs = ev.read_report_csv(tmp_path / "r.csv")
    np.testing.assert_allclose(back["SRCNN"].column("rmse"), rep.column("rmse"), rtol=0)
    for c in ("rmse", "csi10", "csi15", "critic_diff"):
        assert aggs["SRCNN"][c] == pytest.approx(back["SRCNN"].aggregate()[c], rel=1e-12, nan_ok=True)


def test_evaluate_without_critic_has_empty_columns():
    t = [np.ones((8, 8))]
    rep = ev.evaluate_method("X", ["a"], t, t)
    assert math.isnan(rep.rows[0]["critic_score"]) and math.isnan(rep.rows[0]["critic_diff"])


def test_report_bad_header(tmp_path):
    (tmp_path / "r.csv").write_text("x,y\n")
    with pytest.raises(ev.ReportFormatError):
        ev.read_report_csv(tmp_path / "r.csv")


def test_spectrum_csv_round_trip(tmp_path):
    c = ev.spectrum_aggregate([np.random.default_rng(i).random((16, 16)) for i in range(3)])
    ev.write_spectrum_csv(c, tmp_path / "s.csv")
    b = ev.read_spectrum_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(b.bins, c.bins)
    np.testing.assert_array_equal(b.mean, c.mean)
