import json

import numpy as np
import pytest

from clincov import lincov, montecarlo as mc
from clincov.simulation import Rect, simulate_nominal

from conftest import zero_noise

D0 = np.diag([1.0, 1.0, 0.01, 1e-4, 1e-4, 1.0, 1e-5])


def _config(P0, runs=8, seed=3, **kw):
    return mc.RunConfig(runs=runs, seed=seed, D0=kw.pop("D0", D0), P0=P0, **kw)


def test_noise_free_runs_follow_nominal(model):
    quiet = model.with_noise(zero_noise())
    wp = np.array([[0.0, 0.0], [300.0, 0.0], [300.0, 300.0]])
    P0 = np.diag([1.0, 1.0, 0.05**2, 1e-4])
    nominal, _ = simulate_nominal(quiet, quiet.trim_state(wp[0], 0.0), P0, wp, dt=0.01, gps_every=100,
                                  denied=[Rect(100, 200, -50, 50)], max_time=15.0)
    cfg = _config(P0, runs=3, D0=np.zeros((7, 7)), E0=np.zeros((4, 4)))
    out = mc.simulate_runs(quiet, nominal, cfg, [0, 1, 2], denied=[Rect(100, 200, -50, 50)])
    for r in range(3):
        np.testing.assert_allclose(out.z[r], nominal.z, rtol=0, atol=1e-9)
        np.testing.assert_allclose(out.P_hat[r], nominal.P_hat, rtol=1e-9, atol=1e-15)


def test_same_seed_is_reproducible(model, short_nominal):
    nominal, P0 = short_nominal
    cfg = _config(P0, runs=4, stride=50)
    a = mc.run_ensemble(model, nominal, cfg)
    b = mc.run_ensemble(model, nominal, cfg)
    np.testing.assert_array_equal(a.disp_std, b.disp_std)
    c = mc.run_ensemble(model, nominal, _config(P0, runs=4, stride=50, seed=4))
    assert not np.array_equal(a.disp_std, c.disp_std)


def test_batching_does_not_change_runs(model, short_nominal):
    nominal, P0 = short_nominal
    whole = mc.simulate_runs(model, nominal, _config(P0, stride=100), np.arange(5))
    single = mc.simulate_run(model, nominal, _config(P0, stride=100), 3)
    np.testing.assert_array_equal(whole.z[3], single.z)
    a = mc.run_ensemble(model, nominal, _config(P0, runs=6, stride=100, batch=6))
    b = mc.run_ensemble(model, nominal, _config(P0, runs=6, stride=100, batch=4))
    np.testing.assert_allclose(a.disp_std, b.disp_std, rtol=1e-12)
    np.testing.assert_allclose(a.est_mean, b.est_mean, rtol=1e-12, atol=1e-15)


def test_runs_are_distinct(model, short_nominal):
    nominal, P0 = short_nominal
    out = mc.simulate_runs(model, nominal, _config(P0, stride=200), [0, 1])
    assert not np.array_equal(out.z[0], out.z[1])


def test_two_sample_std():
    t = np.array([0.0, 1.0])
    nom = np.zeros((2, 13))
    v = np.arange(1.0, 14.0) * 0.01
    stats = mc.ensemble_stats(t, nom, [nom + v, nom - v])
    np.testing.assert_allclose(stats.disp_std, np.tile(np.abs(v[:7]) * np.sqrt(2), (2, 1)))
    np.testing.assert_allclose(stats.disp_mean, 0.0, atol=1e-17)
    same = mc.ensemble_stats(t, nom, [nom + v] * 5)
    np.testing.assert_allclose(same.disp_std, 0.0, atol=1e-15)
    np.testing.assert_allclose(same.est_std, 0.0, atol=1e-15)


def test_single_run_has_no_std():
    with pytest.raises(ValueError, match="two runs"):
        mc.ensemble_stats([0.0], np.zeros((1, 13)), [np.zeros((1, 13))])


def test_chan_merge_matches_direct():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 2.0, size=(37, 5, 3))
    acc = mc._Accumulator((5, 3))
    for lo in range(0, 37, 10):
        acc.merge(data[lo:lo + 10])
    np.testing.assert_allclose(acc.mean, data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(acc.std(), data.std(axis=0, ddof=1), rtol=1e-12)


def test_heading_dispersion_wraps():
    nom = np.zeros((1, 13))
    nom[0, 3] = np.pi - 0.01
    z = nom.copy()
    z[0, 3] = -np.pi + 0.01
    assert mc.dispersion(z, nom)[0, 3] == pytest.approx(0.02)


def _series_and_stats(sigma, scale=1.0):
    t = np.arange(0, 20.0, 1.0)
    C = np.zeros((t.size, 13, 13))
    C[:, range(13), range(13)] = sigma**2
    series = lincov.LinCovSeries(t, C, np.zeros((t.size, 4, 4)))
    lin = np.hstack([series.dispersion_sigma(), series.estimation_sigma()])
    stats = mc.EnsembleStats(t, 100, np.zeros((t.size, 7)), scale * lin[:, :7], np.zeros((t.size, 4)),
                             scale * lin[:, 7:])
    return series, stats


def test_compare_equal_passes():
    series, stats = _series_and_stats(0.5)
    rep = mc.compare(series, stats, 0.15)
    assert rep.passed
    for s in rep.states:
        np.testing.assert_allclose(s.ratio, 1.0)


def test_compare_doubled_fails():
    series, stats = _series_and_stats(0.5, scale=2.0)
    rep = mc.compare(series, stats, 0.15)
    assert not rep.passed
    assert all(s.fraction == 0.0 for s in rep.states)


def test_compare_excluded_points_are_not_scored():
    series, stats = _series_and_stats(0.5)
    stats.disp_std[10:12] *= 3
    assert not mc.compare(series, stats, 0.15, required_fraction=1.0).passed
    mask = np.zeros(series.t.size, dtype=bool)
    mask[10:12] = True
    rep = mc.compare(series, stats, 0.15, excluded=mask, required_fraction=1.0)
    assert rep.passed
    assert rep.states[0].flagged.sum() == 2


def test_compare_needs_common_grid():
    series, stats = _series_and_stats(0.5)
    stats.t = stats.t + 0.5
    with pytest.raises(ValueError):
        mc.compare(series, stats, 0.15)


def test_exit_windows():
    t = np.arange(0, 40.0, 1.0)
    avail = np.ones(t.size, dtype=bool)
    avail[10:20] = False
    mask = mc.exit_windows(t, avail, 1.0, 10.0)
    assert np.flatnonzero(mask).tolist() == list(range(19, 31))
    assert not mc.exit_windows(t, np.ones(t.size, dtype=bool), 1.0, 10.0).any()


def test_output_indices():
    assert mc.output_indices(11, 5).tolist() == [0, 5, 10]
    assert mc.output_indices(12, 5).tolist() == [0, 5, 10, 11]


def test_gust_variance_is_stationary(model, short_nominal):
    nominal, P0 = short_nominal
    D = D0.copy()
    D[5, 5] = 1.06**2
    stats = mc.run_ensemble(model, nominal, _config(P0, runs=400, seed=11, D0=D, stride=500))
    np.testing.assert_allclose(stats.disp_std[:, 5], 1.06, rtol=0.10)


def test_summary_and_csv(tmp_path):
    series, stats = _series_and_stats(0.5)
    rep = mc.compare(series, stats, 0.15)
    mc.write_comparison_csv(tmp_path / "c.csv", rep)
    mc.write_summary_json(tmp_path / "s.json", rep, {"runs": 100})
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["passed"] and doc["runs"] == 100
    assert set(doc["states"]) == {s.name for s in rep.states}
    header = (tmp_path / "c.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 1 + 2 * 11
