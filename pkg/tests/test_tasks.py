import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smae import ssl, synthcortex as sc, tasks
from smae.checkpoint import save_checkpoint
from smae.sit import SitConfig
from smae.synthcortex import SurfaceDataset, SurfaceSubject

TOY = SitConfig(patch_level=0, data_level=2, channels=2, hidden_dim=16, layers=1, heads=2)


def _uniform_ds(n_per_bin=10, bins=10):
    subs = []
    for b in range(bins):
        for j in range(n_per_bin):
            y = (b + (j + 0.5) / n_per_bin) / bins
            subs.append(SurfaceSubject(f"s{b}-{j}", np.zeros((162, 1), np.float32), y))
    return SurfaceDataset(2, 0, 1, subs)


@pytest.fixture(scope="module")
def tiny_ds():
    return sc.split(sc.generate(30, data_level=2, channels=2, seed=4, patch_level=0), seed=0)


# --------------------------------------------------------------------------
# subsets


def test_stratified_twenty_percent():
    sub = tasks.stratified_subset(_uniform_ds(), 0.2, bins=10, seed=0)
    assert len(sub) == 20
    bins = sc.phenotype_bins(np.array([s.y for s in _uniform_ds().subjects]), 10)
    ids = {s.id for s in sub.subjects}
    per_bin = [sum(f"s{b}-{j}" in ids for j in range(10)) for b in range(10)]
    assert per_bin == [2] * 10
    assert len(bins) == 100


def test_full_fraction_is_identity():
    ds = _uniform_ds()
    assert [s.id for s in tasks.stratified_subset(ds, 1.0).subjects] == [s.id for s in ds.subjects]


@pytest.mark.parametrize("frac", [0.0, -0.5, 1.5])
def test_bad_fraction(frac):
    with pytest.raises(ValueError):
        tasks.stratified_subset(_uniform_ds(), frac)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), frac=st.sampled_from(tasks.DATA_FRACTIONS), n=st.integers(20, 120))
def test_subset_preserves_bin_proportions(seed, frac, n):
    rng = np.random.default_rng(seed)
    subs = [SurfaceSubject(str(i), np.zeros((162, 1), np.float32), float(rng.uniform())) for i in range(n)]
    ds = SurfaceDataset(2, 0, 1, subs)
    y = np.array([s.y for s in subs])
    b = sc.phenotype_bins(y, 10)
    sub = tasks.stratified_subset(ds, frac, 10, seed)
    kept = {s.id for s in sub.subjects}
    for k in range(10):
        members = [i for i in range(n) if b[i] == k]
        got = sum(str(i) in kept for i in members)
        assert abs(got - frac * len(members)) <= 1


# --------------------------------------------------------------------------
# convergence


def test_detector_fires_after_patience():
    d = tasks.ConvergenceDetector(patience=3)
    seq = [(1.0, 1.0), (0.9, 0.9), (0.9, 0.9), (0.9, 0.9), (0.9, 0.9)]
    fired = [d.update(e, *v) for e, v in enumerate(seq)]
    assert fired == [False, False, False, False, True]
    assert d.epochs_to_converge == 1 and d.fired_at == 4


def test_detector_resets_on_either_metric():
    d = tasks.ConvergenceDetector(patience=2)
    d.update(0, 1.0, 1.0)
    d.update(1, 1.0, 0.5)  # mae improves
    d.update(2, 0.5, 0.5)  # loss improves
    assert not d.update(3, 0.5, 0.5)
    assert d.update(4, 0.5, 0.5)
    assert d.epochs_to_converge == 2


def test_detector_tolerance():
    d = tasks.ConvergenceDetector(patience=1, tol=1e-6)
    d.update(0, 1.0, 1.0)
    assert d.update(1, 1.0 - 5e-7, 1.0 - 5e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 2), st.floats(0, 2)), min_size=1, max_size=60), st.integers(1, 8))
def test_detector_matches_reference(seq, patience):
    d = tasks.ConvergenceDetector(patience=patience)
    fired = None
    for e, (l, m) in enumerate(seq):
        if d.update(e, l, m) and fired is None:
            fired = e
    # reference: last strictly-improving epoch scan
    best_l = best_m = math.inf
    last = None
    ref = None
    for e, (l, m) in enumerate(seq):
        imp = False
        if l < best_l - 1e-6:
            best_l, imp = l, True
        if m < best_m - 1e-6:
            best_m, imp = m, True
        if imp or last is None:
            last = e
        if e - last >= patience:
            ref = e
            break
    assert fired == ref


# --------------------------------------------------------------------------
# metrics


def test_metrics_perfect_and_mean():
    y = np.array([1.0, 2.0, 3.0])
    assert tasks.regression_metrics(y, y) == (0.0, 1.0)
    mae, r2 = tasks.regression_metrics(np.full(3, 2.0), y)
    assert r2 == 0.0 and mae == pytest.approx(2 / 3)


def test_metrics_zero_variance(caplog):
    mae, r2 = tasks.regression_metrics(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    assert mae == 0.5 and math.isnan(r2)
    assert "zero-variance" in caplog.text


def test_speedup_and_improvement():
    assert tasks.speedup_percent(100, 34) == pytest.approx(66.0)
    assert tasks.speedup_percent(50, 50) == 0.0
    assert tasks.improvement_percent(0.5, 0.5) == 0.0


def test_compare_runs_rows():
    runs = [{"label": "scratch", "seed": s, "mae": m, "epochsToConverge": e}
            for s, m, e in [(0, 1.0, 100), (1, 1.2, 80)]]
    runs += [{"label": "smae", "seed": s, "mae": m, "epochsToConverge": e} for s, m, e in [(0, 0.8, 30), (1, 0.8, 30)]]
    rows = tasks.compare_runs(runs, "scratch")
    smae = next(r for r in rows if r["label"] == "smae")
    assert smae["maeMean"] == pytest.approx(0.8)
    assert smae["convergenceSpeedupPct"] == pytest.approx((90 - 30) / 90 * 100)
    assert "smae" in tasks.format_comparison(rows)


def test_compare_runs_errors():
    with pytest.raises(ValueError):
        tasks.compare_runs([{"label": "a", "seed": 0, "mae": 1.0, "epochsToConverge": 1}])
    with pytest.raises(ValueError, match="different datasets"):
        tasks.compare_runs([
            {"label": "a", "seed": 0, "mae": 1.0, "epochsToConverge": 1, "dataset": {"seed": 0}},
            {"label": "b", "seed": 0, "mae": 1.0, "epochsToConverge": 1, "dataset": {"seed": 1}},
        ])


# --------------------------------------------------------------------------
# training


def test_train_run_defaults():
    assert tasks.TrainRun(mode="scratch").epochs == 1000
    assert tasks.TrainRun(mode="finetune", init_checkpoint="x").epochs == 200
    assert tasks.TrainRun(mode="probe").learning_rate == 1e-5


def test_train_run_validation():
    problems = tasks.TrainRun(mode="finetune", data_fraction=0.0, patience=0).validate()
    assert len(problems) == 3


def test_train_writes_outputs(tmp_path, tiny_ds):
    run = tasks.TrainRun(mode="scratch", max_epochs=4, lr=0.01, batch=4, model=TOY, seed=2)
    res = tasks.train(run, tiny_ds, tmp_path)
    assert len(res.metrics.per_epoch) == 5
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert {"mae", "r2", "epochsToConverge", "seed", "testMAE", "config"} <= set(summary)
    assert summary["config"]["run"]["seed"] == 2
    assert (tmp_path / "metrics.csv").read_text().startswith("epoch,trainLoss,valLoss,valMAE,wallClockSec")
    assert (tmp_path / "checkpoint.smck").exists()


def test_train_is_deterministic(tiny_ds):
    run = tasks.TrainRun(mode="scratch", max_epochs=3, lr=0.01, batch=4, model=TOY, seed=5)
    a, b = tasks.train(run, tiny_ds), tasks.train(run, tiny_ds)
    assert a.metrics.summary() == b.metrics.summary()
    assert [h["valMAE"] for h in a.metrics.per_epoch] == [h["valMAE"] for h in b.metrics.per_epoch]


def test_early_stop(tiny_ds):
    run = tasks.TrainRun(mode="scratch", max_epochs=50, patience=2, lr=1e-30, batch=8, model=TOY)
    res = tasks.train(run, tiny_ds)
    assert res.metrics.converged
    assert len(res.metrics.per_epoch) < 51


def _ssl_checkpoint(path, cfg):
    model = ssl.SmaeModel(cfg, np.random.default_rng(0))
    save_checkpoint(path, {"kind": "smae", "model": cfg.to_json(), "usePosenc": True}, model.state_dict())
    return model


def test_finetune_loads_encoder(tmp_path, tiny_ds):
    src = _ssl_checkpoint(tmp_path / "c.smck", TOY)
    run = tasks.TrainRun(mode="finetune", init_checkpoint=str(tmp_path / "c.smck"), max_epochs=0, model=TOY)
    res = tasks.train(run, tiny_ds)
    want = src.encoder.state_dict()
    for k, v in res.model.encoder.state_dict().items():
        np.testing.assert_array_equal(v, want[k].astype(np.float32))


def test_finetune_config_mismatch(tmp_path, tiny_ds):
    _ssl_checkpoint(tmp_path / "c.smck", TOY)
    other = SitConfig(patch_level=0, data_level=2, channels=2, hidden_dim=8, layers=1, heads=2)
    run = tasks.TrainRun(mode="finetune", init_checkpoint=str(tmp_path / "c.smck"), max_epochs=1, model=other)
    with pytest.raises(tasks.ConfigMismatch):
        tasks.train(run, tiny_ds)


def test_probe_freezes_encoder(tmp_path, tiny_ds):
    _ssl_checkpoint(tmp_path / "c.smck", TOY)
    run = tasks.TrainRun(mode="probe", init_checkpoint=str(tmp_path / "c.smck"), max_epochs=3, lr=0.01,
                         batch=4, model=TOY)
    res = tasks.train(run, tiny_ds)
    assert res.trainable == 3 * 16 + 1


def test_probe_detects_encoder_change(tmp_path, tiny_ds, monkeypatch):
    real = tasks._encoder_bytes
    calls = []

    def fake(model):
        calls.append(1)
        out = real(model)
        if len(calls) > 1:
            out = dict(out, tampered=b"x")
        return out

    monkeypatch.setattr(tasks, "_encoder_bytes", fake)
    run = tasks.TrainRun(mode="probe", max_epochs=1, batch=8, model=TOY)
    with pytest.raises(tasks.FreezeViolation):
        tasks.train(run, tiny_ds)


def test_evaluate_split(tiny_ds):
    run = tasks.TrainRun(mode="scratch", max_epochs=1, batch=8, model=TOY)
    res = tasks.train(run, tiny_ds)
    m = tasks.evaluate(res, tiny_ds, "test")
    assert m.mae >= 0
    with pytest.raises(ValueError):
        tasks.evaluate(res, tiny_ds.subset(tiny_ds.select("train")), "test")
