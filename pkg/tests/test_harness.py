import json
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dlrenkf.errors import ConfigError, MismatchedExperiments, NumericalError
from dlrenkf.harness import (
    PRESETS,
    ComparisonTable,
    ExperimentConfig,
    RunRecord,
    build_experiment,
    compare_runs,
    load_config,
    preset,
    relative_error,
    run_filter,
    run_repetitions,
    simulate_truth,
    sweep_rank,
    synthesize_observations,
)
from dlrenkf.models.base import FunctionModel, LinearModel
from dlrenkf.models.fisher_kpp import DT, T_FINAL, THETA_TRUE, FisherKPP, initial_condition


def linear_config(**changes):
    return preset("linear").replace(**changes)


# -- configuration ---------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_are_valid(name):
    cfg = preset(name)
    assert cfg.name == name
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("nope")


@pytest.mark.parametrize("patch, where", [
    ({"bogus": 1}, "config"),
    ({"filter": {"particles": 1}}, "filter"),
    ({"filter": {"variant": "xenkf"}}, "filter"),
    ({"time": {"dt": 0.0}}, "time"),
    ({"time": {"horizon": -1.0}}, "time"),
    ({"prior": {"sigma": [0.1, 0.0]}}, "prior"),
    ({"filter": {"dlr": True, "rank": 20, "particles": 20}}, "filter.rank"),
    ({"filter": {"hyper": True}}, "filter.hyper"),
    ({"model": {"name": "weather"}}, "model.name"),
    ({"seed": -1}, "seed"),
    ({"observation": {"unknown": 1}}, "observation"),
])
def test_config_validation(patch, where):
    data = preset("linear").to_dict()
    for key, value in patch.items():
        if isinstance(value, dict) and key in data:
            data[key].update(value)
        else:
            data[key] = value
    with pytest.raises(ConfigError, match=where.replace(".", "\\.")):
        ExperimentConfig.from_dict(data)


def test_config_model_shorthand():
    cfg = ExperimentConfig.from_dict({"model": {"name": "linear", "dim": 3}})
    assert cfg.model.options == {"dim": 3}


def test_replace_and_identity():
    cfg = preset("linear")
    other = cfg.replace(**{"filter.rank": 2, "filter.dlr": True})
    assert other.filter.rank == 2 and cfg.filter.rank == 4
    assert other.identity() == cfg.identity()
    assert cfg.replace(**{"time.dt": 0.02}).identity() != cfg.identity()


def test_load_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(PRESETS["linear"]()))
    assert load_config(path) == preset("linear")
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_build_experiment_checks_operator_pairing():
    with pytest.raises(ConfigError, match="partial"):
        build_experiment(linear_config(**{"observation.operator": "partial"}))
    with pytest.raises(ConfigError, match="gamma"):
        build_experiment(linear_config(**{"observation.gamma": [1.0, 2.0]}))


# -- truth -------------------------------------------------------------------------------

def test_truth_with_zero_drift_is_constant():
    m = FunctionModel(lambda X, th, t=0.0: np.zeros_like(X), dim=3)
    tr = simulate_truth(m, [], np.array([1.0, 2.0, 3.0]), 0.1, 5)
    assert tr.states.shape == (6, 3)
    np.testing.assert_array_equal(tr.states, np.tile([1.0, 2.0, 3.0], (6, 1)))


def test_truth_scalar_euler():
    m = LinearModel(-np.eye(1))
    tr = simulate_truth(m, [], np.ones(1), 0.1, 10, H=np.eye(1), keep_every=5)
    np.testing.assert_allclose(tr.states[:, 0], [1.0, 0.9**5, 0.9**10], rtol=1e-14)
    np.testing.assert_allclose(tr.times, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(tr.observed[:, 0], 0.9 ** np.arange(1, 11), rtol=1e-14)
    assert tr.final[0] == pytest.approx(0.9**10)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_truth_blow_up_is_reported():
    m = LinearModel(1e308 * np.eye(1))
    with pytest.raises(NumericalError):
        simulate_truth(m, [], np.ones(1), 10.0, 3)


def test_fisher_front_crosses_domain():
    m = FisherKPP()
    tr = simulate_truth(m, THETA_TRUE, initial_condition(m.grid), DT, int(round(T_FINAL / DT)),
                        keep_every=0)
    rr, aa = m.grid.polar()
    far_corner = np.flatnonzero((rr == rr.max()) & (aa == aa.max()))[0]
    assert initial_condition(m.grid)[far_corner] < 1e-40
    assert tr.final[far_corner] > 0.5


# -- observations ---------------------------------------------------------------------------

def test_noiseless_observations():
    Hx = np.random.default_rng(0).standard_normal((20, 3))
    obs = synthesize_observations(Hx, np.zeros((3, 3)), 0.01, seed=4)
    np.testing.assert_allclose(obs.y, Hx, rtol=1e-14)


def test_observation_noise_statistics():
    n, k, dt, g = 4000, 2, 0.01, 0.3
    obs = synthesize_observations(np.zeros((n, k)), g * np.eye(k), dt, seed=11)
    for j in range(k):
        s2 = np.sum(obs.dZ[:, j] ** 2)
        lo, hi = stats.chi2.ppf([0.0015, 0.9985], n)
        assert lo <= s2 / (g * dt) <= hi


def test_observations_are_reproducible():
    Hx = np.ones((10, 2))
    a = synthesize_observations(Hx, np.eye(2), 0.1, seed=5)
    b = synthesize_observations(Hx, np.eye(2), 0.1, seed=5)
    c = synthesize_observations(Hx, np.eye(2), 0.1, seed=6)
    np.testing.assert_array_equal(a.dZ, b.dZ)
    assert not np.array_equal(a.dZ, c.dZ)
    np.testing.assert_array_equal(a.Gamma_tilde, np.eye(2) / 0.1)
    assert len(a) == 10


def test_observations_need_recorded_trajectory():
    tr = simulate_truth(LinearModel(-np.eye(1)), [], np.ones(1), 0.1, 3)
    with pytest.raises(ValueError):
        synthesize_observations(tr, np.eye(1), 0.1, 0)


def test_relative_error():
    assert relative_error([1.1, 2.0], [1.0, 2.0]) == pytest.approx(0.1 / np.sqrt(5))
    assert relative_error([0.5], [0.0]) == 0.5


# -- runs -------------------------------------------------------------------------------------

def test_uninformative_observations_keep_prior_mean():
    cfg = linear_config(**{"model.options.rate": 0.0, "observation.gamma": 1e12, "time.horizon": 0.5})
    rec = run_filter(cfg)
    exp = build_experiment(cfg)
    from dlrenkf.harness import _prior
    _, params, _ = _prior(exp, cfg, cfg.seed)
    np.testing.assert_allclose(rec.param_mean[-1], params.mean(axis=1), rtol=1e-6, atol=1e-9)


def test_scalar_denkf_tracks_truth():
    gamma, dt = 1e-4, 1e-2
    cfg = ExperimentConfig.from_dict({
        "model": {"name": "linear", "dim": 1, "rate": 1.0, "n_params": 0},
        "observation": {"operator": "full", "gamma": gamma},
        "filter": {"variant": "denkf", "particles": 30},
        "time": {"dt": dt, "horizon": 3.0},
        "prior": {"state_sigma": 0.5},
        "output": {"probe_every": 1},
        "seed": 3,
    })
    rec = run_filter(cfg)
    gap = np.abs(rec.probe_estimate[:, 0] - rec.probe_truth[:, 0])
    burn = len(gap) // 3
    assert gap[burn:].mean() < 3 * np.sqrt(gamma / dt)
    assert gap[burn:].mean() < 0.2 * gap[0]


def test_fom_and_lossless_dlr_agree_on_linear_model():
    cfg = preset("linear")
    fom = run_filter(cfg)
    for mean_in_basis in (True, False):
        dlr = run_filter(cfg.replace(**{"filter.dlr": True, "filter.mean_in_basis": mean_in_basis}))
        assert abs(fom.final_error - dlr.final_error) < 1e-6
        np.testing.assert_allclose(dlr.param_mean, fom.param_mean, atol=1e-6)
        assert dlr.ranks.shape == (cfg.time.n_steps, 1)


def test_runs_are_deterministic():
    cfg = linear_config(**{"filter.variant": "venkf", "time.horizon": 0.5})
    a, b = run_filter(cfg), run_filter(cfg)
    np.testing.assert_array_equal(a.param_mean, b.param_mean)
    np.testing.assert_array_equal(a.probe_estimate, b.probe_estimate)
    assert a.final_error == b.final_error


def test_repetitions_use_distinct_seeds():
    cfg = linear_config(**{"repetitions": 3, "time.horizon": 0.2, "seed": 6})
    recs = run_repetitions(cfg)
    assert [r.seed for r in recs] == [6, 7, 4]
    assert len({r.final_error for r in recs}) == 3


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numerical_failure_carries_step():
    cfg = linear_config(**{"model.options.rate": -1e306, "time.horizon": 0.1})
    exp = build_experiment(cfg)
    exp.cache[("truth", 0, cfg.time.n_steps, cfg.output.probe_every, cfg.time.dt)] = simulate_truth(
        LinearModel(-np.eye(4), np.ones((4, 1))), [1.0], exp.x0, cfg.time.dt, cfg.time.n_steps,
        H=exp.obs.H, keep_every=cfg.output.probe_every)
    with pytest.raises(NumericalError) as info:
        run_filter(cfg, experiment=exp)
    assert info.value.step >= 0
    assert str(info.value).startswith("step ")


def test_progress_callback():
    seen = []
    run_filter(linear_config(**{"time.horizon": 2.0}), progress=lambda k, n, m: seen.append((k, n)))
    assert seen == [(100, 200), (200, 200)]


def test_sweep_rank_labels():
    cfg = linear_config(**{"time.horizon": 0.2})
    recs = sweep_rank(cfg, [2, 4])
    assert [r.label for r in recs] == ["fom", "dlr2", "dlr4"]
    assert all(r.experiment == recs[0].experiment for r in recs)


# -- records and comparison --------------------------------------------------------------------

def _fake_record(cfg, label, variant, error, wall, rep=0):
    n = 3
    return RunRecord(config=cfg.to_dict(), repetition=rep, seed=rep, label=label, variant=variant,
                     theta_true=np.ones(1), steps=np.arange(1, n + 1), param_mean=np.ones((n, 1)),
                     param_std=np.zeros((n, 1)), final_error=error,
                     timings={"forecast": wall, "analysis": 0.0})


def test_record_round_trip(tmp_path):
    rec = run_filter(linear_config(**{"filter.dlr": True, "filter.rank": 2, "time.horizon": 0.3}))
    back = RunRecord.from_dir(rec.to_dir(tmp_path / "run"))
    for name in ("param_mean", "param_std", "steps", "ranks", "discarded", "probe_times",
                 "probe_estimate", "probe_truth", "theta_true"):
        np.testing.assert_array_equal(getattr(back, name), getattr(rec, name))
    assert (back.final_error, back.label, back.variant, back.seed) == (
        rec.final_error, rec.label, rec.variant, rec.seed)
    assert back.timings == rec.timings
    assert back.experiment == rec.experiment


def test_record_rejects_bad_error():
    with pytest.raises(ValueError):
        _fake_record(preset("linear"), "fom", "senkf", float("nan"), 1.0)


def test_from_dir_requires_run_directory(tmp_path):
    with pytest.raises(ConfigError):
        RunRecord.from_dir(tmp_path)


def test_compare_single_record():
    table = compare_runs([_fake_record(preset("linear"), "fom", "senkf", 0.25, 2.0)])
    assert len(table.rows) == 1
    row = table.rows[0]
    assert (row["mean_error"], row["std_error"], row["runs"], row["speedup"]) == (0.25, 0.0, 1, 1.0)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=10),
       st.lists(st.floats(0.1, 5), min_size=2, max_size=10))
@settings(max_examples=25)
def test_compare_matches_independent_aggregation(errors, walls):
    cfg = preset("linear")
    n = min(len(errors), len(walls))
    recs = [_fake_record(cfg, "fom", "senkf", errors[i], walls[i], i) for i in range(n)]
    recs += [_fake_record(cfg, "dlr3", "senkf", errors[i] / 2, walls[i] / 4, i) for i in range(n)]
    table = compare_runs(recs)
    fom, dlr = table.lookup("senkf", "fom"), table.lookup("senkf", "dlr3")
    assert fom["mean_error"] == pytest.approx(statistics.fmean(errors[:n]))
    assert fom["std_error"] == pytest.approx(statistics.stdev(errors[:n]), abs=1e-12)
    assert (fom["min_error"], fom["max_error"]) == (min(errors[:n]), max(errors[:n]))
    assert dlr["speedup"] == pytest.approx(4.0)
    assert [r["method"] for r in table.rows] == ["fom", "dlr3"]


def test_compare_orders_methods_and_writes_csv(tmp_path):
    cfg = preset("linear")
    recs = [_fake_record(cfg, lab, var, 0.1, 1.0)
            for var in ("venkf", "denkf") for lab in ("dlr10", "fom", "dlr2")]
    table = compare_runs(recs)
    assert [(r["variant"], r["method"]) for r in table.rows] == [
        ("denkf", "fom"), ("denkf", "dlr2"), ("denkf", "dlr10"),
        ("venkf", "fom"), ("venkf", "dlr2"), ("venkf", "dlr10")]
    path = table.to_csv(tmp_path / "t.csv")
    assert path.read_text().splitlines()[0].split(",") == list(ComparisonTable.COLUMNS)
    assert "dlr10" in str(table)


def test_compare_without_reference_gives_nan_speedup():
    table = compare_runs([_fake_record(preset("linear"), "dlr2", "senkf", 0.1, 1.0)])
    assert np.isnan(table.rows[0]["speedup"])


def test_compare_rejects_mixed_experiments():
    a = _fake_record(preset("linear"), "fom", "senkf", 0.1, 1.0)
    b = _fake_record(preset("linear").replace(**{"time.dt": 0.02}), "fom", "senkf", 0.1, 1.0)
    with pytest.raises(MismatchedExperiments):
        compare_runs([a, b])
    with pytest.raises(ValueError):
        compare_runs([])
