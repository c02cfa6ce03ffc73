import numpy as np
import pandas as pd
import pytest

from lqs_hvroc.isoc import (
    DataSummary,
    DFOptions,
    IdentificationConfig,
    TrialFormatError,
    identified_config,
    identify,
    load_result,
    load_trials,
    minimize_derivative_free,
    save_result,
    segment_and_align,
)
from lqs_hvroc.lqs import propagate_moments, solve_lqs
from lqs_hvroc.model import NoiseParams
from lqs_hvroc.simulate import ensemble_frame, rollout_ensemble, write_ensemble_csv

from conftest import make_problem

# ---------------------------------------------------------------- optimizer


def test_quadratic_interior_minimum():
    x, f, n = minimize_derivative_free(lambda x: (x[0] - 3.0) ** 2, [0.0], [(0.0, 10.0)], DFOptions(xatol=1e-8))
    assert abs(x[0] - 3.0) < 1e-4 and f < 1e-8 and n <= 2000


def test_bound_active_minimum():
    x, f, _ = minimize_derivative_free(lambda x: (x[0] + 1.0) ** 2 + (x[1] - 2.0) ** 2, [1.0, 0.0],
                                       [(0.0, 5.0), (0.0, 5.0)], DFOptions(xatol=1e-8))
    assert x[0] == pytest.approx(0.0, abs=1e-6) and x[1] == pytest.approx(2.0, abs=1e-4)
    assert f == pytest.approx(1.0, abs=1e-6)


def test_rosenbrock():
    rosen = lambda x: 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2  # noqa: E731
    x, f, n = minimize_derivative_free(rosen, [-1.2, 1.0], [(-5, 5), (-5, 5)], DFOptions(xatol=1e-10, max_evals=2000))
    assert f < 1e-6 and n <= 2000


def test_nonfinite_values_are_a_barrier():
    obj = lambda x: np.nan if x[0] > 2 else (x[0] - 4.0) ** 2  # noqa: E731
    x, f, _ = minimize_derivative_free(obj, [0.0], [(0.0, 10.0)], DFOptions(xatol=1e-8))
    assert x[0] <= 2 and x[0] == pytest.approx(2.0, abs=1e-3)
    with pytest.raises(ValueError):
        minimize_derivative_free(lambda x: np.inf, [0.0], [(0.0, 1.0)])
    with pytest.raises(ValueError):
        minimize_derivative_free(lambda x: 0.0, [0.0], [(1.0, 0.0)])


def test_optimizer_is_deterministic():
    obj = lambda x: np.sum((x - np.array([0.3, -0.2, 1.1, 0.7])) ** 2) + np.prod(np.cos(x))  # noqa: E731
    a = minimize_derivative_free(obj, np.zeros(4), [(-2, 2)] * 4)
    b = minimize_derivative_free(obj, np.zeros(4), [(-2, 2)] * 4)
    assert np.array_equal(a[0], b[0]) and a[1:] == b[1:]


# ---------------------------------------------------------------- loading


@pytest.fixture(scope="module")
def ens(ref):
    return rollout_ensemble(ref.spec(), 17, seed=3, store_observations=False)


def test_load_roundtrip(tmp_path, ens):
    write_ensemble_csv(ens.subset([0, 1]), tmp_path / "t.csv")
    back = load_trials(tmp_path / "t.csv", dt=0.01)
    assert len(back) == 2 and back.N == 300 and back.dt == pytest.approx(0.01)
    assert np.allclose(back.states, ens.states[:2], rtol=1e-10, atol=1e-14)


def test_seventeen_trials_keep_horizon(tmp_path, ens):
    write_ensemble_csv(ens, tmp_path / "t.csv")
    back = load_trials(tmp_path / "t.csv", N=300)
    assert len(back) == 17 and back.states.shape == (17, 301, 5)


def test_missing_column_is_named(tmp_path):
    pd.DataFrame({"trial_id": [0, 0], "time_s": [0, 0.01]}).to_csv(tmp_path / "t.csv", index=False)
    with pytest.raises(TrialFormatError, match="p_x_m"):
        load_trials(tmp_path / "t.csv")


def test_empty_and_header_only_files(tmp_path):
    (tmp_path / "a.csv").write_text("")
    (tmp_path / "b.csv").write_text("trial_id,time_s,p_x_m\n")
    for name in ("a.csv", "b.csv"):
        with pytest.raises(TrialFormatError):
            load_trials(tmp_path / name)


def test_bad_value_reports_row(tmp_path):
    (tmp_path / "t.csv").write_text("trial_id,time_s,p_x_m\n0,0.00,0.0\n0,0.01,abc\n0,0.02,0.1\n0,0.03,inf\n")
    with pytest.raises(TrialFormatError, match=r"rows \[3, 5\]"):
        load_trials(tmp_path / "t.csv")


def test_irregular_and_mismatched_sampling(tmp_path):
    t = np.r_[0.0, 0.01, 0.01, 0.02, 0.03]
    pd.DataFrame({"trial_id": 0, "time_s": t, "p_x_m": t}).to_csv(tmp_path / "dup.csv", index=False)
    with pytest.raises(TrialFormatError, match="uniformly"):
        load_trials(tmp_path / "dup.csv", dt=0.01)
    t = 0.02 * np.arange(11)
    pd.DataFrame({"trial_id": 0, "time_s": t, "p_x_m": t**2}).to_csv(tmp_path / "slow.csv", index=False)
    with pytest.raises(TrialFormatError, match="resampl"):
        load_trials(tmp_path / "slow.csv", dt=0.01)
    back = load_trials(tmp_path / "slow.csv", dt=0.01, resample=True)
    assert back.N == 20
    assert np.allclose(back.states[0, ::2, 0], t**2)


def test_reduced_schema_derives_velocity(tmp_path, ref_quiet):
    mean = propagate_moments(ref_quiet.spec())
    t = 0.01 * np.arange(301)
    df = pd.concat([pd.DataFrame({"trial_id": k, "time_s": t, "p_x_m": mean.mean_p}) for k in range(2)])
    df.to_csv(tmp_path / "t.csv", index=False)
    back = load_trials(tmp_path / "t.csv", dt=0.01)
    v = back.states[0, :, 1]
    vmax = np.max(mean.mean_v)
    assert np.max(np.abs(v - mean.mean_v)) < 0.05 * vmax
    assert np.isnan(back.states[0, 0, 2])


# ---------------------------------------------------------------- segmentation


def _raw_frame(ens, offset, prefix=0, flip=False, rest=False):
    """Trials in a lab frame starting at ``offset``, with an idle prefix."""
    rows = []
    for i in range(len(ens)):
        p, v = ens.states[i, :, 0], ens.states[i, :, 1]
        if flip:
            p, v = 0.24 - p, -v
        if rest:
            v = np.zeros_like(v)
            p = np.zeros_like(p)
        p = np.r_[np.full(prefix, p[0]), p] + offset
        v = np.r_[np.zeros(prefix), v]
        rows.append(pd.DataFrame({"trial_id": i, "time_s": 0.01 * np.arange(len(p)), "p_x_m": p, "v_x_mps": v}))
    return pd.concat(rows)


def test_aligned_trials_are_unchanged(tmp_path, ens):
    sub = ens.subset(range(5))
    write_ensemble_csv(sub, tmp_path / "t.csv")
    seg = segment_and_align(load_trials(tmp_path / "t.csv"), 0.0, 0.24, 300)
    assert seg.metadata["onsets"] == [0] * 5
    assert np.allclose(seg.states[:, :, :2], sub.states[:, :, :2], rtol=1e-10, atol=1e-14)
    assert np.all(seg.states[:, :, 4] == 0.24)


def test_idle_prefix_is_removed(tmp_path, ens):
    sub = ens.subset(range(5))
    _raw_frame(sub, -0.12, prefix=50).to_csv(tmp_path / "t.csv", index=False)
    seg = segment_and_align(load_trials(tmp_path / "t.csv"), -0.12, 0.12, 300)
    assert seg.metadata["onsets"] == [50] * 5
    assert np.allclose(seg.states[:, :, 0], sub.states[:, :, 0], atol=1e-12)
    assert np.allclose(seg.states[:, :, 1], sub.states[:, :, 1], atol=1e-12)


def test_other_direction_filtered(tmp_path, ens):
    sub = ens.subset(range(4))
    df = pd.concat([
        _raw_frame(sub, 0.0),
        _raw_frame(sub, 0.0, flip=True).assign(trial_id=lambda d: d.trial_id + 10),
    ])
    df.to_csv(tmp_path / "t.csv", index=False)
    seg = segment_and_align(load_trials(tmp_path / "t.csv"), 0.0, 0.24, 300)
    assert len(seg) == 4 and seg.metadata["other_direction"] == 4
    back = segment_and_align(load_trials(tmp_path / "t.csv"), 0.24, 0.0, 300)
    assert len(back) == 4 and np.all(back.states[:, -1, 0] < -0.2)


def test_trials_without_onset_dropped_with_warning(tmp_path, ens):
    sub = ens.subset(range(3))
    df = pd.concat([
        _raw_frame(sub, 0.0),
        _raw_frame(sub.subset([0]), 0.0, rest=True).assign(trial_id=99),
    ])
    df.to_csv(tmp_path / "t.csv", index=False)
    with pytest.warns(RuntimeWarning, match="1 trial"):
        seg = segment_and_align(load_trials(tmp_path / "t.csv"), 0.0, 0.24, 300)
    assert len(seg) == 3 and seg.metadata["dropped_no_onset"] == 1


# ---------------------------------------------------------------- identification

FAST = dict(
    outer_iterations=2,
    cost_level=DFOptions(xatol=1e-2, max_evals=40),
    noise_level=DFOptions(xatol=1e-2, max_evals=40),
)


@pytest.fixture(scope="module")
def short_data(short_ref):
    return rollout_ensemble(short_ref.spec(), 400, seed=5, store_observations=False)


@pytest.fixture(scope="module")
def noise_fit(short_ref, short_data):
    cfg = IdentificationConfig(free_sigma=(8, 9), **FAST)
    return identify(short_data, short_ref.cfg, cfg)


def test_joint_objective_never_increases(noise_fit):
    joints = [t["joint"] for t in noise_fit.traces if t["level"] != "prune"]
    assert all(b <= a for a, b in zip(joints, joints[1:]))
    assert noise_fit.objective == joints[-1] or noise_fit.traces[-1]["level"] == "prune"


def test_scale_gauge_and_frozen_sigma(short_ref, noise_fit):
    assert noise_fit.s_hat.s_terminal[0] == 1.0
    assert noise_fit.sigma_hat.sigma[:7] == short_ref.cfg.noise.sigma[:7]


def test_identification_is_deterministic(short_ref, short_data, noise_fit):
    cfg = IdentificationConfig(free_sigma=(8, 9), **FAST)
    again = identify(short_data, short_ref.cfg, cfg)
    assert again.s_hat == noise_fit.s_hat and again.sigma_hat == noise_fit.sigma_hat
    assert again.objective == noise_fit.objective


def test_reported_rmse_is_reproducible(short_ref, short_data, noise_fit):
    cfg = identified_config(short_ref.cfg, noise_fit)
    p = make_problem(cfg)
    mom = propagate_moments(p.spec())
    data = DataSummary.from_ensemble(short_data)
    assert np.sqrt(np.mean((mom.mean_p - data.mean_p) ** 2)) == pytest.approx(noise_fit.mean_fit_rmse_m, rel=1e-4)
    assert np.sqrt(np.mean((mom.var_p - data.var_p) ** 2)) == pytest.approx(noise_fit.var_fit_rmse_m2, rel=1e-4)


def test_zero_variance_data_gives_zero_noise(ref_quiet):
    cfg = ref_quiet.cfg.replace(discretization=type(ref_quiet.cfg.discretization)(0.01, 100))
    h = solve_lqs(cfg.system(), cfg.noise_model(), cfg.cost_matrices(), cfg.task())
    p = type(ref_quiet)(cfg, h)
    data = rollout_ensemble(p.spec(), 3, seed=0, store_observations=False)
    template = cfg.replace(noise=NoiseParams((1e-3,) * 9))
    res = identify(data, template, IdentificationConfig(
        free_cost=("s_v", "r"), cost_level=DFOptions(xatol=1e-3, max_evals=150), outer_iterations=2))
    assert res.sigma_hat.sigma == (0.0,) * 9
    assert res.mean_fit_rmse_m < 1e-6
    assert res.s_hat.s_terminal[1] == pytest.approx(0.253, rel=0.05)
    assert res.s_hat.r_effort == pytest.approx(3.43e-9, rel=0.05)


def test_input_validation(short_ref, short_data, ref):
    with pytest.raises(ValueError, match="2 trials"):
        identify(short_data.subset([0]), short_ref.cfg)
    with pytest.raises(ValueError, match="horizon"):
        identify(short_data, ref.cfg)
    with pytest.raises(ValueError):
        IdentificationConfig(free_cost=("s_x",))
    with pytest.raises(ValueError):
        IdentificationConfig(free_sigma=(0,))
    with pytest.raises(ValueError):
        IdentificationConfig(outer_iterations=0)


def test_result_roundtrip(tmp_path, noise_fit):
    save_result(noise_fit, tmp_path / "r.json")
    cost, sigma, doc = load_result(tmp_path / "r.json")
    assert cost == noise_fit.s_hat and sigma == noise_fit.sigma_hat
    assert doc["converged"] == noise_fit.converged
    assert set(doc["sensitivity"]) == {"s_v", "s_f", "r", "sigma_8", "sigma_9"}


def test_ensemble_frame_feeds_loader(tmp_path, short_data):
    ensemble_frame(short_data.subset([0, 1, 2])).to_csv(tmp_path / "t.csv", index=False)
    assert len(load_trials(tmp_path / "t.csv", dt=0.01, N=100)) == 3
