import numpy as np
import pytest

from polcavity.cavity import REFERENCE_CAVITY, forward_arrays
from polcavity.errors import InsufficientDataError, InvalidArgumentError, NoSolutionError, TrivialSolutionError
from polcavity.estimation import (
    CAVITY_NAMES,
    PARAM_NAMES,
    DegeneracyProfile,
    FitConfig,
    branch_candidates,
    coupling_of_min_purity,
    fit_eigenmode,
    fit_full,
    fit_joint,
    fit_staged,
    model_with_jacobian,
    parametric_bootstrap,
    read_fit_result,
    resolve_branch,
    write_fit_result,
)
from polcavity.optimize import central_difference_jacobian, levenberg_marquardt
from polcavity.polarization import D, H, V, JonesVector
from polcavity.tomography import reconstruct_dataset

from conftest import ONE_PERCENT, make_scan

TRUTH = {"omega_c": 0.0, "delta_omega": 63.0, "kappa_h": 105.0, "kappa_v": 86.0, "eta_out": 0.53, "eta_in": 0.96}
FIT_NAMES = tuple(TRUTH)


def random_values(rng):
    return {
        "omega_c": rng.uniform(-30, 30),
        "delta_omega": rng.uniform(5, 120),
        "kappa_h": rng.uniform(40, 200),
        "kappa_v": rng.uniform(40, 200),
        "eta_out": rng.uniform(0.05, 0.95),
        "eta_in": rng.uniform(0.05, 0.95),
        "theta": rng.uniform(0.2, np.pi - 0.2),
        "phi": rng.uniform(-np.pi, np.pi),
    }


def jacobian_mismatch(values, omega, state=None):
    x0 = np.array([values[n] for n in PARAM_NAMES])
    fun = lambda x: model_with_jacobian(dict(zip(PARAM_NAMES, x)), omega, state)[0].ravel()
    _, J = model_with_jacobian(values, omega, state)
    J = J.reshape(-1, len(PARAM_NAMES))
    Jfd = central_difference_jacobian(fun, x0)
    scale = np.maximum(np.abs(J).max(axis=0), 1e-12)
    return float(np.max(np.abs(J - Jfd) / scale))


def test_model_matches_forward_arrays():
    omega = np.linspace(-300, 300, 41)
    state = JonesVector.from_angles(1.1, 0.3)
    vals = dict(TRUTH, theta=1.1, phi=0.3)
    f, _ = model_with_jacobian(vals, omega)
    fw = forward_arrays(REFERENCE_CAVITY, 0.96, state, omega)
    np.testing.assert_allclose(f[0], fw["r_total"], atol=1e-12)
    np.testing.assert_allclose(f[1:], fw["s"], atol=1e-12)
    f_fixed, J_fixed = model_with_jacobian(vals, omega, state)
    np.testing.assert_allclose(f_fixed, f, atol=1e-12)
    assert not J_fixed[..., PARAM_NAMES.index("theta")].any()


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    omega = np.linspace(-300, 300, 25)
    for _ in range(50):
        vals = random_values(rng)
        assert jacobian_mismatch(vals, omega) < 1e-5
        assert jacobian_mismatch(vals, omega, D) < 1e-5


def test_levenberg_marquardt_on_rosenbrock():
    fun = lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])
    jac = lambda x: np.array([[-20 * x[0], 10.0], [-1.0, 0.0]])
    res = levenberg_marquardt(fun, jac, np.array([-1.2, 1.0]))
    assert res.converged
    np.testing.assert_allclose(res.x, [1, 1], atol=1e-10)


def test_fit_config_validation():
    with pytest.raises(InvalidArgumentError):
        FitConfig(free=("kappa_x",))
    with pytest.raises(InvalidArgumentError):
        FitConfig(free=())
    with pytest.raises(InvalidArgumentError):
        FitConfig(weights={"r_total": 0, "s_hv": 0, "s_da": 0, "s_rl": 0})
    with pytest.raises(InvalidArgumentError):
        FitConfig(initial={"kappa": 1.0})


# -- stage 1 -------------------------------------------------------------------


def test_fit_eigenmode_recovers_linewidths(scans):
    h, v, _ = scans
    fit = fit_eigenmode(h, v)
    res = fit.result
    assert res.converged
    for name in ("kappa_h", "kappa_v", "delta_omega"):
        assert res[name] == pytest.approx(TRUTH[name], abs=1e-6)
    assert res["omega_c"] == pytest.approx(0.0, abs=1e-6)
    # the dip floor pins one combination of the couplings
    assert fit.profile.r_min == pytest.approx(0.04 + 0.96 * 0.06**2, abs=1e-9)
    assert fit.profile.contains(0.96, 0.53, tol=1e-6)


def test_fit_eigenmode_reports_coupling_degeneracy(scans):
    h, v, _ = scans
    cfg = FitConfig(free=CAVITY_NAMES + ("eta_in",), initial={"eta_in": 0.9})
    res = fit_eigenmode(h, v, cfg).result
    assert res.rank_deficient
    assert ["eta_out", "eta_in"] in res.unresolved
    # the diagonal scan with tomography resolves the same pair
    full = fit_full(scans[2], FitConfig(initial={"eta_in": 0.9}))
    assert not full.rank_deficient


def test_fit_eigenmode_needs_the_dip():
    grid = np.linspace(500, 800, 50)
    with pytest.raises(InsufficientDataError):
        fit_eigenmode(make_scan(H, grid=grid), make_scan(V, grid=grid))


def test_degeneracy_profile_examples():
    prof = DegeneracyProfile(0.05)
    assert prof.contains(0.95, 0.50)
    assert prof.eta_in_range == pytest.approx((0.95, 1.0))
    # full input coupling sits at eta_out = (1 + sqrt(0.05)) / 2 = 0.612, i.e. 60 % at two digits
    assert prof.eta_out_at(1.0)[1] == pytest.approx(0.5 * (1 + np.sqrt(0.05)), abs=1e-12)
    assert prof.contains(1.00, 0.60, tol=0.015)
    assert prof.eta_out_at(0.95) == pytest.approx((0.5, 0.5))
    with pytest.raises(NoSolutionError):
        prof.eta_out_at(0.9)
    with pytest.raises(InvalidArgumentError):
        DegeneracyProfile(1.0)


def test_degeneracy_profile_is_consistent_and_monotone():
    for r_min in (0.0, 0.01, 0.05, 0.3, 0.8):
        prof = DegeneracyProfile(r_min)
        table = prof.sample(401)
        ei, eo = table[:, 0], table[:, 1]
        np.testing.assert_allclose((1 - ei) + ei * (1 - 2 * eo) ** 2, r_min, atol=1e-12)
        upper = eo >= 0.5
        assert np.all(np.diff(ei[upper]) >= 0)
        assert np.all(np.diff(ei[~upper]) <= 0)


# -- stage 2 -------------------------------------------------------------------


def test_fit_full_recovers_noiseless_parameters(scans):
    res = fit_full(scans[2])
    assert res.converged and not res.rank_deficient
    for name in FIT_NAMES:
        assert res[name] == pytest.approx(TRUTH[name], abs=1e-6)
    assert res.residual_norm < 1e-9


def test_fit_full_from_distant_start(scans):
    cfg = FitConfig(initial={"eta_out": 0.35, "eta_in": 0.5, "kappa_h": 150, "kappa_v": 60})
    res = fit_full(scans[2], cfg)
    for name in FIT_NAMES:
        assert res[name] == pytest.approx(TRUTH[name], abs=1e-6)


def test_fit_full_with_free_input_angles():
    state = JonesVector.from_angles(np.pi / 2 - 0.1, 0.15)
    ds = make_scan(state)
    cfg = FitConfig(free=FIT_NAMES + ("theta", "phi"))
    res = fit_full(ds, cfg)
    assert res["theta"] == pytest.approx(np.pi / 2 - 0.1, abs=1e-6)
    assert res["phi"] == pytest.approx(0.15, abs=1e-6)
    assert res.eta_in == pytest.approx(0.96, abs=1e-6)


def test_fit_is_idempotent():
    ds = make_scan(D, noise=ONE_PERCENT, seed=4)
    first = fit_full(ds)
    again = fit_full(ds, FitConfig(initial=first.values))
    for name in FIT_NAMES:
        assert abs(again[name] - first[name]) < 1e-10


def test_fit_full_rejects_eigenpolarization_input(scans):
    with pytest.raises(InsufficientDataError):
        fit_full(scans[0])


def test_fit_reports_non_convergence(scans):
    res = fit_full(scans[2], FitConfig(max_iter=1))
    assert not res.converged
    assert "maximum iterations" in res.message


def test_uncoupled_data_leaves_cavity_unresolved():
    res = fit_full(make_scan(D, eta_in=0.0), FitConfig(initial={"eta_in": 0.5}))
    flagged = {n for group in res.unresolved for n in group}
    assert {"kappa_h", "kappa_v", "delta_omega", "eta_out"} <= flagged
    assert res.eta_in < 1e-3


def test_covariance_is_symmetric_psd():
    res = fit_full(make_scan(D, noise=ONE_PERCENT, seed=9))
    cov = res.covariance
    np.testing.assert_allclose(cov, cov.T, atol=0)
    assert np.linalg.eigvalsh(cov).min() >= -1e-15 * np.abs(cov).max()
    for i, n in enumerate(res.names):
        assert res.stderr[n] == pytest.approx(np.sqrt(cov[i, i]))


def test_staged_and_joint_fits(scans):
    h, v, d = scans
    stage1, stage2 = fit_staged(h, v, d)
    assert stage2.names == ("eta_out", "eta_in")
    assert stage2["eta_in"] == pytest.approx(0.96, abs=1e-6)
    assert stage2["eta_out"] == pytest.approx(0.53, abs=1e-6)
    joint = fit_joint([h, v, d])
    for name in FIT_NAMES:
        assert joint[name] == pytest.approx(TRUTH[name], abs=1e-6)


def test_estimator_consistency():
    est = np.array([[fit_full(make_scan(D, noise=ONE_PERCENT, seed=s))[n] for n in ("eta_in", "eta_out")] for s in range(40)])
    sem = est.std(axis=0, ddof=1) / np.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - [0.96, 0.53]) < 4 * sem)


# -- branch ambiguity ----------------------------------------------------------


def test_branch_candidates_recover_coupling():
    ds = make_scan(D)
    measured = reconstruct_dataset(ds).purity.min()
    low, high = branch_candidates(REFERENCE_CAVITY, D, measured, ds.omega)
    assert high == pytest.approx(0.96, abs=1e-3)
    assert low < 0.5
    diag = resolve_branch(ds, REFERENCE_CAVITY, D, (low, high))
    assert diag.chosen == "high" and diag.eta_in == high
    assert diag.candidate_low <= diag.candidate_high


def test_low_branch_is_chosen_for_weak_coupling():
    ds = make_scan(D, eta_in=0.10)
    measured = reconstruct_dataset(ds).purity.min()
    low, high = branch_candidates(REFERENCE_CAVITY, D, measured, ds.omega)
    assert low == pytest.approx(0.10, abs=1e-3)
    assert resolve_branch(ds, REFERENCE_CAVITY, D, (low, high)).chosen == "low"


def test_uncoupled_data_picks_zero():
    ds = make_scan(D, eta_in=0.0)
    diag = resolve_branch(ds, REFERENCE_CAVITY, D, (0.0, 1.0))
    assert diag.rotation_metric_measured == 0
    assert diag.chosen == "low" and diag.eta_in == 0.0


def test_branch_candidate_limits():
    grid = np.linspace(-300, 300, 601)
    e_star, p_star = coupling_of_min_purity(REFERENCE_CAVITY, D, grid)
    assert branch_candidates(REFERENCE_CAVITY, D, p_star, grid) == (e_star, e_star)
    low, high = branch_candidates(REFERENCE_CAVITY, D, 1 - 1e-8, grid)
    assert low < 1e-6 and high > 1 - 1e-6
    with pytest.raises(NoSolutionError):
        branch_candidates(REFERENCE_CAVITY, D, p_star - 0.01, grid)
    with pytest.raises(TrivialSolutionError):
        branch_candidates(REFERENCE_CAVITY, D, 1.0, grid)


def test_indistinguishable_candidates_are_ambiguous():
    ds = make_scan(D)
    grid = ds.omega
    e_star, _ = coupling_of_min_purity(REFERENCE_CAVITY, D, grid)
    assert resolve_branch(ds, REFERENCE_CAVITY, D, (e_star, e_star)).ambiguous
    loose = resolve_branch(ds, REFERENCE_CAVITY, D, (0.32, 0.96), noise_tolerance=10.0)
    assert loose.ambiguous and loose.eta_in is None


# -- bootstrap and serialization -----------------------------------------------


def test_bootstrap_is_reproducible_and_parallel_safe():
    ds = make_scan(D, noise=ONE_PERCENT, seed=1)
    cfg = FitConfig(free=("eta_out", "eta_in"), initial=TRUTH)
    res = fit_full(ds, cfg)
    serial = parametric_bootstrap(ds, res, ONE_PERCENT, cfg, n_replicas=6, seed=3)
    parallel = parametric_bootstrap(ds, res, ONE_PERCENT, cfg, n_replicas=6, seed=3, n_jobs=2)
    np.testing.assert_array_equal(serial.samples, parallel.samples)
    lo, hi = serial.intervals["eta_in"]
    assert lo <= hi and abs(lo - 0.96) < 0.01 and abs(hi - 0.96) < 0.01
    assert serial.std["eta_in"] < 0.01


def test_fit_result_round_trip(tmp_path):
    res = fit_eigenmode(make_scan(H), make_scan(V), FitConfig(free=CAVITY_NAMES + ("eta_in",), initial={"eta_in": 0.9})).result
    path = write_fit_result(res, tmp_path / "fit.ini", {"extra": {"note": "x"}}, {"tool": "t"})
    back = read_fit_result(path)
    assert back.names == res.names
    assert back.values == res.values
    assert back.stderr == res.stderr
    np.testing.assert_array_equal(back.covariance, res.covariance)
    assert back.converged == res.converged and back.unresolved == res.unresolved
    assert back.residual_norm == res.residual_norm
