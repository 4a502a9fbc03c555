import numpy as np
import pytest

from icl_gd.estimators import (
    MIN_ETA_SAMPLES,
    bayes_weights,
    check_isotropy,
    check_loss_constancy,
    check_odd_even_moments,
    check_trace_identity,
    default_probe_scale,
    estimate_eta,
    estimate_eta_linear,
    estimate_eta_nonlinear,
    estimate_eta_skewed,
    eta_closed_form_noiseless,
    eta_statistic,
    moment_matrix,
    monte_carlo,
    query_surrogate,
    sample_isotropic_probes,
    sample_probes,
    xty,
)
from icl_gd.model import ReducedParams, reduce, construct_gd_minimizer
from icl_gd.numerics import RngStream, SingularMatrixError, sample_spd
from icl_gd.tasks import InvalidSpecError, MlpTargetSpec, TaskSpec, draw_chunk


def joint_z(a, b):
    return abs(a.value - b.value) / np.hypot(a.stderr, b.stderr)


def test_monte_carlo_matches_direct_mean(iso_spec, rng):
    mom = monte_carlo(iso_spec, 5000, rng, lambda b: b.y[:, :2], chunk=1024)
    pooled = np.concatenate([draw_chunk(iso_spec, s, rng.split(i)).y[:, :2] for i, s in enumerate([1024] * 4 + [904])])
    np.testing.assert_allclose(mom.mean, pooled.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(mom.cov, np.cov(pooled.T), rtol=1e-10)


def test_monte_carlo_independent_of_workers(iso_spec, rng):
    a = monte_carlo(iso_spec, 30_000, rng, eta_statistic)
    b = monte_carlo(iso_spec, 30_000, rng, eta_statistic, workers=3)
    assert a.mean.tobytes() == b.mean.tobytes()
    assert a.cov.tobytes() == b.cov.tobytes()


def test_monte_carlo_needs_two_samples(iso_spec, rng):
    with pytest.raises(ValueError):
        monte_carlo(iso_spec, 1, rng, eta_statistic)


@pytest.mark.parametrize("d,n", [(1, 1), (2, 4), (5, 20)])
def test_eta_closed_form_noiseless(d, n, rng):
    est = estimate_eta_linear(d, n, 0.0, 200_000, rng)
    assert abs(est.value - eta_closed_form_noiseless(d, n)) < 3 * est.stderr
    assert est.value == pytest.approx(est.numerator_mean / est.denominator_mean, rel=1e-12)


def test_wishart_fourth_moment(rng):
    # E tr((X^T X)^2) = n d (n + d + 1), the moment behind the closed form
    d, n = 3, 7
    mom = monte_carlo(TaskSpec.isotropic(d, n, 0.0), 100_000, rng, lambda b: np.einsum("bni,bnj,bmi,bmj->b", b.X, b.X, b.X, b.X))
    assert abs(mom.mean[0] - n * d * (n + d + 1)) < 4 * mom.stderr[0]


def test_eta_rejects_small_samples_and_singular(rng):
    with pytest.raises(ValueError):
        estimate_eta_linear(2, 4, 0.1, MIN_ETA_SAMPLES - 1, rng)
    with pytest.raises(SingularMatrixError):
        estimate_eta_linear(3, 2, 0.0, 2000, rng)


def test_eta_decreases_with_noise(rng):
    vals = [estimate_eta_linear(3, 8, s, 100_000, rng.split(k)) for k, s in enumerate((0.0, 1.0, 4.0))]
    for a, b in zip(vals, vals[1:]):
        assert a.value - b.value > 3 * np.hypot(a.stderr, b.stderr)


def test_stderr_scales_with_root_samples(rng):
    target = MlpTargetSpec((5, 16, 1))
    a = estimate_eta_nonlinear(target, 5, 20, 0.1, 10_000, rng)
    b = estimate_eta_nonlinear(target, 5, 20, 0.1, 40_000, rng.split(1))
    assert 1.6 < a.stderr / b.stderr < 2.4


def test_jackknife_agrees_with_delta_method(iso_spec, rng):
    est = estimate_eta(iso_spec, 8192 * 20, rng, jackknife=True)
    assert est.jackknife_stderr == pytest.approx(est.stderr, rel=0.5)
    assert est.to_dict()["sign_flag"] == "positive"


def test_skewed_identity_equals_linear(rng):
    a = estimate_eta_skewed(np.eye(3), 8, 0.5, 100_000, rng)
    b = estimate_eta_linear(3, 8, 0.5, 100_000, rng.split(1))
    assert joint_z(a, b) < 3


@pytest.mark.parametrize("c", [0.25, 4.0])
def test_skewed_scalar_covariance_invariance(c, rng):
    a = estimate_eta_skewed(c * np.eye(3), 8, 0.5, 100_000, rng)
    b = estimate_eta_linear(3, 8, 0.5, 100_000, rng.split(1))
    assert joint_z(a, b) < 3


def test_skewed_noiseless_equals_closed_form(rng):
    cov = sample_spd(3, 0.25, 4.0, RngStream(1))
    est = estimate_eta_skewed(cov, 8, 0.0, 100_000, rng)
    assert abs(est.value - eta_closed_form_noiseless(3, 8)) < 3 * est.stderr


def test_degenerate_mlp_equals_linear(rng):
    a = estimate_eta_nonlinear(MlpTargetSpec((3, 1)), 3, 8, 0.5, 100_000, rng)
    b = estimate_eta_linear(3, 8, 0.5, 100_000, rng.split(1))
    assert joint_z(a, b) < 3


def test_pure_noise_target_gives_zero_eta(rng):
    spec = TaskSpec.nonlinear(MlpTargetSpec((3, 4, 1), output_scale=0.0), 8, 0.5)
    est = estimate_eta(spec, 50_000, rng)
    assert abs(est.value) < 3 * est.stderr
    # denominator is E[y^T X X^T y] = sigma^2 n d for pure-noise labels
    mom = monte_carlo(spec, 50_000, rng, lambda b: np.einsum("bi,bi->b", xty(b), xty(b)))
    assert abs(mom.mean[0] - 0.25 * 8 * 3) < 4 * mom.stderr[0]
    assert est.sign_flag == "indeterminate"


def test_surrogate_numerator_matches_ridge_numerator(rng):
    # tower property on a linear task: E[y_q x_q . X^T y] = E[w_hat . X^T y]
    spec = TaskSpec.isotropic(3, 8, 0.5)
    mom = monte_carlo(
        spec,
        200_000,
        rng,
        lambda b: np.stack(
            [np.einsum("bi,bi->b", query_surrogate(b), xty(b)), np.einsum("bi,bi->b", bayes_weights(b), xty(b))], 1
        ),
    )
    diff = mom.mean[0] - mom.mean[1]
    c = mom.cov_of_mean
    assert abs(diff) < 4 * np.sqrt(c[0, 0] + c[1, 1] - 2 * c[0, 1])


def test_estimate_eta_wrapper_validates_target(rng):
    with pytest.raises(InvalidSpecError):
        estimate_eta_nonlinear(MlpTargetSpec((3, 1)), 4, 8, 0.5, 2000, rng)


def test_isotropy_linear(rng):
    rep = check_isotropy("YYT", TaskSpec.isotropic(2, 5, 1.0), 200_000, rng)
    assert rep.max_offdiag_z < 4 and rep.max_diag_diff_z < 4
    assert rep.to_dict()["kind"] == "YYT"


def test_isotropy_ridge_noiseless_constant(rng):
    # sigma = 0: w_hat = w and E[w^T X^T X w] / d = n
    rep = check_isotropy("YRIDGE", TaskSpec.isotropic(3, 6, 0.0), 100_000, rng)
    assert abs(rep.c_estimate - 6) < 4 * np.mean(np.diag(rep.per_entry_stderr))


def test_isotropy_nonlinear_surrogate(rng):
    rep = check_isotropy("YUBAR", TaskSpec.nonlinear(MlpTargetSpec((3, 8, 1)), 6, 0.5), 200_000, rng)
    assert rep.max_offdiag_z < 4 and rep.max_diag_diff_z < 4


def test_isotropy_rejections(skew_spec, mlp_spec, rng):
    with pytest.raises(InvalidSpecError):
        check_isotropy("YYT", skew_spec, 1000, rng)
    with pytest.raises(InvalidSpecError):
        check_isotropy("YRIDGE", mlp_spec, 1000, rng)
    with pytest.raises(ValueError):
        check_isotropy("XYZ", TaskSpec.isotropic(2, 3, 0.1), 1000, rng)


def test_isotropy_d1_offdiag_vacuous(rng):
    rep = check_isotropy("YYT", TaskSpec.isotropic(1, 3, 0.5), 5000, rng)
    assert rep.max_offdiag_abs == 0 and rep.matrix_mean.shape == (1, 1)


def test_skewed_negative_control(rng):
    spec = TaskSpec.skewed(np.diag([2.0, 0.5]), 5, 1.0)
    rep = moment_matrix("YYT", spec, 200_000, rng)
    assert max(rep.max_offdiag_z, rep.max_diag_diff_z) >= 10


def test_trace_identity_and_sensitivity(rng):
    spec = TaskSpec.isotropic(3, 10, 0.5)
    assert check_trace_identity(spec, 100_000, rng) < 4
    assert check_trace_identity(spec, 100_000, rng, eta_scale=1.2) > 10


def test_trace_identity_closed_form_eta(rng):
    assert check_trace_identity(TaskSpec.isotropic(5, 20, 0.0), 100_000, rng, eta=1 / 26) < 4


def test_trace_identity_nonlinear(mlp_spec, rng):
    assert check_trace_identity(mlp_spec, 100_000, rng) < 4


def test_probe_families(rng):
    probes = sample_probes(3, 10, 8, rng, eta=0.05)
    assert len(probes) == 8 and all(p.d == 3 for p in probes)
    iso = sample_isotropic_probes(3, 4, default_probe_scale(3, 10), rng)
    assert np.std(np.concatenate([p.M.ravel() for p in iso])) == pytest.approx(default_probe_scale(3, 10), rel=0.4)
    with pytest.raises(ValueError):
        sample_probes(3, 10, 8, rng, eta=-1.0)


@pytest.mark.parametrize("kind", ["isotropic", "nonlinear"])
def test_loss_constancy(kind, rng):
    if kind == "isotropic":
        spec = TaskSpec.isotropic(3, 10, 0.5)
    else:
        spec = TaskSpec.nonlinear(MlpTargetSpec((3, 16, 1)), 10, 0.5)
    eta = estimate_eta(spec, 200_000, rng.split(1)).value
    good = check_loss_constancy(spec, 8, 100_000, rng, eta=eta)
    bad = check_loss_constancy(spec, 8, 100_000, rng, eta=eta, eta_scale=1.5)
    assert good.relative_spread < 0.02
    assert bad.relative_spread > 0.10
    assert len(good.differences) == good.probe_count == 8


def test_loss_constancy_at_minimizer_has_zero_j2(rng):
    # at the GD construction J2's target is met on every prompt, so J1 - J2 = J1
    spec = TaskSpec.isotropic(3, 10, 0.5)
    at_min = reduce(construct_gd_minimizer(3, 0.05))
    rep = check_loss_constancy(spec, 8, 20_000, rng, eta=0.05, probe_params=[at_min, at_min])
    assert rep.differences[0] == pytest.approx(rep.mean_scale, rel=1e-12)
    assert rep.spread == 0


def test_loss_constancy_validation(rng):
    spec = TaskSpec.isotropic(2, 4, 0.5)
    with pytest.raises(ValueError):
        check_loss_constancy(spec, 4, 1000, rng, eta=0.1)
    with pytest.raises(InvalidSpecError):
        check_loss_constancy(TaskSpec.skewed(np.eye(2), 4, 0.5), 8, 1000, rng, eta=0.1)


def test_odd_even_moments(any_spec, rng):
    if any_spec.kind.value == "skewed":
        with pytest.raises(InvalidSpecError):
            check_odd_even_moments(any_spec, 1000, rng)
        return
    rep = check_odd_even_moments(any_spec, 200_000, rng)
    assert rep.max_odd_z < 4
    if any_spec.is_linear:
        m, se = rep.get("y1^2")
        assert abs(m - (any_spec.d + any_spec.sigma**2)) < 3 * se
    assert "y1*y2" in rep.to_dict()["moments"]


def test_eta_statistic_shapes(any_spec, rng):
    assert eta_statistic(draw_chunk(any_spec, 7, rng)).shape == (7, 2)


def test_zero_probe_is_valid(rng):
    zero = ReducedParams(np.zeros(3), np.zeros((3, 3)))
    rep = check_loss_constancy(TaskSpec.isotropic(2, 4, 0.5), 8, 5000, rng, eta=0.1, probe_params=[zero, zero])
    assert rep.spread == 0
