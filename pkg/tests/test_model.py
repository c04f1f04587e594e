import dataclasses

import numpy as np
import pytest

from mkvfbsde.errors import ModelError
from mkvfbsde.measure import ParticleCloud
from mkvfbsde.model import (Kernel, LinearDynamics, ModelSpec, drift_vol, lq_benchmark,
                            make_first_order, make_lq_scalar, make_pairwise_attraction,
                            make_quadratic_moment, make_zero_model, validate_assumptions)


def one_d(**kw):
    dyn = LinearDynamics.zeros(1, 1, 1, **kw)
    return ModelSpec(dyn, make_zero_model().cost, 1, 1, 1, 1.0, [0.0])


# drift_vol -------------------------------------------------------------------

def test_drift_vol_zero_model():
    b, s = drift_vol(make_zero_model(d=2, m=3, k=2), 0.3, np.ones(2), np.ones(2), np.ones(2))
    assert np.all(b == 0) and s.shape == (2, 3) and np.all(s == 0)


def test_drift_vol_affine_arithmetic():
    spec = one_d(b2=[[-1.0]], b1=[[0.5]], b3=[[1.0]])
    b, _ = drift_vol(spec, 0.0, 2.0, 4.0, 3.0)
    assert b[0] == 3.0


def test_drift_vol_random_affine_probe(rng):
    d, m, k = 3, 2, 2
    coef = dict(b0=rng.standard_normal(d), b1=rng.standard_normal((d, d)),
                b2=rng.standard_normal((d, d)), b3=rng.standard_normal((d, k)),
                s0=rng.standard_normal((d, m)), s1=rng.standard_normal((d, m, d)),
                s2=rng.standard_normal((d, m, d)), s3=rng.standard_normal((d, m, k)))
    spec = ModelSpec(LinearDynamics(**coef), make_zero_model(d, m, k).cost, d, m, k, 1.0, np.zeros(d))
    x, mb, a = rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal(k)
    h = rng.standard_normal(d)
    b0_, s0_ = drift_vol(spec, 0.0, x, mb, a)
    b1_, s1_ = drift_vol(spec, 0.0, x + h, mb, a)
    assert b1_ - b0_ == pytest.approx(coef["b2"] @ h, abs=1e-12)
    assert s1_ - s0_ == pytest.approx(np.einsum("ijl,l->ij", coef["s2"], h), abs=1e-12)
    # second differences vanish in each argument
    steps = (h, rng.standard_normal(d), rng.standard_normal(k))
    for arg in range(3):
        pts = [[x, mb, a] for _ in range(3)]
        for j in range(3):
            pts[j][arg] = pts[j][arg] + j * steps[arg]
        vals = [drift_vol(spec, 0.0, *p) for p in pts]
        assert np.max(np.abs(vals[0][0] - 2 * vals[1][0] + vals[2][0])) < 1e-12
        assert np.max(np.abs(vals[0][1] - 2 * vals[1][1] + vals[2][1])) < 1e-12


def test_drift_vol_dimension_mismatch():
    with pytest.raises(ModelError):
        drift_vol(make_zero_model(d=2), 0.0, np.ones(3), np.ones(2), np.ones(1))


def test_spec_checks_shapes_and_horizon():
    with pytest.raises(ModelError):
        ModelSpec(LinearDynamics.zeros(1, 1, 1, b2=np.zeros((2, 2))), make_zero_model().cost,
                  1, 1, 1, 1.0, [0.0])
    with pytest.raises(ModelError):
        ModelSpec(LinearDynamics.zeros(1, 1, 1), make_zero_model().cost, 1, 1, 1, 0.0, [0.0])


def test_time_dependent_coefficients_are_sampled():
    spec = ModelSpec(LinearDynamics.zeros(1, 1, 1, b0=lambda t: np.array([t])),
                     make_zero_model().cost, 1, 1, 1, 2.0, [0.0])
    tab = spec.dynamics.table(np.linspace(0, 2, 5))
    assert tab.b0[:, 0] == pytest.approx([0, 0.5, 1, 1.5, 2])


# LQ scalar -------------------------------------------------------------------

def test_lq_direct_value():
    spec = make_lq_scalar(q=1, r=1)
    cl = ParticleCloud([1.0])
    assert spec.cost.f(0.0, np.array([[1.0]]), cl, np.array([[1.0]]))[0] == 1.0


def test_lq_without_interaction_has_zero_measure_derivative(rng):
    spec = make_lq_scalar(q=2, qbar=0, c=1, cbar=0, s=0.7)
    x = rng.standard_normal((5, 1))
    cl = ParticleCloud(rng.standard_normal(8))
    assert np.all(spec.cost.dmu_f(0.0, x, cl, x, cl.points) == 0)
    assert np.all(spec.cost.dmu_g(x, cl, cl.points) == 0)


def test_lq_measure_derivative_by_shifting_cloud(rng):
    q, qbar, s, r = 1.0, 2.0, 0.7, 1.0
    spec = make_lq_scalar(q=q, qbar=qbar, s=s, r=r)
    P = rng.standard_normal(6)
    x, a = np.array([[0.4]]), np.array([[0.2]])
    eps = 1e-6
    fp = spec.cost.f(0.0, x, ParticleCloud(P + eps), a)[0]
    fm = spec.cost.f(0.0, x, ParticleCloud(P - eps), a)[0]
    expect = -qbar * s * (0.4 - s * P.mean())
    assert (fp - fm) / (2 * eps) == pytest.approx(expect, rel=1e-7)
    dmu = spec.cost.dmu_f(0.0, x, ParticleCloud(P), a, P[:, None])
    assert dmu[0, :, 0] == pytest.approx(np.full(6, expect), abs=1e-14)


def test_lq_rejects_nonpositive_r():
    with pytest.raises(ModelError):
        make_lq_scalar(r=0.0)
    with pytest.raises(ModelError):
        make_lq_scalar(q=-1.0)


def test_lq_modulus_and_alpha_free_volatility():
    spec = make_lq_scalar(r=3.0, sigma0=0.4)
    assert spec.cost.lam == 1.5 and spec.cost.alpha_r == 3.0
    assert not spec.vol_depends_on_alpha
    assert lq_benchmark().params["qbar"] == 1.0


# first-order kernels ---------------------------------------------------------

def _terminal_model(g_kernel):
    f_kernel = Kernel(value=lambda t, x, xp, a: 0.5 * np.sum(a * a, -1) + 0 * x[..., 0] + 0 * xp[..., 0],
                      dx=lambda t, x, xp, a: 0 * (x + xp), dxp=lambda t, x, xp, a: 0 * (x + xp),
                      da=lambda t, x, xp, a: a + 0 * x[..., :1] + 0 * xp[..., :1])
    return make_first_order(f_kernel, g_kernel, 1, 1, 1, 1.0, [0.0], 0.5,
                            dynamics=LinearDynamics.zeros(1, 1, 1))


def test_first_order_squared_distance_kernel():
    spec = _terminal_model(Kernel(value=lambda x, xp: 0.5 * np.sum((x - xp) ** 2, -1),
                                  dx=lambda x, xp: x - xp, dxp=lambda x, xp: -(x - xp)))
    cl = ParticleCloud([0.0, 1.0, 3.0])
    x = np.array([[2.0]])
    assert spec.cost.g(x, cl)[0] == pytest.approx((4 + 1 + 1) / 6)
    assert spec.cost.dmu_g(x, cl, np.array([[0.5]]))[0, 0, 0] == pytest.approx(-1.5)


def test_first_order_bilinear_kernel():
    spec = _terminal_model(Kernel(value=lambda x, xp: np.sum(x * xp, -1),
                                  dx=lambda x, xp: xp + 0 * x, dxp=lambda x, xp: x + 0 * xp))
    for pts in ([0.0, 1.0], [5.0, -2.0, 7.0]):
        d = spec.cost.dmu_g(np.array([[1.7]]), ParticleCloud(pts), np.array([[0.3], [9.0]]))
        assert np.all(d == 1.7)


def test_first_order_random_affine_average(rng):
    w = rng.standard_normal(4)
    kern = Kernel(value=lambda t, x, xp, a: w[0] + w[1] * x[..., 0] + w[2] * xp[..., 0] + w[3] * a[..., 0],
                  dx=lambda t, x, xp, a: w[1] + 0 * (x + xp), dxp=lambda t, x, xp, a: w[2] + 0 * (x + xp),
                  da=lambda t, x, xp, a: w[3] + 0 * a)
    spec = make_first_order(kern, Kernel(value=lambda x, xp: 0 * x[..., 0], dx=lambda x, xp: 0 * x,
                                         dxp=lambda x, xp: 0 * x),
                            1, 1, 1, 1.0, [0.0], 0.0, dynamics=LinearDynamics.zeros(1, 1, 1))
    P = [0.5, -1.0, 2.0]
    x, a = 0.3, -0.4
    hand = sum(w[0] + w[1] * x + w[2] * p + w[3] * a for p in P) / 3
    assert spec.cost.f(0.0, np.array([[x]]), ParticleCloud(P), np.array([[a]]))[0] == pytest.approx(hand)


def test_first_order_rejects_nonaffine_dynamics_kernel():
    f_kernel = Kernel(value=lambda t, x, xp, a: 0 * x[..., 0], dx=lambda t, x, xp, a: 0 * x,
                      dxp=lambda t, x, xp, a: 0 * x, da=lambda t, x, xp, a: 0 * a)
    g_kernel = Kernel(value=lambda x, xp: 0 * x[..., 0], dx=lambda x, xp: 0 * x, dxp=lambda x, xp: 0 * x)
    with pytest.raises(ModelError):
        make_first_order(f_kernel, g_kernel, 1, 1, 1, 1.0, [0.0], 0.0,
                         b_kernel=lambda t, x, xp, a: np.sin(x))
    spec = make_first_order(f_kernel, g_kernel, 1, 1, 1, 1.0, [0.0], 0.0,
                            b_kernel=lambda t, x, xp, a: 2.0 * x - xp + 3.0 * a + 1.0)
    c = spec.dynamics.at(0.5)
    assert (c["b0"][0], c["b2"][0, 0], c["b1"][0, 0], c["b3"][0, 0]) == pytest.approx((1, 2, -1, 3))


# validate_assumptions --------------------------------------------------------

@pytest.mark.parametrize("maker", [lq_benchmark, make_zero_model, make_quadratic_moment,
                                   make_pairwise_attraction,
                                   lambda: make_pairwise_attraction(d=2, x0=0.5)])
def test_builtin_models_pass_validation(maker):
    rep = validate_assumptions(maker(), probes=20, seed=1)
    assert rep.passed, rep.as_dict()
    for name in ("dx_f", "da_f", "dmu_f", "dx_g", "dmu_g"):
        assert rep.checks["deriv_" + name].worst <= 1e-5


def test_lq_convexity_margin_nonnegative():
    rep = validate_assumptions(make_lq_scalar(q=1, qbar=1, s=1, r=1, c=1), probes=50, seed=4)
    assert rep.checks["convexity_f"].passed and rep.checks["convexity_f"].worst >= -1e-9


def test_concave_model_fails_convexity():
    spec = make_lq_scalar(r=1.0)
    # bypass the constructor: flip the sign of the control cost
    cost = dataclasses.replace(
        spec.cost,
        f=lambda t, x, cl, a, f0=spec.cost.f: f0(t, x, cl, np.zeros_like(a)) - 0.5 * np.sum(a * a, 1),
        da_f=lambda t, x, cl, a: -a, lam=-0.5, alpha_r=-1.0)
    rep = validate_assumptions(dataclasses.replace(spec, cost=cost), probes=10)
    assert not rep.checks["convexity_f"].passed
    assert rep.checks["deriv_da_f"].passed


def test_zero_model_trivially_passes():
    rep = validate_assumptions(make_zero_model(), probes=5)
    assert rep.passed
    assert rep.checks["lipschitz_f"].worst == 0.0 and rep.checks["convexity_g"].worst == 0.0


def test_validate_needs_probes():
    with pytest.raises(ValueError):
        validate_assumptions(make_zero_model(), probes=0)
