import numpy as np
import pytest

from mkvfbsde.errors import RegressionError
from mkvfbsde.model import LQ_BENCHMARK, make_lq_scalar
from mkvfbsde.regression import Projector, monomials
from mkvfbsde.riccati import lq_oracle

# frozen from a DOP853 integration at rtol 1e-12, cross-checked against the
# closed form below in the interaction-free limit
J_BENCH = 0.8380254416607015
Y0_BENCH = 1.5303297566215477


def test_benchmark_oracle_values():
    o = lq_oracle(LQ_BENCHMARK)
    assert o.J == pytest.approx(J_BENCH, rel=1e-10)
    assert o.y0 == pytest.approx(Y0_BENCH, rel=1e-10)
    assert o.y0 == pytest.approx(float(o.p(0.0)) * LQ_BENCHMARK["x0"], rel=1e-10)


@pytest.mark.parametrize("c,r,b3,sigma0,T,x0", [(1.0, 1.0, 1.0, 0.3, 1.0, 1.0),
                                                (2.0, 0.5, 1.5, 0.7, 2.0, -0.5)])
def test_classical_limit_closed_form(c, r, b3, sigma0, T, x0):
    # q = b2 = 0 and no interaction: eta(t) = c / (1 + c b3^2 (T - t) / r)
    spec = make_lq_scalar(q=0, c=c, r=r, b3=b3, sigma0=sigma0, T=T, x0=x0)
    o = lq_oracle(spec)
    k = c * b3 ** 2 / r
    for t in np.linspace(0, T, 7):
        assert o.eta(t) == pytest.approx(c / (1 + k * (T - t)), rel=1e-9)
        assert o.psi(t) == pytest.approx(0.0, abs=1e-9)
    J = 0.5 * c * x0 ** 2 / (1 + k * T) + 0.5 * sigma0 ** 2 * (c / k) * np.log(1 + k * T)
    assert o.J == pytest.approx(J, rel=1e-9)
    assert o.y0 == pytest.approx(c * x0 / (1 + k * T), rel=1e-9)


def test_oracle_variance_ode():
    # with no control feedback in the variance (b2 = 0, eta = 0 when c = q = 0)
    o = lq_oracle(make_lq_scalar(q=0, c=0, sigma0=0.4, T=2.0, x0=1.0))
    assert o.var(2.0) == pytest.approx(0.16 * 2.0, rel=1e-9)
    assert o.mean(2.0) == pytest.approx(1.0, rel=1e-9)
    assert o.J == pytest.approx(0.0, abs=1e-12)


# regression ------------------------------------------------------------------

def test_monomial_counts():
    u = np.random.default_rng(0).standard_normal((5, 2))
    assert [monomials(u, p).shape[1] for p in range(4)] == [1, 3, 6, 10]


def test_projector_reproduces_polynomials(rng):
    X = rng.standard_normal((200, 2))
    T = 1.0 + 2.0 * X[:, :1] - X[:, 1:] + 0.5 * X[:, :1] * X[:, 1:]
    assert Projector(X, 2).project(T) == pytest.approx(T, abs=1e-10)
    P1 = Projector(X, 1)
    c = P1.coef(T[:, 0] - 0.5 * X[:, 0] * X[:, 1])
    assert P1.evaluate(c, np.zeros((1, 2)))[0] == pytest.approx(1.0, abs=1e-10)


def test_projector_is_idempotent(rng):
    X = rng.standard_normal((100, 1))
    P = Projector(X, 3)
    T = rng.standard_normal((100, 2, 3))
    once = P.project(T)
    assert P.project(once) == pytest.approx(once, abs=1e-12)


def test_projector_collapsed_cloud_uses_constants():
    X = np.ones((10, 2))
    P = Projector(X, 2)
    assert P.collapsed and P.n_features == 1
    T = np.arange(10.0)
    assert P.project(T) == pytest.approx(np.full(10, 4.5))


def test_projector_failures(rng):
    with pytest.raises(RegressionError):
        Projector(rng.standard_normal((3, 2)), 2)
    X = rng.standard_normal((20, 1))
    with pytest.raises(RegressionError):
        Projector(np.hstack([X, X]), 1)
    with pytest.raises(ValueError):
        Projector(X, 4)
