"""Problem data: linear mean-field dynamics and costs with first derivatives.

Shapes follow one convention throughout (``n`` rows, ``Q`` query points):

* state ``x`` is (n, d), control ``a`` is (n, k), ``cloud`` a ParticleCloud;
* ``f(t, x, cloud, a)`` and ``g(x, cloud)`` return (n,);
* ``dx_f``, ``dx_g`` return (n, d), ``da_f`` returns (n, k);
* ``dmu_f(t, x, cloud, a, xq)`` and ``dmu_g(x, cloud, xq)`` return (n, Q, d):
  the measure derivative of row i evaluated at each query point.

The dynamics are affine in (x, mean, alpha):

    b     = b0 + b1 mean + b2 x + b3 alpha
    sigma = s0 + s1 mean + s2 x + s3 alpha

with ``s1``, ``s2`` of shape (d, m, d) and ``s3`` of shape (d, m, k), contracted
on their last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ModelError
from .measure import ParticleCloud

__all__ = [
    "LinearDynamics",
    "DynamicsTable",
    "CostModel",
    "ModelSpec",
    "Kernel",
    "drift_vol",
    "avg_dmu_f",
    "avg_dmu_g",
    "pair_dmu_f_dot",
    "pair_dmu_g_dot",
    "make_lq_scalar",
    "lq_benchmark",
    "make_zero_model",
    "make_scalar_interaction",
    "make_quadratic_moment",
    "make_first_order",
    "make_pairwise_attraction",
    "validate_assumptions",
    "ValidationReport",
]

_CHUNK = 1 << 20  # elements per chunk for pairwise kernels


def _as_fn(value):
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    arr.setflags(write=False)
    return lambda t, _a=arr: _a


@dataclass(frozen=True)
class LinearDynamics:
    """Deterministic time-dependent coefficients of the affine dynamics.

    Each coefficient is a constant array or a callable ``t -> array``.
    """

    b0: object
    b1: object
    b2: object
    b3: object
    s0: object
    s1: object
    s2: object
    s3: object
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def zeros(cls, d: int, m: int, k: int, **overrides) -> "LinearDynamics":
        base = dict(b0=np.zeros(d), b1=np.zeros((d, d)), b2=np.zeros((d, d)),
                    b3=np.zeros((d, k)), s0=np.zeros((d, m)), s1=np.zeros((d, m, d)),
                    s2=np.zeros((d, m, d)), s3=np.zeros((d, m, k)))
        base.update(overrides)
        return cls(**base)

    def at(self, t: float) -> dict:
        return {name: np.asarray(_as_fn(getattr(self, name))(t), dtype=float)
                for name in ("b0", "b1", "b2", "b3", "s0", "s1", "s2", "s3")}

    def table(self, times) -> "DynamicsTable":
        """Coefficients sampled at the given times (cached per grid)."""
        times = np.asarray(times, dtype=float)
        key = (times.size, float(times[0]), float(times[-1]), hash(times.tobytes()))
        tab = self._cache.get(key)
        if tab is None:
            rows = [self.at(t) for t in times]
            tab = DynamicsTable(**{name: np.stack([r[name] for r in rows])
                                   for name in rows[0]})
            self._cache[key] = tab
        return tab


def _rmul(Y, A):
    """Y @ A, with the 1x1 case done as a scalar product (much faster)."""
    if A.shape == (1, 1):
        return Y * A[0, 0]
    return Y @ A


class DynamicsTable:
    """Coefficients stacked along a leading time axis, with vectorised maps."""

    def __init__(self, b0, b1, b2, b3, s0, s1, s2, s3):
        self.b0, self.b1, self.b2, self.b3 = b0, b1, b2, b3
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        self.s1_zero = not np.any(s1)
        self.s2_zero = not np.any(s2)
        self.s3_zero = not np.any(s3)
        # volatility depends on nothing but time
        self.vol_const = self.s1_zero and self.s2_zero and self.s3_zero

    def drift(self, n, X, mbar, A):
        return self.b0[n] + self.b1[n] @ mbar + X @ self.b2[n].T + A @ self.b3[n].T

    def vol(self, n, X, mbar, A):
        """Volatility per row, (M, d, m)."""
        v = self.s0[n] + np.einsum("ijl,l->ij", self.s1[n], mbar)
        v = np.broadcast_to(v, (X.shape[0],) + v.shape)
        if not self.s2_zero:
            v = v + np.einsum("ijl,nl->nij", self.s2[n], X)
        if not self.s3_zero:
            v = v + np.einsum("ijl,nl->nij", self.s3[n], A)
        return v

    def vol_dw(self, n, X, mbar, A, dW):
        """sigma applied to the Brownian increments, (M, d)."""
        if self.vol_const:
            return dW @ self.s0[n].T
        return np.einsum("nij,nj->ni", self.vol(n, X, mbar, A), dW)

    def drift_path(self, X, A):
        """Drift along whole paths: X (M, Nt, d), A (M, Nt, k) -> (M, Nt, d)."""
        Nt = X.shape[1]
        mbar = X.mean(axis=0)
        return (self.b0[:Nt] + np.einsum("nij,nj->ni", self.b1[:Nt], mbar)
                + np.einsum("nij,mnj->mni", self.b2[:Nt], X)
                + np.einsum("nij,mnj->mni", self.b3[:Nt], A))

    def vol_path(self, X, A):
        """Volatility along whole paths, (M, Nt, d, m)."""
        M, Nt = X.shape[:2]
        v = self.s0[:Nt]
        if not self.s1_zero:
            v = v + np.einsum("nijl,nl->nij", self.s1[:Nt], X.mean(axis=0))
        v = np.broadcast_to(v, (M,) + v.shape)
        if not self.s2_zero:
            v = v + np.einsum("nijl,mnl->mnij", self.s2[:Nt], X)
        if not self.s3_zero:
            v = v + np.einsum("nijl,mnl->mnij", self.s3[:Nt], A)
        return v

    def drift_lin(self, n, V, vbar, B):
        """Linear part of the drift (no b0): the drift of a variation."""
        return self.b1[n] @ vbar + V @ self.b2[n].T + B @ self.b3[n].T

    def vol_dw_lin(self, n, V, vbar, B, dW):
        """Linear part of the volatility applied to the increments."""
        out = np.einsum("ijl,l,nj->ni", self.s1[n], vbar, dW)
        if not self.s2_zero:
            out = out + np.einsum("ijl,nl,nj->ni", self.s2[n], V, dW)
        if not self.s3_zero:
            out = out + np.einsum("ijl,nl,nj->ni", self.s3[n], B, dW)
        return out

    # adjoint-side contractions: transposes of the affine maps
    def b2T(self, n, Y):
        return _rmul(Y, self.b2[n])

    def b1T(self, n, y):
        return _rmul(y, self.b1[n])

    def b3T(self, n, Y):
        return _rmul(Y, self.b3[n])

    def s2T(self, n, Z):
        if self.s2_zero:
            return 0.0
        return np.einsum("ijl,...ij->...l", self.s2[n], Z)

    def s1T(self, n, z):
        if self.s1_zero:
            return 0.0
        return np.einsum("ijl,...ij->...l", self.s1[n], z)

    def s3T(self, n, Z):
        if self.s3_zero:
            return 0.0
        return np.einsum("ijl,...ij->...l", self.s3[n], Z)


@dataclass(frozen=True)
class CostModel:
    """Running cost f, terminal cost g and their first derivatives.

    ``lam`` is the strong-convexity modulus in alpha. The optional fields are
    fast paths: ``daa_f`` (Hessian in alpha, (n, k, k)), ``avg_dmu_f`` /
    ``avg_dmu_g`` (row-averaged measure derivative at the queries, (Q, d)),
    ``pair_dmu_f`` / ``pair_dmu_g`` (for each row i, the cloud average of
    dmu(x_i)(x_j) . v_j, (n,)). ``alpha_r`` marks costs whose alpha part is
    (r/2)|alpha|^2 separately from (x, mu), which admits a closed-form
    minimiser of the Hamiltonian.
    """

    f: Callable
    g: Callable
    dx_f: Callable
    da_f: Callable
    dmu_f: Callable
    dx_g: Callable
    dmu_g: Callable
    lam: float
    daa_f: Optional[Callable] = None
    avg_dmu_f: Optional[Callable] = None
    avg_dmu_g: Optional[Callable] = None
    pair_dmu_f: Optional[Callable] = None
    pair_dmu_g: Optional[Callable] = None
    alpha_r: Optional[float] = None


@dataclass(frozen=True)
class ModelSpec:
    dynamics: LinearDynamics
    cost: CostModel
    d: int
    m: int
    k: int
    T: float
    x0: np.ndarray
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.T > 0:
            raise ModelError(f"horizon T must be positive, got {self.T}")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.d,):
            raise ModelError(f"x0 has shape {x0.shape}, expected ({self.d},)")
        object.__setattr__(self, "x0", x0)
        d, m, k = self.d, self.m, self.k
        want = dict(b0=(d,), b1=(d, d), b2=(d, d), b3=(d, k), s0=(d, m),
                    s1=(d, m, d), s2=(d, m, d), s3=(d, m, k))
        for t in (0.0, self.T):
            got = self.dynamics.at(t)
            for name, shape in want.items():
                if got[name].shape != shape:
                    raise ModelError(f"{name}(t={t}) has shape {got[name].shape}, expected {shape}")
                if not np.all(np.isfinite(got[name])):
                    raise ModelError(f"{name}(t={t}) is not finite")

    @property
    def vol_depends_on_alpha(self) -> bool:
        return bool(np.any(self.dynamics.at(0.0)["s3"]) or np.any(self.dynamics.at(self.T)["s3"]))


def drift_vol(spec: ModelSpec, t, x, mu_bar, alpha):
    """Drift (d,) and volatility (d, m) at a single point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mu_bar = np.atleast_1d(np.asarray(mu_bar, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if x.shape != (spec.d,) or mu_bar.shape != (spec.d,) or alpha.shape != (spec.k,):
        raise ModelError(f"dimension mismatch: x {x.shape}, mu_bar {mu_bar.shape}, "
                         f"alpha {alpha.shape} for d={spec.d}, k={spec.k}")
    c = spec.dynamics.at(t)
    b = c["b0"] + c["b1"] @ mu_bar + c["b2"] @ x + c["b3"] @ alpha
    s = (c["s0"] + np.einsum("ijl,l->ij", c["s1"], mu_bar)
         + np.einsum("ijl,l->ij", c["s2"], x) + np.einsum("ijl,l->ij", c["s3"], alpha))
    return b, s


# --------------------------------------------------------------------------
# cross-particle averages of measure derivatives

def _row_chunks(n, q, d):
    step = max(1, _CHUNK // max(1, q * d))
    return range(0, n, step), step


def avg_dmu_f(cost: CostModel, t, x, cloud, a, xq):
    """(1/n) sum_i dmu_f(t, x_i, cloud, a_i)(xq), shape (Q, d)."""
    if cost.avg_dmu_f is not None:
        return cost.avg_dmu_f(t, x, cloud, a, xq)
    starts, step = _row_chunks(x.shape[0], xq.shape[0], xq.shape[1])
    acc = np.zeros(xq.shape)
    for s in starts:
        acc += cost.dmu_f(t, x[s:s + step], cloud, a[s:s + step], xq).sum(axis=0)
    return acc / x.shape[0]


def avg_dmu_g(cost: CostModel, x, cloud, xq):
    if cost.avg_dmu_g is not None:
        return cost.avg_dmu_g(x, cloud, xq)
    starts, step = _row_chunks(x.shape[0], xq.shape[0], xq.shape[1])
    acc = np.zeros(xq.shape)
    for s in starts:
        acc += cost.dmu_g(x[s:s + step], cloud, xq).sum(axis=0)
    return acc / x.shape[0]


def pair_dmu_f_dot(cost: CostModel, t, x, cloud, a, v):
    """For each row i: (1/M) sum_j dmu_f(t, x_i, cloud, a_i)(y_j) . v_j, y = cloud."""
    if cost.pair_dmu_f is not None:
        return cost.pair_dmu_f(t, x, cloud, a, v)
    pts = cloud.points
    starts, step = _row_chunks(x.shape[0], pts.shape[0], pts.shape[1])
    out = np.empty(x.shape[0])
    for s in starts:
        blk = cost.dmu_f(t, x[s:s + step], cloud, a[s:s + step], pts)
        out[s:s + step] = np.einsum("nqd,qd->n", blk, v) / pts.shape[0]
    return out


def pair_dmu_g_dot(cost: CostModel, x, cloud, v):
    if cost.pair_dmu_g is not None:
        return cost.pair_dmu_g(x, cloud, v)
    pts = cloud.points
    starts, step = _row_chunks(x.shape[0], pts.shape[0], pts.shape[1])
    out = np.empty(x.shape[0])
    for s in starts:
        blk = cost.dmu_g(x[s:s + step], cloud, pts)
        out[s:s + step] = np.einsum("nqd,qd->n", blk, v) / pts.shape[0]
    return out


# --------------------------------------------------------------------------
# LQ scalar-interaction family

def make_lq_scalar(q=1.0, qbar=0.0, s=0.0, r=1.0, c=0.0, cbar=0.0, sT=0.0,
                   b1=0.0, b2=0.0, b3=1.0, sigma0=0.0, T=1.0, x0=0.0) -> ModelSpec:
    """Scalar LQ mean-field model (d = m = k = 1).

    f = q/2 x^2 + qbar/2 (x - s mean)^2 + r/2 a^2
    g = c/2 x^2 + cbar/2 (x - sT mean)^2
    dX = (b2 X + b1 mean + b3 a) dt + sigma0 dW

    The alpha-modulus of f in the convexity inequality is r/2, which is
    what ``lam`` records.
    """
    if not r > 0:
        raise ModelError(f"r must be positive for strict convexity, got {r}")
    for name, v in (("q", q), ("qbar", qbar), ("c", c), ("cbar", cbar)):
        if v < 0:
            raise ModelError(f"{name} must be non-negative, got {v}")
    params = dict(q=q, qbar=qbar, s=s, r=r, c=c, cbar=cbar, sT=sT, b1=b1, b2=b2,
                  b3=b3, sigma0=sigma0, T=T, x0=x0)
    params = {key: float(v) for key, v in params.items()}
    q, qbar, s, r, c, cbar, sT = (params[k_] for k_ in ("q", "qbar", "s", "r", "c", "cbar", "sT"))

    def _m(cloud):
        return cloud.bar

    def f(t, x, cloud, a):
        mb = _m(cloud)
        return (0.5 * q * np.sum(x * x, 1) + 0.5 * qbar * np.sum((x - s * mb) ** 2, 1)
                + 0.5 * r * np.sum(a * a, 1))

    def dx_f(t, x, cloud, a):
        return q * x + qbar * (x - s * _m(cloud))

    def da_f(t, x, cloud, a):
        return r * a

    def daa_f(t, x, cloud, a):
        return np.broadcast_to(r * np.eye(a.shape[1]), (a.shape[0], a.shape[1], a.shape[1]))

    def dmu_f(t, x, cloud, a, xq):
        v = -qbar * s * (x - s * _m(cloud))
        return np.broadcast_to(v[:, None, :], (x.shape[0], xq.shape[0], x.shape[1]))

    def avg_f(t, x, cloud, a, xq):
        v = -qbar * s * (x.mean(axis=0) - s * _m(cloud))
        return np.broadcast_to(v, xq.shape)

    def pair_f(t, x, cloud, a, v):
        return (-qbar * s * (x - s * _m(cloud))) @ v.mean(axis=0)

    def g(x, cloud):
        mb = _m(cloud)
        return 0.5 * c * np.sum(x * x, 1) + 0.5 * cbar * np.sum((x - sT * mb) ** 2, 1)

    def dx_g(x, cloud):
        return c * x + cbar * (x - sT * _m(cloud))

    def dmu_g(x, cloud, xq):
        v = -cbar * sT * (x - sT * _m(cloud))
        return np.broadcast_to(v[:, None, :], (x.shape[0], xq.shape[0], x.shape[1]))

    def avg_g(x, cloud, xq):
        v = -cbar * sT * (x.mean(axis=0) - sT * _m(cloud))
        return np.broadcast_to(v, xq.shape)

    def pair_g(x, cloud, v):
        return (-cbar * sT * (x - sT * _m(cloud))) @ v.mean(axis=0)

    cost = CostModel(f=f, g=g, dx_f=dx_f, da_f=da_f, dmu_f=dmu_f, dx_g=dx_g, dmu_g=dmu_g,
                     lam=0.5 * r, daa_f=daa_f, avg_dmu_f=avg_f, avg_dmu_g=avg_g,
                     pair_dmu_f=pair_f, pair_dmu_g=pair_g, alpha_r=r)
    dyn = LinearDynamics.zeros(1, 1, 1, b1=[[params["b1"]]], b2=[[params["b2"]]],
                               b3=[[params["b3"]]], s0=[[params["sigma0"]]])
    return ModelSpec(dynamics=dyn, cost=cost, d=1, m=1, k=1, T=params["T"],
                     x0=np.array([params["x0"]]), name="lq_scalar", params=params)


LQ_BENCHMARK = dict(q=1.0, qbar=1.0, s=1.0, r=1.0, c=1.0, cbar=0.0, sT=1.0, b1=0.0,
                    b2=0.5, b3=1.0, sigma0=0.3, T=1.0, x0=1.0)


def lq_benchmark(**overrides) -> ModelSpec:
    """The reference LQ configuration used across the test-suite."""
    return make_lq_scalar(**{**LQ_BENCHMARK, **overrides})


def make_zero_model(d=1, m=1, k=1, T=1.0, x0=None, sigma0=0.0) -> ModelSpec:
    """No drift, no cost, constant volatility ``sigma0 * I`` (d = m) or zero."""
    x0 = np.zeros(d) if x0 is None else x0
    s0 = np.zeros((d, m))
    if sigma0:
        s0[np.arange(min(d, m)), np.arange(min(d, m))] = sigma0

    cost = CostModel(
        f=lambda t, x, cl, a: np.zeros(x.shape[0]),
        g=lambda x, cl: np.zeros(x.shape[0]),
        dx_f=lambda t, x, cl, a: np.zeros_like(x),
        da_f=lambda t, x, cl, a: np.zeros_like(a),
        dmu_f=lambda t, x, cl, a, xq: np.zeros((x.shape[0], xq.shape[0], x.shape[1])),
        dx_g=lambda x, cl: np.zeros_like(x),
        dmu_g=lambda x, cl, xq: np.zeros((x.shape[0], xq.shape[0], x.shape[1])),
        lam=0.0,
        daa_f=lambda t, x, cl, a: np.zeros((a.shape[0], a.shape[1], a.shape[1])),
        avg_dmu_f=lambda t, x, cl, a, xq: np.zeros(xq.shape),
        avg_dmu_g=lambda x, cl, xq: np.zeros(xq.shape),
        pair_dmu_f=lambda t, x, cl, a, v: np.zeros(x.shape[0]),
        pair_dmu_g=lambda x, cl, v: np.zeros(x.shape[0]),
    )
    return ModelSpec(dynamics=LinearDynamics.zeros(d, m, k, s0=s0), cost=cost, d=d, m=m,
                     k=k, T=T, x0=x0, name="zero", params=dict(sigma0=float(sigma0), T=float(T)))


# --------------------------------------------------------------------------
# general scalar interaction: f = fhat(t, x, <zeta, mu>, a)

def make_scalar_interaction(dynamics: LinearDynamics, d, m, k, T, x0, *, zeta, dzeta,
                            fhat, fhat_x, fhat_r, fhat_a, ghat, ghat_x, ghat_r, lam,
                            zeta_T=None, dzeta_T=None, fhat_aa=None, alpha_r=None,
                            name="scalar_interaction", params=None) -> ModelSpec:
    """Costs depending on the measure through one scalar moment.

    f(t, x, mu, a) = fhat(t, x, <zeta, mu>, a),  g(x, mu) = ghat(x, <zeta_T, mu>)

    ``zeta(x)`` maps (n, d) -> (n,), ``dzeta`` gives (n, d). ``fhat*`` take
    ``(t, x, r, a)`` with a scalar moment r; ``ghat*`` take ``(x, r)``. The
    measure derivative is then dmu f(...)(x') = fhat_r(...) * dzeta(x').
    """
    zeta_T = zeta if zeta_T is None else zeta_T
    dzeta_T = dzeta if dzeta_T is None else dzeta_T

    def mom(cloud, z=zeta):
        return float(np.mean(z(cloud.points)))

    def f(t, x, cloud, a):
        return fhat(t, x, mom(cloud), a)

    def dx_f(t, x, cloud, a):
        return fhat_x(t, x, mom(cloud), a)

    def da_f(t, x, cloud, a):
        return fhat_a(t, x, mom(cloud), a)

    def dmu_f(t, x, cloud, a, xq):
        return fhat_r(t, x, mom(cloud), a)[:, None, None] * dzeta(xq)[None, :, :]

    def avg_f(t, x, cloud, a, xq):
        return np.mean(fhat_r(t, x, mom(cloud), a)) * dzeta(xq)

    def pair_f(t, x, cloud, a, v):
        w = np.mean(np.sum(dzeta(cloud.points) * v, axis=1))
        return fhat_r(t, x, mom(cloud), a) * w

    def g(x, cloud):
        return ghat(x, mom(cloud, zeta_T))

    def dx_g(x, cloud):
        return ghat_x(x, mom(cloud, zeta_T))

    def dmu_g(x, cloud, xq):
        return ghat_r(x, mom(cloud, zeta_T))[:, None, None] * dzeta_T(xq)[None, :, :]

    def avg_g(x, cloud, xq):
        return np.mean(ghat_r(x, mom(cloud, zeta_T))) * dzeta_T(xq)

    def pair_g(x, cloud, v):
        w = np.mean(np.sum(dzeta_T(cloud.points) * v, axis=1))
        return ghat_r(x, mom(cloud, zeta_T)) * w

    def daa(t, x, cloud, a):
        return fhat_aa(t, x, mom(cloud), a)

    cost = CostModel(f=f, g=g, dx_f=dx_f, da_f=da_f, dmu_f=dmu_f, dx_g=dx_g, dmu_g=dmu_g,
                     lam=lam, daa_f=daa if fhat_aa is not None else None, avg_dmu_f=avg_f, avg_dmu_g=avg_g,
                     pair_dmu_f=pair_f, pair_dmu_g=pair_g, alpha_r=alpha_r)
    return ModelSpec(dynamics=dynamics, cost=cost, d=d, m=m, k=k, T=T, x0=x0, name=name,
                     params=dict(params or {}))


def make_quadratic_moment(q=1.0, r=1.0, kappa=0.5, c=1.0, kappa_T=0.5, b2=0.0, b1=0.0,
                          b3=1.0, sigma0=0.3, T=1.0, x0=1.0) -> ModelSpec:
    """A built-in scalar-interaction model in d = m = k = 1.

    f = q/2 x^2 + r/2 a^2 + kappa/2 m2^2,  g = c/2 x^2 + kappa_T (m2 + m2^2/2)
    with m2 = <x^2, mu>. Both outer functions are convex and non-decreasing on
    the range of m2, so the costs are convex in (x, mu, a).
    """
    if not r > 0:
        raise ModelError("r must be positive")
    if min(q, kappa, c, kappa_T) < 0:
        raise ModelError("q, kappa, c, kappa_T must be non-negative")
    params = {key: float(v) for key, v in dict(q=q, r=r, kappa=kappa, c=c, kappa_T=kappa_T,
                                                b2=b2, b1=b1, b3=b3, sigma0=sigma0, T=T,
                                                x0=x0).items()}
    dyn = LinearDynamics.zeros(1, 1, 1, b1=[[b1]], b2=[[b2]], b3=[[b3]], s0=[[sigma0]])
    return make_scalar_interaction(
        dyn, 1, 1, 1, T, np.array([x0]),
        zeta=lambda x: np.sum(x * x, axis=1),
        dzeta=lambda x: 2.0 * x,
        fhat=lambda t, x, m2, a: 0.5 * q * np.sum(x * x, 1) + 0.5 * r * np.sum(a * a, 1)
        + 0.5 * kappa * m2 ** 2,
        fhat_x=lambda t, x, m2, a: q * x,
        fhat_r=lambda t, x, m2, a: np.full(x.shape[0], kappa * m2),
        fhat_a=lambda t, x, m2, a: r * a,
        fhat_aa=lambda t, x, m2, a: np.broadcast_to(r * np.eye(1), (a.shape[0], 1, 1)),
        ghat=lambda x, m2: 0.5 * c * np.sum(x * x, 1) + kappa_T * (m2 + 0.5 * m2 ** 2),
        ghat_x=lambda x, m2: c * x,
        ghat_r=lambda x, m2: np.full(x.shape[0], kappa_T * (1.0 + m2)),
        lam=0.5 * r, alpha_r=r, name="quadratic_moment", params=params)


# --------------------------------------------------------------------------
# first-order interaction: coefficients are averages of a kernel over mu

@dataclass(frozen=True)
class Kernel:
    """A kernel h(t, x, x', a) (running) or h(x, x') (terminal) with partials.

    Callables broadcast over leading axes: x (..., d), x' (..., d), a (..., k)
    and return (...) for ``value`` and (..., d) / (..., k) for the partials.
    ``da`` may be None for terminal kernels.
    """

    value: Callable
    dx: Callable
    dxp: Callable
    da: Optional[Callable] = None


def _affine_parts(fn, d, k, out_shape, T, probes=6, seed=0):
    """Coefficients of fn(t, x, x', a) assuming it is affine; raises otherwise."""
    def parts(t):
        z_d, z_k = np.zeros(d), np.zeros(k)
        c0 = np.asarray(fn(t, z_d, z_d, z_k), dtype=float)
        cx = np.stack([np.asarray(fn(t, e, z_d, z_k)) - c0 for e in np.eye(d)], axis=-1)
        cxp = np.stack([np.asarray(fn(t, z_d, e, z_k)) - c0 for e in np.eye(d)], axis=-1)
        ca = np.stack([np.asarray(fn(t, z_d, z_d, e)) - c0 for e in np.eye(k)], axis=-1)
        return c0, cx, cxp, ca

    rng = np.random.default_rng(seed)
    for t in np.linspace(0.0, T, 3):
        c0, cx, cxp, ca = parts(t)
        if c0.shape != out_shape:
            raise ModelError(f"dynamics kernel returns shape {c0.shape}, expected {out_shape}")
        for _ in range(probes):
            x, xp, a = rng.standard_normal(d) * 3, rng.standard_normal(d) * 3, rng.standard_normal(k) * 3
            lin = c0 + cx @ x + cxp @ xp + ca @ a
            val = np.asarray(fn(t, x, xp, a), dtype=float)
            if not np.allclose(val, lin, rtol=1e-9, atol=1e-9 * (1 + np.abs(lin).max())):
                raise ModelError("dynamics kernel is not affine in (x, x', alpha); "
                                 "only affine kernels keep the dynamics linear")
    return parts


def make_first_order(f_kernel: Kernel, g_kernel: Kernel, d, m, k, T, x0, lam, *,
                     b_kernel=None, sigma_kernel=None, dynamics=None,
                     name="first_order", params=None) -> ModelSpec:
    """Costs of the form f(t, x, mu, a) = <fhat(t, x, ., a), mu>, same for g.

    Dynamics come either from ``dynamics`` or from affine kernels
    ``b_kernel(t, x, x', a) -> (d,)`` and ``sigma_kernel(...) -> (d, m)``
    (single points, not vectorised). Non-affine dynamics kernels raise
    :class:`ModelError`.
    """
    if f_kernel.da is None:
        raise ModelError("running kernel needs an alpha derivative")
    if dynamics is None:
        coeffs = {}
        if b_kernel is not None:
            bp = _affine_parts(b_kernel, d, k, (d,), T)
            coeffs.update(b0=lambda t: bp(t)[0], b2=lambda t: bp(t)[1],
                          b1=lambda t: bp(t)[2], b3=lambda t: bp(t)[3])
        if sigma_kernel is not None:
            sp = _affine_parts(sigma_kernel, d, k, (d, m), T)
            coeffs.update(s0=lambda t: sp(t)[0], s2=lambda t: sp(t)[1],
                          s1=lambda t: sp(t)[2], s3=lambda t: sp(t)[3])
        dynamics = LinearDynamics.zeros(d, m, k, **coeffs)

    def pairwise(fn, x, xp, a=None, reduce_axis=1):
        """Average of fn over the other index; chunked in rows."""
        n, q_ = x.shape[0], xp.shape[0]
        starts, step = _row_chunks(n, q_, max(d, k))
        outs = []
        for s in starts:
            xs = x[s:s + step, None, :]
            args = (xs, xp[None, :, :]) if a is None else (xs, xp[None, :, :], a[s:s + step, None, :])
            outs.append(np.mean(fn(*args), axis=reduce_axis))
        return np.concatenate(outs, axis=0)

    def f(t, x, cloud, a):
        return pairwise(lambda X, P, A: f_kernel.value(t, X, P, A), x, cloud.points, a)

    def dx_f(t, x, cloud, a):
        return pairwise(lambda X, P, A: f_kernel.dx(t, X, P, A), x, cloud.points, a)

    def da_f(t, x, cloud, a):
        return pairwise(lambda X, P, A: f_kernel.da(t, X, P, A), x, cloud.points, a)

    def dmu_f(t, x, cloud, a, xq):
        return f_kernel.dxp(t, x[:, None, :], xq[None, :, :], a[:, None, :])

    def avg_f(t, x, cloud, a, xq):
        # mean over rows i of dxp(x_i, xq_q): average along axis 0
        starts, step = _row_chunks(xq.shape[0], x.shape[0], d)
        out = [np.mean(f_kernel.dxp(t, x[None, :, :], xq[s:s + step, None, :], a[None, :, :]), axis=1)
               for s in starts]
        return np.concatenate(out, axis=0)

    def g(x, cloud):
        return pairwise(lambda X, P: g_kernel.value(X, P), x, cloud.points)

    def dx_g(x, cloud):
        return pairwise(lambda X, P: g_kernel.dx(X, P), x, cloud.points)

    def dmu_g(x, cloud, xq):
        return g_kernel.dxp(x[:, None, :], xq[None, :, :])

    def avg_g(x, cloud, xq):
        starts, step = _row_chunks(xq.shape[0], x.shape[0], d)
        out = [np.mean(g_kernel.dxp(x[None, :, :], xq[s:s + step, None, :]), axis=1) for s in starts]
        return np.concatenate(out, axis=0)

    cost = CostModel(f=f, g=g, dx_f=dx_f, da_f=da_f, dmu_f=dmu_f, dx_g=dx_g, dmu_g=dmu_g,
                     lam=lam, avg_dmu_f=avg_f, avg_dmu_g=avg_g)
    return ModelSpec(dynamics=dynamics, cost=cost, d=d, m=m, k=k, T=T, x0=x0, name=name,
                     params=dict(params or {}))


def make_pairwise_attraction(d=1, q=1.0, r=1.0, kappa=1.0, c=0.5, kappa_T=0.5, b2=0.0, b3=1.0,
                             sigma0=0.3, T=1.0, x0=1.0) -> ModelSpec:
    """A built-in first-order model with m = k = d.

    dX = (b2 X + b3 a) dt + sigma0 dW, running cost
    q/2 |x|^2 + r/2 |a|^2 + kappa/2 <|x - .|^2, mu> and terminal cost
    c/2 |x|^2 + kappa_T/2 <|x - .|^2, mu>. The kernel |x - x'|^2 is jointly
    convex, so the costs are convex in (x, mu, a).
    """
    if not r > 0:
        raise ModelError("r must be positive")
    if min(q, kappa, c, kappa_T) < 0:
        raise ModelError("q, kappa, c, kappa_T must be non-negative")
    params = dict(d=int(d), q=float(q), r=float(r), kappa=float(kappa), c=float(c),
                  kappa_T=float(kappa_T), b2=float(b2), b3=float(b3), sigma0=float(sigma0),
                  T=float(T), x0=float(x0))
    eye = np.eye(d)
    f_kernel = Kernel(
        value=lambda t, x, xp, a: (0.5 * q * np.sum(x * x, -1) + 0.5 * r * np.sum(a * a, -1)
                                   + 0.5 * kappa * np.sum((x - xp) ** 2, -1)),
        dx=lambda t, x, xp, a: q * x + kappa * (x - xp) + 0.0 * a[..., :1],
        dxp=lambda t, x, xp, a: -kappa * (x - xp) + 0.0 * a[..., :1],
        da=lambda t, x, xp, a: r * a + 0.0 * (x[..., :1] + xp[..., :1]))
    g_kernel = Kernel(
        value=lambda x, xp: 0.5 * c * np.sum(x * x, -1) + 0.5 * kappa_T * np.sum((x - xp) ** 2, -1),
        dx=lambda x, xp: c * x + kappa_T * (x - xp),
        dxp=lambda x, xp: -kappa_T * (x - xp))
    dyn = LinearDynamics.zeros(d, d, d, b2=b2 * eye, b3=b3 * eye, s0=sigma0 * eye)
    return make_first_order(f_kernel, g_kernel, d, d, d, T, np.full(d, float(x0)), 0.5 * r,
                            dynamics=dyn, name="pairwise_attraction", params=params)


# --------------------------------------------------------------------------
# numerical spot-checks of the standing assumptions

@dataclass
class CheckResult:
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def as_dict(self) -> dict:
        return {k: dict(passed=v.passed, worst=v.worst, detail=v.detail)
                for k, v in self.checks.items()}


def _rel(fd, an):
    fd, an = np.asarray(fd, float), np.asarray(an, float)
    return float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an))))


def validate_assumptions(spec: ModelSpec, probes: int = 20, seed: int = 0,
                         n_particles: int = 5, deriv_tol: float = 1e-5) -> ValidationReport:
    """Spot-check Lipschitz growth, convexity and derivative consistency.

    Each probe draws a time, two index-coupled clouds, two states and two
    controls. Derivative errors are relative with a unit floor,
    |fd - exact| / max(1, |exact|), from central differences.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    cm = spec.cost
    d, k = spec.d, spec.k
    scale = 1.0 + float(np.max(np.abs(spec.x0)))
    lip_f = lip_g = 0.0
    conv_f = conv_g = np.inf
    derr = {name: 0.0 for name in ("dx_f", "da_f", "dmu_f", "dx_g", "dmu_g")}
    h = 1e-5
    for _ in range(probes):
        t = rng.uniform(0, spec.T)
        P = scale * rng.standard_normal((n_particles, d))
        P2 = P + 0.5 * scale * rng.standard_normal((n_particles, d))
        mu, mu2 = ParticleCloud(P), ParticleCloud(P2)
        x = scale * rng.standard_normal((1, d))
        x2 = x + 0.5 * scale * rng.standard_normal((1, d))
        a = rng.standard_normal((1, k))
        a2 = a + rng.standard_normal((1, k))
        # local Lipschitz quotients with quadratic growth weight
        dist = np.linalg.norm(x2 - x) + np.linalg.norm(a2 - a) + np.sqrt(np.mean(np.sum((P2 - P) ** 2, 1)))
        weight = 1 + np.linalg.norm(x) + np.linalg.norm(x2) + np.linalg.norm(a) + np.linalg.norm(a2) \
            + np.sqrt(np.mean(np.sum(P ** 2, 1))) + np.sqrt(np.mean(np.sum(P2 ** 2, 1)))
        lip_f = max(lip_f, float(abs(cm.f(t, x2, mu2, a2)[0] - cm.f(t, x, mu, a)[0]) / (dist * weight)))
        lip_g = max(lip_g, float(abs(cm.g(x2, mu2)[0] - cm.g(x, mu)[0]) / (dist * weight)))
        # convexity in (x, mu, a), coupling the clouds index-wise
        dP = P2 - P
        lin_mu_f = float(np.mean(np.sum(cm.dmu_f(t, x, mu, a, P)[0] * dP, axis=1)))
        marg = (cm.f(t, x2, mu2, a2)[0] - cm.f(t, x, mu, a)[0]
                - float(cm.dx_f(t, x, mu, a)[0] @ (x2 - x)[0])
                - float(cm.da_f(t, x, mu, a)[0] @ (a2 - a)[0]) - lin_mu_f)
        da2 = float(np.sum((a2 - a) ** 2))
        conv_f = min(conv_f, (marg - cm.lam * da2) / (1.0 + da2))
        lin_mu_g = float(np.mean(np.sum(cm.dmu_g(x, mu, P)[0] * dP, axis=1)))
        marg_g = cm.g(x2, mu2)[0] - cm.g(x, mu)[0] - float(cm.dx_g(x, mu)[0] @ (x2 - x)[0]) - lin_mu_g
        conv_g = min(conv_g, marg_g / (1.0 + float(np.sum((x2 - x) ** 2))))
        # central differences
        for j in range(d):
            e = np.zeros((1, d))
            e[0, j] = h
            fd = (cm.f(t, x + e, mu, a)[0] - cm.f(t, x - e, mu, a)[0]) / (2 * h)
            derr["dx_f"] = max(derr["dx_f"], _rel(fd, cm.dx_f(t, x, mu, a)[0, j]))
            fd = (cm.g(x + e, mu)[0] - cm.g(x - e, mu)[0]) / (2 * h)
            derr["dx_g"] = max(derr["dx_g"], _rel(fd, cm.dx_g(x, mu)[0, j]))
            # measure derivative through the lifted map: move particle p only
            M = n_particles
            for p in range(M):
                Pp, Pm = P.copy(), P.copy()
                Pp[p, j] += h
                Pm[p, j] -= h
                fd = M * (cm.f(t, x, ParticleCloud(Pp), a)[0] - cm.f(t, x, ParticleCloud(Pm), a)[0]) / (2 * h)
                an = cm.dmu_f(t, x, mu, a, P[p:p + 1])[0, 0, j]
                derr["dmu_f"] = max(derr["dmu_f"], _rel(fd, an))
                fd = M * (cm.g(x, ParticleCloud(Pp))[0] - cm.g(x, ParticleCloud(Pm))[0]) / (2 * h)
                derr["dmu_g"] = max(derr["dmu_g"], _rel(fd, cm.dmu_g(x, mu, P[p:p + 1])[0, 0, j]))
        for j in range(k):
            e = np.zeros((1, k))
            e[0, j] = h
            fd = (cm.f(t, x, mu, a + e)[0] - cm.f(t, x, mu, a - e)[0]) / (2 * h)
            derr["da_f"] = max(derr["da_f"], _rel(fd, cm.da_f(t, x, mu, a)[0, j]))

    tol = 1e-9 * scale ** 2
    checks = {
        "lipschitz_f": CheckResult(bool(np.isfinite(lip_f)), lip_f, "max local Lipschitz quotient"),
        "lipschitz_g": CheckResult(bool(np.isfinite(lip_g)), lip_g, "max local Lipschitz quotient"),
        "convexity_f": CheckResult(bool(conv_f >= -tol and cm.lam >= 0), float(conv_f),
                                   f"min (margin - lam|da|^2)/(1+|da|^2), lam={cm.lam}"),
        "convexity_g": CheckResult(bool(conv_g >= -tol), float(conv_g), "min margin/(1+|dx|^2)"),
    }
    for name, err in derr.items():
        checks["deriv_" + name] = CheckResult(err <= deriv_tol, err, "central-difference relative error")
    return ValidationReport(checks)
