"""Hamiltonian H(t, x, mu, y, z, a) = b . y + sigma : z + f and its derivatives.

``sigma : z`` is the Frobenius pairing sum_ij sigma_ij z_ij. Because the
dynamics are affine, the measure derivatives of b and sigma are the constant
maps u -> b1 u and u -> s1 u; only f contributes a genuinely x'-dependent
part to the measure derivative of H.

Point functions accept a single point (x of shape (d,)) or a batch of rows
(x of shape (n, d)); the solver-facing helpers at the bottom work on a whole
particle system at one time step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergenceError
from .measure import ParticleCloud
from .model import ModelSpec, avg_dmu_f, avg_dmu_g

__all__ = [
    "HamiltonianPoint",
    "hamiltonian",
    "minimize_alpha",
    "dx_dmu_hamiltonian",
    "NEWTON_TOL",
    "MAX_NEWTON",
]

NEWTON_TOL = 1e-10
MAX_NEWTON = 50


@dataclass(frozen=True)
class HamiltonianPoint:
    t: float
    x: np.ndarray
    cloud: ParticleCloud
    y: np.ndarray
    z: np.ndarray
    alpha: np.ndarray


def _rows(spec, x, y, z, alpha=None):
    """Promote point arguments to row batches; report whether input was a point."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_1d(x).reshape(-1, spec.d)
    n = x.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1, spec.d), (n, spec.d))
    z = np.broadcast_to(np.asarray(z, dtype=float).reshape(-1, spec.d, spec.m), (n, spec.d, spec.m))
    if alpha is not None:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float).reshape(-1, spec.k), (n, spec.k))
    return single, x, y, z, alpha


def _coeffs(spec, t):
    return spec.dynamics.at(t)


def hamiltonian(spec: ModelSpec, t, x, cloud, y, z, alpha):
    """H at a point (returns float) or at each row of a batch (returns (n,))."""
    single, x, y, z, alpha = _rows(spec, x, y, z, alpha)
    c = _coeffs(spec, t)
    mbar = cloud.bar
    b = c["b0"] + c["b1"] @ mbar + x @ c["b2"].T + alpha @ c["b3"].T
    s = (c["s0"] + np.einsum("ijl,l->ij", c["s1"], mbar)
         + np.einsum("ijl,nl->nij", c["s2"], x) + np.einsum("ijl,nl->nij", c["s3"], alpha))
    val = np.sum(b * y, axis=1) + np.sum(s * z, axis=(1, 2)) + spec.cost.f(t, x, cloud, alpha)
    return float(val[0]) if single else val


def hamiltonian_at(spec: ModelSpec, p: HamiltonianPoint) -> float:
    return hamiltonian(spec, p.t, p.x, p.cloud, p.y, p.z, p.alpha)


def _grad_alpha(spec, c, t, x, cloud, y, z, a):
    g = spec.cost.da_f(t, x, cloud, a) + y @ c["b3"]
    if np.any(c["s3"]):
        g = g + np.einsum("ijl,nij->nl", c["s3"], z)
    return g


def _alpha_part(spec, c, t, x, cloud, y, z, a):
    """The a-dependent part of H (enough to compare candidate controls)."""
    v = spec.cost.f(t, x, cloud, a) + np.sum((a @ c["b3"].T) * y, axis=1)
    if np.any(c["s3"]):
        v = v + np.sum(np.einsum("ijl,nl->nij", c["s3"], a) * z, axis=(1, 2))
    return v


def _hess_alpha(spec, c, t, x, cloud, y, z, a):
    if spec.cost.daa_f is not None:
        return np.asarray(spec.cost.daa_f(t, x, cloud, a), dtype=float)
    # central differences of the exact gradient
    k = a.shape[1]
    H = np.empty((a.shape[0], k, k))
    h = 1e-6 * (1.0 + np.abs(a))
    for j in range(k):
        e = np.zeros_like(a)
        e[:, j] = h[:, j]
        H[:, :, j] = (_grad_alpha(spec, c, t, x, cloud, y, z, a + e)
                      - _grad_alpha(spec, c, t, x, cloud, y, z, a - e)) / (2 * h[:, j:j + 1])
    return 0.5 * (H + np.swapaxes(H, 1, 2))


def minimize_alpha(spec: ModelSpec, t, x, cloud, y, z, *, method: str = "auto",
                   newton_tol: float = NEWTON_TOL, max_newton: int = MAX_NEWTON, alpha0=None):
    """The minimiser of a -> H(t, x, mu, y, z, a).

    ``method="auto"`` uses the closed form -(b3' y + s3' z)/r when the cost
    declares a separable quadratic alpha part, and damped Newton otherwise;
    ``method="newton"`` forces Newton. Newton stops once every row's
    alpha-gradient is at most ``newton_tol``.
    """
    single, x, y, z, _ = _rows(spec, x, y, z)
    c = _coeffs(spec, t)
    if method not in ("auto", "newton", "closed"):
        raise ValueError(f"unknown method {method!r}")
    if method == "closed" or (method == "auto" and spec.cost.alpha_r is not None):
        if spec.cost.alpha_r is None:
            raise ValueError("closed form needs a cost with a separable quadratic alpha part")
        lin = y @ c["b3"]
        if np.any(c["s3"]):
            lin = lin + np.einsum("ijl,nij->nl", c["s3"], z)
        a = -lin / spec.cost.alpha_r
        return a[0] if single else a
    a = _newton(spec, c, t, x, cloud, y, z, alpha0, newton_tol, max_newton)
    return a[0] if single else a


def _newton(spec, c, t, x, cloud, y, z, alpha0, tol, max_iter):
    n = x.shape[0]
    a = np.zeros((n, spec.k)) if alpha0 is None else np.array(alpha0, dtype=float).reshape(n, spec.k)
    trace = []
    for it in range(max_iter + 1):
        g = _grad_alpha(spec, c, t, x, cloud, y, z, a)
        gnorm = np.linalg.norm(g, axis=1)
        trace.append(float(gnorm.max()))
        active = gnorm > tol
        if not np.any(active):
            return a
        if it == max_iter:
            break
        idx = np.flatnonzero(active)
        xa, ya, za, aa, ga = x[idx], y[idx], z[idx], a[idx], g[idx]
        H = _hess_alpha(spec, c, t, xa, cloud, ya, za, aa)
        try:
            step = -np.linalg.solve(H, ga[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            raise NonConvergenceError("singular alpha-Hessian: cost is not strictly convex in alpha",
                                      trace) from None
        if np.any(np.sum(step * ga, axis=1) >= 0):
            raise NonConvergenceError("alpha-Hessian is not positive definite", trace)
        # halve the step on each row until H decreases (Armijo); near the
        # minimum the decrease drowns in rounding, so a smaller gradient
        # also accepts the step
        h0 = _alpha_part(spec, c, t, xa, cloud, ya, za, aa)
        g0 = np.linalg.norm(ga, axis=1)
        slope = np.sum(step * ga, axis=1)
        lam = np.ones(idx.size)
        for _ in range(60):
            trial = aa + lam[:, None] * step
            bad = _alpha_part(spec, c, t, xa, cloud, ya, za, trial) > h0 + 1e-4 * lam * slope + 1e-14 * np.abs(h0)
            if np.any(bad):
                gt = np.linalg.norm(_grad_alpha(spec, c, t, xa, cloud, ya, za, trial), axis=1)
                bad &= gt >= g0
            if not np.any(bad):
                break
            lam[bad] *= 0.5
        a[idx] = aa + lam[:, None] * step
    raise NonConvergenceError(f"Newton did not reach |dH/da| <= {tol} in {max_iter} iterations",
                              trace)


def dx_dmu_hamiltonian(spec: ModelSpec, t, x, cloud, y, z, alpha, queries):
    """(dH/dx, dH/dmu evaluated at each query point).

    For a single point returns arrays (d,) and (Q, d).
    dH/dx = b2' y + s2' z + dx f and dH/dmu(x') = b1' y + s1' z + dmu f(x').
    """
    single, x, y, z, alpha = _rows(spec, x, y, z, alpha)
    c = _coeffs(spec, t)
    xq = queries.points if isinstance(queries, ParticleCloud) else np.asarray(queries, float).reshape(-1, spec.d)
    dx = (y @ c["b2"] + np.einsum("ijl,nij->nl", c["s2"], z)
          + spec.cost.dx_f(t, x, cloud, alpha))
    common = y @ c["b1"] + np.einsum("ijl,nij->nl", c["s1"], z)
    dmu = common[:, None, :] + spec.cost.dmu_f(t, x, cloud, alpha, xq)
    if single:
        return dx[0], dmu[0]
    return dx, dmu


# --------------------------------------------------------------------------
# particle-system helpers used by the solvers (tab = DynamicsTable, n = step)

def alpha_gradient(spec, tab, n, t, X, cloud, Y, Z, A):
    """dH/da per particle, (M, k)."""
    g = spec.cost.da_f(t, X, cloud, A) + tab.b3T(n, Y)
    return g + tab.s3T(n, Z)


def optimal_alpha(spec, tab, n, t, X, cloud, Y, Z, alpha0=None):
    """Minimiser of H for every particle at step n."""
    if spec.cost.alpha_r is not None:
        return -(tab.b3T(n, Y) + tab.s3T(n, Z)) / spec.cost.alpha_r
    c = {name: getattr(tab, name)[n] for name in ("b3", "s3")}
    return _newton(spec, c, t, X, cloud, Y, Z, alpha0, NEWTON_TOL, MAX_NEWTON)


def adjoint_driver(spec, tab, n, t, X, cloud, Y, Z, A):
    """dxH at particle i plus the cloud average of dmuH(X_j, ...)(X_i), (M, d)."""
    out = tab.b2T(n, Y) + spec.cost.dx_f(t, X, cloud, A)
    out = out + tab.s2T(n, Z)
    common = tab.b1T(n, Y.mean(axis=0)) + tab.s1T(n, Z.mean(axis=0))
    return out + common + avg_dmu_f(spec.cost, t, X, cloud, A, X)


def terminal_adjoint(spec, X, cloud):
    """dx g at particle i plus the cloud average of dmu g(X_j)(X_i), (M, d)."""
    return spec.cost.dx_g(X, cloud) + avg_dmu_g(spec.cost, X, cloud, X)
