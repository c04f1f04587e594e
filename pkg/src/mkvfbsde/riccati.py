"""Deterministic reference solution of the scalar LQ mean-field problem.

With alpha = -b3 Y / r and the ansatz Y_t = eta_t (X_t - E X_t) + p_t E X_t
(so psi = p - eta in the form Y = eta X + psi E X), the adjoint system splits
into two scalar Riccati equations, with k = b3^2 / r:

    eta' = -2 b2 eta + k eta^2 - (q + qbar),                 eta_T = c + cbar
    p'   = -2 (b1 + b2) p + k p^2 - q - qbar (1 - s)^2,      p_T = c + cbar (1 - sT)^2

The state mean m and variance v follow

    m' = (b1 + b2 - k p) m,   v' = 2 (b2 - k eta) v + sigma0^2

and the optimal cost is the time integral of the expected running cost plus
the expected terminal cost. Everything is integrated with an adaptive
8th-order Runge-Kutta method at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

__all__ = ["LqOracle", "lq_oracle"]

_KEYS = ("q", "qbar", "s", "r", "c", "cbar", "sT", "b1", "b2", "b3", "sigma0", "T", "x0")


@dataclass
class LqOracle:
    params: dict
    _back: object
    _fwd: object
    J: float
    y0: float

    def eta(self, t):
        return self._back.sol(np.asarray(t, float))[0]

    def p(self, t):
        return self._back.sol(np.asarray(t, float))[1]

    def psi(self, t):
        return self.p(t) - self.eta(t)

    def mean(self, t):
        return self._fwd.sol(np.asarray(t, float))[0]

    def var(self, t):
        return self._fwd.sol(np.asarray(t, float))[1]


def lq_oracle(params, rtol: float = 1e-12, atol: float = 1e-14) -> LqOracle:
    """Solve the Riccati system for a parameter dict (or a lq_scalar ModelSpec)."""
    if hasattr(params, "params"):
        params = params.params
    P = {k: float(params[k]) for k in _KEYS}
    q, qb, s, r, c, cb, sT = P["q"], P["qbar"], P["s"], P["r"], P["c"], P["cbar"], P["sT"]
    b1, b2, b3, s0, T, x0 = P["b1"], P["b2"], P["b3"], P["sigma0"], P["T"], P["x0"]
    k = b3 * b3 / r
    Qd, Qm = q + qb, q + qb * (1 - s) ** 2

    def back(t, u):
        eta, p = u
        return [-(2 * b2 * eta - k * eta * eta + Qd), -(2 * (b1 + b2) * p - k * p * p + Qm)]

    bsol = solve_ivp(back, (T, 0.0), [c + cb, c + cb * (1 - sT) ** 2], method="DOP853",
                     rtol=rtol, atol=atol, dense_output=True)
    if not bsol.success:
        raise RuntimeError(f"Riccati integration failed: {bsol.message}")

    def fwd(t, u):
        m, v, _ = u
        eta, p = bsol.sol(t)
        run = (0.5 * q * (v + m * m) + 0.5 * qb * (v + (1 - s) ** 2 * m * m)
               + 0.5 * k * (eta * eta * v + p * p * m * m))
        return [(b1 + b2 - k * p) * m, 2 * (b2 - k * eta) * v + s0 * s0, run]

    fsol = solve_ivp(fwd, (0.0, T), [x0, 0.0, 0.0], method="DOP853", rtol=rtol, atol=atol,
                     dense_output=True)
    if not fsol.success:
        raise RuntimeError(f"moment integration failed: {fsol.message}")
    mT, vT, run = fsol.y[:, -1]
    J = run + 0.5 * c * (vT + mT * mT) + 0.5 * cb * (vT + (1 - sT) ** 2 * mT * mT)
    y0 = float(bsol.sol(0.0)[1] * x0)
    return LqOracle(params=P, _back=bsol, _fwd=fsol, J=float(J), y0=y0)
