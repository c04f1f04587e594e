"""Decoupling field v(t, .) with Y_t = v(t, X_t), fitted from a solved system.

At every grid step the adjoint values Y_n are regressed on polynomial
features of the states X_n (the basis of the backward solver). The law
argument is frozen at the solution flow: a field describes one run and is
not meant to be reused for a different initial law.

At a step where the cloud has collapsed (every particle at x0 at t = 0, or
the whole run when the volatility vanishes) only the value at the collapse
point is known. Such steps are reported as rank deficient; evaluating them
away from the collapse point raises instead of extrapolating.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, RegressionError
from .hamiltonian import optimal_alpha
from .maxprinciple import (StatePaths, TimeGrid, _se, brownian_increments, cost_per_particle,
                           simulate_policy)
from .measure import ParticleCloud, write_text_atomic
from .model import ModelSpec
from .regression import MAX_DEGREE, Projector, monomials

__all__ = [
    "DecouplingField",
    "LipschitzProfile",
    "ReplayResult",
    "fit_field",
    "lipschitz_profile",
    "sup_at_origin",
    "feedback_controls",
    "feedback_replay",
    "simulate_feedback",
    "slope_statistics",
    "field_to_csv",
]


@dataclass
class DecouplingField:
    """Per-step polynomial fits of Y_n on X_n.

    ``coef[n]`` has shape (P_n, d) in the standardised basis of step n
    (centre ``center[n]``, scale ``scale[n]``, active coordinates
    ``active[n]``). ``r2`` is NaN and ``status`` is ``"rank_deficient"``
    at skipped steps. ``flow`` holds the reference states (M, Nt+1, d),
    whose step-n cloud is the law argument used by feedback controls.
    ``control_coef[n]`` (n < Nt) fits the conditional expectation Yhat_n
    in the same basis: the discrete scheme evaluates the optimal control at
    Yhat_n, which differs from Y_n by O(dt), so feedback uses this fit.
    """

    times: np.ndarray
    degree: int
    coef: list
    center: np.ndarray
    scale: np.ndarray
    active: list
    r2: np.ndarray
    status: list
    box: np.ndarray            # (Nt+1, 2, d): 1 and 99 percentiles per step
    flow: np.ndarray
    seed: int | None = None
    info: dict = field(default_factory=dict)
    control_coef: list | None = None

    @property
    def Nt(self) -> int:
        return len(self.times) - 1

    @property
    def d(self) -> int:
        return self.center.shape[1]

    @property
    def skipped(self) -> list:
        return [n for n, s in enumerate(self.status) if s != "ok"]

    def reference_cloud(self, n: int) -> ParticleCloud:
        return ParticleCloud(self.flow[:, n])

    def _features(self, n, x):
        act = self.active[n]
        u = (x[:, act] - self.center[n, act]) / self.scale[n, act]
        return monomials(u, self.degree if act.size else 0)

    def __call__(self, n: int, x) -> np.ndarray:
        """v(t_n, x) for points x (Q, d) or a single point (d,)."""
        return self._evaluate(self.coef, n, x)

    def control_value(self, n: int, x) -> np.ndarray:
        """Fitted Yhat_n at x: the adjoint value fed to the feedback control."""
        if self.control_coef is None:
            return self(n, x)
        if not 0 <= n < self.Nt:
            raise IndexError(f"control step {n} outside 0..{self.Nt - 1}")
        return self._evaluate(self.control_coef, n, x)

    def _evaluate(self, coefs, n, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = x.reshape(-1, self.d)
        if self.status[n] != "ok":
            # only the collapsed coordinates are pinned; they must match
            pinned = np.setdiff1d(np.arange(self.d), self.active[n])
            c = self.center[n, pinned]
            if np.any(np.abs(x[:, pinned] - c) > 1e-9 * (1.0 + np.abs(c))):
                raise RegressionError(
                    f"step {n} is rank deficient; the field is only known on its collapsed cloud")
        out = self._features(n, x) @ coefs[n]
        return out[0] if single else out

    def affine_parts(self, n: int):
        """(Jacobian (d, d), value at 0 (d,)) of a degree-1 fit at step n.

        Collapsed coordinates get zero columns. Row i is the gradient of the
        i-th component of v.
        """
        if self.degree != 1:
            raise ValueError("affine_parts needs a degree-1 field")
        act = self.active[n]
        c = self.coef[n]
        Jac = np.zeros((self.d, self.d))
        if act.size:
            Jac[:, act] = (c[1:] / self.scale[n, act][:, None]).T
        v0 = c[0] - Jac[:, act] @ self.center[n, act]
        return Jac, v0


def fit_field(sol, degree: int = 1, *, collapse_tol: float = 1e-12) -> DecouplingField:
    """Least-squares fit of Y_n against basis features of X_n for every step."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"basis degree must be in 0..{MAX_DEGREE}, got {degree}")
    X, Y, Yh = sol.X, sol.Y, sol.Yhat
    M, Np1, d = X.shape
    dt = sol.diagnostics.get("dt") or 1.0 / (Np1 - 1)
    coef, ccoef, active, status = [], [], [], []
    center = np.empty((Np1, d))
    scale = np.empty((Np1, d))
    r2 = np.full(Np1, np.nan)
    box = np.empty((Np1, 2, d))
    for n in range(Np1):
        Xn, Yn = X[:, n], Y[:, n]
        box[n] = np.percentile(Xn, [1.0, 99.0], axis=0)
        try:
            proj = Projector(Xn, degree, collapse_tol)
        except RegressionError:
            # fewer particles than features, or singular Gram matrix
            proj = Projector(Xn, 0, collapse_tol)
            status.append("rank_deficient")
        else:
            status.append("rank_deficient" if proj.collapsed else "ok")
        c = proj.coef(Yn)
        coef.append(c)
        if n < Np1 - 1:
            ccoef.append(proj.coef(Yh[:, n]))
        active.append(proj.active if proj.degree == degree else np.array([], dtype=int))
        center[n], scale[n] = proj.center, proj.scale
        if status[-1] == "ok":
            resid = Yn - proj.features @ c
            ss_res = float(np.sum(resid ** 2))
            ss_tot = float(np.sum((Yn - Yn.mean(axis=0)) ** 2))
            if ss_tot > 1e-24 * max(1.0, float(np.sum(Yn ** 2))):
                r2[n] = 1.0 - ss_res / ss_tot
            else:
                # constant target: a perfect fit counts as R^2 = 1
                r2[n] = 1.0 if ss_res <= 1e-24 * max(1.0, float(np.sum(Yn ** 2))) else 0.0
    times = np.arange(Np1) * dt
    return DecouplingField(times=times, degree=degree, coef=coef, center=center, scale=scale,
                           active=active, r2=r2, status=status, box=box, flow=X.copy(),
                           seed=getattr(sol, "seed", None), info=dict(M=M, dt=dt),
                           control_coef=ccoef)


@dataclass
class LipschitzProfile:
    per_step: np.ndarray      # NaN at skipped steps
    global_max: float


def lipschitz_profile(fld: DecouplingField, box=None, probes: int = 200,
                      seed: int = 0) -> LipschitzProfile:
    """Largest difference quotient |v(x) - v(x')| / |x - x'| per step.

    Probe pairs are drawn uniformly in ``box`` (a (lo, hi) pair of (d,)
    arrays) or, by default, in the 1-99 percentile envelope of each step's
    cloud. Coordinates with a degenerate envelope are held at its value.
    """
    rng = np.random.default_rng(seed)
    out = np.full(fld.Nt + 1, np.nan)
    for n in range(fld.Nt + 1):
        if fld.status[n] != "ok":
            continue
        lo, hi = (fld.box[n] if box is None else np.asarray(box, dtype=float).reshape(2, fld.d))
        if not np.any(hi > lo):
            continue
        a = lo + (hi - lo) * rng.random((probes, fld.d))
        b = lo + (hi - lo) * rng.random((probes, fld.d))
        dist = np.linalg.norm(a - b, axis=1)
        keep = dist > 0
        dv = np.linalg.norm(fld(n, a[keep]) - fld(n, b[keep]), axis=1)
        out[n] = float(np.max(dv / dist[keep]))
    finite = out[np.isfinite(out)]
    return LipschitzProfile(per_step=out, global_max=float(finite.max()) if finite.size else float("nan"))


def sup_at_origin(fld: DecouplingField) -> float:
    """sup over fitted steps of |v(t_n, 0)|."""
    vals = [np.linalg.norm(fld(n, np.zeros(fld.d))) for n in range(fld.Nt + 1)
            if fld.status[n] == "ok"]
    return float(max(vals)) if vals else float("nan")


# --------------------------------------------------------------------------
# feedback

def _check_feedback_spec(spec: ModelSpec, fld: DecouplingField):
    if spec.vol_depends_on_alpha:
        raise ModelError("feedback controls need a volatility that does not depend on alpha")
    if spec.d != fld.d:
        raise ValueError(f"field dimension {fld.d} does not match the model ({spec.d})")


def feedback_controls(spec: ModelSpec, grid: TimeGrid, fld: DecouplingField, n: int, x):
    """alpha_hat(t_n, x, mu_n, y) with mu_n the reference cloud and y the
    fitted adjoint value the scheme feeds to the control at step n."""
    tab = spec.dynamics.table(grid.times)
    x = np.asarray(x, dtype=float).reshape(-1, spec.d)
    y = fld.control_value(n, x)
    z = np.zeros((x.shape[0], spec.d, spec.m))
    return optimal_alpha(spec, tab, n, grid.times[n], x, fld.reference_cloud(n), y, z)


def simulate_feedback(spec: ModelSpec, grid: TimeGrid, fld: DecouplingField, x_init, dW, *,
                      groups: int = 1, law: str = "live", shift=None):
    """Euler paths under the feedback control of ``fld``.

    The M rows form ``groups`` equal blocks interacting through their own
    block mean (``law="live"``) or are independent copies driven by the
    reference flow (``law="reference"``). ``shift(n, x)`` is an optional
    common perturbation added to the feedback control. Returns (X, alpha).
    """
    _check_feedback_spec(spec, fld)
    if fld.Nt != grid.Nt:
        raise ValueError("field and grid have different step counts")
    if law not in ("live", "reference"):
        raise ValueError(f"unknown law {law!r}")

    def policy(n, x):
        a = feedback_controls(spec, grid, fld, n, x)
        return a if shift is None else a + shift(n, x)

    means = fld.flow.mean(axis=0) if law == "reference" else None
    return simulate_policy(spec, grid, policy, x_init, dW, groups=groups, law_mean=means)


@dataclass
class ReplayResult:
    J: float
    se: float
    states: StatePaths
    control: np.ndarray


def feedback_replay(spec: ModelSpec, grid: TimeGrid, fld: DecouplingField, M: int | None = None,
                    seed: int | None = None, *, first_stream: int | None = None) -> ReplayResult:
    """Cost of the feedback control on a fresh particle system.

    By default the replay uses M reference-sized particles with the field's
    seed and noise streams numbered after those of the reference solve, so
    its noise is independent of the fit.
    """
    M = fld.info["M"] if M is None else int(M)
    seed = (fld.seed if fld.seed is not None else 0) if seed is None else seed
    first = fld.info["M"] if first_stream is None else first_stream
    dW = brownian_increments(seed, M, grid, spec.m, first)
    x_init = _initial_states(fld.flow[:, 0], M, seed)
    X, A = simulate_feedback(spec, grid, fld, x_init, dW)
    states = StatePaths(X=X, dW=dW, seed=seed, first_stream=first)
    costs = cost_per_particle(spec, grid, states, A)
    return ReplayResult(J=float(costs.mean()), se=_se(costs), states=states, control=A)


def _initial_states(x0, M, seed):
    """The reference start point, or a resample of a genuine initial cloud."""
    if np.all(x0 == x0[0]):
        return np.broadcast_to(x0[0], (M, x0.shape[1])).copy()
    rng = np.random.default_rng([int(seed), 7])
    return x0[rng.integers(0, x0.shape[0], size=M)]


def slope_statistics(fields, steps):
    """Mean and standard error across independent fits of the affine parts.

    Returns a dict with arrays ``slope`` and ``slope_se`` of shape
    (len(steps), d, d) and ``intercept`` / ``intercept_se`` of shape
    (len(steps), d). The standard errors are those of the mean over fits.
    """
    fields = list(fields)
    if len(fields) < 2:
        raise ValueError("need at least two independent fits for a standard error")
    J = np.array([[f.affine_parts(n)[0] for n in steps] for f in fields])
    v = np.array([[f.affine_parts(n)[1] for n in steps] for f in fields])
    r = len(fields)
    return dict(slope=J.mean(axis=0), slope_se=J.std(axis=0, ddof=1) / np.sqrt(r),
                intercept=v.mean(axis=0), intercept_se=v.std(axis=0, ddof=1) / np.sqrt(r),
                reps=r)


def field_to_csv(fld: DecouplingField, path=None, header: str | None = None) -> str:
    """CSV with columns step, coef_index, value, r2.

    Coefficients refer to the standardised basis of each step: coefficient
    index p*d + j is the weight of feature p in component j. The feature
    list (constant, then monomials of increasing degree of
    u = (x - center) / scale) and the centre and scale of each step are
    written as ``#`` comment lines before the table.
    """
    buf = io.StringIO()
    if header:
        buf.write("# " + header.replace("\n", " ") + "\n")
    buf.write(f"# degree={fld.degree} d={fld.d}\n")
    for n in range(fld.Nt + 1):
        buf.write(f"# step={n} status={fld.status[n]} active={fld.active[n].tolist()} "
                  f"center={[repr(float(v)) for v in fld.center[n]]} "
                  f"scale={[repr(float(v)) for v in fld.scale[n]]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "coef_index", "value", "r2"])
    for n in range(fld.Nt + 1):
        for idx, val in enumerate(np.asarray(fld.coef[n]).ravel()):
            w.writerow([n, idx, repr(float(val)), repr(float(fld.r2[n]))])
    text = buf.getvalue()
    if path is not None:
        write_text_atomic(path, text)
    return text
