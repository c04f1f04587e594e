"""Coupled mean-field FBSDE by continuation in the coupling strength.

For gamma in [0, 1] and an input I = (Ib, Isig, If, Ig) the discrete system
E(gamma, xi, I) reads, with C(theta) the coefficients evaluated along a
candidate solution theta = (X, Y, Yhat, Z, alpha):

    X_{n+1} = X_n + (gamma Cb_n + Ib_n) dt + (gamma Csig_n + Isig_n) dW_n,  X_0 = xi
    Y_T     = gamma Cg + Ig
    Yhat_n  = P_n[Y_{n+1}],  Z_n = P_n[Y_{n+1} dW_n'] / dt
    Y_n     = Yhat_n + (gamma Cf_n + If_n) dt
    alpha_n = argmin_a H(t_n, X_n, cloud_n, Yhat_n, Z_n, a)

where Cb, Csig are the drift and volatility, Cf = dxH + cloud average of
dmuH and Cg = dxg + cloud average of dmug. At gamma = 0 the system is
decoupled and solved by one forward and one backward sweep. For gamma > 0
the Picard map

    Phi(theta) = solution of E(gamma - eta, xi, I + eta C(theta))

has the solution of E(gamma, xi, I) as fixed point, and each inner solve is
itself done by the same construction one level down.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonConvergenceError, StateBlowupError
from .hamiltonian import adjoint_driver, alpha_gradient, terminal_adjoint
from .maxprinciple import (AdjointPaths, StatePaths, TimeGrid, _se, backward_sweep,
                           brownian_increments, cost_per_particle)
from .measure import ParticleCloud, write_text_atomic
from .model import ModelSpec
from .regression import Projector

__all__ = [
    "InputProcess",
    "FbsdeSolution",
    "ContinuationConfig",
    "s_norm",
    "s_distance",
    "i_norm",
    "coefficient_input",
    "solve_decoupled",
    "picard_map",
    "solve_E",
    "solve_mkv_fbsde",
    "residual",
]


@dataclass
class InputProcess:
    """Exogenous input of E(gamma, xi, I); arrays indexed by particle then step."""

    Ib: np.ndarray      # (M, Nt, d)
    Isig: np.ndarray    # (M, Nt, d, m)
    If: np.ndarray      # (M, Nt, d)
    Ig: np.ndarray      # (M, d)

    @classmethod
    def zeros(cls, M, Nt, d, m) -> "InputProcess":
        return cls(np.zeros((M, Nt, d)), np.zeros((M, Nt, d, m)), np.zeros((M, Nt, d)),
                   np.zeros((M, d)))

    def plus(self, other: "InputProcess", scale: float = 1.0) -> "InputProcess":
        return InputProcess(self.Ib + scale * other.Ib, self.Isig + scale * other.Isig,
                            self.If + scale * other.If, self.Ig + scale * other.Ig)


@dataclass
class FbsdeSolution:
    X: np.ndarray
    Y: np.ndarray
    Yhat: np.ndarray
    Z: np.ndarray
    alpha: np.ndarray
    dW: np.ndarray
    gamma: float
    seed: int | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def states(self) -> StatePaths:
        return StatePaths(X=self.X, dW=self.dW, seed=self.seed)

    @property
    def adjoint(self) -> AdjointPaths:
        return AdjointPaths(Y=self.Y, Z=self.Z, Yhat=self.Yhat,
                            y0_se=self.diagnostics.get("y0_se", float("nan")))

    @property
    def control(self) -> np.ndarray:
        return self.alpha

    @property
    def J(self) -> float:
        return self.diagnostics.get("J", float("nan"))

    def blend(self, other: "FbsdeSolution", w: float) -> "FbsdeSolution":
        """(1 - w) self + w other, array by array."""
        if w == 1.0:
            return other
        mix = lambda a, b: (1.0 - w) * a + w * b  # noqa: E731
        return FbsdeSolution(mix(self.X, other.X), mix(self.Y, other.Y), mix(self.Yhat, other.Yhat),
                             mix(self.Z, other.Z), mix(self.alpha, other.alpha), self.dW,
                             other.gamma, self.seed)


@dataclass
class ContinuationConfig:
    delta0: float = 0.1
    picard_tol: float = 1e-8
    max_picard: int = 60
    relax: float = 1.0
    min_delta: float = 1e-3
    inner_factor: float = 0.25
    degree: int = 1

    def __post_init__(self):
        if not 0 < self.delta0 <= 1:
            raise ValueError(f"delta0 must lie in (0, 1], got {self.delta0}")
        if not 0 < self.relax <= 1:
            raise ValueError(f"relax must lie in (0, 1], got {self.relax}")
        if self.picard_tol <= 0 or self.max_picard < 1:
            raise ValueError("picard_tol must be positive and max_picard >= 1")


# --------------------------------------------------------------------------
# norms

def _s_norm_arrays(X, Y, Z, A, dt) -> float:
    sx = np.max(np.sum(X * X, axis=2), axis=1)
    sy = np.max(np.sum(Y * Y, axis=2), axis=1)
    iz = np.sum(Z * Z, axis=(1, 2, 3)) * dt
    ia = np.sum(A * A, axis=(1, 2)) * dt
    return float(np.sqrt(np.mean(sx + sy + iz + ia)))


def _dt(sol) -> float:
    return sol.diagnostics.get("dt") or 1.0 / sol.alpha.shape[1]


def s_norm(sol: FbsdeSolution, dt: float | None = None) -> float:
    """sqrt(mean_i[max_n |X|^2 + max_n |Y|^2 + sum_n (|Z|^2 + |alpha|^2) dt])."""
    dt = _dt(sol) if dt is None else dt
    return _s_norm_arrays(sol.X, sol.Y, sol.Z, sol.alpha, dt)


def s_distance(a: FbsdeSolution, b: FbsdeSolution, dt: float | None = None) -> float:
    dt = _dt(a) if dt is None else dt
    return _s_norm_arrays(a.X - b.X, a.Y - b.Y, a.Z - b.Z, a.alpha - b.alpha, dt)


def i_norm(I: InputProcess, dt: float) -> float:
    """sqrt(mean_i[|Ig|^2 + sum_n (|Ib|^2 + |Isig|^2 + |If|^2) dt])."""
    s = (np.sum(I.Ib ** 2, axis=(1, 2)) + np.sum(I.Isig ** 2, axis=(1, 2, 3))
         + np.sum(I.If ** 2, axis=(1, 2))) * dt + np.sum(I.Ig ** 2, axis=1)
    return float(np.sqrt(np.mean(s)))


# --------------------------------------------------------------------------
# building blocks

def coefficient_input(spec: ModelSpec, grid: TimeGrid, theta: FbsdeSolution) -> InputProcess:
    """C(theta): drift, volatility, adjoint driver and terminal value along theta."""
    tab = spec.dynamics.table(grid.times)
    X, A = theta.X, theta.alpha
    M, Nt = A.shape[0], grid.Nt
    Cb = tab.drift_path(X[:, :-1], A)
    Cs = tab.vol_path(X[:, :-1], A)
    Cf = np.empty((M, Nt, spec.d))
    for n, t in enumerate(grid.times[:-1]):
        Xn = X[:, n]
        Cf[:, n] = adjoint_driver(spec, tab, n, t, Xn, ParticleCloud(Xn), theta.Yhat[:, n],
                                  theta.Z[:, n], A[:, n])
    Cg = terminal_adjoint(spec, X[:, -1], ParticleCloud(X[:, -1]))
    return InputProcess(Cb, Cs, Cf, Cg)


def _initial(spec, M, xi):
    if xi is None:
        return np.broadcast_to(spec.x0, (M, spec.d)).copy()
    x = xi.points if isinstance(xi, ParticleCloud) else np.asarray(xi, dtype=float)
    x = x.reshape(-1, spec.d)
    if x.shape[0] != M:
        raise ValueError(f"initial cloud has {x.shape[0]} particles, expected {M}")
    return x


def _noise(spec, grid, M, seed, noise):
    if noise is not None:
        return noise
    return brownian_increments(seed, M, grid, spec.m)


def solve_decoupled(spec: ModelSpec, grid: TimeGrid, xi, I: InputProcess, seed=None, *,
                    noise=None, degree: int = 1) -> FbsdeSolution:
    """The gamma = 0 system: one forward pass, one backward regression pass."""
    M = I.Ig.shape[0]
    dW = _noise(spec, grid, M, seed, noise)
    X = np.empty((M, grid.Nt + 1, spec.d))
    X[:, 0] = _initial(spec, M, xi)
    incr = I.Ib * grid.dt + np.einsum("nkij,nkj->nki", I.Isig, dW)
    X[:, 1:] = X[:, :1] + np.cumsum(incr, axis=1)
    bad = ~np.all(np.isfinite(X), axis=(0, 2))
    if np.any(bad):
        raise StateBlowupError(int(np.argmax(bad)))
    Y, Yhat, Z, A, _ = backward_sweep(spec, grid, X, dW, driver_input=I.If, terminal=I.Ig,
                                      coupled=False, degree=degree)
    return FbsdeSolution(X, Y, Yhat, Z, A, dW, 0.0, seed, diagnostics=dict(dt=grid.dt))


class _NotConverged(Exception):
    pass


class _Continuation:
    """Recursive solver for E(gamma, xi, I) on fixed noise.

    Inner solves are warm-started from the current outer iterate and solved
    to a tolerance tied to the outer progress; the base solution of every
    level of the zero-input chain is computed once.
    """

    def __init__(self, spec, grid, xi, dW, cfg: ContinuationConfig, seed=None):
        self.spec, self.grid, self.xi, self.dW, self.cfg, self.seed = spec, grid, xi, dW, cfg, seed
        self.M = dW.shape[0]
        self.base = {}
        self.levels = []       # per-level summary records
        self.n_decoupled = 0

    def decoupled(self, I):
        self.n_decoupled += 1
        sol = solve_decoupled(self.spec, self.grid, self.xi, I, noise=self.dW, degree=self.cfg.degree)
        sol.seed = self.seed
        return sol

    def phi(self, gm, eta, I, theta, tol):
        """One Picard application, inner level solved to relative ``tol``."""
        Ip = I.plus(coefficient_input(self.spec, self.grid, theta), eta)
        return self.solve(gm, Ip, init=theta, tol=tol)

    def solve(self, gamma, I, init=None, tol=None, top=False):
        cfg = self.cfg
        tol = cfg.picard_tol if tol is None else tol
        gamma = round(float(gamma), 12)
        if gamma <= 0.0:
            return self.decoupled(I)
        delta = cfg.delta0
        while True:
            step = min(delta, gamma)
            gm = round(gamma - step, 12)
            theta = init
            if theta is None:
                theta = self._base(gm, I, top)
            try:
                return self._picard(gamma, gm, step, I, theta, tol)
            except _NotConverged as exc:
                delta = step / 2
                init = None
                if delta < cfg.min_delta:
                    raise NonConvergenceError(
                        f"continuation step fell below {cfg.min_delta} at gamma={gamma}",
                        trace=exc.args[0]) from None

    def _base(self, gm, I, top):
        if not top:
            return self.solve(gm, I)
        if gm not in self.base:
            self.base[gm] = self.solve(gm, I, top=True)
        return self.base[gm]

    def _picard(self, gamma, gm, eta, I, theta, tol):
        cfg = self.cfg
        dt = self.grid.dt
        trace = []
        rel = None
        # inner levels are solved below the outer tolerance, otherwise their
        # error dominates the fixed-point defect of the returned iterate
        floor = cfg.inner_factor * cfg.picard_tol
        for k in range(1, cfg.max_picard + 1):
            inner = max(floor, cfg.inner_factor * (1.0 if rel is None else rel))
            new = self.phi(gm, eta, I, theta, inner)
            new = theta.blend(new, cfg.relax)
            change = s_distance(new, theta, dt)
            size = s_norm(new, dt)
            rel = change / (1.0 + size)
            trace.append(rel)
            theta = new
            if not np.isfinite(rel) or rel > 1e6:
                raise _NotConverged(trace)
            if rel <= tol:
                theta.gamma = gamma
                self.levels.append(dict(gamma=gamma, eta=eta, iterations=k, last_change=rel))
                return theta
            if k >= 4 and trace[-1] > trace[-2] > trace[-3] > trace[-4]:
                raise _NotConverged(trace)
        raise _NotConverged(trace)


def picard_map(spec, grid, gamma, eta, xi, I, theta_in, seed=None, *, cfg=None, noise=None):
    """Solution of E(gamma, xi, I + eta C(theta_in)).

    The inner Picard iteration is warm-started from ``theta_in`` and solved
    to ``inner_factor * picard_tol``, as in the continuation solver itself.
    """
    if gamma + eta > 1 + 1e-12:
        raise ValueError("gamma + eta must not exceed 1")
    cfg = cfg or ContinuationConfig()
    dW = _noise(spec, grid, I.Ig.shape[0], seed, noise if noise is not None else theta_in.dW)
    eng = _Continuation(spec, grid, xi, dW, cfg, seed)
    Ip = I.plus(coefficient_input(spec, grid, theta_in), eta)
    return eng.solve(gamma, Ip, init=theta_in, tol=cfg.inner_factor * cfg.picard_tol, top=True)


def solve_E(spec, grid, gamma, xi, I, cfg=None, seed=None, *, noise=None, init=None):
    """Solution of E(gamma, xi, I). ``init`` replaces the default start
    (the solution one level down) of the outermost Picard iteration."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    cfg = cfg or ContinuationConfig()
    M = I.Ig.shape[0]
    dW = _noise(spec, grid, M, seed, noise)
    eng = _Continuation(spec, grid, xi, dW, cfg, seed)
    t0 = time.perf_counter()
    sol = eng.solve(gamma, I, init=init, top=True)
    sol.diagnostics = dict(dt=grid.dt, gamma=gamma, levels=eng.levels,
                           decoupled_solves=eng.n_decoupled,
                           wall_time=time.perf_counter() - t0, config=asdict(cfg))
    return sol


def zero_paths(spec, grid, M, dW) -> FbsdeSolution:
    """All-zero candidate solution (used as an alternative Picard start)."""
    Nt = grid.Nt
    return FbsdeSolution(np.zeros((M, Nt + 1, spec.d)), np.zeros((M, Nt + 1, spec.d)),
                         np.zeros((M, Nt, spec.d)), np.zeros((M, Nt, spec.d, spec.m)),
                         np.zeros((M, Nt, spec.k)), dW, 0.0, diagnostics=dict(dt=grid.dt))


def solve_mkv_fbsde(spec: ModelSpec, grid: TimeGrid, M: int, cfg=None, seed: int = 0, *,
                    xi=None, init: str = "continuation") -> FbsdeSolution:
    """E(1, xi, 0): the optimality system of the mean-field control problem.

    ``init="zero"`` starts the outermost Picard iteration from zero paths
    instead of the solution one continuation level down. The diagnostics
    record the cost J of the returned control with its standard error, the
    mean of Y_0 with its standard error, and the continuation history.
    """
    if init not in ("continuation", "zero"):
        raise ValueError(f"unknown init {init!r}")
    cfg = cfg or ContinuationConfig()
    dW = brownian_increments(seed, M, grid, spec.m)
    I0 = InputProcess.zeros(M, grid.Nt, spec.d, spec.m)
    start = zero_paths(spec, grid, M, dW) if init == "zero" else None
    sol = solve_E(spec, grid, 1.0, xi, I0, cfg, seed, noise=dW, init=start)
    sol.seed = seed
    _record_outputs(spec, grid, sol)
    return sol


def _record_outputs(spec, grid, sol):
    costs = cost_per_particle(spec, grid, sol.states, sol.alpha)
    zeta = sol.Y[:, -1] + grid.dt * np.sum(_drivers(spec, grid, sol), axis=1)
    sol.diagnostics.update(J=float(costs.mean()), J_se=_se(costs),
                           y0=sol.Y[:, 0].mean(axis=0).tolist(), y0_se=_se(zeta))


def _drivers(spec, grid, sol):
    return coefficient_input(spec, grid, sol).If


# --------------------------------------------------------------------------
# a-posteriori check

@dataclass
class ResidualReport:
    x_update: float
    y_update: float
    yhat: float
    terminal: float
    alpha_gradient: float
    scale: float
    tol: float

    @property
    def flagged(self) -> dict:
        lim = self.tol * self.scale
        return {k: v > lim for k, v in asdict(self).items()
                if k not in ("scale", "tol")}

    @property
    def ok(self) -> bool:
        return not any(self.flagged.values())

    def as_dict(self) -> dict:
        d = asdict(self)
        d["flagged"] = self.flagged
        return d


def residual(spec: ModelSpec, grid: TimeGrid, sol: FbsdeSolution, *, degree: int = 1,
             tol: float = 1e-6) -> ResidualReport:
    """Max particle-wise defects of the discrete gamma = 1 system.

    ``tol`` sets the flagging threshold, relative to the solution scale
    1 + max|X| + max|Y|.
    """
    tab = spec.dynamics.table(grid.times)
    X, Y, Yh, Z, A, dW = sol.X, sol.Y, sol.Yhat, sol.Z, sol.alpha, sol.dW
    dt = grid.dt
    dx = dy = dyh = da = 0.0
    for n, t in enumerate(grid.times[:-1]):
        Xn = X[:, n]
        mbar = Xn.mean(axis=0)
        cl = ParticleCloud(Xn)
        pred = Xn + tab.drift(n, Xn, mbar, A[:, n]) * dt + tab.vol_dw(n, Xn, mbar, A[:, n], dW[:, n])
        dx = max(dx, float(np.max(np.abs(X[:, n + 1] - pred))))
        proj = Projector(Xn, degree)
        dyh = max(dyh, float(np.max(np.abs(proj.project(Y[:, n + 1]) - Yh[:, n]))))
        drv = adjoint_driver(spec, tab, n, t, Xn, cl, Yh[:, n], Z[:, n], A[:, n])
        dy = max(dy, float(np.max(np.abs(Y[:, n] - Yh[:, n] - dt * drv))))
        da = max(da, float(np.max(np.abs(alpha_gradient(spec, tab, n, t, Xn, cl, Yh[:, n], Z[:, n], A[:, n])))))
    term = terminal_adjoint(spec, X[:, -1], ParticleCloud(X[:, -1]))
    dterm = float(np.max(np.abs(Y[:, -1] - term)))
    scale = 1.0 + float(np.max(np.abs(X))) + float(np.max(np.abs(Y)))
    return ResidualReport(dx, dy, dyh, dterm, da, scale, tol)


def diagnostics_json(sol: FbsdeSolution, extra: dict | None = None, path=None) -> str:
    """JSON record of a solver run; written atomically when ``path`` is given."""
    rec = dict(sol.diagnostics)
    rec.update(extra or {})
    text = json.dumps(rec, indent=2, sort_keys=True, default=_json_default)
    if path is not None:
        write_text_atomic(path, text + "\n")
    return text


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")
