"""Stochastic maximum principle for a fixed control, on a particle system.

The continuous problem is discretised by the Euler scheme with a left-point
rule for the running cost; the law is the empirical law of the M particles.
The adjoint pair (Y, Z) is computed by least-squares Monte Carlo backwards in
time. At step n the Hamiltonian is evaluated at the regression predictor
``Yhat_n = P_n[Y_{n+1}]`` together with ``Z_n = P_n[Y_{n+1} dW_n'] / dt``:

    Y_n = Yhat_n + dt * (dxH + cloud average of dmuH)(Yhat_n, Z_n, alpha_n)

This explicit scheme is the exact adjoint of the discretised cost, so the
Gateaux derivative, the duality identity and the first-order condition hold
for the discrete problem itself (up to regression error), not only in the
limit dt -> 0. An optional corrector sweep re-evaluates the driver at Y_n.

Shapes: controls are (M, Nt, k), states (M, Nt+1, d), increments
(M, Nt, m), Y (M, Nt+1, d), Yhat (M, Nt, d), Z (M, Nt, d, m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DivergenceError, StateBlowupError
from .hamiltonian import adjoint_driver, alpha_gradient, optimal_alpha, terminal_adjoint
from .measure import ParticleCloud
from .model import ModelSpec, pair_dmu_f_dot
from .regression import Projector

__all__ = [
    "TimeGrid",
    "StatePaths",
    "AdjointPaths",
    "brownian_increments",
    "stream_increments",
    "simulate_state",
    "cost",
    "cost_per_particle",
    "simulate_policy",
    "group_costs",
    "solve_adjoint",
    "gateaux",
    "probe_direction",
    "hamiltonian_alpha_gradient",
    "gradient_descent_solve",
    "variation_process",
    "variation_check",
    "duality_check",
    "sufficiency_check",
]


@dataclass(frozen=True)
class TimeGrid:
    T: float
    Nt: int

    def __post_init__(self):
        if self.Nt < 1:
            raise ValueError(f"Nt must be >= 1, got {self.Nt}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.Nt + 1) * self.dt


@dataclass
class StatePaths:
    X: np.ndarray
    dW: np.ndarray
    seed: int | None = None
    first_stream: int = 0

    @property
    def M(self) -> int:
        return self.X.shape[0]

    def cloud(self, n: int) -> ParticleCloud:
        return ParticleCloud(self.X[:, n])


@dataclass
class AdjointPaths:
    Y: np.ndarray
    Z: np.ndarray
    Yhat: np.ndarray
    y0_se: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def y0_mean(self) -> np.ndarray:
        return self.Y[:, 0].mean(axis=0)


# --------------------------------------------------------------------------
# noise

def _stream(seed: int, stream: int, Nt: int, m: int, sq: float) -> np.ndarray:
    # one counter-based stream per particle: particle i's noise does not
    # depend on how many particles are simulated
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, stream, 0]))
    return gen.standard_normal((Nt, m)) * sq


@lru_cache(maxsize=16)
def _increments(seed: int, M: int, Nt: int, m: int, dt: float, first: int) -> np.ndarray:
    out = np.empty((M, Nt, m))
    sq = np.sqrt(dt)
    for i in range(M):
        out[i] = _stream(seed, first + i, Nt, m, sq)
    out.setflags(write=False)
    return out


def stream_increments(seed: int, streams, grid: TimeGrid, m: int) -> np.ndarray:
    """Increments (len(streams), Nt, m) for an arbitrary list of stream ids."""
    if seed is None:
        raise ValueError("a master seed is required")
    sq = np.sqrt(grid.dt)
    streams = [int(s) for s in streams]
    out = np.empty((len(streams), grid.Nt, m))
    for i, s in enumerate(streams):
        out[i] = _stream(int(seed), s, grid.Nt, m, sq)
    return out


def brownian_increments(seed: int, M: int, grid: TimeGrid, m: int, first: int = 0) -> np.ndarray:
    """Brownian increments (M, Nt, m) from per-particle Philox streams.

    Stream ``first + i`` feeds particle i, so increments are reproducible per
    particle index for a given master seed.
    """
    if seed is None:
        raise ValueError("a master seed is required")
    return _increments(int(seed), int(M), int(grid.Nt), int(m), float(grid.dt), int(first))


def _control_array(spec, grid, control) -> np.ndarray:
    a = np.asarray(control, dtype=float)
    if a.ndim == 2 and spec.k == 1:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[1] != grid.Nt or a.shape[2] != spec.k:
        raise ValueError(f"control must be (M, {grid.Nt}, {spec.k}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("control contains non-finite values")
    return a


# --------------------------------------------------------------------------
# forward

def simulate_state(spec: ModelSpec, grid: TimeGrid, control, seed=None, *, noise=None,
                   xi=None, first_stream: int = 0) -> StatePaths:
    """Euler scheme for the particle system driven by ``control``.

    The law enters through the cloud mean at each step. Noise comes from
    ``noise`` (M, Nt, m) when given, otherwise from ``seed``. ``xi`` is an
    optional initial cloud (M, d); the default starts every particle at x0.
    """
    a = _control_array(spec, grid, control)
    M = a.shape[0]
    dW = brownian_increments(seed, M, grid, spec.m, first_stream) if noise is None else np.asarray(noise)
    if dW.shape != (M, grid.Nt, spec.m):
        raise ValueError(f"noise must be ({M}, {grid.Nt}, {spec.m}), got {dW.shape}")
    tab = spec.dynamics.table(grid.times)
    X = np.empty((M, grid.Nt + 1, spec.d))
    X[:, 0] = spec.x0 if xi is None else np.asarray(xi, dtype=float).reshape(M, spec.d)
    dt = grid.dt
    for n in range(grid.Nt):
        Xn = X[:, n]
        mbar = Xn.mean(axis=0)
        X[:, n + 1] = Xn + tab.drift(n, Xn, mbar, a[:, n]) * dt + tab.vol_dw(n, Xn, mbar, a[:, n], dW[:, n])
        if not np.all(np.isfinite(X[:, n + 1])):
            raise StateBlowupError(n + 1)
    return StatePaths(X=X, dW=dW, seed=seed, first_stream=first_stream)


def cost_per_particle(spec: ModelSpec, grid: TimeGrid, states: StatePaths, control) -> np.ndarray:
    """Per-particle cost sum_n f(t_n, X_n, cloud_n, a_n) dt + g(X_T, cloud_T)."""
    a = _control_array(spec, grid, control)
    X = states.X
    out = np.zeros(X.shape[0])
    for n, t in enumerate(grid.times[:-1]):
        out += spec.cost.f(t, X[:, n], ParticleCloud(X[:, n]), a[:, n]) * grid.dt
    out += spec.cost.g(X[:, -1], ParticleCloud(X[:, -1]))
    return out


def simulate_policy(spec: ModelSpec, grid: TimeGrid, policy, x_init, dW, *, groups: int = 1,
                    law_mean=None):
    """Euler paths for M rows split into ``groups`` non-interacting blocks.

    ``policy`` is a control array (M, Nt, k) or a callable (n, X_n) -> (M, k)
    evaluated on the current states. Rows interact through the mean of their
    own block unless ``law_mean`` (Nt+1, d) supplies a fixed flow of means,
    in which case the rows are independent copies. Returns (X, alpha).
    """
    M = dW.shape[0]
    if M % groups:
        raise ValueError(f"{M} rows cannot be split into {groups} equal groups")
    size = M // groups
    tab = spec.dynamics.table(grid.times)
    X = np.empty((M, grid.Nt + 1, spec.d))
    X[:, 0] = np.asarray(x_init, dtype=float).reshape(-1, spec.d)
    A = np.empty((M, grid.Nt, spec.k)) if callable(policy) else _control_array(spec, grid, policy)
    dt = grid.dt
    for n in range(grid.Nt):
        Xn = X[:, n]
        if callable(policy):
            A[:, n] = policy(n, Xn)
        if law_mean is None:
            mbar = np.repeat(Xn.reshape(groups, size, spec.d).mean(axis=1), size, axis=0)
        else:
            mbar = np.broadcast_to(np.asarray(law_mean[n], dtype=float), Xn.shape)
        drift = tab.b0[n] + mbar @ tab.b1[n].T + Xn @ tab.b2[n].T + A[:, n] @ tab.b3[n].T
        if tab.vol_const:
            noise = dW[:, n] @ tab.s0[n].T
        else:
            vol = (tab.s0[n] + np.einsum("ijl,nl->nij", tab.s1[n], mbar)
                   + np.einsum("ijl,nl->nij", tab.s2[n], Xn)
                   + np.einsum("ijl,nl->nij", tab.s3[n], A[:, n]))
            noise = np.einsum("nij,nj->ni", vol, dW[:, n])
        X[:, n + 1] = Xn + drift * dt + noise
        if not np.all(np.isfinite(X[:, n + 1])):
            raise StateBlowupError(n + 1)
    return X, A


def group_costs(spec: ModelSpec, grid: TimeGrid, X, A, groups: int = 1, clouds=None) -> np.ndarray:
    """Per-row cost with the law given by each block's own cloud.

    ``clouds`` (a sequence of Nt+1 clouds) replaces the block clouds by a
    fixed flow of laws.
    """
    M = X.shape[0]
    size = M // groups
    out = np.zeros(M)
    for j in range(groups):
        rows = slice(j * size, (j + 1) * size)
        for n, t in enumerate(grid.times[:-1]):
            law = clouds[n] if clouds is not None else ParticleCloud(X[rows, n])
            out[rows] += spec.cost.f(t, X[rows, n], law, A[rows, n]) * grid.dt
        law = clouds[-1] if clouds is not None else ParticleCloud(X[rows, -1])
        out[rows] += spec.cost.g(X[rows, -1], law)
    return out


def cost(spec: ModelSpec, grid: TimeGrid, states: StatePaths, control) -> float:
    """Monte Carlo estimate of the objective."""
    return float(np.mean(cost_per_particle(spec, grid, states, control)))


# --------------------------------------------------------------------------
# backward

def backward_sweep(spec, grid, X, dW, *, control=None, driver_input=None, terminal=None,
                   coupled=True, degree=1, corrector=False):
    """Least-squares Monte Carlo sweep shared by the adjoint and FBSDE solvers.

    With ``control`` given, the Hamiltonian is evaluated at that control;
    otherwise the control is the minimiser of H at (X_n, Yhat_n, Z_n) and is
    returned. ``coupled=False`` drops the Hamiltonian driver so that only
    ``driver_input`` (M, Nt, d) and ``terminal`` (M, d) drive the equation.
    Returns (Y, Yhat, Z, alpha, zeta) where zeta is the pathwise sum
    Y_T + sum_n driver_n dt, whose mean equals mean(Y_0).
    """
    M, Np1, d = X.shape
    Nt = Np1 - 1
    m = dW.shape[2]
    dt = grid.dt
    tab = spec.dynamics.table(grid.times)
    times = grid.times
    # work time-major so that every per-step slice is contiguous
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2))
    dWt = np.ascontiguousarray(dW.transpose(1, 0, 2))
    drv_in = None if driver_input is None else np.ascontiguousarray(driver_input.transpose(1, 0, 2))
    Y = np.empty((Nt + 1, M, d))
    Yhat = np.empty((Nt, M, d))
    Z = np.empty((Nt, M, d, m))
    if control is None:
        A = np.empty((Nt, M, spec.k))
    else:
        A = np.ascontiguousarray(np.asarray(control, dtype=float).transpose(1, 0, 2))
    if terminal is None:
        terminal = np.zeros((M, d))
    if coupled:
        terminal = terminal + terminal_adjoint(spec, Xt[-1], ParticleCloud(Xt[-1]))
    Y[-1] = terminal
    zeta = np.array(terminal, dtype=float)
    target = np.empty((M, d + d * m))
    for n in range(Nt - 1, -1, -1):
        Xn = Xt[n]
        proj = Projector(Xn, degree)
        Yn1 = Y[n + 1]
        target[:, :d] = Yn1
        target[:, d:] = (Yn1[:, :, None] * dWt[n, :, None, :]).reshape(M, d * m)
        fit = proj.project(target)
        yh = fit[:, :d]
        z = fit[:, d:].reshape(M, d, m) / dt
        cloud = ParticleCloud(Xn)
        if control is None:
            A[n] = optimal_alpha(spec, tab, n, times[n], Xn, cloud, yh, z)
        drv = np.zeros((M, d)) if drv_in is None else drv_in[n].copy()
        if coupled:
            drv += adjoint_driver(spec, tab, n, times[n], Xn, cloud, yh, z, A[n])
        yn = yh + dt * drv
        if corrector and coupled:
            drv = (np.zeros((M, d)) if drv_in is None else drv_in[n]) + \
                adjoint_driver(spec, tab, n, times[n], Xn, cloud, yn, z, A[n])
            yn = yh + dt * drv
        Yhat[n] = yh
        Z[n] = z
        Y[n] = yn
        zeta += dt * drv

    def back(a):
        return np.ascontiguousarray(np.swapaxes(a, 0, 1))

    A = back(A) if control is None else control
    return back(Y), back(Yhat), back(Z), A, zeta


def _se(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    return float(np.max(v.std(axis=0, ddof=1)) / np.sqrt(v.shape[0])) if v.shape[0] > 1 else float("nan")


def solve_adjoint(spec: ModelSpec, grid: TimeGrid, states: StatePaths, control, *,
                  degree: int = 1, corrector: bool = False) -> AdjointPaths:
    """Adjoint pair (Y, Z) for a fixed control by backward regression."""
    a = _control_array(spec, grid, control)
    Y, Yhat, Z, _, zeta = backward_sweep(spec, grid, states.X, states.dW, control=a,
                                         degree=degree, corrector=corrector)
    return AdjointPaths(Y=Y, Z=Z, Yhat=Yhat, y0_se=_se(zeta),
                        info=dict(degree=degree, corrector=corrector))


def hamiltonian_alpha_gradient(spec, grid, states, adjoint, control) -> np.ndarray:
    """dH/da at every particle and step, (M, Nt, k)."""
    a = _control_array(spec, grid, control)
    tab = spec.dynamics.table(grid.times)
    out = np.empty_like(a)
    for n, t in enumerate(grid.times[:-1]):
        Xn = states.X[:, n]
        out[:, n] = alpha_gradient(spec, tab, n, t, Xn, ParticleCloud(Xn), adjoint.Yhat[:, n],
                                   adjoint.Z[:, n], a[:, n])
    return out


def gateaux(spec, grid, states, adjoint, control, direction) -> float:
    """(1/M) sum_i sum_n dH/da . beta dt."""
    beta = _control_array(spec, grid, direction)
    g = hamiltonian_alpha_gradient(spec, grid, states, adjoint, control)
    return float(np.sum(g * beta) * grid.dt / beta.shape[0])


def probe_direction(grid: TimeGrid, states: StatePaths, k: int, rng) -> np.ndarray:
    """Random adapted direction beta_n = c(t_n) + C(t_n) X_n for derivative checks.

    The coefficients mix a constant, a sine and a linear mode in time. The
    direction is affine in the current state, so it lies in the span of the
    degree-1 regression basis and the sample residuals of the adjoint
    projection cancel against it; weights outside that span (say independent
    per-particle factors) add O(M^-1/2) sampling error to the Gateaux estimate.
    """
    X = states.X[:, :-1]
    d = X.shape[2]
    tt = grid.times[:-1] / grid.T
    modes = np.stack([np.ones_like(tt), np.sin(np.pi * tt), tt], axis=1)    # (Nt, 3)
    w = rng.standard_normal((3, k, 1 + d))
    c = np.einsum("nj,jkl->nkl", modes, w)                                  # (Nt, k, 1 + d)
    return c[None, :, :, 0] + np.einsum("nkl,inl->ink", c[:, :, 1:], X)


# --------------------------------------------------------------------------
# gradient descent

@dataclass
class DescentResult:
    control: np.ndarray
    history: list
    states: StatePaths
    adjoint: AdjointPaths


def gradient_descent_solve(spec: ModelSpec, grid: TimeGrid, M: int, seed: int, rho: float,
                           iters: int, *, alpha0=None, degree: int = 1, patience: int = 5,
                           rise_tol: float = 1e-6, noise=None) -> DescentResult:
    """Steepest descent alpha <- alpha - rho dH/da with frozen noise.

    The history holds the cost before each update and after the last one.
    ``patience`` consecutive cost increases raise :class:`DivergenceError`.
    Increases below ``rise_tol`` relative do not count: the regression
    adjoint makes dH/da an inexact gradient of the sample cost, so the cost
    may creep up by tiny amounts as the iteration settles.
    """
    if not rho > 0:
        raise ValueError("step rho must be positive")
    a = np.zeros((M, grid.Nt, spec.k)) if alpha0 is None else _control_array(spec, grid, alpha0).copy()
    dW = brownian_increments(seed, M, grid, spec.m) if noise is None else noise
    history = []
    rises = 0
    for it in range(iters + 1):
        st = simulate_state(spec, grid, a, noise=dW)
        J = cost(spec, grid, st, a)
        if history and J - history[-1] > rise_tol * (1.0 + abs(history[-1])):
            rises += 1
            if rises >= patience:
                raise DivergenceError(f"cost increased {patience} times in a row (J={J:.6g})")
        else:
            rises = 0
        history.append(J)
        adj = solve_adjoint(spec, grid, st, a, degree=degree)
        if it == iters:
            break
        a = a - rho * hamiltonian_alpha_gradient(spec, grid, st, adj, a)
    return DescentResult(control=a, history=history, states=st, adjoint=adj)


# --------------------------------------------------------------------------
# variation process, duality, sufficiency

def variation_process(spec, grid, states: StatePaths, direction) -> np.ndarray:
    """Euler scheme for the variation V driven by the direction beta."""
    beta = _control_array(spec, grid, direction)
    tab = spec.dynamics.table(grid.times)
    M = states.M
    V = np.zeros((M, grid.Nt + 1, spec.d))
    for n in range(grid.Nt):
        Vn = V[:, n]
        vbar = Vn.mean(axis=0)
        V[:, n + 1] = (Vn + tab.drift_lin(n, Vn, vbar, beta[:, n]) * grid.dt
                       + tab.vol_dw_lin(n, Vn, vbar, beta[:, n], states.dW[:, n]))
    return V


def variation_check(spec, grid, control, direction, eps_list, seed=0, *, noise=None) -> dict:
    """sup |(X^eps - X)/eps - V| for each eps, on shared noise."""
    a = _control_array(spec, grid, control)
    beta = _control_array(spec, grid, direction)
    st = simulate_state(spec, grid, a, seed, noise=noise)
    V = variation_process(spec, grid, st, beta)
    errors = {}
    for eps in eps_list:
        if not 0 < eps <= 1:
            raise ValueError(f"eps must lie in (0, 1], got {eps}")
        st_e = simulate_state(spec, grid, a + eps * beta, noise=st.dW)
        errors[float(eps)] = float(np.max(np.abs((st_e.X - st.X) / eps - V)))
    return dict(errors=errors, sup_V=float(np.max(np.abs(V))))


@dataclass
class DualityResult:
    lhs: float
    rhs: float
    se: float

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs


def duality_check(spec, grid, states, adjoint, control, direction) -> DualityResult:
    """Both sides of E[Y_T . V_T] = E int (Y.db_a beta + Z:dsigma_a beta
    - dxf.V - E~[dmuf(X~) . V~]) dt on the same particles."""
    a = _control_array(spec, grid, control)
    beta = _control_array(spec, grid, direction)
    tab = spec.dynamics.table(grid.times)
    V = variation_process(spec, grid, states, beta)
    X = states.X
    lhs_i = np.sum(adjoint.Y[:, -1] * V[:, -1], axis=1)
    rhs_i = np.zeros(X.shape[0])
    for n, t in enumerate(grid.times[:-1]):
        Xn, cl = X[:, n], ParticleCloud(X[:, n])
        term = np.sum(adjoint.Yhat[:, n] * (beta[:, n] @ tab.b3[n].T), axis=1)
        if not tab.s3_zero:
            s3b = np.einsum("ijl,nl->nij", tab.s3[n], beta[:, n])
            term += np.sum(adjoint.Z[:, n] * s3b, axis=(1, 2))
        term -= np.sum(spec.cost.dx_f(t, Xn, cl, a[:, n]) * V[:, n], axis=1)
        term -= pair_dmu_f_dot(spec.cost, t, Xn, cl, a[:, n], V[:, n])
        rhs_i += term * grid.dt
    return DualityResult(lhs=float(lhs_i.mean()), rhs=float(rhs_i.mean()), se=_se(lhs_i - rhs_i))


def sufficiency_check(spec, grid, states, control, n_perturb=10, scale=0.1, seed=0) -> dict:
    """Cost at ``control`` against randomly perturbed controls on the same noise.

    Perturbations are smooth random functions of time plus a random multiple
    of the reference state, so they stay adapted. Returns the base cost and,
    per perturbation, the cost difference and its standard error.
    """
    a = _control_array(spec, grid, control)
    rng = np.random.default_rng(seed)
    base_i = cost_per_particle(spec, grid, states, a)
    t = grid.times[:-1] / grid.T
    amp = scale * (1.0 + float(np.std(a)))
    out = []
    for _ in range(n_perturb):
        c = rng.standard_normal((4, spec.k))
        basis = np.stack([np.cos(np.pi * j * t) for j in range(4)], axis=1)
        det = basis @ c
        gain = rng.standard_normal((spec.k, spec.d)) * 0.5
        pert = amp * (det[None, :, :] + states.X[:, :-1] @ gain.T)
        ap = a + pert
        st = simulate_state(spec, grid, ap, noise=states.dW)
        diff = cost_per_particle(spec, grid, st, ap) - base_i
        out.append(dict(delta=float(diff.mean()), se=_se(diff)))
    return dict(base=float(base_i.mean()), base_se=_se(base_i), perturbations=out)
