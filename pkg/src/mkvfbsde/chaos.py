"""N-player systems built from a mean-field solution, and the gap sweep.

Two ways of handing the mean-field solution to N interacting players:

* distributed feedback: player i plays alpha_hat(t, U^i, mu_t, v(t, U^i)),
  where v is the fitted decoupling field and mu_t the reference flow, while
  the dynamics and costs see the live empirical measure of the N players;
* open loop: player i replays the control of reference particle i with the
  same Brownian increments, interacting through the live empirical measure.

Gap estimator. Every N-player path is paired with an independent copy of
the mean-field limit driven by the same noise (feedback mode: the same
feedback rule under the reference flow; open-loop mode: the reference
particle itself, with the reference law). The reported gap is the mean of
the per-player cost differences, an unbiased estimate of J^N - J whose
variance is far below that of J^N itself. Standard errors are batch means
over independent repetitions.

A repetition simulates a batch of independent N-player games with a common
budget of players, so small N are not starved of samples.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .decoupling import DecouplingField, _check_feedback_spec, fit_field, simulate_feedback
from .fbsde import ContinuationConfig, solve_mkv_fbsde
from .maxprinciple import (TimeGrid, _se, cost_per_particle, group_costs, simulate_policy,
                           stream_increments)
from .measure import chaos_rate, write_text_atomic
from .model import ModelSpec

__all__ = [
    "NPlayerRun",
    "ChaosReport",
    "simulate_nplayer_feedback",
    "simulate_nplayer_openloop",
    "equilibrium_gap_sweep",
    "w2sq_to_standard_normal",
    "loglog_slope",
]


@dataclass
class NPlayerRun:
    """A batch of ``games`` independent N-player games, rows game-major.

    ``costs`` are the players' own costs (live empirical law), ``copy_costs``
    those of the paired mean-field copies. ``J`` averages ``costs``; its
    standard error ``se`` uses game means, so with a single game it falls
    back to the spread across (correlated) players and is only indicative.
    """

    N: int
    games: int
    mode: str
    U: np.ndarray
    beta: np.ndarray
    costs: np.ndarray
    copy_paths: np.ndarray
    copy_costs: np.ndarray
    J: float
    se: float
    seed: int | None = None
    streams: np.ndarray | None = None

    @property
    def gap(self) -> float:
        """Paired estimate of J^N - J."""
        return float(np.mean(self.costs - self.copy_costs))

    @property
    def gap_se(self) -> float:
        return _batch_se(self.costs - self.copy_costs, self.games)

    @property
    def copy_msd(self) -> float:
        """mean_i max_n |U^i - copy^i|^2."""
        return float(np.mean(np.max(np.sum((self.U - self.copy_paths) ** 2, axis=2), axis=1)))


def _batch_se(values, games):
    values = np.asarray(values, dtype=float)
    if games > 1:
        return _se(values.reshape(games, -1).mean(axis=1))
    return _se(values)


def _game_stats(costs, games):
    return float(np.mean(costs)), _batch_se(costs, games)


def simulate_nplayer_feedback(spec: ModelSpec, grid: TimeGrid, N: int, fld: DecouplingField,
                              seed: int, *, games: int = 1, first_stream: int = 0,
                              streams=None, shift=None) -> NPlayerRun:
    """N coupled players using the distributed feedback of ``fld``.

    Player rows use the noise streams ``streams`` (default: consecutive from
    ``first_stream``). ``shift(n, x)`` perturbs the common feedback rule.
    """
    _check_feedback_spec(spec, fld)
    if N < 1 or games < 1:
        raise ValueError("N and games must be positive")
    rows = N * games
    if streams is None:
        streams = np.arange(first_stream, first_stream + rows)
    streams = np.asarray(streams, dtype=np.int64)
    if streams.size != rows:
        raise ValueError(f"need {rows} streams, got {streams.size}")
    dW = stream_increments(seed, streams, grid, spec.m)
    x0 = fld.flow[:, 0]
    if np.all(x0 == x0[0]):
        x_init = np.broadcast_to(x0[0], (rows, spec.d))
    else:
        x_init = x0[np.random.default_rng([int(seed), 11]).integers(0, x0.shape[0], rows)]
    U, beta = simulate_feedback(spec, grid, fld, x_init, dW, groups=games, shift=shift)
    C, Ca = simulate_feedback(spec, grid, fld, x_init, dW, law="reference", shift=shift)
    ref = [fld.reference_cloud(n) for n in range(grid.Nt + 1)]
    costs = group_costs(spec, grid, U, beta, games)
    copy_costs = group_costs(spec, grid, C, Ca, 1, clouds=ref)
    J, se = _game_stats(costs, games)
    return NPlayerRun(N=N, games=games, mode="feedback", U=U, beta=beta, costs=costs,
                      copy_paths=C, copy_costs=copy_costs, J=J, se=se, seed=seed, streams=streams)


def simulate_nplayer_openloop(spec: ModelSpec, grid: TimeGrid, N: int, reference, seed=None, *,
                              games: int = 1, players=None, ref_costs=None) -> NPlayerRun:
    """N players replaying reference particles' controls and noise.

    ``players`` selects the reference rows explicitly; otherwise ``seed``
    draws N * games distinct rows at random and ``seed=None`` takes the
    first ones. ``ref_costs`` caches the reference per-particle costs.
    """
    M = reference.X.shape[0]
    rows = N * games
    if players is None:
        if M < rows:
            raise ValueError(f"reference has {M} particles, fewer than the {rows} players")
        players = (np.arange(rows) if seed is None
                   else np.random.default_rng(int(seed)).choice(M, rows, replace=False))
    players = np.asarray(players, dtype=np.int64)
    if players.size != rows:
        raise ValueError(f"need {rows} player indices, got {players.size}")
    A = reference.alpha[players]
    dW = reference.dW[players]
    U, beta = simulate_policy(spec, grid, A, reference.X[players, 0], dW, groups=games)
    costs = group_costs(spec, grid, U, beta, games)
    if ref_costs is None:
        ref_costs = cost_per_particle(spec, grid, reference.states, reference.alpha)
    J, se = _game_stats(costs, games)
    return NPlayerRun(N=N, games=games, mode="openloop", U=U, beta=beta, costs=costs,
                      copy_paths=reference.X[players], copy_costs=ref_costs[players], J=J, se=se,
                      seed=seed, streams=players)


# --------------------------------------------------------------------------
# control experiment: empirical measures against a fixed Gaussian

def w2sq_to_standard_normal(sample) -> float:
    """Exact squared W2 between a 1-d empirical measure and N(0, 1).

    On each quantile cell ((i-1)/N, i/N) the empirical quantile is the i-th
    order statistic x_i, so the cell contributes
    x_i^2 / N - 2 x_i int q + int q^2 with q the normal quantile function.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = x.size
    u = np.arange(n + 1) / n
    z = ndtri(u)                                   # -inf, ..., +inf
    phi = norm.pdf(z)
    zphi = np.zeros_like(z)
    inner = np.isfinite(z)
    zphi[inner] = z[inner] * phi[inner]          # z phi(z) -> 0 in the tails
    int_q = phi[:-1] - phi[1:]
    int_q2 = np.diff(u) - (zphi[1:] - zphi[:-1])
    return float(max(np.sum(x * x / n - 2 * x * int_q + int_q2), 0.0))


def loglog_slope(N, values):
    """Least-squares slope of log(values) against log(N) with its standard error."""
    lx = np.log(np.asarray(N, dtype=float))
    v = np.abs(np.asarray(values, dtype=float))
    if lx.size < 2 or not np.all(np.isfinite(v) & (v > 0)):
        return float("nan"), float("nan")
    ly = np.log(v)
    A = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    if lx.size > 2:
        resid = ly - A @ coef
        s2 = resid @ resid / (lx.size - 2)
        se = float(np.sqrt(s2 * np.linalg.inv(A.T @ A)[1, 1]))
    else:
        se = float("nan")
    return float(coef[1]), se


# --------------------------------------------------------------------------
# sweep

@dataclass
class ChaosReport:
    records: list            # one dict per (N, mode, rep)
    summary: list            # one dict per (N, mode)
    slopes: dict
    w2_control: list
    meta: dict = field(default_factory=dict)

    def rows(self, mode: str) -> list:
        return [s for s in self.summary if s["mode"] == mode]

    def decreasing(self, mode: str = "feedback", k: float = 1.0) -> bool:
        """|gap| falls between every pair of consecutive N by more than k
        combined standard errors."""
        r = self.rows(mode)
        return all(abs(a["gap"]) - abs(b["gap"]) > k * np.hypot(a["gap_se"], b["gap_se"])
                   for a, b in zip(r, r[1:]))

    def reduction(self, mode: str = "feedback") -> float:
        """|gap| at the smallest N over |gap| at the largest N."""
        r = self.rows(mode)
        return abs(r[0]["gap"]) / abs(r[-1]["gap"])

    def to_csv(self, path=None, header: str | None = None) -> str:
        cols = ["N", "mode", "rep", "seed", "games", "J_N", "J_copy", "gap", "w2sq"]
        buf = io.StringIO()
        if header:
            buf.write("# " + header.replace("\n", " ") + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in self.records:
            w.writerow([_fmt(rec.get(c)) for c in cols])
        text = buf.getvalue()
        if path is not None:
            write_text_atomic(path, text)
        return text

    def to_json(self, path=None, extra: dict | None = None) -> str:
        doc = dict(meta=self.meta, summary=self.summary, slopes=self.slopes,
                   w2_control=self.w2_control)
        if extra:
            doc.update(extra)
        text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"
        if path is not None:
            write_text_atomic(path, text)
        return text


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def equilibrium_gap_sweep(spec: ModelSpec, grid: TimeGrid, Ns, reps: int = 8, seed: int = 0, *,
                          reference=None, fld: DecouplingField | None = None,
                          M_ref: int | None = None, players_per_rep: int = 1024,
                          cfg: ContinuationConfig | None = None,
                          modes=("feedback", "openloop"), w2_reps: int = 64) -> ChaosReport:
    """Gaps J^N - J for increasing N in both modes, with the W2 control run.

    Without a ``reference`` solution one is computed with ``M_ref`` particles
    (default: enough for the open-loop players of one repetition). Each
    repetition r uses the master seed ``seed + 1 + r`` for fresh player
    noise (feedback) or player selection (open loop).
    """
    Ns = [int(n) for n in Ns]
    if any(b <= a for a, b in zip(Ns, Ns[1:])) or Ns[0] < 1:
        raise ValueError("Ns must be positive and strictly increasing")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for mode in modes:
        if mode not in ("feedback", "openloop"):
            raise ValueError(f"unknown mode {mode!r}")
    games = {N: max(1, players_per_rep // N) for N in Ns}
    if reference is None:
        M_ref = M_ref or max(N * games[N] for N in Ns)
        reference = solve_mkv_fbsde(spec, grid, M_ref, cfg, seed=seed)
    if fld is None and "feedback" in modes:
        fld = fit_field(reference)
    J_ref = reference.diagnostics.get("J")
    ref_costs = cost_per_particle(spec, grid, reference.states, reference.alpha)
    records, summary = [], []
    for mode in modes:
        for N in Ns:
            per_rep = []
            for r in range(reps):
                s = seed + 1 + r
                if mode == "feedback":
                    run = simulate_nplayer_feedback(spec, grid, N, fld, s, games=games[N])
                else:
                    run = simulate_nplayer_openloop(spec, grid, N, reference, s, games=games[N],
                                                    ref_costs=ref_costs)
                rec = dict(N=N, mode=mode, rep=r, seed=s, games=games[N], J_N=run.J,
                           J_copy=float(np.mean(run.copy_costs)), gap=run.gap,
                           copy_msd=run.copy_msd)
                records.append(rec)
                per_rep.append(rec)
            gaps = np.array([p["gap"] for p in per_rep])
            jn = np.array([p["J_N"] for p in per_rep])
            msd = np.array([p["copy_msd"] for p in per_rep])
            summary.append(dict(N=N, mode=mode, games=games[N], reps=reps, J_N=float(jn.mean()),
                                J_N_se=_se(jn), J_ref=J_ref, gap=float(gaps.mean()),
                                gap_se=_se(gaps), ell_N=chaos_rate(N, spec.d),
                                N_copy_msd=float(N * msd.mean())))
    slopes = {}
    for mode in modes:
        r = [s for s in summary if s["mode"] == mode]
        slopes[mode] = dict(zip(("slope", "slope_se"),
                                loglog_slope([s["N"] for s in r], [s["gap"] for s in r])))
    w2 = []
    rng = np.random.default_rng([int(seed), 2])
    for N in Ns:
        vals = np.array([w2sq_to_standard_normal(rng.standard_normal(N)) for _ in range(w2_reps)])
        w2.append(dict(N=N, w2sq=float(vals.mean()), se=_se(vals)))
        records.extend(dict(N=N, mode="w2_gaussian", rep=i, seed=seed, w2sq=float(v))
                       for i, v in enumerate(vals))
    slopes["w2_gaussian"] = dict(zip(("slope", "slope_se"),
                                     loglog_slope(Ns, [w["w2sq"] for w in w2])))
    meta = dict(Ns=Ns, reps=reps, seed=seed, rep_seeds=[seed + 1 + r for r in range(reps)],
                players_per_rep=players_per_rep, M_ref=int(reference.X.shape[0]),
                J_ref=J_ref, d=spec.d, w2_reps=w2_reps, grid=asdict(grid))
    return ChaosReport(records=records, summary=summary, slopes=slopes, w2_control=w2, meta=meta)
