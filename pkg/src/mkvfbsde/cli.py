"""Batch front end: ``mkvfbsde --config run.ini``.

The configuration is an INI file (see README for the full schema)::

    [model]
    name = lq_benchmark        # lq_scalar, lq_benchmark, zero, quadratic_moment,
                               # pairwise_attraction
    qbar = 1.0                 # any further key is a model parameter

    [grid]
    Nt = 50                    # T defaults to the model horizon

    [particles]
    M = 2000

    [continuation]
    delta0 = 0.1
    picard_tol = 1e-8
    max_picard = 60
    omega = 1.0

    [run]
    experiment = solve         # solve, gradcheck, oracle, decouple, chaos
    seed = 0
    out = results

Experiment-specific keys live in sections named after the experiment
(``[gradcheck]``, ``[decouple]``, ``[chaos]``). Every artifact carries the
resolved configuration and seed. On failure the process exits nonzero and
prints a JSON error record to stderr; nothing is written to the output
directory.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ModelError, MkvError, NonConvergenceError
from .measure import write_text_atomic

__all__ = ["RunConfig", "load_config", "run", "main", "EXPERIMENTS", "MODELS"]

EXPERIMENTS = ("solve", "gradcheck", "oracle", "decouple", "chaos")
MODELS = ("lq_scalar", "lq_benchmark", "zero", "quadratic_moment", "pairwise_attraction")
THREADS_ENV = "MKVFBSDE_THREADS"

EXIT_CONFIG, EXIT_MODEL, EXIT_SOLVER, EXIT_OTHER = 2, 3, 4, 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str
    params: dict
    Nt: int
    M: int
    T: float | None = None
    delta0: float = 0.1
    picard_tol: float = 1e-8
    max_picard: int = 60
    omega: float = 1.0
    inner_factor: float = 0.25
    degree: int = 1
    experiment: str = "solve"
    seed: int = 0
    out: str = "results"
    options: dict = field(default_factory=dict)

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose from {', '.join(EXPERIMENTS)}")
        if self.Nt < 1:
            raise ConfigError("Nt must be >= 1")
        if self.M < 2:
            raise ConfigError("M must be >= 2")
        if not 0 < self.delta0 <= 1:
            raise ConfigError("delta0 must lie in (0, 1]")
        if not 0 < self.omega <= 1:
            raise ConfigError("omega must lie in (0, 1]")
        if self.picard_tol <= 0 or self.max_picard < 1:
            raise ConfigError("picard_tol must be positive and max_picard >= 1")
        if not 0 < self.inner_factor <= 1:
            raise ConfigError("inner_factor must lie in (0, 1]")
        if not 0 <= self.degree <= 3:
            raise ConfigError("degree must lie in 0..3")
        if self.T is not None and not self.T > 0:
            raise ConfigError("T must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.experiment == "oracle" and self.model not in ("lq_scalar", "lq_benchmark"):
            raise ConfigError("the oracle experiment needs an LQ model")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


def _number(text: str):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if "," in text:
        return [_number(p) for p in text.split(",") if p.strip()]
    return text


_INTS = {"Nt", "M", "max_picard", "degree", "seed"}
_FLOATS = {"T", "delta0", "picard_tol", "omega", "inner_factor"}


def load_config(path, *, seed=None, experiment=None, out=None) -> RunConfig:
    """Parse and validate an INI config; command-line overrides win."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str            # keep key case (Nt, M, T)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    stray = set(cp.sections()) - {"model", "grid", "particles", "continuation", "run", *EXPERIMENTS}
    if stray:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(stray))}")
    if not cp.has_section("model") or "name" not in cp["model"]:
        raise ConfigError("config needs [model] with a name")
    params = {k: _number(v) for k, v in cp["model"].items() if k != "name"}
    flat = {}
    for sec in ("grid", "particles", "continuation", "run"):
        if cp.has_section(sec):
            for k, v in cp[sec].items():
                flat[k] = v
    unknown = set(flat) - _INTS - _FLOATS - {"experiment", "out"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kw = {}
    try:
        for k, v in flat.items():
            kw[k] = int(v) if k in _INTS else float(v) if k in _FLOATS else v.strip()
    except ValueError as exc:
        raise ConfigError(f"bad numeric value: {exc}") from None
    for need in ("Nt", "M"):
        if need not in kw:
            raise ConfigError(f"config is missing {need}")
    if seed is not None:
        kw["seed"] = seed
    if experiment is not None:
        kw["experiment"] = experiment
    if out is not None:
        kw["out"] = out
    options = {}
    for sec in EXPERIMENTS:
        if cp.has_section(sec):
            options[sec] = {k: _number(v) for k, v in cp[sec].items()}
    cfg = RunConfig(model=cp["model"]["name"].strip(), params=params, options=options, **kw)
    return cfg.validate()


# --------------------------------------------------------------------------
# model and solver construction

def build_model(cfg: RunConfig):
    from . import model as mdl
    params = dict(cfg.params)
    if cfg.T is not None:
        params["T"] = cfg.T
    makers = {"lq_scalar": mdl.make_lq_scalar, "lq_benchmark": mdl.lq_benchmark,
              "zero": mdl.make_zero_model, "quadratic_moment": mdl.make_quadratic_moment,
              "pairwise_attraction": mdl.make_pairwise_attraction}
    try:
        return makers[cfg.model](**params)
    except TypeError as exc:
        raise ModelError(f"bad parameters for model {cfg.model!r}: {exc}") from None


def _continuation(cfg: RunConfig):
    from .fbsde import ContinuationConfig
    return ContinuationConfig(delta0=cfg.delta0, picard_tol=cfg.picard_tol,
                              max_picard=cfg.max_picard, relax=cfg.omega,
                              inner_factor=cfg.inner_factor, degree=cfg.degree)


def _grid(spec, cfg):
    from .maxprinciple import TimeGrid
    return TimeGrid(spec.T, cfg.Nt)


def _csv(header_cfg: str, columns, rows) -> str:
    lines = [f"# config={header_cfg}", ",".join(columns)]
    for r in rows:
        lines.append(",".join(_cell(v) for v in r))
    return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# --------------------------------------------------------------------------
# experiments: each returns ({file name: text}, summary lines)

def _solve(spec, grid, cfg):
    from .fbsde import solve_mkv_fbsde
    return solve_mkv_fbsde(spec, grid, cfg.M, _continuation(cfg), seed=cfg.seed)


def _moments_rows(grid, sol):
    rows = []
    for n, t in enumerate(grid.times):
        X, Y = sol.X[:, n], sol.Y[:, n]
        a = sol.alpha[:, min(n, grid.Nt - 1)]
        rows.append([n, t, *X.mean(axis=0), *X.var(axis=0), *Y.mean(axis=0), *a.mean(axis=0)])
    return rows


def _moment_columns(spec):
    d, k = spec.d, spec.k
    return (["step", "t"] + [f"mean_x{j}" for j in range(d)] + [f"var_x{j}" for j in range(d)]
            + [f"mean_y{j}" for j in range(d)] + [f"mean_alpha{j}" for j in range(k)])


def exp_solve(spec, grid, cfg, hdr):
    from .fbsde import residual
    sol = _solve(spec, grid, cfg)
    res = residual(spec, grid, sol, degree=cfg.degree)
    dg = sol.diagnostics
    worst = max(res.x_update, res.y_update, res.yhat, res.terminal, res.alpha_gradient)
    doc = dict(config=cfg.as_dict(), J=dg["J"], J_se=dg["J_se"], y0=dg["y0"], y0_se=dg["y0_se"],
               residual=res.as_dict(), decoupled_solves=dg["decoupled_solves"],
               levels=dg["levels"], wall_time=dg["wall_time"])
    files = {"solve.json": _json(doc),
             "moments.csv": _csv(hdr, _moment_columns(spec), _moments_rows(grid, sol))}
    lines = [f"J = {dg['J']:.6g} (se {dg['J_se']:.2g})",
             f"E[Y_0] = {', '.join(f'{v:.6g}' for v in dg['y0'])} (se {dg['y0_se']:.2g})",
             f"max residual = {worst:.3g} ({'ok' if res.ok else 'FLAGGED'})",
             f"decoupled solves = {dg['decoupled_solves']}"]
    return files, lines


def exp_gradcheck(spec, grid, cfg, hdr):
    from .maxprinciple import (brownian_increments, cost, gateaux, probe_direction,
                               simulate_state, solve_adjoint)
    opt = cfg.options.get("gradcheck", {})
    n_dir = int(opt.get("directions", 5))
    eps = float(opt.get("eps", 1e-4))
    noise = brownian_increments(cfg.seed, cfg.M, grid, spec.m)
    alpha = np.zeros((cfg.M, grid.Nt, spec.k))
    states = simulate_state(spec, grid, alpha, noise=noise)
    adj = solve_adjoint(spec, grid, states, alpha, degree=cfg.degree)
    rng = np.random.default_rng([cfg.seed, 3])
    rows = []
    for j in range(n_dir):
        beta = probe_direction(grid, states, spec.k, rng)
        g = gateaux(spec, grid, states, adj, alpha, beta)
        jp = cost(spec, grid, simulate_state(spec, grid, alpha + eps * beta, noise=noise), alpha + eps * beta)
        jm = cost(spec, grid, simulate_state(spec, grid, alpha - eps * beta, noise=noise), alpha - eps * beta)
        fd = (jp - jm) / (2 * eps)
        rel = abs(g - fd) / max(abs(fd), 1e-300)
        rows.append([j, g, fd, rel])
    files = {"gradcheck.csv": _csv(hdr, ["direction", "gateaux", "central_difference", "rel_error"], rows),
             "gradcheck.json": _json(dict(config=cfg.as_dict(), eps=eps,
                                          max_rel_error=max(r[3] for r in rows)))}
    lines = [f"direction {r[0]}: gateaux {r[1]:.8g}  central {r[2]:.8g}  rel err {r[3]:.2e}" for r in rows]
    return files, lines


def exp_oracle(spec, grid, cfg, hdr):
    from .riccati import lq_oracle
    sol = _solve(spec, grid, cfg)
    o = lq_oracle(spec)
    dg = sol.diagnostics
    rel = (dg["J"] - o.J) / abs(o.J)
    y0 = dg["y0"][0]
    rows = []
    for n, t in enumerate(grid.times):
        X = sol.X[:, n, 0]
        rows.append([n, t, float(o.eta(t)), float(o.psi(t)), float(o.mean(t)), float(o.var(t)),
                     X.mean(), X.var()])
    doc = dict(config=cfg.as_dict(), J_solver=dg["J"], J_se=dg["J_se"], J_oracle=o.J,
               J_rel_error=rel, y0_solver=y0, y0_se=dg["y0_se"], y0_oracle=o.y0,
               y0_z=(y0 - o.y0) / dg["y0_se"], eta0=float(o.eta(0.0)), psi0=float(o.psi(0.0)))
    files = {"oracle.json": _json(doc),
             "oracle_curves.csv": _csv(hdr, ["step", "t", "eta", "psi", "oracle_mean", "oracle_var",
                                             "solver_mean", "solver_var"], rows)}
    lines = [f"solver J = {dg['J']:.8g} (se {dg['J_se']:.2g})",
             f"oracle J = {o.J:.8g}",
             f"relative error = {rel:.3%}",
             f"E[Y_0] = {y0:.6g} vs oracle {o.y0:.6g} ({doc['y0_z']:+.2f} se)"]
    return files, lines


def exp_decouple(spec, grid, cfg, hdr):
    from .decoupling import feedback_replay, field_to_csv, fit_field, lipschitz_profile, sup_at_origin
    opt = cfg.options.get("decouple", {})
    degree = int(opt.get("degree", cfg.degree))
    probes = int(opt.get("probes", 200))
    sol = _solve(spec, grid, cfg)
    fld = fit_field(sol, degree)
    prof = lipschitz_profile(fld, probes=probes, seed=cfg.seed)
    sup0 = sup_at_origin(fld)
    doc = dict(config=cfg.as_dict(), J=sol.diagnostics["J"], J_se=sol.diagnostics["J_se"],
               lipschitz_max=prof.global_max, sup_v_at_origin=sup0, skipped_steps=fld.skipped,
               min_interior_r2=float(np.nanmin(fld.r2[1:-1])) if grid.Nt > 1 else None)
    lines = [f"min interior R^2 = {doc['min_interior_r2']}",
             f"Lipschitz estimate (global max) = {prof.global_max:.6g}",
             f"sup_t |v(t, 0)| = {sup0:.6g}",
             f"rank-deficient steps: {fld.skipped}"]
    if not spec.vol_depends_on_alpha:
        rp = feedback_replay(spec, grid, fld)
        doc.update(replay_J=rp.J, replay_se=rp.se)
        lines.append(f"feedback replay J = {rp.J:.6g} (se {rp.se:.2g}) vs J = {sol.diagnostics['J']:.6g}")
    rows = [[n, t, fld.status[n], fld.r2[n], prof.per_step[n]] for n, t in enumerate(grid.times)]
    files = {"field.csv": field_to_csv(fld, header=f"config={hdr}"),
             "profile.csv": _csv(hdr, ["step", "t", "status", "r2", "lipschitz"], rows),
             "decouple.json": _json(doc)}
    return files, lines


def exp_chaos(spec, grid, cfg, hdr):
    from .chaos import equilibrium_gap_sweep
    opt = cfg.options.get("chaos", {})
    Ns = opt.get("Ns", [4, 16, 64, 256])
    Ns = [int(n) for n in (Ns if isinstance(Ns, list) else [Ns])]
    rep = equilibrium_gap_sweep(spec, grid, Ns, reps=int(opt.get("reps", 8)), seed=cfg.seed,
                                M_ref=cfg.M, players_per_rep=int(opt.get("players_per_rep", 1024)),
                                cfg=_continuation(cfg), w2_reps=int(opt.get("w2_reps", 64)))
    files = {"chaos.csv": rep.to_csv(header=f"config={hdr}"),
             "chaos.json": rep.to_json(extra=dict(config=cfg.as_dict()))}
    lines = [f"N={s['N']:>5d} {s['mode']:>9s}  J^N={s['J_N']:.6g}  gap={s['gap']:+.3e} "
             f"(se {s['gap_se']:.1e})  l_N={s['ell_N']:.3f}" for s in rep.summary]
    lines += [f"log-log slope [{k}] = {v['slope']:.3f} (se {v['slope_se']:.2g})"
              for k, v in rep.slopes.items()]
    return files, lines


_RUNNERS = dict(solve=exp_solve, gradcheck=exp_gradcheck, oracle=exp_oracle,
                decouple=exp_decouple, chaos=exp_chaos)


def run(cfg: RunConfig, quiet: bool = False) -> dict:
    """Run one experiment and write its artifacts; returns {name: path}."""
    spec = build_model(cfg)
    grid = _grid(spec, cfg)
    hdr = json.dumps(cfg.as_dict(), sort_keys=True, separators=(",", ":"))
    t0 = time.perf_counter()
    files, lines = _RUNNERS[cfg.experiment](spec, grid, cfg, hdr)
    head = [f"experiment {cfg.experiment} on {cfg.model} (seed {cfg.seed}, M {cfg.M}, Nt {cfg.Nt})"]
    tail = [f"wall time {time.perf_counter() - t0:.1f} s"]
    summary = "\n".join(head + lines + tail) + "\n"
    files["summary.txt"] = f"# config={hdr}\n" + summary
    written = {}
    for name, text in files.items():
        path = os.path.join(cfg.out, name)
        write_text_atomic(path, text)
        written[name] = path
    if not quiet:
        sys.stdout.write(summary)
    return written


def _thread_limit():
    """Cap BLAS/OpenMP pools when MKVFBSDE_THREADS is set."""
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _error(kind: str, exc: BaseException, code: int, extra=None) -> int:
    rec = dict(error=kind, message=str(exc), type=type(exc).__name__)
    if extra:
        rec.update(extra)
    sys.stderr.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mkvfbsde",
                                 description="Mean-field FBSDE solver and diagnostics.")
    ap.add_argument("--config", required=True, help="INI configuration file")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--experiment", choices=EXPERIMENTS, help="experiment (overrides the config)")
    ap.add_argument("--quiet", action="store_true", help="do not print the summary")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, experiment=args.experiment, out=args.out)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    try:
        with _thread_limit():
            run(cfg, quiet=args.quiet)
    except ModelError as exc:
        return _error("model", exc, EXIT_MODEL)
    except NonConvergenceError as exc:
        return _error("nonconvergence", exc, EXIT_SOLVER, dict(trace=list(exc.trace or [])))
    except (MkvError, ArithmeticError, ValueError, OSError) as exc:
        return _error("runtime", exc, EXIT_OTHER)
    return 0


if __name__ == "__main__":
    sys.exit(main())
