import json
import os

import pytest

from mkvfbsde.cli import EXPERIMENTS, MODELS, ConfigError, load_config, main, run

BASE = """
[model]
name = {model}
{params}

[grid]
Nt = {Nt}

[particles]
M = {M}

[continuation]
delta0 = 0.5

[run]
experiment = {experiment}
seed = {seed}
out = {out}
{extra}
"""


def write_config(tmp_path, name="run.ini", *, model="lq_benchmark", params="", Nt=8, M=100,
                 experiment="solve", seed=3, out=None, extra=""):
    out = out or str(tmp_path / "out")
    path = tmp_path / name
    path.write_text(BASE.format(model=model, params=params, Nt=Nt, M=M, experiment=experiment,
                                seed=seed, out=out, extra=extra))
    return str(path)


def read_csv_body(path):
    lines = open(path).read().splitlines()
    assert lines[0].startswith("# config=")
    return lines[0], lines[1:]


def test_zero_model_solve(tmp_path, capsys):
    cfg = write_config(tmp_path, model="zero", params="sigma0 = 0.3")
    assert main(["--config", cfg]) == 0
    doc = json.loads((tmp_path / "out" / "solve.json").read_text())
    assert doc["J"] == 0.0
    res = doc["residual"]
    assert max(res[k] for k in ("x_update", "y_update", "yhat", "terminal", "alpha_gradient")) <= 1e-14
    out = capsys.readouterr().out
    assert "J = 0" in out
    assert sorted(os.listdir(tmp_path / "out")) == ["moments.csv", "solve.json", "summary.txt"]


def test_artifacts_embed_config_and_seed(tmp_path):
    cfg = write_config(tmp_path, seed=11)
    assert main(["--config", cfg, "--quiet"]) == 0
    head, body = read_csv_body(tmp_path / "out" / "moments.csv")
    conf = json.loads(head[len("# config="):])
    assert conf["seed"] == 11 and conf["model"] == "lq_benchmark" and conf["M"] == 100
    assert body[0] == "step,t,mean_x0,var_x0,mean_y0,mean_alpha0"
    assert len(body) == 1 + 9
    assert json.loads((tmp_path / "out" / "solve.json").read_text())["config"]["seed"] == 11
    assert (tmp_path / "out" / "summary.txt").read_text().startswith("# config=")


def test_same_seed_gives_identical_csv(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["--config", cfg, "--quiet"]) == 0
    a = (out / "moments.csv").read_bytes()
    assert main(["--config", cfg, "--quiet"]) == 0
    assert (out / "moments.csv").read_bytes() == a
    assert main(["--config", cfg, "--quiet", "--seed", "4"]) == 0
    c = (out / "moments.csv").read_bytes()
    assert c != a
    assert json.loads(c.splitlines()[0][len(b"# config="):])["seed"] == 4


@pytest.mark.parametrize("kw", [dict(model="nope"), dict(Nt=0), dict(M=1), dict(experiment="fly"),
                                dict(extra="[run2]\n"), dict(params="", extra="[grid]\nT = -1\n")])
def test_config_errors_exit_two_without_output(tmp_path, capsys, kw):
    cfg = write_config(tmp_path, **kw)
    code = main(["--config", cfg])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config"
    assert not (tmp_path / "out").exists()


def test_bad_delta_and_unknown_key(tmp_path, capsys):
    path = tmp_path / "x.ini"
    path.write_text("[model]\nname = zero\n[grid]\nNt = 4\n[particles]\nM = 10\n"
                    "[continuation]\ndelta0 = 1.5\n")
    assert main(["--config", str(path)]) == 2
    path.write_text("[model]\nname = zero\n[grid]\nNt = 4\n[particles]\nM = 10\nparticles = 3\n")
    assert main(["--config", str(path)]) == 2
    assert main(["--config", str(tmp_path / "missing.ini")]) == 2
    errs = [json.loads(ln) for ln in capsys.readouterr().err.splitlines()]
    assert all(e["error"] == "config" and e["type"] == "ConfigError" for e in errs)


def test_oracle_requires_lq_model(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, model="zero", experiment="oracle"))


@pytest.mark.parametrize("params", ["r = -1.0", "wobble = 2.0"])
def test_bad_model_parameters_exit_three(tmp_path, capsys, params):
    cfg = write_config(tmp_path, model="lq_scalar", params=params)
    assert main(["--config", cfg]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "model"
    assert not (tmp_path / "out").exists()


def test_nonconvergence_exits_four(tmp_path, capsys):
    path = tmp_path / "nc.ini"
    path.write_text(open(write_config(tmp_path)).read()
                    .replace("delta0 = 0.5", "delta0 = 1.0\nmax_picard = 1"))
    assert main(["--config", str(path)]) == 4
    rec = json.loads(capsys.readouterr().err)
    assert rec["error"] == "nonconvergence" and rec["trace"]
    assert not (tmp_path / "out").exists()


def test_overrides_and_parsing(tmp_path):
    cfg = load_config(write_config(tmp_path, params="qbar = 2.0\nx0 = -1", extra="[chaos]\nNs = 2, 4\n"),
                      seed=9, experiment="chaos", out="elsewhere")
    assert (cfg.seed, cfg.experiment, cfg.out) == (9, "chaos", "elsewhere")
    assert cfg.params == {"qbar": 2.0, "x0": -1}
    assert cfg.options["chaos"]["Ns"] == [2, 4]
    assert set(EXPERIMENTS) == {"solve", "gradcheck", "oracle", "decouple", "chaos"}
    assert "lq_benchmark" in MODELS


def test_oracle_experiment(tmp_path):
    paths = run(load_config(write_config(tmp_path, experiment="oracle", Nt=10, M=300)), quiet=True)
    doc = json.loads(open(paths["oracle.json"]).read())
    assert doc["J_oracle"] == pytest.approx(0.8380254416607015, rel=1e-10)
    assert abs(doc["J_rel_error"]) < 0.1
    _, body = read_csv_body(paths["oracle_curves.csv"])
    assert body[0] == "step,t,eta,psi,oracle_mean,oracle_var,solver_mean,solver_var"
    assert len(body) == 12


def test_gradcheck_experiment(tmp_path):
    paths = run(load_config(write_config(tmp_path, experiment="gradcheck", Nt=10, M=200,
                                         extra="[gradcheck]\ndirections = 3\n")), quiet=True)
    _, body = read_csv_body(paths["gradcheck.csv"])
    assert body[0] == "direction,gateaux,central_difference,rel_error" and len(body) == 4
    assert json.loads(open(paths["gradcheck.json"]).read())["max_rel_error"] < 1e-2


def test_decouple_experiment(tmp_path):
    paths = run(load_config(write_config(tmp_path, experiment="decouple", Nt=10, M=300)), quiet=True)
    doc = json.loads(open(paths["decouple.json"]).read())
    assert doc["skipped_steps"] == [0] and doc["min_interior_r2"] >= 0.99
    assert "replay_J" in doc
    _, body = read_csv_body(paths["profile.csv"])
    assert body[0] == "step,t,status,r2,lipschitz" and len(body) == 12
    assert open(paths["field.csv"]).readline().startswith("# config=")


def test_chaos_experiment(tmp_path):
    extra = "[chaos]\nNs = 2, 4\nreps = 2\nplayers_per_rep = 8\nw2_reps = 4\n"
    paths = run(load_config(write_config(tmp_path, experiment="chaos", Nt=5, M=50, extra=extra)),
                quiet=True)
    doc = json.loads(open(paths["chaos.json"]).read())
    assert doc["meta"]["Ns"] == [2, 4] and doc["config"]["experiment"] == "chaos"
    assert open(paths["chaos.csv"]).readline().startswith("# config=")


def test_thread_limit_is_honoured(tmp_path, monkeypatch):
    monkeypatch.setenv("MKVFBSDE_THREADS", "1")
    cfg = write_config(tmp_path, model="zero")
    assert main(["--config", cfg, "--quiet"]) == 0
