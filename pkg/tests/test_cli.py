import json
import os
import pathlib

import pytest

from mvscale.cli import main
from mvscale.config import parse_config
from mvscale.errors import ConfigError
from mvscale.sim import default_workers

ROOT = pathlib.Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

MINIMAL = """
[model]
name = "linear"
"""


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL, "probe")
    assert cfg.model_name == "linear"
    assert cfg.sim["seed"] == 0x5EED
    assert cfg.sim["epsilon"] == 0.01
    assert cfg.experiment == {"samples": 1000}
    assert cfg.output["directory"] == "mvscale-out"


def test_negative_epsilon_is_named():
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL + "[sim]\nepsilon = -1.0\n", "simulate")
    assert any(e.startswith("sim.epsilon") for e in err.value.errors)


def test_scale_condition_warning():
    text = MINIMAL + "[sim]\nepsilon = 0.05\ndelta = 0.1\n"
    with pytest.warns(UserWarning, match="scale condition"):
        cfg = parse_config(text, "rate")
    assert cfg.warnings


def test_no_warning_outside_ldp_runs(recwarn):
    parse_config(MINIMAL + "[sim]\nepsilon = 0.05\ndelta = 0.1\n", "simulate")
    assert not [w for w in recwarn if "scale" in str(w.message)]


def test_all_errors_reported_with_location():
    text = """
[model]
name = "linear"
colour = "red"
[model.params]
a1 = "x"
zz = 1.0
[sim]
particles = 1.5
bogus = 1
[experiment]
target = "far"
"""
    with pytest.raises(ConfigError) as err:
        parse_config(text, "rate")
    msgs = err.value.errors
    for loc in ("model.colour", "model.params.a1", "model.params.zz", "sim.particles", "sim.bogus", "experiment.target"):
        assert any(m.startswith(loc) for m in msgs), loc


def test_missing_model_and_subcommand():
    with pytest.raises(ConfigError) as err:
        parse_config("[sim]\n")
    msgs = err.value.errors
    assert any(m.startswith("model.name") for m in msgs)
    assert any(m.startswith("experiment.name") for m in msgs)


def test_subcommand_from_config():
    cfg = parse_config(MINIMAL + '[experiment]\nname = "rate"\ntarget = 2.5\n')
    assert cfg.subcommand == "rate" and cfg.experiment["target"] == 2.5


def test_syntax_error():
    with pytest.raises(ConfigError):
        parse_config("[model\n", "probe")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_committed_configs_parse(path):
    cfg = parse_config(path.read_text(), path.stem)
    assert cfg.subcommand == path.stem


def run_cli(args, tmp_path, name="out"):
    out = tmp_path / name
    status = main(args + ["--out", str(out)])
    return status, out


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_probe_run(tmp_path):
    status, out = run_cli(["probe", "--config", str(CONFIGS / "probe.toml")], tmp_path)
    assert status == 0
    lines = (out / "probe.csv").read_text().splitlines()
    assert lines[0] == "quantity,value,threshold,pass"
    name, value, _, ok = lines[1].split(",")
    assert name == "gamma_est" and abs(float(value) - 2.0) < 1e-12 and ok == "pass"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0x5EED and manifest["status"] == "pass" and manifest["error"] is None
    assert manifest["config"]["model"]["name"] == "linear"
    assert manifest["version"].startswith("0.1.0")


def test_clt_acceptance_config_variance_row(tmp_path):
    status, out = run_cli(["clt", "--config", str(CONFIGS / "clt.toml")], tmp_path)
    rows = [line.split(",") for line in (out / "clt.csv").read_text().splitlines()]
    assert rows[0] == ["epsilon", "statistic", "value", "std_error", "oracle", "pass"]
    var = [r for r in rows if r[1] == "variance" and r[0] == "0.005"]
    assert var and var[0][5] == "pass"
    assert status in (0, 1)


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["bogus"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_config_error_exits_2(tmp_path, capsys):
    status, _ = run_cli(["probe", "--config", write(tmp_path, MINIMAL + "[sim]\nepsilon = -1.0\n")], tmp_path)
    assert status == 2
    assert "sim.epsilon" in capsys.readouterr().err


def test_module_error_goes_to_manifest(tmp_path):
    text = MINIMAL + "[experiment]\npoints = [[1.0, 1.0]]\nstep = 5.0\nreplicas = 2\n"
    status, out = run_cli(["average", "--config", write(tmp_path, text)], tmp_path)
    assert status == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["error"]["type"] == "AssumptionViolation"
    assert manifest["status"] == "fail"


SCHEMAS = {
    "probe": {"probe.csv": "quantity,value,threshold,pass"},
    "simulate": {"simulate.csv": "time,replica,statistic,value"},
    "average": {"average.csv": "quantity,coordinate,value,std_error"},
    "poisson": {"poisson.csv": "quantity,coordinate,value,std_error"},
    "rate": {
        "rate.csv": "quantity,value",
        "rate_trace.csv": "rho,iterations,grad_norm,energy,residual",
        "rate_control.csv": "interval,t_start,channel,hdot",
    },
    "controlled": {"controlled.csv": "delta,epsilon,distance,std_error"},
}

SMALL = {
    "probe": "[experiment]\nsamples = 200\n",
    "simulate": "[sim]\nepsilon = 0.05\nparticles = 5\nreplicas = 2\n",
    "average": "[experiment]\nreplicas = 20\n",
    "poisson": "[experiment]\nreplicas = 50\ntheta_replicas = 20\ntheta_samples = 8\n",
    "rate": "[experiment]\ntarget = 2.0\ngrid_k = 16\n",
    "controlled": "[sim]\nparticles = 5\nreplicas = 2\n[experiment]\ndelta_list = [0.3, 0.2]\n",
}


@pytest.mark.parametrize("sub", sorted(SCHEMAS))
def test_schema_and_byte_identical_reruns(sub, tmp_path):
    cfg = write(tmp_path, MINIMAL + SMALL[sub])
    _, a = run_cli([sub, "--config", cfg], tmp_path, "a")
    _, b = run_cli([sub, "--config", cfg], tmp_path, "b")
    files = dict(SCHEMAS[sub], **{"summary.csv": "check,value,threshold,pass"})
    for name, header in files.items():
        text = (a / name).read_text()
        assert text.splitlines()[0] == header
        assert text == (b / name).read_text()


def test_rate_flags_override(tmp_path):
    status, out = run_cli(["rate", "--config", write(tmp_path, MINIMAL), "--target", "1.8", "--grid-k", "16", "--tol", "1e-3"], tmp_path)
    assert status == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["experiment"]["target"] == 1.8
    assert manifest["config"]["experiment"]["grid_k"] == 16


def test_controlled_flags_override(tmp_path):
    text = MINIMAL + "[sim]\nparticles = 5\nreplicas = 2\n"
    _, out = run_cli(["controlled", "--config", write(tmp_path, text), "--delta-list", "0.3,0.2", "--eps-rule", "pow:3"], tmp_path)
    rows = (out / "controlled.csv").read_text().splitlines()[1:]
    assert [float(r.split(",")[0]) for r in rows] == [0.3, 0.2]
    assert float(rows[0].split(",")[1]) == pytest.approx(0.027)


def test_workers_env(monkeypatch):
    monkeypatch.setenv("MVSCALE_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.delenv("MVSCALE_WORKERS")
    assert default_workers() == (os.cpu_count() or 1)
