import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from mfprice.cli import main
from mfprice.config import VALIDATION_RULES, RunConfig, build_liability, regime_label
from mfprice.errors import ConfigError
from mfprice.model import TimeGrid

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def base(**over):
    cfg = {"schema_version": 1, "grid": {"T": 1.0, "K": 2},
           "market": {"sigma": [[1.0]], "d": 1},
           "population": {"atoms": [{"weight": 1.0, "gamma": 1.0,
                                     "liability": {"kind": "constant", "amplitude": 0.0}}]}}
    cfg.update(over)
    return cfg


def run(tmp_path, cfg, command="equilibrium", *extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg) if isinstance(cfg, dict) else cfg)
    out = tmp_path / "out"
    code = main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


@pytest.mark.parametrize("bad, field", [
    ({"schema_version": 2}, "schema_version"),
    ({"grid": {"T": 1.0}}, "grid.K"),
    ({"grid": {"T": "1", "K": 2}}, "grid.T"),
    ({"population": {"atoms": [{"weight": 1.0, "gamma": 1.0, "liability": {"kind": "weird"}}]}},
     "population.atoms[0].liability.kind"),
    ({"seed": -1}, "seed"),
])
def test_config_errors_name_field(bad, field):
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_dict(base(**bad))
    assert exc.value.path == field


def test_exit_codes(tmp_path):
    assert run(tmp_path, "{not json")[0] == 2
    assert run(tmp_path, base(grid={"T": 1.0, "K": 0}))[0] == 2
    bad_w = base(population={"atoms": [{"weight": 0.5, "gamma": 1.0,
                                        "liability": {"kind": "constant", "amplitude": 0.0}}]})
    assert run(tmp_path, bad_w)[0] == 3
    assert run(tmp_path, base(market={"sigma": [[1.0, 1.0], [1.0, 1.0]]}))[0] == 3
    assert run(tmp_path, base(theta=5.0), "solve-agent")[0] == 4


def test_minimal_config_zero_premium(tmp_path):
    code, out = run(tmp_path, json.loads((CONFIGS / "minimal.json").read_text()))
    assert code == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["theta_mfg_t0"] == [0.0]
    assert {"manifest.json", "summary.json", "theta_mfg.csv", "diagnostics.csv"} <= {p.name for p in out.iterdir()}


def test_one_step_common_sign(tmp_path):
    code, out = run(tmp_path, json.loads((CONFIGS / "common_sign_one_step.json").read_text()))
    assert code == 0
    assert json.loads((out / "summary.json").read_text())["theta_mfg_t0"] == [-1.0]


def test_regime_label():
    cfg = RunConfig.from_dict(json.loads((CONFIGS / "clearing_heterogeneous.json").read_text()))
    assert regime_label(cfg.build()[2]) == "in-theory"
    cfg = RunConfig.from_dict(json.loads((CONFIGS / "common_sign_one_step.json").read_text()))
    assert regime_label(cfg.build()[2]) == "exploratory"


def test_additive_cross_check(tmp_path):
    code, out = run(tmp_path, json.loads((CONFIGS / "additive.json").read_text()))
    assert code == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["method"] == "additive-scheme"
    assert s["cross_check"]["max_abs_dY"] <= 1e-10


def test_verify_and_solve_agent(tmp_path):
    cfg = json.loads((CONFIGS / "verify_agent.json").read_text())
    code, out = run(tmp_path, cfg, "verify")
    assert code == 0
    report = json.loads((out / "verify.json").read_text())
    assert report["passed"]
    code, out = run(tmp_path, cfg, "solve-agent")
    assert code == 0
    header = (out / "solution_atom0.csv").read_text().splitlines()[0]
    assert header == "k,common_idx,idio_idx,Y,Z0_0,Z1_0,p_star_0"


def test_custom_table_liability():
    g = TimeGrid(1.0, 2)
    F = build_liability({"kind": "custom-table", "noise": "idio", "values": [1.0, 2.0, 3.0]}, 1.0, g)
    w = np.array([[[0.0], [0.7071067811865476], [1.4142135623730951]]])
    assert F(np.zeros((1, 3, 1)), w)[0] == 3.0
    with pytest.raises(ConfigError):
        build_liability({"kind": "custom-table", "noise": "idio", "values": [1.0]}, 1.0, g)


def test_validation_rules_cover_raised_ids():
    import re
    src = Path(__file__).resolve().parents[1] / "src" / "mfprice"
    raised = set()
    for f in ("model.py", "bsde.py"):
        raised |= set(re.findall(r'"((?:market|agent|population|theta)\.[a-z_]+)"', (src / f).read_text()))
    assert raised <= set(VALIDATION_RULES)


def test_seed_override_and_determinism(tmp_path):
    cfg = json.loads((CONFIGS / "clearing_heterogeneous.json").read_text())
    cfg["clearing"] = {"N_list": [2, 8, 32], "outer_samples": 300}
    cfg["grid"]["K"] = 3
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for i, threads in enumerate(("1", "3")):
        out = tmp_path / f"o{i}"
        assert main(["clearing-sweep", "--config", str(path), "--out", str(out), "--threads", threads,
                     "--seed", "7"]) == 0
        outs.append(out)
    for name in ("clearing.csv", "theta_mfg.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    m = [json.loads((o / "manifest.json").read_text()) for o in outs]
    assert m[0]["content_hash"] == m[1]["content_hash"]
    assert m[0]["seed"] == 7
