import json
import subprocess
import sys

import pytest
import yaml

from sinaihole import io
from sinaihole.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from sinaihole.config import ExperimentConfig, load_config
from sinaihole.errors import ConfigError

SMALL = {
    "hole": {"r_star": 0.5, "t_list": [0.04, 0.02]},
    "mc": {"n_particles": 20_000, "n_steps": 10, "seed": 1},
    "quadrature": {"n_phi_nodes": 4096, "n_r_nodes": 64},
    "series": {"K_max": 10},
    "family": {"n_generations": 2, "mixing_steps": 3, "max_pairs": 500, "t_values": [0.0]},
}


def _write(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def _merge(base, **over):
    out = json.loads(json.dumps(base))
    for k, v in over.items():
        out[k] = {**out.get(k, {}), **v} if isinstance(v, dict) else v
    return out


def test_map_check_passes(tmp_path):
    out = tmp_path / "out"
    assert main(["map-check", "--out", str(out)]) == EXIT_OK
    data = json.loads((out / "map_check.json").read_text())
    assert data["passed"]
    man = json.loads((out / "manifest_map-check.json").read_text())
    assert man["config_hash"] == ExperimentConfig().config_hash()
    assert man["exit_code"] == 0


def test_overlap_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, {"table": [{"center": [0, 0], "radius": 0.3},
                                      {"center": [0.2, 0.2], "radius": 0.2}]})
    assert main(["survival", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "Overlap" in capsys.readouterr().err


def test_infinite_horizon_fails(tmp_path, capsys):
    cfg = _write(tmp_path, {"table": [{"center": [0, 0], "radius": 0.3}]})
    assert main(["survival", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_FAIL
    assert "HorizonViolation" in capsys.readouterr().err


def test_zero_particles_rejected(tmp_path, capsys):
    cfg = _write(tmp_path, _merge(SMALL, mc={"n_particles": 0}))
    assert main(["survival", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "n_particles" in capsys.readouterr().err


def test_unknown_observable_lists_builtins(tmp_path, capsys):
    cfg = _write(tmp_path, _merge(SMALL, observables=["energy"]))
    assert main(["response", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "energy" in err and "cos_r" in err and "sin_phi" in err


def test_strip_bounds_rejected():
    with pytest.raises(ConfigError, match="k_max_strip"):
        load_config({"family": {"k_max_strip": 1}})


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"hole": {"t_list": []}},
    {"hole": {"t_list": [-0.1]}},
    {"family": {"r_values": [0.3]}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        load_config(data)


def test_bad_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("mc: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(str(p))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))


def test_config_hash_stable_and_seed_sensitive():
    a, b = load_config(SMALL), load_config(json.loads(json.dumps(SMALL)))
    assert a.config_hash() == b.config_hash()
    assert a.with_seed(7).config_hash() != a.config_hash()
    assert a.with_seed(None) is a


def test_response_constant_passes(tmp_path):
    cfg = _write(tmp_path, _merge(SMALL, observables=["const"]))
    out = tmp_path / "o"
    assert main(["response", "--config", cfg, "--out", str(out)]) == EXIT_OK
    data = json.loads((out / "response_const.json").read_text())
    assert data["verdict"] == "PASS"
    assert data["config_hash"] == load_config(cfg).config_hash()
    assert io.read_hash(out / "response_const_terms.csv") == data["config_hash"]


def test_response_needs_two_positive_sizes(tmp_path):
    cfg = _write(tmp_path, _merge(SMALL, hole={"t_list": [0.02, 0.0]}))
    assert main(["response", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_survival_reproducible_and_compare(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["survival", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["survival", "--config", cfg, "--out", str(b)]) == EXIT_OK
    assert main(["survival", "--config", cfg, "--out", str(c), "--seed", "2"]) == EXIT_OK
    for name in ("survival_t0.04.csv", "survival_t0.02.csv", "survival.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    f = "survival_t0.02.csv"
    assert main(["compare", str(a / f), str(b / f)]) == EXIT_OK
    # a different seed is a different configuration
    assert main(["compare", str(a / f), str(c / f)]) == EXIT_CONFIG
    assert "refused" in capsys.readouterr().err


def test_compare_tolerance(tmp_path):
    h = "abc"
    io.write_csv(tmp_path / "x.csv", ["a", "b"], [(1, 0.5)], h)
    io.write_csv(tmp_path / "y.csv", ["a", "b"], [(1, 0.5 + 1e-9)], h)
    assert main(["compare", str(tmp_path / "x.csv"), str(tmp_path / "y.csv")]) == EXIT_FAIL
    assert main(["compare", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"),
                 "--tol", "1e-8"]) == EXIT_OK
    assert io.compare_files(tmp_path / "x.csv", tmp_path / "y.csv") == pytest.approx(1e-9)


def test_json_nonfinite_round_trip(tmp_path):
    p = io.write_json(tmp_path / "v.json", {"x": float("inf"), "y": 1.5}, "h")
    data = json.loads(p.read_text())
    assert data["x"] == "inf" and data["y"] == 1.5 and data["config_hash"] == "h"


def test_family_command(tmp_path):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "o"
    code = main(["family", "--config", cfg, "--out", str(out)])
    assert code in (EXIT_OK, EXIT_FAIL)
    mix = json.loads((out / "mixing.json").read_text())
    assert mix["series"][0]["t"] == 0.0
    rows = (out / "family_t0_r0.3.csv").read_text().splitlines()
    assert rows[0].startswith("# config_hash=")
    assert len(rows) == 2 + 3  # hash line, header, generations 0..2


def test_show_config_round_trips(capsys):
    assert main(["show-config"]) == EXIT_OK
    data = yaml.safe_load(capsys.readouterr().out)
    assert load_config(data).config_hash() == ExperimentConfig().config_hash()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sinaihole", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "map-check" in res.stdout
