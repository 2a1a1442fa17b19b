import json

import pytest

from ocprom.cli import _parse_range, build_parser, main
from ocprom.mesh import NEUMANN, load_mesh


def test_parse_range():
    assert _parse_range("1:5") == [1, 2, 3, 4, 5]
    assert _parse_range("2:10:4") == [2, 6, 10]
    assert _parse_range("1,5,10") == [1, 5, 10]
    assert _parse_range("7") == [7]


def test_mesh_gen(tmp_path, capsys):
    out = tmp_path / "g.mesh"
    assert main(["mesh-gen", "--case", "gulf", "--n", "8", "--output", str(out)]) == 0
    m = load_mesh(out)
    assert m.n_vertices == 81 and {"CONTROL", "OBSERVATION"} <= set(m.labels.tolist())
    out2 = tmp_path / "r.mesh"
    assert main(["mesh-gen", "--n", "3", "--ny", "2", "--neumann", "west", "--output", str(out2)]) == 0
    m2 = load_mesh(out2)
    assert m2.n_triangles == 12 and (m2.boundary_tags == NEUMANN).sum() == 2
    assert "vertices" in capsys.readouterr().out


def test_truth_solve_with_mesh_file(tmp_path, capsys):
    mesh = tmp_path / "g.mesh"
    main(["mesh-gen", "--case", "gulf", "--n", "8", "--output", str(mesh)])
    capsys.readouterr()
    rc = main(["truth-solve", "--case", "gulf", "--mesh", str(mesh), "--mu", "0.75", "0.2", "-0.3",
               "--output", str(tmp_path / "sol")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_control"] == 1 and summary["residual"] <= 1e-10
    assert (tmp_path / "sol" / "y.txt").exists()


def test_offline_online_round_trip(tmp_path, capsys):
    model = tmp_path / "model"
    rc = main(["offline", "--case", "gulf", "--n", "8", "--train-size", "8", "--N", "3",
               "--output", str(model), "--seed", "4"])
    assert rc == 0
    assert (model / "manifest.json").exists() and (model / "eigenvalues.csv").exists()
    cfg = json.loads((model / "study_config.json").read_text())
    assert cfg["train_seed"] == 4 and cfg["test_seed"] == 5
    capsys.readouterr()
    assert main(["online", "--model", str(model), "--mu", "0.75", "0.2", "-0.3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["system_size"] == 13 and out["case"] == "gulf"


def test_online_full_order_reloads_definition(tmp_path, capsys):
    model = tmp_path / "qg"
    rc = main(["offline", "--case", "qg_nonlinear", "--n", "6", "--train-size", "5", "--N", "2",
               "--nl-mode", "full", "--no-aggregation", "--output", str(model)])
    assert rc == 0
    capsys.readouterr()
    assert main(["online", "--model", str(model), "--mu", "0.5", "0.5", "0.001"]) == 0
    assert json.loads(capsys.readouterr().out)["system_size"] == 10


def test_study_with_config_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"case": "gulf", "mesh_n": 8, "train_size": 30, "test_size": 4,
                               "dists": ["beta:75:75"], "rule": "gauss"}))
    out = tmp_path / "res"
    rc = main(["study", "--config", str(cfg), "--train-size", "3", "--rule", "pseudo",
               "--dist", "uniform", "--N", "1:2", "--output", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["rule"] == "pseudo" and manifest["config"]["dists"] == ["uniform"]
    assert manifest["config"]["train_size"] == 3 and manifest["config"]["test_size"] == 4
    lines = (out / "errors.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 4
    assert "failures: 0 test" in capsys.readouterr().out


def test_errors_give_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert main(["study", "--config", str(bad), "--output", str(tmp_path)]) == 2
    assert main(["truth-solve", "--case", "gulf", "--n", "8", "--mu", "1", "2"]) == 2
    assert "error:" in capsys.readouterr().err


def test_parser_choices():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["study", "--rule", "sobol"])
    args = parser.parse_args(["study", "--rule", "cc", "--pod", "snapshot", "--no-aggregation"])
    assert args.aggregated is False and args.pod == "snapshot"
