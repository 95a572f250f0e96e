import csv
import json

import jsonschema
import pytest

from clssem.cli import main, read_config
from clssem.estimator import RESULT_SCHEMA
from clssem.oracle import orthogonal_regression
from clssem.model import read_csv


@pytest.fixture
def regression_files(tmp_path):
    data, model, truth = tmp_path / "d.csv", tmp_path / "m.txt", tmp_path / "t.json"
    code = main(["simulate", "--study", "regression", "--n", "200", "--seed", "3",
                 "--out", str(data), "--truth", str(truth), "--model-out", str(model)])
    assert code == 0
    return data, model, truth


def _estimate(data, model, *extra):
    return main(["estimate", "--model", str(model), "--data", str(data), "--jobs", "1",
                 "--multistart", "2", *extra])


def test_simulate_outputs(regression_files):
    data, model, truth = regression_files
    assert read_csv(data).n == 200
    assert json.loads(truth.read_text())["params"] == {"a": 0.5}
    assert model.read_text().startswith("latent:")


def test_estimate_ww_writes_valid_json(regression_files, tmp_path, capsys):
    data, model, _ = regression_files
    out, scores = tmp_path / "r.json", tmp_path / "z.csv"
    code = _estimate(data, model, "--strategy", "ww", "--out", str(out),
                     "--scores", str(scores), "--chi-square", "naive")
    assert code == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, RESULT_SCHEMA)
    assert abs(doc["params"]["a"] - 0.5) < 0.05
    assert doc["fit"]["chi_square"]["df_mode"] == "naive"
    with open(scores) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["X"] and len(rows) == 201
    assert "experimental" in capsys.readouterr().out


def test_w1_matches_closed_form_through_cli(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("x,y\n1.0,0.8\n-0.5,-0.2\n0.3,0.5\n-0.9,-0.7\n")
    model = tmp_path / "m.txt"
    model.write_text("latent: Z\nmanifest: x, y\nparam: a\neq x: x = Z\neq y: y = a*Z\n")
    out = tmp_path / "r.json"
    assert _estimate(data, model, "--strategy", "w1", "--out", str(out)) == 0
    d = read_csv(data)
    a, _ = orthogonal_regression(d.column("x"), d.column("y"))
    assert json.loads(out.read_text())["params"]["a"] == pytest.approx(a, abs=1e-6)


def test_missing_strategy_is_usage_error(regression_files, capsys):
    data, model, _ = regression_files
    assert _estimate(data, model) == 1
    assert "strategy" in capsys.readouterr().err


def test_zero_noise_ganzach_exact_fit(tmp_path):
    data, model, out = tmp_path / "d.csv", tmp_path / "m.txt", tmp_path / "r.json"
    noise = [f"--param=sd_{c}=0" for c in
             ["eta", "x1", "x2", "x3", "x4", "x5", "x6", "y1", "y2", "y3"]]
    assert main(["simulate", "--study", "ganzach", "--n", "60", "--seed", "1", *noise,
                 "--out", str(data), "--model-out", str(model)]) == 0
    assert _estimate(data, model, "--strategy", "w1", "--out", str(out),
                     "--no-uniqueness") == 0
    assert json.loads(out.read_text())["f_min"] < 1e-8


def test_non_convergence_exit_code(regression_files):
    data, model, _ = regression_files
    assert _estimate(data, model, "--strategy", "w1", "--max-iter", "1",
                     "--gtol", "1e-15", "--multistart", "1") == 2


@pytest.mark.parametrize("content, fragment", [
    ("latent: Z\nmanifest: x\neq e: x = Z + q\n", ":3:"),
    ("latent: Z\nmanifest: x\neq e: x = (Z\n", ":3:"),
])
def test_model_errors_name_file_and_line(regression_files, tmp_path, capsys, content,
                                         fragment):
    data, _, _ = regression_files
    bad = tmp_path / "bad.txt"
    bad.write_text(content)
    assert _estimate(data, bad, "--strategy", "w1") == 1
    err = capsys.readouterr().err
    assert "bad.txt" + fragment in err


def test_data_errors(tmp_path, regression_files, capsys):
    _, model, _ = regression_files
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2,y1,y2\n1,2,3\n")
    assert _estimate(bad, model, "--strategy", "w1") == 1
    assert "bad.csv:2" in capsys.readouterr().err
    assert _estimate(tmp_path / "missing.csv", model, "--strategy", "w1") == 1


def test_normalize_interpretation_printed(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("x,y\n1.0,0.8\n-0.5,-0.2\n0.3,0.5\n-0.9,-0.7\n")
    model = tmp_path / "m.txt"
    model.write_text("latent: Z\nmanifest: x, y\nparam: a, b\neq x: x = a*Z\n"
                     "eq y: y = b*Z\nconstraint normalize(Z)\n")
    _estimate(data, model, "--strategy", "w1")
    assert "sum of squares = n" in capsys.readouterr().out


# -- replicate -------------------------------------------------------------

def test_replicate_table_and_csv(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["replicate", "--study", "regression", "--n", "100", "--reps", "3",
                 "--strategies", "w1,ww", "--seed", "1", "--multistart", "1",
                 "--jobs", "1", "--csv", str(out)]) == 0
    text = capsys.readouterr().out
    assert "w1" in text and "ww" in text and "(3 reps" in text
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["strategy"] for r in rows} == {"w1", "ww"}
    # table shows three decimals of the full-precision CSV value
    mean = float(next(r for r in rows if r["strategy"] == "w1")["mean_error"])
    assert f"{mean:.3f}(" in text


def test_replicate_rejects_unknown_strategy(capsys):
    assert main(["replicate", "--study", "regression", "--strategies", "w1,zz"]) == 1


def test_replicate_deterministic(tmp_path):
    outs = []
    for jobs in ("1", "2"):
        out = tmp_path / f"t{jobs}.csv"
        main(["replicate", "--study", "implicative", "--n", "40", "--reps", "2",
              "--seed", "5", "--multistart", "1", "--jobs", jobs, "--csv", str(out)])
        outs.append(out.read_text())
    assert outs[0] == outs[1]


# -- permtest --------------------------------------------------------------

def _permtest(data, model, *extra):
    return main(["permtest", "--model", str(model), "--data", str(data), "--strategy", "w1",
                 "--multistart", "1", "--jobs", "1", *extra])


def test_permtest_structured_data(tmp_path, capsys):
    data, model = tmp_path / "d.csv", tmp_path / "m.txt"
    main(["simulate", "--study", "regression", "--n", "100", "--seed", "2",
          "--out", str(data), "--model-out", str(model)])
    out = tmp_path / "f.json"
    assert _permtest(data, model, "--perms", "20", "--out", str(out)) == 0
    report = json.loads(out.read_text())
    assert report["permutation"]["fraction_below"] == 0.0
    assert len(report["permutation"]["samples"]) == 20
    assert "fraction of null" in capsys.readouterr().out


def test_permtest_without_permutations(regression_files, tmp_path):
    data, model, _ = regression_files
    out = tmp_path / "f.json"
    assert _permtest(data, model, "--perms", "0", "--out", str(out)) == 0
    assert set(json.loads(out.read_text())) == {"R", "f_min"}


def test_permtest_identity(regression_files, tmp_path):
    data, model, _ = regression_files
    out = tmp_path / "f.json"
    _permtest(data, model, "--perms", "2", "--identity", "--out", str(out))
    report = json.loads(out.read_text())
    assert report["permutation"]["samples"] == [report["f_min"]] * 2


# -- configuration ---------------------------------------------------------

def test_config_file_and_precedence(regression_files, tmp_path):
    data, model, _ = regression_files
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# defaults\nperms = 1\nmax-iter = 500\nseed = 4\n")
    assert read_config(cfg) == {"perms": 1, "max_iter": 500, "seed": 4}
    out = tmp_path / "f.json"
    assert main(["permtest", "--model", str(model), "--data", str(data), "--strategy", "w1",
                 "--config", str(cfg), "--jobs", "1", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["permutation"]["samples"]) == 1
    assert main(["permtest", "--model", str(model), "--data", str(data), "--strategy", "w1",
                 "--config", str(cfg), "--perms", "2", "--jobs", "1",
                 "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["permutation"]["samples"]) == 2


@pytest.mark.parametrize("content", ["perms = many\n", "multi-start = 2\n", "perms\n"])
def test_bad_config(tmp_path, regression_files, capsys, content):
    data, model, _ = regression_files
    cfg = tmp_path / "c.cfg"
    cfg.write_text(content)
    assert _permtest(data, model, "--config", str(cfg)) == 1
    assert "c.cfg:1" in capsys.readouterr().err


def test_deterministic_output(regression_files, tmp_path):
    data, model, _ = regression_files
    docs = []
    for k in range(2):
        out = tmp_path / f"r{k}.json"
        _estimate(data, model, "--strategy", "ww", "--seed", "9", "--out", str(out))
        doc = json.loads(out.read_text())
        doc["diagnostics"].pop("wall_time")
        docs.append(doc)
    assert docs[0] == docs[1]


def test_help_exits_cleanly():
    assert main(["--help"]) == 0
