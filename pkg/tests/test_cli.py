import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from latticeagg.cli import main
from latticeagg.data import Dataset, RawRecord, save_dataset, save_raw_records
from latticeagg.model import AggModel, ExampleSet

CUISINES = ["greek", "mexican", "thai"]
SIGNATURE = {"greek": ["feta", "olive oil", "oregano"], "mexican": ["lime", "cumin", "tortilla"],
             "thai": ["fish sauce", "lemongrass", "coconut milk"]}


def make_recipes(rng, n):
    out = []
    for i in range(n):
        cuisine = CUISINES[i % 3]
        cats = set(rng.choice(SIGNATURE[cuisine], size=2, replace=False))
        cats |= {"salt", str(rng.choice(["water", "sugar", "garlic"]))}
        out.append(RawRecord(str(i), sorted(cats), 1.0, context=cuisine))
    return out


@pytest.fixture
def workdir(tmp_path, rng):
    save_raw_records(make_recipes(rng, 60), tmp_path / "raw.jsonl")
    (tmp_path / "cfg.json").write_text(json.dumps({
        "candidate_contexts": "all", "max_size": 2, "count_threshold": 2,
        "epochs": 3, "batch_size": 16, "learning_rate": 0.1, "num_keypoints": 4,
    }))
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_full_pipeline(workdir):
    w = workdir
    cfg = w / "cfg.json"
    assert run("build-table", "--config", cfg, "--data", w / "raw.jsonl", "--out", w / "t.tsv") == 0
    assert run("build-table", "--config", cfg, "--data", w / "raw.jsonl", "--out", w / "t2.tsv") == 0
    assert (w / "t.tsv").read_bytes() == (w / "t2.tsv").read_bytes()
    manifest = json.loads((w / "t.tsv.manifest.json").read_text())
    assert manifest["command"] == "build-table" and "wall_clock_seconds" in manifest

    assert run("featurize", "--config", cfg, "--data", w / "raw.jsonl", "--table", w / "t.tsv", "--out", w / "f.jsonl") == 0
    assert run("train", "--config", cfg, "--data", w / "f.jsonl", "--out", w / "m.json", "--seed", 5) == 0
    assert run("train", "--config", cfg, "--data", w / "f.jsonl", "--out", w / "m2.json", "--seed", 5) == 0
    assert (w / "m.json").read_bytes() == (w / "m2.json").read_bytes()
    assert (w / "m.json.trace.csv").read_text().count("\n") == 4
    model = AggModel.load(w / "m.json")
    assert model.is_feasible() and model.D == 6

    assert run("evaluate", "--config", cfg, "--model", w / "m.json", "--data", w / "f.jsonl",
               "--metric", "accuracy,precision@1,precision@3", "--out", w / "e.json") == 0
    report = json.loads((w / "e.json").read_text())
    assert report["precision@1"] <= report["precision@3"]

    # Raw data featurized on the fly through --table gives the same report.
    assert run("evaluate", "--config", cfg, "--model", w / "m.json", "--data", w / "raw.jsonl", "--table", w / "t.tsv",
               "--metric", "accuracy,precision@1,precision@3", "--out", w / "e2.json") == 0
    assert json.loads((w / "e2.json").read_text()) == report

    assert run("predict", "--model", w / "m.json", "--data", w / "f.jsonl", "--out", w / "p.csv") == 0
    with open(w / "p.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 60 * 3

    assert run("explain", "--model", w / "m.json", "--data", w / "f.jsonl", "--id", "0::greek", "--out", w / "x.json") == 0
    (rep,) = json.loads((w / "x.json").read_text())
    phis = np.array([t["phi"] for t in rep["tokens"]])
    assert rep["mean"] == pytest.approx(phis.mean(axis=0).tolist(), abs=1e-15)

    assert run("export-curves", "--model", w / "m.json", "--out", w / "c.csv") == 0
    with open(w / "c.csv") as f:
        curves = {(r["layer"], r["k"], r["d"]) for r in csv.DictReader(f)}
    assert len(curves) == 6 + 1 + 1


def test_explain_three_tokens(tmp_path, rng):
    ds = Dataset([ExampleSet(tokens=rng.uniform(size=(3, 2)), label=0.0, example_id="x")], ["a", "b"])
    save_dataset(ds, tmp_path / "d.jsonl")
    assert run("train", "--data", tmp_path / "d.jsonl", "--epochs", 0, "--out", tmp_path / "m.json") == 0
    assert run("explain", "--model", tmp_path / "m.json", "--data", tmp_path / "d.jsonl", "--out", tmp_path / "x.json") == 0
    (rep,) = json.loads((tmp_path / "x.json").read_text())
    assert len(rep["tokens"]) == 3 and rep["output"] == 0.0


def test_empty_table_warns(workdir):
    (workdir / "hi.json").write_text(json.dumps({"count_threshold": 10**6}))
    with pytest.warns(UserWarning):
        code = run("build-table", "--config", workdir / "hi.json", "--data", workdir / "raw.jsonl", "--out", workdir / "t.tsv")
    assert code == 0
    assert (workdir / "t.tsv").read_text().count("\n") == 1


def test_exit_codes(tmp_path, rng, capsys):
    assert run("build-table", "--data", tmp_path / "missing.jsonl", "--out", tmp_path / "t.tsv") == 2
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        run("train")
    assert info.value.code == 2

    bad = Dataset([ExampleSet(tokens=rng.uniform(size=(2, 2)), label=float("inf"), example_id=str(i)) for i in range(4)],
                  ["a", "b"])
    save_dataset(bad, tmp_path / "bad.jsonl")
    assert run("train", "--data", tmp_path / "bad.jsonl", "--out", tmp_path / "m.json") == 3
    assert "step 1" in capsys.readouterr().err

    ok = Dataset([ExampleSet(tokens=rng.uniform(size=(2, 2)), label=0.5, example_id=str(i)) for i in range(4)], ["a", "b"])
    save_dataset(ok, tmp_path / "ok.jsonl")
    assert run("train", "--data", tmp_path / "ok.jsonl", "--epochs", 0, "--out", tmp_path / "m.json") == 0
    three = Dataset([ExampleSet(tokens=rng.uniform(size=(2, 3)), label=0.5)], ["a", "b", "c"])
    save_dataset(three, tmp_path / "three.jsonl")
    assert run("evaluate", "--model", tmp_path / "m.json", "--data", tmp_path / "three.jsonl", "--out", tmp_path / "e.json") == 4
    (tmp_path / "broken.json").write_text("{}")
    assert run("evaluate", "--model", tmp_path / "broken.json", "--data", tmp_path / "ok.jsonl", "--out", tmp_path / "e.json") == 4
    assert run("train", "--data", tmp_path / "ok.jsonl", "--epochs", -1, "--out", tmp_path / "m.json") == 1


def test_tune(workdir):
    w = workdir
    cfg = json.loads((w / "cfg.json").read_text())
    cfg["tune_grid"] = {"learning_rate": [0.05, 0.2], "lattice_size": [2, 3]}
    (w / "tune.json").write_text(json.dumps(cfg))
    assert run("featurize", "--config", w / "cfg.json", "--data", w / "raw.jsonl", "--table", w / "none.tsv",
               "--out", w / "f.jsonl") == 2
    assert run("build-table", "--config", w / "cfg.json", "--data", w / "raw.jsonl", "--out", w / "t.tsv") == 0
    assert run("featurize", "--config", w / "cfg.json", "--data", w / "raw.jsonl", "--table", w / "t.tsv",
               "--out", w / "f.jsonl") == 0
    assert run("train", "--config", w / "tune.json", "--tune", "--data", w / "f.jsonl", "--validation", w / "f.jsonl",
               "--out", w / "m.json") == 0
    report = json.loads((w / "m.json.tune.json").read_text())
    assert len(report["candidates"]) == 4


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "latticeagg.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
