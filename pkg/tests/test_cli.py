import csv
import json

import pytest

from mspld import cli

CONFIG = {
    "models": [{"family": "prototype", "view": [0, 1, 2, 3]}, {"family": "linear", "view": [4, 5, 6, 7]}],
    "max_iterations": 2,
    "scene": {"num_images": 45, "num_classes": 3},
    "seeds": [0, 1],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return path


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_data_is_reproducible(tmp_path, config, capsys):
    assert run_cli(capsys, "gen-data", "--config", config, "--out", tmp_path / "a.json", "--seed", 4)[0] == 0
    assert run_cli(capsys, "gen-data", "--config", config, "--out", tmp_path / "b.json", "--seed", 4)[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_run_layout_and_determinism(tmp_path, config, capsys):
    for name in ("a", "b"):
        code, out, _ = run_cli(capsys, "run", "--config", config, "--out", tmp_path / name, "--seed", 0)
        assert code == 0 and json.loads(out)["mode"] == "mspld"
    a, b = tmp_path / "a", tmp_path / "b"
    assert {p.name for p in a.iterdir()} == {"config.json", "dataset.sha256", "trace.jsonl", "metrics.csv",
                                           "detections.json", "checkpoints"}
    for name in ("trace.jsonl", "metrics.csv", "detections.json", "config.json", "dataset.sha256"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    traces = [json.loads(line) for line in (a / "trace.jsonl").read_text().splitlines()]
    assert [t["iteration"] for t in traces] == list(range(len(traces)))
    rows = list(csv.DictReader((a / "metrics.csv").open()))
    assert [r["class_id"] for r in rows] == ["0", "1", "2"]


def test_zero_iterations_has_no_pseudo_labels(tmp_path, config, capsys):
    code, out, _ = run_cli(capsys, "run", "--config", config, "--out", tmp_path / "r", "--max-iters", 0)
    assert code == 0 and json.loads(out)["iterations"] == 0
    assert len((tmp_path / "r" / "trace.jsonl").read_text().splitlines()) == 1
    rows = list(csv.DictReader((tmp_path / "r" / "metrics.csv").open()))
    assert all(float(r["ins_r"]) == 0.0 for r in rows)


def test_resume_reproduces_the_trace(tmp_path, config, capsys):
    run_cli(capsys, "run", "--config", config, "--out", tmp_path / "r")
    full = (tmp_path / "r" / "trace.jsonl").read_bytes()
    ckpts = sorted((tmp_path / "r" / "checkpoints").glob("iter_*.json"))
    assert len(ckpts) >= 2
    for late in ckpts[1:]:
        late.unlink()
    assert run_cli(capsys, "run", "--config", config, "--out", tmp_path / "r", "--resume")[0] == 0
    assert (tmp_path / "r" / "trace.jsonl").read_bytes() == full


def test_eval_rescores_run_detections(tmp_path, config, capsys):
    run_cli(capsys, "gen-data", "--config", config, "--out", tmp_path / "d.json")
    run_cli(capsys, "run", "--config", config, "--data", tmp_path / "d.json", "--out", tmp_path / "r")
    code, out, _ = run_cli(capsys, "eval", "--dets", tmp_path / "r" / "detections.json", "--data", tmp_path / "d.json")
    assert code == 0
    ap_eval = [r["ap"] for r in csv.DictReader(out.splitlines())]
    ap_run = [r["ap"] for r in csv.DictReader((tmp_path / "r" / "metrics.csv").open())]
    assert ap_eval == ap_run


def test_compare_table(tmp_path, config, capsys):
    code, out, _ = run_cli(capsys, "compare", "--config", config, "--out", tmp_path / "c", "--max-iters", 1)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "c" / "compare.csv").open()))
    assert [r["method"] for r in rows] == ["spl_single_0", "spl_single_1", "spl_ensemble", "mspld", "best_single"]
    assert set(rows[0]) == {"method", "mean_map", "std_map", "seed_0", "seed_1"}
    best = max(float(r["mean_map"]) for r in rows[:2])
    assert float(rows[-1]["mean_map"]) == pytest.approx(best, abs=1e-6)
    assert (tmp_path / "c" / "seed_1" / "mspld.trace.jsonl").exists()


def test_oracle_check(capsys):
    code, out, _ = run_cli(capsys, "oracle-check", "--n", 200, "--seed", 1)
    assert code == 0 and out.strip() == "200/200 exact"


def test_errors_are_json(tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "--config", tmp_path / "missing.json", "--out", tmp_path / "r")
    assert code == 1 and json.loads(err)["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "models": [\n    oops\n  ]\n}\n')
    code, _, err = run_cli(capsys, "gen-data", "--config", bad, "--out", tmp_path / "d.json")
    report = json.loads(err)
    assert code == 1 and report["error"] == "DatasetFormatError" and report["line"] == 3


def test_bad_mode_rejected(tmp_path, config):
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", str(config), "--out", str(tmp_path), "--mode", "fancy"])


def test_worker_default_from_environment(monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli.build_parser().parse_args(["run", "--config", "c", "--out", "o"]).workers == 3
    monkeypatch.setenv(cli.WORKERS_ENV, "many")
    assert cli.build_parser().parse_args(["run", "--config", "c", "--out", "o"]).workers == 1
