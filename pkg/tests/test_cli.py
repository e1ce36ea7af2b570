import csv
import json

import pytest

from m2m.cli import main


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "sim.json"
    cfg.write_text(json.dumps({"duration_s": 0.75}))
    assert main(["simulate", "--config", str(cfg), "--seed", "5", "--num-scenes", "2",
                 "--out", str(root / "data")]) == 0
    return root


def test_simulate_reproducible_and_creates_dir(data, tmp_path):
    cfg = data / "sim.json"
    out = tmp_path / "deep" / "er"
    assert main(["simulate", "--config", str(cfg), "--seed", "5", "--num-scenes", "2",
                 "--out", str(out)]) == 0
    assert (out / "manifest.json").read_text() == (data / "data" / "manifest.json").read_text()


def test_simulate_invalid_t60(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"t60_range": [0.1, 0.9]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "T60" in capsys.readouterr().err


def test_train_smoke_resume_and_bad_mode(data, tmp_path, capsys):
    base = ["train", "--data", str(data / "data"), "--ckpt-dir", str(tmp_path / "ck"),
            "--segment-s", "0.5", "--batch-size", "1", "--mode", "unssor"]
    assert main(base + ["--steps", "1"]) == 0
    assert main(base + ["--steps", "2", "--resume"]) == 0
    steps = [json.loads(l)["step"] for l in (tmp_path / "ck" / "train_log.jsonl").read_text().splitlines()]
    assert steps == [0, 1]
    with pytest.raises(SystemExit) as err:
        main(["train", "--mode", "copy"])
    assert err.value.code == 2


def test_eval_report_and_missing_checkpoint(data, tmp_path):
    ck = tmp_path / "ck"
    assert main(["train", "--data", str(data / "data"), "--ckpt-dir", str(ck), "--steps", "1",
                 "--segment-s", "0.5", "--batch-size", "1"]) == 0
    assert main(["eval", "--ckpt", str(ck), "--data", str(data / "data"),
                 "--report", str(tmp_path / "rep")]) == 0
    doc = json.loads((tmp_path / "rep.json").read_text())
    assert {s["label"] for s in doc["systems"]} == {"m2m", "mixture"}
    for s in doc["systems"]:
        assert set(s) == {"label", "num_utterances", "mean_si_sdr", "mean_sdr"}
        assert s["num_utterances"] == 2
    with open(tmp_path / "rep.csv") as fh:
        assert next(csv.reader(fh)) == ["system", "utterance", "perm", "si_sdr", "sdr"]
    assert main(["eval", "--ckpt", str(tmp_path / "nope"), "--data", str(data / "data"),
                 "--report", str(tmp_path / "r2")]) == 2


def test_oracle(data, tmp_path, capsys):
    assert main(["oracle", "--data", str(data / "data"), "--out", str(tmp_path / "o.csv")]) == 0
    assert main(["oracle", "--data", str(data / "data"), "--out", str(tmp_path / "o1.csv"),
                 "--taps", "0,0,0,0"]) == 0
    read = lambda p: list(csv.DictReader(open(p)))
    full, single = read(tmp_path / "o.csv"), read(tmp_path / "o1.csv")
    assert len(full) == 2
    for a, b in zip(full, single):
        assert float(a["oracle_si_sdr"]) >= float(a["mixture_si_sdr"])
        assert float(b["oracle_si_sdr"]) <= float(a["oracle_si_sdr"])


def test_gradcheck_modes(capsys):
    assert main(["gradcheck"]) == 0
    assert main(["gradcheck", "--perturb", "1e-2"]) == 0
    assert main(["gradcheck", "--inject-error", "0.01"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_workdir_and_threads(data, tmp_path):
    cfg = data / "sim.json"
    assert main(["--workdir", str(tmp_path), "--threads", "1", "simulate", "--config", str(cfg),
                 "--num-scenes", "1", "--out", "rel"]) == 0
    assert (tmp_path / "rel" / "manifest.json").exists()
    assert not (data / "rel").exists()
