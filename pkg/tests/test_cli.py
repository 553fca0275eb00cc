import json

import pytest

from ramer.cli import EXIT_ARTIFACT, EXIT_CONFIG, EXIT_OK, load_config, main
from ramer.dataset import load_corpus
from ramer.evaluation import read_csv_report

TINY = {"dataset": {"synthetic": {"n_labeled": 180, "n_unlabeled": 60,
                                  "dims": {"audio": 6, "video": 5, "text": 7},
                                  "class_priors": [1 / 6] * 6}},
        "train": {"epochs": 1, "batch_size": 64},
        "eval": {"protocol": "holdout", "repeats": 1},
        "completion": {"k": 3}}


def write_cfg(tmp_path, name="cfg.json", **over):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(tmp_path / "out")
    for k, v in over.items():
        cfg[k] = v
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_default_config_is_valid():
    cfg = load_config(None)
    cfg.validate()
    assert cfg.train.epochs == 40 and cfg.train.batch_size == 128
    assert cfg.dataset.synthetic.dims == {"audio": 1024, "video": 768, "text": 5120}


def test_config_errors(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"dataset": {"synthetic": {"class_priors": [0.5] * 6}}}))
    assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG
    p.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    p.write_text("{not json")
    assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG
    assert main(["train", "--config", write_cfg(tmp_path), "--condition", "avl"]) == EXIT_CONFIG


def test_gen_data_files_and_determinism(tmp_path):
    c = write_cfg(tmp_path)
    assert main(["gen-data", "--config", c]) == EXIT_OK
    d = tmp_path / "out" / "data"
    first = {p.name: p.read_bytes() for p in d.iterdir()}
    assert set(first) == {"manifest.jsonl", "audio.rfv", "video.rfv", "text.rfv", "data.json"}
    assert len(load_corpus(d)) == 240
    assert main(["gen-data", "--config", c]) == EXIT_OK  # up to date
    assert main(["gen-data", "--config", c, "--force"]) == EXIT_OK
    assert {p.name: p.read_bytes() for p in d.iterdir()} == first
    assert main(["gen-data", "--config", c, "--seed", "5"]) == EXIT_ARTIFACT


def test_missing_and_stale_artifacts(tmp_path, capsys):
    c = write_cfg(tmp_path)
    assert main(["pretrain", "--config", c]) == EXIT_ARTIFACT
    assert main(["gen-data", "--config", c]) == EXIT_OK
    assert main(["build-db", "--config", c]) == EXIT_ARTIFACT
    assert main(["pretrain", "--config", c]) == EXIT_OK
    capsys.readouterr()
    # a different training config makes the checkpoint stale for build-db
    c2 = write_cfg(tmp_path, "cfg2.json", train={"epochs": 2, "batch_size": 64})
    assert main(["build-db", "--config", c2]) == EXIT_ARTIFACT
    assert "checkpoint hash mismatch" in capsys.readouterr().err
    assert main(["pretrain", "--config", c2]) == EXIT_ARTIFACT
    assert main(["build-db", "--config", c]) == EXIT_OK
    assert main(["pretrain", "--config", c2, "--force"]) == EXIT_OK
    assert main(["train", "--config", c2, "--condition", "a"]) == EXIT_ARTIFACT
    assert "store" in capsys.readouterr().err


def test_full_pipeline(tmp_path, capsys):
    c = write_cfg(tmp_path)
    for cmd in ("gen-data", "pretrain", "build-db"):
        assert main([cmd, "--config", c]) == EXIT_OK
    assert main(["train", "--config", c, "--condition", "a,vl"]) == EXIT_OK
    assert (tmp_path / "out" / "models" / "vl.bin").exists()
    assert main(["eval", "--config", c]) == EXIT_OK
    rep = tmp_path / "out" / "reports"
    rows = read_csv_report(rep / "eval.csv")
    assert len(rows) == 1
    assert all(rows[0][f"{k}_WA"] for k in ("a", "v", "l", "av", "al", "vl", "Avg"))
    before = (rep / "eval.csv").read_bytes(), (rep / "eval.md").read_bytes()
    assert main(["eval", "--config", c, "--force"]) == EXIT_OK
    assert ((rep / "eval.csv").read_bytes(), (rep / "eval.md").read_bytes()) == before
    logs = list((tmp_path / "out" / "runs" / "eval").glob("run_*.json"))
    assert len(logs) == 1 and json.loads(logs[0].read_text())["audit"]["leaks"] == 0
    assert main(["export-hidden", "--config", c, "--n", "4"]) == EXIT_OK
    assert main(["export-hidden", "--config", c, "--n", "4"]) == EXIT_ARTIFACT
    assert main(["export-hidden", "--config", c, "--n", "100000", "--force"]) == EXIT_CONFIG
    out = tmp_path / "merged.md"
    assert main(["report", str(rep / "eval.csv"), str(rep / "eval.csv"), "--out", str(out)]) == 0
    assert out.read_text().count("\n") == 4
    assert main(["report", str(tmp_path / "nope.csv")]) == EXIT_ARTIFACT
