import json
import os

import pytest

from mil_anomaly.cli import build_parser, main
from mil_anomaly.corpus import load_manifest

SUBCOMMANDS = ["ingest", "train", "eval", "predict", "gradcheck", "synth", "concat"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert main(["synth", "--out", str(out), "--dim", "6", "--normal", "4", "--anomalous", "4",
                 "--segments", "8", "--max-anomalous-segments", "3", "--tta-variants", "2", "--seed", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    argv = ["train", "--manifest", str(corpus / "manifest.csv"), "--out", str(run), "--iterations", "20",
            "--hidden", "5", "3", "--segments", "8", "--loss", "mean_normal", "--seed", "7", "--checkpoint-every", "10"]
    assert main(argv) == 0
    return run


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_lists_defaults(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "--seed" in text and "default: 0" in text


def test_train_help_covers_hyperparameters(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for fragment in ("--lambda1", "8e-05", "--lambda3", "0.001", "--dropout", "0.6", "--beta1", "0.9",
                     "--beta2", "0.999", "--rho", "0.95", "--lr", "0.0005", "--epsilon", "1e-08"):
        assert fragment in text


def test_unknown_flag_exit_1(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exit_1():
    assert main([]) == 1


def test_synth_writes_loadable_corpus(corpus):
    m = load_manifest(str(corpus / "manifest.csv"), expected_dim=6, check_train=True)
    assert len(m.records) == 8
    doc = json.loads((corpus / "run_manifest.json").read_text())
    assert doc["command"] == "synth" and doc["seed"] == 2 and doc["config"]["dim"] == 6


def test_ingest(corpus, capsys):
    assert main(["ingest", "--manifest", str(corpus / "manifest.csv"), "--dim", "6", "--segments", "8"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats


def test_ingest_wrong_dim_exit_1(corpus):
    assert main(["ingest", "--manifest", str(corpus / "manifest.csv"), "--dim", "7"]) == 1


def test_ingest_missing_manifest_is_io_failure(tmp_path):
    assert main(["ingest", "--manifest", str(tmp_path / "nope.csv")]) == 2


def test_train_outputs(trained):
    names = set(os.listdir(trained))
    assert {"final.ckpt", "final.ckpt.state", "train_log.csv", "run_manifest.json",
            "iter_0000010.ckpt", "iter_0000020.ckpt"} <= names
    cfg = json.loads((trained / "run_manifest.json").read_text())["config"]
    assert cfg["loss"]["variant"] == "mean_normal"
    assert cfg["optimizer_hyperparams"]["learning_rate"] == 0.0005


def test_train_is_reproducible(corpus, trained, tmp_path):
    argv = ["train", "--manifest", str(corpus / "manifest.csv"), "--out", str(tmp_path), "--iterations", "20",
            "--hidden", "5", "3", "--segments", "8", "--loss", "mean_normal", "--seed", "7", "--checkpoint-every", "10"]
    assert main(argv) == 0
    assert (tmp_path / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()


def test_train_resume(corpus, trained, tmp_path):
    argv = ["train", "--manifest", str(corpus / "manifest.csv"), "--out", str(tmp_path), "--iterations", "10",
            "--hidden", "5", "3", "--segments", "8", "--loss", "mean_normal", "--seed", "7",
            "--resume", str(trained / "iter_0000010.ckpt")]
    assert main(argv) == 0
    assert (tmp_path / "final.ckpt").read_bytes() == (trained / "iter_0000020.ckpt").read_bytes()


def test_train_bad_lr_exit_1(corpus, tmp_path):
    assert main(["train", "--manifest", str(corpus / "manifest.csv"), "--out", str(tmp_path),
                 "--lr", "-1", "--iterations", "2"]) == 1


def test_eval(corpus, trained, tmp_path, capsys):
    assert main(["eval", "--manifest", str(corpus / "manifest.csv"), "--checkpoint", str(trained / "final.ckpt"),
                 "--out", str(tmp_path), "--segments", "8"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert 0.0 <= report["auc"] <= 1.0 and report["far_percent"] is not None
    assert (tmp_path / "roc.csv").exists() and (tmp_path / "run_manifest.json").exists()
    assert json.loads(capsys.readouterr().out)["auc"] == report["auc"]


def test_eval_corrupt_checkpoint_exit_1(corpus, trained, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((trained / "final.ckpt").read_bytes()[:-3])
    assert main(["eval", "--manifest", str(corpus / "manifest.csv"), "--checkpoint", str(bad),
                 "--out", str(tmp_path / "e")]) == 1


def test_predict(corpus, trained, tmp_path):
    m = load_manifest(str(corpus / "manifest.csv"))
    rec = m.records[0]
    out = tmp_path / "p" / "series.csv"
    assert main(["predict", "--manifest", str(corpus / "manifest.csv"), "--checkpoint", str(trained / "final.ckpt"),
                 "--video-id", rec.video_id, "--out", str(out), "--segments", "8"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "frame,score,label" and len(lines) == rec.n_frames + 1


def test_predict_unknown_video_exit_1(corpus, trained, tmp_path):
    assert main(["predict", "--manifest", str(corpus / "manifest.csv"), "--checkpoint", str(trained / "final.ckpt"),
                 "--video-id", "nope", "--out", str(tmp_path / "x.csv")]) == 1


def test_gradcheck(capsys):
    assert main(["gradcheck", "--dim", "5", "--seed", "3"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_impossible_tolerance_exit_2():
    assert main(["gradcheck", "--dim", "5", "--seed", "3", "--configs", "2", "--tolerance", "0"]) == 2


def test_concat(corpus, tmp_path):
    out = tmp_path / "cat"
    assert main(["concat", "--manifests", str(corpus / "manifest.csv"), str(corpus / "manifest.csv"),
                 "--out", str(out)]) == 0
    m = load_manifest(str(out / "manifest.csv"))
    assert m.dim == 12 and len(m.records) == 8
    assert all(len(r.feature_paths) == 2 for r in m.records)
