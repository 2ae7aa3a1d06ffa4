import json
import subprocess

import numpy as np
import pytest

from elias.cli import git_hash, main, resolve_config, build_parser
from elias.data import save_xmc_dataset
from elias.synthetic import make_planted_dataset

SMALL_FLAGS = ["--num-clusters", "8", "--alpha", "2", "--beta", "20", "--kappa", "24", "--K", "48", "--b", "2",
               "--num-epochs", "4", "--batch-size", "64", "--dim", "16", "--lr-phi", "0.001"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    train, test, _ = make_planted_dataset(num_labels=64, num_train=600, num_test=200, num_topics=8,
                                          words_per_topic=12, noise_words=32, seed=2)
    save_xmc_dataset(train, str(d / "train.txt"))
    save_xmc_dataset(test.subset(np.arange(100)), str(d / "val.txt"))
    save_xmc_dataset(test.subset(np.arange(100, 200)), str(d / "test.txt"))
    return d


@pytest.fixture(scope="module")
def pipeline(files):
    d = files
    run = lambda *a: main([str(x) for x in a])  # noqa: E731
    assert run("train-stage1", "--train", d / "train.txt", "--out", d / "s1.ckpt", *SMALL_FLAGS) == 0
    assert run("init-adjacency", "--ckpt", d / "s1.ckpt", "--train", d / "train.txt", "--out", d / "init.ckpt") == 0
    assert run("train-stage2", "--ckpt", d / "init.ckpt", "--train", d / "train.txt", "--out", d / "s2.ckpt") == 0
    assert run("predict", "--ckpt", d / "s2.ckpt", "--data", d / "test.txt", "--topk", 10, "--out", d / "pred.txt") == 0
    return d


def test_full_pipeline(pipeline, capsys):
    d = pipeline
    run = lambda *a: main([str(x) for x in a])  # noqa: E731
    assert run("train-ranker", "--ckpt", d / "s2.ckpt", "--train", d / "train.txt", "--out", d / "ranker.txt") == 0
    assert run("calibrate", "--ckpt", d / "s2.ckpt", "--ranker", d / "ranker.txt", "--val", d / "val.txt",
               "--train", d / "train.txt", "--out", d / "calib.json") == 0
    assert run("predict", "--ckpt", d / "s2.ckpt", "--data", d / "test.txt", "--topk", 10, "--ranker",
               d / "ranker.txt", "--calibration", d / "calib.json", "--train", d / "train.txt",
               "--out", d / "pred_rr.txt") == 0
    assert run("prune", "--ckpt", d / "s2.ckpt", "--threshold", 0.01, "--out", d / "pruned.ckpt") == 0
    assert run("ensemble", "--preds", d / "pred.txt", d / "pred_rr.txt", "--out", d / "ens.txt") == 0
    capsys.readouterr()
    results = {}
    for name in ("pred", "pred_rr"):
        assert run("evaluate", "--pred", d / f"{name}.txt", "--truth", d / "test.txt", "--recall-k", 10) == 0
        results[name] = json.loads(capsys.readouterr().out)
    assert results["pred"]["R@10"] == results["pred_rr"]["R@10"]
    for name in ("s1.ckpt", "s2.ckpt", "ranker.txt", "calib.json", "pruned.ckpt"):
        assert (d / f"{name}.manifest.json").exists()


def test_evaluate_json(pipeline, capsys):
    d = pipeline
    capsys.readouterr()
    assert main(["evaluate", "--pred", str(d / "pred.txt"), "--truth", str(d / "test.txt"), "--k", "1,3,5",
                 "--ndcg", "--train", str(d / "train.txt")]) == 0
    out = json.loads(capsys.readouterr().out)
    for k in (1, 3, 5):
        assert 0 <= out[f"P@{k}"] <= 1 and f"nDCG@{k}" in out and f"PSP@{k}" in out


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["evaluate", "--bogus"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_k_list_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["evaluate", "--pred", "a", "--truth", "b", "--k", "1,x"])
    assert err.value.code == 2


def test_stage2_without_init_exits_1(pipeline, capsys):
    d = pipeline
    code = main(["train-stage2", "--ckpt", str(d / "s1.ckpt"), "--train", str(d / "train.txt"),
                 "--out", str(d / "bad.ckpt")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "InvariantError" and "init-adjacency" in err["message"]
    assert not (d / "bad.ckpt").exists()


def test_missing_file_exits_1(tmp_path, capsys):
    assert main(["evaluate", "--pred", str(tmp_path / "nope.txt"), "--truth", str(tmp_path / "t.txt")]) == 1
    assert "not found" in json.loads(capsys.readouterr().err)["message"]


def test_manifest_hash_matches_git(pipeline):
    d = pipeline
    man = json.loads((d / "s1.ckpt.manifest.json").read_text())
    ref = subprocess.run(["git", "hash-object", str(d / "train.txt")], capture_output=True, text=True, check=True)
    assert man["inputs"]["train"]["hash"] == ref.stdout.strip() == git_hash(str(d / "train.txt"))
    assert man["seed"] == 0 and man["config"]["num_clusters"] == 8


def test_config_layering(tmp_path, monkeypatch):
    toml = tmp_path / "c.toml"
    toml.write_text('alpha = 3.0\nb = 4\nnum_clusters = 16\n')
    parser = build_parser()
    cfg = resolve_config(parser.parse_args(["cluster", "--train", "x", "--out", "y", "--config", str(toml), "--b", "2"]))
    assert cfg.alpha == 3.0 and cfg.b == 2 and cfg.num_clusters == 16 and cfg.lam == 0.05
    monkeypatch.setenv("ELIAS_THREADS", "3")
    assert resolve_config(parser.parse_args(["cluster", "--train", "x", "--out", "y"])).threads == 3
    assert resolve_config(parser.parse_args(["cluster", "--train", "x", "--out", "y", "--threads", "2"])).threads == 2
    toml.write_text("nonsense = 1\n")
    with pytest.raises(Exception, match="invalid config"):
        resolve_config(parser.parse_args(["cluster", "--train", "x", "--out", "y", "--config", str(toml)]))


def test_idempotent_artifacts(pipeline):
    d = pipeline
    for cmd, out in (("train-stage1", "s1b.ckpt"), ("cluster", "part_a.bin"), ("cluster", "part_b.bin")):
        assert main([cmd, "--train", str(d / "train.txt"), "--out", str(d / out), *SMALL_FLAGS]) == 0
    assert (d / "s1b.ckpt").read_bytes() == (d / "s1.ckpt").read_bytes()
    assert (d / "part_a.bin").read_bytes() == (d / "part_b.bin").read_bytes()
    assert main(["predict", "--ckpt", str(d / "s2.ckpt"), "--data", str(d / "test.txt"), "--topk", "10",
                 "--out", str(d / "pred2.txt")]) == 0
    assert (d / "pred2.txt").read_bytes() == (d / "pred.txt").read_bytes()


def test_ingest_round_trip(files, capsys):
    d = files
    assert main(["ingest", "--input", str(d / "train.txt"), "--out", str(d / "tr2.txt"), "--val-size", "50",
                 "--val-out", str(d / "va2.txt"), "--propensity-out", str(d / "prop.txt")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["points"] == 550
    assert np.loadtxt(d / "prop.txt").shape == (64,)
