import csv
import json

import numpy as np
import pytest

from rpq.cli import main, read_manifest
from rpq.dataset import compute_ground_truth, load_ground_truth, load_vectors
from rpq.pq import load_codes
from rpq.trainer import load_checkpoint


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base, queries = root / "base.fvecs", root / "q.fvecs"
    assert main(["synth", "--out", str(base), "--n", "400", "--dim", "16", "--queries", "25",
                 "--queries-out", str(queries), "--seed", "2"]) == 0
    assert main(["gt", "--base", str(base), "--queries", str(queries), "--k", "10", "--out", str(root / "gt.ivecs")]) == 0
    assert main(["build", "--data", str(base), "--out", str(root / "g.bin"), "--max-degree", "12",
                 "--build-beam", "24", "--seed", "1"]) == 0
    return root


def run_train(root, name, *extra):
    return main(["train", "--data", str(root / "base.fvecs"), "--graph", str(root / "g.bin"),
                 "--out", str(root / name), "--m", "4", "--k", "16", "--beam", "8", "--kpos", "2", "--kneg", "4",
                 "--queries-per-epoch", "40", "--batch-size", "64", "--triplets", "16", "--kmeans-iters", "5",
                 "--lr", "1e-2", "--seed", "0", *extra])


def test_missing_required_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["build", "--out", "x.bin"])
    assert exc.value.code == 2
    assert "--data" in capsys.readouterr().err


def test_build_is_deterministic(bundle, tmp_path):
    assert main(["build", "--data", str(bundle / "base.fvecs"), "--out", str(tmp_path / "g2.bin"),
                 "--max-degree", "12", "--build-beam", "24", "--seed", "1"]) == 0
    assert (tmp_path / "g2.bin").read_bytes() == (bundle / "g.bin").read_bytes()
    assert read_manifest(bundle / "g.bin")["D"] == "16"


def test_gt_command(bundle, tmp_path):
    base = load_vectors(bundle / "base.fvecs")
    queries = load_vectors(bundle / "q.fvecs")
    gt = load_ground_truth(bundle / "gt.ivecs")
    np.testing.assert_array_equal(gt.neighbors[3], compute_ground_truth(base.data, queries.data[3:4], 10).neighbors[0])
    main(["gt", "--base", str(bundle / "base.fvecs"), "--queries", str(bundle / "base.fvecs"), "--k", "1",
          "--out", str(tmp_path / "self.ivecs")])
    np.testing.assert_array_equal(load_ground_truth(tmp_path / "self.ivecs").neighbors[:, 0], np.arange(400))


def test_baseline_and_zero_epochs(bundle):
    assert run_train(bundle, "pq.ckpt", "--baseline", "pq") == 0
    assert run_train(bundle, "zero.ckpt", "--epochs", "0") == 0
    pq, _ = load_checkpoint(bundle / "pq.ckpt")
    zero, _ = load_checkpoint(bundle / "zero.ckpt")
    assert np.all(pq.skew.upper == 0) and pq.alpha is None
    assert zero.alpha == 1.0
    np.testing.assert_array_equal(pq.codebook.words, zero.codebook.words)
    codes, k = load_codes(bundle / "pq.ckpt.codes")
    assert codes.shape == (400, 4) and k == 16


def test_training_run_logs_every_epoch(bundle):
    assert run_train(bundle, "rpq.ckpt", "--epochs", "6") == 0
    rows = list(csv.DictReader(open(bundle / "rpq.ckpt.loss.csv")))
    assert len(rows) == 6
    joint = [float(r["l_routing"]) + float(r["alpha"]) * float(r["l_neighborhood"]) for r in rows]
    assert joint[-1] < joint[0]
    assert read_manifest(bundle / "rpq.ckpt")["M"] == "4"


def search(root, model, *extra):
    return main(["search", "--graph", str(root / "g.bin"), "--model", str(root / model),
                 "--codes", str(root / f"{model}.codes"), "--queries", str(root / "q.fvecs"),
                 "--gt", str(root / "gt.ivecs"), "--beam", "16", "--k", "10", *extra])


def test_search_reports(bundle, tmp_path, capsys):
    run_train(bundle, "pq.ckpt", "--baseline", "pq")
    capsys.readouterr()
    assert search(bundle, "pq.ckpt", "--mode", "memory", "--json", str(tmp_path / "m.json"),
                  "--csv", str(tmp_path / "r.csv"), "--repeats", "2") == 0
    mem = json.loads((tmp_path / "m.json").read_text())
    assert 0 <= mem["recall_at_k"] <= 1 and mem["mean_vector_fetches"] == 0 and mem["qps"] > 0
    assert search(bundle, "pq.ckpt", "--mode", "hybrid", "--data", str(bundle / "base.fvecs"),
                  "--json", str(tmp_path / "h.json"), "--csv", str(tmp_path / "r.csv")) == 0
    hyb = json.loads((tmp_path / "h.json").read_text())
    assert hyb["recall_at_k"] >= mem["recall_at_k"]
    assert hyb["mean_vector_fetches"] > 0 and hyb["simulated_io_ms"] > 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["mode"] for r in rows] == ["memory", "hybrid"]
    assert float(rows[0]["recall_at_k"]) == mem["recall_at_k"]


def test_json_roundtrip_on_stdout(bundle, capsys):
    run_train(bundle, "pq.ckpt", "--baseline", "pq")
    capsys.readouterr()
    assert search(bundle, "pq.ckpt", "--json", "-") == 0
    record = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert json.loads(json.dumps(record)) == record
    assert set(record) >= {"recall_at_k", "qps", "mean_hops", "mean_vector_fetches", "simulated_io_ms", "config"}


def test_manifest_mismatch_is_a_config_error(bundle, tmp_path, capsys):
    run_train(bundle, "pq.ckpt", "--baseline", "pq")
    other = tmp_path / "other.ckpt"
    main(["train", "--data", str(bundle / "base.fvecs"), "--graph", str(bundle / "g.bin"), "--out", str(other),
          "--m", "2", "--k", "16", "--baseline", "pq", "--kmeans-iters", "3"])
    code = main(["search", "--graph", str(bundle / "g.bin"), "--model", str(other),
                 "--codes", str(bundle / "pq.ckpt.codes"), "--queries", str(bundle / "q.fvecs")])
    assert code == 3
    assert "configuration error" in capsys.readouterr().err


def test_missing_file_is_an_error(tmp_path, capsys):
    code = main(["build", "--data", str(tmp_path / "nope.fvecs"), "--out", str(tmp_path / "g.bin")])
    assert code == 1
