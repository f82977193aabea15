"""End-to-end tests of the command line interface via main(argv)."""

import json

import pytest

from lowrank_ctr.checkpoint import load_checkpoint
from lowrank_ctr.cli import main


BASE_CONFIG = {
    "profile": "synth",
    "seed": 0,
    "data": {
        "synth": {
            "n_samples": 3000,
            "vocab_sizes": [20, 20, 20, 20],
            "latent_rank": 2,
            "noise": 0.05,
            "seed": 3,
        },
        "test_fraction": 0.2,
    },
    "model": {"embed_dim": 8, "hidden_dims": [16, 16, 16], "dropout_rate": 0.0},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A config file plus a trained baseline checkpoint, built once."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(BASE_CONFIG))
    out = root / "baseline"
    rc = main(["train", "--config", str(cfg), "--out", str(out),
               "--epochs", "2", "--learning-rate", "1e-2", "--batch-size", "100"])
    assert rc == 0
    ckpt = out / "checkpoints" / "stage00-train_baseline.lrck"
    assert ckpt.exists()
    return {"root": root, "config": cfg, "checkpoint": ckpt}


def test_train_writes_manifest_and_metrics(workdir):
    out = workdir["checkpoint"].parent.parent
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["profile"] == "synth"
    assert [s["status"] for s in manifest["stages"]] == ["completed", "completed"]
    lines = (out / "metrics.jsonl").read_text().splitlines()
    rows = [json.loads(l) for l in lines]
    assert any("test_auc" in r for r in rows)


def test_eval_reports_metrics(workdir, capsys, tmp_path):
    report = tmp_path / "eval.json"
    rc = main([
        "eval",
        "--config", str(workdir["config"]),
        "--model-in", str(workdir["checkpoint"]),
        "--report", str(report),
    ])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["split"] == "test"
    assert 0.5 < payload["auc"] <= 1.0
    assert payload["n_samples"] == 600
    assert json.loads(report.read_text()) == payload


def test_compress_mlp_then_finetune(workdir, capsys, tmp_path):
    small = tmp_path / "small.lrck"
    rc = main([
        "compress",
        "--config", str(workdir["config"]),
        "--model-in", str(workdir["checkpoint"]),
        "--model-out", str(small),
        "--method", "afm-mlp",
        "--rank", "4",
    ])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["method"] == "afm-mlp"
    assert set(report["components"]) == {"mlp.1", "mlp.2"}
    assert report["params_after"]["mlp"] < report["params_before"]["mlp"]
    model = load_checkpoint(small)
    assert model.mlp[1].weight.shape[0] == 4  # bottleneck layer

    tuned = tmp_path / "tuned.lrck"
    rc = main([
        "finetune",
        "--config", str(workdir["config"]),
        "--model-in", str(small),
        "--model-out", str(tuned),
        "--learning-rate", "1e-3",
    ])
    assert rc == 0
    row = json.loads(capsys.readouterr().out)
    assert row["stage"] == "finetune"
    assert tuned.exists()


def test_compress_embeddings_shrinks_tables(workdir, capsys, tmp_path):
    out = tmp_path / "emb.lrck"
    rc = main([
        "compress",
        "--config", str(workdir["config"]),
        "--model-in", str(workdir["checkpoint"]),
        "--model-out", str(out),
        "--method", "afm-emb",
        "--rank", "2",
    ])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["params_after"]["embeddings"] < report["params_before"]["embeddings"]
    assert report["components"]["fused_first_fc"] is True
    model = load_checkpoint(out)
    assert all(t.weights.shape[0] == 2 for t in model.tables)
    assert model.mlp[0].weight.shape[1] == 2 * 4  # fused first layer reads rank-2


def test_bench_reports_throughput(workdir, capsys):
    rc = main([
        "bench",
        "--config", str(workdir["config"]),
        "--model-in", str(workdir["checkpoint"]),
        "--batch-size", "100",
        "--batches", "20",
        "--warmup", "2",
    ])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["samples_per_second"] > 0
    assert report["batches_timed"] == 20
    assert report["batch_size"] == 100


def test_synth_command_writes_tsv(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"profile": "synth", "data": {"synth": {
        "n_samples": 100, "vocab_sizes": [5, 5], "seed": 1}}}))
    out = tmp_path / "rows.tsv"
    rc = main(["synth", "--config", str(cfg), "--out", str(out),
               "--n-samples", "80"])
    assert rc == 0
    assert len(out.read_text().splitlines()) == 80


def test_pipeline_command_end_to_end(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        **BASE_CONFIG,
        "data": {**BASE_CONFIG["data"],
                 "synth": {**BASE_CONFIG["data"]["synth"], "n_samples": 1500}},
        "pipeline": {"mlp": "svd-mlp", "emb": None, "mlp_rank": 8},
    }))
    out = tmp_path / "run"
    rc = main(["pipeline", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(s["status"] == "completed" for s in manifest["stages"])
    assert (out / "reports" / "stage02-svd-mlp.json").exists()


def test_exit_codes(tmp_path, capsys):
    # missing config file -> data error
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 3
    # config typo -> usage error
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"trainer": {}}))
    assert main(["train", "--config", str(bad)]) == 2
    # missing checkpoint -> data error
    cfg = tmp_path / "ok.json"
    cfg.write_text(json.dumps(BASE_CONFIG))
    assert main(["eval", "--config", str(cfg),
                 "--model-in", str(tmp_path / "absent.lrck")]) == 3
    capsys.readouterr()


def test_bench_rejects_oversized_batches(workdir, capsys):
    rc = main([
        "bench",
        "--config", str(workdir["config"]),
        "--model-in", str(workdir["checkpoint"]),
        "--batch-size", "100000",
    ])
    assert rc == 3
    assert "smaller than one batch" in capsys.readouterr().err
