"""Tests for the optimizer, training loop, calibration and pipeline runner."""

import json

import numpy as np
import pytest

from lowrank_ctr.config import load_config
from lowrank_ctr.checkpoint import save_checkpoint
from lowrank_ctr.data import SynthSpec, split, synth_generate
from lowrank_ctr.errors import ConfigError, EmptyAccumulatorError
from lowrank_ctr.nn import forward, init_deepfm, l2_penalty
from lowrank_ctr.train import (
    Adam,
    TrainConfig,
    calibrate,
    evaluate_model,
    finetune,
    loss_bce_l2,
    run_pipeline,
    train,
    validate_pipeline,
)


def reference_adam(p0, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook recurrence, written independently of the optimizer class."""
    p = p0.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p)
    return p


def small_model(seed=0):
    return init_deepfm([10, 10], 4, [8, 8, 8], seed=seed, dropout_rate=0.0)


def params_bytes(model):
    return b"".join(p.tobytes() for _, p in model.named_parameters())


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(10)]
    expected = reference_adam(p, grads, lr=0.01, wd=0.004)
    opt = Adam(0.01, weight_decay=0.004)
    live = p.copy()
    for g in grads:
        opt.step([("w", live)], {"w": g})
    np.testing.assert_allclose(live, expected, rtol=1e-12, atol=1e-14)


def test_adam_state_is_per_parameter():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(5), rng.standard_normal((2, 2))
    ga = [rng.standard_normal(5) for _ in range(6)]
    gb = [rng.standard_normal((2, 2)) for _ in range(6)]
    opt = Adam(0.05)
    la, lb = a.copy(), b.copy()
    for t in range(6):
        opt.step([("a", la), ("b", lb)], {"a": ga[t], "b": gb[t]})
    np.testing.assert_allclose(la, reference_adam(a, ga, 0.05, 0.0), rtol=1e-12)
    np.testing.assert_allclose(lb, reference_adam(b, gb, 0.05, 0.0), rtol=1e-12)


def test_decay_is_decoupled_from_moments():
    # with zero gradients the moments stay zero and the whole update
    # collapses to p *= (1 - lr * wd) per step, the decoupling signature
    p = np.array([2.0, -3.0])
    opt = Adam(0.1, weight_decay=0.5)
    for _ in range(4):
        opt.step([("w", p)], {"w": np.zeros(2)})
    np.testing.assert_allclose(p, np.array([2.0, -3.0]) * (1 - 0.1 * 0.5) ** 4,
                               rtol=1e-12)


def test_zero_learning_rate_freezes_everything():
    model = small_model()
    before = params_bytes(model)
    ds = synth_generate(SynthSpec(n_samples=200, vocab_sizes=[10, 10], seed=3))
    train(model, ds, TrainConfig(learning_rate=0.0, batch_size=50, epochs=2))
    assert params_bytes(model) == before


def test_zero_epochs_is_a_no_op():
    model = small_model()
    before = params_bytes(model)
    ds = synth_generate(SynthSpec(n_samples=100, vocab_sizes=[10, 10], seed=3))
    rows = train(model, ds, TrainConfig(epochs=0))
    assert rows == []
    assert params_bytes(model) == before
    with pytest.raises(ConfigError):
        train(model, ds, TrainConfig(epochs=-1))
    with pytest.raises(ConfigError):
        train(model, ds, TrainConfig(batch_size=0))


def test_training_reduces_loss_and_reports_rows(tmp_path):
    ds = synth_generate(
        SynthSpec(n_samples=5000, vocab_sizes=[30, 30], latent_rank=2,
                  noise=0.0, seed=7)
    )
    tr, te = split(ds, 0.2, 0)
    model = init_deepfm(tr.vocab_sizes, 8, [16, 16, 16], seed=0, dropout_rate=0.0)
    path = tmp_path / "metrics.jsonl"
    rows = train(
        model,
        tr,
        TrainConfig(learning_rate=1e-2, batch_size=200, epochs=4,
                    weight_decay=0.0, l2_ratio=0.0, seed=1),
        test_dataset=te,
        metrics_path=path,
    )
    assert len(rows) == 4
    assert rows[-1]["train_loss"] < rows[0]["train_loss"]
    assert rows[-1]["test_auc"] > 0.75
    for row in rows:
        assert {"stage", "epoch", "train_loss", "train_auc", "train_logloss",
                "wall_seconds", "test_auc", "test_logloss"} <= set(row)
    logged = [json.loads(line) for line in path.read_text().splitlines()]
    assert logged == rows


def test_training_is_deterministic():
    ds = synth_generate(SynthSpec(n_samples=1000, vocab_sizes=[10, 10], seed=5))
    cfg = TrainConfig(learning_rate=1e-3, batch_size=100, epochs=2, seed=42)
    a = small_model(seed=9)
    b = small_model(seed=9)
    train(a, ds, cfg)
    train(b, ds, cfg)
    assert params_bytes(a) == params_bytes(b)


def test_finetune_runs_exactly_one_epoch():
    ds = synth_generate(SynthSpec(n_samples=500, vocab_sizes=[10, 10], seed=2))
    model = small_model()
    rows = finetune(model, ds, TrainConfig(learning_rate=1e-3, epochs=7,
                                           batch_size=100))
    assert len(rows) == 1
    assert rows[0]["stage"] == "finetune"


def test_loss_bce_l2_values():
    labels = np.array([0, 1, 0, 1], dtype=np.uint8)
    assert abs(loss_bce_l2(np.zeros(4), labels) - np.log(2.0)) < 1e-12
    good = np.array([-40.0, 40.0, -40.0, 40.0])
    assert loss_bce_l2(good, labels) <= 1e-9
    model = small_model()
    base = loss_bce_l2(np.zeros(4), labels)
    with_pen = loss_bce_l2(np.zeros(4), labels, model=model, l2_ratio=1e-3)
    np.testing.assert_allclose(with_pen - base, 1e-3 * l2_penalty(model),
                               rtol=1e-12)


def test_calibrate_counts_and_batch_invariance():
    ds = synth_generate(SynthSpec(n_samples=1234, vocab_sizes=[10, 10], seed=8))
    model = small_model(seed=4)
    taps_a = calibrate(model, ds, ["emb.0", "mlp.1"], batch_size=10000)
    taps_b = calibrate(model, ds, ["emb.0", "mlp.1"], batch_size=77)
    assert set(taps_a) == {"emb.0", "mlp.1"}
    for tid in taps_a:
        acc_a, acc_b = taps_a[tid].accumulator, taps_b[tid].accumulator
        assert acc_a.n == len(ds) and acc_b.n == len(ds)
        mu_a, cov_a = acc_a.covariance()
        mu_b, cov_b = acc_b.covariance()
        np.testing.assert_allclose(mu_a, mu_b, atol=1e-12)
        np.testing.assert_allclose(cov_a, cov_b, atol=1e-12)
    assert taps_a["emb.0"].accumulator.dim == model.tables[0].dim
    assert taps_a["mlp.1"].accumulator.dim == model.mlp[1].weight.shape[0]


def test_calibrate_matches_direct_capture():
    ds = synth_generate(SynthSpec(n_samples=400, vocab_sizes=[10, 10], seed=8))
    model = small_model(seed=4)
    taps = calibrate(model, ds, ["mlp.2"])
    trace = forward(model, ds.batch(slice(None)), mode="infer", capture=["mlp.2"])
    acts = trace.captured["mlp.2"].astype(np.float64)
    mu, cov = taps["mlp.2"].accumulator.covariance()
    np.testing.assert_allclose(mu, acts.mean(axis=0), atol=1e-10)
    centered = acts - acts.mean(axis=0)
    np.testing.assert_allclose(cov, centered.T @ centered / len(acts), atol=1e-10)


def test_calibrate_rejects_bad_taps_and_empty_data():
    ds = synth_generate(SynthSpec(n_samples=10, vocab_sizes=[5, 5], seed=0))
    model = small_model()
    with pytest.raises(ConfigError):
        calibrate(model, ds, ["emb.9"])
    with pytest.raises(ConfigError):
        calibrate(model, ds, ["conv.0"])
    empty = ds.subset(np.array([], dtype=np.int64))
    taps = calibrate(model, empty, ["emb.0"])
    with pytest.raises(EmptyAccumulatorError):
        taps["emb.0"].accumulator.covariance()


GOOD_CHAINS = [
    ["train_baseline", "eval"],
    ["train_baseline", "calibrate", "compress", "finetune", "eval"],
    ["train_baseline", "calibrate", "eval", "compress", "eval", "finetune"],
    ["train_baseline", "calibrate", "compress", "finetune",
     "calibrate", "compress", "finetune", "eval"],
]

BAD_CHAINS = [
    [],
    ["train_baseline", "compress", "finetune"],            # no calibrate
    ["train_baseline", "calibrate", "compress"],            # no finetune
    ["train_baseline", "calibrate", "compress", "eval"],    # eval is not a finetune
    ["train_baseline", "calibrate", "compress", "finetune", "finetune"],
    ["train_baseline", "calibrate", "finetune", "compress", "finetune"],
    ["train_baseline", "warmup"],                           # unknown stage
]


def test_validate_pipeline_accepts_legal_chains():
    for chain in GOOD_CHAINS:
        validate_pipeline([{"stage": s} for s in chain])


def test_validate_pipeline_rejects_broken_chains():
    for chain in BAD_CHAINS:
        with pytest.raises(ConfigError):
            validate_pipeline([{"stage": s} for s in chain])


def tiny_pipeline_config(tmp_path, stages, seed=0, n_samples=2000):
    return load_config(
        {
            "profile": "synth",
            "seed": seed,
            "data": {
                "synth": {
                    "n_samples": n_samples,
                    "vocab_sizes": [30, 30, 30],
                    "latent_rank": 2,
                    "noise": 0.05,
                    "seed": 11,
                },
                "test_fraction": 0.2,
            },
            "model": {
                "embed_dim": 8,
                "hidden_dims": [16, 16, 16],
                "dropout_rate": 0.0,
            },
            "stages": stages,
        }
    )


IDENTITY_STAGES = [
    {"stage": "train_baseline", "epochs": 1, "learning_rate": 1e-3},
    {"stage": "eval"},
    {"stage": "calibrate", "taps": "mlp"},
    {"stage": "compress", "method": "afm-mlp", "rank": 16, "insert_relu": False},
    {"stage": "finetune", "learning_rate": 0.0},
    {"stage": "eval"},
]


def test_full_rank_pipeline_is_metric_neutral(tmp_path):
    resolved = tiny_pipeline_config(tmp_path, IDENTITY_STAGES)
    out = tmp_path / "run"
    manifest = run_pipeline(resolved, out)
    assert [s["status"] for s in manifest["stages"]] == ["completed"] * 6
    rows = [json.loads(line)
            for line in (out / "metrics.jsonl").read_text().splitlines()]
    by_stage = {r["stage"]: r for r in rows}
    base = by_stage["stage01-eval"]
    pre = by_stage["stage03-afm-mlp:pre-finetune"]
    final = by_stage["stage05-eval"]
    for row in (pre, final):
        assert abs(row["test_auc"] - base["test_auc"]) < 1e-6
        assert abs(row["test_logloss"] - base["test_logloss"]) < 1e-6


def test_pipeline_artifacts_and_manifest(tmp_path):
    resolved = tiny_pipeline_config(tmp_path, IDENTITY_STAGES)
    out = tmp_path / "run"
    manifest = run_pipeline(resolved, out)
    expected = {
        "metrics.jsonl",
        "checkpoints/stage00-train_baseline.lrck",
        "reports/stage03-afm-mlp.json",
        "checkpoints/stage03-afm-mlp.lrck",
        "checkpoints/stage04-finetune.lrck",
        "manifest.json",
    }
    assert set(manifest["artifacts"]) == expected
    for rel in expected:
        assert (out / rel).exists()
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk == manifest
    assert on_disk["config_hash"] == resolved.config_hash
    report = json.loads((out / "reports/stage03-afm-mlp.json").read_text())
    assert report["method"] == "afm-mlp"
    assert report["params_before"]["total"] > 0


def test_pipeline_failure_is_recorded(tmp_path):
    stages = [
        {"stage": "train_baseline", "epochs": 0},
        {"stage": "calibrate", "taps": "emb"},
        # afm-mlp needs mlp taps; calibrating only embeddings breaks it
        {"stage": "compress", "method": "afm-mlp", "rank": 4},
        {"stage": "finetune"},
    ]
    resolved = tiny_pipeline_config(tmp_path, stages, n_samples=500)
    out = tmp_path / "run"
    with pytest.raises(Exception):
        run_pipeline(resolved, out)
    manifest = json.loads((out / "manifest.json").read_text())
    statuses = [s["status"] for s in manifest["stages"]]
    assert statuses[-1] == "failed"
    assert "error" in manifest["stages"][-1]


def test_pipeline_reruns_byte_identical(tmp_path):
    resolved = tiny_pipeline_config(tmp_path, IDENTITY_STAGES, n_samples=1000)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    run_pipeline(resolved, out_a)
    run_pipeline(resolved, out_b)
    for rel in ("checkpoints/stage00-train_baseline.lrck",
                "checkpoints/stage04-finetune.lrck"):
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()


def test_evaluate_model_matches_direct_metrics():
    ds = synth_generate(SynthSpec(n_samples=300, vocab_sizes=[10, 10], seed=6))
    model = small_model(seed=2)
    report = evaluate_model(model, ds, batch_size=64)
    assert report.n_samples == 300
    assert 0.0 <= report.auc <= 1.0
    assert report.logloss > 0.0
