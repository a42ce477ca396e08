import json
import math

import numpy as np
import pytest

from helpers import write_corpus
from trustquant.model import ModelConfig, build
from trustquant.quantizer import QuantConfig
from trustquant.tensor import Rng
from trustquant.trainer import (
    AdamWState,
    BatchStream,
    TrainConfig,
    TrainerError,
    adamw_step,
    clip_grad_norm,
    eval_loss,
    ingest,
    lr_at,
    peak_lr_for,
    plan_tokens,
    train,
)


def basic_cfg(**kw):
    defaults = dict(peak_lr=1e-3, total_steps=100, batch_tokens=256, data_path="unused")
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestSchedule:
    def test_peak_at_warmup_end(self):
        cfg = basic_cfg(total_steps=100)
        assert lr_at(10, cfg) == pytest.approx(cfg.peak_lr)

    def test_zero_at_total_steps(self):
        cfg = basic_cfg()
        assert lr_at(cfg.total_steps, cfg) == pytest.approx(0.0)

    def test_half_peak_at_decay_midpoint(self):
        cfg = basic_cfg(total_steps=100)
        assert lr_at(55, cfg) == pytest.approx(cfg.peak_lr / 2)

    def test_starts_at_zero(self):
        assert lr_at(0, basic_cfg()) == 0.0

    def test_continuous(self):
        cfg = basic_cfg(total_steps=200)
        lrs = [lr_at(s, cfg) for s in range(201)]
        deltas = np.abs(np.diff(lrs))
        assert deltas.max() < cfg.peak_lr * 0.06

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(101, basic_cfg(total_steps=100))

    def test_warmup_frac_validated(self):
        with pytest.raises(ValueError):
            basic_cfg(warmup_frac=0.0)


class TestAdamW:
    def test_pure_decay_with_zero_gradient(self):
        cfg = basic_cfg(weight_decay=0.1)
        p = {"w": np.full(3, 2.0)}
        adamw_step(p, {"w": np.zeros(3)}, AdamWState(), lr=0.01, cfg=cfg)
        assert np.allclose(p["w"], 2.0 * (1 - 0.001))

    def test_first_step_direction(self):
        cfg = basic_cfg(weight_decay=0.0)
        g = np.array([0.5, -2.0, 0.01])
        p = {"w": np.zeros(3)}
        adamw_step(p, {"w": g.copy()}, AdamWState(), lr=0.01, cfg=cfg)
        want = -0.01 * g / (np.abs(g) + cfg.eps)
        assert np.allclose(p["w"], want, rtol=1e-6)

    def test_quadratic_bowl_convergence(self):
        # convex oracle: linearly annealed lr, 100 steps, below 1e-3
        cfg = basic_cfg(weight_decay=0.0)
        target = np.array([0.2, 0.1, -0.4])
        p = {"w": np.array([1.0, -0.7, 0.3])}
        state = AdamWState()
        for step in range(100):
            grads = {"w": p["w"] - target}
            adamw_step(p, grads, state, lr=0.3 * (1 - step / 100), cfg=cfg)
        assert np.abs(p["w"] - target).max() < 1e-3

    def test_nan_gradient_aborts(self):
        cfg = basic_cfg()
        with pytest.raises(TrainerError, match="non-finite"):
            adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, AdamWState(), 0.01, cfg)

    def test_decay_skipped_for_norm_gains(self):
        cfg = basic_cfg(weight_decay=0.1)
        p = {"norm": np.ones(3)}
        adamw_step(p, {"norm": np.zeros(3)}, AdamWState(), 0.01, cfg, skip_decay={"norm"})
        assert np.array_equal(p["norm"], np.ones(3))


class TestClip:
    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_grad_norm(g, 1.0)
        assert norm == pytest.approx(0.5)
        assert np.array_equal(clipped["a"], [0.3, 0.4])

    def test_scaled_to_threshold(self):
        g = {"a": np.array([4.0, 0.0]), "b": np.zeros(2)}
        clipped, norm = clip_grad_norm(g, 1.0)
        assert norm == pytest.approx(4.0)
        new_norm = math.sqrt(sum(float(np.sum(x**2)) for x in clipped.values()))
        assert abs(new_norm - 1.0) < 1e-6

    def test_single_tensor_matches_per_tensor_formula(self):
        g = {"a": np.array([3.0, 4.0])}
        clipped, norm = clip_grad_norm(g, 1.0)
        assert np.allclose(clipped["a"], np.array([3.0, 4.0]) / 5.0)


class TestIngest:
    def test_bytes_are_token_ids(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_bytes(b"abc")
        assert ingest(path, 3).tolist() == [[97, 98, 99]]

    def test_window_count_is_floor(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_bytes(b"x" * 100)
        assert ingest(path, 32).shape == (3, 32)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_bytes(b"")
        with pytest.raises(ValueError, match="empty"):
            ingest(path, 8)

    def test_batch_order_deterministic(self):
        windows = np.arange(64).reshape(16, 4)
        a = BatchStream(windows, 4, seed=9)
        b = BatchStream(windows, 4, seed=9)
        for _ in range(8):  # crosses an epoch boundary
            assert np.array_equal(a.next_batch(), b.next_batch())


class TestPlanning:
    def test_plan_tokens_100x(self):
        assert plan_tokens(30_000_000) == 3_000_000_000

    def test_lr_anchors_take_precedence(self):
        assert peak_lr_for(30e6) == 1.2e-3
        assert peak_lr_for(430e6) == 1.5e-4

    def test_lr_inverse_interpolation(self):
        assert peak_lr_for(120e6) == pytest.approx(6e4 / 120e6)
        assert peak_lr_for(100e6) == 6e-4  # anchor agrees with the 1/N fit


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    corpus = write_corpus(root / "corpus.txt", 96_000, seed=5)
    cfg = ModelConfig(
        num_blocks=1, hidden_size=32, num_heads=2, max_seq_len=32,
        quant=QuantConfig(format="none", hadamard=False),
    )
    model = build(cfg, Rng(1))
    tcfg = TrainConfig(
        peak_lr=3e-3, total_steps=200, batch_tokens=256,
        data_path=str(corpus), seed=11,
    )
    records = train(model, tcfg, root / "out")
    return root, model, tcfg, records


class TestTrainLoop:
    def test_smoothed_loss_decreases_after_warmup(self, tiny_run):
        _, _, _, records = tiny_run
        losses = np.array([r["loss"] for r in records])
        segments = [losses[20:65].mean(), losses[65:110].mean(),
                    losses[110:155].mean(), losses[155:200].mean()]
        assert all(b < a for a, b in zip(segments, segments[1:])), segments

    def test_lr_column_matches_schedule(self, tiny_run):
        _, _, tcfg, records = tiny_run
        for r in records[:: 17]:
            assert r["lr"] == lr_at(r["step"], tcfg)

    def test_metrics_jsonl_schema(self, tiny_run):
        root, _, _, records = tiny_run
        lines = (root / "out" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == len(records)
        row = json.loads(lines[0])
        assert set(row) >= {"step", "lr", "loss", "grad_norm", "untrusted_fraction"}

    def test_checkpoint_written(self, tiny_run):
        root, _, _, _ = tiny_run
        assert (root / "out" / "model.ckpt").exists()

    def test_identical_runs_identical_logs(self, tmp_path):
        corpus = write_corpus(tmp_path / "c.txt", 16_000, seed=6)
        def one(out):
            cfg = ModelConfig(num_blocks=1, hidden_size=32, num_heads=2, max_seq_len=32,
                              quant=QuantConfig(format="int4"))
            model = build(cfg, Rng(3))
            tcfg = TrainConfig(peak_lr=2e-3, total_steps=20, batch_tokens=128,
                               data_path=str(corpus), seed=21)
            train(model, tcfg, tmp_path / out)
            return (tmp_path / out / "metrics.jsonl").read_text()

        assert one("a") == one("b")

    def test_eval_matches_train_corpus_loss(self, tiny_run):
        root, model, tcfg, records = tiny_run
        windows = ingest(tcfg.data_path, 32)
        loss = eval_loss(model, windows[:32])
        assert loss == pytest.approx(records[-1]["loss"], rel=0.15)

    def test_env_seed_override(self, tmp_path, monkeypatch):
        corpus = write_corpus(tmp_path / "c.txt", 16_000, seed=7)
        def one(out, env):
            if env is not None:
                monkeypatch.setenv("QUEST_SEED", str(env))
            else:
                monkeypatch.delenv("QUEST_SEED", raising=False)
            cfg = ModelConfig(num_blocks=1, hidden_size=32, num_heads=2, max_seq_len=32,
                              quant=QuantConfig(format="none", hadamard=False))
            model = build(cfg, Rng(3))
            tcfg = TrainConfig(peak_lr=2e-3, total_steps=5, batch_tokens=128,
                               data_path=str(corpus), seed=21)
            return train(model, tcfg, tmp_path / out)

        base = one("a", None)
        override = one("b", 99)
        same = one("c", 99)
        assert [r["loss"] for r in override] == [r["loss"] for r in same]
        assert [r["loss"] for r in base] != [r["loss"] for r in override]
