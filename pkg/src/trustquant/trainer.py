"""AdamW training loop: cosine schedule with linear warmup, global-norm
clipping, byte-level data ingestion, JSONL metrics, checkpointing.

Master weights stay full-precision; quantization only ever touches the
forward/backward views inside the quantized linear layers. Weight decay is
decoupled and skipped for normalization gains (the architecture has no
biases). Runs are deterministic given the seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .model import Model, forward_loss, save_checkpoint
from .tensor import F32, Rng

# Table of published (size -> peak LR) anchors; between anchors the helper
# interpolates as peak_lr ~ 1/N calibrated at the 100M row.
LR_ANCHORS = {
    30e6: 1.2e-3,
    50e6: 1.2e-3,
    100e6: 6e-4,
    200e6: 3e-4,
    430e6: 1.5e-4,
    800e6: 7.5e-5,
}
TOKENS_PER_PARAM = 100


class TrainerError(RuntimeError):
    pass


class TrainingDiverged(TrainerError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float
    total_steps: int
    batch_tokens: int
    data_path: str = ""
    warmup_frac: float = 0.10
    betas: tuple[float, float] = (0.90, 0.95)
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 0  # 0 disables mid-run eval rows

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over warmup_frac * total, cosine decay to 0."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warmup_frac * cfg.total_steps
    if step <= warm:
        return cfg.peak_lr * step / warm
    progress = (step - warm) / (cfg.total_steps - warm)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def plan_tokens(n_params: int, ratio: float = TOKENS_PER_PARAM) -> int:
    """Token budget for a run: ratio x the non-embedding parameter count."""
    return int(ratio * n_params)


def peak_lr_for(n_params: float) -> float:
    """Published LR at its listed sizes; 1/N interpolation elsewhere."""
    for anchor, lr in LR_ANCHORS.items():
        if abs(n_params - anchor) <= 0.01 * anchor:
            return lr
    return 6e4 / n_params


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
    skip_decay=(),
) -> None:
    """Decoupled-weight-decay Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainerError(f"non-finite gradient in {name!r} at step {state.step}")
    beta1, beta2 = cfg.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype, copy=False)
        if cfg.weight_decay and name not in skip_decay:
            p *= 1.0 - lr * cfg.weight_decay


def clip_grad_norm(grads: dict[str, np.ndarray], threshold: float = 1.0):
    """Scale all gradients by threshold/norm when the global L2 norm exceeds
    the threshold. Returns (grads, pre-clip norm)."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > threshold:
        factor = threshold / norm
        for g in grads.values():
            g *= g.dtype.type(factor)
    return grads, norm


# --- data ---------------------------------------------------------------------

def ingest(path, seq_len: int) -> np.ndarray:
    """Bytes of `path` as token ids, chunked into floor(len/seq_len) windows."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        raise ValueError(f"empty corpus: {path}")
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    count = len(ids) // seq_len
    if count == 0:
        raise ValueError(f"corpus shorter than one {seq_len}-token window")
    return ids[: count * seq_len].reshape(count, seq_len)


class BatchStream:
    """Cycles over windows in a seeded shuffled order, epoch by epoch."""

    def __init__(self, windows: np.ndarray, batch_size: int, seed: int):
        self.windows = windows
        self.batch_size = max(1, batch_size)
        self.rng = Rng(seed)
        self._order = self.rng.permutation(len(windows))
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.windows))
            self._pos = 0
        idx = self._order[self._pos: self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.windows[idx]


# --- training loop --------------------------------------------------------------

def eval_loss(model: Model, windows: np.ndarray, batch_size: int = 16) -> float:
    """Token-weighted mean cross-entropy over all windows."""
    total, count = 0.0, 0
    for start in range(0, len(windows), batch_size):
        batch = windows[start: start + batch_size]
        loss, _, _ = forward_loss(model, batch)
        tokens = batch.shape[0] * (batch.shape[1] - 1)
        total += float(loss.value) * tokens
        count += tokens
    return total / count


def train(model: Model, cfg: TrainConfig, out_dir) -> list[dict]:
    """Run the loop; emits metrics.jsonl and model.ckpt under out_dir.

    Returns the list of per-step metric records. Aborts on divergence with
    the last good checkpoint saved.
    """
    os.makedirs(out_dir, exist_ok=True)
    seed = int(os.environ.get("QUEST_SEED", cfg.seed))
    seq_len = model.cfg.max_seq_len
    windows = ingest(cfg.data_path, seq_len)
    stream = BatchStream(windows, cfg.batch_tokens // seq_len, seed)
    eval_batch = windows[: min(len(windows), 8)]

    state = AdamWState()
    skip_decay = {n for n in model.params if model.is_norm_gain(n)}
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    records = []

    with open(metrics_path, "w") as out:
        for step in range(cfg.total_steps):
            batch = stream.next_batch()
            loss, tape, trace = forward_loss(model, batch)
            loss_val = float(loss.value)
            if not math.isfinite(loss_val):
                save_checkpoint(model, ckpt_path)
                raise TrainingDiverged(
                    f"loss diverged at step {step}; last good checkpoint at {ckpt_path}"
                )
            tape.backward(loss)
            grads = {
                name: trace.param_leaves[name].grad for name in model.params
            }
            grads, grad_norm = clip_grad_norm(grads, cfg.clip_norm)
            lr = lr_at(step, cfg)
            adamw_step(model.params, grads, state, lr, cfg, skip_decay)

            record = {
                "step": step,
                "lr": lr,
                "loss": loss_val,
                "grad_norm": grad_norm,
                "untrusted_fraction": {
                    name: ctx.untrusted_weight_fraction
                    for name, ctx in trace.layer_contexts.items()
                },
            }
            if cfg.eval_interval and (step + 1) % cfg.eval_interval == 0:
                record["eval_loss"] = eval_loss(model, eval_batch)
            records.append(record)
            out.write(json.dumps(record) + "\n")

    save_checkpoint(model, ckpt_path)
    return records
