"""Gradient-alignment measurement and trust-mask statistics.

Alignment runs backward twice on the same input: once with the model's
quantization, once with activation quantization disabled (weights stay
quantized), and reports the cosine similarity of the activation gradients
captured after each transformer block (block boundary = residual-stream
output). Undefined values (zero-norm gradients, empty mask denominators)
are reported explicitly as None, never silently dropped.

Estimator tags: "quest" (trust masks + Hadamard), "quest-no-ht" (trust
masks, no Hadamard), "ste" (straight-through, no Hadamard).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from .model import Model, forward_loss
from .quantizer import QuantConfig

ESTIMATOR_TAGS = ("quest", "quest-no-ht", "ste")


@dataclass
class AlignmentRecord:
    block: int
    tag: str
    xi: float | None
    sample: int


@dataclass
class MaskStats:
    step: int
    layer: str
    masked_fraction: float
    persistence: float | None


def estimator_config(base: QuantConfig, tag: str) -> QuantConfig:
    if tag == "quest":
        return dataclasses.replace(base, hadamard=True, estimator="trust")
    if tag == "quest-no-ht":
        return dataclasses.replace(base, hadamard=False, estimator="trust")
    if tag == "ste":
        return dataclasses.replace(base, hadamard=False, estimator="ste")
    raise ValueError(f"unknown estimator tag {tag!r}; expected one of {ESTIMATOR_TAGS}")


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    """Cosine similarity of flattened tensors; None on a zero-norm operand."""
    a = np.asarray(a).reshape(-1).astype(np.float64)
    b = np.asarray(b).reshape(-1).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(a @ b / (na * nb))


def _block_grads(model: Model, tokens: np.ndarray, quant: QuantConfig):
    loss, tape, trace = forward_loss(model, tokens, quant=quant)
    tape.backward(loss)
    return [node.grad for node in trace.block_outputs]


def grad_alignment(model: Model, tokens: np.ndarray, block: int,
                   quant: QuantConfig | None = None) -> float | None:
    """Cosine similarity of the block's activation gradient with vs without
    activation quantization. None when either gradient has zero norm."""
    quant = quant if quant is not None else model.cfg.quant
    if block >= model.cfg.num_blocks:
        raise ValueError(f"block {block} out of range for {model.cfg.num_blocks} blocks")
    quantized = _block_grads(model, tokens, quant)[block]
    reference = _block_grads(
        model, tokens, dataclasses.replace(quant, weight_only=True)
    )[block]
    return cosine(quantized, reference)


def alignment_sweep(model: Model, batches, tags=ESTIMATOR_TAGS) -> list[AlignmentRecord]:
    """Alignment for every block x estimator tag over a batch population."""
    records = []
    for sample, tokens in enumerate(batches):
        for tag in tags:
            quant = estimator_config(model.cfg.quant, tag)
            quantized = _block_grads(model, tokens, quant)
            reference = _block_grads(
                model, tokens, dataclasses.replace(quant, weight_only=True)
            )
            for block in range(model.cfg.num_blocks):
                xi = cosine(quantized[block], reference[block])
                records.append(AlignmentRecord(block=block, tag=tag, xi=xi, sample=sample))
    return records


def mask_fraction(mask: np.ndarray) -> float:
    """Fraction of masked (untrusted, M == 0) entries."""
    return float(np.mean(~np.asarray(mask, dtype=bool)))


def mask_persistence(mask_t1: np.ndarray, mask_t2: np.ndarray) -> float | None:
    """Of the entries masked at t1, the fraction still masked at t2.

    None (undefined) when nothing was masked at t1.
    """
    m1 = ~np.asarray(mask_t1, dtype=bool)
    m2 = ~np.asarray(mask_t2, dtype=bool)
    if m1.shape != m2.shape:
        raise ValueError(f"shape mismatch {m1.shape} vs {m2.shape}")
    masked_t1 = int(m1.sum())
    if masked_t1 == 0:
        return None
    return float((m1 & m2).sum() / masked_t1)


def write_alignment_csv(path, records: list[AlignmentRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["block", "tag", "xi", "sample"])
        for r in records:
            writer.writerow([r.block, r.tag, "" if r.xi is None else f"{r.xi:.6f}", r.sample])


def write_masks_csv(path, stats: list[MaskStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "layer", "masked_fraction", "persistence"])
        for s in stats:
            writer.writerow([
                s.step, s.layer, f"{s.masked_fraction:.6f}",
                "" if s.persistence is None else f"{s.persistence:.6f}",
            ])


def summarize(values):
    """Median and interquartile range over defined entries."""
    defined = np.array([v for v in values if v is not None], dtype=np.float64)
    if defined.size == 0:
        return None, None
    q1, med, q3 = np.percentile(defined, [25, 50, 75])
    return float(med), float(q3 - q1)
