"""Quantized linear layer: transform, project, multiply; masked backward.

Forward: x_h = HT(x); x_hat_h = proj(x_h); w_h = HT(w); w_hat_h = proj(w_h);
y = x_hat_h @ w_hat_h^T. The context carries exactly the forward outputs the
backward needs: y's operands and the two trust masks.

Backward (trust estimator): dL/dx = IHT(M_x * (dL/dy @ w_hat_h)) and
dL/dw = IHT(M_w * (dL/dy^T @ x_hat_h)), all products in full precision.
The STE variant forces both masks to all-true. Masks are saved from the
forward pass, never recomputed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node
from .hadamard import HadamardPlan, ht, iht
from .quantizer import AlphaTable, QuantConfig, project


@dataclass
class QLinearContext:
    """Saved forward state: batch x k activations, n x k row-major weight."""

    y: np.ndarray
    x_hat_h: np.ndarray
    w_hat_h: np.ndarray
    mask_x: np.ndarray
    mask_w: np.ndarray
    x_scale: np.ndarray
    w_scale: np.ndarray
    cfg: QuantConfig
    plan: HadamardPlan | None
    w_sparsity: np.ndarray | None = None
    w_codes: np.ndarray | None = None

    @property
    def untrusted_weight_fraction(self) -> float:
        return float(np.mean(~self.mask_w))


def forward(
    x: np.ndarray,
    w: np.ndarray,
    cfg: QuantConfig,
    table: AlphaTable,
    plan: HadamardPlan | None = None,
    *,
    with_codes: bool = False,
):
    """Run the quantized layer; returns (y, context).

    x is batch x k, w is n x k (row-major); y is batch x n.
    """
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError(f"expected 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"inner dimensions disagree: {x.shape} x {w.shape}")
    if cfg.hadamard:
        if plan is None:
            plan = HadamardPlan(x.shape[1])
        elif plan.n != x.shape[1]:
            raise ValueError(f"plan length {plan.n} does not match k={x.shape[1]}")
        x_h = ht(x, plan, axis=1)
        w_h = ht(w, plan, axis=1)
    else:
        plan = None
        x_h, w_h = x, w

    if cfg.format == "none" or cfg.weight_only:
        x_hat = x_h
        mask_x = np.ones(x_h.shape, dtype=bool)
        x_scale = np.zeros(x_h.shape[:1] + (1,), dtype=x_h.dtype)
    else:
        px = project(x_h, cfg, table, axis=1)
        x_hat, mask_x, x_scale = px.values, px.trust_mask, px.scale

    if cfg.format == "none":
        w_hat = w_h
        mask_w = np.ones(w_h.shape, dtype=bool)
        w_scale = np.zeros(w_h.shape[:1] + (1,), dtype=w_h.dtype)
        w_sparsity = w_codes = None
    else:
        pw = project(w_h, cfg, table, axis=1, with_codes=with_codes)
        w_hat, mask_w, w_scale = pw.values, pw.trust_mask, pw.scale
        w_sparsity, w_codes = pw.sparsity_mask, pw.codes

    y = x_hat @ w_hat.T
    ctx = QLinearContext(
        y=y,
        x_hat_h=x_hat,
        w_hat_h=w_hat,
        mask_x=mask_x,
        mask_w=mask_w,
        x_scale=x_scale,
        w_scale=w_scale,
        cfg=cfg,
        plan=plan,
        w_sparsity=w_sparsity,
        w_codes=w_codes,
    )
    return y, ctx


def _estimate(ctx: QLinearContext, grad_y: np.ndarray, mask_x, mask_w):
    if grad_y.shape != (ctx.x_hat_h.shape[0], ctx.w_hat_h.shape[0]):
        raise ValueError(
            f"upstream gradient shape {grad_y.shape} does not match "
            f"y shape {(ctx.x_hat_h.shape[0], ctx.w_hat_h.shape[0])}"
        )
    grad_x_hat = grad_y @ ctx.w_hat_h
    grad_w_hat = grad_y.T @ ctx.x_hat_h
    # bool multiply zeroes masked coordinates exactly
    grad_x = grad_x_hat if mask_x is True else grad_x_hat * mask_x
    grad_w = grad_w_hat if mask_w is True else grad_w_hat * mask_w
    if ctx.plan is not None:
        grad_x = iht(grad_x, ctx.plan, axis=1)
        grad_w = iht(grad_w, ctx.plan, axis=1)
    return grad_x, grad_w


def backward(ctx: QLinearContext, grad_y: np.ndarray):
    """Trust-estimator backward: masked in the transform domain, then IHT."""
    if ctx is None:
        raise ValueError("missing qlinear context")
    return _estimate(ctx, grad_y, ctx.mask_x, ctx.mask_w)


def ste_backward(ctx: QLinearContext, grad_y: np.ndarray):
    """Straight-through backward: as backward with masks forced all-true."""
    if ctx is None:
        raise ValueError("missing qlinear context")
    return _estimate(ctx, grad_y, True, True)


def qlinear(x: Node, w: Node, cfg: QuantConfig, table: AlphaTable,
            plan: HadamardPlan | None = None):
    """Tape registration of the layer; backward follows cfg.estimator.

    Returns (output node, context).
    """
    y, ctx = forward(x.value, w.value, cfg, table, plan)
    estimator = backward if cfg.estimator == "trust" else ste_backward
    node = x.tape.record(y, (x, w), lambda g: estimator(ctx, g))
    return node, ctx
