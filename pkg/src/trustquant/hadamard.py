"""Orthonormal fast Walsh-Hadamard transform along a chosen axis.

The transform uses the Sylvester construction scaled by m^(-1/2) per block,
so it is its own inverse. Non-power-of-two lengths are handled by a
block-diagonal decomposition into the largest power-of-two blocks
(e.g. 640 -> 512 + 128), which preserves orthonormality and invertibility.
No randomized sign flips: the transform is fixed and shared by weights and
activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _pow2_blocks(n: int) -> list[int]:
    blocks = []
    rem = n
    while rem:
        b = 1 << (rem.bit_length() - 1)
        blocks.append(b)
        rem -= b
    return blocks


@dataclass(frozen=True)
class HadamardPlan:
    """Transform length and its power-of-two block decomposition."""

    n: int
    blocks: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"transform length must be positive, got {self.n}")
        blocks = self.blocks if self.blocks is not None else tuple(_pow2_blocks(self.n))
        for b in blocks:
            if b < 1 or (b & (b - 1)) != 0:
                raise ValueError(f"block size {b} is not a power of two")
        if sum(blocks) != self.n:
            raise ValueError(f"blocks {blocks} do not sum to {self.n}")
        object.__setattr__(self, "blocks", tuple(blocks))


def _fwht_block(x: np.ndarray) -> np.ndarray:
    """Butterfly over the last axis (power-of-two extent), in place on a copy."""
    m = x.shape[-1]
    out = np.ascontiguousarray(x).copy()
    h = 1
    while h < m:
        shaped = out.reshape(x.shape[:-1] + (m // (2 * h), 2, h))
        a = shaped[..., 0, :]
        b = shaped[..., 1, :]
        diff = a - b
        a += b
        b[...] = diff
        h *= 2
    if m > 1:
        out *= np.asarray(1.0 / np.sqrt(m), dtype=x.dtype)
    return out


def ht(x: np.ndarray, plan: HadamardPlan, axis: int = -1) -> np.ndarray:
    """Apply the orthonormal Hadamard transform along `axis`."""
    x = np.asarray(x)
    axis = axis % x.ndim
    if x.shape[axis] != plan.n:
        raise ValueError(
            f"axis extent {x.shape[axis]} does not match plan length {plan.n}"
        )
    moved = np.moveaxis(x, axis, -1)
    if len(plan.blocks) == 1:
        out = _fwht_block(moved)
    else:
        pieces = []
        start = 0
        for b in plan.blocks:
            pieces.append(_fwht_block(moved[..., start:start + b]))
            start += b
        out = np.concatenate(pieces, axis=-1)
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def iht(x: np.ndarray, plan: HadamardPlan, axis: int = -1) -> np.ndarray:
    """Inverse transform. The orthonormal Sylvester HT is an involution, so
    this equals ht; both names are part of the interface."""
    return ht(x, plan, axis)
