"""MIL aggregation: learnable top-k pooling and the mean / max / max-inst baselines."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import Module
from .tensor import Parameter, ShapeError, Tensor, concat, make_node, reduce_max, reduce_mean, transpose

SCHEMES = ("topk", "mean", "max")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


class TopKPool(Module):
    """Weighted mean of the k largest activations.

    The weights are a softmax over ``logits``, so they stay on the simplex
    whatever the optimizer does. Initial weights decay as ``exp(-decay * r)``.
    """

    def __init__(self, k: int = 5, decay: float = 1.0):
        if k < 1:
            raise ValueError(f"TopKPool: k must be positive, got {k}")
        self.k = k
        self.decay = decay
        self.logits = Parameter(-decay * np.arange(k, dtype=np.float64))

    def weights(self, k_eff: int | None = None) -> np.ndarray:
        z = self.logits.data[: k_eff or self.k].astype(np.float64)
        return _softmax(z)


def topk_rows(x: Tensor, logits: Tensor) -> Tensor:
    """Top-k pool every row of ``x [R, M]`` with weights ``softmax(logits[:k'])``.

    ``k' = min(k, M)``; ties go to the earliest column.
    """
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"topk_pool: expected a non-empty [rows, elements] matrix, got {x.shape}")
    k = logits.shape[0]
    kk = min(k, x.shape[1])
    order = np.argsort(-x.data, axis=1, kind="stable")[:, :kk]
    top = np.take_along_axis(x.data, order, 1)
    w = _softmax(logits.data[:kk].astype(np.float64))
    out = (top.astype(np.float64) @ w).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, order, (g64[:, None] * w[None, :]).astype(x.dtype), 1)
        gw = top.astype(np.float64).T @ g64
        gz = np.zeros(k)
        gz[:kk] = w * (gw - w @ gw)
        return gx, gz.astype(logits.dtype)

    return make_node(out, (x, logits), "topk_pool", bw)


def topk_pool(values: Sequence[Tensor], pool: TopKPool) -> Tensor:
    """Pool every element of ``values`` (flattened, in list order) into one scalar."""
    if not values:
        raise ValueError("topk_pool: empty input list")
    flat = concat([v.reshape(1, -1) for v in values], axis=1)
    return topk_rows(flat, pool.logits).reshape(())


def channel_rows(maps: Sequence[Tensor]) -> Tensor:
    """Gather ``[n, N, h, w]`` maps into ``[N, M]``: one row per channel, holding
    every scale, instance and position of that channel."""
    if not maps:
        raise ValueError("pool_bag: no feature maps")
    n_ch = maps[0].shape[1]
    for m in maps:
        if m.shape[1] != n_ch:
            raise ShapeError(f"pool_bag: channel count mismatch {maps[0].shape} vs {m.shape}")
    rows = [transpose(m, (1, 0, 2, 3)).reshape(n_ch, -1) for m in maps]
    return rows[0] if len(rows) == 1 else concat(rows, axis=1)


def pool_bag(maps: Sequence[Tensor], scheme: str, pool: TopKPool | None = None) -> Tensor:
    """Collapse all maps of one bag into an ``[N]`` feature vector."""
    rows = channel_rows(maps)
    if scheme == "topk":
        if pool is None:
            raise ValueError("pool_bag: topk scheme needs a TopKPool")
        return topk_rows(rows, pool.logits)
    if scheme == "mean":
        return reduce_mean(rows, axis=1)
    if scheme == "max":
        return reduce_max(rows, axis=1)
    raise ValueError(f"pool_bag: unknown scheme {scheme!r}")


def max_inst_aggregate(instance_probs: Sequence[float]) -> float:
    if len(instance_probs) == 0:
        raise ValueError("max_inst_aggregate: empty list")
    return float(max(instance_probs))
