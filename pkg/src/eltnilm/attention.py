"""Attention kernels: quadratic softmax attention, linear global attention and
windowed local attention, plus multi-head assembly.

All kernels take ``(l, d_h)`` or ``(batch, l, d_h)`` tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from eltnilm.errors import ConfigError, DimensionError
from eltnilm.tensor import (
    Tensor,
    concat,
    grad_enabled,
    index,
    matmul,
    mul,
    pad,
    reshape,
    softmax_axis,
    transpose,
)

# Query rows per block when standard attention runs without gradients;
# bounds the score matrix at block x l entries.
_QUERY_BLOCK = 1024


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int = 4
    n_local: int = 2
    l_win: int = 20

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_global(self) -> int:
        return self.n_heads - self.n_local

    def errors(self) -> list:
        found = []
        if self.n_heads < 1:
            found.append("n_heads must be >= 1")
        elif self.d_model % self.n_heads:
            found.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0 <= self.n_local <= self.n_heads:
            found.append(f"n_local must be in [0, n_heads], got {self.n_local}")
        if self.l_win < 1:
            found.append("l_win must be >= 1")
        return found

    def validate(self) -> "AttentionConfig":
        found = self.errors()
        if found:
            raise ConfigError("; ".join(found), found)
        return self


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim < 2:
        raise DimensionError(f"attention inputs need shape (..., l, d_h), got {q.shape}")
    if q.shape[-1] == 0:
        raise ConfigError("head dimension must be positive")


def standard_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(d_h)) V, optionally restricted by a boolean mask.

    Without gradient tracking, long sequences are processed in blocks of
    query rows so the score matrix never exceeds ``_QUERY_BLOCK x l``.
    """
    _check_qkv(q, k, v)
    length = q.shape[-2]
    scale = 1.0 / math.sqrt(q.shape[-1])
    tracking = grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)
    if tracking or length <= _QUERY_BLOCK:
        scores = mul(matmul(q, transpose(k)), scale)
        return matmul(softmax_axis(scores, "row", mask), v)
    kt = transpose(k)
    blocks = []
    for start in range(0, length, _QUERY_BLOCK):
        rows = slice(start, min(start + _QUERY_BLOCK, length))
        sel = (Ellipsis, rows, slice(None))
        block_mask = None if mask is None else np.asarray(mask)[sel]
        scores = mul(matmul(index(q, sel), kt), scale)
        blocks.append(matmul(softmax_axis(scores, "row", block_mask), v))
    return concat(blocks, axis=-2)


def linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """rho_q(Q) (rho_k(K)^T V), with K^T V evaluated first.

    rho_q is a softmax of each query over features; rho_k is a softmax of each
    key feature over positions. Cost is O(l * d_h^2).
    """
    _check_qkv(q, k, v)
    context = matmul(transpose(softmax_axis(k, "column")), v)
    return matmul(softmax_axis(q, "row"), context)


def local_window_mask(length: int, l_win: int) -> np.ndarray:
    """Boolean ``(n_windows, l_win, 3 * l_win)`` mask of attendable keys.

    Window ``w`` sees keys from windows ``w-1, w, w+1``; keys outside
    ``[0, length)`` are masked.
    """
    n_win = -(-length // l_win)
    key_pos = (np.arange(n_win)[:, None] - 1) * l_win + np.arange(3 * l_win)[None, :]
    valid = (key_pos >= 0) & (key_pos < length)
    return np.broadcast_to(valid[:, None, :], (n_win, l_win, 3 * l_win))


def local_attention(q: Tensor, k: Tensor, v: Tensor, l_win: int) -> Tensor:
    """Softmax attention restricted to a window and its two neighbours.

    The sequence is zero-padded to a multiple of ``l_win`` and split into
    windows; each window's queries attend to the ``3 * l_win`` keys of the
    previous, current and next window. Padded keys are masked and padded
    query rows are dropped from the result.
    """
    _check_qkv(q, k, v)
    if l_win < 1:
        raise ConfigError("l_win must be >= 1")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    batch, length, d_h = q.shape
    n_win = -(-length // l_win)
    tail = n_win * l_win - length

    def windows(t: Tensor) -> Tensor:
        return reshape(t, (batch * n_win, l_win, d_h))

    q_win = windows(pad(q, 1, 0, tail))

    def neighbourhood(t: Tensor) -> Tensor:
        padded = pad(t, 1, l_win, tail + l_win)
        span = n_win * l_win
        parts = [windows(index(padded, (slice(None), slice(s, s + span)))) for s in (0, l_win, 2 * l_win)]
        return concat(parts, axis=1)

    k_win, v_win = neighbourhood(k), neighbourhood(v)
    mask = np.broadcast_to(
        local_window_mask(length, l_win)[None], (batch, n_win, l_win, 3 * l_win)
    ).reshape(batch * n_win, l_win, 3 * l_win)
    scores = mul(matmul(q_win, transpose(k_win)), 1.0 / math.sqrt(d_h))
    out = matmul(softmax_axis(scores, "row", mask), v_win)
    out = reshape(out, (batch, n_win * l_win, d_h))
    if tail:
        out = index(out, (slice(None), slice(0, length)))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator, prefix: str = "") -> dict:
    """Projection matrices for all heads.

    ``w_q``, ``w_k`` and ``w_v`` are ``d_model x d_model``; column block ``h``
    is head ``h``'s ``d_model x d_head`` projection. ``w_o`` mixes the
    concatenated head outputs.
    """
    d = cfg.d_model
    std = 1.0 / math.sqrt(d)
    return {
        f"{prefix}{name}": Tensor(rng.normal(0.0, std, (d, d)), requires_grad=True)
        for name in ("w_q", "w_k", "w_v", "w_o")
    }


def multi_head(x: Tensor, cfg: AttentionConfig, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """Global heads first (linear attention), then ``n_local`` local heads.

    Head outputs are concatenated along features and projected by ``w_o``.
    """
    cfg.validate()
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"expected {cfg.d_model} features, got {x.shape[-1]}")
    q = matmul(x, params[f"{prefix}w_q"])
    k = matmul(x, params[f"{prefix}w_k"])
    v = matmul(x, params[f"{prefix}w_v"])
    dh = cfg.d_head
    heads = []
    for h in range(cfg.n_heads):
        cols = (Ellipsis, slice(h * dh, (h + 1) * dh))
        qh, kh, vh = index(q, cols), index(k, cols), index(v, cols)
        if h < cfg.n_global:
            heads.append(linear_attention(qh, kh, vh))
        else:
            heads.append(local_attention(qh, kh, vh, cfg.l_win))
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=-1)
    return matmul(merged, params[f"{prefix}w_o"])
