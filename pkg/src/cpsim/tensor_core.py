"""Exact float64 softmax attention: forward, backward, partial merging.

Tensors are plain ``numpy`` arrays laid out as ``[seq, heads, d_head]``.
Scores are scaled by ``1/sqrt(d_head)`` and the causal convention is that
query ``i`` sees key ``j`` iff ``j <= i`` (global positions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NEG_INF = -np.inf

# Upper bound on the number of scalars the finite-difference sweep will touch.
MAX_FD_ENTRIES = 10_000


@dataclass(frozen=True)
class GqaMap:
    """Query-head to key/value-head grouping; ``R = h_q // h_kv`` queries share one kv head."""

    h_q: int
    h_kv: int

    def __post_init__(self):
        if self.h_q <= 0 or self.h_kv <= 0:
            raise ValueError(f"head counts must be positive (h_q={self.h_q}, h_kv={self.h_kv})")
        if self.h_q % self.h_kv:
            raise ValueError(f"h_q must be divisible by h_kv (h_q={self.h_q}, h_kv={self.h_kv})")

    @property
    def ratio(self) -> int:
        return self.h_q // self.h_kv

    def kv_head(self, h: int) -> int:
        return h // self.ratio


@dataclass
class AttentionPartial:
    """Running ``(out, lse)`` pair for a block of queries.

    ``out`` is ``[S_q, H, d]``, ``lse`` is ``[S_q, H]``. A row that has not seen
    any key carries ``lse = -inf`` and an all-zero ``out`` row.
    """

    out: np.ndarray
    lse: np.ndarray

    def __post_init__(self):
        if self.out.shape[:2] != self.lse.shape:
            raise ValueError(f"partial shape mismatch: out {self.out.shape} vs lse {self.lse.shape}")


def empty_partial(s_q: int, heads: int, d_head: int) -> AttentionPartial:
    return AttentionPartial(
        out=np.zeros((s_q, heads, d_head)),
        lse=np.full((s_q, heads), NEG_INF),
    )


def _check_finite(name: str, x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def _check_qkv(q, k, v, gqa: GqaMap):
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError(f"q, k, v must be [S, H, d]; got {q.shape}, {k.shape}, {v.shape}")
    if k.shape != v.shape:
        raise ValueError(f"k and v shapes differ: {k.shape} vs {v.shape}")
    if q.shape[2] != k.shape[2]:
        raise ValueError(f"d_head mismatch: q {q.shape[2]} vs k {k.shape[2]}")
    if q.shape[1] != gqa.h_q or k.shape[1] != gqa.h_kv:
        raise ValueError(
            f"head counts {q.shape[1]}/{k.shape[1]} do not match gqa map {gqa.h_q}/{gqa.h_kv}"
        )
    for name, x in (("q", q), ("k", k), ("v", v)):
        _check_finite(name, x)


def _visible(s_q: int, s_k: int, causal: bool, q_offset: int, k_offset: int):
    if not causal:
        return None
    qi = q_offset + np.arange(s_q)[:, None]
    kj = k_offset + np.arange(s_k)[None, :]
    return kj <= qi


def attention_partial(q, k, v, gqa: GqaMap, causal: bool = True,
                      q_offset: int = 0, k_offset: int = 0) -> AttentionPartial:
    """Attention of a query block against one key/value block.

    ``q_offset``/``k_offset`` are the global positions of the first row of
    each block, used only for causal masking. Rows that see no key come back
    as the empty sentinel.
    """
    _check_qkv(q, k, v, gqa)
    s_q, h_q, d = q.shape
    scale = 1.0 / math.sqrt(d)
    mask = _visible(s_q, k.shape[0], causal, q_offset, k_offset)

    out = np.zeros((s_q, h_q, d))
    lse = np.full((s_q, h_q), NEG_INF)
    for h in range(h_q):
        kv = gqa.kv_head(h)
        scores = (q[:, h, :] @ k[:, kv, :].T) * scale
        if mask is not None:
            scores = np.where(mask, scores, NEG_INF)
        row_max = scores.max(axis=1)
        seen = np.isfinite(row_max)
        shift = np.where(seen, row_max, 0.0)
        weights = np.exp(scores - shift[:, None])
        denom = weights.sum(axis=1)
        num = weights @ v[:, kv, :]
        safe = np.where(seen, denom, 1.0)
        out[:, h, :] = np.where(seen[:, None], num / safe[:, None], 0.0)
        lse[:, h] = np.where(seen, shift + np.log(safe), NEG_INF)
    return AttentionPartial(out=out, lse=lse)


def reference_attention_forward(q, k, v, gqa: GqaMap, causal: bool = True):
    """Single-device attention. Returns ``(out [S, H_q, d], lse [S, H_q])``."""
    if q.shape[0] != k.shape[0]:
        raise ValueError(f"sequence mismatch: q {q.shape[0]} vs k {k.shape[0]}")
    part = attention_partial(q, k, v, gqa, causal=causal)
    return part.out, part.lse


def reference_attention_backward(q, k, v, out, lse, d_out, gqa: GqaMap, causal: bool = True):
    """Gradients of ``sum(out * d_out)`` with respect to ``q``, ``k``, ``v``.

    ``(out, lse)`` must come from :func:`reference_attention_forward` on the
    same inputs; a stale ``lse`` is not detected here. kv-head gradients
    accumulate the contributions of their query heads in head order.
    """
    _check_qkv(q, k, v, gqa)
    if out.shape != q.shape or d_out.shape != q.shape:
        raise ValueError(f"out/d_out must match q shape {q.shape}; got {out.shape}, {d_out.shape}")
    if lse.shape != q.shape[:2]:
        raise ValueError(f"lse must be {q.shape[:2]}; got {lse.shape}")
    _check_finite("d_out", d_out)

    s, h_q, d = q.shape
    scale = 1.0 / math.sqrt(d)
    mask = _visible(s, k.shape[0], causal, 0, 0)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for h in range(h_q):
        kv = gqa.kv_head(h)
        q_h, k_h, v_h = q[:, h, :], k[:, kv, :], v[:, kv, :]
        do_h, o_h = d_out[:, h, :], out[:, h, :]
        scores = (q_h @ k_h.T) * scale
        if mask is not None:
            scores = np.where(mask, scores, NEG_INF)
        probs = np.exp(scores - lse[:, h][:, None])
        dv[:, kv, :] += probs.T @ do_h
        dprobs = do_h @ v_h.T
        delta = (do_h * o_h).sum(axis=1)
        dscores = probs * (dprobs - delta[:, None])
        dq[:, h, :] = (dscores @ k_h) * scale
        dk[:, kv, :] += (dscores.T @ q_h) * scale
    return dq, dk, dv


def merge_partials(a: AttentionPartial, b: AttentionPartial) -> AttentionPartial:
    """Combine two partials over disjoint key sets (online-softmax merge)."""
    if a.out.shape != b.out.shape or a.lse.shape != b.lse.shape:
        raise ValueError(f"cannot merge partials of shapes {a.out.shape} and {b.out.shape}")
    top = np.maximum(a.lse, b.lse)
    shift = np.where(np.isfinite(top), top, 0.0)
    wa = np.exp(a.lse - shift)
    wb = np.exp(b.lse - shift)
    total = wa + wb
    seen = total > 0
    safe = np.where(seen, total, 1.0)
    lse = np.where(seen, shift + np.log(safe), NEG_INF)
    out = (wa / safe)[..., None] * a.out + (wb / safe)[..., None] * b.out
    return AttentionPartial(out=out, lse=lse)


def finite_difference_gradients(q, k, v, d_out, gqa: GqaMap, causal: bool = True, step: float = 1e-5):
    """Central differences of ``sum(out * d_out)`` over every input scalar."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    n = q.size + k.size + v.size
    if n > MAX_FD_ENTRIES:
        raise ValueError(f"{n} input scalars exceeds the finite-difference limit of {MAX_FD_ENTRIES}")

    inputs = [np.array(q, dtype=np.float64), np.array(k, dtype=np.float64), np.array(v, dtype=np.float64)]

    def loss() -> float:
        out, _ = reference_attention_forward(*inputs, gqa, causal=causal)
        return float(np.sum(out * d_out))

    grads = []
    for x in inputs:
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss()
            flat[i] = orig - step
            minus = loss()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * step)
        grads.append(g)
    return tuple(grads)
