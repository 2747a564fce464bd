"""Sequence-to-head resharded attention (Ulysses), optionally with a ring across groups.

Buffer discipline per device, in units of one ``[S/C, d_model]`` shard:

* ``pre_attn``: input shard.
* ``inp_a2a``: q, k, v sequence shards, then one receive buffer per tensor in
  turn (q, k, v sequentially); each source is freed once its exchange lands.
* ``attn_kernel``: head-sharded q, k, v plus a fresh attention output.
* ``out_a2a``: output plus its receive buffer, which becomes the block output.
"""

from __future__ import annotations

import numpy as np

from ..mesh import (Mesh, ShardedActivation, all_to_all_head_to_seq,
                    all_to_all_seq_to_head)
from ..tensor_core import (GqaMap, merge_partials, reference_attention_backward,
                           reference_attention_forward)
from .common import ForwardResult, HeadShardState, check_inputs
from .config import ModelConfig
from .ring import ring_attention


def _expand(act: ShardedActivation, kv_index: list[int]) -> list:
    return [np.array(s[:, kv_index]) for s in act.shards]


def head_parallel_forward(mesh: Mesh, model: ModelConfig, q: ShardedActivation, k: ShardedActivation,
                          v: ShardedActivation, causal: bool, ulysses_groups, ring_groups,
                          expand_kv: bool = False, merge=merge_partials) -> ForwardResult:
    """Shared forward for Ulysses (single group) and the Ulysses x Ring hybrid.

    ``expand_kv`` ships one kv copy per query head instead of the native kv
    heads; that is the naive grouped-query exchange.
    """
    check_inputs(model, mesh, q, k, v)
    C, bpe = mesh.devices, mesh.bytes_per_element
    a, r = len(ulysses_groups[0]), len(ring_groups[0])
    s_loc = model.S // C
    h_kv = model.H_q if expand_kv else model.H_kv
    if model.H_q % a or h_kv % a:
        raise ValueError(
            f"query and kv heads must be divisible by the Ulysses degree "
            f"(H_q={model.H_q}, H_kv={h_kv}, degree={a})"
        )
    mem = mesh.memory

    mesh.enter("pre_attn", stage=0, direction="forward")
    for d in range(C):
        mem.alloc(d, "input_shard", s_loc * model.d_model * bpe)

    mesh.enter("inp_a2a", stage=0)
    kv_index = [h // model.ratio for h in range(model.H_q)]
    src = {
        "q": [np.array(s) for s in q.shards],
        "k": _expand(k, kv_index) if expand_kv else [np.array(s) for s in k.shards],
        "v": _expand(v, kv_index) if expand_kv else [np.array(s) for s in v.shards],
    }
    src_handles = {name: [mem.alloc(d, "qkv", mesh.nbytes(src[name][d])) for d in range(C)] for name in src}
    heads = {}
    for name in ("q", "k", "v"):
        act = ShardedActivation(src[name], "sequence", (model.S, src[name][0].shape[1], model.d_head))
        heads[name] = all_to_all_seq_to_head(mesh, act, ulysses_groups, tensor=name, label="a2a_buf")
        for h in src_handles[name]:
            mem.free(h)

    mesh.enter("attn_kernel", stage=0)
    local = GqaMap(model.H_q // a, h_kv // a)
    out_handles = [mem.alloc(d, "attn_out", mesh.nbytes(heads["q"].shards[d])) for d in range(C)]
    out = [None] * C
    lse = [None] * C
    if r == 1:
        for d in range(C):
            out[d], lse[d] = reference_attention_forward(
                heads["q"].shards[d], heads["k"].shards[d], heads["v"].shards[d], local, causal=causal)
    else:
        block = model.S // r
        for group in ring_groups:
            parts = ring_attention(
                mesh, [heads["q"].shards[d] for d in group], [heads["k"].shards[d] for d in group],
                [heads["v"].shards[d] for d in group], local, causal, block, group, merge=merge)
            for d, p in zip(group, parts):
                out[d], lse[d] = p.out, p.lse
    for name in ("q", "k", "v"):
        for h in heads[name].handles:
            mem.free(h)

    mesh.enter("out_a2a", stage=0)
    o_act = ShardedActivation(out, "head", q.global_shape)
    result = all_to_all_head_to_seq(mesh, o_act, ulysses_groups, tensor="out", label="out_a2a_buf")
    for h in out_handles:
        mem.free(h)
    for h in result.handles:
        mem.rebind(h, "output")

    state = None
    if r == 1:
        state = HeadShardState(
            q=heads["q"].shards, k=heads["k"].shards, v=heads["v"].shards, out=out, lse=lse,
            gqa=local, causal=causal, expand_kv=expand_kv,
        )
    return ForwardResult(out=result, state=state)


def head_parallel_backward(mesh: Mesh, model: ModelConfig, state: HeadShardState,
                           d_out: ShardedActivation, groups=None):
    """Backward mirror of :func:`head_parallel_forward` (single ring position only).

    Order follows the backward block: ``d_out`` resharded to heads first, the
    attention backward on local heads, then dq/dk/dv resharded to sequence.
    """
    if state is None:
        raise ValueError("missing forward state; run the forward pass first")
    C = mesh.devices
    s_loc = model.S // C
    if d_out.axis != "sequence" or d_out.shard_shape != (s_loc, model.H_q, model.d_head):
        raise ValueError(f"d_out must be sequence-sharded [{s_loc}, {model.H_q}, {model.d_head}]")
    mem = mesh.memory
    r = model.ratio

    mesh.enter("pre_attn", stage=0, direction="backward")
    dq_out = [np.zeros((s_loc, model.H_q, model.d_head)) for _ in range(C)]
    dk_out = [np.zeros((s_loc, model.H_kv, model.d_head)) for _ in range(C)]
    dv_out = [np.zeros((s_loc, model.H_kv, model.d_head)) for _ in range(C)]
    grad_handles = [[mem.alloc(d, "grad_output", mesh.nbytes(g[d])) for d in range(C)]
                    for g in (dq_out, dk_out, dv_out)]

    mesh.enter("out_a2a", stage=0)
    src = [mem.alloc(d, "dout", mesh.nbytes(d_out.shards[d])) for d in range(C)]
    do_heads = all_to_all_seq_to_head(mesh, d_out, groups, tensor="dout", label="a2a_buf")
    for h in src:
        mem.free(h)

    mesh.enter("attn_kernel", stage=0)
    saved = [mem.alloc(d, "bwd_saved", sum(mesh.nbytes(t[d]) for t in (state.q, state.k, state.v, state.out)))
             for d in range(C)]
    grads = {"dq": [None] * C, "dk": [None] * C, "dv": [None] * C}
    g_handles = {
        "dq": [mem.alloc(d, "dqkv", mesh.nbytes(state.q[d])) for d in range(C)],
        "dk": [mem.alloc(d, "dqkv", mesh.nbytes(state.k[d])) for d in range(C)],
        "dv": [mem.alloc(d, "dqkv", mesh.nbytes(state.v[d])) for d in range(C)],
    }
    for d in range(C):
        grads["dq"][d], grads["dk"][d], grads["dv"][d] = reference_attention_backward(
            state.q[d], state.k[d], state.v[d], state.out[d], state.lse[d], do_heads.shards[d],
            state.gqa, causal=state.causal)
    for h in saved + do_heads.handles:
        mem.free(h)

    mesh.enter("inp_a2a", stage=0)
    for name, target in (("dq", dq_out), ("dk", dk_out), ("dv", dv_out)):
        act = ShardedActivation(grads[name], "head", (model.S, grads[name][0].shape[1], model.d_head))
        seq = all_to_all_head_to_seq(mesh, act, groups, tensor=name, label="a2a_buf")
        for h in g_handles[name]:
            mem.free(h)
        for d in range(C):
            if name != "dq" and state.expand_kv:
                for h in range(model.H_q):
                    target[d][:, h // r] += seq.shards[d][:, h]
            else:
                target[d][...] = seq.shards[d]
        for h in seq.handles:
            mem.free(h)

    def wrap(shards, heads, handles):
        return ShardedActivation(shards, "sequence", (model.S, heads, model.d_head), handles)

    return (wrap(dq_out, model.H_q, grad_handles[0]), wrap(dk_out, model.H_kv, grad_handles[1]),
            wrap(dv_out, model.H_kv, grad_handles[2]))


def run_ulysses_forward(mesh: Mesh, model: ModelConfig, q: ShardedActivation, k: ShardedActivation,
                        v: ShardedActivation, causal: bool = True) -> ForwardResult:
    """Ulysses over the whole mesh.

    When the kv heads do not split evenly over the devices, one kv copy per
    query head is exchanged instead (the result is unchanged, the traffic
    and buffers grow to the MHA size).
    """
    C = mesh.devices
    if model.H_q % C:
        raise ValueError(f"Ulysses needs H_q divisible by C (H_q={model.H_q}, C={C})")
    return head_parallel_forward(mesh, model, q, k, v, causal, [list(range(C))], [[d] for d in range(C)],
                                 expand_kv=model.H_kv % C != 0)


def run_ulysses_backward(mesh: Mesh, model: ModelConfig, forward: ForwardResult, d_out: ShardedActivation):
    if forward is None or forward.state is None:
        raise ValueError("missing forward state; run the forward pass first")
    return head_parallel_backward(mesh, model, forward.state, d_out)
