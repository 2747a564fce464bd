"""Headwise-chunked Ulysses: attention in ``H_q / U`` stages of ``U`` heads.

Buffer discipline per device (``c`` = one stage's query chunk):

* ``pre_attn``: input shard.
* first ``inp_a2a``: the full output buffer is allocated once and filled by
  every stage's output exchange.
* ``inp_a2a``: the stage's q (and k, v when shipped) chunks, exchanged one
  at a time through a receive buffer; freed sources go back to a slot pool
  that later stages re-occupy.
* ``attn_kernel``: the attention output overwrites the query chunk in place
  (each output row depends only on its own query row), so no new bytes.
* ``out_a2a``: output chunk plus receive buffer, copied into the output
  buffer at the positions given by the schedule's inverse map.

Under the grouped schedule the kv chunks received in a super-stage's first
stage stay resident until its last stage.

With a single stage (``U == H_q``) there is nothing to chunk and the engine
runs the plain Ulysses path, shipping one kv copy per query head under GQA.
"""

from __future__ import annotations

import numpy as np

from ..mesh import (Mesh, ShardedActivation, all_to_all_head_to_seq,
                    all_to_all_seq_to_head)
from ..tensor_core import GqaMap, reference_attention_backward, reference_attention_forward
from .common import ForwardResult, HeadShardState, HeadSource, SlotPool, UPipeState
from .config import ModelConfig, UPipeConfig
from .schedule import _naive, build_gqa_schedule
from .ulysses import head_parallel_backward, head_parallel_forward


def _schedule(model: ModelConfig, C: int, U: int, gqa_schedule: bool):
    if gqa_schedule:
        return build_gqa_schedule(model.H_q, model.H_kv, C, U)
    sched = build_gqa_schedule(model.H_q, model.H_kv, C, U)
    if not sched.scheduled:
        return sched
    return _naive(model.H_q, model.H_kv, C, U, "grouped schedule disabled by caller")


def run_upipe_forward(mesh: Mesh, model: ModelConfig, upipe: UPipeConfig, q: ShardedActivation = None,
                      k: ShardedActivation = None, v: ShardedActivation = None, *, x: ShardedActivation = None,
                      projection=None, causal: bool = True, gqa_schedule: bool = True) -> ForwardResult:
    """Run the chunked forward. Pass pre-formed ``q, k, v`` or ``x`` with a projection."""
    C, bpe = mesh.devices, mesh.bytes_per_element
    model.check_mesh(C)
    upipe.validate(model.H_q, C)
    source = HeadSource(q, k, v, x=x, projection=projection)
    schedule = _schedule(model, C, upipe.U, gqa_schedule)

    if upipe.stages(model.H_q) == 1:
        fq, fk, fv = source.full(mesh, model)
        res = head_parallel_forward(mesh, model, fq, fk, fv, causal, [list(range(C))],
                                    [[d] for d in range(C)], expand_kv=model.ratio > 1)
        res.schedule = schedule
        return res

    mem = mesh.memory
    pool = SlotPool(mesh)
    s_loc, d_head = model.S // C, model.d_head
    per_dev = upipe.U // C
    local = GqaMap(per_dev, per_dev)

    mesh.enter("pre_attn", stage=0, direction="forward")
    for d in range(C):
        mem.alloc(d, "input_shard", s_loc * model.d_model * bpe)
    outbuf = [np.zeros((s_loc, model.H_q, d_head)) for _ in range(C)]
    out_handles = None

    stage_states = []
    resident = None
    for s, st in enumerate(schedule.stages):
        _, pos = schedule.super_stage(s)
        closes_super = pos == schedule.super_stage_len - 1 or s == len(schedule.stages) - 1

        mesh.enter("inp_a2a", stage=s)
        if out_handles is None:
            out_handles = [mem.alloc(d, "output", s_loc * model.d_model * bpe) for d in range(C)]
        send = [("q", st.q_heads)]
        if st.kv_heads:
            send += [("k", st.kv_heads), ("v", st.kv_heads)]
        chunks = {name: [source.get(name, d, idx) for d in range(C)] for name, idx in send}
        src_handles = {name: [pool.take(d, "qkv", mesh.nbytes(chunks[name][d])) for d in range(C)]
                       for name, _ in send}
        heads = {}
        for name, idx in send:
            act = ShardedActivation(chunks[name], "sequence", (model.S, len(idx), d_head))
            heads[name] = all_to_all_seq_to_head(mesh, act, tensor=name, label=None)
            heads[name].handles = [pool.take(d, "a2a_buf", mesh.nbytes(heads[name].shards[d])) for d in range(C)]
            for h in src_handles[name]:
                pool.release(h)
        if st.kv_heads:
            resident = (heads["k"], heads["v"])
        k_heads, v_heads = resident

        mesh.enter("attn_kernel", stage=s)
        out, lse = [], []
        for d in range(C):
            o, l = reference_attention_forward(heads["q"].shards[d], k_heads.shards[d], v_heads.shards[d],
                                               local, causal=causal)
            mem.rebind(heads["q"].handles[d], "attn_out")
            out.append(o)
            lse.append(l)
        stage_states.append(HeadShardState(
            q=heads["q"].shards, k=k_heads.shards, v=v_heads.shards, out=out, lse=lse,
            gqa=local, causal=causal))
        if closes_super:
            for h in k_heads.handles + v_heads.handles:
                pool.release(h)
            resident = None

        mesh.enter("out_a2a", stage=s)
        o_act = ShardedActivation(out, "head", (model.S, upipe.U, d_head))
        back = all_to_all_head_to_seq(mesh, o_act, tensor="out", label=None)
        recv = [pool.take(d, "out_a2a_buf", mesh.nbytes(back.shards[d])) for d in range(C)]
        for h in heads["q"].handles:
            pool.release(h)
        for h in st.q_heads:
            _, slot = schedule.inverse[h]
            for d in range(C):
                outbuf[d][:, h] = back.shards[d][:, slot]
        for h in recv:
            pool.release(h)

    out_act = ShardedActivation(outbuf, "sequence", (model.S, model.H_q, d_head), out_handles)
    return ForwardResult(out=out_act, state=UPipeState(stage_states, schedule, causal), schedule=schedule)


def run_upipe_backward(mesh: Mesh, model: ModelConfig, upipe: UPipeConfig, forward: ForwardResult,
                       d_out: ShardedActivation):
    """Stages in reverse; each stage's eight attention tensors exist only at chunk size.

    Under the grouped schedule dk/dv accumulate over the whole super-stage and
    are sent back once, at its first stage (the last one processed here).
    """
    if forward is None or forward.state is None:
        raise ValueError("missing forward state; run the forward pass first")
    state = forward.state
    if isinstance(state, HeadShardState):
        return head_parallel_backward(mesh, model, state, d_out)
    if len(state.stages) != upipe.stages(model.H_q):
        raise ValueError(f"forward state has {len(state.stages)} stages, expected {upipe.stages(model.H_q)}")

    C = mesh.devices
    s_loc, d_head = model.S // C, model.d_head
    if d_out.axis != "sequence" or d_out.shard_shape != (s_loc, model.H_q, d_head):
        raise ValueError(f"d_out must be sequence-sharded [{s_loc}, {model.H_q}, {d_head}]")
    schedule = state.schedule
    mem = mesh.memory
    pool = SlotPool(mesh)
    n = len(schedule.stages)

    mesh.enter("pre_attn", stage=n - 1, direction="backward")
    dq_out = [np.zeros((s_loc, model.H_q, d_head)) for _ in range(C)]
    dk_out = [np.zeros((s_loc, model.H_kv, d_head)) for _ in range(C)]
    dv_out = [np.zeros((s_loc, model.H_kv, d_head)) for _ in range(C)]
    grad_handles = [[mem.alloc(d, "grad_output", mesh.nbytes(g[d])) for d in range(C)]
                    for g in (dq_out, dk_out, dv_out)]

    kv_saved = acc = None
    for s in reversed(range(n)):
        st = schedule.stages[s]
        ss = state.stages[s]
        _, pos = schedule.super_stage(s)
        opens_super = pos == schedule.super_stage_len - 1 or s == n - 1  # first visited in reverse

        mesh.enter("out_a2a", stage=s)
        chunks = [np.array(d_out.shards[d][:, list(st.q_heads)]) for d in range(C)]
        src = [pool.take(d, "dout", mesh.nbytes(chunks[d])) for d in range(C)]
        do_heads = all_to_all_seq_to_head(
            mesh, ShardedActivation(chunks, "sequence", (model.S, upipe.U, d_head)), tensor="dout", label=None)
        do_handles = [pool.take(d, "a2a_buf", mesh.nbytes(do_heads.shards[d])) for d in range(C)]
        for h in src:
            pool.release(h)

        mesh.enter("attn_kernel", stage=s)
        q_saved = [pool.take(d, "bwd_saved", mesh.nbytes(ss.q[d]) + mesh.nbytes(ss.out[d])) for d in range(C)]
        if opens_super:
            kv_saved = [pool.take(d, "bwd_saved", mesh.nbytes(ss.k[d]) + mesh.nbytes(ss.v[d])) for d in range(C)]
            acc = {
                "dk": [np.zeros_like(ss.k[d]) for d in range(C)],
                "dv": [np.zeros_like(ss.v[d]) for d in range(C)],
            }
            acc_handles = {name: [pool.take(d, "dqkv", mesh.nbytes(acc[name][d])) for d in range(C)]
                           for name in ("dk", "dv")}
        dq_h = []
        dq_handles = [pool.take(d, "dqkv", mesh.nbytes(ss.q[d])) for d in range(C)]
        for d in range(C):
            dq, dk, dv = reference_attention_backward(ss.q[d], ss.k[d], ss.v[d], ss.out[d], ss.lse[d],
                                                      do_heads.shards[d], ss.gqa, causal=ss.causal)
            dq_h.append(dq)
            acc["dk"][d] += dk
            acc["dv"][d] += dv
        for h in q_saved + do_handles:
            pool.release(h)
        if pos == 0:
            for h in kv_saved:
                pool.release(h)

        mesh.enter("inp_a2a", stage=s)
        sends = [("dq", dq_h, dq_handles, st.q_heads)]
        if pos == 0:
            sends += [(name, acc[name], acc_handles[name], st.kv_heads) for name in ("dk", "dv")]
        for name, shards, handles, idx in sends:
            seq = all_to_all_head_to_seq(
                mesh, ShardedActivation(shards, "head", (model.S, len(idx), d_head)), tensor=name, label=None)
            recv = [pool.take(d, "a2a_buf", mesh.nbytes(seq.shards[d])) for d in range(C)]
            for h in handles:
                pool.release(h)
            for d in range(C):
                if name == "dq":
                    for slot, h in enumerate(idx):
                        dq_out[d][:, h] = seq.shards[d][:, slot]
                else:
                    target = dk_out if name == "dk" else dv_out
                    for slot, kv in enumerate(idx):
                        target[d][:, kv] += seq.shards[d][:, slot]
            for h in recv:
                pool.release(h)

    def wrap(shards, heads, handles):
        return ShardedActivation(shards, "sequence", (model.S, heads, d_head), handles)

    return (wrap(dq_out, model.H_q, grad_handles[0]), wrap(dk_out, model.H_kv, grad_handles[1]),
            wrap(dv_out, model.H_kv, grad_handles[2]))
