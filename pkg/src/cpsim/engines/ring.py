from __future__ import annotations

from ..mesh import Mesh, ShardedActivation, ring_shift
from ..tensor_core import GqaMap, attention_partial, merge_partials
from .common import ForwardResult, check_inputs
from .config import ModelConfig


def ring_attention(mesh: Mesh, q_blocks, k_blocks, v_blocks, gqa: GqaMap, causal: bool,
                   block_len: int, ring_group: list[int], merge=merge_partials):
    """Block-causal ring attention over contiguous sequence blocks.

    Position ``p`` of ``ring_group`` owns query block ``p``. K and V travel
    ``n - 1`` hops; at hop ``t`` position ``p`` holds kv block ``(p - t) % n``
    and attends it fully if it lies earlier, skips it if later.
    """
    n = len(ring_group)
    mem = mesh.memory
    partials = [
        attention_partial(q_blocks[p], k_blocks[p], v_blocks[p], gqa, causal=causal,
                          q_offset=p * block_len, k_offset=p * block_len)
        for p in range(n)
    ]
    k_cur, v_cur = list(k_blocks), list(v_blocks)
    held = []
    for t in range(1, n):
        k_cur = ring_shift(mesh, k_cur, ring_group, tensor="k")
        v_cur = ring_shift(mesh, v_cur, ring_group, tensor="v")
        arrived = [mem.alloc(dev, "kv_ring_buf", mesh.nbytes(k_cur[p]) + mesh.nbytes(v_cur[p]))
                   for p, dev in enumerate(ring_group)]
        for h in held:
            mem.free(h)
        held = arrived
        for p in range(n):
            j = (p - t) % n
            if causal and j > p:
                continue
            part = attention_partial(q_blocks[p], k_cur[p], v_cur[p], gqa, causal=False)
            partials[p] = merge(partials[p], part)
    for h in held:
        mem.free(h)
    return partials


def run_ring_forward(mesh: Mesh, model: ModelConfig, q: ShardedActivation, k: ShardedActivation,
                     v: ShardedActivation, causal: bool = True, merge=merge_partials) -> ForwardResult:
    check_inputs(model, mesh, q, k, v)
    C = mesh.devices
    mem = mesh.memory
    s_loc = model.S // C
    mesh.enter("pre_attn", stage=0, direction="forward")
    for d in range(C):
        mem.alloc(d, "input_shard", s_loc * model.d_model * mesh.bytes_per_element)
    mesh.enter("attn_kernel", stage=0)
    local = [mem.alloc(d, "qkv", mesh.nbytes(q.shards[d]) + 2 * mesh.nbytes(k.shards[d])) for d in range(C)]
    partials = ring_attention(mesh, q.shards, k.shards, v.shards, GqaMap(model.H_q, model.H_kv),
                              causal, s_loc, list(range(C)), merge=merge)
    out = [p.out for p in partials]
    handles = [mem.alloc(d, "output", mesh.nbytes(out[d])) for d in range(C)]
    for h in local:
        mem.free(h)
    return ForwardResult(out=ShardedActivation(out, "sequence", q.global_shape, handles))
