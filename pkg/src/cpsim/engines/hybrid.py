from __future__ import annotations

from ..mesh import Mesh, ShardedActivation
from ..tensor_core import merge_partials
from .common import ForwardResult
from .config import ModelConfig
from .ulysses import head_parallel_forward


def run_hybrid_forward(mesh: Mesh, model: ModelConfig, q: ShardedActivation, k: ShardedActivation,
                       v: ShardedActivation, causal: bool = True, merge=merge_partials) -> ForwardResult:
    """Ulysses inside each group of ``ulysses_degree`` devices, ring across groups.

    Forward only. With ``ring_degree == 1`` this is exactly the Ulysses path;
    with ``ulysses_degree == 1`` the exchanges are local copies and the ring
    sees the same blocks as plain ring attention. kv heads are replicated per
    query head when they do not split evenly over a Ulysses group.
    """
    a = mesh.config.ulysses_degree
    if model.H_q % a:
        raise ValueError(f"hybrid needs H_q divisible by ulysses_degree (H_q={model.H_q}, ulysses_degree={a})")
    return head_parallel_forward(mesh, model, q, k, v, causal, mesh.ulysses_groups(), mesh.ring_groups(),
                                 expand_kv=model.H_kv % a != 0, merge=merge)
