"""Simulated context-parallel attention with exact numerics and byte ledgers."""

from .mesh import MeshConfig, ShardedActivation, create_mesh, ledger_report
from .tensor_core import GqaMap, merge_partials, reference_attention_backward, reference_attention_forward

__all__ = [
    "MeshConfig", "ShardedActivation", "create_mesh", "ledger_report",
    "GqaMap", "merge_partials", "reference_attention_backward", "reference_attention_forward",
]
__version__ = "0.1.0"
