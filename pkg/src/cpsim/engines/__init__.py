from .common import ForwardResult, HeadShardState, QKVProjection, UPipeState, run_oracle, shard_sequence
from .config import ModelConfig, UPipeConfig
from .hybrid import run_hybrid_forward
from .ring import ring_attention, run_ring_forward
from .schedule import HeadSchedule, Stage, build_gqa_schedule, gqa_comm_volume, schedule_dump
from .ulysses import run_ulysses_backward, run_ulysses_forward
from .upipe import run_upipe_backward, run_upipe_forward

__all__ = [
    "ForwardResult", "HeadShardState", "QKVProjection", "UPipeState", "run_oracle", "shard_sequence",
    "ModelConfig", "UPipeConfig", "run_hybrid_forward", "ring_attention", "run_ring_forward",
    "HeadSchedule", "Stage", "build_gqa_schedule", "gqa_comm_volume", "schedule_dump",
    "run_ulysses_backward", "run_ulysses_forward", "run_upipe_backward", "run_upipe_forward",
]
