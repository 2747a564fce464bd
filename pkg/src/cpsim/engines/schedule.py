"""Head-stage schedules for headwise-chunked attention under GQA.

With one head per device per stage (``U == C``) and ``R`` query heads per kv
head, the grouped schedule sends ``C`` distinct kv heads with one query from
each group in the first stage of a super-stage, then only the remaining
queries of those groups in the next ``R - 1`` stages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Stage:
    q_heads: tuple[int, ...]
    kv_heads: tuple[int, ...]  # kv heads shipped this stage, one per q slot when naive


@dataclass
class HeadSchedule:
    H_q: int
    H_kv: int
    C: int
    U: int
    stages: list[Stage]
    scheduled: bool
    super_stage_len: int
    warning: str | None = None
    inverse: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.inverse:
            self.inverse = {h: (s, slot) for s, st in enumerate(self.stages) for slot, h in enumerate(st.q_heads)}

    @property
    def ratio(self) -> int:
        return self.H_q // self.H_kv

    @property
    def fallback(self) -> bool:
        return self.warning is not None

    def super_stage(self, stage: int) -> tuple[int, int]:
        """``(first stage index, position within super-stage)``."""
        pos = stage % self.super_stage_len
        return stage - pos, pos

    def resident_kv(self, stage: int) -> tuple[int, ...]:
        """kv heads (one per q slot) available to ``stage`` after communication."""
        first, _ = self.super_stage(stage)
        return self.stages[first].kv_heads

    def check_invariants(self) -> list[str]:
        problems = []
        seen = sorted(h for st in self.stages for h in st.q_heads)
        if seen != list(range(self.H_q)):
            problems.append(f"query heads not covered exactly once: {seen}")
        for i, st in enumerate(self.stages):
            if len(st.q_heads) != self.U:
                problems.append(f"stage {i} has {len(st.q_heads)} query heads, expected {self.U}")
        r = self.ratio
        for i, st in enumerate(self.stages):
            first, pos = self.super_stage(i)
            if self.scheduled and pos and st.kv_heads:
                problems.append(f"stage {i} re-sends kv heads inside a super-stage")
            resident = self.resident_kv(i)
            for slot, h in enumerate(st.q_heads):
                if slot >= len(resident) or resident[slot] != h // r:
                    problems.append(f"stage {i}: query head {h} lacks kv head {h // r} in slot {slot}")
        if self.scheduled:
            for first in range(0, len(self.stages), self.super_stage_len):
                kv = self.stages[first].kv_heads
                if len(set(kv)) != len(kv):
                    problems.append(f"super-stage at {first} sends a kv head twice")
        return problems

    def to_dict(self) -> dict:
        return {
            "H_q": self.H_q,
            "H_kv": self.H_kv,
            "C": self.C,
            "U": self.U,
            "scheduled": self.scheduled,
            "fallback": self.fallback,
            "warning": self.warning,
            "super_stage_len": self.super_stage_len,
            "stages": [{"q": list(st.q_heads), "kv": list(st.kv_heads)} for st in self.stages],
        }


def _naive(H_q, H_kv, C, U, warning):
    r = H_q // H_kv
    stages = []
    for s in range(H_q // U):
        q = tuple(range(s * U, (s + 1) * U))
        stages.append(Stage(q, tuple(h // r for h in q)))
    return HeadSchedule(H_q, H_kv, C, U, stages, scheduled=False, super_stage_len=1, warning=warning)


def build_gqa_schedule(H_q: int, H_kv: int, C: int, U: int) -> HeadSchedule:
    if min(H_q, H_kv, C, U) <= 0:
        raise ValueError("H_q, H_kv, C and U must be positive")
    if H_q % H_kv:
        raise ValueError(f"H_q must be divisible by H_kv (H_q={H_q}, H_kv={H_kv})")
    if U % C:
        raise ValueError(f"U must be divisible by C (U={U}, C={C})")
    if H_q % U:
        raise ValueError(f"H_q must be divisible by U (H_q={H_q}, U={U})")
    r = H_q // H_kv
    if r == 1:
        return _naive(H_q, H_kv, C, U, None)
    if U != C:
        return _naive(H_q, H_kv, C, U, f"grouped schedule needs U == C (U={U}, C={C}); kv heads re-sent every stage")
    if H_kv % C:
        return _naive(H_q, H_kv, C, U, f"H_kv not divisible by C (H_kv={H_kv}, C={C}); kv heads re-sent every stage")

    stages = []
    for s in range(H_kv // C):
        kv = tuple(range(s * C, (s + 1) * C))
        for pos in range(r):
            stages.append(Stage(tuple(g * r + pos for g in kv), kv if pos == 0 else ()))
    return HeadSchedule(H_q, H_kv, C, U, stages, scheduled=True, super_stage_len=r)


def gqa_comm_volume(H_q: int, H_kv: int, C: int, scheduled: bool) -> int:
    """Head blocks each device sends during the input all-to-alls of one forward.

    Naive: ``3 * (H_q/C) * (C-1)``. Grouped: ``(3 + R - 1) * (H_q/(C*R)) * (C-1)``.
    One unit is a single head's ``[S/C, d_head]`` block.
    """
    if H_q % C:
        raise ValueError(f"H_q must be divisible by C (H_q={H_q}, C={C})")
    if H_q % H_kv:
        raise ValueError(f"H_q must be divisible by H_kv (H_q={H_q}, H_kv={H_kv})")
    r = H_q // H_kv
    if not scheduled:
        return 3 * (H_q // C) * (C - 1)
    if H_kv % C:
        raise ValueError(f"grouped volume needs H_kv divisible by C (H_kv={H_kv}, C={C})")
    return (3 + r - 1) * (H_q // (C * r)) * (C - 1)


def schedule_dump(H_q: int, H_kv: int, C: int) -> tuple[str, dict]:
    """Text and JSON views of the ``U == C`` schedule with both volumes."""
    sched = build_gqa_schedule(H_q, H_kv, C, C)
    naive = gqa_comm_volume(H_q, H_kv, C, scheduled=False)
    grouped = gqa_comm_volume(H_q, H_kv, C, scheduled=True) if sched.scheduled else naive
    lines = [f"H_q={H_q} H_kv={H_kv} C={C} U={C} R={H_q // H_kv} stages={len(sched.stages)}"]
    if sched.fallback:
        lines.append(f"FALLBACK: {sched.warning}")
    for i, st in enumerate(sched.stages):
        lines.append(f"stage {i}: q={list(st.q_heads)} kv={list(st.kv_heads)}")
    lines.append(f"head transfers per device: naive={naive} scheduled={grouped}")
    data = sched.to_dict()
    data["volume"] = {"naive": naive, "scheduled": grouped}
    return "\n".join(lines), data


def schedule_json(H_q: int, H_kv: int, C: int) -> str:
    return json.dumps(schedule_dump(H_q, H_kv, C)[1], indent=2)
