import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpsim.engines import build_gqa_schedule, gqa_comm_volume, schedule_dump


def test_four_kv_heads_over_four_devices():
    s = build_gqa_schedule(16, 4, 4, 4)
    assert s.scheduled and s.super_stage_len == 4
    assert s.stages[0].q_heads == (0, 4, 8, 12) and s.stages[0].kv_heads == (0, 1, 2, 3)
    assert s.stages[1].q_heads == (1, 5, 9, 13) and s.stages[1].kv_heads == ()
    assert s.inverse[9] == (1, 2)
    assert s.check_invariants() == []


def test_mha_schedule_is_naive():
    s = build_gqa_schedule(8, 8, 2, 2)
    assert not s.scheduled and not s.fallback
    assert [st.q_heads for st in s.stages] == [(0, 1), (2, 3), (4, 5), (6, 7)]
    assert all(st.kv_heads == st.q_heads for st in s.stages)


def test_llama_shape_single_super_stage():
    s = build_gqa_schedule(32, 8, 8, 8)
    assert len(s.stages) == 4 and s.super_stage_len == 4
    assert s.stages[0].kv_heads == tuple(range(8))
    assert all(st.kv_heads == () for st in s.stages[1:])


def test_fallbacks_flagged():
    s = build_gqa_schedule(8, 2, 4, 4)
    assert s.fallback and "H_kv" in s.warning
    assert s.check_invariants() == []
    s = build_gqa_schedule(8, 2, 2, 4)
    assert s.fallback and "U == C" in s.warning
    with pytest.raises(ValueError, match="U must be divisible by C"):
        build_gqa_schedule(8, 2, 2, 3)


def test_comm_volume_examples():
    assert gqa_comm_volume(16, 4, 4, False) == 36
    assert gqa_comm_volume(16, 4, 4, True) == 18
    assert gqa_comm_volume(8, 8, 4, True) == gqa_comm_volume(8, 8, 4, False)


def test_schedule_dump_text_and_json():
    text, data = schedule_dump(16, 4, 4)
    assert "stage 0: q=[0, 4, 8, 12] kv=[0, 1, 2, 3]" in text
    assert data["volume"] == {"naive": 36, "scheduled": 18}
    assert len(schedule_dump(32, 8, 8)[1]["stages"]) == 4
    _, data = schedule_dump(8, 2, 4)
    assert data["fallback"] is True
    json.dumps(data)


@given(st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4, 8]),
       st.sampled_from([1, 2, 4]))
def test_schedule_invariants_everywhere(H_kv, R, C, mult):
    H_q = H_kv * R
    U = C * mult
    if H_q % U:
        return
    s = build_gqa_schedule(H_q, H_kv, C, U)
    assert s.check_invariants() == []
    if s.scheduled and C > 1 and R > 1:
        assert gqa_comm_volume(H_q, H_kv, C, True) < gqa_comm_volume(H_q, H_kv, C, False)
