import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsim.engines import ModelConfig, UPipeConfig, run_upipe_forward
from cpsim.mesh import (INTERMEDIATE, MeshConfig, ShardedActivation, all_to_all_head_to_seq,
                        all_to_all_seq_to_head, create_mesh, ledger_report, ring_shift, shard_along_sequence)


def test_create_mesh_shapes():
    assert create_mesh(MeshConfig(2, ulysses_degree=2, ring_degree=1)).devices == 2
    m = create_mesh(MeshConfig(16, ulysses_degree=8, ring_degree=2))
    assert m.ulysses_groups() == [list(range(8)), list(range(8, 16))]
    assert m.ring_groups()[0] == [0, 8]
    with pytest.raises(ValueError, match="4x2 != 6"):
        MeshConfig(6, ulysses_degree=4, ring_degree=2)
    with pytest.raises(ValueError, match="at least one device"):
        MeshConfig(0)
    with pytest.raises(ValueError, match="bytes_per_element"):
        MeshConfig(2, bytes_per_element=3)


def test_seq_to_head_layout_two_devices():
    # Heads H0..H3 over S=4 split on two devices: device 0 gets H0, H1 over the full sequence.
    x = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1)
    mesh = create_mesh(MeshConfig(2))
    heads = all_to_all_seq_to_head(mesh, shard_along_sequence(x, 2))
    np.testing.assert_array_equal(heads.shards[0], x[:, 0:2])
    np.testing.assert_array_equal(heads.shards[1], x[:, 2:4])
    back = all_to_all_head_to_seq(mesh, heads)
    assert back.shard_shape == (2, 4, 1)
    np.testing.assert_array_equal(back.gather(), x)


def test_single_device_group_is_identity_and_free():
    x = np.random.default_rng(0).uniform(size=(4, 2, 3))
    mesh = create_mesh(MeshConfig(1))
    heads = all_to_all_seq_to_head(mesh, shard_along_sequence(x, 1), tensor="q")
    np.testing.assert_array_equal(heads.shards[0], x)
    assert mesh.comm.bytes_sent == [0]


def test_round_trip_bit_exact_and_symmetric_bytes():
    x = np.random.default_rng(1).uniform(size=(8, 4, 2))
    mesh = create_mesh(MeshConfig(4))
    act = shard_along_sequence(x, 4)
    heads = all_to_all_seq_to_head(mesh, act, label=None)
    forward_bytes = list(mesh.comm.bytes_sent)
    back = all_to_all_head_to_seq(mesh, heads, label=None)
    np.testing.assert_array_equal(back.gather(), x)
    assert [b - f for b, f in zip(mesh.comm.bytes_sent, forward_bytes)] == forward_bytes


def test_all_to_all_bytes_exclude_self_block():
    C, bpe = 4, 2
    x = np.zeros((8, 4, 2))
    mesh = create_mesh(MeshConfig(C, bytes_per_element=bpe))
    all_to_all_seq_to_head(mesh, shard_along_sequence(x, C), label=None)
    payload = x.size // C * bpe
    assert sum(mesh.comm.bytes_sent) == payload * (C - 1) // C * C
    assert sum(mesh.comm.bytes_received) == sum(mesh.comm.bytes_sent)


def test_all_to_all_divisibility():
    mesh = create_mesh(MeshConfig(2))
    with pytest.raises(ValueError, match="divisible"):
        all_to_all_seq_to_head(mesh, shard_along_sequence(np.zeros((4, 3, 1)), 2))
    with pytest.raises(ValueError, match="divisible"):
        shard_along_sequence(np.zeros((5, 2, 1)), 2)


def test_receive_buffers_labelled():
    mesh = create_mesh(MeshConfig(2))
    x = shard_along_sequence(np.zeros((4, 2, 2)), 2)
    heads = all_to_all_seq_to_head(mesh, x)
    assert [h.label for h in heads.handles] == ["a2a_buf", "a2a_buf"]
    back = all_to_all_head_to_seq(mesh, heads)
    assert back.handles[0].label == "out_a2a_buf"


def test_ring_shift():
    mesh = create_mesh(MeshConfig(4))
    t = [np.full((2, 1), float(i)) for i in range(4)]
    one = ring_shift(mesh, t, [0, 1, 2, 3], tensor="k")
    assert one[2][0, 0] == 1.0
    cur = t
    for _ in range(4):
        cur = ring_shift(mesh, cur, [0, 1, 2, 3])
    assert all(np.array_equal(a, b) for a, b in zip(cur, t))
    assert mesh.comm.bytes_sent[0] == 5 * 2 * 2
    assert ring_shift(mesh, t[:1], [0]) == t[:1]
    with pytest.raises(ValueError, match="empty"):
        ring_shift(mesh, [], [])


def test_allocator_reuse_and_peaks():
    mesh = create_mesh(MeshConfig(1))
    mem = mesh.memory
    h = mem.alloc(0, "qkv", 100)
    mem.free(h)
    mem.alloc(0, "qkv", 100, reuse=h)
    assert mem.peak[0] == 100
    mem.alloc(0, "qkv", 100)
    assert mem.peak[0] == 200
    with pytest.raises(ValueError, match="double free"):
        g = mem.alloc(0, "a2a_buf", 10)
        mem.free(g)
        mem.free(g)
    with pytest.raises(ValueError, match="size mismatch"):
        mem.alloc(0, "a2a_buf", 20, reuse=g)
    with pytest.raises(ValueError, match="positive"):
        mem.alloc(0, "qkv", 0)


def test_rebind_charges_nothing():
    mesh = create_mesh(MeshConfig(1))
    h = mesh.memory.alloc(0, "a2a_buf", 64)
    mesh.memory.rebind(h, "output")
    assert mesh.memory.live_bytes(0) == 64
    assert mesh.memory.live_bytes(0, INTERMEDIATE) == 0
    assert mesh.memory.peak[0] == 64


def test_upipe_peak_flat_after_stage_zero():
    model = ModelConfig(S=8, H_q=4, H_kv=4, d_head=2)
    mesh = create_mesh(MeshConfig(2))
    rng = np.random.default_rng(3)
    acts = [shard_along_sequence(rng.uniform(-1, 1, (8, 4, 2)), 2) for _ in range(3)]
    run_upipe_forward(mesh, model, UPipeConfig(2), *acts)
    peaks = [mesh.memory.stage_category_peak[0][("forward", s)] for s in range(2)]
    assert peaks[1] <= peaks[0]
    assert mesh.memory.category_peak[0][INTERMEDIATE] == peaks[0]


def test_ledger_report_snapshot():
    mesh = create_mesh(MeshConfig(2))
    comm, mem = ledger_report(mesh)
    assert comm.bytes_sent == (0, 0) and mem.peak == (0, 0)
    all_to_all_seq_to_head(mesh, shard_along_sequence(np.zeros((4, 2, 2)), 2))
    comm2, mem2 = ledger_report(mesh)
    assert comm.bytes_sent == (0, 0)
    assert sum(comm2.bytes_sent) == sum(comm2.bytes_received) > 0
    assert mem2.peak == (16, 16)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([4, 8]), st.integers(1, 3), st.integers(0, 99))
def test_conservation_and_round_trip(C, H, d, seed):
    x = np.random.default_rng(seed).uniform(size=(8, H, d))
    mesh = create_mesh(MeshConfig(C))
    act = shard_along_sequence(x, C)
    heads = all_to_all_seq_to_head(mesh, act, label=None)
    assert sum(s.size for s in heads.shards) == x.size
    back = all_to_all_head_to_seq(mesh, heads, label=None)
    np.testing.assert_array_equal(back.gather(), x)
    shifted = ring_shift(mesh, back.shards, list(range(C)))
    assert sum(s.size for s in shifted) == x.size
    assert sum(mesh.comm.bytes_sent) == sum(mesh.comm.bytes_received)
    sent = list(mesh.comm.bytes_sent)
    ring_shift(mesh, shifted, list(range(C)))
    assert all(a >= b for a, b in zip(mesh.comm.bytes_sent, sent))


def test_sharded_activation_rejects_ragged():
    with pytest.raises(ValueError, match="equal-sized"):
        ShardedActivation([np.zeros((2, 1)), np.zeros((3, 1))], "sequence", (5, 1))
