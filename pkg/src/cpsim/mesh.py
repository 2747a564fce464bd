"""Lockstep simulation of a device mesh with byte-accurate ledgers.

Devices are numbered ``0..C-1``. In a hybrid mesh device ``d`` sits at ring
position ``d // ulysses_degree`` and Ulysses rank ``d % ulysses_degree``, so
each Ulysses group is a run of consecutive devices.

Arrays are float64 in memory; every byte count uses ``bytes_per_element``
instead, so ledgers reflect the modelled precision rather than the host one.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

PHASES = ("pre_attn", "inp_a2a", "attn_kernel", "out_a2a")
DIRECTIONS = ("forward", "backward")

INTERMEDIATE = "attention_intermediate"
ACTIVATION = "activation"

# Counted-buffer set. Engines label every allocation with one of these.
LABEL_CATEGORY = MappingProxyType({
    "input_shard": ACTIVATION,
    "output": ACTIVATION,
    "grad_output": ACTIVATION,
    "qkv": INTERMEDIATE,
    "a2a_buf": INTERMEDIATE,
    "attn_out": INTERMEDIATE,
    "out_a2a_buf": INTERMEDIATE,
    "kv_ring_buf": INTERMEDIATE,
    "dout": INTERMEDIATE,
    "bwd_saved": INTERMEDIATE,
    "dqkv": INTERMEDIATE,
})


@dataclass(frozen=True)
class MeshConfig:
    devices: int
    ulysses_degree: int | None = None
    ring_degree: int = 1
    bytes_per_element: int = 2

    def __post_init__(self):
        if self.devices <= 0:
            raise ValueError(f"mesh needs at least one device (C={self.devices})")
        if self.ulysses_degree is None:
            if self.devices % self.ring_degree:
                raise ValueError(
                    f"C must equal ulysses_degree x ring_degree (C={self.devices}, ring={self.ring_degree})"
                )
            object.__setattr__(self, "ulysses_degree", self.devices // self.ring_degree)
        if self.ulysses_degree <= 0 or self.ring_degree <= 0:
            raise ValueError("ulysses_degree and ring_degree must be positive")
        if self.ulysses_degree * self.ring_degree != self.devices:
            raise ValueError(
                f"C must equal ulysses_degree x ring_degree "
                f"({self.ulysses_degree}x{self.ring_degree} != {self.devices})"
            )
        if self.bytes_per_element not in (1, 2, 4, 8):
            raise ValueError(f"bytes_per_element must be 1, 2, 4 or 8 (got {self.bytes_per_element})")


@dataclass(frozen=True)
class CommEntry:
    device: int
    kind: str  # "all_to_all" | "ring_shift"
    tensor: str
    payload_bytes: int
    sent: int
    received: int
    phase: str
    stage: int
    direction: str


class CommLedger:
    def __init__(self, devices: int):
        self.devices = devices
        self.bytes_sent = [0] * devices
        self.bytes_received = [0] * devices
        self.entries: list[CommEntry] = []

    def record(self, entry: CommEntry):
        self.bytes_sent[entry.device] += entry.sent
        self.bytes_received[entry.device] += entry.received
        self.entries.append(entry)

    def bytes_for(self, device: int, *, kind=None, phase=None, direction=None, tensors=None) -> int:
        total = 0
        for e in self.entries:
            if e.device != device:
                continue
            if kind is not None and e.kind != kind:
                continue
            if phase is not None and e.phase != phase:
                continue
            if direction is not None and e.direction != direction:
                continue
            if tensors is not None and e.tensor not in tensors:
                continue
            total += e.sent
        return total

    def count(self, device: int, kind: str, tensor: str | None = None) -> int:
        return sum(
            1 for e in self.entries
            if e.device == device and e.kind == kind and (tensor is None or e.tensor == tensor)
        )


@dataclass
class BufferHandle:
    id: int
    device: int
    label: str
    category: str
    nbytes: int
    live: bool = True


@dataclass(frozen=True)
class MemEvent:
    seq: int
    device: int
    op: str  # alloc | reuse | free | rebind | mark
    handle: int | None
    label: str | None
    nbytes: int
    phase: str
    stage: int
    direction: str
    live_after: int


class MemoryLedger:
    """Labelled allocations per device with running peaks.

    Peaks are kept per device overall, per category, per ``(direction, phase)``
    and per ``(direction, stage)`` so engines can be compared against the
    closed-form phase model and checked for stage-to-stage flatness.
    """

    def __init__(self, devices: int):
        self.devices = devices
        self._ids = itertools.count()
        self._seq = itertools.count()
        self.live_by_label = [defaultdict(int) for _ in range(devices)]
        self.live_by_category = [defaultdict(int) for _ in range(devices)]
        self.live_total = [0] * devices
        self.peak = [0] * devices
        self.category_peak = [defaultdict(int) for _ in range(devices)]
        self.phase_peak = [dict() for _ in range(devices)]
        self.stage_peak = [dict() for _ in range(devices)]
        self.stage_category_peak = [dict() for _ in range(devices)]
        self.events: list[MemEvent] = []
        self.phase = "pre_attn"
        self.stage = 0
        self.direction = "forward"

    def set_context(self, phase=None, stage=None, direction=None):
        if phase is not None:
            if phase not in PHASES:
                raise ValueError(f"unknown phase {phase!r}")
            self.phase = phase
        if stage is not None:
            self.stage = stage
        if direction is not None:
            if direction not in DIRECTIONS:
                raise ValueError(f"unknown direction {direction!r}")
            self.direction = direction

    def _observe(self, device: int, op: str, handle, label, nbytes: int):
        total = self.live_total[device]
        self.peak[device] = max(self.peak[device], total)
        for cat, b in self.live_by_category[device].items():
            if b > self.category_peak[device][cat]:
                self.category_peak[device][cat] = b
        key = (self.direction, self.phase)
        self.phase_peak[device][key] = max(self.phase_peak[device].get(key, 0), total)
        skey = (self.direction, self.stage, self.phase)
        self.stage_peak[device][skey] = max(self.stage_peak[device].get(skey, 0), total)
        ckey = (self.direction, self.stage)
        inter = self.live_by_category[device][INTERMEDIATE]
        self.stage_category_peak[device][ckey] = max(self.stage_category_peak[device].get(ckey, 0), inter)
        self.events.append(MemEvent(
            seq=next(self._seq), device=device, op=op, handle=handle, label=label, nbytes=nbytes,
            phase=self.phase, stage=self.stage, direction=self.direction, live_after=total,
        ))

    def _charge(self, handle: BufferHandle, sign: int):
        d = handle.device
        self.live_by_label[d][handle.label] += sign * handle.nbytes
        self.live_by_category[d][handle.category] += sign * handle.nbytes
        self.live_total[d] += sign * handle.nbytes

    def alloc(self, device: int, label: str, nbytes: int, phase: str | None = None, *,
              category: str | None = None, reuse: BufferHandle | None = None) -> BufferHandle:
        """Allocate ``nbytes`` on ``device``, or re-occupy a released slot via ``reuse``."""
        if nbytes <= 0:
            raise ValueError(f"allocation size must be positive (got {nbytes})")
        if not 0 <= device < self.devices:
            raise ValueError(f"no device {device}")
        if phase is not None:
            self.set_context(phase=phase)
        if category is None:
            category = LABEL_CATEGORY.get(label, "other")
        if reuse is not None:
            if reuse.live:
                raise ValueError(f"buffer {reuse.id} is still live and cannot be reused")
            if reuse.nbytes != nbytes or reuse.device != device:
                raise ValueError(
                    f"reuse size mismatch: slot {reuse.id} holds {reuse.nbytes} bytes on device "
                    f"{reuse.device}, requested {nbytes} on device {device}"
                )
            reuse.label, reuse.category, reuse.live = label, category, True
            handle, op = reuse, "reuse"
        else:
            handle = BufferHandle(next(self._ids), device, label, category, nbytes)
            op = "alloc"
        self._charge(handle, +1)
        self._observe(device, op, handle.id, label, nbytes)
        return handle

    def free(self, handle: BufferHandle, phase: str | None = None):
        if not handle.live:
            raise ValueError(f"double free of buffer {handle.id} ({handle.label})")
        if phase is not None:
            self.set_context(phase=phase)
        self._charge(handle, -1)
        handle.live = False
        self._observe(handle.device, "free", handle.id, handle.label, handle.nbytes)

    def rebind(self, handle: BufferHandle, label: str, nbytes: int | None = None, phase: str | None = None):
        """Reuse a live buffer for new content of the same size; no new bytes."""
        if not handle.live:
            raise ValueError(f"cannot rebind released buffer {handle.id}")
        if nbytes is not None and nbytes != handle.nbytes:
            raise ValueError(f"rebind size mismatch: {handle.nbytes} != {nbytes}")
        if phase is not None:
            self.set_context(phase=phase)
        self._charge(handle, -1)
        handle.label = label
        handle.category = LABEL_CATEGORY.get(label, "other")
        self._charge(handle, +1)
        self._observe(handle.device, "rebind", handle.id, label, 0)

    def mark(self, device: int):
        self._observe(device, "mark", None, None, 0)

    def live_bytes(self, device: int, category: str | None = None) -> int:
        if category is None:
            return self.live_total[device]
        return self.live_by_category[device][category]

    def phase_peaks(self, device: int, direction: str = "forward") -> dict[str, int]:
        return {p: self.phase_peak[device].get((direction, p), 0) for p in PHASES}


@dataclass(frozen=True)
class CommSnapshot:
    bytes_sent: tuple[int, ...]
    bytes_received: tuple[int, ...]
    entries: tuple[CommEntry, ...]


@dataclass(frozen=True)
class MemorySnapshot:
    peak: tuple[int, ...]
    category_peak: tuple[tuple[tuple[str, int], ...], ...]
    phase_peak: tuple[tuple[tuple[str, str, int], ...], ...]
    live_total: tuple[int, ...]
    events: tuple[MemEvent, ...]


class Mesh:
    """One simulated mesh. Not safe to share between threads; make one per run."""

    def __init__(self, config: MeshConfig):
        self.config = config
        self.comm = CommLedger(config.devices)
        self.memory = MemoryLedger(config.devices)

    @property
    def devices(self) -> int:
        return self.config.devices

    @property
    def bytes_per_element(self) -> int:
        return self.config.bytes_per_element

    def nbytes(self, x) -> int:
        size = x.size if hasattr(x, "size") else int(np.prod(x))
        return int(size) * self.bytes_per_element

    def ulysses_groups(self) -> list[list[int]]:
        a, r = self.config.ulysses_degree, self.config.ring_degree
        return [[p * a + u for u in range(a)] for p in range(r)]

    def ring_groups(self) -> list[list[int]]:
        a, r = self.config.ulysses_degree, self.config.ring_degree
        return [[p * a + u for p in range(r)] for u in range(a)]

    def enter(self, phase: str, stage: int | None = None, direction: str | None = None):
        """Move every device into ``phase`` and record its live bytes there."""
        self.memory.set_context(phase=phase, stage=stage, direction=direction)
        for d in range(self.devices):
            self.memory.mark(d)


def create_mesh(config: MeshConfig) -> Mesh:
    return Mesh(config)


@dataclass
class ShardedActivation:
    """Per-device shards of one logical tensor, split along ``axis``.

    Sequence shards are ``[S/C, H, d]``; head shards are
    ``[S_group, H/|group|, d]``. ``handles`` optionally carries the memory
    ledger buffers backing each shard.
    """

    shards: list
    axis: str  # "sequence" | "head"
    global_shape: tuple
    handles: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.axis not in ("sequence", "head"):
            raise ValueError(f"unknown sharding axis {self.axis!r}")
        shapes = {s.shape for s in self.shards}
        if len(shapes) != 1:
            raise ValueError(f"shards must be equal-sized, got {sorted(shapes)}")

    @property
    def shard_shape(self) -> tuple:
        return self.shards[0].shape

    def gather(self) -> np.ndarray:
        """Reassemble the global tensor (head axis: single-group layouts only)."""
        if self.axis == "sequence":
            return np.concatenate(self.shards, axis=0)
        return np.concatenate(self.shards, axis=1)


def shard_along_sequence(x: np.ndarray, devices: int) -> ShardedActivation:
    s = x.shape[0]
    if s % devices:
        raise ValueError(f"sequence length must be divisible by C (S={s}, C={devices})")
    n = s // devices
    shards = [np.array(x[i * n:(i + 1) * n]) for i in range(devices)]
    return ShardedActivation(shards, "sequence", tuple(x.shape))


def _groups_for(mesh: Mesh, groups):
    if groups is None:
        return [list(range(mesh.devices))]
    covered = sorted(d for g in groups for d in g)
    if covered != list(range(mesh.devices)):
        raise ValueError(f"groups must partition the mesh devices, got {groups}")
    return groups


def _record_a2a(mesh: Mesh, device: int, tensor: str, payload_elems: int, n: int):
    mem = mesh.memory
    bpe = mesh.bytes_per_element
    moved = payload_elems * (n - 1) // n * bpe
    mesh.comm.record(CommEntry(
        device=device, kind="all_to_all", tensor=tensor, payload_bytes=payload_elems * bpe,
        sent=moved, received=moved, phase=mem.phase, stage=mem.stage, direction=mem.direction,
    ))


def all_to_all_seq_to_head(mesh: Mesh, x: ShardedActivation, groups=None, *,
                           tensor: str = "", label: str | None = "a2a_buf") -> ShardedActivation:
    """Reshard from sequence to head within each group.

    Group rank ``j`` ends up with head block ``j`` over the group's full
    sequence, ordered by source rank. The self block is not charged to the
    comm ledger. With ``label`` set, a receive buffer is allocated per device
    (also for single-device groups, where the exchange is a local copy).
    """
    if x.axis != "sequence":
        raise ValueError("all_to_all_seq_to_head expects a sequence-sharded activation")
    groups = _groups_for(mesh, groups)
    out = [None] * mesh.devices
    for group in groups:
        n = len(group)
        h = x.shards[group[0]].shape[1]
        if h % n:
            raise ValueError(f"head count must be divisible by group size (h={h}, |group|={n})")
        hb = h // n
        for j, dst in enumerate(group):
            out[dst] = np.concatenate([x.shards[src][:, j * hb:(j + 1) * hb] for src in group], axis=0)
        for src in group:
            _record_a2a(mesh, src, tensor, x.shards[src].size, n)
    handles = None
    if label is not None:
        handles = [mesh.memory.alloc(d, label, mesh.nbytes(out[d])) for d in range(mesh.devices)]
    return ShardedActivation(out, "head", x.global_shape, handles)


def all_to_all_head_to_seq(mesh: Mesh, x: ShardedActivation, groups=None, *,
                           tensor: str = "", label: str | None = "out_a2a_buf") -> ShardedActivation:
    """Inverse of :func:`all_to_all_seq_to_head`."""
    if x.axis != "head":
        raise ValueError("all_to_all_head_to_seq expects a head-sharded activation")
    groups = _groups_for(mesh, groups)
    out = [None] * mesh.devices
    for group in groups:
        n = len(group)
        s = x.shards[group[0]].shape[0]
        if s % n:
            raise ValueError(f"group sequence must be divisible by group size (s={s}, |group|={n})")
        sb = s // n
        for i, dst in enumerate(group):
            out[dst] = np.concatenate([x.shards[src][i * sb:(i + 1) * sb] for src in group], axis=1)
        for src in group:
            _record_a2a(mesh, src, tensor, x.shards[src].size, n)
    handles = None
    if label is not None:
        handles = [mesh.memory.alloc(d, label, mesh.nbytes(out[d])) for d in range(mesh.devices)]
    return ShardedActivation(out, "sequence", x.global_shape, handles)


def ring_shift(mesh: Mesh, tensors: list, ring_group: list[int], *, tensor: str = "") -> list:
    """Pass each ring member's tensor to its successor.

    ``tensors[i]`` belongs to ``ring_group[i]``; afterwards position ``i``
    holds what position ``i-1`` had. Each device is charged its full payload.
    """
    n = len(ring_group)
    if n == 0:
        raise ValueError("ring group is empty")
    if len(tensors) != n:
        raise ValueError(f"expected {n} tensors, got {len(tensors)}")
    if len({t.shape for t in tensors}) != 1:
        raise ValueError("ring shards must be equal-sized")
    if n == 1:
        return list(tensors)
    mem = mesh.memory
    for i, dev in enumerate(ring_group):
        b = mesh.nbytes(tensors[i])
        mesh.comm.record(CommEntry(
            device=dev, kind="ring_shift", tensor=tensor, payload_bytes=b, sent=b, received=b,
            phase=mem.phase, stage=mem.stage, direction=mem.direction,
        ))
    return [tensors[(i - 1) % n] for i in range(n)]


def ledger_report(mesh: Mesh) -> tuple[CommSnapshot, MemorySnapshot]:
    comm = CommSnapshot(
        bytes_sent=tuple(mesh.comm.bytes_sent),
        bytes_received=tuple(mesh.comm.bytes_received),
        entries=tuple(mesh.comm.entries),
    )
    mem = mesh.memory
    memory = MemorySnapshot(
        peak=tuple(mem.peak),
        category_peak=tuple(tuple(sorted(cp.items())) for cp in mem.category_peak),
        phase_peak=tuple(tuple(sorted((k[0], k[1], v) for k, v in pp.items())) for pp in mem.phase_peak),
        live_total=tuple(mem.live_total),
        events=tuple(mem.events),
    )
    return comm, memory
