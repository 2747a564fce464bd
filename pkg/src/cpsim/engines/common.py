from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh import BufferHandle, Mesh, ShardedActivation, shard_along_sequence
from ..tensor_core import GqaMap, reference_attention_forward
from .config import ModelConfig


@dataclass
class ForwardResult:
    out: ShardedActivation
    state: object | None = None
    schedule: object | None = None


@dataclass
class HeadShardState:
    """Head-sharded tensors one device saw in one attention call, kept for backward."""

    q: list
    k: list
    v: list
    out: list
    lse: list
    gqa: GqaMap
    causal: bool
    expand_kv: bool = False


@dataclass
class UPipeState:
    stages: list[HeadShardState]
    schedule: object
    causal: bool


def shard_sequence(x: np.ndarray, mesh: Mesh) -> ShardedActivation:
    """Contiguous equal sequence shards in device order."""
    return shard_along_sequence(x, mesh.devices)


def run_oracle(model: ModelConfig, q, k, v, causal: bool = True) -> np.ndarray:
    out, _ = reference_attention_forward(q, k, v, GqaMap(model.H_q, model.H_kv), causal=causal)
    return out


def check_inputs(model: ModelConfig, mesh: Mesh, q: ShardedActivation, k: ShardedActivation, v: ShardedActivation):
    model.check_mesh(mesh.devices)
    s_loc = model.S // mesh.devices
    want = {"q": (s_loc, model.H_q, model.d_head), "k": (s_loc, model.H_kv, model.d_head),
            "v": (s_loc, model.H_kv, model.d_head)}
    for name, act in (("q", q), ("k", k), ("v", v)):
        if act.axis != "sequence":
            raise ValueError(f"{name} must be sequence-sharded")
        if len(act.shards) != mesh.devices:
            raise ValueError(f"{name} has {len(act.shards)} shards for {mesh.devices} devices")
        if act.shard_shape != want[name]:
            raise ValueError(f"{name} shard shape {act.shard_shape} != expected {want[name]}")


@dataclass
class QKVProjection:
    """Fixed linear maps ``x [S, d_in] -> q/k/v [S, heads, d_head]``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    @classmethod
    def random(cls, model: ModelConfig, rng: np.random.Generator, d_in: int | None = None):
        d_in = d_in or model.d_model
        scale = 1.0 / np.sqrt(d_in)
        return cls(
            wq=rng.uniform(-1, 1, (d_in, model.H_q, model.d_head)) * scale,
            wk=rng.uniform(-1, 1, (d_in, model.H_kv, model.d_head)) * scale,
            wv=rng.uniform(-1, 1, (d_in, model.H_kv, model.d_head)) * scale,
        )

    def heads(self, x: np.ndarray, which: str, heads) -> np.ndarray:
        w = {"q": self.wq, "k": self.wk, "v": self.wv}[which]
        return np.einsum("sm,mhd->shd", x, w[:, list(heads)])

    def project(self, x: np.ndarray):
        return (self.heads(x, "q", range(self.wq.shape[1])),
                self.heads(x, "k", range(self.wk.shape[1])),
                self.heads(x, "v", range(self.wv.shape[1])))


class HeadSource:
    """Per-device head slices, either cut from pre-formed q/k/v or projected from x."""

    def __init__(self, q=None, k=None, v=None, x=None, projection=None):
        if projection is not None:
            if x is None:
                raise ValueError("projection requires the sequence-sharded input x")
            self._x, self._proj = x, projection
            self._qkv = None
        else:
            if q is None or k is None or v is None:
                raise ValueError("provide q, k, v or x with a projection")
            self._qkv = {"q": q, "k": k, "v": v}
            self._x = self._proj = None

    def get(self, which: str, device: int, heads) -> np.ndarray:
        if self._qkv is not None:
            return np.array(self._qkv[which].shards[device][:, list(heads)])
        return self._proj.heads(self._x.shards[device], which, heads)

    def full(self, mesh: Mesh, model: ModelConfig):
        if self._qkv is not None:
            return self._qkv["q"], self._qkv["k"], self._qkv["v"]
        acts = []
        for which, h in (("q", model.H_q), ("k", model.H_kv), ("v", model.H_kv)):
            shards = [self.get(which, d, range(h)) for d in range(mesh.devices)]
            acts.append(ShardedActivation(shards, "sequence", (model.S, h, model.d_head)))
        return tuple(acts)


@dataclass
class SlotPool:
    """Released buffers kept per device and size so later stages re-occupy them."""

    mesh: Mesh
    free: dict = field(default_factory=dict)

    def take(self, device: int, label: str, nbytes: int) -> BufferHandle:
        slots = self.free.get((device, nbytes))
        reuse = slots.pop() if slots else None
        return self.mesh.memory.alloc(device, label, nbytes, reuse=reuse)

    def release(self, handle: BufferHandle):
        self.mesh.memory.free(handle)
        self.free.setdefault((handle.device, handle.nbytes), []).append(handle)
