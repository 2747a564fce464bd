from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ModelConfig:
    """Attention-block shape. ``d_ff``, ``V`` and ``L`` only feed the analytical model."""

    S: int
    H_q: int
    H_kv: int
    d_head: int
    d_ff: int | None = None
    V: int | None = None
    L: int = 1

    def __post_init__(self):
        for name in ("S", "H_q", "H_kv", "d_head", "L"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive (got {getattr(self, name)})")
        if self.H_q % self.H_kv:
            raise ValueError(f"H_q must be divisible by H_kv (H_q={self.H_q}, H_kv={self.H_kv})")

    @property
    def d_model(self) -> int:
        return self.H_q * self.d_head

    @property
    def ratio(self) -> int:
        return self.H_q // self.H_kv

    def check_mesh(self, devices: int):
        if self.S % devices:
            raise ValueError(f"S must be divisible by C (S={self.S}, C={devices})")


@dataclass(frozen=True)
class UPipeConfig:
    """Heads processed per stage."""

    U: int

    def validate(self, H_q: int, devices: int):
        if self.U <= 0:
            raise ValueError(f"U must be positive (got {self.U})")
        if self.U % devices:
            raise ValueError(f"U must be divisible by C (U={self.U}, C={devices})")
        if H_q % self.U:
            raise ValueError(f"H_q must be divisible by U (H_q={H_q}, U={self.U})")

    def stages(self, H_q: int) -> int:
        return H_q // self.U
