"""Closed-form activation-memory model for one transformer forward/backward.

Attention-block values are in units of ``d_model`` elements: a value of
``x`` means ``x * d_model * bytes_per_element`` bytes per device. The
stage breakdown (:func:`table1_breakdown`) is in bytes over the full
sequence.

Arithmetic uses :class:`fractions.Fraction` so expressions such as
``2 + (gamma + 1) / nu`` stay exact and measured ledgers can be compared
with ``==``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .engines.config import ModelConfig

METHODS = ("ulysses", "ulysses_offload", "fpdt", "upipe")
FORWARD_PHASES = ("before", "inp_a2a", "attn_kernel", "out_a2a")
# Backward columns run in execution order: d_out is resharded first.
BACKWARD_PHASES = ("before", "out_a2a", "attn_kernel", "inp_a2a")

# Logits and log-softmax are kept in fp32 whatever the activation precision.
CROSS_ENTROPY_BYTES = 4


@dataclass(frozen=True)
class GqaFactors:
    """``gamma``: size of q, k, v relative to q. ``beta``: the same for the
    eight backward tensors (q, k, v, out, d_out, dq, dk, dv)."""

    R: int

    def __post_init__(self):
        if self.R < 1:
            raise ValueError(f"group ratio must be >= 1 (R={self.R})")

    @property
    def gamma(self) -> Fraction:
        return 1 + Fraction(2, self.R)

    @property
    def beta(self) -> Fraction:
        return 4 + Fraction(4, self.R)


@dataclass(frozen=True)
class FpdtParams:
    pi: int

    def __post_init__(self):
        if self.pi < 1:
            raise ValueError(f"FPDT chunk count must be >= 1 (pi={self.pi})")


@dataclass(frozen=True)
class PhaseMemoryReport:
    method: str
    direction: str
    phases: tuple[tuple[str, Fraction], ...]
    params: dict = field(compare=False)

    def __post_init__(self):
        for name, value in self.phases:
            if value <= 0:
                raise ValueError(f"phase {name} has non-positive value {value}")

    @property
    def values(self) -> dict[str, Fraction]:
        return dict(self.phases)

    @property
    def peak(self) -> Fraction:
        return max(v for _, v in self.phases)

    def to_bytes(self, d_model: int, bytes_per_element: int) -> dict[str, int]:
        """Per-device bytes for each phase; exact when the value times d_model is integral."""
        out = {}
        for name, value in self.phases:
            b = value * d_model * bytes_per_element
            if b.denominator != 1:
                raise ValueError(f"phase {name} is {b} bytes, not a whole number")
            out[name] = int(b)
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "direction": self.direction,
            "phases": {name: str(value) for name, value in self.phases},
            "peak": str(self.peak),
            "params": {k: (str(v) if isinstance(v, Fraction) else v) for k, v in self.params.items()},
        }


def _check(method, S, C, L, R, nu, pi):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if min(S, C, L) < 1:
        raise ValueError(f"S, C and L must be positive (S={S}, C={C}, L={L})")
    if method == "upipe" and (nu is None or nu < 1):
        raise ValueError("upipe needs the stage count nu >= 1")
    if method == "fpdt":
        if pi is None:
            raise ValueError("fpdt needs the chunk count pi")
        FpdtParams(pi)
    g = GqaFactors(R)
    return g, Fraction(S, C)


def _report(method, direction, names, coeffs, S, C, L, R, nu, pi, g):
    unit = Fraction(S, C)
    phases = tuple((n, c * unit) for n, c in zip(names, coeffs))
    params = {"S": S, "C": C, "L": L, "R": R, "nu": nu, "pi": pi, "gamma": g.gamma, "beta": g.beta}
    return PhaseMemoryReport(method, direction, phases, params)


def attn_fwd_peak(method: str, S: int, C: int, L: int = 1, R: int = 1, nu: int | None = None,
                  pi: int | None = None) -> PhaseMemoryReport:
    """Per-device peak memory in each phase of the forward attention block."""
    g, _ = _check(method, S, C, L, R, nu, pi)
    gm = g.gamma
    if method == "ulysses":
        coeffs = (L, L + gm + 1, L + gm + 1, L + 2)
    elif method == "ulysses_offload":
        coeffs = (1, 1 + gm + 1, 1 + gm + 1, 3)
    elif method == "fpdt":
        p = Fraction(1, pi)
        coeffs = (p, (1 + gm + 1) * p, (2 * gm + 1) * p, 2 * p)
    else:
        n = Fraction(1, nu)
        coeffs = (1, 2 + (gm + 1) * n, 2 + gm * n, 1 + 2 * n)
    return _report(method, "forward", FORWARD_PHASES, coeffs, S, C, L, R, nu, pi, g)


def attn_bwd_peak(method: str, S: int, C: int, L: int = 1, R: int = 1, nu: int | None = None,
                  pi: int | None = None) -> PhaseMemoryReport:
    """Per-device peak memory in each phase of the backward attention block.

    The FPDT "before" cell is ``1/pi`` as published, without the factor of two
    that the other rows carry.
    """
    g, _ = _check(method, S, C, L, R, nu, pi)
    gm, bt = g.gamma, g.beta
    if method == "ulysses":
        coeffs = (L + 1, L + 2, L + bt + 1, L + gm + 1)
    elif method == "ulysses_offload":
        coeffs = (2, 3, bt + 2, gm + 2)
    elif method == "fpdt":
        p = Fraction(1, pi)
        coeffs = (p, 3 * p, (bt + 2) * p, (gm + 2) * p)
    else:
        n = Fraction(1, nu)
        coeffs = (2, 2 + 2 * n, 2 + (bt + 1) * n, 2 + 2 * (gm + 1) * n)
    return _report(method, "backward", BACKWARD_PHASES, coeffs, S, C, L, R, nu, pi, g)


@dataclass(frozen=True)
class StageMemory:
    """Bytes for one forward stage over the whole sequence.

    ``total`` sums the columns named in ``counted``; the embedding's integer
    token ids and the cross-entropy input are listed but not counted.
    """

    inputs: int
    intermediate: dict
    outputs: int
    counted: tuple[str, ...]
    extra: dict = field(default_factory=dict)

    @property
    def intermediate_total(self) -> int:
        return sum(self.intermediate.values())

    @property
    def total(self) -> int:
        parts = {"inputs": self.inputs, "intermediate": self.intermediate_total, "outputs": self.outputs}
        return sum(parts[c] for c in self.counted)

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs,
            "intermediate": dict(self.intermediate),
            "outputs": self.outputs,
            "total": self.total,
            "counted": list(self.counted),
            **({"extra": dict(self.extra)} if self.extra else {}),
        }


def table1_breakdown(model: ModelConfig, bytes_per_element: int = 2) -> dict[str, StageMemory]:
    """Forward memory of embedding, attention, feed-forward and cross-entropy stages.

    The attention stage's log-sum-exp (``S * H_q`` values) is reported under
    ``extra`` and left out of its total.
    """
    if model.d_ff is None or model.V is None:
        raise ValueError("table1_breakdown needs d_ff and V")
    S, dm, b = model.S, model.d_model, bytes_per_element
    act = S * dm * b
    return {
        "embedding": StageMemory(
            inputs=4 * S, intermediate={}, outputs=act, counted=("intermediate", "outputs")),
        "attention": StageMemory(
            inputs=act,
            intermediate={"qkv": 3 * S * model.H_q * model.d_head * b,
                          "all_to_all": 3 * S * model.H_q * model.d_head * b},
            outputs=act, counted=("inputs", "intermediate", "outputs"),
            extra={"lse": S * model.H_q * b}),
        "ffn": StageMemory(
            inputs=act, intermediate={"hidden": 4 * S * model.d_ff * b}, outputs=act,
            counted=("inputs", "intermediate", "outputs")),
        "cross_entropy": StageMemory(
            inputs=act, intermediate={"logits_logsoftmax": 2 * S * model.V * CROSS_ENTROPY_BYTES},
            outputs=CROSS_ENTROPY_BYTES, counted=("intermediate",)),
    }


def upipe_savings(H_q: int, C: int, U: int, S: int, d_head: int, bytes_per_element: int = 2) -> dict:
    """Attention-intermediate bytes per device: q, k, v plus their exchange buffers.

    Twelve bytes per element-row at 2 bytes per element (six tensors),
    scaled linearly for other widths.
    """
    if U % C:
        raise ValueError(f"U must be divisible by C (U={U}, C={C})")
    if H_q % U:
        raise ValueError(f"H_q must be divisible by U (H_q={H_q}, U={U})")
    if S % C:
        raise ValueError(f"S must be divisible by C (S={S}, C={C})")
    per_head = 6 * bytes_per_element * (S // C) * d_head
    return {
        "ulysses_bytes": per_head * H_q,
        "upipe_bytes": per_head * U,
        "reduction_ratio": 1 - Fraction(U, H_q),
    }
