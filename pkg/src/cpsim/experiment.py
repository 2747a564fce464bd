"""Experiment configs, single runs and their reports.

Random tensors come from ``numpy.random.default_rng(seed)`` (PCG64), drawn
uniform on ``[-1, 1)`` in the order q, k, v, then the output cotangent when
a backward pass is requested.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import mem_model
from .engines import (ForwardResult, ModelConfig, UPipeConfig, build_gqa_schedule, gqa_comm_volume,
                      run_hybrid_forward, run_ring_forward, run_ulysses_backward, run_ulysses_forward, run_upipe_backward,
                      run_upipe_forward, shard_sequence)
from .engines.schedule import schedule_dump
from .mesh import INTERMEDIATE, PHASES, MeshConfig, create_mesh
from .tensor_core import GqaMap, merge_partials, reference_attention_backward, reference_attention_forward

SCHEMA = "cpsim.run_report/1"
METHODS = ("oracle", "ulysses", "ring", "upipe", "hybrid")
EQUIV_TOL = 1e-9

MODEL_KEYS = ("S", "H_q", "H_kv", "d_head", "d_ff", "V", "L")
MESH_KEYS = ("C", "ulysses_degree", "ring_degree", "bytes_per_element")
TOP_KEYS = ("model", "mesh", "method", "U", "seed", "causal", "output", "backward", "gqa_schedule")


class ConfigError(ValueError):
    """A config that is malformed or violates a divisibility constraint."""


class ConfigIOError(OSError):
    """The config file could not be read."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    mesh: MeshConfig
    method: str
    U: int | None = None
    seed: int = 0
    causal: bool = True
    output: str | None = None
    backward: bool = False
    gqa_schedule: bool = True

    def to_dict(self) -> dict:
        m, me = self.model, self.mesh
        return {
            "model": {k: getattr(m, k) for k in MODEL_KEYS},
            "mesh": {"C": me.devices, "ulysses_degree": me.ulysses_degree, "ring_degree": me.ring_degree,
                     "bytes_per_element": me.bytes_per_element},
            "method": self.method,
            "U": self.U,
            "seed": self.seed,
            "causal": self.causal,
            "output": self.output,
            "backward": self.backward,
            "gqa_schedule": self.gqa_schedule,
        }

    def key(self) -> tuple:
        m, me = self.model, self.mesh
        return (self.method, m.S, me.devices, m.H_q, m.H_kv, m.d_head, me.ulysses_degree, self.U or 0,
                self.causal, self.seed)


def _reject_unknown(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {', '.join(unknown)}")


def _int(value, name):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer (got {value!r})")
    return value


def _merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict):
            out[k] = _merge(out.get(k) or {}, v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a nested config dict, naming the constraint on failure."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, TOP_KEYS, "config")
    model_raw = raw.get("model") or {}
    mesh_raw = raw.get("mesh") or {}
    _reject_unknown(model_raw, MODEL_KEYS, "model")
    _reject_unknown(mesh_raw, MESH_KEYS, "mesh")
    for name in ("S", "H_q", "H_kv", "d_head"):
        if name not in model_raw:
            raise ConfigError(f"missing required field model.{name}")
    if "C" not in mesh_raw:
        raise ConfigError("missing required field mesh.C")
    method = raw.get("method", "ulysses")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    try:
        model = ModelConfig(**{k: _int(model_raw[k], f"model.{k}") for k in MODEL_KEYS if k in model_raw})
        mesh_cfg = MeshConfig(
            devices=_int(mesh_raw["C"], "mesh.C"),
            ulysses_degree=_int(mesh_raw.get("ulysses_degree"), "mesh.ulysses_degree"),
            ring_degree=_int(mesh_raw.get("ring_degree", 1), "mesh.ring_degree"),
            bytes_per_element=_int(mesh_raw.get("bytes_per_element", 2), "mesh.bytes_per_element"),
        )
        model.check_mesh(mesh_cfg.devices)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    C = mesh_cfg.devices
    U = _int(raw.get("U"), "U")
    if method == "ulysses" and model.H_q % C:
        raise ConfigError(f"Ulysses needs H_q divisible by C (H_q={model.H_q}, C={C})")
    if method == "upipe":
        if U is None:
            raise ConfigError("upipe needs U (heads per stage)")
        try:
            UPipeConfig(U).validate(model.H_q, C)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    elif U is not None:
        raise ConfigError(f"U only applies to method upipe (method={method})")
    if method == "hybrid":
        a = mesh_cfg.ulysses_degree
        if model.H_q % a:
            raise ConfigError(f"hybrid needs H_q divisible by ulysses_degree (H_q={model.H_q}, ulysses_degree={a})")
    elif mesh_cfg.ring_degree != 1 and method != "ring":
        raise ConfigError(f"ring_degree > 1 is only used by method hybrid (method={method})")
    backward = raw.get("backward", False)
    if backward and method not in ("oracle", "ulysses", "upipe"):
        raise ConfigError(f"backward is available for oracle, ulysses and upipe only (method={method})")
    for name in ("causal", "backward", "gqa_schedule"):
        if name in raw and not isinstance(raw[name], bool):
            raise ConfigError(f"{name} must be true or false (got {raw[name]!r})")
    seed = _int(raw.get("seed", 0), "seed")
    if seed < 0:
        raise ConfigError(f"seed must be non-negative (got {seed})")
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output must be a path string")
    return ExperimentConfig(model=model, mesh=mesh_cfg, method=method, U=U, seed=seed,
                            causal=raw.get("causal", True), output=output, backward=backward,
                            gqa_schedule=raw.get("gqa_schedule", True))


def parse_config(path: str | None = None, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """Load a JSON config and apply overrides.

    Seed precedence: ``overrides["seed"]`` > ``CPSIM_SEED`` > file. Other
    override keys replace file values.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigIOError(f"cannot read config {path}: {e.strerror or e}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    env = os.environ if env is None else env
    if env.get("CPSIM_SEED") not in (None, ""):
        try:
            raw["seed"] = int(env["CPSIM_SEED"])
        except ValueError:
            raise ConfigError(f"CPSIM_SEED must be an integer (got {env['CPSIM_SEED']!r})") from None
    raw = _merge(raw, overrides or {})
    return config_from_dict(raw)


@dataclass
class RunReport:
    config: dict
    max_abs_diff: float
    grad_max_abs_diff: float | None
    comm: list
    memory: list
    analytical: dict | None
    schedule: dict | None
    checks: dict
    schema: str = SCHEMA
    summary: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "config": self.config,
            "max_abs_diff": self.max_abs_diff,
            "grad_max_abs_diff": self.grad_max_abs_diff,
            "checks": self.checks,
            "summary": self.summary,
            "comm": self.comm,
            "memory": self.memory,
            "analytical": self.analytical,
            "schedule": self.schedule,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        schema = data.get("schema")
        if not isinstance(schema, str) or not schema.startswith("cpsim.run_report/"):
            raise ValueError(f"not a run report (schema={schema!r})")
        return cls(config=data["config"], max_abs_diff=data["max_abs_diff"],
                   grad_max_abs_diff=data["grad_max_abs_diff"], comm=data["comm"], memory=data["memory"],
                   analytical=data["analytical"], schedule=data["schedule"], checks=data["checks"],
                   schema=schema, summary=data.get("summary", {}))


def make_inputs(cfg: ExperimentConfig):
    m = cfg.model
    rng = np.random.default_rng(cfg.seed)
    q = rng.uniform(-1.0, 1.0, (m.S, m.H_q, m.d_head))
    k = rng.uniform(-1.0, 1.0, (m.S, m.H_kv, m.d_head))
    v = rng.uniform(-1.0, 1.0, (m.S, m.H_kv, m.d_head))
    d_out = rng.uniform(-1.0, 1.0, (m.S, m.H_q, m.d_head)) if cfg.backward else None
    return q, k, v, d_out


def execute(cfg: ExperimentConfig, merge=merge_partials):
    """Run the configured method; returns ``(mesh, forward_result, grads, inputs)``."""
    m = cfg.model
    q, k, v, d_out = make_inputs(cfg)
    if cfg.method == "oracle":
        mesh = create_mesh(MeshConfig(1, bytes_per_element=cfg.mesh.bytes_per_element))
        gqa = GqaMap(m.H_q, m.H_kv)
        out, lse = reference_attention_forward(q, k, v, gqa, causal=cfg.causal)
        res = ForwardResult(out=shard_sequence(out, mesh))
        grads = None
        if cfg.backward:
            grads = [shard_sequence(g, mesh) for g in
                     reference_attention_backward(q, k, v, out, lse, d_out, gqa, causal=cfg.causal)]
        return mesh, res, grads, (q, k, v, d_out)
    mesh = create_mesh(cfg.mesh)
    sh = [shard_sequence(t, mesh) for t in (q, k, v)]
    upipe = UPipeConfig(cfg.U) if cfg.method == "upipe" else None
    if cfg.method == "ulysses":
        res = run_ulysses_forward(mesh, m, *sh, causal=cfg.causal)
    elif cfg.method == "ring":
        res = run_ring_forward(mesh, m, *sh, causal=cfg.causal, merge=merge)
    elif cfg.method == "hybrid":
        res = run_hybrid_forward(mesh, m, *sh, causal=cfg.causal, merge=merge)
    else:
        res = run_upipe_forward(mesh, m, upipe, *sh, causal=cfg.causal, gqa_schedule=cfg.gqa_schedule)
    grads = None
    if cfg.backward:
        g = shard_sequence(d_out, mesh)
        if cfg.method == "upipe":
            grads = run_upipe_backward(mesh, m, upipe, res, g)
        else:
            grads = run_ulysses_backward(mesh, m, res, g)
    return mesh, res, grads, (q, k, v, d_out)


def ulysses_head_transfers(model: ModelConfig, C: int) -> int:
    """Head blocks per device in Ulysses input exchanges (kv replicated when H_kv % C != 0)."""
    kv = model.H_q if model.H_kv % C else model.H_kv
    return (model.H_q + 2 * kv) // C * (C - 1)


def head_transfers(mesh, model: ModelConfig, device: int = 0) -> int:
    """Head blocks sent by ``device`` in forward input exchanges."""
    unit = (model.S // mesh.devices) * model.d_head * mesh.bytes_per_element
    sent = mesh.comm.bytes_for(device, kind="all_to_all", phase="inp_a2a", direction="forward")
    if sent % unit:
        raise AssertionError(f"input exchange bytes {sent} are not whole head blocks of {unit}")
    return sent // unit


def _comm_rows(mesh) -> list:
    rows = []
    for d in range(mesh.devices):
        per = {}
        for e in mesh.comm.entries:
            if e.device != d:
                continue
            key = (e.direction, e.phase, e.kind)
            s, r, n = per.get(key, (0, 0, 0))
            per[key] = (s + e.sent, r + e.received, n + 1)
        rows.append({
            "device": d,
            "bytes_sent": mesh.comm.bytes_sent[d],
            "bytes_received": mesh.comm.bytes_received[d],
            "by_phase": [
                {"direction": k[0], "phase": k[1], "kind": k[2], "bytes_sent": s, "bytes_received": r, "calls": n}
                for k, (s, r, n) in sorted(per.items())
            ],
        })
    return rows


def _memory_rows(mesh) -> list:
    mem = mesh.memory
    rows = []
    for d in range(mesh.devices):
        phases = []
        for direction in ("forward", "backward"):
            for p in PHASES:
                if (direction, p) in mem.phase_peak[d]:
                    phases.append({"direction": direction, "phase": p, "peak_bytes": mem.phase_peak[d][(direction, p)]})
        rows.append({
            "device": d,
            "peak_bytes": mem.peak[d],
            "intermediate_peak_bytes": mem.category_peak[d].get(INTERMEDIATE, 0),
            "phases": phases,
        })
    return rows


def intermediate_peak(mesh) -> int:
    return max(mesh.memory.category_peak[d].get(INTERMEDIATE, 0) for d in range(mesh.devices))


def _analytical(cfg: ExperimentConfig, mesh) -> dict | None:
    """Table rows for this shape, plus a per-phase comparison with the ledger.

    The comparison uses the kv ratio the engine actually holds: UPipe keeps
    one kv head per query slot, so its chunks behave like MHA (ratio 1).
    """
    m = cfg.model
    if cfg.method not in ("ulysses", "upipe"):
        return None
    bpe = cfg.mesh.bytes_per_element
    kw = {"S": m.S, "C": cfg.mesh.devices, "L": 1, "R": m.ratio}
    method = "ulysses"
    if cfg.method == "upipe" and m.H_q // cfg.U > 1:
        method, kw["nu"] = "upipe", m.H_q // cfg.U
    out = {"units": "d_model elements per device", "forward": mem_model.attn_fwd_peak(method, **kw).to_dict(),
           "backward": mem_model.attn_bwd_peak(method, **kw).to_dict()}
    held_ratio = 1 if cfg.method == "upipe" or m.H_kv % cfg.mesh.devices else m.ratio
    fwd = mem_model.attn_fwd_peak(method, **{**kw, "R": held_ratio}).to_bytes(m.d_model, bpe)
    measured = mesh.memory.phase_peaks(0, "forward")
    names = dict(zip(mem_model.FORWARD_PHASES, PHASES))
    out["compared_ratio"] = held_ratio
    out["forward_bytes_vs_measured"] = {
        name: {"analytical": fwd[name], "measured": measured[names[name]],
               "equal": fwd[name] == measured[names[name]]}
        for name in mem_model.FORWARD_PHASES
    }
    return out


def run_experiment(cfg: ExperimentConfig, merge=merge_partials) -> RunReport:
    m = cfg.model
    mesh, res, grads, (q, k, v, d_out) = execute(cfg, merge=merge)
    gqa = GqaMap(m.H_q, m.H_kv)
    ref_out, ref_lse = reference_attention_forward(q, k, v, gqa, causal=cfg.causal)
    diff = float(np.max(np.abs(res.out.gather() - ref_out)))
    checks = {"oracle_match": diff <= EQUIV_TOL}
    grad_diff = None
    if grads is not None:
        ref = reference_attention_backward(q, k, v, ref_out, ref_lse, d_out, gqa, causal=cfg.causal)
        grad_diff = float(max(np.max(np.abs(a.gather() - b)) for a, b in zip(grads, ref)))
        checks["grad_match"] = grad_diff <= EQUIV_TOL

    summary = {"intermediate_peak_bytes": intermediate_peak(mesh)}
    schedule = None
    if cfg.method in ("ulysses", "upipe"):
        C = mesh.devices
        measured = head_transfers(mesh, m)
        scheduled = bool(res.schedule is not None and res.schedule.scheduled)
        expected = gqa_comm_volume(m.H_q, m.H_kv, C, scheduled)
        if cfg.method == "ulysses":
            expected = ulysses_head_transfers(m, C)
        summary["head_transfers"] = measured
        summary["head_transfers_expected"] = expected
        checks["comm_formula"] = measured == expected
    if cfg.method == "upipe":
        sched = res.schedule or build_gqa_schedule(m.H_q, m.H_kv, mesh.devices, cfg.U)
        schedule = sched.to_dict()
        if sched.U == mesh.devices:
            schedule["dump"] = schedule_dump(m.H_q, m.H_kv, mesh.devices)[0]
    return RunReport(config=cfg.to_dict(), max_abs_diff=diff, grad_max_abs_diff=grad_diff,
                     comm=_comm_rows(mesh), memory=_memory_rows(mesh), analytical=_analytical(cfg, mesh),
                     schedule=schedule, checks=checks, summary=summary)


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def report_csv(report: RunReport) -> str:
    """One row per (device, direction, phase) with peak bytes and traffic."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema", "device", "direction", "phase", "peak_bytes", "bytes_sent", "bytes_received"])
    comm = {c["device"]: c for c in report.comm}
    for row in report.memory:
        traffic = {}
        for e in comm[row["device"]]["by_phase"]:
            s, r = traffic.get((e["direction"], e["phase"]), (0, 0))
            traffic[(e["direction"], e["phase"])] = (s + e["bytes_sent"], r + e["bytes_received"])
        for p in row["phases"]:
            s, r = traffic.get((p["direction"], p["phase"]), (0, 0))
            w.writerow([report.schema, row["device"], p["direction"], p["phase"], p["peak_bytes"], s, r])
    return buf.getvalue()


def emit_report(report: RunReport, path: str, fmt: str = "json"):
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    text = report_json(report) if fmt == "json" else report_csv(report)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
