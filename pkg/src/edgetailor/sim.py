"""Discrete-time autoregressive inference simulator.

A request is executed as a sequence of units, one (phase, token, layer) cell
at a time: a prefill pass over all layers, then one serial pass per output
token. Each unit runs at the operating point chosen by a static schedule or an
online controller; unit duration follows from FLOPs over effective throughput
and energy from the phase power LUT. Time advances per unit, so the accounting
is exact rather than tick-quantized.

Two modeling choices worth knowing: interference intensity is sampled at each
unit's start and held constant for that unit, and controller compute is booked
at zero simulated time since its decisions overlap the previous token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import device as dev
from . import modelspec as ms
from .errors import OomError, ValidationError


@dataclass(frozen=True)
class Request:
    arrival_s: float
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.arrival_s < 0:
            raise ValidationError("arrival time must be non-negative")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValidationError("requests need at least one prompt and one output token")


@dataclass(frozen=True)
class WorkloadSpec:
    """Lognormal prompt/output length model with caps and a fixed seed."""

    prompt_mu: float
    prompt_sigma: float
    output_mu: float
    output_sigma: float
    prompt_cap: int
    output_cap: int
    count: int
    seed: int
    interarrival_s: float = 0.0

    def __post_init__(self):
        if self.count < 0:
            raise ValidationError("request count must be non-negative")
        if self.prompt_cap < 1 or self.output_cap < 1:
            raise ValidationError("length caps must be at least 1")
        if self.prompt_sigma < 0 or self.output_sigma < 0:
            raise ValidationError("sigma must be non-negative")
        if self.interarrival_s < 0:
            raise ValidationError("interarrival must be non-negative")


def generate_workload(spec: WorkloadSpec) -> list[Request]:
    """Seeded long-tail workload: lengths ~ ceil(lognormal), capped."""
    rng = np.random.default_rng(spec.seed)
    prompts = rng.lognormal(spec.prompt_mu, spec.prompt_sigma, size=spec.count)
    outputs = rng.lognormal(spec.output_mu, spec.output_sigma, size=spec.count)
    requests = []
    for i in range(spec.count):
        # the 1e-9 guard keeps exp(log(n)) landing on n instead of n+1
        n = min(spec.prompt_cap, int(math.ceil(prompts[i] - 1e-9)))
        m = min(spec.output_cap, int(math.ceil(outputs[i] - 1e-9)))
        requests.append(Request(arrival_s=i * spec.interarrival_s,
                                prompt_tokens=max(1, n), output_tokens=max(1, m)))
    return requests


def workload_to_csv(requests: list[Request], path) -> None:
    with open(path, "w") as fh:
        fh.write("arrival_s,prompt_tokens,output_tokens\n")
        for r in requests:
            fh.write(f"{r.arrival_s!r},{r.prompt_tokens},{r.output_tokens}\n")


def workload_from_csv(path) -> list[Request]:
    requests = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "arrival_s,prompt_tokens,output_tokens":
            raise ValidationError("workload CSV header mismatch")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, n, m = line.split(",")
            requests.append(Request(float(a), int(n), int(m)))
    return requests


class Schedule:
    """Static per-layer operating-point assignment, reused for every token."""

    def __init__(self, prefill_opps, decode_opps):
        self.prefill_opps = tuple(int(o) for o in prefill_opps)
        self.decode_opps = tuple(int(o) for o in decode_opps)
        if len(self.prefill_opps) != len(self.decode_opps):
            raise ValidationError("prefill and decode assignments must cover the same layers")

    @classmethod
    def constant(cls, opp: int, num_layers: int) -> "Schedule":
        return cls((opp,) * num_layers, (opp,) * num_layers)

    @property
    def num_layers(self) -> int:
        return len(self.prefill_opps)

    def opp_for(self, phase: str, token_index: int, layer_index: int) -> int:
        if phase == "prefill":
            return self.prefill_opps[layer_index]
        if phase == "decode":
            return self.decode_opps[layer_index]
        raise ValidationError(f"unknown phase {phase!r}")


@dataclass(frozen=True)
class Snapshot:
    """What an online controller may observe before scheduling a unit group.

    Decisions for a token are computed while the previous token runs, so the
    intensity here is the value one token-boundary behind the execution clock,
    and the duration fields describe the most recently completed phase/token.
    """

    intensity: float
    last_prefill_s: float | None
    last_token_s: float | None


@dataclass(frozen=True)
class InferenceMetrics:
    ttft_s: float
    tpot_s: tuple[float, ...]
    e2e_s: float
    energy_j: float
    prefill_s: float
    per_layer_time_s: tuple[float, ...]
    per_layer_energy_j: tuple[float, ...]

    @property
    def mean_tpot_s(self) -> float:
        return float(np.mean(self.tpot_s)) if self.tpot_s else 0.0

    @property
    def token_times_s(self) -> tuple[float, ...]:
        """Duration of every decode token, the first one included."""
        return (self.ttft_s - self.prefill_s,) + self.tpot_s


def _check_schedule(schedule: Schedule, num_layers: int) -> None:
    if schedule.num_layers != num_layers:
        raise ValidationError(
            f"schedule covers {schedule.num_layers} layers, architecture has {num_layers}"
        )


def simulate_request(arch: ms.LlmArchitecture, device: dev.DeviceProfile,
                     schedule_or_controller, request: Request,
                     interference: dev.InterferenceTrace | None = None,
                     start_time_s: float | None = None) -> InferenceMetrics:
    """Execute one request and account latency and energy per unit.

    `schedule_or_controller` is either a static Schedule or a controller with
    begin_request/prefill_opps/decode_opps methods (see dvfs.PolicyController).
    """
    trace = interference if interference is not None else dev.ZERO_INTERFERENCE
    n, n_out = request.prompt_tokens, request.output_tokens
    needed = ms.memory_footprint(arch, n + n_out)
    if needed > device.memory_bytes:
        raise OomError(
            f"model needs {needed} bytes at context {n + n_out}, device has {device.memory_bytes}"
        )

    L = arch.num_layers
    static = isinstance(schedule_or_controller, Schedule)
    if static:
        _check_schedule(schedule_or_controller, L)
    else:
        schedule_or_controller.begin_request(request)

    now = request.arrival_s if start_time_s is None else start_time_s
    per_layer_time = [0.0] * L
    per_layer_energy = [0.0] * L
    energy = 0.0

    def run_pass(phase: str, token_index: int, opps, flops_per_layer) -> float:
        nonlocal now, energy
        elapsed = 0.0
        for l in range(L):
            opp = opps[l]
            thr = dev.effective_throughput(device, opp, phase, trace.intensity_at(now))
            t_unit = flops_per_layer[l] / thr if flops_per_layer[l] > 0 else 0.0
            e_unit = dev.power(device, opp, phase) * t_unit
            per_layer_time[l] += t_unit
            per_layer_energy[l] += e_unit
            energy += e_unit
            elapsed += t_unit
            now += t_unit
        return elapsed

    # observation for prefill and the first decode token: state at arrival
    snap = Snapshot(intensity=trace.intensity_at(now), last_prefill_s=None, last_token_s=None)

    prefill_flops = [n * f for f in arch.prefill_flops_per_prompt_token]
    if static:
        pre_opps = [schedule_or_controller.opp_for("prefill", 0, l) for l in range(L)]
    else:
        pre_opps = schedule_or_controller.prefill_opps(snap)
        if len(pre_opps) != L:
            raise ValidationError("controller must assign one operating point per layer")
    prefill_s = run_pass("prefill", 0, pre_opps, prefill_flops)

    token_s = []
    prev_boundary_intensity = snap.intensity
    for tok in range(n_out):
        snap = Snapshot(intensity=prev_boundary_intensity,
                        last_prefill_s=prefill_s,
                        last_token_s=token_s[-1] if token_s else None)
        prev_boundary_intensity = trace.intensity_at(now)
        if static:
            opps = [schedule_or_controller.opp_for("decode", tok, l) for l in range(L)]
        else:
            opps = schedule_or_controller.decode_opps(tok, snap)
            if len(opps) != L:
                raise ValidationError("controller must assign one operating point per layer")
        token_s.append(run_pass("decode", tok, opps, arch.decode_flops_per_token))

    ttft = prefill_s + token_s[0]
    tpot = tuple(token_s[1:])
    e2e = ttft + sum(tpot)
    return InferenceMetrics(
        ttft_s=ttft, tpot_s=tpot, e2e_s=e2e, energy_j=energy, prefill_s=prefill_s,
        per_layer_time_s=tuple(per_layer_time), per_layer_energy_j=tuple(per_layer_energy),
    )


@dataclass(frozen=True)
class RequestRecord:
    request: Request
    metrics: InferenceMetrics | None
    oom: bool
    start_s: float
    end_s: float


@dataclass
class BatchReport:
    records: list[RequestRecord] = field(default_factory=list)
    idle_energy_j: float = 0.0

    @property
    def completed(self) -> list[RequestRecord]:
        return [r for r in self.records if r.metrics is not None]

    @property
    def request_energy_j(self) -> float:
        return sum(r.metrics.energy_j for r in self.completed)

    @property
    def total_energy_j(self) -> float:
        return self.request_energy_j + self.idle_energy_j

    @property
    def total_energy_wh(self) -> float:
        return self.total_energy_j / 3600.0

    def aggregates(self) -> dict:
        done = self.completed
        if not done:
            return {
                "requests": len(self.records), "completed": 0, "oom": len(self.records),
                "mean_ttft_s": 0.0, "p95_ttft_s": 0.0, "mean_tpot_s": 0.0,
                "mean_e2e_s": 0.0, "p95_e2e_s": 0.0, "total_e2e_s": 0.0,
                "total_energy_j": self.total_energy_j, "total_energy_wh": self.total_energy_wh,
            }
        ttfts = np.array([r.metrics.ttft_s for r in done])
        e2es = np.array([r.metrics.e2e_s for r in done])
        tpots = np.concatenate([np.array(r.metrics.tpot_s) for r in done]) \
            if any(r.metrics.tpot_s for r in done) else np.array([0.0])
        return {
            "requests": len(self.records),
            "completed": len(done),
            "oom": len(self.records) - len(done),
            "mean_ttft_s": float(ttfts.mean()),
            "p95_ttft_s": float(np.percentile(ttfts, 95)),
            "mean_tpot_s": float(tpots.mean()),
            "mean_e2e_s": float(e2es.mean()),
            "p95_e2e_s": float(np.percentile(e2es, 95)),
            "total_e2e_s": float(e2es.sum()),
            "total_energy_j": self.total_energy_j,
            "total_energy_wh": self.total_energy_wh,
        }

    def violation_stats(self, t_pre_target_s: float, t_dec_target_s: float) -> dict:
        """Deadline accounting: prefill phase vs its target, every decode token
        (the first one included) vs the per-token target."""
        prefill_viol = 0
        tok_viol = 0
        tok_total = 0
        for r in self.completed:
            prefill_viol += int(r.metrics.prefill_s > t_pre_target_s)
            for t in r.metrics.token_times_s:
                tok_total += 1
                tok_viol += int(t > t_dec_target_s)
        return {
            "prefill_violations": prefill_viol,
            "token_violations": tok_viol,
            "tokens": tok_total,
            "token_violation_rate": tok_viol / tok_total if tok_total else 0.0,
        }


def run_batch(arch: ms.LlmArchitecture, device: dev.DeviceProfile, schedule_or_controller,
              workload: list[Request], interference: dev.InterferenceTrace | None = None) -> BatchReport:
    """Run requests sequentially in arrival order; OOM requests are recorded,
    not raised. Gaps between requests draw idle power at the lowest point.
    """
    report = BatchReport()
    ordered = sorted(workload, key=lambda r: r.arrival_s)
    clock = 0.0
    idle_power = device.power.p_idle_watts[0]
    for req in ordered:
        start = max(clock, req.arrival_s)
        if start > clock:
            report.idle_energy_j += idle_power * (start - clock)
        try:
            metrics = simulate_request(arch, device, schedule_or_controller, req,
                                       interference, start_time_s=start)
        except OomError:
            report.records.append(RequestRecord(req, None, True, start, start))
            clock = start
            continue
        end = start + metrics.e2e_s
        report.records.append(RequestRecord(req, metrics, False, start, end))
        clock = end
    return report
