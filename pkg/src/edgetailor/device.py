"""Edge device model: discrete V/f operating points, phase power LUT, throughput.

A device is a fixed table of operating points (voltage, frequency), a power
lookup table with one column per inference phase, and a linear-in-frequency
throughput model with a phase-specific constant. Co-running applications are
modeled as a piecewise-constant interference trace that multiplicatively
shrinks available throughput.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import InfeasibleContentionError, ValidationError

PHASES = ("prefill", "decode", "idle")
COMPUTE_PHASES = ("prefill", "decode")


@dataclass(frozen=True)
class OperatingPoint:
    index: int
    voltage_volts: float
    frequency_hz: float

    def __post_init__(self):
        if self.voltage_volts <= 0 or self.frequency_hz <= 0:
            raise ValidationError(
                f"operating point {self.index}: voltage and frequency must be positive"
            )


@dataclass(frozen=True)
class PowerTable:
    """Per operating-point power draw in watts, one column per phase.

    Entries are total board draw (static draw included), not deltas over idle.
    """

    p_prefill_watts: tuple[float, ...]
    p_decode_watts: tuple[float, ...]
    p_idle_watts: tuple[float, ...]

    def __post_init__(self):
        n = len(self.p_prefill_watts)
        if len(self.p_decode_watts) != n or len(self.p_idle_watts) != n:
            raise ValidationError("power table columns must have equal length")
        for i in range(n):
            pre, dec, idle = self.p_prefill_watts[i], self.p_decode_watts[i], self.p_idle_watts[i]
            if min(pre, dec, idle) <= 0:
                raise ValidationError(f"power table entry {i}: all entries must be positive")
            if not (pre >= dec >= idle):
                raise ValidationError(
                    f"power table entry {i}: expected prefill >= decode >= idle"
                )
        for col in (self.p_prefill_watts, self.p_decode_watts, self.p_idle_watts):
            if any(col[i + 1] < col[i] for i in range(n - 1)):
                raise ValidationError("power columns must be non-decreasing in frequency index")

    def column(self, phase: str) -> tuple[float, ...]:
        if phase == "prefill":
            return self.p_prefill_watts
        if phase == "decode":
            return self.p_decode_watts
        if phase == "idle":
            return self.p_idle_watts
        raise ValidationError(f"unknown phase {phase!r}")


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    memory_bytes: int
    opps: tuple[OperatingPoint, ...]
    power: PowerTable
    throughput_flops_per_hz: dict[str, float] = field(
        default_factory=lambda: {"prefill": 1.0, "decode": 1.0}
    )

    def __post_init__(self):
        if not self.opps:
            raise ValidationError("device must have at least one operating point")
        if self.memory_bytes <= 0:
            raise ValidationError("memory_bytes must be positive")
        freqs = [p.frequency_hz for p in self.opps]
        volts = [p.voltage_volts for p in self.opps]
        if any(freqs[i + 1] <= freqs[i] for i in range(len(freqs) - 1)):
            raise ValidationError("operating points must be strictly increasing in frequency")
        if any(volts[i + 1] < volts[i] for i in range(len(volts) - 1)):
            raise ValidationError("operating points must be non-decreasing in voltage")
        if len(self.power.p_prefill_watts) != len(self.opps):
            raise ValidationError("power table length must match operating points")
        for phase in COMPUTE_PHASES:
            if self.throughput_flops_per_hz.get(phase, 0.0) <= 0:
                raise ValidationError(f"throughput constant for {phase} must be positive")

    @property
    def num_opps(self) -> int:
        return len(self.opps)

    @property
    def max_opp(self) -> int:
        return len(self.opps) - 1

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "memory_bytes": self.memory_bytes,
            "operating_points": [
                {"index": p.index, "voltage_volts": p.voltage_volts, "frequency_hz": p.frequency_hz}
                for p in self.opps
            ],
            "power_watts": {
                "prefill": list(self.power.p_prefill_watts),
                "decode": list(self.power.p_decode_watts),
                "idle": list(self.power.p_idle_watts),
            },
            "throughput_flops_per_hz": dict(self.throughput_flops_per_hz),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DeviceProfile":
        try:
            opps = tuple(
                OperatingPoint(p["index"], p["voltage_volts"], p["frequency_hz"])
                for p in doc["operating_points"]
            )
            power = PowerTable(
                tuple(doc["power_watts"]["prefill"]),
                tuple(doc["power_watts"]["decode"]),
                tuple(doc["power_watts"]["idle"]),
            )
            return cls(
                name=doc["name"],
                memory_bytes=int(doc["memory_bytes"]),
                opps=opps,
                power=power,
                throughput_flops_per_hz={
                    k: float(v) for k, v in doc["throughput_flops_per_hz"].items()
                },
            )
        except KeyError as exc:
            raise ValidationError(f"device document missing field: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DeviceProfile":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


class InterferenceTrace:
    """Piecewise-constant co-running intensity S_pro(t) on [0, inf).

    Intensity is the fraction of processor capacity consumed by foreground
    applications; it must stay in [0, 1) so the model always makes progress.
    """

    def __init__(self, times_s, intensities):
        times_s = [float(t) for t in times_s]
        intensities = [float(x) for x in intensities]
        if len(times_s) != len(intensities) or not times_s:
            raise ValidationError("trace needs equal-length, non-empty time/intensity lists")
        if times_s[0] != 0.0:
            raise ValidationError("trace must start at time 0 to be defined for all t >= 0")
        if any(times_s[i + 1] <= times_s[i] for i in range(len(times_s) - 1)):
            raise ValidationError("trace times must be strictly increasing")
        if any(not (0.0 <= x < 1.0) for x in intensities):
            raise ValidationError("intensities must lie in [0, 1)")
        self.times_s = tuple(times_s)
        self.intensities = tuple(intensities)

    @classmethod
    def constant(cls, intensity: float) -> "InterferenceTrace":
        return cls([0.0], [intensity])

    def intensity_at(self, t: float) -> float:
        if t < 0:
            raise ValidationError("trace is defined for t >= 0 only")
        # last step whose start time <= t
        lo, hi = 0, len(self.times_s) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.times_s[mid] <= t:
                lo = mid
            else:
                hi = mid - 1
        return self.intensities[lo]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("time_s,intensity\n")
            for t, x in zip(self.times_s, self.intensities):
                fh.write(f"{t!r},{x!r}\n")

    @classmethod
    def from_csv(cls, path) -> "InterferenceTrace":
        times, vals = [], []
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "time_s,intensity":
                raise ValidationError("trace CSV must start with header 'time_s,intensity'")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                t, x = line.split(",")
                times.append(float(t))
                vals.append(float(x))
        return cls(times, vals)


ZERO_INTERFERENCE = InterferenceTrace.constant(0.0)


def power(device: DeviceProfile, opp: int, phase: str) -> float:
    """Exact LUT lookup of power draw in watts; no interpolation."""
    if phase not in PHASES:
        raise ValidationError(f"unknown phase {phase!r}")
    if not (0 <= opp < device.num_opps):
        raise ValidationError(f"operating point index {opp} out of range")
    return device.power.column(phase)[opp]


def effective_throughput(device: DeviceProfile, opp: int, phase: str, intensity: float) -> float:
    """FLOP/s available at an operating point under co-running interference.

    Throughput is linear in clock frequency with a phase-specific constant and
    shrinks multiplicatively by (1 - intensity).
    """
    if phase not in COMPUTE_PHASES:
        raise ValidationError(f"throughput is defined for phases {COMPUTE_PHASES}, got {phase!r}")
    if not (0 <= opp < device.num_opps):
        raise ValidationError(f"operating point index {opp} out of range")
    if intensity < 0:
        raise ValidationError("intensity must be >= 0")
    if intensity >= 1.0:
        raise InfeasibleContentionError("intensity >= 1 leaves no capacity for inference")
    return device.throughput_flops_per_hz[phase] * device.opps[opp].frequency_hz * (1.0 - intensity)


def cmos_power_watts(p_static_watts: float, c_eff: float, voltage_volts: float, frequency_hz: float) -> float:
    """Static plus dynamic CMOS draw, c_eff in W per (V^2 * GHz)."""
    return p_static_watts + c_eff * voltage_volts * voltage_volts * (frequency_hz / 1e9)


def synth_device(spec: dict) -> DeviceProfile:
    """Build a DeviceProfile from a calibration record.

    The record gives either explicit per-point lists or generator parameters:

    - frequencies: ``frequencies_hz`` list, or ``peak_frequency_hz`` with
      ``num_points`` (default 8) spaced geometrically from
      ``min_frequency_ratio`` (default 0.3) up to the peak.
    - voltages: ``voltages_volts`` list, or linear in frequency from
      ``v_min_volts`` to ``v_max_volts`` (defaults 0.6 / 1.0).
    - power: ``power_watts`` dict of explicit columns, or CMOS-generated from
      ``p_static_watts``, ``c_eff_prefill``, ``c_eff_decode``.

    Deterministic for a fixed record.
    """
    name = spec.get("name", "synthetic")
    memory_bytes = int(spec.get("memory_bytes") or spec["memory_gb"] * (1 << 30))

    if "frequencies_hz" in spec:
        freqs = [float(f) for f in spec["frequencies_hz"]]
    else:
        n = int(spec.get("num_points", 8))
        peak = float(spec["peak_frequency_hz"])
        lo_ratio = float(spec.get("min_frequency_ratio", 0.3))
        if n < 2 or not (0 < lo_ratio < 1):
            raise ValidationError("need num_points >= 2 and 0 < min_frequency_ratio < 1")
        freqs = [peak * lo_ratio ** (1.0 - i / (n - 1)) for i in range(n)]
    if len(freqs) < 2:
        raise ValidationError("calibration record must define at least 2 operating points")
    if any(freqs[i + 1] <= freqs[i] for i in range(len(freqs) - 1)):
        raise ValidationError("frequency list must be strictly increasing")

    if "voltages_volts" in spec:
        volts = [float(v) for v in spec["voltages_volts"]]
        if len(volts) != len(freqs):
            raise ValidationError("voltage list length must match frequency list")
    else:
        v_lo = float(spec.get("v_min_volts", 0.6))
        v_hi = float(spec.get("v_max_volts", 1.0))
        f_lo, f_hi = freqs[0], freqs[-1]
        volts = [v_lo + (v_hi - v_lo) * (f - f_lo) / (f_hi - f_lo) for f in freqs]

    if "power_watts" in spec:
        pw = spec["power_watts"]
        table = PowerTable(tuple(pw["prefill"]), tuple(pw["decode"]), tuple(pw["idle"]))
    else:
        p_static = float(spec.get("p_static_watts", 1.0))
        c_pre = float(spec["c_eff_prefill"])
        c_dec = float(spec["c_eff_decode"])
        if c_pre < c_dec:
            raise ValidationError("prefill power coefficient must be >= decode coefficient")
        table = PowerTable(
            tuple(cmos_power_watts(p_static, c_pre, v, f) for v, f in zip(volts, freqs)),
            tuple(cmos_power_watts(p_static, c_dec, v, f) for v, f in zip(volts, freqs)),
            tuple(p_static for _ in freqs),
        )

    opps = tuple(OperatingPoint(i, v, f) for i, (v, f) in enumerate(zip(volts, freqs)))
    throughput = {
        "prefill": float(spec["prefill_flops_per_hz"]),
        "decode": float(spec["decode_flops_per_hz"]),
    }
    return DeviceProfile(
        name=name, memory_bytes=memory_bytes, opps=opps, power=table,
        throughput_flops_per_hz=throughput,
    )
