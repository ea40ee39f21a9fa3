"""Layered model profile, pruning-ratio application, synthetic quality oracle,
and the combined quality/latency/energy score used to rank configurations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import ValidationError


def _round_half_away(x: float) -> int:
    """Nearest integer, ties away from zero."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class LlmArchitecture:
    """Per-layer compute/parameter profile of a decoder-layer stack."""

    name: str
    params_per_layer: tuple[int, ...]
    prefill_flops_per_prompt_token: tuple[int, ...]
    decode_flops_per_token: tuple[int, ...]
    bytes_per_param: int
    kv_bytes_per_token: int

    def __post_init__(self):
        n = len(self.params_per_layer)
        if len(self.prefill_flops_per_prompt_token) != n or len(self.decode_flops_per_token) != n:
            raise ValidationError("per-layer lists must have equal length")
        if self.bytes_per_param <= 0:
            raise ValidationError("bytes_per_param must be positive")
        if self.kv_bytes_per_token < 0:
            raise ValidationError("kv_bytes_per_token must be non-negative")
        for seq in (self.params_per_layer, self.prefill_flops_per_prompt_token,
                    self.decode_flops_per_token):
            if any(v < 0 for v in seq):
                raise ValidationError("per-layer counts must be non-negative")

    @property
    def num_layers(self) -> int:
        return len(self.params_per_layer)

    @property
    def total_params(self) -> int:
        return sum(self.params_per_layer)

    @classmethod
    def uniform(cls, name: str, num_layers: int, params_per_layer: int,
                bytes_per_param: int = 2, kv_bytes_per_token: int = 0,
                flops_per_param: int = 2) -> "LlmArchitecture":
        """Homogeneous stack where each token costs flops_per_param * params."""
        if num_layers <= 0:
            raise ValidationError("num_layers must be positive")
        flops = params_per_layer * flops_per_param
        return cls(
            name=name,
            params_per_layer=(params_per_layer,) * num_layers,
            prefill_flops_per_prompt_token=(flops,) * num_layers,
            decode_flops_per_token=(flops,) * num_layers,
            bytes_per_param=bytes_per_param,
            kv_bytes_per_token=kv_bytes_per_token,
        )

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "params_per_layer": list(self.params_per_layer),
            "prefill_flops_per_prompt_token": list(self.prefill_flops_per_prompt_token),
            "decode_flops_per_token": list(self.decode_flops_per_token),
            "bytes_per_param": self.bytes_per_param,
            "kv_bytes_per_token": self.kv_bytes_per_token,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LlmArchitecture":
        return cls(
            name=doc["name"],
            params_per_layer=tuple(doc["params_per_layer"]),
            prefill_flops_per_prompt_token=tuple(doc["prefill_flops_per_prompt_token"]),
            decode_flops_per_token=tuple(doc["decode_flops_per_token"]),
            bytes_per_param=int(doc["bytes_per_param"]),
            kv_bytes_per_token=int(doc["kv_bytes_per_token"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "LlmArchitecture":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class PruningConfig:
    """Per-layer pruning ratios r_l in [0, 1]."""

    ratios: tuple[float, ...]

    def __post_init__(self):
        if not self.ratios:
            raise ValidationError("pruning config must cover at least one layer")
        if any(not (0.0 <= r <= 1.0) for r in self.ratios):
            raise ValidationError("pruning ratios must lie in [0, 1]")

    @classmethod
    def zeros(cls, num_layers: int) -> "PruningConfig":
        return cls((0.0,) * num_layers)

    @classmethod
    def uniform(cls, num_layers: int, ratio: float) -> "PruningConfig":
        return cls((ratio,) * num_layers)


@dataclass(frozen=True)
class BudgetSpec:
    """Latency/energy budgets with penalty exponents, plus a hard memory cap."""

    latency_budget_s: float
    energy_budget_wh: float
    alpha: float = 2.0
    beta: float = 2.0
    memory_budget_bytes: int = 1 << 62

    def __post_init__(self):
        if self.latency_budget_s <= 0 or self.energy_budget_wh <= 0:
            raise ValidationError("latency and energy budgets must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("penalty exponents must be non-negative")
        if self.memory_budget_bytes <= 0:
            raise ValidationError("memory budget must be positive")

    def to_json_dict(self) -> dict:
        return {
            "latency_budget_s": self.latency_budget_s,
            "energy_budget_wh": self.energy_budget_wh,
            "alpha": self.alpha,
            "beta": self.beta,
            "memory_budget_bytes": self.memory_budget_bytes,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BudgetSpec":
        return cls(
            latency_budget_s=float(doc["latency_budget_s"]),
            energy_budget_wh=float(doc["energy_budget_wh"]),
            alpha=float(doc.get("alpha", 2.0)),
            beta=float(doc.get("beta", 2.0)),
            memory_budget_bytes=int(doc.get("memory_budget_bytes", 1 << 62)),
        )


@dataclass(frozen=True)
class SyntheticPplOracle:
    """Analytic stand-in for zero-shot perplexity of a pruned model.

    ppl(r) = base_ppl * prod_l (1 + s_l * r_l^gamma). Layer sensitivities s_l
    default to a quadratic U-shape, so pruning the first or last layers hurts
    more than pruning the middle ones.
    """

    base_ppl: float
    sensitivity: tuple[float, ...]
    gamma: float = 1.5

    def __post_init__(self):
        if self.base_ppl <= 1.0:
            raise ValidationError("base_ppl must exceed 1")
        if self.gamma <= 0:
            raise ValidationError("gamma must be positive")
        if any(s < 0 for s in self.sensitivity):
            raise ValidationError("sensitivities must be non-negative")

    @property
    def num_layers(self) -> int:
        return len(self.sensitivity)

    @classmethod
    def u_shaped(cls, num_layers: int, base_ppl: float = 8.0,
                 s_min: float = 0.5, s_max: float = 2.0, gamma: float = 1.5) -> "SyntheticPplOracle":
        """Quadratic U-shape: middle layers are s_min, the ends s_max."""
        if num_layers == 1:
            sens = (s_max,)
        else:
            sens = tuple(
                s_min + (s_max - s_min) * (2.0 * l / (num_layers - 1) - 1.0) ** 2
                for l in range(num_layers)
            )
        return cls(base_ppl=base_ppl, sensitivity=sens, gamma=gamma)

    def to_json_dict(self) -> dict:
        return {"base_ppl": self.base_ppl, "sensitivity": list(self.sensitivity),
                "gamma": self.gamma}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SyntheticPplOracle":
        return cls(base_ppl=float(doc["base_ppl"]),
                   sensitivity=tuple(doc["sensitivity"]),
                   gamma=float(doc.get("gamma", 1.5)))


def apply_pruning(arch: LlmArchitecture, config: PruningConfig) -> LlmArchitecture:
    """Scale each layer's parameters and FLOPs by (1 - r_l), rounded to nearest."""
    if len(config.ratios) != arch.num_layers:
        raise ValidationError(
            f"config covers {len(config.ratios)} layers, architecture has {arch.num_layers}"
        )
    keep = [1.0 - r for r in config.ratios]
    return LlmArchitecture(
        name=f"{arch.name}-pruned",
        params_per_layer=tuple(_round_half_away(p * k) for p, k in zip(arch.params_per_layer, keep)),
        prefill_flops_per_prompt_token=tuple(
            _round_half_away(f * k) for f, k in zip(arch.prefill_flops_per_prompt_token, keep)
        ),
        decode_flops_per_token=tuple(
            _round_half_away(f * k) for f, k in zip(arch.decode_flops_per_token, keep)
        ),
        bytes_per_param=arch.bytes_per_param,
        kv_bytes_per_token=arch.kv_bytes_per_token,
    )


def ppl(oracle: SyntheticPplOracle, config: PruningConfig) -> float:
    if len(config.ratios) != oracle.num_layers:
        raise ValidationError(
            f"config covers {len(config.ratios)} layers, oracle has {oracle.num_layers}"
        )
    value = oracle.base_ppl
    for s, r in zip(oracle.sensitivity, config.ratios):
        value *= 1.0 + s * r ** oracle.gamma
    return value


def holistic_score(ppl_value: float, t_s: float, e_wh: float, budget: BudgetSpec) -> float:
    """Combined quality/latency/energy score; higher is better.

    s = (1/ppl) * (E/e)^(alpha if e > E else 0) * (T/t)^(beta if t > T else 0)

    Within-budget runs score exactly 1/ppl; over-budget runs are penalized by
    the developer-chosen exponents. Continuous at e == E and t == T.
    """
    if ppl_value <= 0 or t_s <= 0 or e_wh <= 0:
        raise ValidationError("ppl, latency and energy must be positive")
    score = 1.0 / ppl_value
    if budget.energy_budget_wh < e_wh:
        score *= (budget.energy_budget_wh / e_wh) ** budget.alpha
    if budget.latency_budget_s < t_s:
        score *= (budget.latency_budget_s / t_s) ** budget.beta
    return score


def memory_footprint(arch: LlmArchitecture, max_context_tokens: int) -> int:
    """Bytes for weights plus KV cache at the given context length."""
    if max_context_tokens < 0:
        raise ValidationError("context length must be non-negative")
    weights = arch.total_params * arch.bytes_per_param
    return weights + arch.kv_bytes_per_token * max_context_tokens
