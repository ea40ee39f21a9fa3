"""Built-in synthetic fixtures: calibrated device profiles, a 2B-scale layered
model, default budgets and workloads. These keep the CLI usable without
hand-written config files and give the tests stable reference points.

The NX-like profile is calibrated so that, at the highest operating point with
no interference, a 128-token prompt finishes prefill in 57 ms and each decode
token takes 198 ms (TTFT 255 ms); the Nano-like profile targets 268/231 ms.
Peak board powers are 25 W and 15 W.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import adapters as ad
from . import device as dev
from . import modelspec as ms
from . import sim

NX_TPOT_S = 0.198
NX_TTFT_S = 0.255
NANO_TPOT_S = 0.231
NANO_TTFT_S = 0.268
CALIBRATION_PROMPT_TOKENS = 128


def edge_2b_arch() -> ms.LlmArchitecture:
    """Homogeneous 18-layer, ~2B-parameter decode stack at 2 bytes/param."""
    return ms.LlmArchitecture.uniform(
        name="edge-2b",
        num_layers=18,
        params_per_layer=111_111_111,
        bytes_per_param=2,
        kv_bytes_per_token=147_456,  # 18 layers * 2048 hidden * K and V * fp16
        flops_per_param=2,
    )


def _calibrated_spec(name: str, memory_gb: float, peak_hz: float, p_static: float,
                     c_pre: float, c_dec: float, arch: ms.LlmArchitecture,
                     ttft_s: float, tpot_s: float) -> dict:
    decode_flops = sum(arch.decode_flops_per_token)
    prefill_flops = CALIBRATION_PROMPT_TOKENS * sum(arch.prefill_flops_per_prompt_token)
    prefill_s = ttft_s - tpot_s
    return {
        "name": name,
        "memory_gb": memory_gb,
        "peak_frequency_hz": peak_hz,
        "num_points": 8,
        "min_frequency_ratio": 0.3,
        "v_min_volts": 0.6,
        "v_max_volts": 1.0,
        "p_static_watts": p_static,
        "c_eff_prefill": c_pre,
        "c_eff_decode": c_dec,
        "decode_flops_per_hz": decode_flops / (tpot_s * peak_hz),
        "prefill_flops_per_hz": prefill_flops / (prefill_s * peak_hz),
    }


def nx_device_spec(arch: ms.LlmArchitecture | None = None) -> dict:
    arch = arch or edge_2b_arch()
    # 2.0 + 23.0 * 1.0V^2 * 1.0GHz = 25 W peak prefill draw
    return _calibrated_spec("orin-nx-like", 16.0, 1.0e9, 2.0, 23.0, 15.0,
                            arch, NX_TTFT_S, NX_TPOT_S)


def nano_device_spec(arch: ms.LlmArchitecture | None = None) -> dict:
    arch = arch or edge_2b_arch()
    # 1.5 + 21.6 * 1.0V^2 * 0.625GHz = 15 W peak prefill draw
    return _calibrated_spec("orin-nano-like", 8.0, 0.625e9, 1.5, 21.6, 14.4,
                            arch, NANO_TTFT_S, NANO_TPOT_S)


def nx_device() -> dev.DeviceProfile:
    return dev.synth_device(nx_device_spec())


def nano_device() -> dev.DeviceProfile:
    return dev.synth_device(nano_device_spec())


def nx_fixture() -> tuple[ms.LlmArchitecture, dev.DeviceProfile]:
    """Architecture/device pair reproducing the NX calibration targets."""
    arch = edge_2b_arch()
    return arch, dev.synth_device(nx_device_spec(arch))


def default_oracle(num_layers: int = 18) -> ms.SyntheticPplOracle:
    return ms.SyntheticPplOracle.u_shaped(num_layers)


def default_budget() -> ms.BudgetSpec:
    """Budgets the unpruned 2B model misses on the NX profile, so the search
    has to trade quality against speed and energy."""
    return ms.BudgetSpec(
        latency_budget_s=4.5,
        energy_budget_wh=0.02,
        alpha=2.0,
        beta=2.0,
        memory_budget_bytes=6 * (1 << 30),
    )


def default_eval_workload() -> tuple[sim.Request, ...]:
    return (sim.Request(0.0, 128, 32),)


def toy_fixture(num_layers: int = 4):
    """Small search problem: a 4-layer model on a 4-point device, sized so the
    exhaustive optimum over a coarse ratio grid is computable in seconds."""
    arch = ms.LlmArchitecture.uniform(
        name="toy",
        num_layers=num_layers,
        params_per_layer=62_500_000,
        bytes_per_param=2,
        kv_bytes_per_token=32_768,
        flops_per_param=2,
    )
    decode_flops = sum(arch.decode_flops_per_token)
    spec = {
        "name": "toy-device",
        "memory_gb": 2.0,
        "peak_frequency_hz": 1.0e9,
        "num_points": 4,
        "min_frequency_ratio": 0.4,
        "p_static_watts": 1.0,
        "c_eff_prefill": 9.0,
        "c_eff_decode": 5.0,
        "decode_flops_per_hz": decode_flops / (0.05 * 1.0e9),
        "prefill_flops_per_hz": decode_flops * 40.0 / 1.0e9,
    }
    device = dev.synth_device(spec)
    oracle = ms.SyntheticPplOracle.u_shaped(num_layers)
    workload = (sim.Request(0.0, 16, 8),)
    return arch, device, oracle, workload


# ---------------------------------------------------------------------------
# routing fixture

_DOMAIN_POOLS = {
    "math": ["integral", "derivative", "matrix", "eigenvalue", "polynomial", "theorem",
             "algebra", "calculus", "prime", "vector", "gradient", "determinant"],
    "code": ["function", "compiler", "pointer", "recursion", "syntax", "debugger",
             "variable", "loop", "closure", "bytecode", "stack", "refactor"],
    "cooking": ["saute", "braise", "garlic", "oven", "simmer", "dough",
                "marinade", "skillet", "broth", "season", "whisk", "caramelize"],
}


def domain_prompts(domain: str, count: int, seed: int = 0) -> list[str]:
    """Deterministic synthetic prompts built from one domain's word pool."""
    pool = _DOMAIN_POOLS[domain]
    domain_tag = int.from_bytes(hashlib.sha256(domain.encode()).digest()[:2], "big")
    rng = np.random.default_rng((seed, domain_tag))
    prompts = []
    for _ in range(count):
        words = rng.choice(pool, size=4, replace=False)
        prompts.append(" ".join(words))
    return prompts


def router_fixture(d: int = 32, k: int = 32, seed: int = 0):
    """Three-adapter bank where the analytic best response mixes two experts.

    Adapters "math" and "code" each implement twice one of two orthonormal
    correction directions; "cooking" implements a strongly harmful direction.
    The returned target equals the base output plus the sum of the two helpful
    directions for the fixed probe input, so output error under average / top-1
    / soft routing is forced into the ordering average > top-1 > soft.
    """
    embedder = ad.Embedder(seed=seed)
    rng = np.random.default_rng(seed + 1)
    w0 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))
    x = rng.normal(size=k)
    basis, _ = np.linalg.qr(rng.normal(size=(d, 2)))
    e1, e2 = basis[:, 0], basis[:, 1]
    corrections = {
        "math": 2.0 * e1,
        "code": 2.0 * e2,
        "cooking": -4.5 * (e1 + e2) / np.sqrt(2.0),
    }
    rank, scaling = 8, 16.0
    s = scaling / rank
    adapters = []
    for name, q in corrections.items():
        samples = domain_prompts(name, 20, seed=seed)
        a = np.zeros((rank, k))
        a[0] = x / (x @ x)
        b = np.zeros((d, rank))
        b[:, 0] = q / s
        adapters.append(ad.LoraAdapter(
            adapter_id=name, rank=rank, scaling=scaling, a=a, b=b,
            domain_samples=tuple(samples),
            centroid=ad.adapter_centroid(embedder, samples, len(samples), seed),
        ))
    target = w0 @ x + e1 + e2
    mixed_prompt = " ".join(_DOMAIN_POOLS["math"][:4] + _DOMAIN_POOLS["code"][:4])
    return embedder, adapters, w0, x, target, mixed_prompt
