"""edgetailor: a fully simulated edge-inference optimization stack.

Offline, a generative search picks per-layer pruning ratios for a layered
model under latency, energy, and memory budgets. Online, a parameter-free
soft mixture router blends low-rank adapters per request and a learned
per-layer DVFS controller picks operating points during autoregressive
inference, all driven by an exact unit-level simulator.
"""

from . import adapters, cli, device, dvfs, modelspec, presets, sim, tailor

__all__ = ["adapters", "cli", "device", "dvfs", "modelspec", "presets", "sim", "tailor"]
__version__ = "0.1.0"
