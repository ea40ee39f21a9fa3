"""Learning-based per-layer DVFS: a tiny MLP policy trained with REINFORCE,
an exact dynamic-programming minimum-energy oracle, and a max-frequency
baseline. Actions pick one operating point per (phase, token, layer) unit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import device as dev
from . import modelspec as ms
from . import nn
from . import sim
from .errors import NumericalError, ValidationError

POLICY_PARAM_BUDGET = 1000
ORACLE_BUCKET_S = 1e-3
FEATURE_COUNT = 6


@dataclass(frozen=True)
class LatencyTargets:
    t_pre_target_s: float
    t_dec_target_s: float

    def __post_init__(self):
        if self.t_pre_target_s <= 0 or self.t_dec_target_s <= 0:
            raise ValidationError("latency targets must be positive")


@dataclass(frozen=True)
class DvfsState:
    """Controller observables for one execution unit."""

    s_pro: float
    t_pre_target_s: float
    t_dec_target_s: float
    phase: str
    layer_index: int
    num_layers: int
    slack_fraction: float

    def __post_init__(self):
        vals = (self.s_pro, self.t_pre_target_s, self.t_dec_target_s, self.slack_fraction)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("state features must be finite")
        if not (0.0 <= self.s_pro < 1.0):
            raise ValidationError("interference intensity must lie in [0, 1)")
        if self.phase not in ("prefill", "decode"):
            raise ValidationError(f"unknown phase {self.phase!r}")
        if not (0 <= self.layer_index < self.num_layers):
            raise ValidationError("layer index out of range")

    def features(self) -> np.ndarray:
        slack = min(1.0, max(-1.0, self.slack_fraction))
        return np.array([
            self.s_pro,
            self.t_pre_target_s,
            self.t_dec_target_s,
            1.0 if self.phase == "prefill" else 0.0,
            self.layer_index / self.num_layers,
            slack,
        ])


class PolicyNet:
    """Two-layer MLP mapping state features to one logit per operating point.

    Kept deliberately tiny: construction asserts the parameter count stays
    under the 1K budget so the controller is negligible next to the model.
    """

    def __init__(self, params: dict, n_actions: int, hidden: int):
        self.params = params
        self.n_actions = n_actions
        self.hidden = hidden
        if self.param_count >= POLICY_PARAM_BUDGET:
            raise ValidationError(
                f"policy has {self.param_count} parameters, budget is {POLICY_PARAM_BUDGET}"
            )

    @property
    def param_count(self) -> int:
        return nn.param_count(self.params)

    @classmethod
    def create(cls, n_actions: int, hidden: int = 16, seed: int = 0) -> "PolicyNet":
        if hidden > 24:
            raise ValidationError("policy hidden width capped at 24")
        rng = np.random.default_rng(seed)
        return cls(nn.init_mlp(rng, FEATURE_COUNT, hidden, n_actions), n_actions, hidden)

    def logits(self, features: np.ndarray) -> np.ndarray:
        out, _ = nn.mlp_forward(self.params, features[None, :])
        return out[0]

    def to_json_dict(self) -> dict:
        return {
            "version": 1,
            "n_actions": self.n_actions,
            "hidden": self.hidden,
            "params": nn.params_to_json({"policy": self.params})["policy"],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PolicyNet":
        params = nn.params_from_json({"policy": doc["params"]})["policy"]
        return cls(params, int(doc["n_actions"]), int(doc["hidden"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PolicyNet":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def act(policy: PolicyNet, state: DvfsState, mode: str = "greedy",
        rng: np.random.Generator | None = None) -> int:
    """Greedy argmax (ties to the lowest index) or a categorical sample."""
    logits = policy.logits(state.features())
    if mode == "greedy":
        return int(np.argmax(logits))
    if mode == "sample":
        if rng is None:
            raise ValidationError("sampling requires an rng")
        probs = nn.softmax(logits)
        return int(rng.choice(policy.n_actions, p=probs))
    raise ValidationError(f"unknown action mode {mode!r}")


def log_prob_and_grad(policy: PolicyNet, features: np.ndarray, action: int):
    """log pi(action | features) and its gradient wrt the policy parameters."""
    out, cache = nn.mlp_forward(policy.params, features[None, :])
    logp = nn.log_softmax(out[0])
    dout = -np.exp(logp)[None, :]
    dout[0, action] += 1.0
    grads, _ = nn.mlp_backward(policy.params, cache, dout)
    return float(logp[action]), grads


@dataclass(frozen=True)
class EpisodeResult:
    energy_j: float
    ttft_s: float
    tpot_s: tuple[float, ...]
    violations: int

    def __post_init__(self):
        if self.energy_j < 0 or self.ttft_s < 0 or any(t < 0 for t in self.tpot_s):
            raise ValidationError("episode timings and energy must be non-negative")
        if self.violations < 0:
            raise ValidationError("violation count must be non-negative")


@dataclass(frozen=True)
class RewardSpec:
    violation_penalty: float

    @classmethod
    def default(cls, arch: ms.LlmArchitecture, device: dev.DeviceProfile) -> "RewardSpec":
        """Penalty pinned to 10x the costliest single decode token so one miss
        always outweighs any achievable per-token energy saving."""
        worst = max(
            _token_energy(arch, device, opp, "decode", 1, 0.0)
            for opp in range(device.num_opps)
        )
        return cls(violation_penalty=10.0 * worst)


def episode_return(result: EpisodeResult, reward_spec: RewardSpec) -> float:
    """Negated energy minus the per-violation penalty; higher is better."""
    return -result.energy_j - reward_spec.violation_penalty * result.violations


class PolicyController:
    """Adapts a PolicyNet to the simulator's controller protocol.

    Per-layer actions for a token are computed from the snapshot the simulator
    takes one token-boundary earlier, mirroring a controller that runs off the
    critical path. Optionally records (features, action) pairs for REINFORCE.
    """

    def __init__(self, policy: PolicyNet, targets: LatencyTargets, num_layers: int,
                 mode: str = "greedy", rng: np.random.Generator | None = None,
                 record: bool = False):
        self.policy = policy
        self.targets = targets
        self.num_layers = num_layers
        self.mode = mode
        self.rng = rng
        self.steps: list[tuple[np.ndarray, int]] = [] if record else None

    def begin_request(self, request: sim.Request) -> None:
        pass

    def _slack(self, phase: str, snap: sim.Snapshot) -> float:
        if phase == "prefill" or snap.last_prefill_s is None:
            return 1.0
        if snap.last_token_s is not None:
            return (self.targets.t_dec_target_s - snap.last_token_s) / self.targets.t_dec_target_s
        return (self.targets.t_pre_target_s - snap.last_prefill_s) / self.targets.t_pre_target_s

    def _choose(self, phase: str, snap: sim.Snapshot) -> list[int]:
        slack = min(1.0, max(-1.0, self._slack(phase, snap)))
        opps = []
        for l in range(self.num_layers):
            state = DvfsState(
                s_pro=snap.intensity,
                t_pre_target_s=self.targets.t_pre_target_s,
                t_dec_target_s=self.targets.t_dec_target_s,
                phase=phase,
                layer_index=l,
                num_layers=self.num_layers,
                slack_fraction=slack,
            )
            action = act(self.policy, state, mode=self.mode, rng=self.rng)
            if self.steps is not None:
                self.steps.append((state.features(), action))
            opps.append(action)
        return opps

    def prefill_opps(self, snap: sim.Snapshot) -> list[int]:
        return self._choose("prefill", snap)

    def decode_opps(self, token_index: int, snap: sim.Snapshot) -> list[int]:
        return self._choose("decode", snap)


def count_violations(metrics: sim.InferenceMetrics, targets: LatencyTargets) -> int:
    viol = int(metrics.prefill_s > targets.t_pre_target_s)
    viol += sum(int(t > targets.t_dec_target_s) for t in metrics.token_times_s)
    return viol


class DvfsEnv:
    """Episodic binding of the simulator for policy training and evaluation.

    One episode simulates one request drawn from the configured list; the
    reward is the negated energy with a fixed penalty per deadline violation.
    """

    def __init__(self, arch: ms.LlmArchitecture, device: dev.DeviceProfile,
                 targets: LatencyTargets, requests: list[sim.Request],
                 interference: dev.InterferenceTrace | None = None,
                 reward_spec: RewardSpec | None = None, policy_hidden: int = 16):
        if not requests:
            raise ValidationError("environment needs at least one request")
        self.arch = arch
        self.device = device
        self.targets = targets
        self.requests = list(requests)
        self.interference = interference
        self.reward_spec = reward_spec or RewardSpec.default(arch, device)
        self.policy_hidden = policy_hidden

    @property
    def n_actions(self) -> int:
        return self.device.num_opps

    def sample_request(self, rng: np.random.Generator) -> sim.Request:
        return self.requests[int(rng.integers(len(self.requests)))]

    def rollout(self, policy: PolicyNet, request: sim.Request,
                rng: np.random.Generator | None = None, mode: str = "greedy",
                record: bool = False):
        controller = PolicyController(policy, self.targets, self.arch.num_layers,
                                      mode=mode, rng=rng, record=record)
        metrics = sim.simulate_request(self.arch, self.device, controller, request,
                                       self.interference)
        result = EpisodeResult(
            energy_j=metrics.energy_j, ttft_s=metrics.ttft_s, tpot_s=metrics.tpot_s,
            violations=count_violations(metrics, self.targets),
        )
        return result, (controller.steps or [])


def train_policy(env: DvfsEnv, episodes: int, lr: float, seed: int,
                 baseline_decay: float = 0.95):
    """REINFORCE with an exponential-moving-average baseline.

    Returns (policy, history) where history rows are (return, energy_j,
    violations) per episode. Deterministic for a fixed seed.
    """
    if episodes < 1:
        raise ValidationError("need at least one episode")
    rng = np.random.default_rng(seed)
    policy = PolicyNet.create(env.n_actions, hidden=env.policy_hidden,
                              seed=int(rng.integers(2 ** 31)))
    baseline = None
    history: list[tuple[float, float, int]] = []
    for _ in range(episodes):
        request = env.sample_request(rng)
        result, steps = env.rollout(policy, request, rng=rng, mode="sample", record=True)
        ret = episode_return(result, env.reward_spec)
        if not math.isfinite(ret):
            raise NumericalError("non-finite episode return")
        if baseline is None:
            baseline = ret
        advantage = ret - baseline
        baseline = baseline_decay * baseline + (1.0 - baseline_decay) * ret

        feats = np.array([f for f, _ in steps])
        actions = np.array([a for _, a in steps])
        out, cache = nn.mlp_forward(policy.params, feats)
        dout = -nn.softmax(out, axis=-1)
        dout[np.arange(len(actions)), actions] += 1.0
        grads, _ = nn.mlp_backward(policy.params, cache, dout)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite policy gradient")
            policy.params[k] = policy.params[k] + lr * advantage * g
        history.append((ret, result.energy_j, result.violations))
    return policy, history


# ---------------------------------------------------------------------------
# oracle and baseline schedules

def _unit_time(arch: ms.LlmArchitecture, device: dev.DeviceProfile, opp: int,
               phase: str, layer: int, prompt_tokens: int, intensity: float) -> float:
    if phase == "prefill":
        flops = prompt_tokens * arch.prefill_flops_per_prompt_token[layer]
    else:
        flops = arch.decode_flops_per_token[layer]
    if flops == 0:
        return 0.0
    return flops / dev.effective_throughput(device, opp, phase, intensity)


def _token_energy(arch: ms.LlmArchitecture, device: dev.DeviceProfile, opp: int,
                  phase: str, prompt_tokens: int, intensity: float) -> float:
    p = dev.power(device, opp, phase)
    return math.fsum(
        p * _unit_time(arch, device, opp, phase, l, prompt_tokens, intensity)
        for l in range(arch.num_layers)
    )


def _phase_tables(arch: ms.LlmArchitecture, device: dev.DeviceProfile, phase: str,
                  prompt_tokens: int, intensity: float):
    """Per (layer, opp) durations, bucket costs, and energies for one phase."""
    L, F = arch.num_layers, device.num_opps
    times = [[_unit_time(arch, device, f, phase, l, prompt_tokens, intensity)
              for f in range(F)] for l in range(L)]
    buckets = [[int(math.ceil(t / ORACLE_BUCKET_S - 1e-9)) for t in row] for row in times]
    energy = [[dev.power(device, f, phase) * times[l][f] for f in range(F)] for l in range(L)]
    return times, buckets, energy


def _phase_dp(buckets, energy, budget_buckets: int):
    """Suffix DP over (layer, remaining buckets); returns the minimum-energy
    assignment meeting the bucket budget, or None if infeasible."""
    L = len(buckets)
    F = len(buckets[0])
    cap = sum(max(row) for row in buckets)
    B = min(budget_buckets, cap)
    if B < 0:
        return None
    INF = float("inf")
    dp = [[INF] * (B + 1) for _ in range(L + 1)]
    choice = [[-1] * (B + 1) for _ in range(L)]
    dp[L] = [0.0] * (B + 1)
    for l in range(L - 1, -1, -1):
        for b in range(B + 1):
            best = INF
            best_f = -1
            for f in range(F):
                c = buckets[l][f]
                if c > b:
                    continue
                cand = energy[l][f] + dp[l + 1][b - c]
                if cand < best:
                    best, best_f = cand, f
            dp[l][b] = best
            choice[l][b] = best_f
    if dp[0][B] == INF:
        return None
    assignment = []
    b = B
    for l in range(L):
        f = choice[l][b]
        assignment.append(f)
        b -= buckets[l][f]
    return assignment


def phase_assignment_energy(energy_table, assignment) -> float:
    return math.fsum(energy_table[l][f] for l, f in enumerate(assignment))


@dataclass(frozen=True)
class OracleResult:
    schedule: sim.Schedule
    energy_j: float
    feasible: bool
    prefill_s: float
    decode_token_s: float


def _budget_buckets(target_s: float) -> int:
    if math.isinf(target_s):
        return 1 << 40
    return int(math.floor(target_s / ORACLE_BUCKET_S + 1e-9))


def oracle_schedule(request: sim.Request, arch: ms.LlmArchitecture,
                    device: dev.DeviceProfile, targets: LatencyTargets,
                    intensity: float = 0.0) -> OracleResult:
    """Minimum-energy per-layer assignment meeting the prefill budget and the
    per-decode-token budget, by dynamic programming over 1 ms time buckets.

    Infeasible targets are reported (feasible=False) with the max-frequency
    schedule attached rather than raised.
    """
    pre_times, pre_buckets, pre_energy = _phase_tables(
        arch, device, "prefill", request.prompt_tokens, intensity)
    dec_times, dec_buckets, dec_energy = _phase_tables(
        arch, device, "decode", request.prompt_tokens, intensity)

    pre_assign = _phase_dp(pre_buckets, pre_energy, _budget_buckets(targets.t_pre_target_s))
    dec_assign = _phase_dp(dec_buckets, dec_energy, _budget_buckets(targets.t_dec_target_s))

    if pre_assign is None or dec_assign is None:
        schedule = sim.Schedule.constant(device.max_opp, arch.num_layers)
        top = [device.max_opp] * arch.num_layers
        energy = (phase_assignment_energy(pre_energy, top)
                  + request.output_tokens * phase_assignment_energy(dec_energy, top))
        return OracleResult(
            schedule=schedule, energy_j=energy, feasible=False,
            prefill_s=math.fsum(pre_times[l][f] for l, f in enumerate(top)),
            decode_token_s=math.fsum(dec_times[l][f] for l, f in enumerate(top)),
        )

    schedule = sim.Schedule(pre_assign, dec_assign)
    energy = (phase_assignment_energy(pre_energy, pre_assign)
              + request.output_tokens * phase_assignment_energy(dec_energy, dec_assign))
    return OracleResult(
        schedule=schedule, energy_j=energy, feasible=True,
        prefill_s=math.fsum(pre_times[l][f] for l, f in enumerate(pre_assign)),
        decode_token_s=math.fsum(dec_times[l][f] for l, f in enumerate(dec_assign)),
    )


def baseline_max_freq(request: sim.Request, arch: ms.LlmArchitecture,
                      device: dev.DeviceProfile, intensity: float = 0.0):
    """Highest operating point everywhere: minimal latency, maximal power."""
    top = device.max_opp
    schedule = sim.Schedule.constant(top, arch.num_layers)
    energy = (_token_energy(arch, device, top, "prefill", request.prompt_tokens, intensity)
              + request.output_tokens
              * _token_energy(arch, device, top, "decode", request.prompt_tokens, intensity))
    return schedule, energy
