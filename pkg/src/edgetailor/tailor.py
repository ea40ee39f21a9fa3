"""Offline generative pruning search.

Pipeline: collect ratio-score pairs by simulating candidate pruning configs,
embed the pairs into a continuous space with a recurrent encoder, train a
feed-forward score evaluator and a recurrent decoder on top of it, then walk
the latent space along the evaluator's gradient from the best known
configurations and beam-decode the result back into per-layer ratios.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import device as dev
from . import modelspec as ms
from . import nn
from . import sim
from .errors import DivergenceError, EmptyDatasetError, NoFeasibleConfigError, NumericalError, ValidationError

WEIGHT_DOC_VERSION = 1


@dataclass(frozen=True)
class RatioScorePair:
    config: ms.PruningConfig
    score: float

    def __post_init__(self):
        if self.score <= 0:
            raise ValidationError("scores must be positive")


class RatioTokenCodec:
    """Maps per-layer ratios onto a token vocabulary of evenly spaced bins.

    Token i encodes ratio i / (bin_count - 1); the extra token `eos` closes
    every sequence. encode/decode round-trips exactly on binned ratios.
    """

    def __init__(self, bin_count: int = 21):
        if bin_count < 2:
            raise ValidationError("need at least two ratio bins")
        self.bin_count = bin_count
        self.eos_token = bin_count
        self.vocab_size = bin_count + 1

    def ratio_of(self, token: int) -> float:
        if not (0 <= token < self.bin_count):
            raise ValidationError(f"token {token} is not a ratio bin")
        return token / (self.bin_count - 1)

    def bin_of(self, ratio: float) -> int:
        if not (0.0 <= ratio <= 1.0):
            raise ValidationError("ratio outside [0, 1]")
        return int(np.floor(ratio * (self.bin_count - 1) + 0.5))

    def snap(self, config: ms.PruningConfig) -> ms.PruningConfig:
        return ms.PruningConfig(tuple(self.ratio_of(self.bin_of(r)) for r in config.ratios))

    def encode(self, config: ms.PruningConfig) -> list[int]:
        return [self.bin_of(r) for r in config.ratios] + [self.eos_token]

    def decode(self, tokens, num_layers: int) -> ms.PruningConfig:
        ratios = []
        for t in tokens:
            if t == self.eos_token:
                break
            ratios.append(self.ratio_of(int(t)))
            if len(ratios) == num_layers:
                break
        ratios.extend(0.0 for _ in range(num_layers - len(ratios)))
        return ms.PruningConfig(tuple(ratios))


@dataclass(frozen=True)
class TailorConfig:
    batch_size: int = 1024
    learning_rate: float = 1e-3
    eta: float = 0.8
    top_k: int = 25
    beam_width: int = 5
    ascent_steps: int = 10
    loss_weight: float = 1.0
    epochs: int = 300
    seed: int = 0
    augmentations: int = 25

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "eta", "top_k", "beam_width",
                     "loss_weight", "epochs", "augmentations"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.ascent_steps < 0:
            raise ValidationError("ascent_steps must be non-negative")


class TailorNets:
    """Encoder (LSTM) -> latent; evaluator (MLP) and decoder (LSTM) heads.

    The latent point of a configuration is the encoder's final hidden state;
    the decoder starts from it and is trained to reproduce the token sequence,
    while the evaluator predicts the min-max-normalized score.
    """

    def __init__(self, codec: RatioTokenCodec, num_layers: int, params: dict,
                 hidden: int, embed: int, eval_hidden: int,
                 score_lo: float = 0.0, score_hi: float = 1.0):
        self.codec = codec
        self.num_layers = num_layers
        self.params = params
        self.hidden = hidden
        self.embed = embed
        self.eval_hidden = eval_hidden
        self.score_lo = score_lo
        self.score_hi = score_hi

    @classmethod
    def create(cls, codec: RatioTokenCodec, num_layers: int, seed: int,
               hidden: int = 64, embed: int = 32, eval_hidden: int = 200) -> "TailorNets":
        rng = np.random.default_rng(seed)
        params = {
            "enc_emb": nn.init_embedding(rng, codec.vocab_size, embed),
            "enc": nn.init_lstm(rng, embed, hidden),
            "eval": nn.init_mlp(rng, hidden, eval_hidden, 1),
            "dec_emb": nn.init_embedding(rng, codec.vocab_size, embed),
            "dec": nn.init_lstm(rng, embed, hidden),
            "dec_out": nn.init_linear(rng, hidden, codec.vocab_size),
        }
        return cls(codec, num_layers, params, hidden, embed, eval_hidden)

    def to_json_dict(self) -> dict:
        return {
            "version": WEIGHT_DOC_VERSION,
            "bin_count": self.codec.bin_count,
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "embed": self.embed,
            "eval_hidden": self.eval_hidden,
            "score_bounds": [self.score_lo, self.score_hi],
            "params": nn.params_to_json(self.params),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TailorNets":
        if doc.get("version") != WEIGHT_DOC_VERSION:
            raise ValidationError(f"unsupported weight document version {doc.get('version')}")
        nets = cls(
            RatioTokenCodec(doc["bin_count"]), doc["num_layers"],
            nn.params_from_json(doc["params"]),
            doc["hidden"], doc["embed"], doc["eval_hidden"],
            doc["score_bounds"][0], doc["score_bounds"][1],
        )
        return nets

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TailorNets":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# dataset collection

DEFAULT_EVAL_WORKLOAD = (sim.Request(0.0, 128, 32),)


def score_config(arch: ms.LlmArchitecture, device: dev.DeviceProfile,
                 oracle: ms.SyntheticPplOracle, budget: ms.BudgetSpec,
                 config: ms.PruningConfig,
                 eval_workload=DEFAULT_EVAL_WORKLOAD) -> tuple[float, float, float, float]:
    """True score of a config: simulate the pruned model over the evaluation
    workload at the highest operating point and apply the holistic metric.

    Latency and energy are totals over the fixed workload, so the budgets are
    interpreted per-workload as well. Returns (score, ppl, total_e2e_s,
    total_energy_wh). Raises OomError if the pruned model does not fit.
    """
    pruned = ms.apply_pruning(arch, config)
    schedule = sim.Schedule.constant(device.max_opp, arch.num_layers)
    total_t = 0.0
    total_j = 0.0
    for req in eval_workload:
        metrics = sim.simulate_request(pruned, device, schedule, req)
        total_t += metrics.e2e_s
        total_j += metrics.energy_j
    quality = ms.ppl(oracle, config)
    score = ms.holistic_score(quality, total_t, total_j / 3600.0, budget)
    return score, quality, total_t, total_j / 3600.0


def config_fits_memory(arch: ms.LlmArchitecture, budget: ms.BudgetSpec,
                       config: ms.PruningConfig, eval_workload=DEFAULT_EVAL_WORKLOAD) -> bool:
    pruned = ms.apply_pruning(arch, config)
    ctx = max(r.prompt_tokens + r.output_tokens for r in eval_workload)
    return ms.memory_footprint(pruned, ctx) <= budget.memory_budget_bytes


def config_is_executable(arch: ms.LlmArchitecture, config: ms.PruningConfig) -> bool:
    """A config that prunes away every FLOP cannot serve requests; such
    degenerate points are excluded from collection and generation."""
    pruned = ms.apply_pruning(arch, config)
    return (sum(pruned.decode_flops_per_token) > 0
            and sum(pruned.prefill_flops_per_prompt_token) > 0)


def default_heuristics(num_layers: int, codec: RatioTokenCodec) -> list[ms.PruningConfig]:
    """Grid-snapped stand-ins for classic pruning strategies: uniform levels,
    middle-heavy bowls, and binary middle-layer drops."""
    configs: list[ms.PruningConfig] = []
    seen = set()

    def push(ratios):
        cfg = codec.snap(ms.PruningConfig(tuple(ratios)))
        if cfg.ratios not in seen:
            seen.add(cfg.ratios)
            configs.append(cfg)

    for level in (0.0, 0.25, 0.5, 0.75):
        push([level] * num_layers)
    for level in (0.4, 0.8):
        if num_layers == 1:
            push([level])
            continue
        bowl = [level * (1.0 - (2.0 * l / (num_layers - 1) - 1.0) ** 2) for l in range(num_layers)]
        push(bowl)
    for k in {1, max(1, num_layers // 4), max(1, num_layers // 2)}:
        start = (num_layers - k) // 2
        drop = [0.0] * num_layers
        for l in range(start, start + k):
            drop[l] = 1.0
        push(drop)
    return configs


def collect_dataset(arch: ms.LlmArchitecture, device: dev.DeviceProfile,
                    oracle: ms.SyntheticPplOracle, budget: ms.BudgetSpec,
                    heuristics: list[ms.PruningConfig], n_random: int, seed: int,
                    codec: RatioTokenCodec | None = None,
                    eval_workload=DEFAULT_EVAL_WORKLOAD,
                    augmentations: int = 25) -> list[RatioScorePair]:
    """Exploration-exploitation collection of ratio-score pairs.

    Base configs are the provided heuristics plus n_random draws on the codec
    grid; each base config contributes `augmentations` entries (itself plus
    seeded layer-order shuffles), every entry scored by full simulation.
    Memory-infeasible configs are dropped; an all-infeasible collection raises
    EmptyDatasetError.
    """
    if not heuristics and n_random < 1:
        raise ValidationError("need at least one heuristic or n_random >= 1")
    codec = codec or RatioTokenCodec()
    rng = np.random.default_rng(seed)
    L = arch.num_layers

    bases = [codec.snap(cfg) for cfg in heuristics]
    for _ in range(n_random):
        tokens = rng.integers(0, codec.bin_count, size=L)
        bases.append(ms.PruningConfig(tuple(codec.ratio_of(int(t)) for t in tokens)))

    pairs: list[RatioScorePair] = []
    for base in bases:
        if len(base.ratios) != L:
            raise ValidationError("heuristic config length does not match architecture")
        variants = [base.ratios]
        for _ in range(augmentations - 1):
            variants.append(tuple(base.ratios[i] for i in rng.permutation(L)))
        for ratios in variants:
            cfg = ms.PruningConfig(ratios)
            if not config_fits_memory(arch, budget, cfg, eval_workload):
                continue
            if not config_is_executable(arch, cfg):
                continue
            score, _, _, _ = score_config(arch, device, oracle, budget, cfg, eval_workload)
            pairs.append(RatioScorePair(cfg, score))
    if not pairs:
        raise EmptyDatasetError("every candidate configuration violates the memory budget")
    return pairs


def dataset_to_csv(pairs: list[RatioScorePair], path, meta: str | None = None) -> None:
    L = len(pairs[0].config.ratios) if pairs else 0
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write(",".join([f"r_{i}" for i in range(L)] + ["score"]) + "\n")
        for p in pairs:
            fh.write(",".join([f"{r!r}" for r in p.config.ratios] + [f"{p.score!r}"]) + "\n")


def dataset_from_csv(path) -> list[RatioScorePair]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("r_0"):
                continue
            cells = line.split(",")
            pairs.append(RatioScorePair(ms.PruningConfig(tuple(float(c) for c in cells[:-1])),
                                        float(cells[-1])))
    return pairs


# ---------------------------------------------------------------------------
# training

def _token_matrix(codec: RatioTokenCodec, configs) -> np.ndarray:
    return np.array([codec.encode(c) for c in configs], dtype=np.int64)


def _batch_loss_and_grads(nets: TailorNets, tokens: np.ndarray, targets: np.ndarray,
                          lam: float):
    """Joint loss: per-token reconstruction CE plus lam * score MSE.

    Returns (loss, ce, mse, grads) with grads covering every parameter group;
    gradients flow through the shared latent into the encoder by BPTT.
    """
    p = nets.params
    B, S = tokens.shape
    eos = nets.codec.eos_token

    enc_x = nn.embedding_forward(p["enc_emb"], tokens)
    enc_hs, enc_cache = nn.lstm_forward(p["enc"], enc_x)
    latent = enc_hs[:, -1, :]

    pred, eval_cache = nn.mlp_forward(p["eval"], latent)
    err = pred[:, 0] - targets
    mse = float(err @ err) / B

    dec_in = np.concatenate([np.full((B, 1), eos, dtype=np.int64), tokens[:, :-1]], axis=1)
    dec_x = nn.embedding_forward(p["dec_emb"], dec_in)
    dec_hs, dec_cache = nn.lstm_forward(p["dec"], dec_x, h0=latent)
    logits, lin_cache = nn.linear_forward(p["dec_out"], dec_hs)
    ce_sum, dlogits = nn.softmax_cross_entropy(logits, tokens)
    ce = ce_sum / (B * S)

    loss = ce + lam * mse

    dlogits /= B * S
    g_out, d_dec_hs = nn.linear_backward(p["dec_out"], lin_cache, dlogits)
    g_dec, d_dec_x, d_latent_dec, _ = nn.lstm_backward(p["dec"], dec_cache, d_dec_hs)
    g_dec_emb = nn.embedding_backward(p["dec_emb"], dec_in, d_dec_x)

    dpred = np.zeros_like(pred)
    dpred[:, 0] = lam * 2.0 * err / B
    g_eval, d_latent_eval = nn.mlp_backward(p["eval"], eval_cache, dpred)

    d_latent = d_latent_dec + d_latent_eval
    g_enc, d_enc_x, _, _ = nn.lstm_backward(p["enc"], enc_cache, dhs=None, dh_last=d_latent)
    g_enc_emb = nn.embedding_backward(p["enc_emb"], tokens, d_enc_x)

    grads = {"enc_emb": g_enc_emb, "enc": g_enc, "eval": g_eval,
             "dec_emb": g_dec_emb, "dec": g_dec, "dec_out": g_out}
    return loss, ce, mse, grads


def training_loss(nets: TailorNets, tokens: np.ndarray, targets: np.ndarray,
                  lam: float) -> float:
    loss, _, _, _ = _batch_loss_and_grads(nets, tokens, targets, lam)
    return loss


def normalized_scores(scores: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo = float(scores.min())
    hi = float(scores.max())
    span = max(hi - lo, 1e-12)
    return (scores - lo) / span, lo, hi


def train(nets: TailorNets, dataset: list[RatioScorePair],
          config: TailorConfig = TailorConfig()) -> tuple[TailorNets, list[float]]:
    """Mini-batch Adam on the joint reconstruction + score objective.

    Returns the nets (trained in place) and the per-epoch mean loss history.
    Raises DivergenceError with the offending batch index if the loss goes
    non-finite.
    """
    if not dataset:
        raise ValidationError("dataset must be non-empty")
    tokens = _token_matrix(nets.codec, [p.config for p in dataset])
    raw = np.array([p.score for p in dataset])
    targets, lo, hi = normalized_scores(raw)
    nets.score_lo, nets.score_hi = lo, hi

    rng = np.random.default_rng(config.seed)
    opt = nn.Adam(lr=config.learning_rate)
    n = len(dataset)
    history = []
    batch_index = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, _, _, grads = _batch_loss_and_grads(nets, tokens[idx], targets[idx],
                                                      config.loss_weight)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at batch {batch_index}", batch_index)
            opt.step(nets.params, grads)
            epoch_losses.append(loss)
            batch_index += 1
        history.append(float(np.mean(epoch_losses)))
    return nets, history


def reconstruction_accuracy(nets: TailorNets, dataset: list[RatioScorePair]) -> float:
    """Fraction of training configs whose greedy decode of their own latent
    reproduces the exact token sequence."""
    hits = 0
    for pair in dataset:
        latent = encode(nets, pair.config)
        decoded = decode_config(nets, latent, beam_width=1, max_len=nets.num_layers)
        if nets.codec.snap(pair.config).ratios == decoded.ratios:
            hits += 1
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# latent-space operations

def encode(nets: TailorNets, config: ms.PruningConfig) -> np.ndarray:
    tokens = np.array([nets.codec.encode(config)], dtype=np.int64)
    x = nn.embedding_forward(nets.params["enc_emb"], tokens)
    hs, _ = nn.lstm_forward(nets.params["enc"], x)
    return hs[0, -1, :].copy()


def evaluate(nets: TailorNets, latent: np.ndarray) -> float:
    out, _ = nn.mlp_forward(nets.params["eval"], latent[None, :])
    return float(out[0, 0])


def evaluate_with_grad(nets: TailorNets, latent: np.ndarray) -> tuple[float, np.ndarray]:
    out, cache = nn.mlp_forward(nets.params["eval"], latent[None, :])
    _, dx = nn.mlp_backward(nets.params["eval"], cache, np.ones((1, 1)))
    return float(out[0, 0]), dx[0]


def optimize_latent(nets: TailorNets, start: np.ndarray, eta: float = 0.8,
                    steps: int = 10, max_halvings: int = 30) -> np.ndarray:
    """Gradient ascent on the evaluator with step-halving on regressions.

    Monotone by construction: each accepted step does not decrease the
    predicted score, so the returned point is the best iterate and scores at
    least as high as the start.
    """
    current = np.array(start, dtype=float)
    score = evaluate(nets, current)
    for _ in range(steps):
        _, grad = evaluate_with_grad(nets, current)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite evaluator gradient")
        if np.max(np.abs(grad)) == 0.0:
            break
        step = eta
        accepted = False
        for _ in range(max_halvings):
            candidate = current + step * grad
            cand_score = evaluate(nets, candidate)
            if cand_score >= score:
                current, score = candidate, cand_score
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return current


def decode_config(nets: TailorNets, latent: np.ndarray, beam_width: int,
                  max_len: int) -> ms.PruningConfig:
    """Beam search over ratio tokens starting from a latent point.

    Each step keeps the top beam_width expansions by cumulative log
    probability; an EOS expansion occupies a slot and retires its sequence, so
    beam_width=1 reduces to greedy decoding. Ties break toward lower token
    ids. Early EOS leaves the remaining layers unpruned.
    """
    if beam_width < 1:
        raise ValidationError("beam width must be >= 1")
    p = nets.params
    eos = nets.codec.eos_token
    h0 = np.array(latent, dtype=float)[None, :]
    c0 = np.zeros_like(h0)
    # beams: (logp, tokens, h, c)
    beams = [(0.0, (), h0, c0)]
    done: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len):
        if not beams:
            break
        expansions = []
        for logp, tokens, h, c in beams:
            prev = tokens[-1] if tokens else eos
            x = p["dec_emb"]["E"][np.array([prev])]
            h_new, c_new = nn.lstm_step(p["dec"], x, h, c)
            logits = h_new @ p["dec_out"]["W"] + p["dec_out"]["b"]
            logps = nn.log_softmax(logits[0])
            for v in range(nets.codec.vocab_size):
                expansions.append((logp + float(logps[v]), tokens + (v,), h_new, c_new))
        expansions.sort(key=lambda e: (-e[0], e[1]))
        beams = []
        for logp, tokens, h, c in expansions[:beam_width]:
            if tokens[-1] == eos:
                done.append((logp, tokens[:-1]))
            else:
                beams.append((logp, tokens, h, c))
    done.extend((logp, tokens) for logp, tokens, _, _ in beams)
    done.sort(key=lambda e: (-e[0], e[1]))
    best_tokens = done[0][1]
    return nets.codec.decode(list(best_tokens) + [eos], max_len)


def generate_config(nets: TailorNets, dataset: list[RatioScorePair],
                    arch: ms.LlmArchitecture, device: dev.DeviceProfile,
                    oracle: ms.SyntheticPplOracle, budget: ms.BudgetSpec,
                    config: TailorConfig = TailorConfig(),
                    eval_workload=DEFAULT_EVAL_WORKLOAD) -> tuple[ms.PruningConfig, float]:
    """Latent ascent from the top-K dataset configs, decoded and re-scored.

    The K seed configs themselves stay in the candidate pool, so the result
    never scores below the best seed. Candidates violating the memory budget
    are discarded; if nothing survives, NoFeasibleConfigError is raised.
    """
    if config.top_k > len(dataset):
        raise ValidationError("top_k exceeds dataset size")
    ranked = sorted(dataset, key=lambda p: -p.score)[:config.top_k]

    candidates: list[ms.PruningConfig] = []
    seen = set()

    def push(cfg: ms.PruningConfig):
        if cfg.ratios not in seen:
            seen.add(cfg.ratios)
            candidates.append(cfg)

    for pair in ranked:
        push(nets.codec.snap(pair.config))
    for pair in ranked:
        latent = encode(nets, pair.config)
        best_latent = optimize_latent(nets, latent, eta=config.eta, steps=config.ascent_steps)
        push(decode_config(nets, best_latent, config.beam_width, arch.num_layers))

    best_cfg = None
    best_score = -np.inf
    for cfg in candidates:
        if not config_fits_memory(arch, budget, cfg, eval_workload):
            continue
        if not config_is_executable(arch, cfg):
            continue
        score, _, _, _ = score_config(arch, device, oracle, budget, cfg, eval_workload)
        if score > best_score:
            best_cfg, best_score = cfg, score
    if best_cfg is None:
        raise NoFeasibleConfigError("all candidate configurations violate the memory budget")
    return best_cfg, best_score
