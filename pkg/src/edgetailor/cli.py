"""Experiment harness: seeded, file-driven runs of every pipeline stage.

Subcommands: `device synth`, `tailor collect|train|generate`, `router
demo|eval`, `dvfs train|eval`, `sim run`, `report`. All inputs come from a
JSON config plus flags; all artifacts land inside --out and embed the seed and
a hash of the resolved config, so identical invocations are byte-identical.

Exit codes: 0 success, 2 validation/usage error, 3 infeasible outcome.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import adapters as ad
from . import device as dev
from . import dvfs
from . import modelspec as ms
from . import presets
from . import sim
from . import tailor
from .errors import EmptyDatasetError, NoFeasibleConfigError, OomError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3


def _config_hash(config: dict, seed: int) -> str:
    canon = json.dumps({"config": config, "seed": seed}, sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file is not valid JSON: {exc}") from exc


def _meta_line(seed: int, cfg_hash: str) -> str:
    return f"# seed={seed} config_sha256={cfg_hash}"


def write_csv(path: Path, header: list[str], rows, seed: int, cfg_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(_meta_line(seed, cfg_hash) + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_json(path: Path, doc: dict, seed: int, cfg_hash: str) -> None:
    doc = dict(doc)
    doc["_meta"] = {"seed": seed, "config_sha256": cfg_hash}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# config resolution

def resolve_device(config: dict) -> dev.DeviceProfile:
    spec = config.get("device", "nx")
    if isinstance(spec, str):
        if spec == "nx":
            return presets.nx_device()
        if spec == "nano":
            return presets.nano_device()
        return dev.DeviceProfile.load(spec)
    return dev.synth_device(spec)


def resolve_arch(config: dict) -> ms.LlmArchitecture:
    spec = config.get("arch", "edge-2b")
    if isinstance(spec, str):
        if spec == "edge-2b":
            return presets.edge_2b_arch()
        if spec == "toy":
            return presets.toy_fixture()[0]
        return ms.LlmArchitecture.load(spec)
    return ms.LlmArchitecture.from_json_dict(spec)


def resolve_oracle(config: dict, num_layers: int) -> ms.SyntheticPplOracle:
    spec = config.get("oracle")
    if spec is None:
        return presets.default_oracle(num_layers)
    if "sensitivity" in spec:
        return ms.SyntheticPplOracle.from_json_dict(spec)
    return ms.SyntheticPplOracle.u_shaped(
        num_layers, base_ppl=spec.get("base_ppl", 8.0),
        s_min=spec.get("s_min", 0.5), s_max=spec.get("s_max", 2.0),
        gamma=spec.get("gamma", 1.5))


def resolve_budget(config: dict) -> ms.BudgetSpec:
    spec = config.get("budget")
    if spec is None:
        return presets.default_budget()
    return ms.BudgetSpec.from_json_dict(spec)


def resolve_targets(config: dict) -> dvfs.LatencyTargets:
    spec = config.get("targets", {})
    return dvfs.LatencyTargets(
        t_pre_target_s=float(spec.get("t_pre_target_s", 0.3)),
        t_dec_target_s=float(spec.get("t_dec_target_s", 0.3)),
    )


def resolve_workload(config: dict, seed: int, workload_path: str | None) -> list[sim.Request]:
    if workload_path:
        return sim.workload_from_csv(workload_path)
    spec = config.get("workload")
    if spec is None:
        return list(presets.default_eval_workload())
    if isinstance(spec, list):
        return [sim.Request(float(r["arrival_s"]), int(r["prompt_tokens"]),
                            int(r["output_tokens"])) for r in spec]
    return sim.generate_workload(sim.WorkloadSpec(
        prompt_mu=float(spec["prompt_mu"]), prompt_sigma=float(spec["prompt_sigma"]),
        output_mu=float(spec["output_mu"]), output_sigma=float(spec["output_sigma"]),
        prompt_cap=int(spec.get("prompt_cap", 4096)),
        output_cap=int(spec.get("output_cap", 4096)),
        count=int(spec["count"]), seed=int(spec.get("seed", seed)),
        interarrival_s=float(spec.get("interarrival_s", 0.0)),
    ))


def resolve_interference(config: dict) -> dev.InterferenceTrace | None:
    spec = config.get("interference")
    if spec is None:
        return None
    if isinstance(spec, str):
        return dev.InterferenceTrace.from_csv(spec)
    if isinstance(spec, dict):
        return dev.InterferenceTrace(spec["time_s"], spec["intensity"])
    return dev.InterferenceTrace.constant(float(spec))


def resolve_tailor_config(config: dict, seed: int) -> tailor.TailorConfig:
    spec = config.get("tailor", {})
    return tailor.TailorConfig(
        batch_size=int(spec.get("batch_size", 1024)),
        learning_rate=float(spec.get("learning_rate", 1e-3)),
        eta=float(spec.get("eta", 0.8)),
        top_k=int(spec.get("top_k", 25)),
        beam_width=int(spec.get("beam_width", 5)),
        ascent_steps=int(spec.get("ascent_steps", 10)),
        loss_weight=float(spec.get("loss_weight", 1.0)),
        epochs=int(spec.get("epochs", 150)),
        seed=seed,
        augmentations=int(spec.get("augmentations", 25)),
    )


# ---------------------------------------------------------------------------
# subcommand implementations

def cmd_device_synth(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    spec = config.get("device_spec", config.get("device"))
    if spec is None:
        raise ValidationError("device synth needs a device_spec section")
    if isinstance(spec, str):
        profile = presets.nx_device() if spec == "nx" else presets.nano_device()
    else:
        profile = dev.synth_device(spec)
    write_json(out / "device.json", profile.to_json_dict(), seed, cfg_hash)
    print(f"wrote {out / 'device.json'} ({profile.num_opps} operating points)")
    return EXIT_OK


def cmd_tailor_collect(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    arch = resolve_arch(config)
    device = resolve_device(config)
    oracle = resolve_oracle(config, arch.num_layers)
    budget = resolve_budget(config)
    workload = tuple(resolve_workload(config, seed, None))
    codec = tailor.RatioTokenCodec(int(config.get("bin_count", 21)))
    n_random = int(config.get("n_random", 16))
    heuristics = tailor.default_heuristics(arch.num_layers, codec) \
        if config.get("use_heuristics", True) else []
    dataset = tailor.collect_dataset(arch, device, oracle, budget, heuristics,
                                     n_random, seed, codec=codec,
                                     eval_workload=workload,
                                     augmentations=int(config.get("augmentations", 25)))
    write_csv(out / "dataset.csv",
              [f"r_{i}" for i in range(arch.num_layers)] + ["score"],
              [list(p.config.ratios) + [p.score] for p in dataset], seed, cfg_hash)
    print(f"wrote {out / 'dataset.csv'} ({len(dataset)} pairs)")
    return EXIT_OK


def cmd_tailor_train(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    dataset = tailor.dataset_from_csv(args.dataset)
    if not dataset:
        raise ValidationError("dataset is empty")
    arch_layers = len(dataset[0].config.ratios)
    codec = tailor.RatioTokenCodec(int(config.get("bin_count", 21)))
    tcfg = resolve_tailor_config(config, seed)
    nets = tailor.TailorNets.create(codec, arch_layers, seed=seed)
    nets, history = tailor.train(nets, dataset, tcfg)
    accuracy = tailor.reconstruction_accuracy(nets, dataset)
    write_json(out / "nets.json", nets.to_json_dict(), seed, cfg_hash)
    write_csv(out / "loss_history.csv", ["epoch", "loss"],
              [[i, v] for i, v in enumerate(history)], seed, cfg_hash)
    print(f"wrote {out / 'nets.json'} (reconstruction accuracy {accuracy:.3f})")
    return EXIT_OK


def cmd_tailor_generate(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    dataset = tailor.dataset_from_csv(args.dataset)
    nets = tailor.TailorNets.load(args.nets)
    arch = resolve_arch(config)
    device = resolve_device(config)
    oracle = resolve_oracle(config, arch.num_layers)
    budget = resolve_budget(config)
    workload = tuple(resolve_workload(config, seed, None))
    tcfg = resolve_tailor_config(config, seed)
    if tcfg.top_k > len(dataset):
        tcfg = dataclasses.replace(tcfg, top_k=len(dataset))
    best_cfg, best_score = tailor.generate_config(nets, dataset, arch, device,
                                                  oracle, budget, tcfg, workload)
    write_json(out / "generated.json",
               {"ratios": list(best_cfg.ratios), "score": best_score}, seed, cfg_hash)
    write_csv(out / "generated.csv",
              [f"r_{i}" for i in range(arch.num_layers)] + ["score"],
              [list(best_cfg.ratios) + [best_score]], seed, cfg_hash)
    print(f"wrote {out / 'generated.json'} (score {best_score:.6f})")
    return EXIT_OK


def cmd_router_demo(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    embedder, bank, _, _, _, mixed = presets.router_fixture(seed=seed)
    prompt = args.prompt if args.prompt is not None else mixed
    decision = ad.route(embedder, prompt, bank)
    rows = [[a.adapter_id, s, w]
            for a, s, w in zip(bank, decision.similarities, decision.weights)]
    write_csv(out / "decision.csv", ["adapter_id", "sigma", "omega"], rows, seed, cfg_hash)
    for row in rows:
        print(f"{row[0]},{row[1]:.6f},{row[2]:.6f}")
    return EXIT_OK


def cmd_router_eval(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    embedder, bank, w0, x, target, mixed = presets.router_fixture(seed=seed)
    decision = ad.route(embedder, mixed, bank)
    rows = []
    for mode in ad.ROUTING_MODES:
        y = ad.apply_adapters(w0, bank, ad.decision_for_mode(decision, mode), x)
        rows.append([mode, float(np.linalg.norm(y - target))])
    write_csv(out / "router_eval.csv", ["mode", "output_error"], rows, seed, cfg_hash)
    for mode, err in rows:
        print(f"{mode},{err:.6f}")
    return EXIT_OK


def cmd_dvfs_train(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    arch = resolve_arch(config)
    device = resolve_device(config)
    targets = resolve_targets(config)
    train_requests = resolve_workload(config, seed, None)
    env = dvfs.DvfsEnv(arch, device, targets, train_requests,
                       interference=resolve_interference(config),
                       policy_hidden=int(config.get("policy_hidden", 16)))
    episodes = int(config.get("episodes", 2000))
    lr = float(config.get("learning_rate", 0.003))
    policy, history = dvfs.train_policy(env, episodes, lr, seed)
    write_json(out / "policy.json", policy.to_json_dict(), seed, cfg_hash)
    write_csv(out / "episodes.csv", ["episode", "return", "energy_j", "violations"],
              [[i, r, e, v] for i, (r, e, v) in enumerate(history)], seed, cfg_hash)
    print(f"wrote {out / 'policy.json'} ({episodes} episodes)")
    return EXIT_OK


def cmd_dvfs_eval(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    arch = resolve_arch(config)
    device = resolve_device(config)
    targets = resolve_targets(config)
    policy = dvfs.PolicyNet.load(args.policy)
    workload = resolve_workload(config, seed, args.workload)
    interference = resolve_interference(config)
    rows = []
    for i, req in enumerate(workload):
        controller = dvfs.PolicyController(policy, targets, arch.num_layers, mode="greedy")
        metrics = sim.simulate_request(arch, device, controller, req, interference)
        oracle_res = dvfs.oracle_schedule(req, arch, device, targets)
        _, e_max = dvfs.baseline_max_freq(req, arch, device)
        rows.append([i, req.prompt_tokens, req.output_tokens, metrics.energy_j,
                     oracle_res.energy_j, e_max,
                     dvfs.count_violations(metrics, targets)])
    write_csv(out / "dvfs_eval.csv",
              ["request", "prompt_tokens", "output_tokens", "policy_energy_j",
               "oracle_energy_j", "maxfreq_energy_j", "violations"],
              rows, seed, cfg_hash)
    print(f"wrote {out / 'dvfs_eval.csv'} ({len(rows)} requests)")
    return EXIT_OK


def _controller_from_config(config: dict, arch, device, seed: int):
    spec = config.get("controller", "max")
    if spec == "max":
        return sim.Schedule.constant(device.max_opp, arch.num_layers)
    if isinstance(spec, int):
        return sim.Schedule.constant(spec, arch.num_layers)
    if isinstance(spec, dict) and "policy_path" in spec:
        policy = dvfs.PolicyNet.load(spec["policy_path"])
        return dvfs.PolicyController(policy, resolve_targets(config), arch.num_layers,
                                     mode="greedy")
    if isinstance(spec, dict) and "oracle" in spec:
        targets = resolve_targets(config)
        req = resolve_workload(config, seed, None)[0]
        return dvfs.oracle_schedule(req, arch, device, targets).schedule
    raise ValidationError(f"unknown controller spec {spec!r}")


def cmd_sim_run(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    arch = resolve_arch(config)
    device = resolve_device(config)
    workload = resolve_workload(config, seed, args.workload)
    controller = _controller_from_config(config, arch, device, seed)
    interference = resolve_interference(config)
    report = sim.run_batch(arch, device, controller, workload, interference)
    rows = []
    for i, record in enumerate(report.records):
        if record.metrics is None:
            rows.append([i, record.request.prompt_tokens, record.request.output_tokens,
                         "oom", "", "", "", ""])
        else:
            m = record.metrics
            rows.append([i, record.request.prompt_tokens, record.request.output_tokens,
                         "ok", m.ttft_s, m.mean_tpot_s, m.e2e_s, m.energy_j])
    write_csv(out / "requests.csv",
              ["request", "prompt_tokens", "output_tokens", "status", "ttft_s",
               "mean_tpot_s", "e2e_s", "energy_j"], rows, seed, cfg_hash)
    agg = report.aggregates()
    if "targets" in config:
        targets = resolve_targets(config)
        agg.update(report.violation_stats(targets.t_pre_target_s, targets.t_dec_target_s))
    write_csv(out / "summary.csv", ["metric", "value"],
              [[k, v] for k, v in agg.items()], seed, cfg_hash)
    print(f"wrote {out / 'summary.csv'} ({agg['requests']} requests, "
          f"{agg['total_energy_wh']:.6f} Wh)")
    return EXIT_OK


def _read_summary(run_dir: Path) -> dict:
    path = run_dir / "summary.csv"
    if not path.exists():
        raise ValidationError(f"no summary.csv under {run_dir}")
    values: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line == "metric,value":
                continue
            key, value = line.split(",", 1)
            values[key] = value
    return values


def cmd_report(args, config: dict, seed: int, out: Path, cfg_hash: str) -> int:
    if not args.runs:
        raise ValidationError("report needs at least one run directory")
    rows = []
    baseline_energy = baseline_latency = None
    for run in args.runs:
        summary = _read_summary(Path(run))
        energy_wh = float(summary["total_energy_wh"])
        latency_s = float(summary["total_e2e_s"])
        if baseline_energy is None:
            baseline_energy, baseline_latency = energy_wh, latency_s
        rows.append([Path(run).name, energy_wh, latency_s,
                     baseline_energy / energy_wh if energy_wh else float("inf"),
                     baseline_latency / latency_s if latency_s else float("inf")])
    write_csv(out / "comparison.csv",
              ["run", "energy_wh", "latency_s", "energy_gain_vs_first",
               "latency_gain_vs_first"], rows, seed, cfg_hash)
    for row in rows:
        print(",".join(_cell(v) for v in row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgetailor",
                                     description="simulated edge-LLM tailoring and DVFS toolkit")
    parser.add_argument("--config", default=None, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="artifact directory")
    top = parser.add_subparsers(dest="command", required=True)

    p_device = top.add_parser("device").add_subparsers(dest="action", required=True)
    p_device.add_parser("synth").set_defaults(func=cmd_device_synth)

    p_tailor = top.add_parser("tailor").add_subparsers(dest="action", required=True)
    p_tailor.add_parser("collect").set_defaults(func=cmd_tailor_collect)
    t_train = p_tailor.add_parser("train")
    t_train.add_argument("--dataset", required=True)
    t_train.set_defaults(func=cmd_tailor_train)
    t_gen = p_tailor.add_parser("generate")
    t_gen.add_argument("--dataset", required=True)
    t_gen.add_argument("--nets", required=True)
    t_gen.set_defaults(func=cmd_tailor_generate)

    p_router = top.add_parser("router").add_subparsers(dest="action", required=True)
    r_demo = p_router.add_parser("demo")
    r_demo.add_argument("--prompt", default=None)
    r_demo.set_defaults(func=cmd_router_demo)
    p_router.add_parser("eval").set_defaults(func=cmd_router_eval)

    p_dvfs = top.add_parser("dvfs").add_subparsers(dest="action", required=True)
    p_dvfs.add_parser("train").set_defaults(func=cmd_dvfs_train)
    d_eval = p_dvfs.add_parser("eval")
    d_eval.add_argument("--policy", required=True)
    d_eval.add_argument("--workload", default=None)
    d_eval.set_defaults(func=cmd_dvfs_eval)

    p_sim = top.add_parser("sim").add_subparsers(dest="action", required=True)
    s_run = p_sim.add_parser("run")
    s_run.add_argument("--workload", default=None)
    s_run.set_defaults(func=cmd_sim_run)

    p_report = top.add_parser("report")
    p_report.add_argument("--runs", nargs="+", default=[])
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        seed = int(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg_hash = _config_hash(config, seed)
        return args.func(args, config, seed, out, cfg_hash)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EmptyDatasetError, NoFeasibleConfigError, OomError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
