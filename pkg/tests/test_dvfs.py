import itertools
import math

import numpy as np
import pytest

from conftest import fd_grad_tree, max_rel_err_tree
from edgetailor import device as dev
from edgetailor import dvfs
from edgetailor import modelspec as ms
from edgetailor import presets
from edgetailor import sim
from edgetailor.errors import ValidationError


def two_opp_toy():
    arch = ms.LlmArchitecture.uniform("toy1", 1, 1_000_000, bytes_per_param=1,
                                      kv_bytes_per_token=0)
    spec = {"name": "twoopp", "memory_gb": 1.0,
            "frequencies_hz": [0.5e9, 1.0e9], "voltages_volts": [0.7, 1.0],
            "p_static_watts": 1.0, "c_eff_prefill": 10.0, "c_eff_decode": 8.0,
            "prefill_flops_per_hz": 10.0, "decode_flops_per_hz": 1.0}
    device = dev.synth_device(spec)
    t_low = arch.decode_flops_per_token[0] / dev.effective_throughput(device, 0, "decode", 0.0)
    targets = dvfs.LatencyTargets(1.0, t_low * 1.5)  # low opp always meets the deadline
    return arch, device, targets


def state(phase="decode", slack=1.0, n_layers=4, layer=0):
    return dvfs.DvfsState(0.0, 0.05, 0.16, phase, layer, n_layers, slack)


class TestAct:
    def test_zero_logits_greedy_breaks_ties_low(self):
        policy = dvfs.PolicyNet.create(6, hidden=8, seed=0)
        for key in policy.params:
            policy.params[key][:] = 0.0
        assert dvfs.act(policy, state(), "greedy") == 0

    def test_one_hot_logit_dominates_both_modes(self):
        policy = dvfs.PolicyNet.create(5, hidden=8, seed=0)
        for key in policy.params:
            policy.params[key][:] = 0.0
        policy.params["b2"][3] = 50.0
        st = state()
        assert dvfs.act(policy, st, "greedy") == 3
        rng = np.random.default_rng(0)
        assert all(dvfs.act(policy, st, "sample", rng) == 3 for _ in range(20))

    def test_sampling_seeded_reproducible(self):
        policy = dvfs.PolicyNet.create(8, hidden=8, seed=1)
        st = state()
        a = [dvfs.act(policy, st, "sample", np.random.default_rng(42)) for _ in range(10)]
        b = [dvfs.act(policy, st, "sample", np.random.default_rng(42)) for _ in range(10)]
        assert a == b

    def test_policy_parameter_budget(self):
        policy = dvfs.PolicyNet.create(16, hidden=24, seed=0)
        assert policy.param_count < 1000
        with pytest.raises(ValidationError):
            dvfs.PolicyNet.create(8, hidden=64, seed=0)


class TestEpisodeReturn:
    def test_zero_energy_zero_violations(self):
        result = dvfs.EpisodeResult(0.0, 0.0, (), 0)
        assert dvfs.episode_return(result, dvfs.RewardSpec(10.0)) == 0.0

    def test_energy_only(self):
        result = dvfs.EpisodeResult(20.0, 0.1, (0.1,), 0)
        assert dvfs.episode_return(result, dvfs.RewardSpec(123.0)) == -20.0

    def test_each_violation_costs_penalty(self):
        spec = dvfs.RewardSpec(7.5)
        base = dvfs.EpisodeResult(5.0, 0.1, (0.1,), 0)
        worse = dvfs.EpisodeResult(5.0, 0.1, (0.1,), 1)
        assert dvfs.episode_return(base, spec) - dvfs.episode_return(worse, spec) == 7.5

    def test_default_penalty_is_10x_worst_token(self):
        arch, device, _ = two_opp_toy()
        spec = dvfs.RewardSpec.default(arch, device)
        worst = max(
            dvfs._token_energy(arch, device, opp, "decode", 1, 0.0)
            for opp in range(device.num_opps)
        )
        assert spec.violation_penalty == pytest.approx(10.0 * worst)


class TestPolicyGradient:
    def test_log_prob_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            policy = dvfs.PolicyNet.create(int(rng.integers(2, 9)), hidden=6,
                                           seed=int(rng.integers(1 << 30)))
            feats = rng.uniform(-1.0, 1.0, size=dvfs.FEATURE_COUNT)
            action = int(rng.integers(policy.n_actions))
            _, grads = dvfs.log_prob_and_grad(policy, feats, action)
            fd = fd_grad_tree(lambda: dvfs.log_prob_and_grad(policy, feats, action)[0],
                              {"p": policy.params})
            assert max_rel_err_tree({"p": grads}, fd) <= 1e-4


class TestTrainPolicy:
    def test_zero_lr_leaves_parameters_bitwise(self):
        arch, device, targets = two_opp_toy()
        env = dvfs.DvfsEnv(arch, device, targets, [sim.Request(0.0, 4, 4)])
        seed = 5
        rng = np.random.default_rng(seed)
        expected = dvfs.PolicyNet.create(env.n_actions, hidden=env.policy_hidden,
                                         seed=int(rng.integers(2 ** 31)))
        policy, _ = dvfs.train_policy(env, episodes=20, lr=0.0, seed=seed)
        for key in policy.params:
            assert np.array_equal(policy.params[key], expected.params[key])

    def test_toy_env_learns_low_opp(self):
        arch, device, targets = two_opp_toy()
        env = dvfs.DvfsEnv(arch, device, targets, [sim.Request(0.0, 4, 8)])
        policy, history = dvfs.train_policy(env, episodes=1500, lr=20.0, seed=1)
        low = total = 0
        for phase in ("prefill", "decode"):
            for slack in np.linspace(-0.5, 1.0, 7):
                st = dvfs.DvfsState(0.0, targets.t_pre_target_s, targets.t_dec_target_s,
                                    phase, 0, 1, float(slack))
                low += dvfs.act(policy, st, "greedy") == 0
                total += 1
        assert low / total >= 0.95
        # smoothed return should not regress from the first window to the last
        rets = [h[0] for h in history]
        assert np.mean(rets[-50:]) >= np.mean(rets[:50])

    def test_deterministic_per_seed(self):
        arch, device, targets = two_opp_toy()
        env = dvfs.DvfsEnv(arch, device, targets, [sim.Request(0.0, 4, 4)])
        p1, h1 = dvfs.train_policy(env, episodes=30, lr=1.0, seed=3)
        p2, h2 = dvfs.train_policy(env, episodes=30, lr=1.0, seed=3)
        assert h1 == h2
        for key in p1.params:
            assert np.array_equal(p1.params[key], p2.params[key])


def single_opp_device():
    return dev.DeviceProfile(
        name="mono", memory_bytes=1 << 30,
        opps=(dev.OperatingPoint(0, 0.8, 1.0e9),),
        power=dev.PowerTable((6.0,), (4.0,), (1.0,)),
        throughput_flops_per_hz={"prefill": 100.0, "decode": 10.0},
    )


class TestOracle:
    def test_single_opp_energy_is_power_times_time(self):
        arch = ms.LlmArchitecture.uniform("a", 3, 1_000_000, 1, 0)
        device = single_opp_device()
        req = sim.Request(0.0, 10, 4)
        res = dvfs.oracle_schedule(req, arch, device, dvfs.LatencyTargets(10.0, 10.0))
        assert res.feasible
        t_pre = 10 * sum(arch.prefill_flops_per_prompt_token) / (100.0 * 1.0e9)
        t_dec = sum(arch.decode_flops_per_token) / (10.0 * 1.0e9)
        assert res.energy_j == pytest.approx(6.0 * t_pre + 4 * 4.0 * t_dec, rel=1e-12)

    def test_loose_deadline_picks_per_layer_minimum_energy(self):
        arch, device = presets.nx_fixture()
        req = sim.Request(0.0, 16, 2)
        res = dvfs.oracle_schedule(req, arch, device,
                                   dvfs.LatencyTargets(math.inf, math.inf))
        assert res.feasible
        for phase, assignment in (("prefill", res.schedule.prefill_opps),
                                  ("decode", res.schedule.decode_opps)):
            for l, f in enumerate(assignment):
                energies = [
                    dvfs._unit_time(arch, device, opp, phase, l, req.prompt_tokens, 0.0)
                    * dev.power(device, opp, phase)
                    for opp in range(device.num_opps)
                ]
                assert f == int(np.argmin(energies))

    def test_two_layer_three_opp_matches_enumeration(self):
        arch = ms.LlmArchitecture("l2", (3_000_000, 9_000_000), (6_000_000, 18_000_000),
                                  (6_000_000, 18_000_000), 1, 0)
        spec = {"name": "f3", "memory_gb": 1.0,
                "frequencies_hz": [0.4e9, 0.7e9, 1.0e9],
                "voltages_volts": [0.6, 0.8, 1.0],
                "p_static_watts": 1.0, "c_eff_prefill": 6.0, "c_eff_decode": 4.0,
                "prefill_flops_per_hz": 20.0, "decode_flops_per_hz": 4.0}
        device = dev.synth_device(spec)
        req = sim.Request(0.0, 8, 3)
        targets = dvfs.LatencyTargets(0.06, 0.012)
        res = dvfs.oracle_schedule(req, arch, device, targets)

        def brute(phase, budget_s):
            times, buckets, energy = dvfs._phase_tables(arch, device, phase,
                                                        req.prompt_tokens, 0.0)
            cap = sum(max(row) for row in buckets)
            budget = min(dvfs._budget_buckets(budget_s), cap)
            best, best_e = None, math.inf
            for assign in itertools.product(range(3), repeat=2):
                if sum(buckets[l][assign[l]] for l in range(2)) > budget:
                    continue
                acc = 0.0
                for l in (1, 0):
                    acc = energy[l][assign[l]] + acc
                if acc < best_e:
                    best, best_e = assign, acc
            return best

        assert res.feasible
        assert tuple(res.schedule.prefill_opps) == brute("prefill", targets.t_pre_target_s)
        assert tuple(res.schedule.decode_opps) == brute("decode", targets.t_dec_target_s)

    def test_infeasible_reports_max_freq_schedule(self):
        arch, device = presets.nx_fixture()
        res = dvfs.oracle_schedule(sim.Request(0.0, 128, 4), arch, device,
                                   dvfs.LatencyTargets(1e-6, 1e-6))
        assert not res.feasible
        assert set(res.schedule.prefill_opps) == {device.max_opp}
        assert set(res.schedule.decode_opps) == {device.max_opp}
        _, e_max = dvfs.baseline_max_freq(sim.Request(0.0, 128, 4), arch, device)
        assert res.energy_j == pytest.approx(e_max)

    def test_looser_decode_deadline_never_costs_more(self):
        arch, device = presets.nx_fixture()
        req = sim.Request(0.0, 64, 8)
        energies = []
        for t_dec in (0.20, 0.25, 0.35, 0.5, 1.0, math.inf):
            res = dvfs.oracle_schedule(req, arch, device, dvfs.LatencyTargets(1.0, t_dec))
            assert res.feasible
            energies.append(res.energy_j)
        assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))

    def test_oracle_energy_matches_simulator(self):
        arch, device = presets.nx_fixture()
        req = sim.Request(0.0, 32, 5)
        res = dvfs.oracle_schedule(req, arch, device, dvfs.LatencyTargets(0.2, 0.3))
        metrics = sim.simulate_request(arch, device, res.schedule, req)
        assert metrics.energy_j == pytest.approx(res.energy_j, rel=1e-9)


class TestBaseline:
    def test_fastest_and_most_expensive(self):
        arch, device = presets.nx_fixture()
        req = sim.Request(0.0, 32, 6)
        schedule, e_max = dvfs.baseline_max_freq(req, arch, device)
        m_max = sim.simulate_request(arch, device, schedule, req)
        assert m_max.energy_j == pytest.approx(e_max, rel=1e-9)
        for opp in range(device.num_opps - 1):
            m = sim.simulate_request(arch, device,
                                     sim.Schedule.constant(opp, arch.num_layers), req)
            assert m.e2e_s >= m_max.e2e_s
            assert m.energy_j <= e_max + 1e-9
        res = dvfs.oracle_schedule(req, arch, device, dvfs.LatencyTargets(0.2, 0.25))
        assert res.feasible
        assert res.energy_j <= e_max


class TestControllerIntegration:
    def test_rollout_counts_violations_consistently(self):
        arch, device, targets = two_opp_toy()
        env = dvfs.DvfsEnv(arch, device, targets, [sim.Request(0.0, 4, 6)])
        policy = dvfs.PolicyNet.create(env.n_actions, hidden=8, seed=0)
        result, steps = env.rollout(policy, env.requests[0], mode="greedy", record=True)
        controller = dvfs.PolicyController(policy, targets, arch.num_layers, mode="greedy")
        metrics = sim.simulate_request(arch, device, controller, env.requests[0])
        assert result.violations == dvfs.count_violations(metrics, targets)
        assert result.energy_j == pytest.approx(metrics.energy_j)
        # one decision per layer for prefill plus each decode token
        assert len(steps) == arch.num_layers * (1 + 6)

    def test_state_validation(self):
        with pytest.raises(ValidationError):
            dvfs.DvfsState(1.5, 0.1, 0.1, "decode", 0, 4, 0.0)
        with pytest.raises(ValidationError):
            dvfs.DvfsState(0.0, 0.1, 0.1, "warmup", 0, 4, 0.0)
        st = dvfs.DvfsState(0.0, 0.1, 0.1, "decode", 1, 4, 5.0)
        assert st.features()[-1] == 1.0  # slack clamped


def test_policy_json_round_trip(tmp_path):
    policy = dvfs.PolicyNet.create(8, hidden=12, seed=4)
    path = tmp_path / "policy.json"
    policy.save(path)
    again = dvfs.PolicyNet.load(path)
    assert again.n_actions == 8
    for key in policy.params:
        assert np.array_equal(policy.params[key], again.params[key])
