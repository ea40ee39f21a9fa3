import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad_array, fd_grad_tree, max_rel_err, max_rel_err_tree
from edgetailor import modelspec as ms
from edgetailor import presets, tailor
from edgetailor.errors import EmptyDatasetError, ValidationError


def small_nets(num_layers=3, bins=4, seed=1):
    codec = tailor.RatioTokenCodec(bin_count=bins)
    return tailor.TailorNets.create(codec, num_layers, seed=seed,
                                    hidden=8, embed=4, eval_hidden=6)


def toy_problem():
    arch, device, _, workload = presets.toy_fixture(4)
    codec = tailor.RatioTokenCodec(bin_count=5)
    oracle = ms.SyntheticPplOracle(base_ppl=8.0, sensitivity=(0.3, 0.6, 1.2, 2.2), gamma=1.5)
    budget = ms.BudgetSpec(0.5, 0.0011, 2.0, 2.0)
    return arch, device, oracle, budget, workload, codec


class TestCodec:
    def test_default_grid(self):
        codec = tailor.RatioTokenCodec()
        assert codec.bin_count == 21
        assert codec.eos_token == 21
        assert codec.ratio_of(1) == pytest.approx(0.05)

    @given(st.lists(st.integers(0, 20), min_size=1, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_on_binned_ratios(self, tokens):
        codec = tailor.RatioTokenCodec()
        cfg = ms.PruningConfig(tuple(codec.ratio_of(t) for t in tokens))
        encoded = codec.encode(cfg)
        assert encoded[-1] == codec.eos_token
        assert codec.decode(encoded, len(tokens)) == cfg

    def test_early_eos_pads_zeros(self):
        codec = tailor.RatioTokenCodec(bin_count=5)
        cfg = codec.decode([4, codec.eos_token, 3], num_layers=4)
        assert cfg.ratios == (1.0, 0.0, 0.0, 0.0)


class TestCollect:
    def test_heuristics_only_size_is_25x(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        heur = tailor.default_heuristics(4, codec)
        ds = tailor.collect_dataset(arch, device, oracle, budget, heur, n_random=0,
                                    seed=0, codec=codec, eval_workload=workload)
        # the all-ones middle-drop heuristic on 2/4 layers stays executable,
        # so nothing is filtered and each base yields exactly 25 entries
        assert len(ds) == len(heur) * 25

    def test_zero_config_scores_inverse_base_ppl_within_budget(self):
        arch, device, oracle, _, workload, codec = toy_problem()
        generous = ms.BudgetSpec(1e6, 1e6, 2.0, 2.0)
        ds = tailor.collect_dataset(arch, device, oracle, generous,
                                    [ms.PruningConfig.zeros(4)], n_random=0,
                                    seed=0, codec=codec, eval_workload=workload)
        zero_rows = [p for p in ds if p.config.ratios == (0.0,) * 4]
        assert zero_rows
        for row in zero_rows:
            assert row.score == pytest.approx(1.0 / oracle.base_ppl, rel=1e-12)

    def test_identical_configs_identical_scores(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        cfg = ms.PruningConfig((0.5, 0.5, 0.5, 0.5))
        ds = tailor.collect_dataset(arch, device, oracle, budget, [cfg, cfg], 0,
                                    seed=3, codec=codec, eval_workload=workload)
        scores = {p.score for p in ds}
        assert len(scores) == 1  # shuffles of uniform config are the config

    def test_deterministic_per_seed(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        heur = tailor.default_heuristics(4, codec)
        a = tailor.collect_dataset(arch, device, oracle, budget, heur, 4, 7,
                                   codec=codec, eval_workload=workload)
        b = tailor.collect_dataset(arch, device, oracle, budget, heur, 4, 7,
                                   codec=codec, eval_workload=workload)
        assert a == b

    def test_infeasible_memory_everywhere_raises(self):
        arch, device, oracle, _, workload, codec = toy_problem()
        stingy = ms.BudgetSpec(0.5, 0.0011, 2.0, 2.0, memory_budget_bytes=1)
        with pytest.raises(EmptyDatasetError):
            tailor.collect_dataset(arch, device, oracle, stingy,
                                   [ms.PruningConfig.zeros(4)], 0, 0,
                                   codec=codec, eval_workload=workload)

    def test_requires_some_source(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        with pytest.raises(ValidationError):
            tailor.collect_dataset(arch, device, oracle, budget, [], 0, 0,
                                   codec=codec, eval_workload=workload)

    def test_csv_round_trip(self, tmp_path):
        arch, device, oracle, budget, workload, codec = toy_problem()
        ds = tailor.collect_dataset(arch, device, oracle, budget,
                                    [ms.PruningConfig((0.25, 0.0, 0.5, 0.75))], 2,
                                    seed=1, codec=codec, eval_workload=workload)
        path = tmp_path / "ds.csv"
        tailor.dataset_to_csv(ds, path, meta="seed=1")
        assert tailor.dataset_from_csv(path) == ds


class TestTrain:
    def test_single_pair_memorizes(self):
        nets = small_nets()
        pair = tailor.RatioScorePair(ms.PruningConfig((0.0, 1.0, 1.0 / 3.0)), 0.7)
        nets, history = tailor.train(
            nets, [pair], tailor.TailorConfig(epochs=300, seed=0, batch_size=8))
        assert tailor.reconstruction_accuracy(nets, [pair]) == 1.0
        assert history[-1] < history[0]

    def test_loss_history_nonincreasing_within_jitter(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        ds = tailor.collect_dataset(arch, device, oracle, budget,
                                    tailor.default_heuristics(4, codec), 4, 0,
                                    codec=codec, eval_workload=workload)
        nets = tailor.TailorNets.create(codec, 4, seed=0, hidden=16, embed=8, eval_hidden=16)
        _, history = tailor.train(nets, ds, tailor.TailorConfig(epochs=40, batch_size=64, seed=0))
        running_best = history[0]
        for value in history[1:]:
            assert value <= running_best * 1.05
            running_best = min(running_best, value)

    def test_normalized_targets_unit_interval(self):
        scores = np.array([3.0, 0.1, 7.5, 2.2])
        norm, lo, hi = tailor.normalized_scores(scores)
        assert lo == 0.1 and hi == 7.5
        assert norm.min() == 0.0 and norm.max() == 1.0
        assert np.all((norm >= 0.0) & (norm <= 1.0))

    def test_training_deterministic(self):
        pair = tailor.RatioScorePair(ms.PruningConfig((0.5, 0.5, 0.0)), 0.4)
        runs = []
        for _ in range(2):
            nets = small_nets(seed=5)
            nets, _ = tailor.train(nets, [pair],
                                   tailor.TailorConfig(epochs=20, seed=9, batch_size=4))
            runs.append({k: {kk: vv.copy() for kk, vv in v.items()}
                         for k, v in nets.params.items()})
        for group in runs[0]:
            for key in runs[0][group]:
                assert np.array_equal(runs[0][group][key], runs[1][group][key])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValidationError):
            tailor.train(small_nets(), [], tailor.TailorConfig(epochs=1))


class TestGradients:
    def test_training_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(3):
            nets = small_nets(seed=int(rng.integers(1 << 30)))
            tokens = rng.integers(0, nets.codec.vocab_size - 1, size=(3, 4))
            targets = rng.uniform(0.0, 1.0, size=3)
            _, _, _, grads = tailor._batch_loss_and_grads(nets, tokens, targets, 1.0)
            fd = fd_grad_tree(lambda: tailor.training_loss(nets, tokens, targets, 1.0),
                              nets.params)
            assert max_rel_err_tree(grads, fd) <= 1e-4

    def test_evaluator_latent_gradient(self):
        rng = np.random.default_rng(4)
        nets = small_nets(seed=2)
        latent = rng.normal(size=nets.hidden)
        _, grad = tailor.evaluate_with_grad(nets, latent)
        fd = fd_grad_array(lambda: tailor.evaluate(nets, latent), latent)
        assert max_rel_err(grad, fd) <= 1e-4


class TestLatentOps:
    def test_encode_deterministic(self):
        nets = small_nets()
        cfg = ms.PruningConfig((0.0, 1.0 / 3.0, 1.0))
        assert np.array_equal(tailor.encode(nets, cfg), tailor.encode(nets, cfg))

    def test_zero_gradient_returns_start(self):
        nets = small_nets()
        nets.params["eval"]["W2"][:] = 0.0  # evaluator constant -> zero gradient
        start = np.full(nets.hidden, 0.3)
        out = tailor.optimize_latent(nets, start, eta=0.8, steps=5)
        assert np.array_equal(out, start)

    def test_ascent_never_decreases_prediction(self):
        nets = small_nets(seed=3)
        rng = np.random.default_rng(0)
        for _ in range(5):
            start = rng.normal(size=nets.hidden)
            out = tailor.optimize_latent(nets, start, eta=0.8, steps=6)
            assert tailor.evaluate(nets, out) >= tailor.evaluate(nets, start) - 1e-12

    def test_quadratic_ascent_converges_to_origin(self):
        # pure gradient ascent on pi(z) = -'z'^2 via the shared step rule
        value = lambda z: -float(z @ z)
        grad = lambda z: -2.0 * z
        z = np.array([2.0, -1.5, 0.5])
        scores = [value(z)]
        for _ in range(40):
            step = 0.8
            g = grad(z)
            while value(z + step * g) < value(z):
                step *= 0.5
            z = z + step * g
            scores.append(value(z))
        assert np.linalg.norm(z) < 1e-3
        assert all(b >= a for a, b in zip(scores, scores[1:]))


class TestDecode:
    def test_beam_one_equals_greedy(self):
        nets = small_nets(seed=7)
        rng = np.random.default_rng(1)
        latent = rng.normal(size=nets.hidden)
        beam = tailor.decode_config(nets, latent, beam_width=1, max_len=3)
        # manual greedy rollout
        from edgetailor import nn
        p = nets.params
        h = latent[None, :].copy()
        c = np.zeros_like(h)
        prev = nets.codec.eos_token
        tokens = []
        for _ in range(3):
            x = p["dec_emb"]["E"][np.array([prev])]
            h, c = nn.lstm_step(p["dec"], x, h, c)
            logits = h @ p["dec_out"]["W"] + p["dec_out"]["b"]
            prev = int(np.argmax(logits[0]))
            if prev == nets.codec.eos_token:
                break
            tokens.append(prev)
        expect = nets.codec.decode(tokens + [nets.codec.eos_token], 3)
        assert beam == expect

    def test_wide_beam_matches_exhaustive_enumeration(self):
        from edgetailor import nn
        nets = small_nets(num_layers=2, bins=4, seed=13)
        rng = np.random.default_rng(5)
        latent = rng.normal(size=nets.hidden)
        p = nets.params
        eos = nets.codec.eos_token
        vocab = nets.codec.vocab_size
        max_len = 2

        def step_logps(prev, h, c):
            x = p["dec_emb"]["E"][np.array([prev])]
            h2, c2 = nn.lstm_step(p["dec"], x, h, c)
            logits = h2 @ p["dec_out"]["W"] + p["dec_out"]["b"]
            return nn.log_softmax(logits[0]), h2, c2

        # enumerate every sequence the decoder semantics admit
        candidates = []

        def walk(prev, h, c, tokens, logp, depth):
            if depth == max_len:
                candidates.append((logp, tuple(tokens)))
                return
            logps, h2, c2 = step_logps(prev, h, c)
            for v in range(vocab):
                if v == eos:
                    candidates.append((logp + float(logps[v]), tuple(tokens)))
                else:
                    walk(v, h2, c2, tokens + [v], logp + float(logps[v]), depth + 1)

        h0 = latent[None, :].copy()
        walk(eos, h0, np.zeros_like(h0), [], 0.0, 0)
        candidates.sort(key=lambda e: (-e[0], e[1]))
        best_tokens = candidates[0][1]
        expect = nets.codec.decode(list(best_tokens) + [eos], max_len)
        got = tailor.decode_config(nets, latent, beam_width=vocab ** max_len, max_len=max_len)
        assert got == expect

    def test_output_length_capped(self):
        nets = small_nets(num_layers=5, seed=21)
        rng = np.random.default_rng(3)
        for _ in range(5):
            cfg = tailor.decode_config(nets, rng.normal(size=nets.hidden),
                                       beam_width=3, max_len=5)
            assert len(cfg.ratios) == 5


class TestGenerate:
    def test_seed_returned_with_zero_ascent_and_trained_net(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        seed_cfg = ms.PruningConfig((1.0, 0.5, 0.0, 0.0))
        ds = tailor.collect_dataset(arch, device, oracle, budget, [seed_cfg], 0,
                                    seed=0, codec=codec, eval_workload=workload)
        nets = tailor.TailorNets.create(codec, 4, seed=0, hidden=24, embed=8, eval_hidden=16)
        cfg_t = tailor.TailorConfig(epochs=150, batch_size=8, seed=0,
                                    top_k=1, ascent_steps=0)
        nets, _ = tailor.train(nets, ds, cfg_t)
        best = max(ds, key=lambda p: p.score)
        assert tailor.reconstruction_accuracy(nets, [best]) == 1.0
        got_cfg, got_score = tailor.generate_config(nets, ds, arch, device, oracle,
                                                    budget, cfg_t, workload)
        assert got_cfg == codec.snap(best.config)
        assert got_score == pytest.approx(best.score, rel=1e-12)

    def test_never_below_best_seed(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        heur = tailor.default_heuristics(4, codec)
        ds = tailor.collect_dataset(arch, device, oracle, budget, heur, 6, 1,
                                    codec=codec, eval_workload=workload)
        nets = tailor.TailorNets.create(codec, 4, seed=1, hidden=24, embed=8, eval_hidden=16)
        cfg_t = tailor.TailorConfig(epochs=60, batch_size=64, seed=1, top_k=10)
        nets, _ = tailor.train(nets, ds, cfg_t)
        _, score = tailor.generate_config(nets, ds, arch, device, oracle, budget,
                                          cfg_t, workload)
        assert score >= max(p.score for p in ds) - 1e-12

    def test_varied_ratios_under_u_shaped_oracle(self):
        arch, device, oracle, _, workload, codec = toy_problem()
        u_oracle = ms.SyntheticPplOracle.u_shaped(4)
        budget = ms.BudgetSpec(0.5, 0.0011, 2.0, 2.0)
        heur = tailor.default_heuristics(4, codec)
        ds = tailor.collect_dataset(arch, device, u_oracle, budget, heur, 8, 2,
                                    codec=codec, eval_workload=workload)
        nets = tailor.TailorNets.create(codec, 4, seed=2, hidden=24, embed=8, eval_hidden=16)
        cfg_t = tailor.TailorConfig(epochs=60, batch_size=64, seed=2, top_k=10)
        nets, _ = tailor.train(nets, ds, cfg_t)
        cfg, _ = tailor.generate_config(nets, ds, arch, device, u_oracle, budget,
                                        cfg_t, workload)
        assert len(set(cfg.ratios)) > 1

    def test_top_k_larger_than_dataset_rejected(self):
        arch, device, oracle, budget, workload, codec = toy_problem()
        ds = tailor.collect_dataset(arch, device, oracle, budget,
                                    [ms.PruningConfig.zeros(4)], 0, 0,
                                    codec=codec, eval_workload=workload)
        nets = tailor.TailorNets.create(codec, 4, seed=0, hidden=8, embed=4, eval_hidden=6)
        with pytest.raises(ValidationError):
            tailor.generate_config(nets, ds, arch, device, oracle, budget,
                                   tailor.TailorConfig(top_k=10_000), workload)


def test_nets_json_round_trip(tmp_path):
    nets = small_nets(seed=9)
    nets.score_lo, nets.score_hi = 0.2, 0.9
    path = tmp_path / "nets.json"
    nets.save(path)
    again = tailor.TailorNets.load(path)
    assert again.codec.bin_count == nets.codec.bin_count
    assert again.score_lo == nets.score_lo
    for group in nets.params:
        for key in nets.params[group]:
            assert np.array_equal(again.params[group][key], nets.params[group][key])
    cfg = ms.PruningConfig((0.0, 1.0, 1.0 / 3.0))
    assert np.array_equal(tailor.encode(again, cfg), tailor.encode(nets, cfg))
