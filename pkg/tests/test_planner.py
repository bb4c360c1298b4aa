import dataclasses
import itertools
import math
import os
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import flsim.planner as planner
from flsim.errors import ConfigError
from flsim.hessian import group_layers, importance_weights
from flsim.latency import ComputeConfig, ModulationPlan, uplink_latency
from flsim.learner import TrainingHyperparams
from flsim.modem import ChannelConfig, ber, expected_sq_error
from flsim.planner import (
    PlannerInputs,
    plan_am,
    plan_enumerate,
    plan_fixed,
    plan_grouped,
    predicted_layer_errors,
    round_objective,
)

MONOTONE_COLUMNS = [
    "layer",
    "weight_before",
    "weight_after",
    "level_before",
    "level_after",
    "es_n0",
    "grad_sq_sum",
    "layer_sizes",
    "weights",
]


def _brute_force(inputs, plans):
    """Best of the given plans: highest score, then lowest uplink, then smallest level vector."""
    scored = [round_objective(ModulationPlan(p), inputs) for p in plans]
    return min(scored, key=lambda s: (-s.score, s.uplink, s.plan.levels))


def _all_plans(inputs):
    return itertools.product(inputs.channel.candidate_levels, repeat=len(inputs.layer_sizes))


def _tied_plans(inputs):
    return [(M,) * len(inputs.layer_sizes) for M in inputs.channel.candidate_levels]


def _two_layer_inputs(**changes):
    fields = dict(
        grad_sq_sum=12.0,
        importance=importance_weights([3.0, 1.0]),
        layer_sizes=(1000, 200),
        layer_steps=(0.2 / 65535, 0.05 / 65535),
        hp=TrainingHyperparams(eta=0.01, tau=5, L_smooth=1.0, sigma_sq=0.1, n_clients=10),
        channel=ChannelConfig(es_n0=12.0, uplink_bandwidth=1e5, downlink_bandwidth=1e6),
        compute=ComputeConfig(samples=100),
    )
    fields.update(changes)
    return PlannerInputs(**fields)


def _q(x):
    return 0.5 * math.erfc(x / math.sqrt(2.0))


# -- objective -------------------------------------------------------------------


def test_objective_matches_hand_evaluation():
    inputs = _two_layer_inputs()
    levels = (4, 16)
    scored = round_objective(ModulationPlan(levels), inputs)

    eta, tau, L, sigma, n, N = 0.01, 5, 1.0, 0.1, 10, 16
    x = 12.0
    ber4 = _q(math.sqrt(2 * x) * math.sin(math.pi / 4))
    ber16 = 0.5 * sum(_q(math.sqrt(2 * x) * math.sin((2 * i - 1) * math.pi / 16)) for i in range(1, 5))
    error0 = 0.75 * 1000 * ber4 * (0.2 / 65535) ** 2 * (4**N - 1) / 3
    error1 = 0.25 * 200 * ber16 * (0.05 / 65535) ** 2 * (4**N - 1) / 3
    numerator = (
        eta / 2 * 12.0
        - L / (2 * n) * (error0 + error1)
        - L**2 * (n + 1) * tau * (tau - 1) * eta**3 * sigma / (2 * n)
        - L * tau * eta**2 * sigma / (2 * n)
    )
    uplink = 1000 * N / (2 * 1e5 * 2) + 200 * N / (2 * 1e5 * 4)
    denominator = 1200 * N / (2 * 1e6) + 100 * 1e6 / 1e9 + uplink

    assert scored.numerator == pytest.approx(numerator, rel=1e-9)
    assert scored.denominator == pytest.approx(denominator, rel=1e-9)
    assert scored.score == pytest.approx(numerator / denominator, rel=1e-9)
    assert scored.uplink == pytest.approx(uplink, rel=1e-9)


def test_noiseless_channel_picks_highest_levels():
    inputs = _two_layer_inputs(channel=ChannelConfig(es_n0=1e5))
    numerators = {round_objective(ModulationPlan(p), inputs).numerator for p in _all_plans(inputs)}
    assert len(numerators) == 1
    assert plan_enumerate(inputs).plan.levels == (16, 16)


def test_degenerate_hyperparameters_give_zero_score():
    inputs = _two_layer_inputs(
        hp=TrainingHyperparams(eta=0.0, sigma_sq=0.0, n_clients=10), layer_steps=(0.0, 0.0)
    )
    for plan in _all_plans(inputs):
        scored = round_objective(ModulationPlan(plan), inputs)
        assert scored.numerator == 0.0
        assert scored.score == 0.0
    assert plan_enumerate(inputs).plan.levels == (16, 16)


def test_objective_rejects_foreign_plans():
    inputs = _two_layer_inputs()
    with pytest.raises(ConfigError):
        round_objective(ModulationPlan((4,)), inputs)
    with pytest.raises(ConfigError):
        round_objective(ModulationPlan((4, 32)), inputs)


def test_inputs_reject_mismatched_layers():
    with pytest.raises(ConfigError):
        _two_layer_inputs(layer_steps=(0.1,))


# -- enumeration -----------------------------------------------------------------


def test_single_layer_scan(planner_inputs):
    inputs = planner_inputs(np.random.default_rng(0), 1)
    best = plan_enumerate(inputs)
    assert best.plan == _brute_force(inputs, _all_plans(inputs)).plan
    assert best.evaluated == 4


def test_enumeration_matches_brute_force(planner_inputs):
    rng = np.random.default_rng(2024)
    for _ in range(50):
        inputs = planner_inputs(rng, int(rng.integers(1, 5)))
        expected = _brute_force(inputs, _all_plans(inputs))
        best = plan_enumerate(inputs)
        assert best.plan == expected.plan
        assert best.score == expected.score
        assert best.uplink == expected.uplink
        for plan in _all_plans(inputs):
            assert best.score >= round_objective(ModulationPlan(plan), inputs).score


def test_ties_go_to_lower_uplink_then_smaller_levels():
    tables = planner._Tables(
        levels=(2, 4, 8),
        error=np.zeros((2, 3)),
        uplink=np.zeros((2, 3)),
        gain=1.0,
        coef=1.0,
        drift=0.0,
        fixed_latency=1.0,
    )
    layers = np.arange(2)
    assert planner._best_in_chunk(tables, layers, 2, 0, 9)[2] == (0, 0)
    slower_low_levels = dataclasses.replace(tables, uplink=np.array([[3.0, 2.0, 1.0], [3.0, 2.0, 1.0]]), gain=0.0)
    assert planner._best_in_chunk(slower_low_levels, layers, 2, 0, 9)[2] == (2, 2)


def test_enumeration_guard(planner_inputs):
    inputs = planner_inputs(np.random.default_rng(1), 13)
    with pytest.raises(ConfigError, match="plan_grouped"):
        plan_enumerate(inputs)
    small = planner_inputs(np.random.default_rng(1), 5)
    with pytest.raises(ConfigError):
        plan_enumerate(small, max_layers=4)


def test_enumeration_is_deterministic(planner_inputs):
    inputs = planner_inputs(np.random.default_rng(9), 4)
    assert plan_enumerate(inputs) == plan_enumerate(inputs)


def test_chunked_and_parallel_search_agree(planner_inputs, monkeypatch):
    inputs = planner_inputs(np.random.default_rng(5), 5)
    whole = plan_enumerate(inputs)
    monkeypatch.setattr(planner, "_CHUNK", 64)
    assert plan_enumerate(inputs) == whole
    assert plan_enumerate(inputs, n_jobs=2) == whole


# -- grouping and baselines ------------------------------------------------------


def test_grouping_into_singletons_equals_enumeration(planner_inputs):
    rng = np.random.default_rng(3)
    for _ in range(10):
        inputs = planner_inputs(rng, 4)
        grouped = plan_grouped(inputs, group_layers(inputs.importance, 4))
        full = plan_enumerate(inputs)
        assert (grouped.plan, grouped.score) == (full.plan, full.score)


def test_single_group_equals_am(planner_inputs):
    rng = np.random.default_rng(4)
    for _ in range(10):
        inputs = planner_inputs(rng, 5)
        grouped = plan_grouped(inputs, group_layers(inputs.importance, 1))
        am = plan_am(inputs)
        assert (grouped.plan, grouped.score) == (am.plan, am.score)


def test_am_matches_brute_force_over_tied_plans(planner_inputs):
    rng = np.random.default_rng(6)
    for _ in range(20):
        inputs = planner_inputs(rng, int(rng.integers(1, 7)))
        am = plan_am(inputs)
        assert am.plan == _brute_force(inputs, _tied_plans(inputs)).plan
        assert len(set(am.plan.levels)) == 1
        assert am.evaluated == 4


def test_nested_search_spaces(planner_inputs):
    rng = np.random.default_rng(7)
    for _ in range(50):
        l = int(rng.integers(1, 7))
        inputs = planner_inputs(rng, l)
        grouped = plan_grouped(inputs, group_layers(inputs.importance, max(1, l // 2)))
        assert plan_am(inputs).score <= grouped.score <= plan_enumerate(inputs).score


def test_grouped_search_scores_fewer_plans(planner_inputs):
    inputs = planner_inputs(np.random.default_rng(8), 8)
    grouped = plan_grouped(inputs, group_layers(inputs.importance, 4))
    assert grouped.evaluated == 4**4
    assert plan_enumerate(inputs).evaluated == 4**8


def test_grouped_rejects_mismatched_grouping(planner_inputs):
    inputs = planner_inputs(np.random.default_rng(8), 4)
    with pytest.raises(ConfigError):
        plan_grouped(inputs, group_layers(importance_weights([1.0, 1.0, 1.0]), 2))


def test_fixed_plans():
    assert plan_fixed(2, 4).levels == (2, 2, 2, 2)
    assert plan_fixed(8, 1).levels == (8,)
    sizes = [1000, 200, 30]
    ratio = uplink_latency(sizes, plan_fixed(2, 3), 16, 1e6) / uplink_latency(sizes, plan_fixed(16, 3), 16, 1e6)
    assert ratio == pytest.approx(4.0)
    with pytest.raises(ConfigError):
        plan_fixed(32, 2)


def test_predicted_layer_errors_are_unweighted(planner_inputs):
    inputs = planner_inputs(np.random.default_rng(10), 3)
    plan = ModulationPlan((2, 8, 16))
    expected = [
        expected_sq_error(d, step, 16, ber(M, inputs.channel.es_n0))
        for d, step, M in zip(inputs.layer_sizes, inputs.layer_steps, plan.levels)
    ]
    assert predicted_layer_errors(plan, inputs) == expected


# -- monotone response -----------------------------------------------------------


def test_raising_a_layer_weight_does_not_raise_its_level(planner_inputs, tmp_path, record_property):
    """Counterexamples go to monotone_counterexamples.csv under FLSIM_FINDINGS_DIR (tmp_path when unset)."""
    rng = np.random.default_rng(11)
    instances = 0
    rows = []
    for _ in range(200):
        l = int(rng.integers(2, 5))
        inputs = planner_inputs(rng, l)
        k = int(rng.integers(l))
        eigenvalues = np.array(inputs.importance.eigenvalues)
        eigenvalues[k] *= 2.0
        bumped = dataclasses.replace(inputs, importance=importance_weights(eigenvalues))
        before = plan_enumerate(inputs).plan.levels[k]
        after = plan_enumerate(bumped).plan.levels[k]
        instances += 1
        if after > before:
            warnings.warn(f"level of layer {k} rose from {before} to {after} after its weight increased")
            rows.append(
                {
                    "layer": k,
                    "weight_before": inputs.importance.weights[k],
                    "weight_after": bumped.importance.weights[k],
                    "level_before": before,
                    "level_after": after,
                    "es_n0": inputs.channel.es_n0,
                    "grad_sq_sum": inputs.grad_sq_sum,
                    "layer_sizes": " ".join(map(str, inputs.layer_sizes)),
                    "weights": " ".join(f"{w:.6g}" for w in inputs.importance.weights),
                }
            )

    out_dir = Path(os.environ.get("FLSIM_FINDINGS_DIR", tmp_path))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "monotone_counterexamples.csv"
    pd.DataFrame(rows, columns=MONOTONE_COLUMNS).to_csv(path, index=False)
    record_property("monotone_counterexamples", f"{len(rows)}/{instances}")

    assert len(pd.read_csv(path)) == len(rows)
    assert len(rows) <= 0.25 * instances
