"""
Per-round modulation planning.

A plan's score is the predicted loss drop of the round divided by the round latency:

    numerator   = eta/2 * G - L/(2n) * sum_k w_k * E_k(M^k) - L^2 (n+1) tau (tau-1) eta^3 sigma^2 / (2n)
                  - L tau eta^2 sigma^2 / (2n)
    denominator = D N / (2 B_d) + V C / f + sum_k D_k N / (2 B_u log2 M^k)

where G is the client's accumulated squared gradient norm over the local steps, w_k
the layer importance weight and E_k the expected squared error the channel adds to
layer k at the BER of M^k. Plans are found by exhaustive search over the candidate
levels, either per layer, per importance group, or with one level for the model.
Ties go to the lower uplink latency, then the lexicographically smaller level vector.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from flsim.errors import ConfigError, NumericError
from flsim.hessian import LayerGrouping, LayerImportance
from flsim.latency import ComputeConfig, ModulationPlan, compute_latency, downlink_latency, layer_uplink_latency
from flsim.learner import TrainingHyperparams
from flsim.modem import ChannelConfig, ber, expected_sq_error

logger = logging.getLogger(__name__)

MAX_ENUMERATION_LAYERS = 12
_CHUNK = 1 << 18


@dataclass(frozen=True)
class PlannerInputs:
    grad_sq_sum: float
    importance: LayerImportance
    layer_sizes: Tuple[int, ...]
    layer_steps: Tuple[float, ...]  # quantizer step of this round's update, per layer
    hp: TrainingHyperparams
    channel: ChannelConfig
    compute: ComputeConfig  # with V resolved

    def __post_init__(self):
        l = len(self.layer_sizes)
        if len(self.layer_steps) != l or len(self.importance.weights) != l:
            raise ConfigError(
                f"planner inputs disagree on layer count: {l} sizes, {len(self.layer_steps)} steps, "
                f"{len(self.importance.weights)} weights"
            )
        if self.grad_sq_sum < 0:
            raise ConfigError(f"accumulated gradient norm must be >= 0, got {self.grad_sq_sum}")


@dataclass(frozen=True)
class ScoredPlan:
    plan: ModulationPlan
    numerator: float  # predicted loss drop
    denominator: float  # round latency, seconds
    score: float
    uplink: float  # T_u of this plan
    evaluated: int = 1  # plans scored to find it


@dataclass(frozen=True, eq=False)
class _Tables:
    levels: Tuple[int, ...]
    error: np.ndarray  # (l, c): w_k * E_k(M_j)
    uplink: np.ndarray  # (l, c): D_k N / (2 B_u log2 M_j)
    gain: float
    coef: float
    drift: float
    fixed_latency: float


def _tables(inputs: PlannerInputs) -> _Tables:
    hp, channel = inputs.hp, inputs.channel
    levels = channel.candidate_levels
    bers = [ber(M, channel.es_n0) for M in levels]
    error = np.array(
        [
            [w * expected_sq_error(d, step, channel.n_bits, b) for b in bers]
            for w, d, step in zip(inputs.importance.weights, inputs.layer_sizes, inputs.layer_steps)
        ]
    )
    uplink = np.array(
        [[layer_uplink_latency(d, channel.n_bits, channel.uplink_bandwidth, M) for M in levels] for d in inputs.layer_sizes]
    )
    n, L, tau, eta, sigma_sq = hp.n_clients, hp.L_smooth, hp.tau, hp.eta, hp.sigma_sq
    drift = L * L * (n + 1) * tau * (tau - 1) * eta**3 * sigma_sq / (2 * n) + L * tau * eta**2 * sigma_sq / (2 * n)
    fixed = downlink_latency(sum(inputs.layer_sizes), channel.n_bits, channel.downlink_bandwidth) + compute_latency(
        inputs.compute
    )
    return _Tables(levels, error, uplink, eta / 2 * inputs.grad_sq_sum, L / (2 * n), drift, fixed)


def _check(denominator) -> None:
    if np.any(np.asarray(denominator) <= 0):
        raise NumericError("round latency must be positive")


def round_objective(plan: ModulationPlan, inputs: PlannerInputs) -> ScoredPlan:
    """Score one plan with the per-round loss-drop-per-second objective."""
    tables = _tables(inputs)
    if len(plan.levels) != len(inputs.layer_sizes):
        raise ConfigError(f"plan covers {len(plan.levels)} layers, model has {len(inputs.layer_sizes)}")
    try:
        index = [tables.levels.index(M) for M in plan.levels]
    except ValueError:
        raise ConfigError(f"plan {list(plan.levels)} uses levels outside {list(tables.levels)}") from None
    error_sum = sum(tables.error[k, j] for k, j in enumerate(index))
    uplink = sum(tables.uplink[k, j] for k, j in enumerate(index))
    numerator = tables.gain - tables.coef * error_sum - tables.drift
    denominator = tables.fixed_latency + uplink
    _check(denominator)
    return ScoredPlan(plan, float(numerator), float(denominator), float(numerator / denominator), float(uplink))


def _best_in_chunk(tables: _Tables, unit_of_layer: np.ndarray, n_units: int, start: int, stop: int):
    """Score plans start..stop-1 of the unit-level product space; return the best row."""
    c = len(tables.levels)
    unit_index = np.stack(np.unravel_index(np.arange(start, stop), (c,) * n_units), axis=1)
    layer_index = unit_index[:, unit_of_layer]
    error_sum = np.zeros(stop - start)
    uplink = np.zeros(stop - start)
    for k in range(layer_index.shape[1]):
        error_sum = error_sum + tables.error[k, layer_index[:, k]]
        uplink = uplink + tables.uplink[k, layer_index[:, k]]
    numerator = tables.gain - tables.coef * error_sum - tables.drift
    denominator = tables.fixed_latency + uplink
    _check(denominator)
    score = numerator / denominator

    rows = np.flatnonzero(score == score.max())
    rows = rows[uplink[rows] == uplink[rows].min()]
    if len(rows) > 1:
        rows = rows[np.lexsort(layer_index[rows][:, ::-1].T)]
    best = rows[0]
    return (
        float(score[best]),
        float(uplink[best]),
        tuple(int(j) for j in layer_index[best]),
        float(numerator[best]),
        float(denominator[best]),
    )


def _search(inputs: PlannerInputs, unit_of_layer: Sequence[int], n_units: int, n_jobs: int = 1) -> ScoredPlan:
    tables = _tables(inputs)
    unit_of_layer = np.asarray(unit_of_layer, dtype=np.intp)
    total = len(tables.levels) ** n_units
    bounds = [(start, min(start + _CHUNK, total)) for start in range(0, total, _CHUNK)]
    if n_jobs == 1 or len(bounds) == 1:
        results = [_best_in_chunk(tables, unit_of_layer, n_units, a, b) for a, b in bounds]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_best_in_chunk)(tables, unit_of_layer, n_units, a, b) for a, b in bounds
        )
    score, uplink, index, numerator, denominator = min(results, key=lambda r: (-r[0], r[1], r[2]))
    plan = ModulationPlan(tuple(tables.levels[j] for j in index))
    return ScoredPlan(plan, numerator, denominator, score, uplink, total)


def plan_enumerate(
    inputs: PlannerInputs, max_layers: int = MAX_ENUMERATION_LAYERS, n_jobs: int = 1
) -> ScoredPlan:
    """Best plan over all |levels|^l per-layer assignments."""
    l = len(inputs.layer_sizes)
    if l > max_layers:
        raise ConfigError(
            f"full enumeration of {len(inputs.channel.candidate_levels)}^{l} plans exceeds the "
            f"{max_layers}-layer budget; use plan_grouped"
        )
    return _search(inputs, range(l), l, n_jobs)


def plan_grouped(inputs: PlannerInputs, grouping: LayerGrouping, n_jobs: int = 1) -> ScoredPlan:
    """Best plan in which all layers of an importance group share one level."""
    if len(grouping.group_of) != len(inputs.layer_sizes):
        raise ConfigError(f"grouping covers {len(grouping.group_of)} layers, model has {len(inputs.layer_sizes)}")
    if grouping.g > MAX_ENUMERATION_LAYERS:
        raise ConfigError(f"{grouping.g} groups exceed the enumeration budget of {MAX_ENUMERATION_LAYERS}")
    return _search(inputs, grouping.group_of, grouping.g, n_jobs)


def plan_am(inputs: PlannerInputs) -> ScoredPlan:
    """Best single level shared by the whole model."""
    return _search(inputs, [0] * len(inputs.layer_sizes), 1)


def plan_fixed(M: int, l: int, candidate_levels: Sequence[int] = (2, 4, 8, 16)) -> ModulationPlan:
    if M not in candidate_levels:
        raise ConfigError(f"modulation order {M} not in candidate levels {list(candidate_levels)}")
    return ModulationPlan((M,) * l)


def predicted_layer_errors(plan: ModulationPlan, inputs: PlannerInputs) -> List[float]:
    """Unweighted expected squared channel error of every layer under the plan."""
    channel = inputs.channel
    return [
        expected_sq_error(d, step, channel.n_bits, ber(M, channel.es_n0))
        for d, step, M in zip(inputs.layer_sizes, inputs.layer_steps, plan.levels)
    ]
