"""Per-layer importance from the top eigenvalue of each layer's Hessian block."""
import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from flsim.datasets import Dataset
from flsim.errors import ConfigError, NumericError
from flsim.learner import LayeredModel, hvp
from flsim.seeding import Purpose, stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EigenEstimate:
    value: float  # signed Rayleigh quotient
    iters: int
    converged: bool


@dataclass(frozen=True)
class LayerImportance:
    eigenvalues: Tuple[float, ...]
    weights: Tuple[float, ...]
    round_computed: int = 0
    hvp_calls: int = 0
    converged: Tuple[bool, ...] = ()

    @property
    def gradient_evaluations(self) -> int:
        """Extra backward passes spent on the estimate (two per central-difference HVP)."""
        return 2 * self.hvp_calls


@dataclass(frozen=True)
class LayerGrouping:
    group_of: Tuple[int, ...]  # layer index -> group index, group 0 most important
    g: int

    def members(self, group: int) -> Tuple[int, ...]:
        return tuple(k for k, owner in enumerate(self.group_of) if owner == group)


def top_eigenvalue(
    hvp_oracle: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = 1e-3,
    max_iters: int = 300,
    rng: Optional[np.random.Generator] = None,
) -> EigenEstimate:
    """
    Power iteration for the largest-magnitude eigenvalue of a symmetric operator.

    Stops when successive |Rayleigh quotient| values differ by at most
    tol * max(1, |lambda|), or after max_iters products (flagged non-converged).
    """
    if dim < 1:
        raise ConfigError(f"power iteration needs dim >= 1, got {dim}")
    if tol <= 0:
        raise ConfigError(f"power iteration needs tol > 0, got {tol}")
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    previous = None
    value = 0.0
    for it in range(1, max_iters + 1):
        hv = np.asarray(hvp_oracle(v), dtype=np.float64)
        value = float(v @ hv)
        if not np.isfinite(value):
            raise NumericError(f"non-finite Rayleigh quotient at iteration {it}")
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            return EigenEstimate(0.0, it, True)
        if previous is not None and abs(abs(value) - abs(previous)) <= tol * max(1.0, abs(value)):
            return EigenEstimate(value, it, True)
        previous = value
        v = hv / norm
    return EigenEstimate(value, max_iters, False)


def importance_weights(eigenvalues: Sequence[float], round_computed: int = 0, **extra) -> LayerImportance:
    """Clamp negative estimates to 0 and normalize to sum 1 (uniform when all are 0)."""
    if len(eigenvalues) < 1:
        raise ConfigError("importance needs at least one layer")
    clamped = np.maximum(np.asarray(eigenvalues, dtype=np.float64), 0.0)
    total = clamped.sum()
    if total > 0:
        weights = clamped / total
    else:
        weights = np.full(len(clamped), 1.0 / len(clamped))
    return LayerImportance(
        tuple(float(e) for e in eigenvalues), tuple(float(w) for w in weights), round_computed, **extra
    )


def _layer_eigenvalue(model, batch, layer, tol, max_iters, seed, round_index) -> EigenEstimate:
    oracle = partial(hvp, model, batch, layer_mask=[layer])
    rng = stream(seed, Purpose.HESSIAN, round_index, layer)
    return top_eigenvalue(oracle, model.layers[layer].params.size, tol, max_iters, rng)


def layer_importance(
    model: LayeredModel,
    batch: Dataset,
    seed: int,
    round_index: int = 0,
    tol: float = 1e-3,
    max_iters: int = 300,
    n_jobs: int = 1,
) -> LayerImportance:
    """
    Estimate H_k for every layer on one batch and normalize into importance weights.

    Layers are independent, so they run through joblib when n_jobs != 1; each layer
    draws its start vector from its own seeded stream.
    """
    if n_jobs == 1:
        estimates = [
            _layer_eigenvalue(model, batch, k, tol, max_iters, seed, round_index) for k in range(len(model.layers))
        ]
    else:
        estimates = Parallel(n_jobs=n_jobs)(
            delayed(_layer_eigenvalue)(model, batch, k, tol, max_iters, seed, round_index)
            for k in range(len(model.layers))
        )
    for layer, estimate in zip(model.layers, estimates):
        if not estimate.converged:
            logger.warning(f"Power iteration for layer {layer.name} did not converge in {estimate.iters} iterations")
    importance = importance_weights(
        [e.value for e in estimates],
        round_index,
        hvp_calls=sum(e.iters for e in estimates),
        converged=tuple(e.converged for e in estimates),
    )
    logger.info(
        f"Layer importance at round {round_index}: "
        + ", ".join(f"{layer.name}={w:.3f}" for layer, w in zip(model.layers, importance.weights))
        + f" ({importance.hvp_calls} HVPs, {importance.gradient_evaluations} extra gradient evaluations)"
    )
    return importance


def group_layers(importance: LayerImportance, g: int) -> LayerGrouping:
    """
    Partition layers into g groups of near-equal size along descending importance.

    Ties in weight are broken by layer index; the first (l mod g) groups, i.e. the
    most important ones, receive the extra layers.
    """
    l = len(importance.weights)
    if not 1 <= g <= l:
        raise ConfigError(f"group count must be within 1..{l}, got {g}")
    order = sorted(range(l), key=lambda k: (-importance.weights[k], k))
    base, extra = divmod(l, g)
    group_of = [0] * l
    position = 0
    for group in range(g):
        size = base + (1 if group < extra else 0)
        for k in order[position : position + size]:
            group_of[k] = group
        position += size
    return LayerGrouping(tuple(group_of), g)
