"""
Synchronous federated learning over a noisy uplink.

One round: broadcast the global model (noiseless downlink), every client runs local
SGD, picks its modulation plan from the configured scheme, quantizes each layer of
its update and sends it through the bit-flip channel; the server adds the mean of
the received updates to the global model.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from flsim.config import ExperimentConfig, Scheme
from flsim.datasets import Dataset, gen_synthetic, load_mnist_idx, split_iid, take, train_test_split
from flsim.errors import NumericError
from flsim.hessian import LayerGrouping, LayerImportance, group_layers, layer_importance
from flsim.latency import LatencyBreakdown, round_latency
from flsim.learner import (
    Architecture,
    LayeredModel,
    forward,
    init_model,
    lenet_300_100,
    local_train,
    mlp,
    mlp_small,
    plain_cnn,
    small_cnn,
)
from flsim.modem import ber, dequantize, expected_sq_error, quantize_update, transmit
from flsim.planner import (
    PlannerInputs,
    ScoredPlan,
    plan_am,
    plan_enumerate,
    plan_fixed,
    plan_grouped,
    round_objective,
)
from flsim.seeding import Purpose, stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentData:
    shards: Tuple[Dataset, ...]
    test_set: Dataset
    train_probe: Dataset  # fixed training subset the reported train loss is measured on


@dataclass(frozen=True)
class LayerReport:
    name: str
    level: int
    weight: float
    size: int
    step: float
    ber: float
    predicted_error: float  # expected ||received - sent||^2 at this BER
    realized_error: float  # what the channel actually delivered


@dataclass(frozen=True)
class PlanLogEntry:
    round: int
    client: int
    layers: Tuple[LayerReport, ...]
    numerator: float
    denominator: float
    score: float

    @property
    def levels(self) -> Tuple[int, ...]:
        return tuple(layer.level for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "client": self.client,
            "layers": [
                {
                    "name": layer.name,
                    "M": layer.level,
                    "weight": layer.weight,
                    "D_k": layer.size,
                    "step": layer.step,
                    "ber": layer.ber,
                    "predicted_error": layer.predicted_error,
                    "realized_error": layer.realized_error,
                }
                for layer in self.layers
            ],
            "numerator": self.numerator,
            "denominator": self.denominator,
            "score": self.score,
        }


@dataclass(frozen=True)
class RoundRecord:
    round: int
    train_loss: Optional[float]
    test_accuracy: Optional[float]
    latency: LatencyBreakdown
    cumulative_latency: float
    plans: Tuple[PlanLogEntry, ...]  # one per client, client order
    realized_objective: Optional[float]  # (loss(w_0) - loss(w_r)) / cumulative latency
    scheme: str
    seed: int
    gradient_evaluations: int = 0
    hvp_calls: int = 0
    error: Optional[str] = None  # set only on the record of an aborted round

    @property
    def evaluated(self) -> bool:
        return self.test_accuracy is not None


@dataclass
class SimulationState:
    model: LayeredModel
    data: ExperimentData
    round_index: int = 0
    importance: Optional[LayerImportance] = None
    cumulative_latency: float = 0.0
    initial_loss: float = math.nan
    initial_accuracy: float = math.nan


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: List[RoundRecord]
    initial_loss: float
    initial_accuracy: float
    layer_names: Tuple[str, ...]
    layer_sizes: Tuple[int, ...]
    importance_history: List[LayerImportance] = field(default_factory=list)
    aborted: Optional[str] = None

    @property
    def plan_log(self) -> List[PlanLogEntry]:
        return [entry for record in self.records for entry in record.plans]


@dataclass(frozen=True, eq=False)
class _ClientUpdate:
    received: Tuple[np.ndarray, ...]
    scored: ScoredPlan
    log: PlanLogEntry
    steps: int


# -- setup -------------------------------------------------------------------------


def build_architecture(config: ExperimentConfig, dims: int, classes: int) -> Architecture:
    spec = config.model
    if spec.name == "mlp_small":
        return mlp_small(dims, classes, spec.activation)
    if spec.name == "lenet_300_100":
        return lenet_300_100(dims, classes, spec.activation)
    if spec.name == "small_cnn":
        return small_cnn(dims, classes, activation=spec.activation)
    if spec.name == "plain_cnn":
        return plain_cnn(dims, classes, spec.activation)
    return mlp([dims, *spec.hidden, classes], "mlp", spec.activation)


def prepare_data(config: ExperimentConfig) -> ExperimentData:
    """Load or generate the task, subsample it and split it i.i.d. across clients."""
    ds = config.dataset
    if ds.kind == "idx":
        train = load_mnist_idx(ds.train_images, ds.train_labels)
        test = load_mnist_idx(ds.test_images, ds.test_labels)
    else:
        full = gen_synthetic(ds.classes, ds.dims, ds.train_size + ds.test_size, config.seed, ds.margin, ds.noise)
        train, test = train_test_split(full, ds.test_size)
    if ds.samples_per_client is not None:
        train = take(train, ds.samples_per_client * config.n_clients, config.seed)
    if ds.test_samples is not None:
        test = take(test, ds.test_samples, config.seed + 1)
    shards = split_iid(train, config.n_clients, config.seed)
    probe = take(train, config.train_eval_samples, config.seed + 2)
    logger.info(
        f"Data ready: {len(train)} training examples over {config.n_clients} clients, {len(test)} test examples"
    )
    return ExperimentData(tuple(shards), test, probe)


def init_state(config: ExperimentConfig, data: ExperimentData) -> SimulationState:
    architecture = build_architecture(config, data.test_set.dims, data.test_set.num_classes)
    model = init_model(architecture, stream(config.seed, Purpose.INIT))
    state = SimulationState(model, data)
    state.initial_loss = forward(model, data.train_probe).loss
    state.initial_accuracy = evaluate(model, data.test_set)
    return state


# -- one client --------------------------------------------------------------------


def select_plan(
    scheme: Scheme, inputs: PlannerInputs, grouping: Optional[LayerGrouping], max_layers: int
) -> ScoredPlan:
    l = len(inputs.layer_sizes)
    if scheme.kind == "fixed":
        return round_objective(plan_fixed(scheme.param, l, inputs.channel.candidate_levels), inputs)
    if scheme.kind == "am":
        return plan_am(inputs)
    if scheme.kind == "grouped" or l > max_layers:
        return plan_grouped(inputs, grouping)
    return plan_enumerate(inputs, max_layers)


def client_update(
    model: LayeredModel,
    shard: Dataset,
    client_id: int,
    round_index: int,
    importance: LayerImportance,
    grouping: Optional[LayerGrouping],
    config: ExperimentConfig,
) -> _ClientUpdate:
    """Local training, plan selection and the noisy upload of one client."""
    channel = config.channel
    try:
        _, stats = local_train(model, shard, config.hp, stream(config.seed, Purpose.TRAIN, round_index, client_id))
    except NumericError as exc:
        raise NumericError(f"round {round_index}, client {client_id}: {exc}") from exc

    schema = model.schema
    if config.ideal_uplink:
        quantized = None
        steps = tuple(0.0 for _ in schema.sizes)
    else:
        quantized = [quantize_update(delta, channel.n_bits) for delta in stats.per_layer_update]
        steps = tuple(q.step for q in quantized)

    inputs = PlannerInputs(
        grad_sq_sum=stats.sq_norm_sum,
        importance=importance,
        layer_sizes=schema.sizes,
        layer_steps=steps,
        hp=config.hp,
        channel=channel,
        compute=config.compute.resolved(len(shard)),
    )
    scored = select_plan(config.parsed_scheme, inputs, grouping, config.max_enumeration_layers)

    received, reports = [], []
    for k, (name, size, level) in enumerate(zip(schema.names, schema.sizes, scored.plan.levels)):
        if quantized is None:
            b, predicted, realized = 0.0, 0.0, 0.0
            received.append(stats.per_layer_update[k])
        else:
            b = ber(level, channel.es_n0, channel.candidate_levels)
            sent = quantized[k]
            arrived = transmit(sent, b, stream(config.seed, Purpose.CHANNEL, round_index, client_id, k))
            values = dequantize(arrived)
            predicted = expected_sq_error(size, sent.step, channel.n_bits, b)
            realized = float(np.sum((values - dequantize(sent)) ** 2))
            received.append(values)
        reports.append(
            LayerReport(name, level, importance.weights[k], size, steps[k], b, predicted, realized)
        )
    log = PlanLogEntry(round_index, client_id, tuple(reports), scored.numerator, scored.denominator, scored.score)
    logger.debug(f"round {round_index} client {client_id}: plan {list(scored.plan.levels)} score {scored.score:.6g}")
    return _ClientUpdate(tuple(received), scored, log, stats.steps)


# -- rounds ------------------------------------------------------------------------


def evaluate(model: LayeredModel, test_set: Dataset) -> float:
    """Fraction of argmax-correct predictions."""
    logits = forward(model, test_set).logits
    return float(np.mean(np.argmax(logits, axis=1) == test_set.y))


def aggregate(model: LayeredModel, updates: Sequence[Sequence[np.ndarray]]) -> LayeredModel:
    """w + (1/n) sum_i update_i, summed in client order."""
    totals = [np.zeros_like(layer.params) for layer in model.layers]
    for update in updates:
        for total, part in zip(totals, update):
            total += part
    return model.add([total / len(updates) for total in totals])


def _refresh_importance(state: SimulationState, config: ExperimentConfig) -> bool:
    r = state.round_index
    if state.importance is not None and r % config.importance_period != 0:
        return False
    reference = state.data.shards[0]
    batch = take(reference, config.importance_batch, config.seed, Purpose.HESSIAN)
    state.importance = layer_importance(
        state.model, batch, config.seed, r, config.power_tol, config.power_max_iters, config.workers
    )
    return True


def run_round(state: SimulationState, config: ExperimentConfig) -> RoundRecord:
    """
    Run one communication round, advance `state` and return the round's record.

    The test set is evaluated every `eval_every` rounds; other records carry None.
    """
    r = state.round_index
    refreshed = _refresh_importance(state, config)
    hvp_calls = state.importance.hvp_calls if refreshed else 0
    scheme = config.parsed_scheme
    l = len(state.model.layers)
    grouping = None
    if scheme.kind == "grouped" or (scheme.kind == "layerwise" and l > config.max_enumeration_layers):
        g = min(scheme.param if scheme.kind == "grouped" else config.groups, l)
        grouping = group_layers(state.importance, g)
        if scheme.kind == "layerwise" and r == 0:
            logger.warning(f"{l} layers exceed the enumeration budget; searching {g} importance groups instead")

    args = [
        (state.model, shard, i, r, state.importance, grouping, config) for i, shard in enumerate(state.data.shards)
    ]
    if config.workers == 1:
        updates = [client_update(*a) for a in args]
    else:
        updates = Parallel(n_jobs=config.workers)(delayed(client_update)(*a) for a in args)

    state.model = aggregate(state.model, [u.received for u in updates])
    schema = state.model.schema
    latency = round_latency(
        schema.sizes,
        [u.scored.plan for u in updates],
        config.channel.n_bits,
        config.channel.uplink_bandwidth,
        config.channel.downlink_bandwidth,
        [config.compute.resolved(len(shard)) for shard in state.data.shards],
    )
    state.cumulative_latency += latency.T_round
    state.round_index += 1

    train_loss = test_accuracy = objective = None
    if state.round_index % config.eval_every == 0 or state.round_index == config.rounds:
        train_loss = forward(state.model, state.data.train_probe).loss
        test_accuracy = evaluate(state.model, state.data.test_set)
        objective = (state.initial_loss - train_loss) / state.cumulative_latency
        logger.info(
            f"Round {r}: accuracy {test_accuracy:.4f}, train loss {train_loss:.4f}, "
            f"cumulative latency {state.cumulative_latency:.3f}s"
        )
    return RoundRecord(
        round=r,
        train_loss=train_loss,
        test_accuracy=test_accuracy,
        latency=latency,
        cumulative_latency=state.cumulative_latency,
        plans=tuple(u.log for u in updates),
        realized_objective=objective,
        scheme=config.scheme,
        seed=config.seed,
        gradient_evaluations=sum(u.steps for u in updates),
        hvp_calls=hvp_calls,
    )


def _diagnostic_record(state: SimulationState, config: ExperimentConfig, r: int, message: str) -> RoundRecord:
    return RoundRecord(
        round=r,
        train_loss=None,
        test_accuracy=None,
        latency=LatencyBreakdown(0.0, 0.0, 0.0),
        cumulative_latency=state.cumulative_latency,
        plans=(),
        realized_objective=None,
        scheme=config.scheme,
        seed=config.seed,
        error=message,
    )


def run_experiment(
    config: ExperimentConfig, data: Optional[ExperimentData] = None, progress: bool = False
) -> ExperimentResult:
    """
    Run up to `config.rounds` rounds, stopping at the first evaluation that reaches
    `config.target_accuracy` when one is set.
    A NumericError ends the run early: the failing round is kept as a record
    carrying the error and `aborted` holds the message.
    """
    data = data if data is not None else prepare_data(config)
    state = init_state(config, data)
    logger.info(
        f"Starting scheme {config.scheme}, seed {config.seed}: {config.rounds} rounds, "
        f"initial accuracy {state.initial_accuracy:.4f}"
    )
    result = ExperimentResult(
        config, [], state.initial_loss, state.initial_accuracy, state.model.schema.names, state.model.schema.sizes
    )
    for _ in tqdm(range(config.rounds), desc=f"{config.scheme} seed {config.seed}", disable=not progress):
        r = state.round_index
        try:
            record = run_round(state, config)
        except NumericError as exc:
            logger.error(f"Aborting {config.scheme} seed {config.seed} at round {r}: {str(exc)}")
            result.records.append(_diagnostic_record(state, config, r, str(exc)))
            result.aborted = str(exc)
            break
        if record.hvp_calls:
            result.importance_history.append(state.importance)
        result.records.append(record)
        target = config.target_accuracy
        if target is not None and record.evaluated and record.test_accuracy >= target:
            logger.info(f"Target accuracy {target} reached at round {record.round} after {record.cumulative_latency:.3f}s")
            break
    else:
        if config.target_accuracy is not None and config.rounds > 0:
            logger.warning(f"Target accuracy {config.target_accuracy} not reached in {config.rounds} rounds")
    return result


def latency_to_target(records: Sequence[RoundRecord], target: float) -> Optional[float]:
    """Cumulative latency at the first evaluated round with accuracy >= target."""
    for record in records:
        if record.evaluated and record.test_accuracy >= target:
            return record.cumulative_latency
    return None
