"""Round latency: BPSK downlink broadcast, local computing and per-layer M-PSK uplink."""
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from flsim.errors import ConfigError, SchemaError


class ComputeConfig(BaseModel):
    """Local computing model T_c = V C / f."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    samples: Optional[int] = Field(default=None, gt=0, description="V, training samples; None = shard size")
    cycles_per_sample: float = Field(default=1e6, gt=0, description="C")
    clock_hz: float = Field(default=1e9, gt=0, description="f")

    def resolved(self, shard_size: int) -> "ComputeConfig":
        """Fill in V from the client's shard size when the config leaves it open."""
        if self.samples is not None:
            return self
        return self.model_copy(update={"samples": shard_size})


@dataclass(frozen=True)
class ModulationPlan:
    levels: tuple  # M^k per layer, schema order

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class LatencyBreakdown:
    T_d: float
    T_c: float
    T_u: float
    T_round: float = field(init=False)

    def __post_init__(self):
        if min(self.T_d, self.T_c, self.T_u) < 0:
            raise ValueError(f"negative latency component: T_d={self.T_d}, T_c={self.T_c}, T_u={self.T_u}")
        object.__setattr__(self, "T_round", self.T_d + self.T_c + self.T_u)


def downlink_latency(D: int, n_bits: int, downlink_bandwidth: float) -> float:
    """T_d = D N / (2 B_d)."""
    return D * n_bits / (2.0 * downlink_bandwidth)


def layer_uplink_latency(D_k: int, n_bits: int, uplink_bandwidth: float, M: int) -> float:
    return D_k * n_bits / (2.0 * uplink_bandwidth * math.log2(M))


def uplink_latency(sizes: Sequence[int], plan: ModulationPlan, n_bits: int, uplink_bandwidth: float) -> float:
    """T_u = sum_k D_k N / (2 B_u log2 M^k) for one client."""
    if len(sizes) != len(plan.levels):
        raise SchemaError(f"plan covers {len(plan.levels)} layers, model has {len(sizes)}")
    return sum(layer_uplink_latency(d, n_bits, uplink_bandwidth, M) for d, M in zip(sizes, plan.levels))


def compute_latency(cc: ComputeConfig) -> float:
    """T_c = V C / f."""
    if cc.samples is None:
        raise ConfigError("compute latency needs the sample count V")
    return cc.samples * cc.cycles_per_sample / cc.clock_hz


def round_latency(
    sizes: Sequence[int],
    plans: Sequence[ModulationPlan],
    n_bits: int,
    uplink_bandwidth: float,
    downlink_bandwidth: float,
    computes: Sequence[ComputeConfig],
) -> LatencyBreakdown:
    """
    Latency of one synchronous round.

    Clients upload in parallel on their own OFDMA bandwidth, so the slowest client
    sets T_u; likewise the slowest local computation sets T_c.
    """
    if not plans:
        raise SchemaError("round latency needs at least one client plan")
    return LatencyBreakdown(
        T_d=downlink_latency(sum(sizes), n_bits, downlink_bandwidth),
        T_c=max(compute_latency(cc) for cc in computes),
        T_u=max(uplink_latency(sizes, plan, n_bits, uplink_bandwidth) for plan in plans),
    )


def accumulate(rounds: Iterable[LatencyBreakdown]) -> float:
    """Total latency over rounds (sum of T_round)."""
    return sum((r.T_round for r in rounds), 0.0)


def running_totals(rounds: Iterable[LatencyBreakdown]) -> List[float]:
    totals, running = [], 0.0
    for r in rounds:
        running += r.T_round
        totals.append(running)
    return totals
