"""
M-PSK bit error rate, fixed-point serialization of layer updates and the bit-flip channel.

Updates travel as offset-binary codes: each layer is mapped onto 2^N - 1 uniform steps
between its minimum and maximum, the (v_min, step) pair is delivered error-free and
every code bit flips independently with the BER of the layer's modulation order.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.stats import norm

from flsim.errors import ConfigError, NumericError, SchemaError

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = (2, 4, 8, 16)


def _is_power_of_two(value: int) -> bool:
    return value >= 2 and value & (value - 1) == 0


class ChannelConfig(BaseModel):
    """Uplink/downlink channel settings shared by all clients."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    es_n0: float = Field(default=10.0, ge=0, description="linear symbol SNR Es/N0")
    uplink_bandwidth: float = Field(default=1e6, gt=0, description="B_u per client, Hz")
    downlink_bandwidth: float = Field(default=1e6, gt=0, description="B_d, Hz")
    n_bits: int = Field(default=16, ge=2, le=32, description="bits per parameter N")
    candidate_levels: Tuple[int, ...] = DEFAULT_LEVELS

    @field_validator("candidate_levels")
    @classmethod
    def _check_levels(cls, levels):
        if not levels:
            raise ValueError("candidate_levels must not be empty")
        for level in levels:
            if not _is_power_of_two(level):
                raise ValueError(f"modulation order {level} is not a power of two >= 2")
        if any(a >= b for a, b in zip(levels, levels[1:])):
            raise ValueError(f"candidate_levels must be strictly increasing, got {list(levels)}")
        return tuple(levels)


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    codes: np.ndarray  # uint64, each < 2**n_bits
    v_min: float
    step: float
    count: int
    n_bits: int


def q_function(x):
    """Gaussian tail probability Q(x) = P(Z > x)."""
    return norm.sf(x)


def ber(M: int, es_n0: float, candidate_levels: Optional[Sequence[int]] = None) -> float:
    """
    Bit error rate of Gray-coded M-PSK in AWGN, clamped to [0, 0.5].

    b = 2 / max(log2 M, 2) * sum_{i=1}^{max(M/4, 1)} Q(sqrt(2 Es/N0) sin((2i - 1) pi / M))
    """
    if candidate_levels is not None and M not in candidate_levels:
        raise ConfigError(f"modulation order {M} not in candidate levels {list(candidate_levels)}")
    if not _is_power_of_two(int(M)):
        raise ConfigError(f"unsupported modulation order {M}")
    if es_n0 < 0:
        raise ConfigError(f"Es/N0 must be >= 0, got {es_n0}")
    terms = np.arange(1, max(M // 4, 1) + 1)
    args = math.sqrt(2.0 * es_n0) * np.sin((2 * terms - 1) * math.pi / M)
    value = 2.0 / max(math.log2(M), 2.0) * float(np.sum(q_function(args)))
    return min(max(value, 0.0), 0.5)


def ber_table(es_n0_grid: Iterable[float], levels: Sequence[int] = DEFAULT_LEVELS) -> pd.DataFrame:
    """BER of every candidate level over a grid of linear Es/N0 values."""
    grid = [float(x) for x in es_n0_grid]
    table = pd.DataFrame({"es_n0": grid})
    table["es_n0_db"] = [10.0 * math.log10(x) if x > 0 else -math.inf for x in grid]
    for M in levels:
        table[f"ber_{M}psk"] = [ber(M, x) for x in grid]
    return table


def quantize_update(delta: np.ndarray, n_bits: int) -> QuantizedLayer:
    """
    Uniform offset-binary quantizer over [min(delta), max(delta)].

    Constant arrays get step 0 and all-zero codes, so they round-trip exactly.
    """
    delta = np.asarray(delta, dtype=np.float64).ravel()
    if delta.size == 0:
        raise SchemaError("cannot quantize an empty update")
    if not np.all(np.isfinite(delta)):
        raise NumericError("non-finite value in layer update")
    top = (1 << n_bits) - 1
    v_min = float(delta.min())
    step = (float(delta.max()) - v_min) / top
    if step == 0.0:
        codes = np.zeros(delta.size, dtype=np.uint64)
    else:
        codes = np.clip(np.rint((delta - v_min) / step), 0, top).astype(np.uint64)
    return QuantizedLayer(codes, v_min, step, delta.size, n_bits)


def dequantize(layer: QuantizedLayer) -> np.ndarray:
    return layer.v_min + layer.codes.astype(np.float64) * layer.step


def transmit(layer: QuantizedLayer, b: float, rng: np.random.Generator) -> QuantizedLayer:
    """Flip each of the count * n_bits code bits independently with probability b."""
    if not 0.0 <= b <= 0.5:
        raise ConfigError(f"bit error rate must lie in [0, 0.5], got {b}")
    codes = layer.codes.copy()
    if b > 0.0:
        for bit in range(layer.n_bits):
            flips = rng.random(layer.count) < b
            codes[flips] ^= np.uint64(1 << bit)
    return replace(layer, codes=codes)


def bit_flips(sent: QuantizedLayer, received: QuantizedLayer) -> int:
    return int(np.bitwise_count(sent.codes ^ received.codes).sum())


def expected_sq_error(D_k: int, step: float, n_bits: int, b: float) -> float:
    """
    E||received - sent||^2 for one layer under independent bit flips.

    Flipping bit j moves a value by +-2^j step; with uniformly distributed code bits
    the cross-bit terms cancel, leaving D_k * b * step^2 * sum_j 4^j.
    """
    return D_k * b * step * step * (4.0**n_bits - 1.0) / 3.0
