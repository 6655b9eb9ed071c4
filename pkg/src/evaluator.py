"""
Exhaustive bit-parallel evaluation of candidate multipliers.

Every signal is a row of uint64 words; bit b of word w holds the signal value
for input assignment 64*w + b. Assignment i sets primary input j to bit j of
i, so for a k-bit multiplier a = i mod 2^k and b = i >> k.

Fitness is evaluated in stages: (1) area against the parent, (2) the rows
with a zero operand, (3) all remaining rows. A circuit rejected early never
pays for the later stages; the returned value equals an unstaged evaluation.
"""

import logging
import math
from functools import lru_cache

import numpy as np

from src.cgp import Chromosome, Gate, circuit_area
from src.models import ErrorMetrics

logger = logging.getLogger(__name__)

WORD_BITS = 64
ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


# ── Packed input vectors ──────────────────────────────────────────────────────

def pack_rows(rows: np.ndarray, n_i: int) -> np.ndarray:
    """Primary-input lanes (n_i, words) for an arbitrary list of assignments."""
    rows = np.asarray(rows, dtype=np.int64)
    words = max(1, -(-rows.size // WORD_BITS))
    bits = ((rows[None, :] >> np.arange(n_i)[:, None]) & 1).astype(np.uint8)
    padded = np.zeros((n_i, words * WORD_BITS), dtype=np.uint8)
    padded[:, :rows.size] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


@lru_cache(maxsize=None)
def exhaustive_lanes(n_i: int) -> np.ndarray:
    """Standard binary counting pattern over all 2^n_i assignments."""
    lanes = pack_rows(np.arange(1 << n_i), n_i)
    lanes.setflags(write=False)
    return lanes


def unpack_outputs(lanes: np.ndarray, count: int) -> np.ndarray:
    """Decimal value of the output bits for each of the first `count` assignments."""
    n_o = lanes.shape[0]
    bits = np.unpackbits(
        np.ascontiguousarray(lanes.astype("<u8")).view(np.uint8), axis=1, bitorder="little"
    )[:, :count].astype(np.int64)
    weights = np.left_shift(np.int64(1), np.arange(n_o, dtype=np.int64))
    return weights @ bits


# ── Simulation ────────────────────────────────────────────────────────────────

def simulate_lanes(c: Chromosome, inputs: np.ndarray) -> np.ndarray:
    """Propagate packed input lanes through the active nodes; returns output lanes."""
    n_i = c.params.n_i
    words = inputs.shape[1]
    values: dict[int, np.ndarray] = {j: inputs[j] for j in range(n_i)}
    rows = c.rows
    for p in c.active:
        in1, in2, func = rows[p]
        x = values[in1]
        if func == Gate.INV:
            out = ~x
        else:
            y = values[in2]
            if func == Gate.AND:
                out = x & y
            elif func == Gate.OR:
                out = x | y
            elif func == Gate.XOR:
                out = x ^ y
            elif func == Gate.NAND:
                out = ~(x & y)
            elif func == Gate.NOR:
                out = ~(x | y)
            else:
                out = ~(x ^ y)
        values[n_i + p] = out
    result = np.empty((c.params.n_o, words), dtype=np.uint64)
    for i, o in enumerate(c.output_ids()):
        result[i] = values[o]
    return result


def simulate_rows(c: Chromosome, rows: np.ndarray) -> np.ndarray:
    lanes = simulate_lanes(c, pack_rows(rows, c.params.n_i))
    return unpack_outputs(lanes, len(rows))


def simulate_exhaustive(c: Chromosome) -> np.ndarray:
    """Decimal output value for every one of the 2^n_i input assignments."""
    n_i = c.params.n_i
    lanes = simulate_lanes(c, exhaustive_lanes(n_i))
    return unpack_outputs(lanes, 1 << n_i)


# ── Reference tables and metrics ──────────────────────────────────────────────

@lru_cache(maxsize=None)
def golden_products(bits: int) -> np.ndarray:
    """Exact product a*b for every assignment i = (b << k) | a."""
    if not 2 <= bits <= 8:
        raise ValueError(f"bit width must be in 2..8, got {bits}")
    i = np.arange(1 << (2 * bits), dtype=np.int64)
    mask = (1 << bits) - 1
    table = (i & mask) * (i >> bits)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def zero_rows(bits: int) -> np.ndarray:
    """Assignments where a = 0 or b = 0 (2·2^k − 1 rows), ascending."""
    i = np.arange(1 << (2 * bits), dtype=np.int64)
    mask = (1 << bits) - 1
    rows = i[((i & mask) == 0) | ((i >> bits) == 0)]
    rows.setflags(write=False)
    return rows


@lru_cache(maxsize=None)
def nonzero_rows(bits: int) -> np.ndarray:
    i = np.arange(1 << (2 * bits), dtype=np.int64)
    mask = (1 << bits) - 1
    rows = i[((i & mask) != 0) & ((i >> bits) != 0)]
    rows.setflags(write=False)
    return rows


def error_metrics(outputs: np.ndarray, golden: np.ndarray, bits: int) -> ErrorMetrics:
    diff = np.abs(np.asarray(outputs, dtype=np.int64) - golden)
    zr = zero_rows(bits)
    return ErrorMetrics(
        wce=int(diff.max()),
        mae=float(int(diff.sum()) / (1 << (2 * bits))),
        wce_zr=int(diff[zr].max()),
    )


def epsilon_abs(epsilon_pct: float, bits: int) -> int:
    """Absolute WCE threshold: floor(ε% of the largest output value 2^2k − 1)."""
    if not 0 < epsilon_pct <= 100:
        raise ValueError(f"epsilon must be in (0, 100] percent, got {epsilon_pct}")
    # micro-percent integer times (2^2k − 1), floored
    scaled = round(epsilon_pct * 1_000_000)
    return scaled * ((1 << (2 * bits)) - 1) // 100_000_000


# ── Evaluator ─────────────────────────────────────────────────────────────────

class MultiplierEvaluator:
    """
    Cached per-width tables plus the staged fitness "area if
    WCE ≤ ε and WCE_zr = 0, else infinity". Counts simulated rows so stage
    savings are measurable.
    """

    def __init__(self, bits: int):
        self.bits = bits
        self.golden = golden_products(bits)
        self.zero_rows = zero_rows(bits)
        self.nonzero_rows = nonzero_rows(bits)
        n_i = 2 * bits
        self._zero_lanes = pack_rows(self.zero_rows, n_i)
        self._nonzero_lanes = pack_rows(self.nonzero_rows, n_i)
        self.rows_simulated = 0
        self.evaluations = 0

    def _check(self, c: Chromosome) -> None:
        if c.params.bits != self.bits:
            raise ValueError(f"evaluator is for {self.bits}-bit multipliers, got {c.params.bits}")

    def outputs(self, c: Chromosome) -> np.ndarray:
        self._check(c)
        self.rows_simulated += self.golden.size
        return simulate_exhaustive(c)

    def metrics(self, c: Chromosome) -> ErrorMetrics:
        return error_metrics(self.outputs(c), self.golden, self.bits)

    def fitness(self, c: Chromosome, eps_abs: int, parent_area: float | None = None) -> float:
        self._check(c)
        self.evaluations += 1
        area = circuit_area(c)
        if parent_area is not None and area > parent_area:
            return math.inf

        zero_out = unpack_outputs(simulate_lanes(c, self._zero_lanes), self.zero_rows.size)
        self.rows_simulated += self.zero_rows.size
        # every zero-operand product is 0
        if np.any(zero_out != 0):
            return math.inf

        rest = unpack_outputs(simulate_lanes(c, self._nonzero_lanes), self.nonzero_rows.size)
        self.rows_simulated += self.nonzero_rows.size
        if int(np.abs(rest - self.golden[self.nonzero_rows]).max()) > eps_abs:
            return math.inf
        return area

    def fitness_unstaged(self, c: Chromosome, eps_abs: int) -> float:
        m = self.metrics(c)
        if m.wce <= eps_abs and m.wce_zr == 0:
            return circuit_area(c)
        return math.inf


@lru_cache(maxsize=None)
def evaluator_for(bits: int) -> MultiplierEvaluator:
    return MultiplierEvaluator(bits)


def fitness(c: Chromosome, eps_abs: int, parent_area: float | None = None) -> float:
    return evaluator_for(c.params.bits).fitness(c, eps_abs, parent_area)
