"""
Exact unsigned k-bit multipliers used to seed evolution.

Partial products are a_j AND b_i (weight i + j); primary input j is a_j and
input k + j is b_j. Adders are built from the seven-gate library:
  half adder   s = XOR(x, y)             c = AND(x, y)
  full adder   s = XOR(XOR(x, y), z)     c = one of the carry styles below

Kinds:
  ripple-carry-array   rows accumulated with ripple-carry adders
  carry-save-array-1   carry-save array, ripple-carry vector merge
  carry-save-array-2   carry-save array with NAND-NAND full-adder carries
  wallace-1            Wallace column reduction, ripple-carry merge
  wallace-2            Dadda column reduction, ripple-carry merge
  wallace-3            Wallace reduction, XNOR sums and NAND majority carries
"""

import logging

import numpy as np

from src.cgp import N_FUNCS, Chromosome, CircuitParams, Gate
from src.models import ChromosomeError

logger = logging.getLogger(__name__)

SEED_KINDS = (
    "ripple-carry-array",
    "carry-save-array-1",
    "carry-save-array-2",
    "wallace-1",
    "wallace-2",
    "wallace-3",
)

# Filler nodes after the netlist come from a fixed stream unless an rng is given.
FILLER_SEED = 20240917


class NetlistBuilder:
    """Appends gates in topological order and hands back their node IDs."""

    def __init__(self, bits: int, carry: str = "and-or", sums: str = "xor"):
        self.bits = bits
        self.n_i = 2 * bits
        self.carry = carry
        self.sums = sums
        self.nodes: list[tuple[int, int, int]] = []

    def gate(self, func: Gate, x: int, y: int | None = None) -> int:
        self.nodes.append((x, x if y is None else y, int(func)))
        return self.n_i + len(self.nodes) - 1

    def partial_product(self, i: int, j: int) -> int:
        return self.gate(Gate.AND, j, self.bits + i)

    def half_adder(self, x: int, y: int) -> tuple[int, int]:
        return self.gate(Gate.XOR, x, y), self.gate(Gate.AND, x, y)

    def full_adder(self, x: int, y: int, z: int) -> tuple[int, int]:
        if self.sums == "xnor":
            # XNOR(XNOR(x, y), z) == x ^ y ^ z; t is NOT(x ^ y), so carries use OR(x, y)
            t = self.gate(Gate.XNOR, x, y)
            s = self.gate(Gate.XNOR, t, z)
            propagate = None
        else:
            t = self.gate(Gate.XOR, x, y)
            s = self.gate(Gate.XOR, t, z)
            propagate = t

        if self.carry == "and-or":
            p = propagate if propagate is not None else self.gate(Gate.OR, x, y)
            c = self.gate(Gate.OR, self.gate(Gate.AND, x, y), self.gate(Gate.AND, p, z))
        elif self.carry == "nand":
            p = propagate if propagate is not None else self.gate(Gate.OR, x, y)
            c = self.gate(Gate.NAND, self.gate(Gate.NAND, x, y), self.gate(Gate.NAND, p, z))
        elif self.carry == "majority-nand":
            either = self.gate(Gate.OR, x, y)
            c = self.gate(Gate.NAND, self.gate(Gate.NAND, x, y), self.gate(Gate.NAND, either, z))
        else:
            raise ChromosomeError(f"unknown carry style {self.carry!r}")
        return s, c

    def add_bits(self, bits: list[int]) -> tuple[int, int | None]:
        """Sum of one to three same-weight bits as (sum, carry)."""
        if len(bits) == 1:
            return bits[0], None
        if len(bits) == 2:
            return self.half_adder(*bits)
        return self.full_adder(*bits)

    def ripple_merge(self, columns: list[list[int]]) -> list[int]:
        """Collapse columns of at most two bits into one bit per weight."""
        out = []
        carry = None
        for w, col in enumerate(columns):
            bits = list(col) + ([carry] if carry is not None else [])
            if not bits:
                raise ChromosomeError(f"column {w} of the product is empty")
            s, carry = self.add_bits(bits)
            out.append(s)
        return out   # the carry out of the top column is always zero

    def partial_product_columns(self) -> list[list[int]]:
        k = self.bits
        columns: list[list[int]] = [[] for _ in range(2 * k)]
        for i in range(k):
            for j in range(k):
                columns[i + j].append(self.partial_product(i, j))
        return columns


# ── Architectures ─────────────────────────────────────────────────────────────

def _ripple_carry_array(nb: NetlistBuilder) -> list[int]:
    k = nb.bits
    first = [nb.partial_product(0, j) for j in range(k)]
    product = [first[0]]
    acc = first[1:]
    for i in range(1, k):
        row = [nb.partial_product(i, j) for j in range(k)]
        res = []
        carry = None
        for j in range(k):
            bits = [row[j]]
            if j < len(acc):
                bits.append(acc[j])
            if carry is not None:
                bits.append(carry)
            s, carry = nb.add_bits(bits)
            res.append(s)
        product.append(res[0])
        acc = res[1:] + ([carry] if carry is not None else [])
    return product + acc


def _carry_save_array(nb: NetlistBuilder) -> list[int]:
    k = nb.bits
    sums = {j: nb.partial_product(0, j) for j in range(k)}
    carries: dict[int, int] = {}
    for i in range(1, k):
        new_sums = {w: s for w, s in sums.items() if w < i}
        new_carries: dict[int, int] = {}
        for j in range(k):
            w = i + j
            bits = [nb.partial_product(i, j)]
            if w in sums:
                bits.append(sums[w])
            if w in carries:
                bits.append(carries[w])
            new_sums[w], c = nb.add_bits(bits)
            if c is not None:
                new_carries[w + 1] = c
        sums, carries = new_sums, new_carries
    columns = [
        [b for b in (sums.get(w), carries.get(w)) if b is not None]
        for w in range(2 * k)
    ]
    return nb.ripple_merge(columns)


def _wallace_stage(nb: NetlistBuilder, columns: list[list[int]]) -> list[list[int]]:
    nxt: list[list[int]] = [[] for _ in columns]
    for w, col in enumerate(columns):
        i = 0
        while len(col) - i >= 2:
            take = 3 if len(col) - i >= 3 else 2
            s, c = nb.add_bits(col[i:i + take])
            i += take
            nxt[w].append(s)
            if w + 1 < len(columns):
                nxt[w + 1].append(c)
        nxt[w].extend(col[i:])
    return nxt


def _wallace(nb: NetlistBuilder) -> list[int]:
    columns = nb.partial_product_columns()
    while max(len(c) for c in columns) > 2:
        columns = _wallace_stage(nb, columns)
    return nb.ripple_merge(columns)


def _dadda(nb: NetlistBuilder) -> list[int]:
    columns = nb.partial_product_columns()
    tallest = max(len(c) for c in columns)
    heights = [2]
    while heights[-1] < tallest:
        heights.append(heights[-1] * 3 // 2)
    for target in [d for d in reversed(heights) if d < tallest]:
        nxt: list[list[int]] = [[] for _ in columns]
        for w, col in enumerate(columns):
            pool = list(col)
            height = len(pool) + len(nxt[w])
            while height > target and len(pool) >= 2:
                take = 3 if height - target >= 2 and len(pool) >= 3 else 2
                s, c = nb.add_bits(pool[:take])
                del pool[:take]
                height -= take - 1
                nxt[w].append(s)
                if w + 1 < len(columns):
                    nxt[w + 1].append(c)
            nxt[w].extend(pool)
        columns = nxt
    while max(len(c) for c in columns) > 2:
        columns = _wallace_stage(nb, columns)
    return nb.ripple_merge(columns)


_ARCHITECTURES = {
    "ripple-carry-array": (_ripple_carry_array, "and-or", "xor"),
    "carry-save-array-1": (_carry_save_array, "and-or", "xor"),
    "carry-save-array-2": (_carry_save_array, "nand", "xor"),
    "wallace-1": (_wallace, "and-or", "xor"),
    "wallace-2": (_dadda, "and-or", "xor"),
    "wallace-3": (_wallace, "majority-nand", "xnor"),
}


def seed_multiplier(
    kind: str,
    bits: int,
    n_c: int | None = None,
    rng: np.random.Generator | None = None,
) -> Chromosome:
    """
    Exact k-bit multiplier with explicit output genes. The netlist occupies
    the first positions; the remaining columns hold random inactive filler.
    """
    if kind not in _ARCHITECTURES:
        raise ChromosomeError(f"unknown seed kind {kind!r}; choose from {', '.join(SEED_KINDS)}")
    if bits < 2:
        raise ChromosomeError(f"seed multipliers need at least 2 bits, got {bits}")
    build, carry, sums = _ARCHITECTURES[kind]
    params = CircuitParams.multiplier(bits, n_c)
    nb = NetlistBuilder(bits, carry=carry, sums=sums)
    product = build(nb)
    used = len(nb.nodes)
    if used > params.n_c:
        raise ChromosomeError(f"{kind} for {bits} bits needs {used} nodes, only {params.n_c} columns")

    rng = rng or np.random.default_rng(FILLER_SEED)
    genes = np.empty((params.n_c, 3), dtype=np.int64)
    genes[:used] = nb.nodes
    for p in range(used, params.n_c):
        limit = params.n_i + p
        genes[p] = (rng.integers(limit), rng.integers(limit), rng.integers(N_FUNCS))
    logger.debug("Seed %s/%d-bit: %d gates, %d filler", kind, bits, used, params.n_c - used)
    return Chromosome(params, genes, tuple(product))
