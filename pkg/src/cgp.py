"""
CGP genotype of a single-row, feed-forward gate-level circuit.

ID convention: primary inputs are 0..n_i-1, the node at position p has ID
n_i + p. Every node is three integers (in1, in2, func). A chromosome either
carries explicit output genes, or is in *transformer form*: no output genes,
output i is produced by the node at position n_c - n_o + i.

Text format:
    k n_i n_o n_c
    in1 in2 func        (n_c lines)
    o_0 o_1 ... o_{n_o-1}   (only when output genes are present)
"""

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property

import numpy as np

from src.models import ChromosomeError

logger = logging.getLogger(__name__)


# ── Gate library ──────────────────────────────────────────────────────────────

class Gate(IntEnum):
    INV = 0
    AND = 1
    OR = 2
    XOR = 3
    NAND = 4
    NOR = 5
    XNOR = 6

    @property
    def area(self) -> float:
        return GATE_AREA_CENTI[self] / 100.0


# Areas in hundredths of a square micrometre, so sums are exact integers.
GATE_AREA_CENTI = (140, 234, 234, 469, 187, 234, 469)
N_FUNCS = len(Gate)


def used_inputs(in1: int, in2: int, func: int) -> tuple[int, ...]:
    """Input IDs a node actually reads; INV ignores its second gene."""
    if func == Gate.INV:
        return (in1,)
    return (in1, in2)


# ── Types ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CircuitParams:
    n_i: int
    n_o: int
    n_c: int
    bits: int = 0   # k of a k-bit multiplier; 0 for any other circuit

    def __post_init__(self):
        if self.n_i < 1 or self.n_o < 1:
            raise ChromosomeError("a circuit needs at least one input and one output")
        if self.n_c < self.n_o:
            raise ChromosomeError(f"n_c={self.n_c} is smaller than n_o={self.n_o}")
        if self.bits and (self.n_i != 2 * self.bits or self.n_o != 2 * self.bits):
            raise ChromosomeError(f"a {self.bits}-bit multiplier needs n_i = n_o = {2 * self.bits}")

    @property
    def n_r(self) -> int:
        return 1

    @property
    def n_ids(self) -> int:
        return self.n_i + self.n_c

    @classmethod
    def multiplier(cls, bits: int, n_c: int | None = None) -> "CircuitParams":
        return cls(n_i=2 * bits, n_o=2 * bits, n_c=n_c or default_columns(bits), bits=bits)


def default_columns(bits: int) -> int:
    """Node budget scaled from the 600 columns used for 8-bit multipliers."""
    return max(math.ceil(600 * bits * bits / 64), 4 * bits)


@dataclass(frozen=True, eq=False)
class Chromosome:
    params: CircuitParams
    genes: np.ndarray                       # (n_c, 3) int64, read-only
    outputs: tuple[int, ...] | None = None  # None in transformer form

    def __post_init__(self):
        try:
            genes = np.array(self.genes, dtype=np.int64).reshape(self.params.n_c, 3)
        except ValueError as exc:
            raise ChromosomeError(f"expected {3 * self.params.n_c} node genes: {exc}") from None
        genes.setflags(write=False)
        object.__setattr__(self, "genes", genes)
        if self.outputs is not None:
            outputs = tuple(int(o) for o in self.outputs)
            if len(outputs) != self.params.n_o:
                raise ChromosomeError(f"expected {self.params.n_o} output genes, got {len(outputs)}")
            object.__setattr__(self, "outputs", outputs)

    @property
    def transformer_form(self) -> bool:
        return self.outputs is None

    def output_ids(self) -> tuple[int, ...]:
        if self.outputs is not None:
            return self.outputs
        p = self.params
        return tuple(p.n_i + p.n_c - p.n_o + i for i in range(p.n_o))

    @cached_property
    def rows(self) -> list[tuple[int, int, int]]:
        return [tuple(r) for r in self.genes.tolist()]

    @cached_property
    def active(self) -> tuple[int, ...]:
        return _decode_active(self)

    def gene_vector(self) -> np.ndarray:
        flat = self.genes.reshape(-1)
        if self.outputs is None:
            return flat.copy()
        return np.concatenate([flat, np.array(self.outputs, dtype=np.int64)])

    def replace_gene(self, position: int, slot: int, value: int) -> "Chromosome":
        genes = self.genes.copy()
        genes[position, slot] = value
        return Chromosome(self.params, genes, self.outputs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Chromosome):
            return NotImplemented
        return (
            self.params == other.params
            and self.outputs == other.outputs
            and np.array_equal(self.genes, other.genes)
        )

    def __hash__(self) -> int:
        return hash((self.params, self.outputs, self.genes.tobytes()))


@dataclass(frozen=True)
class ValidationReport:
    gene_index: int | None = None
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.gene_index is None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "ok" if self.ok else f"gene {self.gene_index}: {self.reason}"


# ── Decoding ──────────────────────────────────────────────────────────────────

def _decode_active(c: Chromosome) -> tuple[int, ...]:
    n_i, n_c = c.params.n_i, c.params.n_c
    active = [False] * n_c
    for o in c.output_ids():
        if o >= n_i:
            active[o - n_i] = True
    rows = c.rows
    for p in range(n_c - 1, -1, -1):
        if not active[p]:
            continue
        in1, in2, func = rows[p]
        for src in used_inputs(in1, in2, func):
            if src >= n_i:
                active[src - n_i] = True
    return tuple(p for p in range(n_c) if active[p])


def decode_active(c: Chromosome) -> tuple[int, ...]:
    """Positions of the nodes on some output-to-input path, ascending."""
    return c.active


def circuit_area(c: Chromosome) -> float:
    """Sum of the gate areas of all active nodes, in square micrometres."""
    rows = c.rows
    return sum(GATE_AREA_CENTI[rows[p][2]] for p in c.active) / 100.0


def validate(c: Chromosome) -> ValidationReport:
    n_i, n_c = c.params.n_i, c.params.n_c
    for p, (in1, in2, func) in enumerate(c.rows):
        limit = n_i + p
        for slot, src in enumerate((in1, in2)):
            if src < 0:
                return ValidationReport(3 * p + slot, f"negative connection {src}")
            if src >= limit:
                return ValidationReport(3 * p + slot, f"node {p} reads ID {src} (forward reference, limit {limit})")
        if not 0 <= func < N_FUNCS:
            return ValidationReport(3 * p + 2, f"function {func} outside the {N_FUNCS}-gate library")
    if c.outputs is not None:
        for i, o in enumerate(c.outputs):
            if not 0 <= o < n_i + n_c:
                return ValidationReport(3 * n_c + i, f"output {i} reads unknown ID {o}")
    return ValidationReport()


def ensure_valid(c: Chromosome) -> Chromosome:
    report = validate(c)
    if not report:
        raise ChromosomeError(f"invalid chromosome: {report}")
    return c


def random_chromosome(
    params: CircuitParams,
    rng: np.random.Generator,
    transformer_form: bool = False,
) -> Chromosome:
    """Uniformly random valid chromosome (no levels-back limit)."""
    limits = params.n_i + np.arange(params.n_c)
    genes = np.empty((params.n_c, 3), dtype=np.int64)
    genes[:, 0] = (rng.random(params.n_c) * limits).astype(np.int64)
    genes[:, 1] = (rng.random(params.n_c) * limits).astype(np.int64)
    genes[:, 2] = rng.integers(0, N_FUNCS, size=params.n_c)
    outputs = None
    if not transformer_form:
        outputs = tuple(int(o) for o in rng.integers(0, params.n_ids, size=params.n_o))
    return Chromosome(params, genes, outputs)


# ── Serialization ─────────────────────────────────────────────────────────────

def to_text(c: Chromosome) -> str:
    p = c.params
    lines = [f"{p.bits} {p.n_i} {p.n_o} {p.n_c}"]
    lines += [f"{a} {b} {f}" for a, b, f in c.rows]
    if c.outputs is not None:
        lines.append(" ".join(str(o) for o in c.outputs))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> Chromosome:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        bits, n_i, n_o, n_c = (int(v) for v in lines[0])
        params = CircuitParams(n_i=n_i, n_o=n_o, n_c=n_c, bits=bits)
        body = lines[1:1 + n_c]
        if len(body) != n_c or any(len(row) != 3 for row in body):
            raise ChromosomeError(f"expected {n_c} node lines of three integers")
        genes = [[int(v) for v in row] for row in body]
        rest = lines[1 + n_c:]
        outputs = None
        if rest:
            if len(rest) != 1:
                raise ChromosomeError("trailing lines after the output genes")
            outputs = tuple(int(v) for v in rest[0])
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ChromosomeError):
            raise
        raise ChromosomeError(f"malformed chromosome text: {exc}") from None
    return Chromosome(params, genes, outputs)


_MAGIC = b"AXCG"
_HEADER = struct.Struct("<4s5I")


def to_bytes(c: Chromosome) -> bytes:
    p = c.params
    has_outputs = c.outputs is not None
    body = c.gene_vector().astype("<u4").tobytes()
    return _HEADER.pack(_MAGIC, p.bits, p.n_i, p.n_o, p.n_c, int(has_outputs)) + body


def from_bytes(data: bytes) -> Chromosome:
    if len(data) < _HEADER.size:
        raise ChromosomeError("truncated chromosome frame")
    magic, bits, n_i, n_o, n_c, has_outputs = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ChromosomeError("not a chromosome frame")
    params = CircuitParams(n_i=n_i, n_o=n_o, n_c=n_c, bits=bits)
    count = 3 * n_c + (n_o if has_outputs else 0)
    values = np.frombuffer(data, dtype="<u4", offset=_HEADER.size)
    if values.size != count:
        raise ChromosomeError(f"expected {count} genes in frame, found {values.size}")
    values = values.astype(np.int64)
    outputs = tuple(values[3 * n_c:].tolist()) if has_outputs else None
    return Chromosome(params, values[:3 * n_c], outputs)


def save(c: Chromosome, path: str) -> None:
    with open(path, "w") as f:
        f.write(to_text(c))


def load(path: str) -> Chromosome:
    with open(path, "r") as f:
        return from_text(f.read())


# ── Transformer form ──────────────────────────────────────────────────────────

def canonicalize_outputs(c: Chromosome) -> Chromosome:
    """
    Rewrite c so that output i is the node at position n_c - n_o + i and drop
    the output genes. Output drivers are moved to the tail when the topology
    allows it; otherwise an OR(x, x) buffer is placed in the tail slot.
    Inactive nodes fill the remaining front slots.
    """
    if c.outputs is None:
        return c
    n_i, n_o, n_c = c.params.n_i, c.params.n_o, c.params.n_c
    tail = n_c - n_o
    rows = c.rows
    active = c.active
    drivers = list(c.outputs)
    uses = Counter(drivers)

    deps = {p: [s - n_i for s in used_inputs(*rows[p]) if s >= n_i] for p in active}
    moved = {i for i, d in enumerate(drivers) if d >= n_i and uses[d] == 1}
    while True:
        slot_of = {drivers[i] - n_i: i for i in moved}
        drop = set()
        for p in active:
            slot_p = slot_of.get(p)
            for q in deps[p]:
                slot_q = slot_of.get(q)
                if slot_q is None:
                    continue
                if slot_p is None:
                    drop.add(slot_q)        # a front node reads a tail node
                elif slot_q > slot_p:
                    drop.add(slot_p)        # tail order would be violated
        if not drop:
            break
        moved -= drop

    moved_positions = {drivers[i] - n_i for i in moved}
    front_active = [p for p in active if p not in moved_positions]
    if len(front_active) > tail:
        raise ChromosomeError(
            f"{len(front_active)} active nodes do not fit in the {tail} slots before the outputs"
        )
    active_set = set(active)
    spare = tail - len(front_active)
    front = []
    for p in range(n_c):
        if p in moved_positions:
            continue
        if p in active_set:
            front.append(p)
        elif spare > 0:
            front.append(p)
            spare -= 1

    new_id = {s: s for s in range(n_i)}
    for new_p, old_p in enumerate(front):
        new_id[n_i + old_p] = n_i + new_p
    for i in moved:
        new_id[drivers[i]] = n_i + tail + i

    genes = np.zeros((n_c, 3), dtype=np.int64)

    def remap(src: int, limit: int) -> int:
        mapped = new_id.get(src)
        # only genes that are never read can lose their source
        return mapped if mapped is not None and mapped < limit else 0

    for new_p, old_p in enumerate(front):
        in1, in2, func = rows[old_p]
        limit = n_i + new_p
        genes[new_p] = (remap(in1, limit), remap(in2, limit), func)

    buffers = 0
    for i in range(n_o):
        slot = tail + i
        limit = n_i + slot
        if i in moved:
            in1, in2, func = rows[drivers[i] - n_i]
            genes[slot] = (remap(in1, limit), remap(in2, limit), func)
        else:
            src = new_id[drivers[i]]
            genes[slot] = (src, src, Gate.OR)
            buffers += 1
    if buffers:
        logger.debug("Canonicalisation inserted %d output buffer(s)", buffers)
    return Chromosome(c.params, genes, None)


def random_topological_order(c: Chromosome, rng: np.random.Generator) -> np.ndarray:
    """
    Random node order respecting every gene reference; the last n_o positions
    stay where they are. Returns order[new_position] = old_position.
    """
    n_i, n_o, n_c = c.params.n_i, c.params.n_o, c.params.n_c
    front = n_c - n_o
    rows = c.rows
    pending = [0] * front
    children: list[list[int]] = [[] for _ in range(front)]
    for p in range(front):
        for src in {rows[p][0], rows[p][1]}:
            if src >= n_i:
                pending[p] += 1
                children[src - n_i].append(p)
    ready = [p for p in range(front) if pending[p] == 0]
    order: list[int] = []
    while ready:
        k = int(rng.integers(len(ready)))
        ready[k], ready[-1] = ready[-1], ready[k]
        p = ready.pop()
        order.append(p)
        for child in children[p]:
            pending[child] -= 1
            if pending[child] == 0:
                ready.append(child)
    order.extend(range(front, n_c))
    return np.array(order, dtype=np.int64)


def apply_order(c: Chromosome, order: np.ndarray) -> Chromosome:
    """Relocate nodes (order[new] = old) and rewire every connection gene."""
    n_i = c.params.n_i
    order = np.asarray(order, dtype=np.int64)
    position_of = np.empty_like(order)
    position_of[order] = np.arange(order.size)
    id_map = np.concatenate([np.arange(n_i), n_i + position_of])
    genes = c.genes[order].copy()
    genes[:, :2] = id_map[genes[:, :2]]
    outputs = None if c.outputs is None else tuple(int(id_map[o]) for o in c.outputs)
    return Chromosome(c.params, genes, outputs)


def augment_with_order(
    c: Chromosome,
    rng: np.random.Generator,
    rerandomize_inactive: bool = False,
) -> tuple[Chromosome, np.ndarray]:
    """Behaviour-preserving shuffle of node positions (transformer form only)."""
    if c.outputs is not None:
        raise ChromosomeError("augmentation expects a chromosome in transformer form")
    order = random_topological_order(c, rng)
    shuffled = apply_order(c, order)
    if rerandomize_inactive:
        shuffled = _rerandomize_inactive(shuffled, rng)
    return shuffled, order


def augment(c: Chromosome, rng: np.random.Generator, rerandomize_inactive: bool = False) -> Chromosome:
    return augment_with_order(c, rng, rerandomize_inactive)[0]


def _rerandomize_inactive(c: Chromosome, rng: np.random.Generator) -> Chromosome:
    n_i = c.params.n_i
    active = set(c.active)
    inactive = np.array([p for p in range(c.params.n_c) if p not in active], dtype=np.int64)
    if inactive.size == 0:
        return c
    genes = c.genes.copy()
    limits = n_i + inactive
    genes[inactive, 0] = (rng.random(inactive.size) * limits).astype(np.int64)
    genes[inactive, 1] = (rng.random(inactive.size) * limits).astype(np.int64)
    genes[inactive, 2] = rng.integers(0, N_FUNCS, size=inactive.size)
    return Chromosome(c.params, genes, None)
