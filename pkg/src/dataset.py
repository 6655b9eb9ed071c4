"""
Training corpus of approximate multipliers.

A corpus is harvested from standard CGP runs started at exact seeds: the
canonicalized seed and every strictly improving best individual of each run
become records. On disk a corpus directory looks like:

    manifest.csv            id,wce,area
    records/<id>.chr        chromosome in transformer form (text format)
    labels/<id>.L<L>.r<seed>.sens.npy
                            cached per-node sensitivity labels for L samples
                            per node and label rng seed (lazily filled)

Records are weighted by attractiveness a = exp(-d · Δ), where Δ is the
record's area minus the area of a piecewise-linear Pareto curve at its WCE.
"""

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from src import cgp
from src.cgp import Chromosome, canonicalize_outputs, circuit_area
from src.evaluator import MultiplierEvaluator, evaluator_for
from src.models import DatasetError
from src.mutation import mutate_node_uniform
from src.search import SearchConfig, evolve_standard, run_seeds
from src.seeds import SEED_KINDS, seed_multiplier

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["id", "wce", "area"]
LABEL_FLOOR = 1.0 / 1024


@dataclass
class DatasetRecord:
    id: str
    chromosome: Chromosome          # transformer form
    wce: int
    area: float
    wce_zr: int = 0
    attractiveness: float = 1.0
    labels: np.ndarray | None = None    # (n_c,), zero on inactive nodes


# ── Filtering and weighting ───────────────────────────────────────────────────

def filter_valid(records: list[DatasetRecord], eps_abs: int) -> list[DatasetRecord]:
    """Records with wce ≤ eps_abs and no error on zero-operand rows."""
    kept = [r for r in records if r.wce <= eps_abs and r.wce_zr == 0]
    if not kept:
        raise DatasetError(
            f"no valid multipliers at eps_abs={eps_abs} among {len(records)} record(s); "
            "nothing to train on"
        )
    logger.info("Valid at eps_abs=%d: %d of %d record(s)", eps_abs, len(kept), len(records))
    return kept


@dataclass(frozen=True)
class ParetoCurve:
    """Non-dominated (wce, area) knots: wce strictly up, area strictly down."""
    wce: tuple[float, ...]
    area: tuple[float, ...]

    @classmethod
    def from_points(cls, points) -> "ParetoCurve":
        pts = sorted((float(w), float(a)) for w, a in points)
        if not pts:
            raise DatasetError("cannot build a Pareto curve from zero points")
        wces, areas = [], []
        for w, a in pts:
            if areas and a >= areas[-1]:
                continue    # dominated (or an equal-wce duplicate)
            wces.append(w)
            areas.append(a)
        return cls(tuple(wces), tuple(areas))

    @classmethod
    def from_records(cls, records: list[DatasetRecord]) -> "ParetoCurve":
        return cls.from_points((r.wce, r.area) for r in records)

    def cost(self, wce: float) -> float:
        # np.interp clamps to the end knots
        return float(np.interp(wce, self.wce, self.area))


def pareto_cost(curve: ParetoCurve, wce: float) -> float:
    return curve.cost(wce)


def attractiveness(area: float, wce: float, curve: ParetoCurve, d: float = 0.01) -> float:
    return math.exp(-d * (area - curve.cost(wce)))


def weigh(records: list[DatasetRecord], d: float = 0.01) -> ParetoCurve:
    """Attach attractiveness to every record in place; returns the curve used."""
    curve = ParetoCurve.from_records(records)
    for r in records:
        r.attractiveness = attractiveness(r.area, r.wce, curve, d)
    logger.info("Pareto curve over %d record(s) has %d knot(s)", len(records), len(curve.wce))
    return curve


# ── Sensitivity labels ────────────────────────────────────────────────────────

def raw_sensitivity(
    c: Chromosome,
    evaluator: MultiplierEvaluator,
    samples: int,
    rng: np.random.Generator,
) -> dict[int, float]:
    """Mean log ratio of mutated WCE to the original WCE, per active node."""
    e0 = max(evaluator.metrics(c).wce, 1)
    raw = {}
    for n in c.active:
        total = 0.0
        for _ in range(samples):
            e = max(evaluator.metrics(mutate_node_uniform(c, n, rng)).wce, 1)
            total += math.log(e / e0)
        raw[n] = total / samples
    return raw


def sensitivity_labels(
    c: Chromosome,
    rng: np.random.Generator,
    samples: int = 8,
    evaluator: MultiplierEvaluator | None = None,
) -> np.ndarray:
    """
    Per-node labels in (0, 1]: the raw scores of the active nodes are mapped
    affinely so the minimum becomes LABEL_FLOOR and the maximum 1. A constant
    score vector maps to all ones. Inactive nodes get 0.
    """
    evaluator = evaluator or evaluator_for(c.params.bits)
    labels = np.zeros(c.params.n_c)
    raw = raw_sensitivity(c, evaluator, samples, rng)
    if not raw:
        return labels
    idx = np.fromiter(raw.keys(), dtype=np.int64)
    values = np.fromiter(raw.values(), dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-12:
        labels[idx] = 1.0
    else:
        labels[idx] = LABEL_FLOOR + (values - lo) / (hi - lo) * (1.0 - LABEL_FLOOR)
    return labels


def label_stream(rng_seed: int, samples: int, rid: str) -> np.random.Generator:
    """Per-record stream: depends on the record id, not on its list position."""
    key = int.from_bytes(hashlib.sha256(rid.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([rng_seed, samples, key]))


def label_records(
    records: list[DatasetRecord],
    rng_seed: int = 0,
    samples: int = 8,
    threads: int = 1,
    cache_dir: str | None = None,
) -> list[str]:
    """
    Fill in missing labels (in place), reading and writing the label cache.
    Cache files are keyed by (id, samples, rng_seed); returns the cache paths
    relative to `cache_dir` for every labelled record.
    """
    todo = []
    for r in records:
        if r.labels is not None:
            continue
        path = _label_path(cache_dir, r.id, samples, rng_seed) if cache_dir else None
        if path and os.path.exists(path):
            r.labels = np.load(path, allow_pickle=False)
            continue
        todo.append(r)

    def work(r: DatasetRecord) -> np.ndarray:
        return sensitivity_labels(r.chromosome, label_stream(rng_seed, samples, r.id), samples)

    if todo:
        logger.info("Computing sensitivity labels for %d record(s) (L=%d)", len(todo), samples)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, todo))
        else:
            results = [work(r) for r in todo]
        for r, labels in zip(todo, results):
            r.labels = labels
            if cache_dir:
                path = _label_path(cache_dir, r.id, samples, rng_seed)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                np.save(path, labels, allow_pickle=False)

    if not cache_dir:
        return []
    paths = [_label_path(cache_dir, r.id, samples, rng_seed) for r in records]
    return [os.path.relpath(p, cache_dir) for p in paths if os.path.exists(p)]


# ── Generation ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DatasetBudget:
    runs: int = 50
    gens_per_run: int = 100_000
    time_per_run: float | None = None
    clock: str = "wall"


def _record(c: Chromosome, evaluator: MultiplierEvaluator, rid: str) -> DatasetRecord:
    m = evaluator.metrics(c)
    return DatasetRecord(id=rid, chromosome=c, wce=m.wce, area=circuit_area(c), wce_zr=m.wce_zr)


def generate_dataset(
    bits: int,
    eps_abs: int,
    budget: DatasetBudget,
    rng_seed: int = 0,
    seed_kinds: tuple[str, ...] = SEED_KINDS,
    n_c: int | None = None,
    threads: int = 1,
) -> list[DatasetRecord]:
    """
    Harvest every distinct valid best individual of `budget.runs` standard
    CGP runs (seed kinds round-robin). Records are in run order, seeds first.
    """
    evaluator = evaluator_for(bits)
    seeds = [canonicalize_outputs(seed_multiplier(kind, bits, n_c)) for kind in seed_kinds]
    base = SearchConfig(
        eps_abs=eps_abs,
        max_gens=budget.gens_per_run,
        time_sec=budget.time_per_run,
        clock=budget.clock,
    )
    per_run = run_seeds(rng_seed, budget.runs) if budget.runs > 0 else []
    do_search = budget.gens_per_run > 0 and (budget.time_per_run is None or budget.time_per_run > 0)

    def work(i: int) -> list[Chromosome]:
        found: list[Chromosome] = []
        if do_search:
            cfg = replace(base, rng_seed=per_run[i])
            evolve_standard(
                seeds[i % len(seeds)], cfg,
                label=f"gen-dataset#{i}",
                on_improve=lambda c, fit: found.append(c),
            )
        return found

    if threads > 1 and budget.runs > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            harvested = list(pool.map(work, range(budget.runs)))
    else:
        harvested = [work(i) for i in range(budget.runs)]

    records: list[DatasetRecord] = []
    seen: set[Chromosome] = set()
    for c in seeds + [c for run in harvested for c in run]:
        if c in seen:
            continue
        seen.add(c)
        rec = _record(c, evaluator, f"{len(records):06d}")
        # improvements are accepted only when valid at eps_abs
        if rec.wce <= eps_abs and rec.wce_zr == 0:
            records.append(rec)
    logger.info("Harvested %d distinct record(s) from %d run(s)", len(records), budget.runs)
    return records


# ── Storage ───────────────────────────────────────────────────────────────────

def _label_path(root: str, rid: str, samples: int, rng_seed: int) -> str:
    return os.path.join(root, "labels", f"{rid}.L{samples}.r{rng_seed}.sens.npy")


def save_dataset(records: list[DatasetRecord], root: str) -> list[str]:
    """Write the corpus; returns the written paths relative to `root`."""
    os.makedirs(os.path.join(root, "records"), exist_ok=True)
    written = []
    for r in records:
        rel = os.path.join("records", f"{r.id}.chr")
        cgp.save(r.chromosome, os.path.join(root, rel))
        written.append(rel)
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.id, r.wce, f"{r.area:.2f}"])
    written.append("manifest.csv")
    return written


def load_dataset(root: str, verify: bool = True) -> list[DatasetRecord]:
    """
    Read a corpus directory. With `verify`, every chromosome is re-simulated
    and its WCE checked against the manifest.
    """
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest):
        raise DatasetError(f"{root}: no manifest.csv")
    records = []
    with open(manifest, "r", newline="") as f:
        for row in csv.DictReader(f):
            path = os.path.join(root, "records", f"{row['id']}.chr")
            try:
                c = cgp.load(path)
            except (OSError, ValueError) as exc:
                raise DatasetError(f"{path}: unreadable record ({exc})") from exc
            rec = DatasetRecord(id=row["id"], chromosome=c, wce=int(row["wce"]), area=float(row["area"]))
            if verify:
                m = evaluator_for(c.params.bits).metrics(c)
                if m.wce != rec.wce:
                    raise DatasetError(f"{path}: manifest says wce={rec.wce}, simulation gives {m.wce}")
                rec.wce_zr = m.wce_zr
                rec.area = circuit_area(c)
            records.append(rec)
    logger.info("Loaded %d record(s) from %s", len(records), root)
    return records
