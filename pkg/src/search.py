"""
(1+λ) evolution of approximate multipliers.

Two modes share one loop:
  standard   every offspring comes from a uniform single-gene mutation
  hybrid     offspring come from the model's cached mutation distribution
             until `stag_max` generations pass without a strict improvement,
             then from uniform mutation until the next strict improvement.
             The model is queried once at the start and once per strict
             improvement, never on neutral replacements.

Time is measured by a clock object: WallClock for real runs, StepClock for
reproducible ones (virtual seconds = evaluated offspring × a fixed cost).
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from src.cgp import Chromosome, circuit_area
from src.evaluator import evaluator_for
from src.models import ModelMismatch, RunLog, RunRecord
from src.mutation import mutate_guided, mutate_uniform

logger = logging.getLogger(__name__)

MODES = ("standard", "hybrid")

# fitness(chromosome, parent_area) -> area or inf
FitnessFn = Callable[[Chromosome, float | None], float]


# ── Clocks ────────────────────────────────────────────────────────────────────

class WallClock:
    def __init__(self):
        self._start = time.perf_counter()

    def tick(self, evaluations: int) -> None:
        pass

    def elapsed(self) -> float:
        return time.perf_counter() - self._start


class StepClock:
    """Deterministic clock: each evaluated offspring costs `seconds_per_eval`."""

    def __init__(self, seconds_per_eval: float = 1e-3):
        self.seconds_per_eval = seconds_per_eval
        self.evaluations = 0

    def tick(self, evaluations: int) -> None:
        self.evaluations += evaluations

    def elapsed(self) -> float:
        return self.evaluations * self.seconds_per_eval


def make_clock(kind: str, seconds_per_eval: float = 1e-3) -> WallClock | StepClock:
    if kind == "wall":
        return WallClock()
    if kind == "step":
        return StepClock(seconds_per_eval)
    raise ValueError(f"unknown clock {kind!r}; choose 'wall' or 'step'")


# ── Configuration ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SearchConfig:
    eps_abs: int
    lam: int = 4
    max_gens: int = 100_000
    time_sec: float | None = None
    stag_max: int = 50
    mode: str = "standard"
    rng_seed: int = 0
    clock: str = "wall"
    seconds_per_eval: float = 1e-3
    trace_operators: bool = False

    def __post_init__(self):
        if self.lam < 1:
            raise ValueError(f"lambda must be >= 1, got {self.lam}")
        if self.stag_max < 1:
            raise ValueError(f"stag_max must be >= 1, got {self.stag_max}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_gens < 0:
            raise ValueError(f"max_gens must be >= 0, got {self.max_gens}")


class DistributionSource(Protocol):
    def check_compatible(self, c: Chromosome) -> None: ...
    def distribution(self, c: Chromosome): ...


# ── Selection ─────────────────────────────────────────────────────────────────

@dataclass
class Candidate:
    chromosome: Chromosome
    fitness: float


def select_best(parent: Candidate, offspring: list[Candidate]) -> Candidate:
    """
    Strictly better offspring wins (lowest fitness, first by index on ties
    among them). Otherwise the first offspring that ties the parent replaces
    it. Otherwise the parent stays.
    """
    best = None
    for child in offspring:
        if child.fitness < parent.fitness and (best is None or child.fitness < best.fitness):
            best = child
    if best is not None:
        return best
    for child in offspring:
        if child.fitness == parent.fitness:
            return child
    return parent


# ── Evolution loop ────────────────────────────────────────────────────────────

def _default_fitness(bits: int, eps_abs: int) -> FitnessFn:
    ev = evaluator_for(bits)
    return lambda c, parent_area: ev.fitness(c, eps_abs, parent_area)


def _evolve(
    seed: Chromosome,
    cfg: SearchConfig,
    model: DistributionSource | None,
    fitness_fn: FitnessFn | None,
    label: str,
    on_improve: Callable[[Chromosome, float], None] | None,
) -> tuple[Chromosome, RunLog]:
    rng = np.random.default_rng(cfg.rng_seed)
    fitness_fn = fitness_fn or _default_fitness(seed.params.bits, cfg.eps_abs)
    evaluator = evaluator_for(seed.params.bits) if 2 <= seed.params.bits <= 8 else None
    clock = make_clock(cfg.clock, cfg.seconds_per_eval)
    hybrid = cfg.mode == "hybrid"
    log = RunLog(label=label)

    if hybrid:
        if model is None:
            raise ModelMismatch("hybrid mode needs a mutation model")
        model.check_compatible(seed)

    parent = Candidate(seed, fitness_fn(seed, None))
    if not math.isfinite(parent.fitness):
        logger.warning("Seed is not a valid multiplier at eps_abs=%d; evolving anyway", cfg.eps_abs)

    inferences = 0
    dist = None
    if hybrid:
        dist = model.distribution(parent.chromosome)
        inferences += 1
    stag = 0
    operator = "guided" if hybrid else "uniform"

    def record(gen: int, event: str) -> None:
        log.records.append(RunRecord(
            gen=gen,
            t_sec=clock.elapsed(),
            fitness=parent.fitness,
            area=circuit_area(parent.chromosome),
            wce=evaluator.metrics(parent.chromosome).wce if evaluator else 0,
            operator=operator,
            inferences=inferences,
            event=event,
        ))

    record(0, "start")
    logger.info("[%s] start: mode=%s eps_abs=%d fitness=%s", label or "run", cfg.mode, cfg.eps_abs, parent.fitness)

    gen = 0
    for gen in range(1, cfg.max_gens + 1):
        if cfg.time_sec is not None and clock.elapsed() >= cfg.time_sec:
            gen -= 1
            break

        current = "guided" if hybrid and stag < cfg.stag_max else "uniform"
        if current != operator:
            operator = current
            record(gen, "switch")
            logger.debug("[%s] gen %d: switched to %s mutation", label or "run", gen, operator)
        if cfg.trace_operators:
            log.operator_trace.append(operator)

        children = []
        for _ in range(cfg.lam):
            if operator == "guided":
                child = mutate_guided(parent.chromosome, dist, rng)
            else:
                child = mutate_uniform(parent.chromosome, rng)
            children.append(child)
        bound = parent.fitness if math.isfinite(parent.fitness) else None
        offspring = [Candidate(c, fitness_fn(c, bound)) for c in children]
        clock.tick(cfg.lam)

        chosen = select_best(parent, offspring)
        improved = chosen.fitness < parent.fitness
        replaced = chosen is not parent
        parent = chosen
        if improved:
            stag = 0
            if hybrid:
                dist = model.distribution(parent.chromosome)
                inferences += 1
            record(gen, "improve")
            if on_improve is not None:
                on_improve(parent.chromosome, parent.fitness)
        else:
            stag += 1
            if replaced:
                record(gen, "neutral")

    record(gen, "end")
    logger.info(
        "[%s] end: gen=%d t=%.2fs fitness=%s neutral=%d inferences=%d",
        label or "run", gen, clock.elapsed(), parent.fitness, log.neutral_replacements, inferences,
    )
    return parent.chromosome, log


def evolve_standard(
    seed: Chromosome,
    cfg: SearchConfig,
    fitness_fn: FitnessFn | None = None,
    label: str = "",
    on_improve: Callable[[Chromosome, float], None] | None = None,
) -> tuple[Chromosome, RunLog]:
    return _evolve(seed, replace(cfg, mode="standard"), None, fitness_fn, label, on_improve)


def evolve_hybrid(
    seed: Chromosome,
    cfg: SearchConfig,
    model: DistributionSource,
    fitness_fn: FitnessFn | None = None,
    label: str = "",
    on_improve: Callable[[Chromosome, float], None] | None = None,
) -> tuple[Chromosome, RunLog]:
    return _evolve(seed, replace(cfg, mode="hybrid"), model, fitness_fn, label, on_improve)


def evolve(
    seed: Chromosome,
    cfg: SearchConfig,
    model: DistributionSource | None = None,
    fitness_fn: FitnessFn | None = None,
    label: str = "",
) -> tuple[Chromosome, RunLog]:
    if cfg.mode == "hybrid":
        return evolve_hybrid(seed, cfg, model, fitness_fn, label)
    return evolve_standard(seed, cfg, fitness_fn, label)


# ── Batches ───────────────────────────────────────────────────────────────────

@dataclass
class BatchResult:
    logs: dict[str, list[RunLog]] = field(default_factory=dict)
    best: dict[str, list[Chromosome]] = field(default_factory=dict)
    seed_kinds: list[str] = field(default_factory=list)


def run_seeds(rng_seed: int, runs: int) -> list[int]:
    """Independent per-run seeds; run i gets the same seed under every label."""
    children = np.random.SeedSequence(rng_seed).spawn(runs)
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in children]


def run_batch(
    configs: dict[str, SearchConfig],
    seeds: list[Chromosome],
    runs: int,
    model: DistributionSource | None = None,
    rng_seed: int = 0,
    threads: int = 1,
    seed_kinds: list[str] | None = None,
) -> BatchResult:
    """
    Run every labelled configuration `runs` times. Run i starts from
    seeds[i % len(seeds)] and uses the same rng seed under every label, so
    the labels form paired samples. Results keep submission order.
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if not seeds:
        raise ValueError("run_batch needs at least one seed chromosome")
    per_run = run_seeds(rng_seed, runs)
    jobs = []
    for label, base in configs.items():
        for i in range(runs):
            cfg = replace(base, rng_seed=per_run[i])
            jobs.append((label, i, cfg, seeds[i % len(seeds)]))

    def work(job):
        label, i, cfg, seed = job
        return evolve(seed, cfg, model if cfg.mode == "hybrid" else None, label=f"{label}#{i}")

    logger.info("Batch: %d configuration(s) × %d run(s) on %d thread(s)", len(configs), runs, threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    out = BatchResult(seed_kinds=[
        (seed_kinds[i % len(seed_kinds)] if seed_kinds else str(i % len(seeds))) for i in range(runs)
    ])
    for (label, _, _, _), (best, log) in zip(jobs, results):
        log.label = label
        out.logs.setdefault(label, []).append(log)
        out.best.setdefault(label, []).append(best)
    return out
