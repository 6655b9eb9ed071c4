"""
Data models and exceptions shared across the pipeline.
"""
import csv
import math
from dataclasses import dataclass, field


# ── Errors ────────────────────────────────────────────────────────────────────

class AxmulError(Exception):
    """Base class for every domain error; the CLI maps it to exit code 3."""


class ChromosomeError(AxmulError, ValueError):
    pass


class DatasetError(AxmulError):
    pass


class ModelMismatch(AxmulError):
    pass


class TrainingDiverged(AxmulError):
    def __init__(self, step: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


# ── Evaluation results ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ErrorMetrics:
    """Error of a candidate multiplier against the exact product table."""
    wce: int
    mae: float      # exact: the divisor is a power of two
    wce_zr: int     # worst-case error over rows where an operand is zero


# ── Run logs ──────────────────────────────────────────────────────────────────

RUNLOG_HEADER = ["gen", "t_sec", "fitness", "area", "wce", "operator", "inferences", "event"]


@dataclass
class RunRecord:
    gen: int
    t_sec: float
    fitness: float
    area: float
    wce: int
    operator: str       # "uniform" | "guided"
    inferences: int
    event: str          # "start" | "improve" | "neutral" | "switch" | "end"

    def csv_row(self) -> list:
        return [
            self.gen,
            f"{self.t_sec:.6f}",
            "inf" if math.isinf(self.fitness) else f"{self.fitness:.4f}",
            f"{self.area:.4f}",
            self.wce,
            self.operator,
            self.inferences,
            self.event,
        ]


@dataclass
class RunLog:
    """Best-fitness trajectory of one evolutionary run, one row per event."""
    records: list[RunRecord] = field(default_factory=list)
    label: str = ""
    # Per-generation operator names; only filled when tracing is requested.
    operator_trace: list[str] = field(default_factory=list)

    @property
    def final(self) -> RunRecord:
        return self.records[-1]

    @property
    def neutral_replacements(self) -> int:
        return sum(1 for r in self.records if r.event == "neutral")

    @property
    def inferences(self) -> int:
        return self.records[-1].inferences if self.records else 0

    def fitness_at(self, t_sec: float) -> float:
        """Best fitness reached at or before the given time."""
        best = math.inf
        for r in self.records:
            if r.t_sec > t_sec:
                break
            best = r.fitness
        return best

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(RUNLOG_HEADER)
            for r in self.records:
                writer.writerow(r.csv_row())

    @classmethod
    def read_csv(cls, path: str, label: str = "") -> "RunLog":
        log = cls(label=label)
        with open(path, "r", newline="") as f:
            for row in csv.DictReader(f):
                log.records.append(RunRecord(
                    gen=int(row["gen"]),
                    t_sec=float(row["t_sec"]),
                    fitness=float(row["fitness"]),
                    area=float(row["area"]),
                    wce=int(row["wce"]),
                    operator=row["operator"],
                    inferences=int(row["inferences"]),
                    event=row.get("event", ""),
                ))
        return log


# ── Training ──────────────────────────────────────────────────────────────────

LOSS_HEADER = ["epoch", "L_op", "L_input", "L_sens", "P_conf_op", "P_conf_in", "L_total"]


@dataclass
class LossBreakdown:
    L_op: float = 0.0
    L_input: float = 0.0
    L_sens: float = 0.0
    P_conf_op: float = 0.0
    P_conf_in: float = 0.0
    L_total: float = 0.0

    def as_list(self) -> list[float]:
        return [self.L_op, self.L_input, self.L_sens, self.P_conf_op, self.P_conf_in, self.L_total]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_list())
