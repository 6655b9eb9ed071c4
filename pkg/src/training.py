"""
Masked-token training of the mutation model.

Per sample s, with â_s = a_s / max(a in batch):

    L_s     = â_s · (L_op + L_input + c_op·P_conf_op + c_in·P_conf_in)
    L_total = mean_s(L_s) + c_sens · mean_s(L_sens)

L_op / L_input are one-vs-all binary cross-entropies over the masked
function / input tokens; the input target of a node is the multi-hot set
{in1, in2}. P_conf is the per-node sum of (σ(o_c)·(1 − y_c))², averaged over
the active masked nodes. L_sens is the squared error of the sensitivity head
over the active nodes.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from src.cgp import augment_with_order
from src.dataset import DatasetRecord, weigh
from src.models import LOSS_HEADER, DatasetError, LossBreakdown, TrainingDiverged
from src.transformer import (
    ModelConfig,
    ModelOutput,
    Params,
    Tokens,
    backward,
    forward,
    infer,
    init_params,
    stack_tokens,
    tokenize,
)

logger = logging.getLogger(__name__)

TRAIN_MANIFEST_HEADER = ["id", "wce", "area", "attractiveness"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch: int = 128
    mask_start: float = 0.05
    mask_end: float = 0.30
    c_op: float = 0.1
    c_in: float = 0.2
    c_sens: float = 1.0
    d: float = 0.01
    samples: int = 8                 # L, mutations per node for sensitivity labels
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    augment: bool = True
    rerandomize_inactive: bool = True
    rng_seed: int = 0
    micro_batch: int | None = None   # None: sized from the attention footprint

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if not 0 < self.mask_start <= self.mask_end < 1:
            raise ValueError("mask ratios must satisfy 0 < start <= end < 1")


def mask_ratio(cfg: TrainConfig, epoch: int) -> float:
    """Ratio for a 0-based epoch, linear from mask_start to mask_end."""
    if cfg.epochs == 1:
        return cfg.mask_start
    return cfg.mask_start + (cfg.mask_end - cfg.mask_start) * epoch / (cfg.epochs - 1)


# ── Masking ───────────────────────────────────────────────────────────────────

def mask(
    tokens: Tokens,
    ratio: float,
    rng: np.random.Generator,
    model_cfg: ModelConfig,
) -> tuple[Tokens, np.ndarray]:
    """
    Replace ceil(ratio · 3·n_c) gene tokens, chosen uniformly without
    replacement, by MASK. Returns the masked tokens and an (n_c, 3) boolean
    array of masked positions (in1, in2, func).
    """
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    n = tokens.in1.shape[-1]
    total = 3 * n
    count = max(1, math.ceil(ratio * total - 1e-9))
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=count, replace=False)] = True
    masked = flat.reshape(n, 3)
    out = tokens.copy()
    out.in1[masked[:, 0]] = model_cfg.source_mask
    out.in2[masked[:, 1]] = model_cfg.source_mask
    out.func[masked[:, 2]] = model_cfg.func_mask
    return out, masked


@dataclass
class TrainBatch:
    """Model inputs plus everything the loss needs, stacked over samples."""
    tokens: Tokens              # masked, (B, n_c)
    func_target: np.ndarray     # (B, n_c, |Γ|) one-hot
    input_target: np.ndarray    # (B, n_c, n_sources) multi-hot {in1, in2}
    func_masked: np.ndarray     # (B, n_c) bool
    input_masked: np.ndarray    # (B, n_c) bool
    active: np.ndarray          # (B, n_c) bool
    sens_target: np.ndarray     # (B, n_c)
    a_hat: np.ndarray           # (B,)

    def __len__(self) -> int:
        return self.a_hat.size

    def slice(self, lo: int, hi: int) -> "TrainBatch":
        t = self.tokens
        return TrainBatch(
            Tokens(t.in1[lo:hi], t.in2[lo:hi], t.func[lo:hi]),
            self.func_target[lo:hi], self.input_target[lo:hi],
            self.func_masked[lo:hi], self.input_masked[lo:hi],
            self.active[lo:hi], self.sens_target[lo:hi], self.a_hat[lo:hi],
        )


def build_batch(
    samples: list[tuple[Tokens, np.ndarray, np.ndarray, np.ndarray]],
    attractiveness: np.ndarray,
    model_cfg: ModelConfig,
) -> TrainBatch:
    """
    samples: (original tokens, masked-position array, active mask, labels) per
    sample; masking is applied from the masked-position array.
    """
    originals = stack_tokens([s[0] for s in samples])
    masked = np.stack([s[1] for s in samples])
    B, n = originals.in1.shape

    tokens = originals.copy()
    tokens.in1[masked[..., 0]] = model_cfg.source_mask
    tokens.in2[masked[..., 1]] = model_cfg.source_mask
    tokens.func[masked[..., 2]] = model_cfg.func_mask

    func_target = np.zeros((B, n, model_cfg.n_funcs))
    np.put_along_axis(func_target, originals.func[..., None], 1.0, axis=-1)
    input_target = np.zeros((B, n, model_cfg.n_sources))
    np.put_along_axis(input_target, originals.in1[..., None], 1.0, axis=-1)
    np.put_along_axis(input_target, originals.in2[..., None], 1.0, axis=-1)

    a = np.asarray(attractiveness, dtype=np.float64)
    return TrainBatch(
        tokens=tokens,
        func_target=func_target,
        input_target=input_target,
        func_masked=masked[..., 2],
        input_masked=masked[..., 0] | masked[..., 1],
        active=np.stack([s[2] for s in samples]),
        sens_target=np.stack([s[3] for s in samples]),
        a_hat=a / a.max(),
    )


# ── Loss terms ────────────────────────────────────────────────────────────────

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def confidence_penalty(logits: np.ndarray, targets: np.ndarray) -> float:
    """Σ_h Σ_c (σ(o_hc) · (1 − y_hc))² over the given nodes."""
    return float(((_sigmoid(logits) * (1.0 - targets)) ** 2).sum())


def _bce_term(z, y, nodes):
    """Per-sample mean BCE over the selected nodes' classes, and its gradient."""
    C = z.shape[-1]
    count = nodes.sum(axis=1) * C                     # (B,)
    denom = np.maximum(count, 1)[:, None, None]
    sel = nodes[..., None]
    loss = ((np.logaddexp(0.0, z) - y * z) * sel).sum(axis=(1, 2)) / denom[:, 0, 0]
    grad = (_sigmoid(z) - y) * sel / denom
    return loss, grad


def _penalty_term(z, y, nodes):
    """Per-sample P_conf averaged over the selected nodes, and its gradient."""
    count = np.maximum(nodes.sum(axis=1), 1)          # (B,)
    sel = nodes[..., None]
    s = _sigmoid(z)
    wrong = 1.0 - y
    per = ((s * wrong) ** 2 * sel).sum(axis=(1, 2)) / count
    grad = 2.0 * s * wrong ** 2 * s * (1.0 - s) * sel / count[:, None, None]
    return per, grad


def _loss_parts(out: ModelOutput, batch: TrainBatch, cfg: TrainConfig, scale: float):
    """
    Component sums over this (micro-)batch and the head gradients of
    `scale · Σ_s L_s + c_sens · scale · Σ_s L_sens_s`.
    """
    active = batch.active
    l_op, g_op = _bce_term(out.func_logits, batch.func_target, batch.func_masked)
    l_in, g_in = _bce_term(out.input_logits, batch.input_target, batch.input_masked)
    p_op, gp_op = _penalty_term(out.func_logits, batch.func_target, batch.func_masked & active)
    p_in, gp_in = _penalty_term(out.input_logits, batch.input_target, batch.input_masked & active)

    n_active = np.maximum(active.sum(axis=1), 1)
    err = (out.sensitivity - batch.sens_target) * active
    l_sens = (err ** 2).sum(axis=1) / n_active

    w = (batch.a_hat * scale)[:, None, None]
    d_func = w * (g_op + cfg.c_op * gp_op)
    d_input = w * (g_in + cfg.c_in * gp_in)
    d_sens = cfg.c_sens * scale * 2.0 * err / n_active[:, None]

    weighted = batch.a_hat * (l_op + l_in + cfg.c_op * p_op + cfg.c_in * p_in)
    sums = np.array([
        l_op.sum(), l_in.sum(), l_sens.sum(), p_op.sum(), p_in.sum(),
        weighted.sum() + cfg.c_sens * l_sens.sum(),
    ])
    return sums, d_func, d_input, d_sens


def total_loss(out: ModelOutput, batch: TrainBatch, cfg: TrainConfig) -> LossBreakdown:
    """Batch-mean loss components; L_total assembled as in the module docstring."""
    sums, *_ = _loss_parts(out, batch, cfg, 1.0 / len(batch))
    return LossBreakdown(*(sums / len(batch)).tolist())


def loss_and_grads(
    batch: TrainBatch,
    params: Params,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    micro_batch: int | None = None,
    step: int = 0,
) -> tuple[LossBreakdown, Params]:
    B = len(batch)
    micro = micro_batch or B
    grads: Params | None = None
    sums = np.zeros(6)
    for lo in range(0, B, micro):
        part = batch.slice(lo, min(B, lo + micro))
        out, cache = forward(part.tokens, params, model_cfg)
        if not out.is_finite():
            raise TrainingDiverged(step, "non-finite model output")
        part_sums, d_func, d_input, d_sens = _loss_parts(out, part, cfg, 1.0 / B)
        sums += part_sums
        g = backward(cache, params, model_cfg, d_func, d_input, d_sens)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    losses = LossBreakdown(*(sums / B).tolist())
    if not losses.is_finite():
        raise TrainingDiverged(step)
    return losses, grads


# ── Optimizer ─────────────────────────────────────────────────────────────────

class Adam:
    """Adam with global gradient-norm clipping; updates parameters in place."""

    def __init__(self, params: Params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=1.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> float:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            g = g * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


# ── Training loop ─────────────────────────────────────────────────────────────

def default_micro_batch(model_cfg: ModelConfig, batch: int) -> int:
    # keep the cached attention maps around 160 MB of float64
    per_sample = model_cfg.heads * model_cfg.n_c * model_cfg.n_c * max(model_cfg.layers, 1)
    return max(1, min(batch, int(2e7 // per_sample)))


@dataclass
class TrainResult:
    params: Params
    trace: list[LossBreakdown] = field(default_factory=list)
    steps: int = 0


class Trainer:
    """Owns parameters, optimizer state and the sampling rng."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, params: Params | None = None):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.params = params if params is not None else init_params(model_cfg, self.rng)
        self.optimizer = Adam(self.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm)
        self.micro_batch = cfg.micro_batch or default_micro_batch(model_cfg, cfg.batch)
        self.steps = 0

    def _draw(self, rec: DatasetRecord, ratio: float):
        c, labels = rec.chromosome, rec.labels
        if self.cfg.augment:
            c, order = augment_with_order(c, self.rng, self.cfg.rerandomize_inactive)
            labels = labels[order]
        tokens = tokenize(c)
        active = np.zeros(c.params.n_c, dtype=bool)
        active[list(c.active)] = True
        _, masked = mask(tokens, ratio, self.rng, self.model_cfg)
        return tokens, masked, active, labels

    def make_batch(self, records: list[DatasetRecord], ratio: float) -> TrainBatch:
        samples = [self._draw(r, ratio) for r in records]
        a = np.array([r.attractiveness for r in records])
        return build_batch(samples, a, self.model_cfg)

    def step(self, records: list[DatasetRecord], ratio: float) -> LossBreakdown:
        batch = self.make_batch(records, ratio)
        losses, grads = loss_and_grads(batch, self.params, self.model_cfg, self.cfg, self.micro_batch, self.steps)
        self.optimizer.step(self.params, grads)
        self.steps += 1
        return losses


def _check_records(records: list[DatasetRecord], model_cfg: ModelConfig) -> None:
    if not records:
        raise DatasetError("training needs at least one record")
    for r in records:
        if r.labels is None:
            raise DatasetError(f"record {r.id} has no sensitivity labels")
        p = r.chromosome.params
        if p.n_i != model_cfg.n_i or p.n_c != model_cfg.n_c:
            raise DatasetError(f"record {r.id} has n_i={p.n_i}, n_c={p.n_c}; model expects "
                               f"n_i={model_cfg.n_i}, n_c={model_cfg.n_c}")
        if r.chromosome.outputs is not None:
            raise DatasetError(f"record {r.id} is not in transformer form")


def train(
    records: list[DatasetRecord],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    params: Params | None = None,
) -> TrainResult:
    """
    Train for cfg.epochs epochs over labelled records (attractiveness is
    recomputed from the records' Pareto curve). Every draw is augmented.
    """
    _check_records(records, model_cfg)
    weigh(records, cfg.d)
    trainer = Trainer(model_cfg, cfg, params)
    result = TrainResult(trainer.params)
    n = len(records)
    logger.info("Training on %d record(s): %d epoch(s), batch %d, micro-batch %d",
                n, cfg.epochs, cfg.batch, trainer.micro_batch)

    for epoch in range(cfg.epochs):
        ratio = mask_ratio(cfg, epoch)
        order = trainer.rng.permutation(n)
        sums = np.zeros(6)
        batches = 0
        for lo in range(0, n, cfg.batch):
            chunk = [records[i] for i in order[lo:lo + cfg.batch]]
            sums += np.array(trainer.step(chunk, ratio).as_list())
            batches += 1
        epoch_loss = LossBreakdown(*(sums / batches).tolist())
        result.trace.append(epoch_loss)
        logger.info("Epoch %d/%d  mask=%.3f  L_total=%.5f  (op=%.4f in=%.4f sens=%.4f)",
                    epoch + 1, cfg.epochs, ratio, epoch_loss.L_total,
                    epoch_loss.L_op, epoch_loss.L_input, epoch_loss.L_sens)
    result.steps = trainer.steps
    return result


# ── Outputs ───────────────────────────────────────────────────────────────────

def write_trace(trace: list[LossBreakdown], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOSS_HEADER)
        for epoch, losses in enumerate(trace, start=1):
            writer.writerow([epoch] + [f"{v:.8f}" for v in losses.as_list()])


def write_train_manifest(records: list[DatasetRecord], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAIN_MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.id, r.wce, f"{r.area:.2f}", f"{r.attractiveness:.8f}"])


# ── Label quality ─────────────────────────────────────────────────────────────

def sensitivity_agreement(records: list[DatasetRecord], params: Params, model_cfg: ModelConfig) -> float:
    """
    Mean Spearman rank correlation between the sensitivity head (unmasked
    input) and the labels, over the active nodes of each record. Records with
    fewer than three active nodes or constant labels are skipped; nan if none
    remain.
    """
    rhos = []
    for r in records:
        active = list(r.chromosome.active)
        if r.labels is None or len(active) < 3 or np.ptp(r.labels[active]) == 0:
            continue
        predicted = infer(tokenize(r.chromosome), params, model_cfg).sensitivity[0, active]
        rho = spearmanr(predicted, r.labels[active]).statistic
        if np.isfinite(rho):
            rhos.append(rho)
    return float(np.mean(rhos)) if rhos else math.nan
