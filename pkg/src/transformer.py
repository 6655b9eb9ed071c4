"""
Encoder-only transformer over CGP chromosomes, written directly in numpy with
hand-derived gradients.

Each node is one sequence element. Its embedding is the concatenation of
three independently embedded tokens (in1, in2, func) plus a learned position
vector, then biased towards its parents:

    e_i' = e_i + c_par * mean(e_j for valid parents j of i)

where a valid parent is an input token that names a node (not a primary
input, not MASK). The stack is pre-norm: x += Attn(LN(x)); x += FFN(LN(x)),
followed by a final LayerNorm and three per-node heads:
    function logits (|Γ|), input logits (one head shared by both inputs,
    over all source IDs), sensitivity = sigmoid(scalar).
"""

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from src.cgp import N_FUNCS, Chromosome
from src.models import ModelMismatch
from src.mutation import MutationDistribution

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


# ── Configuration and tokens ──────────────────────────────────────────────────

@dataclass(frozen=True)
class ModelConfig:
    n_i: int
    n_c: int
    d_model: int = 64
    heads: int = 4
    layers: int = 6
    ffn_hidden: int = 256
    c_par: float = 0.2
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def n_funcs(self) -> int:
        return N_FUNCS

    @property
    def n_sources(self) -> int:
        return self.n_i + self.n_c

    @property
    def func_mask(self) -> int:
        return N_FUNCS

    @property
    def source_mask(self) -> int:
        return self.n_sources

    @property
    def d_input(self) -> int:
        # 24 + 24 + 16 for d_model = 64
        return 3 * self.d_model // 8

    @property
    def d_func(self) -> int:
        return self.d_model - 2 * self.d_input

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class Tokens:
    """Token IDs of one chromosome (shape (n_c,)) or a batch (shape (B, n_c))."""
    in1: np.ndarray
    in2: np.ndarray
    func: np.ndarray

    @property
    def batched(self) -> "Tokens":
        if self.in1.ndim == 2:
            return self
        return Tokens(self.in1[None], self.in2[None], self.func[None])

    def copy(self) -> "Tokens":
        return Tokens(self.in1.copy(), self.in2.copy(), self.func.copy())


def tokenize(c: Chromosome) -> Tokens:
    if c.outputs is not None:
        raise ModelMismatch("the model reads chromosomes in transformer form (no output genes)")
    g = c.genes
    return Tokens(g[:, 0].copy(), g[:, 1].copy(), g[:, 2].copy())


def stack_tokens(items: list[Tokens]) -> Tokens:
    return Tokens(
        np.stack([t.in1 for t in items]),
        np.stack([t.in2 for t in items]),
        np.stack([t.func for t in items]),
    )


@dataclass
class ModelOutput:
    func_logits: np.ndarray     # (B, n_c, |Γ|)
    input_logits: np.ndarray    # (B, n_c, n_sources)
    sensitivity: np.ndarray     # (B, n_c), in (0, 1)

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.func_logits).all()
            and np.isfinite(self.input_logits).all()
            and np.isfinite(self.sensitivity).all()
        )


# ── Parameters ────────────────────────────────────────────────────────────────

def init_params(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.02) -> Params:
    d, f = cfg.d_model, cfg.ffn_hidden

    def normal(*shape):
        return rng.normal(0.0, scale, size=shape)

    p: Params = {
        "embed.in1": normal(cfg.n_sources + 1, cfg.d_input),
        "embed.in2": normal(cfg.n_sources + 1, cfg.d_input),
        "embed.func": normal(cfg.n_funcs + 1, cfg.d_func),
        "embed.pos": normal(cfg.n_c, d),
    }
    for l in range(cfg.layers):
        pre = f"layer{l}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.w{name}"] = normal(d, d)
            p[pre + f"attn.b{name}"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = normal(d, f)
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = normal(f, d)
        p[pre + "ffn.b2"] = np.zeros(d)
    p["final.ln.g"] = np.ones(d)
    p["final.ln.b"] = np.zeros(d)
    p["head.func.w"] = normal(d, cfg.n_funcs)
    p["head.func.b"] = np.zeros(cfg.n_funcs)
    p["head.input.w"] = normal(d, cfg.n_sources)
    p["head.input.b"] = np.zeros(cfg.n_sources)
    p["head.sens.w"] = normal(d, 1)
    p["head.sens.b"] = np.zeros(1)
    return p


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ── Building blocks ───────────────────────────────────────────────────────────

_GELU_A = math.sqrt(2.0 / math.pi)


def _gelu(u):
    t = np.tanh(_GELU_A * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t ** 2) * _GELU_A * (1.0 + 3 * 0.044715 * u ** 2)


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dxhat = dy * g
    dx = inv / d * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    return dx, dg, db


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _linear_grads(x, dy):
    """Weight and bias gradients of y = x @ W + b over all leading axes."""
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    return xf.T @ dyf, dyf.sum(axis=0)


def _split_heads(x, heads):
    B, N, d = x.shape
    return x.reshape(B, N, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * dh)


# ── Embedding ─────────────────────────────────────────────────────────────────

def _parents(tokens: Tokens, cfg: ModelConfig):
    """Parent positions and averaging weights for both input slots."""
    parents, weights = [], []
    for t in (tokens.in1, tokens.in2):
        valid = (t >= cfg.n_i) & (t < cfg.n_sources)
        parents.append(np.where(valid, t - cfg.n_i, 0))
        weights.append(valid.astype(np.float64))
    count = np.maximum(weights[0] + weights[1], 1.0)
    return parents, [w / count for w in weights]


def embed(tokens: Tokens, params: Params, cfg: ModelConfig, return_cache: bool = False):
    """Per-node vectors after the parent bias, shape (B, n_c, d_model)."""
    tokens = tokens.batched
    n = tokens.in1.shape[1]
    e = np.concatenate(
        [
            params["embed.in1"][tokens.in1],
            params["embed.in2"][tokens.in2],
            params["embed.func"][tokens.func],
        ],
        axis=-1,
    ) + params["embed.pos"][None, :n]
    parents, weights = _parents(tokens, cfg)
    bias = np.zeros_like(e)
    for par, w in zip(parents, weights):
        bias += w[..., None] * np.take_along_axis(e, par[..., None], axis=1)
    x = e + cfg.c_par * bias
    if return_cache:
        return x, (parents, weights)
    return x


# ── Forward / backward ────────────────────────────────────────────────────────

@dataclass
class ForwardCache:
    tokens: Tokens
    parents: Any
    layers: list
    final_ln: Any
    xf: np.ndarray
    sensitivity: np.ndarray


def forward(tokens: Tokens, params: Params, cfg: ModelConfig) -> tuple[ModelOutput, ForwardCache]:
    tokens = tokens.batched
    x, parents = embed(tokens, params, cfg, return_cache=True)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    layer_caches = []
    for l in range(cfg.layers):
        pre = f"layer{l}."
        h, ln1 = _layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], cfg.ln_eps)
        q = _split_heads(h @ params[pre + "attn.wq"] + params[pre + "attn.bq"], cfg.heads)
        k = _split_heads(h @ params[pre + "attn.wk"] + params[pre + "attn.bk"], cfg.heads)
        v = _split_heads(h @ params[pre + "attn.wv"] + params[pre + "attn.bv"], cfg.heads)
        a = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = _merge_heads(a @ v)
        x = x + o @ params[pre + "attn.wo"] + params[pre + "attn.bo"]

        h2, ln2 = _layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], cfg.ln_eps)
        u = h2 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        g, t = _gelu(u)
        x = x + g @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        layer_caches.append((h, ln1, q, k, v, a, o, h2, ln2, u, g, t))

    xf, final_ln = _layer_norm(x, params["final.ln.g"], params["final.ln.b"], cfg.ln_eps)
    sens = _sigmoid(xf @ params["head.sens.w"] + params["head.sens.b"])[..., 0]
    out = ModelOutput(
        func_logits=xf @ params["head.func.w"] + params["head.func.b"],
        input_logits=xf @ params["head.input.w"] + params["head.input.b"],
        sensitivity=sens,
    )
    return out, ForwardCache(tokens, parents, layer_caches, final_ln, xf, sens)


def infer(tokens: Tokens, params: Params, cfg: ModelConfig) -> ModelOutput:
    return forward(tokens, params, cfg)[0]


def backward(
    cache: ForwardCache,
    params: Params,
    cfg: ModelConfig,
    d_func: np.ndarray,
    d_input: np.ndarray,
    d_sens: np.ndarray,
) -> Params:
    """Gradients of a scalar loss given its gradients w.r.t. the three heads."""
    grads = zeros_like(params)
    xf = cache.xf

    dz = (d_sens * cache.sensitivity * (1.0 - cache.sensitivity))[..., None]
    grads["head.func.w"], grads["head.func.b"] = _linear_grads(xf, d_func)
    grads["head.input.w"], grads["head.input.b"] = _linear_grads(xf, d_input)
    grads["head.sens.w"], grads["head.sens.b"] = _linear_grads(xf, dz)
    dxf = d_func @ params["head.func.w"].T + d_input @ params["head.input.w"].T + dz @ params["head.sens.w"].T
    dx, grads["final.ln.g"], grads["final.ln.b"] = _layer_norm_backward(dxf, params["final.ln.g"], cache.final_ln)

    scale = 1.0 / math.sqrt(cfg.head_dim)
    for l in reversed(range(cfg.layers)):
        pre = f"layer{l}."
        h, ln1, q, k, v, a, o, h2, ln2, u, g, t = cache.layers[l]

        # feed-forward branch
        grads[pre + "ffn.w2"], grads[pre + "ffn.b2"] = _linear_grads(g, dx)
        du = (dx @ params[pre + "ffn.w2"].T) * _gelu_grad(u, t)
        grads[pre + "ffn.w1"], grads[pre + "ffn.b1"] = _linear_grads(h2, du)
        dh2 = du @ params[pre + "ffn.w1"].T
        dln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layer_norm_backward(dh2, params[pre + "ln2.g"], ln2)
        dx = dx + dln

        # attention branch
        grads[pre + "attn.wo"], grads[pre + "attn.bo"] = _linear_grads(o, dx)
        do = _split_heads(dx @ params[pre + "attn.wo"].T, cfg.heads)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dh = np.zeros_like(h)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dproj = _merge_heads(dproj)
            grads[pre + f"attn.w{name}"], grads[pre + f"attn.b{name}"] = _linear_grads(h, dproj)
            dh += dproj @ params[pre + f"attn.w{name}"].T
        dln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layer_norm_backward(dh, params[pre + "ln1.g"], ln1)
        dx = dx + dln

    # parent bias: x = e + c_par * sum_s w_s * e[parent_s]
    tokens = cache.tokens
    parents, weights = cache.parents
    de = dx.copy()
    batch_index = np.broadcast_to(np.arange(dx.shape[0])[:, None], parents[0].shape)
    for par, w in zip(parents, weights):
        np.add.at(de, (batch_index, par), cfg.c_par * w[..., None] * dx)

    n = de.shape[1]
    grads["embed.pos"][:n] = de.sum(axis=0)
    di = cfg.d_input
    np.add.at(grads["embed.in1"], tokens.in1, de[..., :di])
    np.add.at(grads["embed.in2"], tokens.in2, de[..., di:2 * di])
    np.add.at(grads["embed.func"], tokens.func, de[..., 2 * di:])
    return grads


# ── Mutation plan ─────────────────────────────────────────────────────────────

def permissible_sources(n_i: int, n_c: int) -> np.ndarray:
    """(n_c, n_i + n_c) mask: node p may read IDs below n_i + p."""
    limits = n_i + np.arange(n_c)
    return np.arange(n_i + n_c)[None, :] < limits[:, None]


def mutation_distribution(
    out: ModelOutput,
    active: tuple[int, ...],
    n_i: int,
    index: int = 0,
) -> MutationDistribution:
    func_logits = out.func_logits[index]
    input_logits = out.input_logits[index]
    sens = out.sensitivity[index]
    n_c = input_logits.shape[0]

    location = np.zeros(n_c)
    idx = np.asarray(active, dtype=np.int64)
    if idx.size:
        location[idx] = sens[idx]
        total = location.sum()
        if total > 0 and np.isfinite(total):
            location /= total
        else:
            logger.warning("Sensitivity vanished on all active nodes; using uniform locations")
            location[idx] = 1.0 / idx.size

    restricted = np.where(permissible_sources(n_i, n_c), input_logits, -np.inf)
    return MutationDistribution(
        location_probs=location,
        function_probs=_softmax(func_logits),
        input_probs=_softmax(restricted),
    )


# ── Checkpoints ───────────────────────────────────────────────────────────────

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: str, cfg: ModelConfig, params: Params) -> None:
    """npz-compatible archive with fixed member timestamps (byte-stable)."""
    members = {"__config__": np.array(json.dumps(asdict(cfg), sort_keys=True))}
    members.update(params)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(members):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(members[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str) -> tuple[ModelConfig, Params]:
    with np.load(path, allow_pickle=False) as data:
        if "__config__" not in data.files:
            raise ModelMismatch(f"{path}: no model config stored")
        try:
            cfg = ModelConfig(**json.loads(data["__config__"].item()))
        except (TypeError, ValueError) as exc:
            raise ModelMismatch(f"{path}: unreadable model config ({exc})") from exc
        params = {k: data[k].copy() for k in data.files if k != "__config__"}
    expected = init_params(cfg, np.random.default_rng(0))
    for name, arr in expected.items():
        if name not in params or params[name].shape != arr.shape:
            raise ModelMismatch(f"{path}: tensor {name!r} missing or mis-shaped")
    return cfg, params


class MutationModel:
    """Trained parameters plus an inference counter, used by the hybrid search."""

    def __init__(self, cfg: ModelConfig, params: Params):
        self.cfg = cfg
        self.params = params
        self.inferences = 0

    @classmethod
    def load(cls, path: str) -> "MutationModel":
        cfg, params = load_checkpoint(path)
        logger.info("Loaded model %s (n_i=%d, n_c=%d, d_model=%d, layers=%d)",
                    path, cfg.n_i, cfg.n_c, cfg.d_model, cfg.layers)
        return cls(cfg, params)

    def check_compatible(self, c: Chromosome) -> None:
        if c.params.n_i != self.cfg.n_i or c.params.n_c != self.cfg.n_c:
            raise ModelMismatch(
                f"model expects n_i={self.cfg.n_i}, n_c={self.cfg.n_c}; "
                f"chromosome has n_i={c.params.n_i}, n_c={c.params.n_c}"
            )
        if c.outputs is not None:
            raise ModelMismatch("hybrid search needs a chromosome in transformer form")

    def distribution(self, c: Chromosome) -> MutationDistribution:
        self.inferences += 1
        out = infer(tokenize(c), self.params, self.cfg)
        return mutation_distribution(out, c.active, c.params.n_i)
