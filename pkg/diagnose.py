"""
Run this first to check that the toolchain computes what it should.
  python diagnose.py
Each step prints pass/fail; nothing is written to disk.
"""
import sys

import numpy as np

# ── load env ──────────────────────────────────────────────────────────────────
from dotenv import load_dotenv
load_dotenv()
from src.cgp import CircuitParams, Gate, random_chromosome
from src.config import cfg
from src.evaluator import evaluator_for, simulate_exhaustive
from src.seeds import SEED_KINDS, seed_multiplier
from src.transformer import ModelConfig, backward, forward, init_params, tokenize

FAILED = []


def check(label, fn):
    print(f"\n{'─'*50}\n🔍 {label}")
    try:
        result = fn()
        print(f"   ✅ OK — {result}")
    except AssertionError as e:
        FAILED.append(label)
        print(f"   ❌ FAILED: {e}")
    except Exception as e:
        FAILED.append(label)
        print(f"   ❌ ERROR: {type(e).__name__}: {e}")


def _naive_outputs(c, assignment):
    n_i = c.params.n_i
    values = [(assignment >> j) & 1 for j in range(n_i)]
    for in1, in2, func in c.rows:
        x, y = values[in1], values[in2]
        values.append({
            Gate.INV: 1 - x, Gate.AND: x & y, Gate.OR: x | y, Gate.XOR: x ^ y,
            Gate.NAND: 1 - (x & y), Gate.NOR: 1 - (x | y), Gate.XNOR: 1 - (x ^ y),
        }[Gate(func)])
    return sum(values[o] << i for i, o in enumerate(c.output_ids()))


# ── 1. Seeds are exact ────────────────────────────────────────────────────────
def test_seeds():
    ev = evaluator_for(4)
    for kind in SEED_KINDS:
        m = ev.metrics(seed_multiplier(kind, 4))
        assert m.wce == 0 and m.wce_zr == 0, f"{kind}: wce={m.wce}"
    return f"{len(SEED_KINDS)} 4-bit seed kinds have WCE = 0"

# ── 2. Bit-parallel simulator vs per-vector interpreter ───────────────────────
def test_simulator():
    rng = np.random.default_rng(1)
    params = CircuitParams.multiplier(4, 40)
    for _ in range(20):
        c = random_chromosome(params, rng)
        fast = simulate_exhaustive(c)
        slow = [_naive_outputs(c, i) for i in range(256)]
        assert list(fast) == slow, "simulation mismatch"
    return "20 random 4-bit circuits agree on all 256 inputs"

# ── 3. Staged fitness matches unstaged ────────────────────────────────────────
def test_staged_fitness():
    rng = np.random.default_rng(2)
    ev = evaluator_for(4)
    params = CircuitParams.multiplier(4, 40)
    for _ in range(100):
        c = random_chromosome(params, rng)
        for eps in (0, 2, 12):
            assert ev.fitness(c, eps) == ev.fitness_unstaged(c, eps)
    return "100 random circuits × 3 thresholds"

# ── 4. Gradient check on a toy model ──────────────────────────────────────────
def test_gradients():
    rng = np.random.default_rng(3)
    mc = ModelConfig(n_i=4, n_c=6, d_model=8, heads=2, layers=1, ffn_hidden=16)
    params = init_params(mc, rng, scale=0.5)
    c = random_chromosome(CircuitParams.multiplier(2, 6), rng, transformer_form=True)
    tokens = tokenize(c)
    out, cache = forward(tokens, params, mc)
    wf = rng.normal(size=out.func_logits.shape)
    grads = backward(cache, params, mc, wf, np.zeros_like(out.input_logits), np.zeros_like(out.sensitivity))
    name, idx, h = "layer0.attn.wq", (1, 2), 1e-5
    params[name][idx] += h
    up = (forward(tokens, params, mc)[0].func_logits * wf).sum()
    params[name][idx] -= 2 * h
    down = (forward(tokens, params, mc)[0].func_logits * wf).sum()
    params[name][idx] += h
    numeric = (up - down) / (2 * h)
    assert abs(numeric - grads[name][idx]) < 1e-6 * max(1.0, abs(numeric)), \
        f"analytic {grads[name][idx]:.3e} vs numeric {numeric:.3e}"
    return f"{name}{idx}: {numeric:.6e}"

# ── 5. Slack configuration ────────────────────────────────────────────────────
def test_slack():
    if not cfg.SLACK_BOT_TOKEN:
        return "SLACK_BOT_TOKEN not set — summaries will not be posted"
    return f"summaries go to {cfg.SLACK_REPORT_CHANNEL}"


# ── Run all ───────────────────────────────────────────────────────────────────
if __name__ == "__main__":
    print("=" * 50)
    print("axmul-evolve — Diagnostics")
    print("=" * 50)

    check("Seed multipliers are exact", test_seeds)
    check("Bit-parallel simulator vs naive interpreter", test_simulator)
    check("Staged vs unstaged fitness", test_staged_fitness)
    check("Transformer gradient spot check", test_gradients)
    check("Slack configuration", test_slack)

    print(f"\n{'='*50}\nDone. Fix any ❌ above before running main.py\n")
    sys.exit(1 if FAILED else 0)
