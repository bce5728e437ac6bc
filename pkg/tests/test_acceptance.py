"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script with
``python3 tests/test_acceptance.py`` for just the summary lines.  On one core
the desk-scale run (criterion 6) takes a few minutes and the fusion ablation
(criterion 7, fifteen 30-epoch trainings) about half an hour.
"""

from __future__ import annotations

import filecmp
import itertools
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from vitcat import cachesim as cs
from vitcat import cli
from vitcat.gradcheck import run_gradcheck
from vitcat.model import (
    REFERENCE_VARIANTS,
    ViTCAT,
    ViTConfig,
    count_params,
    cross_attention_fuse,
    multihead_attention,
    patch_content_time,
    patch_specs,
    patch_time_based,
    self_attention,
    unpatch_content_time,
    unpatch_time_based,
)
from vitcat.pipeline import (
    LabelParams,
    RequestMatrix,
    chronological_split,
    label_topk,
    node_samples,
    request_probability,
    skewness,
    window_requests,
)
from vitcat.tensor import Tensor, softmax_rows
from vitcat.trace import RequestEvent, SyntheticSpec, generate_synthetic, zipf_weights
from vitcat.train import TrainConfig, train

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> str:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    return line


@pytest.fixture
def say(capsys):
    def emit(line: str) -> None:
        with capsys.disabled():
            print("\n" + line)

    return emit


# -- independent reference implementations ---------------------------------

def naive_attention(q, k, v):
    n, dh = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = [sum(q[i, c] * k[j, c] for c in range(dh)) / math.sqrt(dh) for j in range(k.shape[0])]
        top = max(logits)
        ws = [math.exp(x - top) for x in logits]
        z = sum(ws)
        for j in range(k.shape[0]):
            for c in range(v.shape[1]):
                out[i, c] += ws[j] / z * v[j, c]
    return out


def naive_skew(h):
    total = sum(h)
    if total == 0:
        return 0.0
    mu = sum(w * (t + 1) for t, w in enumerate(h)) / total
    m2 = sum(w * (t + 1 - mu) ** 2 for t, w in enumerate(h)) / total
    m3 = sum(w * (t + 1 - mu) ** 3 for t, w in enumerate(h)) / total
    return 0.0 if m2 == 0 else m3 / m2**1.5


def naive_label(row, hist, k):
    n = len(row)
    total = sum(row)
    prob = [r / total if total else 0.0 for r in row]
    skews = [naive_skew(list(hist[:, l])) for l in range(n)]
    key = lambda l: (skews[l] < 0, prob[l], -l)
    best = max(itertools.combinations(range(n), k), key=lambda c: sorted((key(l) for l in c), reverse=True))
    y = np.zeros(n, dtype=np.uint8)
    y[list(best)] = 1
    return y


def naive_replay(ids, capacity, kind):
    cache, hits = [], 0
    for clock, c in enumerate(ids):
        row = next((r for r in cache if r[0] == c), None)
        if row is not None:
            row[1] += 1
            row[2] = clock
            hits += 1
            continue
        if len(cache) == capacity:
            rank = (lambda r: r[2]) if kind == "lru" else (lambda r: (r[1], r[2]))
            cache.remove(min(cache, key=rank))
        cache.append([c, 1, clock])
    return hits


# -- criteria ------------------------------------------------------------------

def criterion_1() -> tuple[bool, str]:
    rows, seconds = run_gradcheck(range(20))
    ops = [r for r in rows if not r.check.startswith("loss")]
    loss = [r for r in rows if r.check.startswith("loss")]
    ok = all(r.passed for r in rows) and seconds < 120
    return ok, (
        f"{len(rows)} checks over 20 seeds, worst op {max(r.rel_error for r in ops):.2e} (<1e-5), "
        f"worst loss {max(r.rel_error for r in loss):.2e} (<1e-4), {seconds:.0f}s (<120s)"
    )


def criterion_2() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst, worst_sum = 0.0, 0.0
    for _ in range(50):
        n, m = (int(v) for v in rng.integers(1, 9, size=2))
        d = int(rng.integers(2, 9))
        h = int(rng.integers(1, d + 1))
        dh = d // h
        z, z2 = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        heads = [rng.normal(size=(d, 3 * dh)) for _ in range(h)]
        w_out = rng.normal(size=(dh * h, d))
        # single-head self-attention
        sa = self_attention(Tensor(z), Tensor(heads[0])).data
        ref = naive_attention(z @ heads[0][:, :dh], z @ heads[0][:, dh : 2 * dh], z @ heads[0][:, 2 * dh :])
        worst = max(worst, np.abs(sa - ref).max())
        # multi-head: concatenated heads then the output map
        msa = multihead_attention(Tensor(z), [Tensor(w) for w in heads], Tensor(w_out)).data
        cat = np.hstack([naive_attention(z @ w[:, :dh], z @ w[:, dh : 2 * dh], z @ w[:, 2 * dh :]) for w in heads])
        worst = max(worst, np.abs(msa - cat @ w_out).max())
        # cross-attention: queries from one sequence, keys and values from the other
        wq, wk, wv = (rng.normal(size=(d, dh)) for _ in range(3))
        ca = cross_attention_fuse(Tensor(z), Tensor(z2), Tensor(wq), Tensor(wk), Tensor(wv)).data
        worst = max(worst, np.abs(ca - naive_attention(z @ wq, z2 @ wk, z2 @ wv)).max())
        s = softmax_rows(Tensor(rng.normal(scale=5, size=(n, m)))).data
        worst_sum = max(worst_sum, np.abs(s.sum(axis=1) - 1).max())
    ok = worst <= 1e-12 and worst_sum <= 1e-12
    return ok, f"max |impl - naive| {worst:.1e} (<=1e-12), max |row sum - 1| {worst_sum:.1e} (<=1e-12)"


def criterion_3() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(50):
        t_s = int(rng.integers(1, 5))
        L = t_s * int(rng.integers(2, 6))
        n_c = int(rng.integers(1, 12))
        cfg = ViTConfig(l_history=L, n_contents=n_c, t_s=t_s, k_top=1)
        x = rng.normal(size=(L, n_c))
        ts, mc = patch_specs(cfg)["ts"], patch_specs(cfg)["mc"]
        p_ts, p_mc = patch_time_based(x), patch_content_time(x, t_s)
        bad += not (
            ts.n_patches == n_c == p_ts.shape[0]
            and ts.patch_size == L == p_ts.shape[1]
            and mc.n_patches == L // t_s == p_mc.shape[0]
            and mc.patch_size == t_s * n_c == p_mc.shape[1]
            and np.array_equal(unpatch_time_based(p_ts), x)
            and np.array_equal(unpatch_content_time(p_mc, t_s), x)
        )
    return bad == 0, f"{50 - bad}/50 random configs with exact patch counts and round-trips"


def criterion_4() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    bad = {"window": 0, "prob": 0, "skew": 0, "label": 0}
    for _ in range(100):
        t, n_c = int(rng.integers(1, 25)), int(rng.integers(1, 7))
        v = rng.integers(0, 6, size=(t, n_c))
        w = int(rng.integers(1, t + 1))
        ref = np.array([[sum(v[u * w + i, l] for i in range(w)) for l in range(n_c)] for u in range(t // w)])
        bad["window"] += not np.array_equal(window_requests(RequestMatrix(v, 0, 1), w).values, ref.reshape(-1, n_c))
        row = rng.integers(0, 9, size=n_c)
        total = sum(row)
        bad["prob"] += not np.allclose(request_probability(row), [r / total if total else 0 for r in row], atol=1e-15)
        h = rng.integers(0, 9, size=int(rng.integers(2, 12)))
        bad["skew"] += not math.isclose(skewness(h), naive_skew(list(h)), rel_tol=1e-9, abs_tol=1e-12)
        n, L = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        k = int(rng.integers(1, n + 1))
        r, hist = rng.integers(0, 5, size=n), rng.integers(0, 5, size=(L, n))
        bad["label"] += not np.array_equal(label_topk(r, hist, LabelParams(k, L)), naive_label(r, hist, k))
    antisym = sum(
        skewness(h[::-1]) != -skewness(h)
        for h in (rng.integers(0, 100, size=int(rng.integers(2, 30))) for _ in range(1000))
    )
    ramps = all(skewness([2**t for t in range(1, L + 1)]) < 0 for L in range(3, 30))
    ok = not any(bad.values()) and antisym == 0 and ramps
    return ok, (
        f"oracle mismatches over 100 instances {bad}, exact antisymmetry violations {antisym}/1000, "
        f"geometric ramps negative: {ramps}"
    )


def criterion_5() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    mismatches = violations = 0
    traces = 200
    for _ in range(traces):
        nc, cap = int(rng.integers(3, 21)), int(rng.integers(1, 6))
        ids = rng.permutation(nc)[rng.choice(nc, 200, p=zipf_weights(nc, rng.uniform(0, 1.5)))]
        events = [RequestEvent(0, int(c), t, "0") for t, c in enumerate(ids)]
        for kind, replay in (("lru", cs.lru_replay), ("lfu", cs.lfu_replay)):
            mismatches += replay(events, cap).total_hits != naive_replay(ids, cap, kind)
        w = int(rng.choice([10, 20, 25]))
        wm = window_requests(RequestMatrix(np.array([np.bincount([c], minlength=nc) for c in ids]), 0, 1), w)
        L, k = 2, min(cap, nc)
        clair = cs.simulate_clairvoyant(wm, k, L).hit_ratio
        others = [
            cs.lru_replay(events, cap, wm).restrict(L).hit_ratio,
            cs.lfu_replay(events, cap, wm).restrict(L).hit_ratio,
            cs.simulate_refresh_policy(wm, lambda h: cs.popcaching_predict(h, k), k, L).hit_ratio,
            cs.simulate_refresh_policy(wm, lambda h: rng.choice(nc, k, replace=False), k, L).hit_ratio,
        ]
        violations += any(r > clair for r in others)
    ok = mismatches == 0 and violations == 0
    return ok, (
        f"replay mismatches vs naive {mismatches}/{2 * traces}, "
        f"traces where a policy beat clairvoyant {violations}/{traces}"
    )


DESK_CONFIG = """\
n_contents=100
n_events=100000
n_regimes=2
zipf_alpha=1.0
horizon=100000
n_nodes=6
resolution=100
window_len=10
l_history=8
t_s=2
k_top=10
d_model=6
n_heads=2
mlp_size=8
epochs=30
batch_size=16
"""


def criterion_6() -> tuple[bool, str]:
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "desk.cfg"
        cfg.write_text(DESK_CONFIG)
        start = time.perf_counter()
        codes = [cli.run([c, "--config", str(cfg), "--out", tmp, "--seed", "0"])
                 for c in ("gen-trace", "preprocess", "train", "simulate")]
        seconds = time.perf_counter() - start
        if any(codes):
            return False, f"pipeline exit codes {codes}"
        ratios = {}
        for line in (Path(tmp) / "sim_summary.csv").read_text().splitlines()[1:]:
            name, _, _, ratio = line.split(",")
            ratios[name] = float(ratio)
    v = ratios["vitcat"]
    ok = v >= ratios["lfu"] and v >= ratios["lru"] and v <= ratios["clairvoyant"]
    shown = ", ".join(f"{p} {ratios[p]:.3f}" for p in ("vitcat", "lru", "lfu", "popcaching", "clairvoyant"))
    return ok, f"network hit ratios {shown}; {seconds:.0f}s"


def ablation_dataset():
    events = generate_synthetic(SyntheticSpec(n_contents=10, n_events=100_000, horizon=100_000, seed=0))
    _, samples = node_samples(events, LabelParams(1, 8), 10, 10, 10)
    return chronological_split(samples, 0.8)


def criterion_7() -> tuple[bool, str]:
    tr, te = ablation_dataset()
    acc = {}
    for fusion in ("cross_attention", "self_attention", "fully_connected"):
        cfg = ViTConfig(n_contents=10, k_top=1, fusion=fusion)
        acc[fusion] = [
            train(ViTCAT.initialize(cfg, seed), tr, TrainConfig(epochs=30, batch_size=8, seed=seed), te)[1][-1].topk_accuracy
            for seed in range(5)
        ]
    ca, sa, fc = acc["cross_attention"], acc["self_attention"], acc["fully_connected"]
    wins = sum(a >= b for a, b in zip(ca, sa))
    fc_wins = sum(a >= b for a, b in zip(ca, fc))
    fmt = lambda xs: "[" + " ".join(f"{x:.3f}" for x in xs) + "]"
    return wins >= 3, (
        f"CA >= SA on {wins}/5 seeds (need 3); CA {fmt(ca)} SA {fmt(sa)}; "
        f"logged only: CA >= FC on {fc_wins}/5, FC {fmt(fc)}"
    )


DETERMINISM_CONFIG = """\
n_contents=10
n_events=20000
horizon=20000
n_nodes=2
n_zips=10
resolution=20
window_len=10
k_top=1
d_model=6
n_heads=2
mlp_size=8
epochs=3
batch_size=8
"""


def criterion_8() -> tuple[bool, str]:
    outputs = ["trace.csv", "stats.csv", "metrics.csv", "accuracy.csv", "sim.csv", "sim_summary.csv",
               "checkpoints/node0.vckp", "checkpoints/node1.vckp", "samples/node0.bin", "samples/node1.bin"]
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "det.cfg"
        cfg.write_text(DETERMINISM_CONFIG)
        for run in ("a", "b"):
            for c in ("gen-trace", "preprocess", "train", "eval", "simulate"):
                if cli.run([c, "--config", str(cfg), "--out", str(Path(tmp) / run), "--seed", "11"]):
                    return False, f"run {run} command {c} failed"
        differ = [o for o in outputs if not filecmp.cmp(Path(tmp, "a", o), Path(tmp, "b", o), shallow=False)]
    return not differ, f"{len(outputs) - len(differ)}/{len(outputs)} outputs byte-identical across two runs"


def criterion_9() -> tuple[bool, str]:
    tiny = ViTConfig(l_history=8, n_contents=4, t_s=2, d_model=6, n_heads=2, n_layers=1)
    hand = {
        # hand enumeration, tensor by tensor, of each config's parameters
        "tiny CA": (tiny, 836),
        "tiny FC": (ViTConfig(**{**tiny.__dict__, "fusion": "fully_connected"}), 842),
        "2-layer SA": (ViTConfig(l_history=6, n_contents=3, t_s=3, d_model=4, n_heads=1, n_layers=2,
                                  mlp_size=5, mlp_layers=2, fusion="self_attention"), 819),
    }
    exact = {name: count_params(cfg) == total for name, (cfg, total) in hand.items()}
    counts = {v: count_params(ViTConfig.variant(v, l_history=8, n_contents=100, t_s=2, k_top=10))
              for v in REFERENCE_VARIANTS}
    # each pair varies one dimension: d, heads, MLP size, MLP depth, layers
    pairs = [(1, 2), (3, 2), (4, 2), (4, 5), (2, 6)]
    monotone = all(counts[a] < counts[b] for a, b in pairs)
    ok = all(exact.values()) and monotone
    return ok, f"hand totals exact {exact}; variant counts {counts}; monotone pairs {pairs}: {monotone}"


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 10)}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, say):
    ok, detail = CRITERIA[n]()
    say(report(n, ok, detail))
    assert ok, RESULTS[n]


if __name__ == "__main__":
    for n, fn in CRITERIA.items():
        print(report(n, *fn()), flush=True)
