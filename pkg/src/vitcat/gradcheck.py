"""Finite-difference gradient suite over every differentiable op and the full loss.

Each check draws its inputs from a seeded generator, so a (check, seed) pair
always evaluates the same function at the same point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from vitcat import tensor as T
from vitcat.model import ViTConfig, forward, init_params
from vitcat.tensor import Tensor, finite_diff_check
from vitcat.train import bce_loss

OP_TOLERANCE = 1e-5
LOSS_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    check: str
    seed: int
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def _weighted(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    # a random linear read-out makes every output coordinate matter
    w = Tensor(rng.normal(size=shape))
    return lambda t: T.sum_all(T.mul(t, w))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    # rows of width 2 make layer norm output +-1, leaving only eps-sized gradients
    m, n, k = (int(v) for v in rng.integers(3, 7, size=3))
    a = rng.normal(size=(m, k))
    b = Tensor(rng.normal(size=(k, n)))
    other = Tensor(rng.normal(size=(m, k)))
    row = Tensor(rng.normal(size=(1, k)))
    gamma = rng.normal(size=(1, k))
    beta = rng.normal(size=(1, k))
    r_mk = _weighted(rng, (m, k))
    r_mn = _weighted(rng, (m, n))
    r_km = _weighted(rng, (k, m))
    r_cat_r = _weighted(rng, (2 * m, k))
    r_cat_c = _weighted(rng, (m, 2 * k))
    cut = int(rng.integers(1, m))
    r_slice_r = _weighted(rng, (m - cut, k))
    cut_c = int(rng.integers(1, k))
    r_slice_c = _weighted(rng, (m, cut_c))
    s = float(rng.normal())
    return {
        "matmul": (lambda t: r_mn(T.matmul(t, b)), a),
        "transpose": (lambda t: r_km(T.transpose(t)), a),
        "add": (lambda t: r_mk(T.add(t, other)), a),
        "add_row_broadcast": (lambda t: r_mk(T.add(other, t)), row.data),
        "sub": (lambda t: r_mk(T.sub(other, t)), a),
        "mul": (lambda t: r_mk(T.mul(t, other)), a),
        "scale": (lambda t: r_mk(T.scale(t, s)), a),
        "add_scalar": (lambda t: r_mk(T.add_scalar(t, s)), a),
        "sum_all": (lambda t: T.scale(T.sum_all(t), s), a),
        "mean_all": (lambda t: T.scale(T.mean_all(t), s), a),
        "softmax_rows": (lambda t: r_mk(T.softmax_rows(t)), a),
        "layer_norm.x": (lambda t: r_mk(T.layer_norm(t, Tensor(gamma), Tensor(beta))), a),
        "layer_norm.gamma": (lambda t: r_mk(T.layer_norm(Tensor(a), t, Tensor(beta))), gamma),
        "layer_norm.beta": (lambda t: r_mk(T.layer_norm(Tensor(a), Tensor(gamma), t)), beta),
        "gelu": (lambda t: r_mk(T.gelu(t)), a),
        "relu": (lambda t: r_mk(T.relu(t)), _away_from_zero(rng, (m, k))),
        "sigmoid": (lambda t: r_mk(T.sigmoid(t)), a),
        "log": (lambda t: r_mk(T.log(t)), rng.uniform(0.2, 3.0, size=(m, k))),
        "clip": (lambda t: r_mk(T.clip(t, -0.5, 0.5)), rng.uniform(-0.4, 0.4, size=(m, k))),
        "concat_rows": (lambda t: r_cat_r(T.concat_rows([t, other])), a),
        "concat_cols": (lambda t: r_cat_c(T.concat_cols([other, t])), a),
        "slice_rows": (lambda t: r_slice_r(T.slice_rows(t, cut, m)), a),
        "slice_cols": (lambda t: r_slice_c(T.slice_cols(t, 0, cut_c)), a),
    }


def op_checks(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        CheckResult(name, seed, finite_diff_check(f, x), OP_TOLERANCE)
        for name, (f, x) in _op_cases(rng).items()
    ]


def loss_check(config: ViTConfig, seed: int, h: float = 1e-5) -> CheckResult:
    """Worst relative error of dLoss/dParam over every parameter tensor."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    x = rng.poisson(2.0, size=(config.l_history, config.n_contents)) / 4.0
    y = np.zeros(config.n_contents)
    y[rng.choice(config.n_contents, config.k_top, replace=False)] = 1
    worst = 0.0
    for name in params:
        def f(t, name=name):
            bound = dict(params)
            bound[name] = t
            return bce_loss(forward(x, bound, config), y)

        worst = max(worst, finite_diff_check(f, params[name], h))
    return CheckResult(f"loss[{config.fusion}]", seed, worst, LOSS_TOLERANCE)


def run_gradcheck(seeds, config: ViTConfig | None = None) -> tuple[list[CheckResult], float]:
    """All op checks and the end-to-end loss check per seed; returns rows and seconds."""
    config = config or ViTConfig()
    start = time.perf_counter()
    rows: list[CheckResult] = []
    for seed in seeds:
        rows += op_checks(seed)
        rows.append(loss_check(config, seed))
    return rows, time.perf_counter() - start
