"""
Central finite-difference checks of every differentiable op.

Each check builds small seeded inputs, contracts the op's output with a
fixed random weight tensor into a scalar, and compares the tape gradient
against (f(x + h) - f(x - h)) / 2h. All arithmetic runs in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import NumericError
from .layers import Dropout, LayerState, forward
from .tensor import GradTape, Tensor
from .trainer import bce_loss

logger = logging.getLogger(__name__)

STEP = 1e-3
TOLERANCE = 1e-3
DEFAULT_TRIALS = 100

OpFn = Callable[[List[Tensor], Optional[GradTape]], Tensor]


@dataclass(frozen=True)
class CheckCase:
    inputs: List[np.ndarray]
    fn: OpFn


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(scale, 1e-12))


def _contract(out: Tensor, weights: Tensor, tape: Optional[GradTape]) -> Tensor:
    return T.reduce_sum(T.mul(out, weights, tape), tape)


def check_case(case: CheckCase, rng: np.random.Generator, step: float = STEP) -> float:
    """Relative error between tape and central-difference gradients for one case."""
    with T.default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in case.inputs]
        probe = case.fn([Tensor(a) for a in arrays], None)
        weights = Tensor(rng.standard_normal(probe.shape))

        tape = GradTape()
        leaves = [Tensor(a, trainable=True, name=f"input{i}") for i, a in enumerate(arrays)]
        T.backward(_contract(case.fn(leaves, tape), weights, tape), tape)
        analytic = np.concatenate([leaf.grad.ravel() for leaf in leaves])

        def f() -> float:
            return _contract(case.fn([Tensor(a) for a in arrays], None), weights, None).item()

        numeric = []
        for a in arrays:
            flat = a.reshape(-1)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + step
                plus = f()
                flat[k] = original - step
                minus = f()
                flat[k] = original
                numeric.append((plus - minus) / (2 * step))
        return relative_error(analytic, np.array(numeric))


# ============================================================
# Case generators
# ============================================================


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape)


def conv2d_case(rng: np.random.Generator) -> CheckCase:
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    padding = str(rng.choice(T.PADDINGS))
    c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    size = int(rng.integers(k, 6))
    x = rng.standard_normal((2, c, size, size))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    return CheckCase(
        [x, w, b], lambda t, tape: T.conv2d(t[0], t[1], t[2], (s, s), padding, tape)
    )


def _pool_case(mode: str, rng: np.random.Generator) -> CheckCase:
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    padding = str(rng.choice(T.PADDINGS))
    size = int(rng.integers(k, 6))
    shape = (2, 2, size, size)
    x = _distinct(rng, shape) if mode == "max" else rng.standard_normal(shape)
    return CheckCase([x], lambda t, tape: T.pool2d(t[0], mode, k, s, padding, tape))


def max_pool_case(rng: np.random.Generator) -> CheckCase:
    return _pool_case("max", rng)


def avg_pool_case(rng: np.random.Generator) -> CheckCase:
    return _pool_case("avg", rng)


def global_avg_pool_case(rng: np.random.Generator) -> CheckCase:
    return CheckCase([rng.standard_normal((2, 3, 3, 4))], lambda t, tape: T.global_avg_pool(t[0], tape))


def dense_case(rng: np.random.Generator) -> CheckCase:
    n, f, u = 3, int(rng.integers(1, 6)), int(rng.integers(1, 4))
    return CheckCase(
        [rng.standard_normal((n, f)), rng.standard_normal((f, u)), rng.standard_normal(u)],
        lambda t, tape: T.add(T.matmul(t[0], t[1], tape), t[2], tape),
    )


def flatten_case(rng: np.random.Generator) -> CheckCase:
    return CheckCase([rng.standard_normal((2, 2, 3, 3))], lambda t, tape: T.flatten(t[0], tape))


def batch_norm_case(rng: np.random.Generator) -> CheckCase:
    c = int(rng.integers(1, 4))
    shape = (4, c) if rng.random() < 0.5 else (3, c, 2, 2)
    x = rng.standard_normal(shape) * 2.0 + 0.5
    return CheckCase(
        [x, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)],
        lambda t, tape: T.batch_norm(t[0], t[1], t[2], tape=tape)[0],
    )


def dropout_case(rng: np.random.Generator) -> CheckCase:
    seed = int(rng.integers(0, 2**31))
    return CheckCase(
        [rng.standard_normal((3, 5))],
        lambda t, tape: T.dropout(t[0], 0.3, np.random.default_rng(seed), tape),
    )


def dropout_eval_case(rng: np.random.Generator) -> CheckCase:
    spec = Dropout(0.5, name="dropout")
    state = LayerState(mode="eval")
    return CheckCase([rng.standard_normal((3, 5))], lambda t, tape: forward(spec, state, t[0], tape))


def concat_case(rng: np.random.Generator) -> CheckCase:
    a = rng.standard_normal((2, int(rng.integers(1, 4)), 3, 3))
    b = rng.standard_normal((2, int(rng.integers(1, 4)), 3, 3))
    return CheckCase([a, b], lambda t, tape: T.concat(t, axis=1, tape=tape))


def relu_case(rng: np.random.Generator) -> CheckCase:
    return CheckCase([_away_from_zero(rng, (3, 4))], lambda t, tape: T.activate(t[0], "relu", tape))


def sigmoid_case(rng: np.random.Generator) -> CheckCase:
    return CheckCase([rng.standard_normal((3, 4)) * 2.0], lambda t, tape: T.activate(t[0], "sigmoid", tape))


def bce_sigmoid_case(rng: np.random.Generator) -> CheckCase:
    n = int(rng.integers(1, 8))
    labels = Tensor(rng.integers(0, 2, size=n).astype(np.float64))
    return CheckCase(
        [rng.standard_normal(n) * 2.0],
        lambda t, tape: bce_loss(T.activate(t[0], "sigmoid", tape), labels, tape),
    )


CHECKS: Dict[str, Callable[[np.random.Generator], CheckCase]] = {
    "conv2d": conv2d_case,
    "max_pool2d": max_pool_case,
    "avg_pool2d": avg_pool_case,
    "global_avg_pool": global_avg_pool_case,
    "dense": dense_case,
    "flatten": flatten_case,
    "batch_norm": batch_norm_case,
    "dropout": dropout_case,
    "dropout_eval": dropout_eval_case,
    "concat": concat_case,
    "relu": relu_case,
    "sigmoid": sigmoid_case,
    "bce_sigmoid": bce_sigmoid_case,
}


def run_checks(
    seed: int = 0,
    trials: int = DEFAULT_TRIALS,
    ops: Optional[Sequence[str]] = None,
) -> Dict[str, float]:
    """Max relative error per op over `trials` seeded cases each."""
    names = list(ops) if ops else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown ops {unknown}; available: {', '.join(CHECKS)}")

    results: Dict[str, float] = {}
    for name in names:
        rng = np.random.default_rng([seed, list(CHECKS).index(name)])
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, check_case(CHECKS[name](rng), rng))
        results[name] = worst
        logger.debug(f"[GradCheck] {name}: max relative error {worst:.3e} over {trials} trials")
    return results


def failures(results: Dict[str, float], tolerance: float = TOLERANCE) -> List[str]:
    return [name for name, err in results.items() if not err < tolerance]


def assert_gradients(seed: int = 0, trials: int = DEFAULT_TRIALS, tolerance: float = TOLERANCE) -> Dict[str, float]:
    results = run_checks(seed, trials)
    failed = failures(results, tolerance)
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return results
