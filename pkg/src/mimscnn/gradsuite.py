"""Finite-difference checks for every differentiable op, on random inputs.

Each case draws inputs in [-1, 1] (shapes at most 4x4x6x6) and reduces
the op output against a fixed random projection so every output element
contributes to the checked scalar. Piecewise-linear ops (relu, max pool,
top-k) are kept away from their kinks by spacing the values they compare.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .model import build_model
from .msconv import MSConvConfig, MSConvLayer
from .nn import Module, batchnorm2d, bce_with_logits, bilinear_resize, conv2d, fully_connected
from .pooling import TopKPool, topk_pool
from .tensor import Tensor, grad_check, precision, reduce_sum

TOLERANCE = {np.float32: 1e-2, np.float64: 1e-5}
# The difference quotient is always taken in float64, so the step only has
# to stay clear of relu and pooling kinks, not of float32 rounding. Batch
# norm divides by small batch deviations, which stretches a 1e-4 step far
# enough to cross kinks in the composites.
STEP = {np.float32: 1e-6, np.float64: 1e-6}


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = rng.uniform(-1, 1, out.shape)
    return lambda t: reduce_sum(t * Tensor(r))


def _spaced(rng: np.random.Generator, shape) -> np.ndarray:
    """Distinct values in [-1, 1] with gaps of at least 1 / size."""
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(-1, 1, n)).reshape(shape)


def _bind(module: Module, name: str, value: Tensor) -> None:
    *path, last = name.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    if last.isdigit():
        obj[int(last)] = value
    else:
        setattr(obj, last, value)


def _module_case(module: Module, forward: Callable, x: np.ndarray, rng: np.random.Generator):
    """Check ``forward(module, x)`` with respect to ``x`` and all parameters."""
    names = [n for n, _ in module.named_parameters()]
    values = [p.data.copy() for _, p in module.named_parameters()]
    proj = _project(forward(module, Tensor(x)), rng)

    def f(x, *params):
        for n, p in zip(names, params):
            _bind(module, n, p)
        return proj(forward(module, x))

    return f, [x] + values


def case_conv2d(rng):
    b, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.uniform(-1, 1, (b, ci, 6, 6))
    w, bias = rng.uniform(-1, 1, (co, ci, k, k)), rng.uniform(-1, 1, co)
    proj = _project(conv2d(Tensor(x), Tensor(w), Tensor(bias), stride, pad), rng)
    return lambda x, w, bias: proj(conv2d(x, w, bias, stride, pad)), [x, w, bias]


def case_bilinear_resize(rng):
    s = float(rng.choice([0.5, 0.75, 1.5, 2.0, rng.uniform(0.4, 2.0)]))
    x = rng.uniform(-1, 1, (rng.integers(1, 3), rng.integers(1, 4), rng.integers(3, 7), 6))
    proj = _project(bilinear_resize(Tensor(x), s), rng)
    return lambda x: proj(bilinear_resize(x, s)), [x]


def case_batchnorm2d(rng):
    c = int(rng.integers(1, 4))
    x = rng.uniform(-1, 1, (rng.integers(2, 5), c, 4, 4))
    gamma, beta = rng.uniform(0.5, 1.5, c), rng.uniform(-1, 1, c)

    def run(x, g, b):
        return batchnorm2d(x, g, b, np.zeros(c, np.float32), np.ones(c, np.float32), True)

    proj = _project(run(Tensor(x), Tensor(gamma), Tensor(beta)), rng)
    return lambda x, g, b: proj(run(x, g, b)), [x, gamma, beta]


def case_fully_connected(rng):
    b, n, m = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 4)
    x, w, bias = rng.uniform(-1, 1, (b, n)), rng.uniform(-1, 1, (n, m)), rng.uniform(-1, 1, m)
    proj = _project(fully_connected(Tensor(x), Tensor(w), Tensor(bias)), rng)
    return lambda x, w, bias: proj(fully_connected(x, w, bias)), [x, w, bias]


def case_bce_with_logits(rng):
    b = int(rng.integers(1, 5))
    logits = rng.uniform(-3, 3, (b, 1))
    labels = rng.integers(0, 2, (b, 1)).astype(np.float32)
    return lambda z: bce_with_logits(z, labels), [logits]


def case_topk_pool(rng):
    k = int(rng.integers(1, 6))
    n1, n2 = int(rng.integers(1, 12)), int(rng.integers(1, 12))
    vals = _spaced(rng, (n1 + n2,))
    logits = rng.uniform(-1, 1, k)
    pool = TopKPool(k)

    def f(a, b, z):
        pool.logits = z
        return topk_pool([a, b], pool) * 1.7

    return f, [vals[:n1], vals[n1:], logits]


def case_msconv(rng):
    scales = [0.75, 1.0] if rng.integers(0, 2) else [1.0, 0.5]
    cfg = MSConvConfig(scales, [(2, int(rng.integers(1, 3))), (3, int(rng.integers(1, 3)))])
    layer = MSConvLayer(2, cfg, rng)
    layer.scale_weights.data[...] = rng.uniform(0.5, 1.5, layer.scale_weights.shape)
    x = rng.uniform(-1, 1, (2, 2, 6, 6))
    outs = layer(Tensor(x))
    projs = [_project(o, rng) for o in outs]

    def run(m, x):
        return sum((p(o) for p, o in zip(projs, m(x))), Tensor(0.0))

    return _module_case(layer, run, x, rng)


_MODEL_CFG = dict(stem_channels=[2, 3], kernel_groups=[[2, 2], [3, 2]], scales=[0.75, 1.0], k=3)


def case_full_model(rng):
    cfg = ExperimentConfig(**_MODEL_CFG, seed=int(rng.integers(0, 2 ** 31)))
    model = build_model(cfg)
    model.train()
    labels = np.array([[1.0], [0.0]], dtype=np.float32)
    n = (2, 3)
    x = rng.uniform(-1, 1, (sum(n), 1, 16, 16))

    def run(m, x):
        return bce_with_logits(m.classifier(m.pooled_features_tensor(x, n)), labels)

    return _module_case(model, run, x, rng)


CASES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "bilinear_resize": case_bilinear_resize,
    "batchnorm2d": case_batchnorm2d,
    "fully_connected": case_fully_connected,
    "bce_with_logits": case_bce_with_logits,
    "topk_pool": case_topk_pool,
    "msconv": case_msconv,
    "full_model": case_full_model,
}

# large inputs are spot-checked on a random subset of coordinates
_MAX_ELEMENTS = {"full_model": 6, "msconv": 12}


def run_suite(instances: int = 20, dtype=np.float32, seed: int = 0, ops=None) -> dict:
    """Max relative error per op over ``instances`` random draws."""
    dtype = np.dtype(dtype).type
    rng = np.random.default_rng(seed)
    results = {}
    for name in ops or CASES:
        builder = CASES[name]
        t0 = time.perf_counter()
        worst = 0.0
        with precision(dtype):
            for _ in range(instances):
                f, inputs = builder(rng)
                err = grad_check(f, inputs, step=STEP[dtype], max_elements=_MAX_ELEMENTS.get(name), rng=rng)
                worst = max(worst, err)
        results[name] = {"max_error": worst, "instances": instances,
                         "tolerance": TOLERANCE[dtype], "passed": worst < TOLERANCE[dtype],
                         "seconds": round(time.perf_counter() - t0, 3)}
    return results
