"""Central finite-difference checks for the tape, plus a suite over every registered op."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

GRADCHECK_TOL = 1e-4


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must return a scalar tensor.  The relative error per element is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError(f"gradcheck closure must return a scalar, got shape {out.shape}")
    T.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*[Tensor(s.data) for s in inputs]).data)
            flat[i] = orig - h
            fm = float(fn(*[Tensor(s.data) for s in inputs]).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(gflat[i] - num) / max(1e-8, abs(gflat[i]) + abs(num))
            worst = max(worst, err)
    return worst


@dataclass
class GradcheckResult:
    op: str
    error: float
    passed: bool
    checked: int = 0
    skipped: int = 0


def _random_adjacency(rng, n, p=0.3):
    from .graph import SparseAdjacency

    dense = rng.random((n, n)) < p
    np.fill_diagonal(dense, False)
    return SparseAdjacency.from_dense(dense)


def _cases(rng) -> dict[str, Callable[[], tuple[Callable, list[Tensor]]]]:
    """Closure factories, one per differentiable op, on small random shapes."""

    def r(*shape, low=-1.0, high=1.0):
        return Tensor(rng.uniform(low, high, size=shape))

    def away_from_zero(*shape):
        x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return Tensor(x)

    weights = r(2, 3, 3, 3, 3)
    proj = r(3, 4, 5)
    adj = _random_adjacency(rng, 6)

    def wsum(t):
        return T.sum(T.mul(t, Tensor(proj_for(t.shape))))

    cache: dict[tuple, np.ndarray] = {}

    def proj_for(shape):
        if shape not in cache:
            cache[shape] = rng.uniform(-1, 1, size=shape)
        return cache[shape]

    return {
        "add": lambda: (lambda a, b: wsum(T.add(a, b)), [r(3, 4), r(3, 4)]),
        "sub": lambda: (lambda a, b: wsum(T.sub(a, b)), [r(3, 4), r(1, 4)]),
        "mul": lambda: (lambda a, b: wsum(T.mul(a, b)), [r(3, 4), r(3, 1)]),
        "div": lambda: (lambda a, b: wsum(T.div(a, b)), [r(3, 4), r(3, 4, low=0.5, high=1.5)]),
        "neg": lambda: (lambda a: wsum(T.neg(a)), [r(2, 3)]),
        "sum": lambda: (lambda a: wsum(T.sum(a, axis=1)), [r(3, 4)]),
        "reshape": lambda: (lambda a: wsum(T.reshape(a, (4, 3))), [r(3, 4)]),
        "transpose": lambda: (lambda a: wsum(T.transpose(a, (1, 0))), [r(3, 4)]),
        "matmul": lambda: (lambda a, b: wsum(T.matmul(a, b)), [r(3, 5), r(5, 2)]),
        "relu": lambda: (lambda a: wsum(T.relu(a)), [away_from_zero(3, 4)]),
        "sigmoid": lambda: (lambda a: wsum(T.sigmoid(a)), [r(3, 4, low=-3, high=3)]),
        "conv3d_valid": lambda: (lambda x, w, b: wsum(T.conv3d_valid(x, w, b)),
                                 [r(3, 5, 4, 4), Tensor(weights.data.copy()), r(2)]),
        "maxpool3d_2": lambda: (lambda x: wsum(T.maxpool3d_2(x)),
                                [Tensor(rng.permutation(2 * 4 * 4 * 4).reshape(2, 4, 4, 4) * 0.01)]),
        "upsample_nearest3d_2": lambda: (lambda x: wsum(T.upsample_nearest3d_2(x)), [r(2, 2, 1, 2)]),
        "crop3d": lambda: (lambda x: wsum(T.crop3d(x, (1, 0, 1), (2, 3, 2))), [r(2, 4, 3, 4)]),
        "concat": lambda: (lambda a, b: wsum(T.concat([a, b], axis=0)), [r(2, 2, 2, 2), r(3, 2, 2, 2)]),
        "layer_norm": lambda: (lambda x, g, b: wsum(T.layer_norm(x, g, b)), [r(5, 4), r(4), r(4)]),
        "spmm": lambda: (lambda h: wsum(T.spmm(adj, h, normalize=True)), [r(6, 3)]),
    }


def registered_ops() -> list[str]:
    return list(_cases(np.random.default_rng(0)))


def run_suite(seed: int = 0, h: float = 1e-5, tol: float = GRADCHECK_TOL) -> list[GradcheckResult]:
    """Gradcheck each registered differentiable op once, in 64-bit."""
    rng = np.random.default_rng(seed)
    results = []
    for name, make in _cases(rng).items():
        fn, inputs = make()
        err = gradcheck(fn, inputs, h=h)
        results.append(GradcheckResult(name, err, err < tol))
    return results


def _same_patterns(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def network_loss_gradcheck(variant: str = "UGnnReg", seed: int = 0, coords_per_tensor: int = 4,
                           directions: int = 3, h: float = 1e-5, max_redraws: int = 50) -> GradcheckResult:
    """Finite-difference check of the full dice-loss gradient of a smallest-legal network.

    Every parameter tensor contributes ``coords_per_tensor`` coordinates
    (largest gradients first, then random picks) and ``directions`` random
    directions test the whole gradient at once.  The loss is only
    piecewise smooth, so a stencil point whose relu signs, pooling winners
    or graph edges differ from the centre's straddles a kink and is
    replaced by another draw; ``skipped`` counts those.
    """
    from .network import NetworkSpec, build_network, output_shape, valid_input_dims
    from .training import dice_loss

    rng = np.random.default_rng(seed)
    n = valid_input_dims(variant, 4)
    spec = NetworkSpec(variant, input_dims=(n, n, n))
    net = build_network(spec, seed=seed, dtype=np.float64)
    for p in net.parameters():
        p.data = p.data + 0.01 * rng.normal(size=p.shape)      # non-zero biases
    x = rng.random((1, n, n, n))
    out = output_shape(spec)
    gt = (rng.random(out) > 0.6).astype(float)
    roi = (rng.random(out) > 0.2).astype(float)

    def loss():
        return dice_loss(net.forward(x), gt, roi, 1.0)

    net.zero_grad()
    with T.record_patterns() as centre:
        T.backward(loss())
    grads = {k: p.grad.copy() for k, p in net.params.items()}

    def value():
        with T.no_grad(), T.record_patterns() as pat:
            v = float(loss().data)
        return v, _same_patterns(pat, centre)

    worst, skipped, checked = 0.0, 0, 0
    for k, p in net.params.items():
        flat, g = p.data.reshape(-1), grads[k].reshape(-1)
        ranked = np.argsort(-np.abs(g), kind="stable")
        queue = [int(i) for i in ranked[:coords_per_tensor]]
        queue += [int(i) for i in rng.permutation(flat.size)][:max_redraws]
        done, seen = 0, set()
        for i in queue:
            if done >= coords_per_tensor:
                break
            if i in seen:
                continue
            seen.add(i)
            orig = flat[i]
            flat[i] = orig + h
            fp, ok_p = value()
            flat[i] = orig - h
            fm, ok_m = value()
            flat[i] = orig
            if not (ok_p and ok_m):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[i] - num) / max(1e-8, abs(g[i]) + abs(num)))
            done += 1
            checked += 1
    params = list(net.params.values())
    base = [p.data.copy() for p in params]
    done = 0
    for _ in range(directions + max_redraws):
        if done >= directions:
            break
        v = [rng.normal(size=p.shape) for p in params]
        ana = sum(float((grads[k] * d).sum()) for k, d in zip(net.params, v))
        vals = []
        for sign in (1, -1):
            for p, b, d in zip(params, base, v):
                p.data = b + sign * h * d
            vals.append(value())
        for p, b in zip(params, base):
            p.data = b
        (fp, ok_p), (fm, ok_m) = vals
        if not (ok_p and ok_m):
            skipped += 1
            continue
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
        done += 1
        checked += 1
    return GradcheckResult(f"network_loss[{variant}]", worst, worst < GRADCHECK_TOL, checked, skipped)
