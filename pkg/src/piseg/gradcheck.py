"""Central finite-difference checks against the autodiff tape.

The numerical side only ever calls the forward function on raw perturbed
arrays, so it shares no code with any backward rule.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

H_STEP = 1e-5
# Denominator floor.  Some gradients are exactly zero by symmetry (a key bias
# shifts a whole softmax row), where central differences return only
# roundoff, ~1e-10 at h=1e-5; such coordinates are judged on absolute error
# at this scale instead.
REL_FLOOR = 1e-5


def rel_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    coords: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:g}, {self.coords} coords)"


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, coords: Sequence[tuple] | None = None,
                 h: float = H_STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``arr`` (mutated in place, then restored)."""
    if coords is None:
        coords = list(np.ndindex(arr.shape))
    out = np.empty(len(coords))
    for i, idx in enumerate(coords):
        orig = arr[idx]
        arr[idx] = orig + h
        fp = fn()
        arr[idx] = orig - h
        fm = fn()
        arr[idx] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def check_function(name: str, fn: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-4,
                   h: float = H_STEP, max_coords: int | None = None, rng=None) -> CheckResult:
    """Compare tape gradients of ``fn(*inputs)`` (scalar) with central differences for every input."""
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    backward(loss)

    def scalar():
        return float(np.asarray(fn(*inputs).data).reshape(()))

    worst = 0.0
    total = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        num = numeric_grad(scalar, t.data, coords, h)
        ana = np.array([t.grad[c] for c in coords])
        if coords:
            worst = max(worst, float(rel_error(ana, num).max()))
        total += len(coords)
    return CheckResult(name, worst, tol, total)


# ----------------------------------------------------------------------------
# the suite behind ``piseg gradcheck``

def _weighted_sum(fn, out_shape, rng):
    """Scalar probe sum(fn(...) * R) with fixed random R, so every output entry matters."""
    from .tensor import Tensor

    weights = Tensor(rng.standard_normal(out_shape))
    return lambda *a: (fn(*a) * weights).sum()


def primitive_cases(rng):
    """(name, fn, inputs) for every primitive, with random 64-bit inputs."""
    from . import functional as F
    from . import tensor as T
    from .attention import AttentionConfig, init_attention_params, window_attention_map
    from .losses import ce_loss, dice_loss
    from .tensor import Tensor

    def P(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    def pos(*shape):
        return Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)

    def ws(fn, shape):
        return _weighted_sum(fn, shape, rng)

    cases = [
        ("add", ws(T.add, (3, 4)), [P(3, 4), P(1, 4)]),
        ("sub", ws(T.sub, (3, 4)), [P(3, 4), P(3, 1)]),
        ("mul", ws(T.mul, (3, 4)), [P(3, 4), P(3, 4)]),
        ("div", ws(T.div, (3, 4)), [P(3, 4), pos(3, 4)]),
        ("exp", ws(T.exp, (3, 4)), [P(3, 4)]),
        ("log", ws(T.log, (3, 4)), [pos(3, 4)]),
        ("sum_axis", ws(lambda x: T.tsum(x, axis=(0, 2)), (3,)), [P(2, 3, 4)]),
        ("mean", ws(lambda x: T.mean(x, axis=1, keepdims=True), (2, 1, 4)), [P(2, 3, 4)]),
        ("reshape", ws(lambda x: T.reshape(x, (4, 6)), (4, 6)), [P(2, 3, 4)]),
        ("transpose", ws(lambda x: T.transpose(x, (2, 0, 1)), (4, 2, 3)), [P(2, 3, 4)]),
        ("getitem", ws(lambda x: x[1, :, 1:3], (3, 2)), [P(2, 3, 4)]),
        ("take", ws(lambda x: T.take(x, np.array([0, 2, 2, 1, 0])), (5, 3)), [P(3, 3)]),
        ("pad2d", ws(lambda x: T.pad2d(x, 1, 2), (1, 2, 4, 5)), [P(1, 2, 3, 3)]),
        ("concat", ws(lambda a, b: T.concat([a, b], axis=1), (2, 5)), [P(2, 2), P(2, 3)]),
        ("matmul", ws(T.matmul, (2, 3, 5)), [P(2, 3, 4), P(2, 4, 5)]),
        ("linear", ws(F.linear, (2, 3, 5)), [P(2, 3, 4), P(5, 4), P(5)]),
        ("conv2d_s1", ws(lambda x, k, b: F.conv2d(x, k, b, 1, 1), (2, 4, 5, 5)), [P(2, 3, 5, 5), P(4, 3, 3, 3), P(4)]),
        ("conv2d_s2", ws(lambda x, k, b: F.conv2d(x, k, b, 2, 1), (1, 4, 3, 3)), [P(1, 3, 6, 6), P(4, 3, 3, 3), P(4)]),
        ("conv2d_k2s2", ws(lambda x, k, b: F.conv2d(x, k, b, 2, 0), (1, 4, 3, 3)), [P(1, 2, 6, 6), P(4, 2, 2, 2), P(4)]),
        ("dwconv2d", ws(F.dwconv2d, (1, 3, 8, 8)), [P(1, 3, 8, 8), P(3, 7, 7), P(3)]),
        ("deconv2d", ws(F.deconv2d, (1, 2, 8, 12)), [P(1, 3, 2, 3), P(3, 2, 4, 4), P(2)]),
        ("layernorm", ws(F.layernorm, (2, 3, 6)), [P(2, 3, 6), P(6), P(6)]),
        ("gelu", ws(F.gelu, (3, 4)), [P(3, 4, scale=2.0)]),
        ("softmax", ws(lambda x: F.softmax(x, 1), (2, 5, 3)), [P(2, 5, 3)]),
        ("log_softmax", ws(lambda x: F.log_softmax(x, 1), (2, 5, 3)), [P(2, 5, 3)]),
    ]
    acfg = AttentionConfig(8, 2, 2, True)
    ap = {k: Tensor(v, requires_grad=True) for k, v in init_attention_params(rng, acfg, std=0.5).items()}
    names = sorted(ap)
    cases.append(("window_attention",
                  ws(lambda x, *vals: window_attention_map(x, dict(zip(names, vals)), acfg), (1, 8, 4, 4)),
                  [P(1, 8, 4, 4)] + [ap[n] for n in names]))
    target = rng.integers(0, 3, (2, 4, 4))
    cases.append(("dice_loss", lambda x: dice_loss(x, target), [P(2, 3, 4, 4)]))
    cases.append(("ce_loss", lambda x: ce_loss(x, target), [P(2, 3, 4, 4)]))
    return cases


def run_primitive_suite(seeds=range(5), tol: float = 1e-4) -> list[CheckResult]:
    worst: dict[str, CheckResult] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, inputs in primitive_cases(rng):
            r = check_function(name, fn, inputs, tol)
            if name not in worst or r.max_rel_err > worst[name].max_rel_err:
                worst[name] = CheckResult(f"{name} ({len(list(seeds))} seeds)", r.max_rel_err, tol,
                                          r.coords * len(list(seeds)))
    return list(worst.values())


def pi_block_case(rng, channels: int = 16, size: int = 8, window: int = 4):
    from .pi_block import PIBlockConfig, init_pi_params, pi_forward
    from .tensor import Tensor, mean

    cfg = PIBlockConfig(channels, window, max(1, channels // 8))
    params = {k: Tensor(v, requires_grad=True) for k, v in init_pi_params(rng, cfg, std=0.3).items()}
    # nonzero biases and LN affine so every parameter's gradient is exercised
    for k, t in params.items():
        if k.endswith("bias") or k.endswith("ln.weight") or k.endswith("norm.weight"):
            t.data = t.data + rng.standard_normal(t.shape) * 0.3
    names = sorted(params)
    x = Tensor(rng.standard_normal((1, channels, size, size)), requires_grad=True)
    fn = lambda x, *vals: mean(pi_forward(x, dict(zip(names, vals)), cfg))  # noqa: E731
    return fn, [x] + [params[n] for n in names]


def run_pi_block_check(seeds=range(5), tol: float = 1e-4, max_coords: int | None = 40) -> CheckResult:
    worst = 0.0
    coords = 0
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        fn, inputs = pi_block_case(rng)
        r = check_function("pi_block", fn, inputs, tol, max_coords=max_coords, rng=rng)
        worst = max(worst, r.max_rel_err)
        coords += r.coords
    return CheckResult(f"pi_block (1,16,8,8) w=4 ({len(list(seeds))} seeds)", worst, tol, coords)


def run_model_check(n_coords: int = 64, tol: float = 1e-3, seed: int = 0) -> CheckResult:
    """Tiny end-to-end model with deep supervision; ``n_coords`` random parameter scalars."""
    from . import model as M
    from .losses import combined_loss

    cfg = M.ModelConfig(32, 1, 3, 4, 16, window_size=4, precision="verify64")
    store = M.build(cfg, seed)
    rng = np.random.default_rng(seed)
    # perturb away from the symmetric init so LN/bias gradients are not degenerate
    for t in store.params.values():
        t.data = t.data + rng.standard_normal(t.shape) * 0.05
    x = rng.random((1, 1, 32, 32))
    target = rng.integers(0, 3, (1, 32, 32))

    def loss_fn():
        return combined_loss(M.forward(x, store, cfg), target)

    store.zero_grad()
    backward(loss_fn())
    names = store.names()
    picks = []
    for _ in range(n_coords):
        n = names[int(rng.integers(len(names)))]
        picks.append((n, tuple(int(rng.integers(s)) for s in store[n].shape)))
    ana = np.array([store[n].grad[idx] for n, idx in picks])
    num = np.empty(len(picks))
    for i, (n, idx) in enumerate(picks):
        num[i] = numeric_grad(lambda: float(np.asarray(loss_fn().data).reshape(())), store[n].data, [idx])[0]
    return CheckResult(f"tiny model end-to-end ({n_coords} coords)", float(rel_error(ana, num).max()), tol, len(picks))


def run_suite(size: str = "tiny", seeds=range(5)) -> list[CheckResult]:
    if size not in ("tiny", "primitives"):
        raise ValueError(f"unknown gradcheck size {size!r}")
    results = run_primitive_suite(seeds)
    results.append(run_pi_block_check(seeds))
    if size == "tiny":
        results.append(run_model_check())
    return results
