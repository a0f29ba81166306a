"""Central finite-difference checks for every differentiable building block.

Each check draws a fresh random instance per trial, computes analytic
gradients of a random linear functional of the output, and compares them
against central differences on a random subset of coordinates. The error of
a trial is ``||a - n|| / max(||a||, ||n||)`` over the checked coordinates.
Instances too close to a ReLU or max-pool kink are redrawn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernel
from .glimpse import GlimpseNetwork
from .kernel import ParamSlot
from .model import Encoder, ModelConfig, RAAFNetwork

EPS = 1e-6
KINK_MARGIN = 1e-4


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


class _Instance:
    """Tensors to probe, a scalar loss over them and their analytic gradients."""

    def __init__(self, tensors: dict[str, np.ndarray], loss: Callable[[], float], grads: dict[str, np.ndarray]):
        self.tensors = tensors
        self.loss = loss
        self.grads = grads


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def compare(inst: _Instance, rng: np.random.Generator, n_coords: int, eps: float = EPS) -> float:
    names = list(inst.tensors)
    analytic, numeric = [], []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        arr = inst.tensors[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        up = inst.loss()
        arr[idx] = old - eps
        down = inst.loss()
        arr[idx] = old
        numeric.append((up - down) / (2 * eps))
        analytic.append(inst.grads[name][idx])
    return relative_error(analytic, numeric)


def _slot(name, value):
    return ParamSlot(name, np.asarray(value, dtype=np.float64))


def _projection(shape, rng):
    return rng.standard_normal(shape)


# --------------------------------------------------------------------------
# instances


def linear_instance(rng):
    x = rng.standard_normal((3, 5))
    W, b = _slot("W", rng.standard_normal((4, 5))), _slot("b", rng.standard_normal(4))
    R = _projection((3, 4), rng)
    out, cache = kernel.linear_forward(x, W, b)
    dx = kernel.linear_backward(R, cache, W, b)
    return _Instance({"x": x, "W": W.value, "b": b.value},
                     lambda: float(np.sum(R * kernel.linear_forward(x, W, b)[0])),
                     {"x": dx, "W": W.grad, "b": b.grad})


def relu_instance(rng):
    x = rng.choice([-1.0, 1.0], size=(4, 6)) * rng.uniform(0.05, 1.0, size=(4, 6))
    R = _projection(x.shape, rng)
    _, cache = kernel.relu_forward(x)
    return _Instance({"x": x}, lambda: float(np.sum(R * kernel.relu_forward(x)[0])),
                     {"x": kernel.relu_backward(R, cache)})


def conv_instance(rng):
    x = rng.standard_normal((2, 2, 5, 6))
    K, b = _slot("K", rng.standard_normal((3, 2, 3, 3))), _slot("b", rng.standard_normal(3))
    R = _projection((2, 3, 5, 6), rng)
    _, cache = kernel.conv2d_forward(x, K, b)
    dx = kernel.conv2d_backward(R, cache, K, b)
    return _Instance({"x": x, "K": K.value, "b": b.value},
                     lambda: float(np.sum(R * kernel.conv2d_forward(x, K, b)[0])),
                     {"x": dx, "K": K.grad, "b": b.grad})


def maxpool_instance(rng):
    while True:
        x = rng.standard_normal((2, 3, 9))
        top = np.sort(x.reshape(2, 3, 3, 3), axis=-1)
        if np.min(top[..., 2] - top[..., 1]) > KINK_MARGIN:
            break
    R = _projection((2, 3, 3), rng)
    _, cache = kernel.maxpool_forward(x)
    return _Instance({"x": x}, lambda: float(np.sum(R * kernel.maxpool_forward(x)[0])),
                     {"x": kernel.maxpool_backward(R, cache)})


def lstm_instance(rng, steps: int = 4):
    n, n_in, H = 2, 3, 5
    xs = rng.standard_normal((steps, n, n_in))
    h0, c0 = rng.standard_normal((n, H)), rng.standard_normal((n, H))
    W, b = _slot("W", 0.5 * rng.standard_normal((4 * H, n_in + H))), _slot("b", rng.standard_normal(4 * H))
    Rh = _projection((steps, n, H), rng)
    Rc = _projection((n, H), rng)

    def run():
        h, c, caches = h0, c0, []
        total = 0.0
        for t in range(steps):
            h, c, cache = kernel.lstm_forward(xs[t], h, c, W, b)
            caches.append(cache)
            total += float(np.sum(Rh[t] * h))
        return total + float(np.sum(Rc * c)), caches

    _, caches = run()
    dxs = np.zeros_like(xs)
    dh, dc = np.zeros((n, H)), Rc.copy()
    for t in reversed(range(steps)):
        dxs[t], dh, dc = kernel.lstm_backward(dh + Rh[t], dc, caches[t], W, b)
    return _Instance({"x": xs, "h0": h0, "c0": c0, "W": W.value, "b": b.value}, lambda: run()[0],
                     {"x": dxs, "h0": dh, "c0": dc, "W": W.grad, "b": b.grad})


def softmax_xent_instance(rng):
    logits = 2.0 * rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, size=5)
    weight = rng.uniform(0.1, 2.0, size=5)
    probs, _ = kernel.softmax_xent_forward(logits, labels)
    return _Instance({"logits": logits},
                     lambda: float(np.sum(weight * kernel.softmax_xent_forward(logits, labels)[1])),
                     {"logits": kernel.softmax_xent_backward(probs, labels, weight)})


def glimpse_instance(rng):
    while True:
        rho = rng.standard_normal((3, 2, 4, 2))
        loc = rng.uniform(-1, 1, size=(3, 2))
        net = GlimpseNetwork(16, 6, 6, 5, rng=rng)
        for p in net.params:
            if p.name.endswith(".b"):
                p.value[...] = 0.1 * rng.standard_normal(p.shape)
        g, cache = net.forward(rho, loc)
        if np.min(np.abs(cache[-1])) > KINK_MARGIN:
            break
    R = _projection(g.shape, rng)
    d_rho = net.backward(R, cache)
    tensors = {"rho": rho} | {p.name: p.value for p in net.params}
    grads = {"rho": d_rho} | {p.name: p.grad for p in net.params}
    return _Instance(tensors, lambda: float(np.sum(R * net.forward(rho, loc)[0])), grads)


def encoder_instance(rng):
    while True:
        frames = rng.standard_normal((2, 7, 9))
        enc = Encoder((7, 9), (2, 2), (True, True), rng=rng)
        for Kw, Kb in enc.convs:
            Kb.value[...] = 0.1 * rng.standard_normal(Kb.shape)
        out, cache = enc.forward(frames)
        if Encoder.kink_margin(cache) > KINK_MARGIN:
            break
    R = _projection(out.shape, rng)
    d_frames = enc.backward(R, cache)
    tensors = {"frames": frames} | {p.name: p.value for p in enc.params}
    grads = {"frames": d_frames} | {p.name: p.grad for p in enc.params}
    return _Instance(tensors, lambda: float(np.sum(R * enc.forward(frames)[0])), grads)


def tiny_model_config(**overrides) -> ModelConfig:
    cfg = dict(frame_shape=(7, 9), n_classes=3, n_frames=2, n_glimpses=3, n_copies=2, conv_channels=(2, 2),
               glimpse_window=(2, 2), n_scales=2, dim_what=6, dim_g=5, hidden_attention=6, hidden_frame=4)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def _model_margin(net: RAAFNetwork, result) -> float:
    margin = Encoder.kink_margin(result.cache["enc"])
    for steps in result.cache["steps"]:
        for _, (g_cache, *_rest) in steps:
            margin = min(margin, float(np.min(np.abs(g_cache[-1]))))
    return margin


def _network_instance(rng, reinforce: bool, **overrides):
    cfg = tiny_model_config(**overrides)
    B = 2
    while True:
        net = RAAFNetwork(cfg, seed=int(rng.integers(2**31)))
        for p in net.params:
            if p.name.endswith(".b"):
                p.value[...] += 0.1 * rng.standard_normal(p.shape)
        frames = rng.standard_normal((B, cfg.n_frames, *cfg.frame_shape))
        labels = rng.integers(0, cfg.n_classes, size=B)
        res = net.forward(frames, rng)
        if _model_margin(net, res) > KINK_MARGIN:
            break
    locs = res.loc_raw.copy()
    adv = rng.standard_normal((B, cfg.n_copies)) if reinforce else None

    def loss():
        r = net.forward(frames, rng, locations=locs)
        if reinforce:
            return net.reinforce_loss(r, adv)
        return net.classification_loss(r, labels, 1.0)

    net.zero_grad()
    res = net.forward(frames, rng, locations=locs)
    net.backward(res, labels, advantages=adv, classification=not reinforce,
                 action_weight=0.0 if reinforce else 1.0)
    return _Instance({p.name: p.value for p in net.params}, loss, {p.name: p.grad for p in net.params})


def full_path_instance(rng):
    return _network_instance(rng, reinforce=False)


def full_path_action_input_instance(rng):
    return _network_instance(rng, reinforce=False, frame_input="action")


def policy_path_instance(rng):
    return _network_instance(rng, reinforce=True)


CHECKS = [
    ("linear", linear_instance, 1e-4, 12),
    ("relu", relu_instance, 1e-4, 12),
    ("conv2d", conv_instance, 1e-4, 12),
    ("maxpool", maxpool_instance, 1e-4, 12),
    ("lstm_4_steps", lstm_instance, 1e-4, 12),
    ("softmax_xent", softmax_xent_instance, 1e-4, 12),
    ("glimpse_network", glimpse_instance, 1e-4, 12),
    ("encoder", encoder_instance, 1e-4, 12),
    ("full_path", full_path_instance, 1e-3, 10),
    ("full_path_action_input", full_path_action_input_instance, 1e-3, 10),
    ("policy_surrogate", policy_path_instance, 1e-3, 10),
]


def run_check(name: str, trials: int = 100, seed: int = 0) -> CheckResult:
    table = {c[0]: c for c in CHECKS}
    _, make, tol, n_coords = table[name]
    rng = np.random.Generator(np.random.PCG64([seed, len(name)]))
    start = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        worst = max(worst, compare(make(rng), rng, n_coords))
    return CheckResult(name, trials, worst, tol, time.perf_counter() - start)


def run_suite(trials: int = 100, seed: int = 0, names=None) -> list[CheckResult]:
    names = names or [c[0] for c in CHECKS]
    return [run_check(n, trials, seed) for n in names]
