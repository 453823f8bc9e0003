"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, relu_tape

# Gradient entries smaller than this are compared in absolute terms.
REL_FLOOR = 1e-8
# Entries below this fraction of their tensor's largest gradient are measured
# against that fraction instead of their own size. Central differences carry
# rounding noise of roughly 1e-16 * |f| / eps in absolute terms, which swamps
# entries many orders of magnitude smaller than their neighbours.
SCALE_FLOOR = 1e-2
# Differences below this many units in the last place of sum|out * c|, divided
# by the step, are indistinguishable from rounding in the reduction.
NOISE_ULPS = 1e5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


class _Probe:
    """Records the base pass (graph, ReLU masks, cotangent) and evaluates perturbed passes."""

    def __init__(self, op, inputs, rng, cotangent: str, eps: float):
        self.op, self.inputs = op, inputs
        for t in inputs:
            t.grad = None
        with relu_tape() as tape:
            out = op(*inputs)
        self.tape = tape
        if cotangent == "ones":
            self.c = np.ones_like(out.data)
        elif cotangent == "random":
            self.c = rng.standard_normal(out.shape)
        else:
            raise ValueError(f"unknown cotangent mode {cotangent!r}")
        self.noise = NOISE_ULPS * float(np.spacing(np.sum(np.abs(out.data * self.c)))) / eps
        out.backward(self.c)

    def __call__(self) -> float:
        with no_grad(), relu_tape(self.tape):
            return float(np.sum(self.op(*self.inputs).data * self.c))


def finite_difference_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    *,
    cotangent: str = "random",
    max_entries: int | None = None,
    seed: int = 0,
    scale_floor: float = SCALE_FLOOR,
) -> float:
    """Max relative error between backprop and central differences.

    The op output is reduced to a scalar by ``sum(out * c)``. With
    ``cotangent="ones"`` this is the plain sum of outputs; the default draws a
    fixed random ``c`` so ops whose outputs sum to a constant (softmax) are
    still exercised. Only inputs with ``requires_grad`` are perturbed.
    ``max_entries`` caps how many elements per input are probed (chosen at
    random), which keeps whole-model checks tractable. Each entry's error is
    relative to the largest of its analytic value, its numeric value,
    ``scale_floor`` times the largest analytic entry of the same input, and
    the rounding noise of the reduction.

    Perturbed passes replay the ReLU masks of the base pass, so the function
    being differenced is the smooth piece that backprop differentiates.
    """
    rng = np.random.default_rng(seed)
    f = _Probe(op, inputs, rng, cotangent, eps)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        floor = max(REL_FLOOR, f.noise, scale_floor * float(np.abs(analytic).max(initial=0.0)))
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = float(relative_error(np.asarray(analytic.reshape(-1)[i]), np.asarray(numeric), floor))
            worst = max(worst, err)
    return worst


def directional_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    *,
    seed: int = 0,
    scale_floor: float = SCALE_FLOOR,
) -> float:
    """Max relative error of one directional derivative per input tensor.

    Each input is moved along its own random unit direction ``v`` while the
    others stay fixed, and ``<grad, v>`` is compared with the central
    difference along ``v``. This touches every entry of every tensor at a cost
    of two forward passes per tensor, which makes whole-network checks cheap.
    The floor is ``scale_floor`` times the tensor's gradient norm (the largest
    value the directional derivative can take) or the rounding noise,
    whichever is larger.
    """
    rng = np.random.default_rng(seed)
    f = _Probe(op, inputs, rng, "random", eps)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        v = rng.standard_normal(t.shape)
        v /= np.linalg.norm(v)
        orig = t.data
        t.data = orig + eps * v
        fp = f()
        t.data = orig - eps * v
        fm = f()
        t.data = orig
        numeric = (fp - fm) / (2 * eps)
        floor = max(REL_FLOOR, f.noise, scale_floor * float(np.linalg.norm(analytic)))
        worst = max(worst, float(relative_error(np.asarray(float(np.sum(analytic * v))), np.asarray(numeric), floor)))
    return worst
