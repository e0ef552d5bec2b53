"""Reverse-mode automatic differentiation over the fixed op set of the model.

The engine is a tape: while a :class:`Graph` is active, every op appends one
node (output tensor, parents, backward closure) to an append-only list, so
the list is topologically ordered by construction. ``Graph.backward`` walks
the tape once, in reverse insertion order, accumulating gradients into
``Tensor.grad`` buffers.

Precision policy: training and inference run in float32; gradient checks
rebuild the computation in float64. Ops preserve the dtype of their inputs
and reject mixed-precision operands. Everything is single-threaded and
deterministic: identical inputs produce bit-identical outputs and gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes disagree; the message names the offending dimension."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class Tensor:
    """Dense n-dimensional array with optional gradient buffer.

    ``data`` is a contiguous row-major float32 or float64 array. ``grad``
    is lazily allocated with the same shape and dtype the first time a
    backward pass reaches this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _grad_buffer(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    op: str
    output: Tensor
    parents: tuple
    backward_fn: Callable[[np.ndarray], None]


@dataclass
class Graph:
    """Append-only record of ops, topologically ordered by construction."""

    nodes: list = field(default_factory=list)
    relu_kink_margin: float = math.inf  # min |pre-activation| seen by any relu

    def record(self, op: str, output: Tensor, parents: tuple, backward_fn) -> None:
        self.nodes.append(_Node(op, output, parents, backward_fn))

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients of ``output`` w.r.t. every recorded tensor.

        ``seed`` defaults to 1 for scalar outputs; non-scalar outputs need an
        explicit seed of the same shape. Each node is visited exactly once,
        in reverse insertion order.
        """
        if seed is None:
            if output.data.size != 1:
                raise ShapeError(
                    f"backward from non-scalar output of shape {output.shape} needs an explicit seed"
                )
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")
        output._grad_buffer()
        output.grad += seed
        for node in reversed(self.nodes):
            if node.output.grad is not None:
                node.backward_fn(node.output.grad)

    def check_finite(self) -> None:
        """Raise :class:`NonFiniteError` naming the first op with a non-finite output."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                raise NonFiniteError(f"non-finite values in output of op '{node.op}' (node {i})")


_active_graph: Optional[Graph] = None


@contextmanager
def record():
    """Activate a fresh tape for the duration of the block."""
    global _active_graph
    prev = _active_graph
    graph = Graph()
    _active_graph = graph
    try:
        yield graph
    finally:
        _active_graph = prev


def _result(op: str, out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tracked = _active_graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        _active_graph.record(op, out, tuple(parents), backward_fn)
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) 2D convolution.

    ``x`` is (C_in, H, W), ``weight`` is (C_out, C_in, k, k), ``bias`` is
    (C_out,). Output position (i, j) depends on exactly the k x k input
    window at (i*stride, j*stride), which is what makes the model's
    receptive field exact.
    """
    _check_same_dtype("conv2d_valid", x, weight, bias)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_valid: input must be (C,H,W), got {x.shape}")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise ShapeError(f"conv2d_valid: weight must be (C_out,C_in,k,k), got {weight.shape}")
    cin, h, w = x.data.shape
    cout, wcin, k, _ = weight.data.shape
    if wcin != cin:
        raise ShapeError(f"conv2d_valid: weight expects {wcin} input channels, input has {cin}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d_valid: bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ShapeError(f"conv2d_valid: stride must be positive, got {stride}")
    if h < k or w < k:
        raise ShapeError(f"conv2d_valid: spatial extent {h}x{w} smaller than kernel {k}x{k}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.empty((cout, ho, wo), dtype=x.data.dtype)
    kernels.conv2d_forward(x.data, weight.data, bias.data, stride, out)

    def backward(grad_out: np.ndarray) -> None:
        need_gx = x.requires_grad
        gx = x._grad_buffer() if need_gx else np.empty((0, 0, 0), dtype=x.data.dtype)
        kernels.conv2d_backward(
            grad_out, x.data, weight.data, stride,
            gx, weight._grad_buffer(), bias._grad_buffer(), need_gx,
        )

    return _result("conv2d_valid", out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). The subgradient at exactly 0 is 0."""
    out = np.maximum(x.data, 0)
    if _active_graph is not None:
        margin = float(np.min(np.abs(x.data))) if x.data.size else math.inf
        _active_graph.relu_kink_margin = min(_active_graph.relu_kink_margin, margin)

    def backward(grad_out: np.ndarray) -> None:
        x._grad_buffer()
        np.add(x.grad, np.where(x.data > 0, grad_out, 0), out=x.grad)

    return _result("relu", out, (x,), backward)


def spatial_gap(x: Tensor) -> Tensor:
    """Global average pooling over the spatial axes of a (C, H, W) map."""
    if x.data.ndim != 3:
        raise ShapeError(f"spatial_gap: input must be (C,H,W), got {x.shape}")
    c, h, w = x.data.shape
    if h == 0 or w == 0:
        raise ShapeError(f"spatial_gap: empty spatial extent {h}x{w}")
    out = x.data.mean(axis=(1, 2))
    inv_n = 1.0 / (h * w)

    def backward(grad_out: np.ndarray) -> None:
        x._grad_buffer()
        x.grad += (grad_out * x.data.dtype.type(inv_n))[:, None, None]

    return _result("spatial_gap", out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: weight @ x + bias, with x (C,), weight (K, C), bias (K,)."""
    _check_same_dtype("linear", x, weight, bias)
    if x.data.ndim != 1:
        raise ShapeError(f"linear: input must be a vector, got {x.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"linear: weight {weight.shape} does not accept input of length {x.data.shape[0]}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.data.shape[0]} outputs")
    out = weight.data @ x.data + bias.data

    def backward(grad_out: np.ndarray) -> None:
        if x.requires_grad:
            x._grad_buffer()
            x.grad += weight.data.T @ grad_out
        weight._grad_buffer()
        weight.grad += np.outer(grad_out, x.data)
        bias._grad_buffer()
        bias.grad += grad_out

    return _result("linear", out, (x, weight, bias), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax of a 1D logits array (plain ndarray helper)."""
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of stabilized softmax against a class index; scalar output."""
    k = logits.data.shape[0]
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: logits must be a vector, got {logits.shape}")
    if not 0 <= label < k:
        raise ShapeError(f"softmax_cross_entropy: label {label} out of range for {k} classes")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    loss = np.asarray(lse - z[label], dtype=logits.data.dtype)
    probs = np.exp(z - lse)

    def backward(grad_out: np.ndarray) -> None:
        g = probs.copy()
        g[label] -= 1.0
        logits._grad_buffer()
        logits.grad += g * grad_out

    return _result("softmax_cross_entropy", loss, (logits,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _check_same_dtype("add", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def backward(grad_out: np.ndarray) -> None:
        for t in (a, b):
            t._grad_buffer()
            t.grad += grad_out

    return _result("add", out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    cval = x.data.dtype.type(c)
    out = x.data * cval

    def backward(grad_out: np.ndarray) -> None:
        x._grad_buffer()
        x.grad += grad_out * cval

    return _result("scale", out, (x,), backward)


def mean_stack(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of a non-empty sequence of same-shape tensors."""
    if len(xs) == 0:
        raise ShapeError("mean_stack: empty sequence")
    _check_same_dtype("mean_stack", *xs)
    shape = xs[0].data.shape
    for t in xs[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"mean_stack: shapes {shape} and {t.shape} differ")
    acc = xs[0].data.copy()
    for t in xs[1:]:
        acc += t.data
    inv_n = xs[0].data.dtype.type(1.0 / len(xs))
    out = acc * inv_n

    def backward(grad_out: np.ndarray) -> None:
        g = grad_out * inv_n
        for t in xs:
            t._grad_buffer()
            t.grad += g

    return _result("mean_stack", out, tuple(xs), backward)


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_rel_error: float
    passed: bool
    per_param: list  # max relative error per checked tensor, in input order
    min_relu_margin: float
    n_coordinates: int


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against f64 central differences.

    All checked tensors must be float64. Inputs should be sampled away from
    ReLU kinks; ``min_relu_margin`` reports the smallest |pre-activation|
    seen, so callers can resample when it drops below ~10*h. Raises
    :class:`NonFiniteError` if any recorded op produced non-finite values.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradient_check requires float64 tensors")
        p.zero_grad()
    with record() as graph:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"gradient_check: f() must be scalar, got shape {out.shape}")
    graph.check_finite()
    graph.backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    max_rel = 0.0
    per_param = []
    n_coords = 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(aflat[idx] - numeric) / max(1.0, abs(aflat[idx]), abs(numeric))
            worst = max(worst, rel)
            n_coords += 1
        per_param.append(worst)
        max_rel = max(max_rel, worst)
    return GradCheckReport(
        max_rel_error=max_rel,
        passed=max_rel <= tol,
        per_param=per_param,
        min_relu_margin=graph.relu_kink_margin,
        n_coordinates=n_coords,
    )
