"""Tape-based reverse-mode differentiation over the numeric kernels.

A :class:`Tape` records every operation in creation order, which is already a
topological order, so :func:`backward` simply walks the record in reverse.
Tapes are single use: build one per forward pass.

    tape = Tape()
    w = tape.param("w", np.ones(3))
    loss = sum_(mul(w, w))
    grads = backward(tape, loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx

__all__ = [
    "Node", "Tape", "TapeError", "backward", "check_gradients", "GradReport",
    "add", "sub", "mul", "scale", "matmul", "sum_", "mean", "reshape", "transpose",
    "take", "roll", "concat", "crop", "linear", "conv2d", "depthwise_conv2d",
    "activation", "softmax", "layer_norm", "l1_loss", "abs_sum",
]


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, reuse after backward, mixed tapes."""


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "tape", "name", "__weakref__")

    def __init__(self, tape, value, parents=(), backward_fn=None, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.value.shape} dtype={self.value.dtype}>"


class Tape:
    """Records operations for one forward/backward pass.

    With ``record=False`` nodes keep no parents or closures, so intermediates are
    released as soon as they go out of scope (inference mode).
    """

    def __init__(self, record: bool = True, track_kinks: bool = False):
        self.record = record
        # sign patterns at non-differentiable points (relu inputs, l1 residuals)
        self.kinks: list[np.ndarray] | None = [] if track_kinks else None
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.used = False

    def param(self, name: str, value: np.ndarray) -> Node:
        if name in self.params:
            return self.params[name]
        node = Node(self, value, name=name)
        self.params[name] = node
        if self.record:
            self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value))

    def _emit(self, value, parents, backward_fn) -> Node:
        if not self.record:
            return Node(self, value)
        node = Node(self, value, parents, backward_fn)
        self.nodes.append(node)
        return node

    def _kink(self, pattern: np.ndarray) -> None:
        if self.kinks is not None:
            self.kinks.append(pattern)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TapeError("operation needs at least one Node operand")


def _lift(tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise TapeError("operands belong to different tapes")
        return x
    return tape.constant(x)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter registered on ``tape``."""
    if not tape.record:
        raise TapeError("tape was built with record=False")
    if tape.used:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.tape is not tape:
        raise TapeError("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
    tape.used = True
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or parent.backward_fn is None and parent.name is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
        node.grad = None if node.name is None else node.grad
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for name, p in tape.params.items()
    }


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape._emit(a.value + b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape._emit(a.value - b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._emit(av * bv, (a, b),
                      lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Node, c: float) -> Node:
    return a.tape._emit(a.value * c, (a,), lambda g: (g * c,))


def activation(x: Node, fn: str) -> Node:
    v = x.value
    out = nx.activation(v, fn)
    if fn == "relu":
        mask = v > 0
        x.tape._kink(np.sign(v))
        back = lambda g: (g * mask,)
    elif fn == "sigmoid":
        back = lambda g: (g * out * (1 - out),)
    elif fn == "tanh":
        back = lambda g: (g * (1 - out * out),)
    else:  # sin: derivative from the saved pre-activation
        back = lambda g: (g * np.cos(v),)
    return x.tape._emit(out, (x,), back)


# -- reductions and layout -----------------------------------------------------

def sum_(x: Node, axis=None, keepdims=False) -> Node:
    shape = x.value.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return x.tape._emit(out, (x,), back)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else int(np.prod([x.value.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return x.tape._emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return x.tape._emit(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x: Node, index: np.ndarray, axis: int = 0) -> Node:
    """Gather along ``axis``; the backward pass scatter-adds."""
    index = np.asarray(index)
    shape = x.value.shape
    out = np.take(x.value, index, axis=axis)

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if axis == 0 and len(shape) == 2:
            flat = index.ravel()
            g2 = g.reshape(flat.size, shape[1])
            # per-column bincount is much faster than np.add.at for row scatters
            for c in range(shape[1]):
                gx[:, c] = np.bincount(flat, weights=g2[:, c], minlength=shape[0])
        else:
            moved = np.moveaxis(gx, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
            np.add.at(moved, index, gm)
        return (gx,)
    return x.tape._emit(out, (x,), back)


def roll(x: Node, shift, axis) -> Node:
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return x.tape._emit(np.roll(x.value, shift, axis), (x,), lambda g: (np.roll(g, neg, axis),))


def concat(xs, axis: int = -1) -> Node:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]
    return tape._emit(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                      lambda g: tuple(np.split(g, sizes, axis=axis)))


def crop(x: Node, index) -> Node:
    """Basic-slice ``x.value[index]``."""
    shape = x.value.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)
    return x.tape._emit(x.value[index], (x,), back)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Node:
    """Batched matrix product with numpy broadcasting over leading axes."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise nx.ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)
    return tape._emit(av @ bv, (a, b), back)


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """``x @ w.T + b`` over the trailing axis; ``w`` has shape (out, in)."""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[1]:
        raise nx.ShapeError(f"linear: input {xv.shape} incompatible with weight {wv.shape}")
    out = xv @ wv.T
    if b is not None:
        out = out + b.value

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xv.reshape(-1, xv.shape[-1])
        gx = g @ wv
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return x.tape._emit(out, parents, back)


def conv2d(x: Node, w: Node, b: Node | None = None) -> Node:
    xv, wv = x.value, w.value
    out = nx.conv2d(xv, wv, None if b is None else b.value)
    k = wv.shape[-1]

    def back(g):
        if k == 1:
            gw = np.tensordot(g, xv, axes=([1, 2], [1, 2]))[:, :, None, None]
        else:
            gw = np.tensordot(g, nx._patches(xv, k), axes=([1, 2], [1, 2]))
        flipped = np.ascontiguousarray(np.transpose(wv[:, :, ::-1, ::-1], (1, 0, 2, 3)))
        gx = nx.conv2d(g, flipped)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))
    parents = (x, w) if b is None else (x, w, b)
    return x.tape._emit(out, parents, back)


def depthwise_conv2d(x: Node, w: Node, b: Node | None = None) -> Node:
    xv, wv = x.value, w.value
    out = nx.depthwise_conv2d(xv, wv, None if b is None else b.value)
    k = wv.shape[-1]

    def back(g):
        gw = np.einsum("chwij,chw->cij", nx._patches(xv, k), g, optimize=True)
        gx = nx.depthwise_conv2d(g, np.ascontiguousarray(wv[:, ::-1, ::-1]))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))
    parents = (x, w) if b is None else (x, w, b)
    return x.tape._emit(out, parents, back)


def softmax(x: Node, axis: int = -1) -> Node:
    out = nx.softmax(x.value, axis)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return x.tape._emit(out, (x,), back)


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = nx.check_finite(xhat * gamma.value + beta.value, "layer_norm")

    def back(g):
        red = tuple(range(g.ndim - 1))
        ggam = (g * xhat).sum(axis=red)
        gbet = g.sum(axis=red)
        gx_hat = g * gamma.value
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggam, gbet
    return x.tape._emit(out, (x, gamma, beta), back)


def l1_loss(pred: Node, gt) -> Node:
    """Mean absolute error; the subgradient at zero residual is 0."""
    tape = pred.tape
    gt = _lift(tape, gt)
    if pred.value.shape != gt.value.shape:
        raise nx.ShapeError(f"l1_loss: pred {pred.value.shape} vs gt {gt.value.shape}")
    diff = pred.value - gt.value
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)
    sign = np.sign(diff)
    tape._kink(sign)
    return tape._emit(out, (pred, gt), lambda g: (g * sign / n, -g * sign / n))


def abs_sum(x: Node) -> Node:
    """``sum(|x|)`` (the l1 norm), subgradient 0 at 0."""
    sign = np.sign(x.value)
    x.tape._kink(sign)
    return x.tape._emit(np.asarray(np.abs(x.value).sum()), (x,), lambda g: (g * sign,))


# -- finite-difference verification -------------------------------------------

@dataclass
class GradReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def skip_fraction(self) -> float:
        done = sum(self.checked.values()) + sum(self.skipped.values())
        return sum(self.skipped.values()) / done if done else 0.0

    @property
    def unverified(self) -> list[str]:
        """Tensors for which every probe straddled a kink."""
        return [k for k, n in self.checked.items() if n == 0]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol and not self.unverified


def rel_err(a, f):
    return np.abs(a - f) / np.maximum(1e-8, np.abs(a) + np.abs(f))


Builder = Callable[[int], tuple[dict[str, np.ndarray], Callable[[Tape, dict[str, Node]], Node]]]


def check_gradients(builder: Builder, seeds: int = 1, *, step: float = 1e-4,
                    max_elements: int = 10_000, subsample: float = 0.05) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``builder(seed)`` returns ``(params, loss_fn)`` where ``loss_fn(tape, nodes)``
    builds a scalar loss from the parameter nodes.  Parameters are promoted to
    float64.  When a problem has more than ``max_elements`` parameter scalars,
    a random ``subsample`` fraction of the elements is probed.  Failures are
    reported, never raised.

    A probe whose +-step evaluations flip the sign pattern of any relu input or
    l1 residual straddles a non-differentiable point; it is counted in
    ``skipped`` rather than scored, and a subsampled tensor draws a
    replacement element.
    """
    report = GradReport()
    for seed in range(seeds):
        params, loss_fn = builder(seed)
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

        def evaluate(record):
            tape = Tape(record=record, track_kinks=True)
            nodes = {k: tape.param(k, v) for k, v in params.items()}
            return tape, loss_fn(tape, nodes)

        def same_kinks(a, b):
            return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

        tape, loss = evaluate(True)
        base = tape.kinks
        analytic = backward(tape, loss)
        total = sum(v.size for v in params.values())
        rng = np.random.default_rng(seed)
        for name, value in params.items():
            flat = value.reshape(-1)
            keep = flat.size
            order = np.arange(flat.size)
            if total > max_elements:
                keep = max(1, int(round(subsample * flat.size)))
                order = rng.permutation(flat.size)
            worst = report.max_rel_err.get(name, 0.0)
            ga = analytic[name].reshape(-1)
            checked = skipped = 0
            for i in order:
                if checked == keep:
                    break
                orig = flat[i]
                flat[i] = orig + step
                tp, lp = evaluate(False)
                flat[i] = orig - step
                tm, lm = evaluate(False)
                flat[i] = orig
                if not (same_kinks(base, tp.kinks) and same_kinks(base, tm.kinks)):
                    skipped += 1
                    continue
                fd = (float(lp.value) - float(lm.value)) / (2 * step)
                worst = max(worst, float(rel_err(ga[i], fd)))
                checked += 1
            report.max_rel_err[name] = worst
            report.checked[name] = report.checked.get(name, 0) + checked
            report.skipped[name] = report.skipped.get(name, 0) + skipped
    return report
