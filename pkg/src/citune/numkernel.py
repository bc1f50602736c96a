"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every differentiable primitive appends a record to the active tape when at
least one operand requires a gradient. ``backward`` replays the records in
reverse order, accumulates adjoints into leaf tensors and clears the tape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class ComputationTape:
    records: list[_Record] = field(default_factory=list)
    enabled: bool = True

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_TAPE = ComputationTape()


def get_tape() -> ComputationTape:
    return _TAPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _emit(op: str, values: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(values, op)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._leaf = False
    out.requires_grad = _TAPE.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _TAPE.records.append(_Record(out, inputs, backward_fn, op))
    return out


# -- primitives -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim not in (1, 2) or b.values.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:  # (m,n) @ (n,)
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:  # (n,) @ (n,k)
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _emit("matmul", av @ bv, (a, b), back)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector added to every row of a matrix ``a``."""
    if a.shape == b.shape:
        return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        return _emit("add", a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _emit("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""
    shape = a.shape
    return _emit("sum", np.array(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.size)


def l2sq(a: Tensor) -> Tensor:
    av = a.values
    return _emit("l2sq", np.array(np.sum(av * av)), (a,), lambda g: (2.0 * float(g) * av,))


def row_l2sq(a: Tensor) -> Tensor:
    """Per-row squared norm of a matrix."""
    if a.values.ndim != 2:
        raise ShapeError(f"row_l2sq expects a matrix, got {a.shape}")
    av = a.values
    return _emit("row_l2sq", np.sum(av * av, axis=1), (a,), lambda g: (2.0 * g[:, None] * av,))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _check_same(pred, target, "mse")
    diff = pred.values - target.values
    n = diff.size

    def back(g):
        gd = (2.0 / n) * float(g) * diff
        return gd, -gd

    return _emit("mse", np.array(np.mean(diff * diff)), (pred, target), back)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under row-wise softmax of ``logits``."""
    lv = logits.values
    squeeze = lv.ndim == 1
    if squeeze:
        lv = lv[None, :]
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if lv.ndim != 2 or targets.shape != (lv.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy needs logits (B,V) and targets (B,), got {logits.shape} and {targets.shape}"
        )
    if targets.min() < 0 or targets.max() >= lv.shape[1]:
        raise ShapeError(f"target index out of range for {lv.shape[1]} classes")
    lsm = log_softmax(lv)
    rows = np.arange(lv.shape[0])
    loss = -lsm[rows, targets].mean()

    def back(g):
        d = np.exp(lsm)
        d[rows, targets] -= 1.0
        d *= float(g) / lv.shape[0]
        return (d[0] if squeeze else d,)

    return _emit("softmax_cross_entropy", np.array(loss), (logits,), back)


def sqrt(a: Tensor) -> Tensor:
    if a.size != 1:
        raise ShapeError(f"sqrt is a scalar op, got shape {a.shape}")
    y = np.sqrt(a.values)
    return _emit("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Divide ``a`` by the scalar tensor ``b``."""
    if b.size != 1:
        raise ShapeError(f"div needs a scalar divisor, got shape {b.shape}")
    av, bv = a.values, float(b.values.reshape(-1)[0])
    bshape = b.shape
    return _emit(
        "div",
        av / bv,
        (a, b),
        lambda g: (g / bv, np.full(bshape, -float(np.sum(g * av)) / (bv * bv))),
    )


# -- differentiation --------------------------------------------------------


def forward_eval(fn: Callable[..., Tensor], *args, **kwargs) -> Tensor:
    """Evaluate ``fn`` with taping enabled and return its output."""
    prev = _TAPE.enabled
    _TAPE.enabled = True
    try:
        return fn(*args, **kwargs)
    finally:
        _TAPE.enabled = prev


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad`` and clear the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _TAPE.records:
        raise RuntimeError("backward called with an empty tape")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict[int, Tensor] = {}
    try:
        for rec in reversed(_TAPE.records):
            g = adjoints.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
                if inp._leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = adjoints[key]
            _check_finite(g, "backward")
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    finally:
        _TAPE.clear()


def finite_diff_grad(
    loss_fn: Callable[[Sequence[Tensor]], float | Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn(params)`` for each parameter."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def f() -> float:
        with no_grad():
            out = loss_fn(params)
        return out.item() if isinstance(out, Tensor) else float(out)

    grads = []
    for p in params:
        flat = p.values.reshape(-1)
        g = np.zeros(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = f()
            flat[k] = orig - eps
            lo = f()
            flat[k] = orig
            g[k] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """Plain gradient descent update; grads are zeroed afterwards."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i} has no gradient")
    for p in params:
        p.values -= lr * p.grad
        _check_finite(p.values, "sgd_step")
        p.grad = None


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build_loss: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between taped and finite-difference gradients."""
    for p in params:
        p.grad = None
    loss = forward_eval(build_loss, params)
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    numeric = finite_diff_grad(build_loss, params, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _primitive_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[Tensor]]]]:
    def u(rng, *shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    def weighted(out: Tensor, rng) -> Tensor:
        w = Tensor(u(rng, *out.shape))
        return total(mul(out, w))

    def case_matmul(rng):
        a, b = Tensor(u(rng, 3, 4), True), Tensor(u(rng, 4, 2), True)
        w = Tensor(u(rng, 3, 2))
        return (lambda ps: total(mul(matmul(ps[0], ps[1]), w))), [a, b]

    def case_matvec(rng):
        a, b = Tensor(u(rng, 3, 4), True), Tensor(u(rng, 4), True)
        w = Tensor(u(rng, 3))
        return (lambda ps: total(mul(matmul(ps[0], ps[1]), w))), [a, b]

    def case_add(rng):
        a, b = Tensor(u(rng, 3, 4), True), Tensor(u(rng, 4), True)
        w = Tensor(u(rng, 3, 4))
        return (lambda ps: total(mul(add(ps[0], ps[1]), w))), [a, b]

    def case_sub(rng):
        a, b = Tensor(u(rng, 5), True), Tensor(u(rng, 5), True)
        w = Tensor(u(rng, 5))
        return (lambda ps: total(mul(sub(ps[0], ps[1]), w))), [a, b]

    def case_mul(rng):
        a, b = Tensor(u(rng, 2, 3), True), Tensor(u(rng, 2, 3), True)
        w = Tensor(u(rng, 2, 3))
        return (lambda ps: total(mul(mul(ps[0], ps[1]), w))), [a, b]

    def case_scale(rng):
        a = Tensor(u(rng, 4), True)
        c = float(rng.uniform(-2, 2))
        w = Tensor(u(rng, 4))
        return (lambda ps: total(mul(scale(ps[0], c), w))), [a]

    def case_relu(rng):
        a = Tensor(u(rng, 6), True)
        w = Tensor(u(rng, 6))
        return (lambda ps: total(mul(relu(ps[0]), w))), [a]

    def case_tanh(rng):
        a = Tensor(u(rng, 6), True)
        w = Tensor(u(rng, 6))
        return (lambda ps: total(mul(tanh(ps[0]), w))), [a]

    def case_ce(rng):
        a = Tensor(u(rng, 4, 5), True)
        t = rng.integers(0, 5, size=4)
        return (lambda ps: softmax_cross_entropy(ps[0], t)), [a]

    def case_mse(rng):
        a, b = Tensor(u(rng, 3, 2), True), Tensor(u(rng, 3, 2), True)
        return (lambda ps: mse(ps[0], ps[1])), [a, b]

    def case_l2sq(rng):
        a = Tensor(u(rng, 3, 3), True)
        return (lambda ps: l2sq(ps[0])), [a]

    def case_row_l2sq(rng):
        a = Tensor(u(rng, 3, 4), True)
        w = Tensor(u(rng, 3))
        return (lambda ps: total(mul(row_l2sq(ps[0]), w))), [a]

    def case_mean(rng):
        a = Tensor(u(rng, 2, 5), True)
        return (lambda ps: mean(mul(ps[0], ps[0]))), [a]

    def case_sqrt(rng):
        a = Tensor(rng.uniform(0.2, 1.0, size=()), True)
        return (lambda ps: sqrt(ps[0])), [a]

    def case_div(rng):
        a = Tensor(u(rng, 4), True)
        b = Tensor(rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0]), True)
        w = Tensor(u(rng, 4))
        return (lambda ps: total(mul(div(ps[0], ps[1]), w))), [a, b]

    return {
        "matmul": case_matmul,
        "matvec": case_matvec,
        "add": case_add,
        "sub": case_sub,
        "mul": case_mul,
        "scale": case_scale,
        "relu": case_relu,
        "tanh": case_tanh,
        "softmax_cross_entropy": case_ce,
        "mse": case_mse,
        "l2sq": case_l2sq,
        "row_l2sq": case_row_l2sq,
        "mean": case_mean,
        "sqrt": case_sqrt,
        "div": case_div,
    }


PRIMITIVE_CASES = _primitive_cases()


def gradcheck_suite(n_seeds: int = 100) -> dict[str, float]:
    """Worst relative error per primitive over ``n_seeds`` random instances."""
    worst: dict[str, float] = {}
    for name, make in PRIMITIVE_CASES.items():
        err = 0.0
        for seed in range(n_seeds):
            fn, params = make(np.random.default_rng(seed))
            err = max(err, check_gradients(fn, params))
        worst[name] = err
    return worst

