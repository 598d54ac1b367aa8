"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: it provides exactly the operations the
training graph needs (dense linear algebra, relu, dropout, concat, row
normalization, stabilized log-softmax / log-sum-exp, weighted reductions)
plus a finite-difference gradient checker. Tensors hold a value buffer and
a same-shaped gradient buffer; a Tape records operations as backward
closures and replays them in reverse exactly once.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Tape used outside its record-once / backward-once lifecycle."""


class NumericsError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class Tensor:
    """Dense float64 array with a gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError("tensor initialized with non-finite values")
        self.grad = np.zeros_like(self.data)

    @classmethod
    def _adopt(cls, arr: np.ndarray) -> "Tensor":
        # Internal: wrap a freshly computed array without copying.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = np.zeros_like(arr)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Tape:
    """Ordered operation record; backward() replays it in reverse once."""

    def __init__(self):
        self._nodes = []
        self._produced = set()
        self.frozen = False

    def _fresh(self, arr: np.ndarray, op: str) -> Tensor:
        if self.frozen:
            raise TapeError(f"cannot record {op}: tape is frozen after backward")
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"{op} produced non-finite values")
        out = Tensor._adopt(arr)
        self._produced.add(id(out))
        return out

    # ---- operations -----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        out = self._fresh(a.data @ b.data, "matmul")

        def bwd():
            g = out.grad
            a.grad += g @ b.data.T
            b.grad += a.data.T @ g

        self._nodes.append(bwd)
        return out

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose: needs a 2-d tensor, got shape {a.shape}")
        out = self._fresh(np.ascontiguousarray(a.data.T), "transpose")

        def bwd():
            a.grad += out.grad.T

        self._nodes.append(bwd)
        return out

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
            raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
        out = self._fresh(x.data + b.data, "add_bias")

        def bwd():
            x.grad += out.grad
            b.grad += out.grad.sum(axis=0)

        self._nodes.append(bwd)
        return out

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
        out = self._fresh(a.data + b.data, "add")

        def bwd():
            a.grad += out.grad
            b.grad += out.grad

        self._nodes.append(bwd)
        return out

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        out = self._fresh(x.data * c, "scale")

        def bwd():
            x.grad += c * out.grad

        self._nodes.append(bwd)
        return out

    def relu(self, x: Tensor) -> Tensor:
        out = self._fresh(np.maximum(x.data, 0.0), "relu")

        def bwd():
            # subgradient at 0 is 0
            x.grad += (x.data > 0.0) * out.grad

        self._nodes.append(bwd)
        return out

    def dropout(self, x: Tensor, rate: float, mode: str, rng=None, mask=None):
        """Inverted dropout. Returns (output, keep_mask).

        Eval mode is the identity and returns the input tensor unchanged with
        mask None. In train mode each element is dropped with probability
        `rate` and survivors are scaled by 1/(1-rate); the boolean keep mask
        is returned so a later forward can replay the same pattern.
        """
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if mode == "eval":
            return x, None
        if mode != "train":
            raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
        if mask is None:
            if rate == 0.0:
                mask = np.ones(x.shape, dtype=bool)
            else:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng or an explicit mask")
                mask = rng.random(x.shape) >= rate
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != x.shape:
                raise ShapeError(f"dropout mask shape {mask.shape} does not match input {x.shape}")
        keep_scale = 1.0 / (1.0 - rate)
        out = self._fresh(np.where(mask, x.data * keep_scale, 0.0), "dropout")

        def bwd():
            x.grad += np.where(mask, out.grad * keep_scale, 0.0)

        self._nodes.append(bwd)
        return out, mask

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat: leading dimensions differ, {a.shape} vs {b.shape}")
        p = a.shape[1]
        out = self._fresh(np.hstack([a.data, b.data]), "concat")

        def bwd():
            a.grad += out.grad[:, :p]
            b.grad += out.grad[:, p:]

        self._nodes.append(bwd)
        return out

    def l2_normalize(self, x: Tensor) -> Tensor:
        """Divide each row by max(norm, 1e-12); rows below the floor map to zero."""
        if x.data.ndim != 2:
            raise ShapeError(f"l2_normalize: needs a 2-d tensor, got shape {x.shape}")
        norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
        safe = norms >= 1e-12
        denom = np.maximum(norms, 1e-12)
        out = self._fresh(np.where(safe, x.data / denom, 0.0), "l2_normalize")
        y = out.data

        def bwd():
            g = out.grad
            proj = np.sum(g * y, axis=1, keepdims=True)
            x.grad += np.where(safe, (g - proj * y) / denom, 0.0)

        self._nodes.append(bwd)
        return out

    def log_softmax(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] < 2:
            raise ShapeError(f"log_softmax: needs an n x c tensor with c >= 2, got shape {x.shape}")
        m = x.data.max(axis=1, keepdims=True)
        z = x.data - m
        lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        out = self._fresh(z - lse, "log_softmax")
        y = out.data

        def bwd():
            g = out.grad
            x.grad += g - np.exp(y) * g.sum(axis=1, keepdims=True)

        self._nodes.append(bwd)
        return out

    def masked_logsumexp(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Rowwise log sum exp over entries where mask is True. Output shape (n,)."""
        if x.data.ndim != 2:
            raise ShapeError(f"masked_logsumexp: needs a 2-d tensor, got shape {x.shape}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"masked_logsumexp: mask shape {mask.shape} does not match {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("masked_logsumexp: every row needs at least one unmasked entry")
        z = np.where(mask, x.data, -np.inf)
        m = z.max(axis=1)
        s = np.exp(z - m[:, None]).sum(axis=1)
        out = self._fresh(m + np.log(s), "masked_logsumexp")

        def bwd():
            p = np.exp(z - out.data[:, None])
            x.grad += out.grad[:, None] * p

        self._nodes.append(bwd)
        return out

    def weighted_sum(self, x: Tensor, w: np.ndarray) -> Tensor:
        """Scalar sum(x * w) for a constant weight array."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape != x.shape:
            raise ShapeError(f"weighted_sum: weight shape {w.shape} does not match {x.shape}")
        out = self._fresh(np.array(np.sum(x.data * w)), "weighted_sum")

        def bwd():
            x.grad += out.grad * w

        self._nodes.append(bwd)
        return out

    def sum(self, x: Tensor) -> Tensor:
        out = self._fresh(np.array(np.sum(x.data)), "sum")

        def bwd():
            x.grad += out.grad

        self._nodes.append(bwd)
        return out

    def mean(self, x: Tensor) -> Tensor:
        n = x.size
        out = self._fresh(np.array(np.sum(x.data) / n), "mean")

        def bwd():
            x.grad += out.grad / n

        self._nodes.append(bwd)
        return out

    # ---- backward -------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and accumulate gradients in reverse order.

        Consumes the tape: a second backward (or further recording) raises.
        """
        if self.frozen:
            raise TapeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._nodes and id(loss) not in self._produced:
            raise TapeError("loss tensor was not produced by this tape")
        self.frozen = True
        loss.grad[...] = 1.0
        for bwd in reversed(self._nodes):
            bwd()


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Compare the tape gradient of scalar f(tape, x) with central differences.

    Returns the worst relative error over coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8). f must be deterministic (fix dropout
    masks and any sampled constants before calling).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = x.data.copy()

    tape = Tape()
    x0 = Tensor(base)
    loss = f(tape, x0)
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {loss.shape}")
    tape.backward(loss)
    analytic = x0.grad.reshape(-1).copy()

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            val = f(Tape(), Tensor(probe.reshape(base.shape)))
            numeric[i] += sign * val.item()
        numeric[i] /= 2.0 * step

    if flat.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(build_loss, params, step: float = 1e-5) -> float:
    """grad_check generalized to a loss that closes over leaf parameter tensors.

    build_loss(tape) -> scalar Tensor; params is an iterable of Tensors whose
    coordinates are perturbed in place (and restored) for the numeric side.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = build_loss(tape)
    if loss.data.size != 1:
        raise ShapeError(f"grad_check_params needs a scalar loss, got shape {loss.shape}")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = build_loss(Tape()).item()
            flat[i] = orig - step
            down = build_loss(Tape()).item()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            ana = a.reshape(-1)[i]
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
    return worst
