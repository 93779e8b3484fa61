"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Only the operators the terrain network needs are provided. Each operator
builds a new :class:`Tensor` holding references to its inputs and a closure
that pushes the output gradient back to them; :func:`backward` walks the
recorded graph in reverse topological order.

Convolutions use the cross-correlation convention (no kernel flip) on
N x C x H x W tensors.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# operators


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.data + b.data, (a, b), backward)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or stride < 1:
        raise ValueError(f"conv2d: kernel {k} with padding {padding} does not fit input size {size}")
    # floor convention: trailing rows/cols that do not fill a stride step are unused
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of padded input as a contiguous (N, Ho, Wo, C, kh, kw) array."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Shapes: x (N, C_in, H, W), weight (C_out, C_in, kh, kw), bias (C_out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = _conv_out(h, kh, stride, padding)
    wo = _conv_out(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(co, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    data = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _node(data, parents, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x (N, F_in) @ weight (F_in, F_out) + bias (F_out,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _node(out, parents, backward)


_kink_log: list | None = None


@contextlib.contextmanager
def record_relu_masks():
    """Collect the active-unit masks of every relu evaluated inside the block."""
    global _kink_log
    previous, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)

    def backward(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), backward)


def avg_pool2d(x: Tensor, pool: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % pool or w % pool:
        raise ValueError(f"avg_pool2d: pool {pool} does not divide spatial dims {h}x{w}")
    ho, wo = h // pool, w // pool
    data = x.data.reshape(n, c, ho, pool, wo, pool).mean(axis=(3, 5))

    def backward(g):
        spread = np.broadcast_to((g / (pool * pool))[:, :, :, None, :, None], (n, c, ho, pool, wo, pool))
        x._accumulate(spread.reshape(n, c, h, w))

    return _node(data, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    data = x.data.reshape(shape[0], -1)

    def backward(g):
        x._accumulate(g.reshape(shape))

    return _node(data, (x,), backward)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: in training, zero each element with probability ``rate``
    and scale survivors by 1/(1 - rate). Identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    scale = np.where(rng.random(x.shape) >= rate, 1.0 / (1.0 - rate), 0.0)

    def backward(g):
        x._accumulate(g * scale)

    return _node(x.data * scale, (x,), backward)


def gaussian_noise(x: Tensor, sigma: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Add i.i.d. N(0, sigma^2) noise in training mode; identity otherwise."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    x = as_tensor(x)
    if not train or sigma == 0:
        return x
    if rng is None:
        raise ValueError("gaussian_noise in training mode needs an rng")
    noise = rng.normal(0.0, sigma, size=x.shape)

    def backward(g):
        x._accumulate(g)

    return _node(x.data + noise, (x,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; ``pred`` of shape (N,) or (N, 1)."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    p = pred.data.reshape(-1)
    t = target.reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"mse_loss: {p.size} predictions vs {t.size} targets")
    diff = p - t
    n = diff.size

    def backward(g):
        pred._accumulate((g * 2.0 / n * diff).reshape(pred.shape))

    return _node(np.array(np.mean(diff * diff)), (pred,), backward)


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate, so zero them between steps. Intermediate nodes are
    released from the graph once their gradient has been propagated.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            # interior node: free saved activations
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class GradCheckReport:
    """Per-tensor maximum relative error between analytic and central-difference gradients."""

    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped_kinks: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def summary(self) -> str:
        lines = [
            f"{name}: max rel err {err:.2e} over {self.checked[name]} entries"
            + (f" ({self.skipped_kinks[name]} skipped at relu kinks)" if self.skipped_kinks.get(name) else "")
            for name, err in self.max_rel_error.items()
        ]
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], Tensor],
    tensors: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() gradients of the scalar ``fn()`` with central differences.

    ``fn`` must rebuild the graph from the current ``.data`` of ``tensors`` on
    every call and be deterministic. With ``max_entries`` set, a random subset
    of that many entries per tensor is probed. A probe whose +h or -h
    evaluation flips any relu activation is skipped (and counted), because
    the function is not differentiable across that kink.
    """
    if not isinstance(tensors, dict):
        tensors = {t.name or f"t{i}": t for i, t in enumerate(tensors)}
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    with record_relu_masks() as base_masks:
        loss = fn()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}

    def same_pattern(masks) -> bool:
        return len(masks) == len(base_masks) and all(np.array_equal(a, b) for a, b in zip(masks, base_masks))

    report = GradCheckReport(tolerance=tolerance)
    rng = rng or np.random.default_rng(0)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, checked, skipped = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with record_relu_masks() as m_plus:
                f_plus = float(fn().data)
            flat[i] = orig - h
            with record_relu_masks() as m_minus:
                f_minus = float(fn().data)
            flat[i] = orig
            if not (same_pattern(m_plus) and same_pattern(m_minus)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
            checked += 1
        report.max_rel_error[name] = worst
        report.checked[name] = checked
        report.skipped_kinks[name] = skipped
        t.grad = None
    return report
