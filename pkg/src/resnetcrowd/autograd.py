"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the crowd network needs are provided. Tensors are
row-major ``[N, C, H, W]`` for image data. Values are 32-bit by default;
64-bit tensors are supported so the gradient checker can evaluate the
forward pass at higher precision.

Gradients accumulate into ``Tensor.grad`` of leaf tensors (tensors created
directly rather than produced by an op) until explicitly zeroed.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "BatchNormState",
    "NonFiniteError",
    "no_grad",
    "make_op",
    "conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "softmax",
    "global_avg_pool",
    "linear",
    "add",
    "mul",
    "scale",
    "tensor_sum",
    "FAULTS",
]

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)

# Names of ops whose backward pass is deliberately corrupted. Only for
# negative-control tests of the gradient checker.
FAULTS: set[str] = set()

# Upper bound on the im2col buffer, in elements, per conv chunk.
_IM2COL_BUDGET = 2_000_000


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    dtype = np.dtype(np.float32 if dtype is None else dtype)
    if dtype not in _SUPPORTED_DTYPES:
        raise TypeError(f"unsupported tensor dtype {dtype}")
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """Dense array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op_name: str = "op",
) -> Tensor:
    """Wrap the result of a differentiable computation.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    parent, in order. The graph is only recorded when some parent requires a
    gradient and recording is enabled.
    """
    # a finite sum implies finite entries; fall back to the full scan otherwise
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op_name} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_op(x.data * x.data.dtype.type(factor), (x,), lambda g: (g * factor,), "scale")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(
        np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),),
        "sum",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of an ``[N, K]`` tensor."""
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"softmax expects [N, K>=2], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_op(s, (x,), grad_fn, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def grad_fn(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return make_op(x.data.mean(axis=(2, 3)), (x,), grad_fn, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x: [N, D]``, ``weight: [D, K]``, ``bias: [K]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match output width {weight.shape[1]}")
    xd, wd = x.data, weight.data

    def grad_fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return make_op(xd @ wd + bias.data, (x, weight, bias), grad_fn, "linear")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded ``[n, C, Hp, Wp]`` block as a ``[C*kh*kw, n*ho*wo]`` matrix."""
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    return np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def _col2im_add(dxp: np.ndarray, dcols: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> None:
    n, c = dxp.shape[:2]
    d = dcols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += d[
                :, i, j
            ].transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Implemented as chunked im2col followed by one matrix product per chunk,
    which keeps peak memory bounded at full input resolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    ho, wo = _conv_out_size(h, kh, stride, padding), _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")

    dtype = np.result_type(x.dtype, weight.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = weight.data.astype(dtype, copy=False).reshape(f, -1)
    chunk = max(1, _IM2COL_BUDGET // max(1, c * kh * kw * ho * wo))

    out = np.empty((n, f, ho * wo), dtype=dtype)
    for s in range(0, n, chunk):
        cols = _im2col(xp[s : s + chunk], kh, kw, stride, ho, wo)
        out[s : s + chunk] = (wmat @ cols).reshape(f, -1, ho * wo).transpose(1, 0, 2)
    out = out.reshape(n, f, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g_mat = g.reshape(n, f, ho * wo)
        dw = np.zeros_like(wmat)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for s in range(0, n, chunk):
            gs = np.ascontiguousarray(g_mat[s : s + chunk].transpose(1, 0, 2)).reshape(f, -1)
            cols = _im2col(xp[s : s + chunk], kh, kw, stride, ho, wo)
            dw += gs @ cols.T
            if dxp is not None:
                _col2im_add(dxp[s : s + chunk], wmat.T @ gs, kh, kw, stride, ho, wo)
        dx = None
        if dxp is not None:
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
        dw = dw.reshape(weight.shape)
        if "conv2d" in FAULTS:
            dw = dw * 1.5
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_op(out, parents, grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        channels = self.gamma.size
        if self.running_mean is None:
            self.running_mean = np.zeros(channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(channels, dtype=np.float32)
        lengths = {self.gamma.size, self.beta.size, self.running_mean.size, self.running_var.size}
        if len(lengths) != 1:
            raise ValueError("batch norm gamma/beta/mean/var lengths differ")
        if not 0 < self.momentum < 1:
            raise ValueError("batch norm momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("batch norm epsilon must be positive")
        if np.any(self.running_var <= 0):
            raise ValueError("batch norm running_var must be strictly positive")

    @classmethod
    def fresh(cls, channels: int, name: str = "bn", **kwargs) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta"),
            **kwargs,
        )

    @property
    def channels(self) -> int:
        return self.gamma.size


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalisation of ``[N, C, H, W]`` input.

    Train mode normalises with biased batch statistics and folds the
    unbiased batch variance into the running estimate. Eval mode uses the
    running statistics and never mutates ``state``.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"batch_norm: input {x.shape} does not match {state.channels} channels")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    m = n * h * w
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    xd = x.data

    if mode == "train":
        if m < 2:
            raise ValueError("batch_norm: train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        mom = state.momentum
        rm, rv = state.running_mean, state.running_var
        state.running_mean = ((1 - mom) * rm + mom * mean.reshape(c)).astype(rm.dtype)
        state.running_var = ((1 - mom) * rv + mom * var.reshape(c) * (m / (m - 1))).astype(rv.dtype)
    else:
        xc = xd - state.running_mean.astype(xd.dtype).reshape(1, c, 1, 1)
        var = state.running_var.astype(xd.dtype).reshape(1, c, 1, 1)

    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(xd.dtype)
    xhat = xc * inv_std
    out = xhat * gamma + beta

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if mode == "train":
            sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv_std / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return make_op(out, (x, state.gamma, state.beta), grad_fn, "batch_norm")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class CheckReport:
    """Outcome of a finite-difference gradient check.

    ``errors`` maps each checked tensor to the largest absolute difference
    between analytic and numeric gradients, divided by the largest numeric
    gradient magnitude of that tensor.
    """

    errors: dict[str, float]
    tol: float
    checked: dict[str, int]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.errors.values())

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            status = "ok" if err < self.tol else "FAIL"
            out.append(f"{name:<32s} rel_err={err:.3e} ({self.checked[name]} entries) {status}")
        return out


def finite_diff_check(
    graph_builder: Callable[[], Tensor],
    inputs: dict[str, Tensor] | Iterable[Tensor],
    epsilon: float = 1e-3,
    tol: float = 1e-3,
    max_entries: int | None = 32,
    seed: int = 0,
) -> CheckReport:
    """Compare backprop gradients against central differences.

    ``graph_builder`` takes no arguments and returns a scalar loss built from
    ``inputs``. Analytic gradients come from the tensors' own dtype; the
    numeric side re-runs the builder with the checked tensor promoted to
    64 bits. At most ``max_entries`` randomly chosen entries per tensor are
    perturbed (all of them when None).
    """
    if not isinstance(inputs, dict):
        inputs = {t.name or f"input{i}": t for i, t in enumerate(inputs)}
    # 64-bit inputs tolerate much smaller steps, which keep ReLU kinks out of the stencil
    wide = all(t.data.dtype == np.float64 for t in inputs.values())
    low = 1e-7 if wide else 1e-4
    if not low <= epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in [{low:g}, 1e-2] for these inputs")
    rng = np.random.default_rng(seed)

    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    loss = graph_builder()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in inputs.items()}

    originals = {name: t.data for name, t in inputs.items()}
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    try:
        with no_grad():
            for t in inputs.values():
                t.data = t.data.astype(np.float64)
            for name, t in inputs.items():
                flat = t.data.reshape(-1)
                if max_entries is None or flat.size <= max_entries:
                    idx = np.arange(flat.size)
                else:
                    idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
                numeric = np.empty(idx.size)
                for k, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + epsilon
                    plus = graph_builder().item()
                    flat[i] = orig - epsilon
                    minus = graph_builder().item()
                    flat[i] = orig
                    numeric[k] = (plus - minus) / (2 * epsilon)
                a = analytic[name].reshape(-1)[idx].astype(np.float64)
                denom = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-8)
                errors[name] = float(np.abs(a - numeric).max(initial=0.0) / denom)
                checked[name] = int(idx.size)
    finally:
        for name, t in inputs.items():
            t.data = originals[name]
    return CheckReport(errors=errors, tol=tol, checked=checked)
