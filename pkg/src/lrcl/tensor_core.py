"""Minimal deterministic tensor math with reverse-mode gradients.

The engine covers exactly the operations the window-classification
architecture needs: valid 1D convolution, relu, inverted dropout, global
max-pooling over time, dense layers, row-wise L2 normalization and
softmax cross-entropy. Values are stored as 32-bit floats; every op also
runs unchanged on 64-bit inputs, which `grad_check` uses as a shadow mode
for tight finite-difference verification.

Gradients are reverse-mode: each op returns a `Tensor` holding a closure
that scatters the output gradient onto its parents. `Tensor.backward()`
topologically sorts the graph and runs the closures. There is no
broadcasting beyond the batch dimension and no dynamic graph machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateVectorError,
    LabelError,
    ParameterError,
    ShapeError,
)

_MASK64 = (1 << 64) - 1

# Norms below this are treated as degenerate in l2_normalize.
NORM_EPSILON = 1e-12


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer, used to derive child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Deterministic random source.

    Backed by numpy's counter-based Philox4x64 bit generator keyed with a
    64-bit seed, so an identical seed yields an identical draw sequence
    across runs and platforms (for a fixed numpy major version). Child
    streams come from `derive`, which mixes the seed and a tag through
    splitmix64; the derivation is pure arithmetic and documented so runs
    remain replayable.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= _MASK64:
            raise ParameterError(f"seed must fit in 64 bits, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def derive(self, tag: int) -> "Rng":
        """Independent child stream for sub-tasks (shuffling, dropout, ...)."""
        return Rng(_splitmix64(self.seed ^ _splitmix64(int(tag) & _MASK64)))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random32(self, size=None) -> np.ndarray:
        """Uniform [0, 1) drawn directly as float32 (dropout masks)."""
        return self._gen.random(size, dtype=np.float32)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


class Tensor:
    """Dense n-dimensional float array, optionally tracked by autograd.

    `data` is a row-major float32 (or float64 in shadow mode) ndarray;
    `grad` is populated by `backward()` with an identically shaped array.
    Only tensors with `requires_grad=True` accumulate gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode pass seeded with d(self)/d(self) = 1. Scalar only."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[Tensor], None] | None,
) -> Tensor:
    """Build a graph node for a composite op.

    `backward` receives the finished output node and must scatter
    `out.grad` onto the parents via `accumulate`. The node only joins the
    graph when some parent requires a gradient.
    """
    out = Tensor(data)
    if backward is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution onto `t.grad` (no-op for constants)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        # adopt freshly computed buffers; copy views so += cannot alias them
        if g.dtype == t.data.dtype and g.flags.owndata and g.flags.c_contiguous:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _as2d(name: str, t: Tensor, width: int | None = None) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {t.data.shape}")
    if width is not None and t.data.shape[1] != width:
        raise ShapeError(
            f"{name} must have width {width}, got {t.data.shape[1]}"
        )


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid (no padding), stride-1 cross-correlation along time.

    x: (C_in, T) or (B, C_in, T); w: (C_out, C_in, K); b: (C_out,).
    Output time length is T - K + 1.
    """
    if w.data.ndim != 3:
        raise ShapeError(f"conv1d weights must be 3-d, got shape {w.data.shape}")
    c_out, c_in_w, k = w.data.shape
    if b.data.shape != (c_out,):
        raise ShapeError(
            f"conv1d bias must have shape ({c_out},), got {b.data.shape}"
        )
    batched = x.data.ndim == 3
    if not batched and x.data.ndim != 2:
        raise ShapeError(f"conv1d input must be 2-d or 3-d, got shape {x.data.shape}")
    xd = x.data if batched else x.data[None]
    bsz, c_in, t = xd.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv1d input has {c_in} channels but weights expect {c_in_w}"
        )
    if t < k:
        raise ShapeError(
            f"conv1d input time length {t} is shorter than kernel {k}"
        )
    t_out = t - k + 1

    # im2col: (B, T_out, C_in*K) so the contraction is a single GEMM.
    cols = sliding_window_view(xd, k, axis=2)  # (B, C_in, T_out, K)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(
        bsz * t_out, c_in * k
    )
    wmat = w.data.reshape(c_out, c_in * k)
    out = cols @ wmat.T
    out += b.data
    # left as a transposed view; the following elementwise op materializes it
    out = out.reshape(bsz, t_out, c_out).transpose(0, 2, 1)
    if not batched:
        out = out[0]

    def backward(node: Tensor) -> None:
        g = node.grad if batched else node.grad[None]
        gmat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(
            bsz * t_out, c_out
        )
        if w.requires_grad:
            accumulate(w, (gmat.T @ cols).reshape(c_out, c_in, k))
        if b.requires_grad:
            accumulate(b, gmat.sum(axis=0))
        if x.requires_grad:
            # grad_x is the full correlation of the output gradient with the
            # kernel flipped in time; expressed as one GEMM over padded windows.
            padded = np.zeros((bsz, c_out, t_out + 2 * (k - 1)), dtype=g.dtype)
            padded[:, :, k - 1 : k - 1 + t_out] = g
            win = sliding_window_view(padded, k, axis=2)  # (B, C_out, T, K)
            win = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(
                bsz * t, c_out * k
            )
            wflip = np.ascontiguousarray(
                w.data[:, :, ::-1].transpose(0, 2, 1)
            ).reshape(c_out * k, c_in)
            gx = (win @ wflip).reshape(bsz, t, c_in).transpose(0, 2, 1)
            accumulate(x, gx if batched else gx[0])

    return make_node(out, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is defined as 0.

    NaNs propagate (np.maximum semantics) so numeric blowups surface as a
    non-finite loss instead of being silently zeroed.
    """
    mask = x.data > 0
    out = np.maximum(x.data, x.data.dtype.type(0))

    def backward(node: Tensor) -> None:
        accumulate(x, node.grad * mask)

    return make_node(out, (x,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Inference (`training=False`) and p=0 return the input unchanged and
    consume no random draws, so evaluation passes are bitwise
    reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = (rng.random32(size=x.data.shape) >= p).astype(x.data.dtype)
    keep /= x.data.dtype.type(1.0 - p)
    out = x.data * keep

    def backward(node: Tensor) -> None:
        accumulate(x, node.grad * keep)

    return make_node(out, (x,), backward)


def global_max_pool_time(x: Tensor) -> Tensor:
    """Max over the trailing time axis; (B, C, T) -> (B, C) or (C, T) -> (C,).

    Gradient routes to the first (lowest-index) maximum per channel.
    """
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"pool input must be 2-d or 3-d, got shape {x.data.shape}")
    if x.data.shape[-1] == 0:
        raise ShapeError("pool over an empty time axis")
    idx = x.data.argmax(axis=-1)  # argmax takes the first maximum
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(node: Tensor) -> None:
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], node.grad[..., None], axis=-1)
        accumulate(x, gx)

    return make_node(out, (x,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer out = x @ w.T + b; x is (D_in,) or row-wise (B, D_in)."""
    if w.data.ndim != 2:
        raise ShapeError(f"dense weights must be 2-d, got shape {w.data.shape}")
    d_out, d_in = w.data.shape
    if b.data.shape != (d_out,):
        raise ShapeError(f"dense bias must have shape ({d_out},), got {b.data.shape}")
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"dense input must be 1-d or 2-d, got shape {x.data.shape}")
    if x.data.shape[-1] != d_in:
        raise ShapeError(
            f"dense input width {x.data.shape[-1]} does not match weight width {d_in}"
        )
    out = x.data @ w.data.T + b.data

    def backward(node: Tensor) -> None:
        g = node.grad
        if x.data.ndim == 1:
            if w.requires_grad:
                accumulate(w, np.outer(g, x.data))
            if b.requires_grad:
                accumulate(b, g)
        else:
            if w.requires_grad:
                accumulate(w, g.T @ x.data)
            if b.requires_grad:
                accumulate(b, g.sum(axis=0))
        if x.requires_grad:
            accumulate(x, g @ w.data)

    return make_node(out, (x, w, b), backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each vector (or each row of a 2-d input) to unit L2 norm."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(
            f"l2_normalize input must be 1-d or 2-d, got shape {x.data.shape}"
        )
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= NORM_EPSILON):
        raise DegenerateVectorError(
            "cannot normalize a vector with near-zero norm"
        )
    out = x.data / norms

    def backward(node: Tensor) -> None:
        g = node.grad
        inner = (g * out).sum(axis=-1, keepdims=True)
        accumulate(x, (g - inner * out) / norms)

    return make_node(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    logits: (B, C); labels: integer array of length B with values in [0, C).
    """
    _as2d("logits", logits)
    bsz, n_classes = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (bsz,):
        raise ShapeError(
            f"labels must have shape ({bsz},), got {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise LabelError(f"label {bad} outside [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(bsz)
    picked = shifted[rows, labels] - np.log(exp.sum(axis=1))
    out = np.asarray(-picked.mean(), dtype=logits.data.dtype)

    def backward(node: Tensor) -> None:
        g = probs.copy()
        g[rows, labels] -= 1.0
        g *= node.grad / bsz
        accumulate(logits, g.astype(logits.data.dtype, copy=False))

    return make_node(out, (logits,), backward)


def interleave_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-interleave two equal-shape matrices: out rows are a0,b0,a1,b1,..."""
    _as2d("left rows", a)
    _as2d("right rows", b)
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"cannot interleave shapes {a.data.shape} and {b.data.shape}"
        )
    n, width = a.data.shape
    out = np.empty((2 * n, width), dtype=a.data.dtype)
    out[0::2] = a.data
    out[1::2] = b.data

    def backward(node: Tensor) -> None:
        accumulate(a, node.grad[0::2])
        accumulate(b, node.grad[1::2])

    return make_node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_error: float
    per_input: dict[str, float]
    step: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-3,
    float64: bool = False,
    step: float | None = None,
    max_probes_per_input: int | None = None,
    rng: Rng | None = None,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of `fn` against central differences.

    `fn` must be a deterministic function of its tensor arguments (re-seed
    any internal randomness per call). Non-scalar outputs are reduced to a
    scalar with a fixed random weighting. In the default 32-bit mode the
    probe step is 1e-3; with `float64=True` inputs are promoted and the
    step drops to 1e-6. Relative error is normalized per input by the
    largest gradient magnitude seen for that input, and large inputs are
    probed on a random coordinate subset when `max_probes_per_input` is
    set.
    """
    rng = rng or Rng(0)
    if step is None:
        step = 1e-6 if float64 else 1e-3
    dtype = np.float64 if float64 else np.float32
    work = [Tensor(t.data.astype(dtype), requires_grad=True) for t in inputs]

    first = fn(*work)
    weights = None
    if first.data.size != 1:
        weights = rng.normal(size=first.data.shape).astype(dtype)

    def scalar(*args: Tensor) -> Tensor:
        out = fn(*args)
        if weights is None:
            return out
        return make_node(
            np.asarray((out.data * weights).sum(), dtype=out.data.dtype),
            (out,),
            lambda node: accumulate(out, node.grad * weights),
        )

    loss = scalar(*work)
    loss.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in work
    ]

    per_input: dict[str, float] = {}
    worst = 0.0
    for i, t in enumerate(work):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_probes_per_input is not None and n > max_probes_per_input:
            probes = np.sort(rng.choice_without_replacement(n, max_probes_per_input))
        else:
            probes = np.arange(n)
        numeric = np.zeros(len(probes), dtype=np.float64)
        for j, pos in enumerate(probes):
            orig = flat[pos]
            flat[pos] = orig + step
            up = scalar(*work).item()
            flat[pos] = orig - step
            down = scalar(*work).item()
            flat[pos] = orig
            numeric[j] = (up - down) / (2.0 * step)
        got = analytic[i].reshape(-1)[probes].astype(np.float64)
        scale = max(np.abs(got).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        err = float(np.abs(got - numeric).max(initial=0.0) / scale)
        label = names[i] if names is not None else f"input{i}"
        per_input[label] = err
        worst = max(worst, err)

    return GradCheckReport(
        max_rel_error=worst, per_input=per_input, step=step, tolerance=tolerance
    )


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
