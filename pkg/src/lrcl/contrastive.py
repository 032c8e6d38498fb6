"""Left-right contrastive objective and the rotation view generator.

The loss treats the embeddings of the two body sides of the same time
window as a positive pair and every other window in the minibatch as a
negative. With z holding 2N unit-norm rows interleaved left/right, the
per-pair term is

    l(i, j) = -log( exp(sim(z_i, z_j)/tau) / sum_{k != i} exp(sim(z_i, z_k)/tau) )

and the batch loss averages l over both orders of every pair. The
denominator varies over k; similarities are inner products because rows
arrive normalized from the projection head.
"""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .errors import DataError, DegenerateVectorError, ParameterError, ShapeError
from .tensor_core import Rng, Tensor


def interleave_embeddings(z_left: Tensor, z_right: Tensor) -> Tensor:
    """Stack N left and N right embeddings into 2N rows: L1, R1, L2, R2, ...

    Differentiable; gradients split back onto both inputs.
    """
    return tc.interleave_rows(z_left, z_right)


def deinterleave_embeddings(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of `interleave_embeddings` on a plain array."""
    return z[0::2], z[1::2]


def cosine_similarity_matrix(z: np.ndarray | Tensor) -> np.ndarray:
    """Pairwise cosine similarities of the rows of z (2N x 2N, symmetric)."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    if data.ndim != 2:
        raise ShapeError(f"similarity input must be 2-d, got shape {data.shape}")
    norms = np.sqrt((data * data).sum(axis=1, keepdims=True))
    if np.any(norms <= tc.NORM_EPSILON):
        raise DegenerateVectorError("zero-norm row in similarity input")
    unit = data / norms
    return unit @ unit.T


def nt_xent_loss(z: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Loss value and gradient w.r.t. z for interleaved unit-norm rows.

    Rows 2k and 2k+1 (0-indexed) are partners. Row similarities are inner
    products (callers supply normalized rows); the softmax denominator
    excludes only the self term and is computed with max-subtraction so
    small temperatures stay finite.
    """
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] % 2 != 0:
        raise ShapeError(f"embeddings must be (2N, S), got shape {z.shape}")
    if z.shape[0] == 0:
        raise DataError("empty batch in contrastive loss")
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    two_n = z.shape[0]
    sims = (z @ z.T) / z.dtype.type(temperature)
    np.fill_diagonal(sims, -np.inf)  # k != i: the self term never competes

    shifted = sims - sims.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)

    partners = np.arange(two_n) ^ 1
    rows = np.arange(two_n)
    loss = float(-log_probs[rows, partners].mean())

    probs = exp / denom
    grad_sims = probs
    grad_sims[rows, partners] -= 1.0
    grad_sims /= two_n * temperature
    np.fill_diagonal(grad_sims, 0.0)
    grad = grad_sims @ z + grad_sims.T @ z
    return loss, grad.astype(z.dtype, copy=False)


def nt_xent(z: Tensor, temperature: float) -> Tensor:
    """Autograd node around `nt_xent_loss` for use inside training graphs."""
    loss, grad = nt_xent_loss(z.data, temperature)

    def backward(node: Tensor) -> None:
        tc.accumulate(z, grad * node.grad)

    return tc.make_node(
        np.asarray(loss, dtype=z.data.dtype), (z,), backward
    )


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix from the axis-angle (Rodrigues) formula."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.sqrt((axis * axis).sum())
    if norm <= tc.NORM_EPSILON:
        raise DegenerateVectorError("rotation axis has near-zero norm")
    x, y, z = axis / norm
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * cross + (1.0 - np.cos(angle)) * (cross @ cross)


def random_rotation(rng: Rng) -> np.ndarray:
    """Random 3x3 rotation: normal-sampled axis, angle uniform in [0, 2pi)."""
    axis = rng.normal(size=3)
    while np.sqrt((axis * axis).sum()) <= tc.NORM_EPSILON:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return rotation_about_axis(axis, angle)


def apply_rotation(window: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Left-multiply every time-step 3-vector of a (3, T) window by R."""
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[0] != 3:
        raise ShapeError(f"rotation needs a (3, T) window, got shape {window.shape}")
    if rotation.shape != (3, 3):
        raise ShapeError(f"rotation matrix must be 3x3, got {rotation.shape}")
    return (rotation @ window).astype(window.dtype, copy=False)


def apply_rotations_batch(windows: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Vectorized `apply_rotation` over (B, 3, T) windows and (B, 3, 3) matrices."""
    out = np.einsum("bij,bjt->bit", rotations, windows)
    return out.astype(windows.dtype, copy=False)
