"""Shared numerical primitives: RNG, initialization, softmax and gradient checking.

Tensors are plain ``numpy.ndarray`` values (row-major, float64 unless a
float32 build is requested). Random streams use numpy's ``PCG64`` bit
generator, whose output for a given seed is fixed across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

DEFAULT_DTYPE = np.float64

PRECISIONS = {"f64": np.float64, "f32": np.float32}


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: numpy ``Generator`` over ``PCG64(seed)``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def resolve_dtype(precision: str) -> type:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax. Entries where ``mask`` is False get exactly zero weight."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} does not match input {x.shape}")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ValueError(f"softmax_rows: row {int(empty[0])} is fully masked")
    masked = np.where(mask, x, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of the row softmax given its output ``y``; masked entries stay zero."""
    return y * (dy - np.sum(dy * y, axis=1, keepdims=True))


def xavier_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"xavier_init needs positive fans, got ({fan_in}, {fan_out})")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    n_checked: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient returned by ``f`` against central differences.

    ``f(x)`` must return ``(value, grad)`` with ``grad.shape == x.shape``.
    Only the flat ``indices`` are probed when given (all coordinates otherwise).
    The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    _, grad = f(x.copy())
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if grad.size != x.size:
        raise ValueError(f"gradient has {grad.size} entries, expected {x.size}")
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)

    worst = GradCheckReport(0.0, -1, 0.0, 0.0)
    count = 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x.copy())[0])
        flat[i] = orig - eps
        f_minus = float(f(x.copy())[0])
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value while probing coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = grad[i]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        count += 1
        if rel > worst.max_rel_error or worst.worst_index < 0:
            worst = GradCheckReport(float(rel), int(i), float(analytic), float(numeric))
    return GradCheckReport(worst.max_rel_error, worst.worst_index, worst.analytic, worst.numeric, count)


def sample_indices(rng: np.random.Generator, size: int, max_coords: int | None) -> np.ndarray:
    """Flat indices to probe: all of them, or a seeded subset of ``max_coords``."""
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))
