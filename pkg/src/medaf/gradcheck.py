"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, relu_masks


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-4) -> np.ndarray:
    """d fn() / d tensor by central differences, perturbing ``tensor.data`` in place."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-4) -> float:
    """Worst relative error between tape gradients and finite differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, t, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@dataclass
class GuardedCheck:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def check_gradients_guarded(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-4,
                            coords_per_tensor: int | None = None, seed: int = 0) -> GuardedCheck:
    """Like :func:`check_gradients`, but drops coordinates whose +-step evaluation flips any ReLU.

    A central difference straddling a ReLU kink measures the average of two
    one-sided slopes, not the derivative, so such coordinates say nothing
    about the tape. ``coords_per_tensor`` samples a random subset per tensor.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape, relu_masks() as base:
        loss = fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for t in tensors:
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_tensor is not None and flat.size > coords_per_tensor:
            idx = np.sort(rng.choice(flat.size, coords_per_tensor, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with relu_masks() as m_hi:
                hi = fn().item()
            flat[i] = orig - step
            with relu_masks() as m_lo:
                lo = fn().item()
            flat[i] = orig
            same = all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(base, m_hi, m_lo))
            if not same:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, relative_error(analytic[i:i + 1], np.array([(hi - lo) / (2 * step)])))
    return GuardedCheck(worst, checked, skipped)
