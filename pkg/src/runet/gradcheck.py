"""Central finite-difference gradient checking.

The numerical side perturbs raw float64 data, so it is independent of the
backward rules it is used to verify. Checks sample a handful of
coordinates per tensor; exhaustive sweeps would be quadratic in model
size for zero extra coverage.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_gradient(f, t: Tensor, coords, eps: float = 1e-6) -> list[float]:
    """d f() / d t[coord] for each coord, by central differences."""
    grads = []
    flat = t.data.reshape(-1)
    with no_grad():
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = f().item()
            flat[idx] = orig - eps
            down = f().item()
            flat[idx] = orig
            grads.append((up - down) / (2.0 * eps))
    return grads


def relative_error(a: float, n: float, floor: float = 1e-5) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    f,
    tensors: dict[str, Tensor],
    rng: np.random.Generator,
    coords_per_tensor: int = 3,
    eps: float = 1e-6,
    rel_tol: float = 1e-4,
) -> tuple[float, list[str]]:
    """Compare backward() against finite differences on sampled coordinates.

    `f` rebuilds the scalar loss from scratch on every call; all checked
    tensors must be float64 leaves. Returns the worst relative error and a
    list of human-readable failures (empty when everything is within
    `rel_tol`).
    """
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise ValueError(f"gradient check needs float64 tensors ({name} is {t.dtype})")
        t.zero_grad()
    loss = f()
    backward(loss)
    worst = 0.0
    failures = []
    for name, t in tensors.items():
        if t.grad is None:
            failures.append(f"{name}: no gradient reached this leaf")
            continue
        n_coords = min(coords_per_tensor, t.size)
        coords = rng.choice(t.size, size=n_coords, replace=False)
        analytic = t.grad.reshape(-1)[coords]
        numeric = numerical_gradient(f, t, coords, eps=eps)
        for idx, a, n in zip(coords, analytic, numeric):
            err = relative_error(float(a), float(n))
            worst = max(worst, err)
            if err > rel_tol:
                failures.append(
                    f"{name}[{int(idx)}]: analytic {a:.8g} vs numeric {n:.8g} "
                    f"(rel err {err:.3g})"
                )
    return worst, failures
