"""Central finite-difference oracles for checking analytic gradients."""

from __future__ import annotations

import numpy as np


def central_difference(f, arr: np.ndarray, idx, h: float = 1e-5) -> float:
    """d f / d arr[idx] by central differences; ``arr`` is perturbed in place and restored."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2.0 * h)


def rel_error(analytic: float, numeric: float, atol: float = 1e-7) -> float:
    """``|a - n| / max(|a|, |n|, atol)``; ``atol`` keeps near-zero gradients meaningful."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


def probe(f, named_arrays: dict, grads: dict, count: int, rng, h: float = 1e-5,
          atol: float = 1e-7) -> list[tuple[str, tuple, float, float, float]]:
    """Compare ``grads`` to finite differences at ``count`` random entries.

    Entries are drawn uniformly over all named arrays.  Returns
    ``(name, index, analytic, numeric, rel_error)`` per probe.
    """
    names = list(named_arrays)
    sizes = np.array([named_arrays[n].size for n in names], dtype=float)
    out = []
    for _ in range(count):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = named_arrays[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        num = central_difference(f, arr, idx, h)
        ana = float(grads[name][idx])
        out.append((name, idx, ana, num, rel_error(ana, num, atol)))
    return out
