"""Central finite-difference gradient oracle.

Deliberately independent of autograd: it perturbs raw parameter values in
place and re-evaluates the loss, so it can cross-check any reverse-mode
gradient in the package.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch


def finite_difference_grad(
    loss_fn: Callable[[], float],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    coords: Iterable[tuple[int, int]] | None = None,
) -> list[np.ndarray]:
    """Estimate d(loss)/d(param) per scalar parameter via central differences.

    ``loss_fn`` must be a pure, deterministic function of the current
    parameter values (it is evaluated twice up front to verify this).
    ``coords`` optionally restricts the probe to (param_index, flat_index)
    pairs; unprobed entries are returned as NaN. Returns one array per
    parameter, same shape.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = list(params)
    first = float(loss_fn())
    second = float(loss_fn())
    if first != second:
        raise RuntimeError(
            f"loss_fn is not deterministic ({first!r} != {second!r}); oracle unusable"
        )

    if coords is None:
        probe = [(pi, fi) for pi, p in enumerate(params) for fi in range(p.numel())]
        grads = [np.empty(tuple(p.shape), dtype=np.float64) for p in params]
    else:
        probe = [(int(pi), int(fi)) for pi, fi in coords]
        grads = [np.full(tuple(p.shape), np.nan, dtype=np.float64) for p in params]

    with torch.no_grad():
        for pi, fi in probe:
            flat = params[pi].view(-1)
            original = flat[fi].item()
            flat[fi] = original + epsilon
            up = float(loss_fn())
            flat[fi] = original - epsilon
            down = float(loss_fn())
            flat[fi] = original
            grads[pi].reshape(-1)[fi] = (up - down) / (2.0 * epsilon)
    return grads


def max_relative_error(
    analytic: Sequence[np.ndarray | torch.Tensor], estimated: Sequence[np.ndarray]
) -> float:
    """Worst per-coordinate |a - e| / max(1, |e|) over the probed (non-NaN) entries."""
    worst = 0.0
    for a, e in zip(analytic, estimated):
        av = np.asarray(a.detach().numpy() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
        ev = np.asarray(e, dtype=np.float64)
        valid = ~np.isnan(ev)
        if not valid.any():
            continue
        diff = np.abs(av[valid] - ev[valid])
        scale = np.maximum(1.0, np.abs(ev[valid]))
        worst = max(worst, float((diff / scale).max()))
    return worst
