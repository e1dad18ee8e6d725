from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward

Params = Union[Sequence[Tensor], Mapping[str, Tensor]]


def _as_list(params: Params) -> list:
    return list(params.values()) if isinstance(params, Mapping) else list(params)


def analytic_grads(f: Callable[[], Tensor], params: Params) -> list:
    plist = _as_list(params)
    for p in plist:
        p.grad = None
    backward(f())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Params,
    step: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` takes no arguments and must rebuild the graph from the current parameter
    values on every call. The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    ``max_entries`` subsamples entries per parameter (all entries when None).
    """
    plist = _as_list(params)
    grads = analytic_grads(f, plist)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(plist, grads):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            ana = float(g.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
