"""Central-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import ConfigurationError, NumericDomainError
from .engine import Array, Tape
from .rng import Rng

__all__ = ["grad_check"]


def _flatten(params: Mapping[str, Array]) -> list[tuple[str, int]]:
    coords = []
    for name, arr in params.items():
        coords.extend((name, i) for i in range(arr.size))
    return coords


def grad_check(
    f: Callable[[Mapping[str, Array]], Array],
    params: Mapping[str, Array],
    step: float = 1e-5,
    samples: int = 30,
    rng: Rng | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a name->Array dict to a scalar Array and must be a pure,
    deterministic function of the parameter values.  ``samples`` scalar
    coordinates are drawn at random; for each, the tape gradient is compared
    against (f(x+h) - f(x-h)) / 2h with
    rel = |g_tape - g_fd| / max(|g_fd|, 1e-8).
    """
    if not (1e-7 < step < 1e-3):
        raise ConfigurationError("finite-difference step must lie in (1e-7, 1e-3)")
    rng = rng or Rng(0)

    tape = Tape()
    watched = {k: tape.watch(v) for k, v in params.items()}
    out = f(watched)
    if out.size != 1:
        raise ConfigurationError("grad_check expects a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericDomainError("objective is not finite at the given parameters")
    tape.backward(out)
    tape_grads = {k: tape.grad(w).data for k, w in watched.items()}

    coords = _flatten(params)
    if samples < len(coords):
        pick = rng.integers(0, len(coords), shape=samples)
        chosen = [coords[int(i)] for i in pick]
    else:
        chosen = coords

    def eval_at(name: str, idx: int, delta: float) -> float:
        shifted = dict(params)
        data = params[name].data.copy()
        data.flat[idx] += delta
        shifted[name] = Array(data)
        val = f(shifted)
        if not np.isfinite(val.data).all():
            raise NumericDomainError("objective became non-finite during probing")
        return val.data.item()

    worst = 0.0
    for name, idx in chosen:
        hi = eval_at(name, idx, +step)
        lo = eval_at(name, idx, -step)
        g_fd = (hi - lo) / (2.0 * step)
        g_tape = float(tape_grads[name].flat[idx])
        rel = abs(g_tape - g_fd) / max(abs(g_fd), 1e-8)
        worst = max(worst, rel)
    return worst
