"""Shared test oracles: central finite differences against the gradient tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from protofed.diffcore import Tape, Tensor, backward

FD_STEP = 1e-5
FD_RTOL = 1e-4
# Truncation noise floor for O(1) losses; keeps the relative check honest
# where the true derivative is ~0.
FD_ATOL = 1e-7


def fd_grads(
    f: Callable[[list[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    step: float = FD_STEP,
) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function of several arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"], order="C")
        while not it.finished:
            ix = it.multi_index
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][ix] += step
            minus[i][ix] -= step
            g[ix] = (f(plus) - f(minus)) / (2.0 * step)
            it.iternext()
        grads.append(g)
    return grads


def check_grads(
    build: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    rtol: float = FD_RTOL,
    atol: float = FD_ATOL,
    step: float = FD_STEP,
) -> None:
    """Assert tape gradients of build(leaves) match central differences."""
    leaves = [Tensor(a) for a in arrays]
    with Tape() as tape:
        tape.watch(*leaves)
        loss = build(leaves)
    gmap = backward(tape, loss)
    auto = [gmap[leaf] for leaf in leaves]

    def f(arrs: list[np.ndarray]) -> float:
        return build([Tensor(a) for a in arrs]).item()

    numeric = fd_grads(f, arrays, step=step)
    for got, want in zip(auto, numeric):
        np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)
