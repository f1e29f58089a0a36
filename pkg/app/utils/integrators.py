"""Fixed-step explicit Runge-Kutta helpers.

Used by the exact density-matrix propagator and by the nuHOPS trajectories,
where the step has to be fixed so that it lines up with the noise grid.
"""

from typing import Callable, TypeVar

import numpy as np

Y = TypeVar("Y")


def rk4_step(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    t: float,
    y: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Advance ``y`` by one classical fourth-order Runge-Kutta step."""
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def substeps(t0: float, t1: float, dt: float) -> tuple[int, float]:
    """Split ``[t0, t1]`` into the smallest number of equal steps no longer than ``dt``.

    Returns:
        Tuple of (number of steps, actual step length).
    """
    span = t1 - t0
    if span <= 0:
        return 0, 0.0
    n = max(1, int(np.ceil(span / dt - 1e-9)))
    return n, span / n


def propagate_on_grid(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t_grid: np.ndarray,
    dt: float,
    observe: Callable[[np.ndarray], Y],
) -> list[Y]:
    """Integrate with RK4 steps of at most ``dt`` and record ``observe(y)`` on ``t_grid``.

    Args:
        rhs: Right-hand side ``f(t, y)``.
        y0: State at ``t_grid[0]``.
        t_grid: Strictly increasing output times.
        dt: Maximal step length.
        observe: Callback mapping the state to the recorded value.

    Returns:
        One recorded value per output time.
    """
    y = y0
    out = [observe(y)]
    for t0, t1 in zip(t_grid[:-1], t_grid[1:]):
        n, h = substeps(float(t0), float(t1), dt)
        t = float(t0)
        for _ in range(n):
            y = rk4_step(rhs, t, y, h)
            t += h
        out.append(observe(y))
    return out
