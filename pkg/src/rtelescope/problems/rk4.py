"""Classical fixed-step Runge-Kutta integration.

Works on anything that supports ``+`` and scalar ``*``: floats, numpy arrays
and :class:`~rtelescope.problems.dual.Dual` states alike, so derivatives with
respect to the ODE parameters come out of the same code path.
"""

from __future__ import annotations

import numpy as np

from .dual import Dual, value_of


class IntegrationBlowUp(FloatingPointError):
    """Raised when the integrated state stops being finite."""


def rk4_step(rhs, t: float, u, h: float):
    k1 = rhs(t, u)
    k2 = rhs(t + 0.5 * h, u + (0.5 * h) * k1)
    k3 = rhs(t + 0.5 * h, u + (0.5 * h) * k2)
    k4 = rhs(t + h, u + h * k3)
    return u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_solve(rhs, u0, t_span=(0.0, 5.0), steps: int = 10000, check_finite: bool = True):
    """Integrate ``u' = rhs(t, u)`` on a uniform grid of ``steps`` points.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, u)`` returning an object of the same type as ``u``.
    u0 : float, ndarray or Dual
        Initial state.
    t_span : tuple of float
        Start and end time; both end points are grid points.
    steps : int
        Number of grid points, so the step size is ``(t1 - t0) / (steps - 1)``.
    check_finite : bool
        Raise :class:`IntegrationBlowUp` if the final state is not finite.
        Batched callers that handle divergence per sample switch this off.

    Returns
    -------
    times : ndarray, shape (steps,)
    trajectory : list
        The state at every grid point, ``trajectory[0] is u0``.
    """
    if steps < 2:
        raise ValueError(f"need at least 2 grid points, got {steps}")
    t0, t1 = float(t_span[0]), float(t_span[1])
    h = (t1 - t0) / (steps - 1)
    times = t0 + h * np.arange(steps)
    traj = [u0]
    u = u0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps - 1):
            u = rk4_step(rhs, times[k], u, h)
            traj.append(u)
    if check_finite and not np.all(np.isfinite(value_of(u))):
        raise IntegrationBlowUp("non-finite state in RK4 integration")
    return times, traj


def interpolate(times, trajectory, query_times):
    """Piecewise-linear interpolation of a trajectory at ``query_times``.

    Uses the two bracketing grid points. The result stacks query times on a
    new leading axis; with Dual states the tangents are interpolated with the
    same weights.
    """
    times = np.asarray(times, dtype=float)
    out = []
    for tq in np.atleast_1d(query_times):
        j = int(np.searchsorted(times, tq, side="right")) - 1
        j = min(max(j, 0), len(times) - 2)
        w = (tq - times[j]) / (times[j + 1] - times[j])
        if w == 0.0:
            out.append(trajectory[j])
        elif w == 1.0:
            out.append(trajectory[j + 1])
        else:
            out.append((1.0 - w) * trajectory[j] + w * trajectory[j + 1])
    if isinstance(out[0], Dual):
        return Dual.stack(out, axis=0)
    return np.stack([np.asarray(x) for x in out], axis=0)
