"""Chaotic test models, a Dormand-Prince integrator and its discrete derivatives.

All right-hand sides act on the leading axis, so a state may be a single
vector of shape ``(n,)`` or a whole ensemble of shape ``(n, m)`` whose
columns are propagated together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when the step size underflows or the solution blows up."""


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSystem:
    """An autonomous ODE ``x' = f(x)`` with its derivative actions."""

    name: str
    dimension: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    jvp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    parameters: dict = field(default_factory=dict)

    def jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        """Dense Jacobian at a single state, assembled column by column."""
        eye = np.eye(self.dimension)
        return self.jvp(np.asarray(x, dtype=float)[:, None], eye)


def lorenz63_rhs(state, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    x, y, z = state[0], state[1], state[2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])


def lorenz96_rhs(state, F=8.0):
    """Ring-indexed ``(x[i+1] - x[i-2]) x[i-1] - x[i] + F``."""
    xp1 = np.roll(state, -1, axis=0)
    xm1 = np.roll(state, 1, axis=0)
    xm2 = np.roll(state, 2, axis=0)
    return (xp1 - xm2) * xm1 - state + F


def lorenz63(sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> ModelSystem:
    def rhs(t, x):
        return lorenz63_rhs(x, sigma, rho, beta)

    def jvp(x, v):
        # x: (3,) or (3, m); v: same trailing shape or (3, k) against a single x
        x0, x1, x2 = x[0], x[1], x[2]
        v0, v1, v2 = v[0], v[1], v[2]
        return np.stack([
            sigma * (v1 - v0),
            (rho - x2) * v0 - v1 - x0 * v2,
            x1 * v0 + x0 * v1 - beta * v2,
        ])

    def vjp(x, w):
        x0, x1, x2 = x[0], x[1], x[2]
        w0, w1, w2 = w[0], w[1], w[2]
        return np.stack([
            -sigma * w0 + (rho - x2) * w1 + x1 * w2,
            sigma * w0 - w1 + x0 * w2,
            -x0 * w1 - beta * w2,
        ])

    return ModelSystem("lorenz63", 3, rhs, jvp, vjp,
                       {"sigma": sigma, "rho": rho, "beta": beta})


def lorenz96(n: int = 40, F: float = 8.0) -> ModelSystem:
    i = np.arange(n)
    # ring neighbors as index arrays; much cheaper than np.roll in the hot loop
    ip1, im1, im2 = (i + 1) % n, (i - 1) % n, (i - 2) % n
    # adjoint gathers: w_{i+1}, w_{i-1}, w_{i+2}
    jp1, jm1, jp2 = ip1, im1, (i + 2) % n

    def rhs(t, x):
        return (x[ip1] - x[im2]) * x[im1] - x + F

    def jvp(x, v):
        return (v[ip1] - v[im2]) * x[im1] + (x[ip1] - x[im2]) * v[im1] - v

    def vjp(x, w):
        a = w * x[im1]
        b = w * (x[ip1] - x[im2])
        return a[jm1] - a[jp2] + b[jp1] - w

    return ModelSystem("lorenz96", n, rhs, jvp, vjp, {"F": F, "n": n})


def linear_model(A) -> ModelSystem:
    """``x' = A x``; handy for exact matrix-exponential checks."""
    A = np.asarray(A, dtype=float)
    return ModelSystem(
        "linear", A.shape[0],
        lambda t, x: A @ x,
        lambda x, v: A @ v,
        lambda x, w: A.T @ w,
        {"A": A},
    )


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)
# ---------------------------------------------------------------------------

DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
DP_B_LOW = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                     -92097 / 339200, 187 / 2100, 1 / 40])
# the 7th stage only feeds the error estimate
N_PROPAGATING_STAGES = 6


@dataclass
class Trajectory:
    """States at strictly increasing times, plus the stage tape if recorded."""

    times: np.ndarray
    states: list
    stages: list | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _stages(model, t, y, h, n_stages=N_PROPAGATING_STAGES):
    Y, K = [], []
    for i in range(n_stages):
        yi = y
        for j, a in enumerate(DP_A[i]):
            if a != 0.0:
                yi = yi + (h * a) * K[j]
        Y.append(yi)
        K.append(model.rhs(t + DP_C[i] * h, yi))
    return Y, K


def dp_step(model: ModelSystem, t: float, y: np.ndarray, h: float):
    """One fifth-order Dormand-Prince step; returns the new state and stage inputs."""
    Y, K = _stages(model, t, y, h)
    y_new = y + h * sum(b * k for b, k in zip(DP_B, K) if b != 0.0)
    return y_new, Y


def n_substeps(t0: float, t1: float, max_step: float) -> int:
    return max(1, int(math.ceil((t1 - t0) / max_step - 1e-9)))


def integrate(model: ModelSystem, x0, t0: float, t1: float, *,
              substeps: int | None = None, max_step: float = 0.01,
              rtol: float | None = None, atol: float = 1e-10,
              min_step: float = 1e-10, keep_stages: bool = False) -> Trajectory:
    """Integrate from ``t0`` to ``t1``.

    Fixed steps are the default (``substeps`` or the smallest count with
    step <= ``max_step``). Passing ``rtol`` switches to embedded error
    control; the step then must stay above ``min_step``.
    """
    if not t1 > t0:
        raise ValueError("integrate needs t1 > t0")
    y = np.array(x0, dtype=float)
    if rtol is not None:
        return _integrate_adaptive(model, y, t0, t1, rtol, atol, min_step, max_step)
    n = substeps if substeps is not None else n_substeps(t0, t1, max_step)
    h = (t1 - t0) / n
    times = [t0]
    states = [y]
    tape = [] if keep_stages else None
    t = t0
    for k in range(n):
        y, Y = dp_step(model, t, y, h)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at t={t + h:.6g}")
        if keep_stages:
            tape.append((t, h, Y))
        t = t0 + (k + 1) * h
        times.append(t)
        states.append(y)
    return Trajectory(np.array(times), states, tape)


def _integrate_adaptive(model, y, t0, t1, rtol, atol, min_step, max_step):
    t = t0
    h = min(max_step, t1 - t0)
    times, states = [t0], [y]
    err_b = DP_B - DP_B_LOW
    while t < t1 - 1e-14:
        h = min(h, t1 - t)
        if h < min_step:
            raise IntegrationError(f"step size underflow (h={h:.3g}) at t={t:.6g}")
        Y, K = _stages(model, t, y, h, n_stages=7)
        y_new = y + h * sum(b * k for b, k in zip(DP_B, K) if b != 0.0)
        err = h * sum(e * k for e, k in zip(err_b, K))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not np.isfinite(ratio):
            h *= 0.25
            continue
        if ratio <= 1.0:
            t += h
            y = y_new
            times.append(t)
            states.append(y)
        h *= min(5.0, max(0.2, 0.9 * ratio ** (-0.2) if ratio > 0 else 5.0))
        h = min(h, max_step)
    return Trajectory(np.array(times), states)


def propagate(model: ModelSystem, x0, dt: float, *, max_step: float = 0.01,
              substeps: int | None = None) -> np.ndarray:
    """Final state after ``dt``; ``x0`` may hold particles as columns."""
    return integrate(model, x0, 0.0, dt, substeps=substeps, max_step=max_step).final


# ---------------------------------------------------------------------------
# discrete derivatives
# ---------------------------------------------------------------------------

def _tlm_step(model, Y, h, dy):
    dK = []
    for i in range(N_PROPAGATING_STAGES):
        dyi = dy
        for j, a in enumerate(DP_A[i]):
            if a != 0.0:
                dyi = dyi + (h * a) * dK[j]
        dK.append(model.jvp(Y[i], dyi))
    return dy + h * sum(b * k for b, k in zip(DP_B, dK) if b != 0.0)


def _adjoint_step(model, Y, h, lam):
    s = N_PROPAGATING_STAGES
    Ybar = [None] * s
    out = lam.copy()
    for i in range(s - 1, -1, -1):
        kbar = (h * DP_B[i]) * lam
        for j in range(i + 1, s):
            a = DP_A[j][i]
            if a != 0.0:
                kbar = kbar + (h * a) * Ybar[j]
        Ybar[i] = model.vjp(Y[i], kbar)
        out = out + Ybar[i]
    return out


def _tape(model, x0, t0, t1, max_step, substeps):
    traj = integrate(model, x0, t0, t1, max_step=max_step, substeps=substeps,
                     keep_stages=True)
    return traj


def tangent_linear(model: ModelSystem, x0, t0: float, t1: float, v, *,
                   max_step: float = 0.01, substeps: int | None = None,
                   trajectory: Trajectory | None = None) -> np.ndarray:
    """Derivative of the discrete flow map at ``x0`` applied to ``v``.

    ``v`` may carry several directions as columns when ``x0`` is a single
    state; the stage states broadcast against them.
    """
    traj = trajectory or _tape(model, x0, t0, t1, max_step, substeps)
    dy = np.array(v, dtype=float)
    for _, h, Y in traj.stages:
        if dy.ndim == 2 and Y[0].ndim == 1:
            Y = [y[:, None] for y in Y]
        dy = _tlm_step(model, Y, h, dy)
    return dy


def discrete_adjoint(model: ModelSystem, x0, t0: float, t1: float, w, *,
                     max_step: float = 0.01, substeps: int | None = None,
                     trajectory: Trajectory | None = None) -> np.ndarray:
    """Transpose of :func:`tangent_linear`, by reversing each RK stage."""
    traj = trajectory or _tape(model, x0, t0, t1, max_step, substeps)
    lam = np.array(w, dtype=float)
    for _, h, Y in reversed(traj.stages):
        if lam.ndim == 2 and Y[0].ndim == 1:
            Y = [y[:, None] for y in Y]
        lam = _adjoint_step(model, Y, h, lam)
    return lam


class WindowTape:
    """Forward sweep through several observation times, kept for the adjoint.

    ``states[i]`` is the state at ``times[i]`` (``times[0]`` is the initial
    time). Works for one state or an ensemble of column states.
    """

    def __init__(self, model: ModelSystem, x0, times, *, max_step: float = 0.01):
        self.model = model
        self.times = np.asarray(times, dtype=float)
        self.states = [np.array(x0, dtype=float)]
        self.segments = []
        for ta, tb in zip(self.times[:-1], self.times[1:]):
            traj = integrate(model, self.states[-1], ta, tb, max_step=max_step,
                             keep_stages=True)
            self.segments.append(traj)
            self.states.append(traj.final)

    def adjoint(self, forcings) -> np.ndarray:
        """Return ``sum_i M*_{0,i} forcings[i]`` by one backward sweep."""
        lam = np.array(forcings[-1], dtype=float)
        for i in range(len(self.segments) - 1, -1, -1):
            lam = discrete_adjoint(self.model, None, 0.0, 1.0, lam,
                                   trajectory=self.segments[i])
            lam = lam + forcings[i]
        return lam

    def tangent(self, v) -> list:
        """Tangent-linear images ``M_{0,i} v`` at every window time."""
        out = [np.array(v, dtype=float)]
        for seg in self.segments:
            out.append(tangent_linear(self.model, None, 0.0, 1.0, out[-1], trajectory=seg))
        return out
