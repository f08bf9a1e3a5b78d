"""Box-bounded parameter optimization over simulator losses.

A gradient-based path (L-BFGS-B via scipy) and an elitist (1+1) evolution
strategy with 1/5th-success-rule step adaptation as the gradient-free
baseline.  Central finite differences serve as the universal gradient
oracle for checking the adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .errors import NonFiniteObjective

__all__ = [
    "LossSpec",
    "TrajectoryL2",
    "FinalStateL2",
    "ParamSpace",
    "HistoryRecord",
    "minimize_lbfgsb",
    "minimize_es",
    "fd_gradient",
]


# -- losses -------------------------------------------------------------------------


class LossSpec:
    """Scalar loss over a simulated trajectory plus per-step gradient seeds."""

    def evaluate(self, states) -> tuple[float, np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass
class TrajectoryL2(LossSpec):
    """Sum of weighted squared distances between simulated and target positions.

    targets  -- (T+1, 3m) target positions per state (row 0 = initial state)
    weights  -- (T+1,) per-step weights; default 1 for every step after the first
    """

    targets: np.ndarray
    weights: np.ndarray | None = None

    def evaluate(self, states):
        n = len(states)
        targets = np.asarray(self.targets, dtype=np.float64)
        if targets.shape[0] != n:
            raise ValueError(f"expected {n} target rows, got {targets.shape[0]}")
        if self.weights is None:
            w = np.ones(n)
            w[0] = 0.0
        else:
            w = np.asarray(self.weights, dtype=np.float64)
        value = 0.0
        seeds_x = np.zeros((n, states[0].x.size))
        seeds_v = np.zeros_like(seeds_x)
        for i, s in enumerate(states):
            if w[i] == 0.0:
                continue
            d = s.x - targets[i]
            value += w[i] * float(d @ d)
            seeds_x[i] = 2.0 * w[i] * d
        return value, seeds_x, seeds_v


@dataclass
class FinalStateL2(LossSpec):
    """Squared distance between the final positions and a target shape."""

    target: np.ndarray

    def evaluate(self, states):
        n = len(states)
        seeds_x = np.zeros((n, states[0].x.size))
        seeds_v = np.zeros_like(seeds_x)
        d = states[-1].x - np.asarray(self.target, dtype=np.float64)
        seeds_x[-1] = 2.0 * d
        return float(d @ d), seeds_x, seeds_v


# -- parameter space ----------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpace:
    """Named parameters with finite box bounds and initial values."""

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    initial: np.ndarray

    @classmethod
    def from_dict(cls, spec: dict[str, tuple[float, float, float]]) -> "ParamSpace":
        """spec maps name -> (lower, initial, upper)."""
        names = tuple(spec.keys())
        lo = np.array([spec[n][0] for n in names], dtype=np.float64)
        x0 = np.array([spec[n][1] for n in names], dtype=np.float64)
        hi = np.array([spec[n][2] for n in names], dtype=np.float64)
        return cls(names, lo, hi, x0)

    def __post_init__(self):
        if not (
            np.all(np.isfinite(self.lower))
            and np.all(np.isfinite(self.upper))
            and np.all(np.isfinite(self.initial))
        ):
            raise ValueError("bounds and initial values must be finite")
        if np.any(self.lower > self.initial) or np.any(self.initial > self.upper):
            raise ValueError("initial values must lie inside the bounds")

    @property
    def dim(self) -> int:
        return len(self.names)

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)


@dataclass
class HistoryRecord:
    iteration: int
    evaluations: int
    loss: float
    theta: np.ndarray


# -- optimizers ---------------------------------------------------------------------


def minimize_lbfgsb(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    space: ParamSpace,
    max_iterations: int = 100,
    gradient_tol: float = 1e-6,
    loss_decrease_tol: float = 1e-9,
) -> tuple[np.ndarray, list[HistoryRecord]]:
    """Quasi-Newton descent projected onto the bounds.

    objective returns (loss, gradient).  Terminates on projected-gradient
    infinity norm, relative loss decrease, or the iteration cap, and always
    returns the best evaluated point.  A non-finite objective aborts with
    the best point seen so far.
    """
    history: list[HistoryRecord] = []
    best = {"theta": space.initial.copy(), "loss": np.inf}
    count = {"evals": 0}

    class _Abort(Exception):
        pass

    def wrapped(theta: np.ndarray) -> tuple[float, np.ndarray]:
        theta = space.clip(np.asarray(theta, dtype=np.float64))
        loss, grad = objective(theta)
        count["evals"] += 1
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise _Abort()
        if loss < best["loss"]:
            best["loss"] = loss
            best["theta"] = theta.copy()
        history.append(HistoryRecord(len(history), count["evals"], float(loss), theta.copy()))
        return float(loss), np.asarray(grad, dtype=np.float64)

    bounds = list(zip(space.lower, space.upper))
    try:
        _scipy_minimize(
            wrapped,
            space.initial,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options=dict(
                maxiter=max_iterations,
                gtol=gradient_tol,
                ftol=loss_decrease_tol,
            ),
        )
    except _Abort:
        pass
    if not np.isfinite(best["loss"]):
        raise NonFiniteObjective("objective never returned a finite value")
    return best["theta"], history


def minimize_es(
    objective: Callable[[np.ndarray], float],
    space: ParamSpace,
    max_evaluations: int = 500,
    seed: int = 0,
    initial_step: float = 0.25,
) -> tuple[np.ndarray, list[HistoryRecord]]:
    """(1+1) evolution strategy with 1/5th-success-rule step adaptation.

    Mutations are Gaussian, scaled per coordinate by the box width, and
    clipped to the bounds.  The RNG is seeded, so a fixed seed reproduces
    the history exactly.
    """
    rng = np.random.default_rng(seed)
    scale = (space.upper - space.lower) * initial_step
    sigma = 1.0
    theta = space.initial.copy()
    loss = float(objective(theta))
    evals = 1
    history = [HistoryRecord(0, evals, loss, theta.copy())]
    it = 0
    while evals < max_evaluations:
        it += 1
        cand = space.clip(theta + sigma * scale * rng.standard_normal(space.dim))
        cand_loss = float(objective(cand))
        evals += 1
        if cand_loss <= loss:
            theta, loss = cand, cand_loss
            sigma *= np.exp(1.0 / 3.0)
        else:
            sigma *= np.exp(-1.0 / 12.0)  # success rule: shrink 4x slower than grow
        sigma = float(np.clip(sigma, 1e-6, 1e3))
        history.append(HistoryRecord(it, evals, loss, theta.copy()))
    return theta, history


def fd_gradient(
    objective: Callable[[np.ndarray], float],
    theta: np.ndarray,
    step: float | np.ndarray = 1e-5,
) -> np.ndarray:
    """Central-difference gradient; step may be per-parameter."""
    theta = np.asarray(theta, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(step, dtype=np.float64), theta.shape)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = steps[i]
        grad[i] = (objective(theta + e) - objective(theta - e)) / (2.0 * steps[i])
    return grad
