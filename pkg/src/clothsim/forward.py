"""One implicit time step of the contact-coupled cloth solver.

The step minimizes the usual implicit-integration objective by alternating
per-constraint projections (local) with a velocity-form linear solve against
the constant prefactorized matrix (global).  Active contacts enter the
global stage through per-node impulses: the splitting P = M + C decouples
the momentum balance at each contact node, so the contact law is enforced
locally on the free momentum and the resulting impulses feed the next
prefactorized solve.  The iteration's fixed point satisfies the coupled
momentum + contact system.

Everything a later gradient pass needs is recorded on a StepTape: the
converged state, the contact classification, and enough inputs to
re-evaluate projections at the converged positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .contact import (
    ContactSet,
    Obstacle,
    SelfCollisionConfig,
    detect,
    enforce_batch,
)
from .energy import ConstraintSet, Projections
from .mesh import MassMatrix, TriMesh
from .sparse import SymmetricFactorization, factorize_spd, solve_prefactorized

__all__ = [
    "SimState",
    "StepTape",
    "WindModel",
    "SolverOptions",
    "Model",
    "external_force",
    "wind_force_gradients",
    "global_step_velocity",
    "step",
    "simulate",
    "surrogate_energy",
]


@dataclass(frozen=True)
class SimState:
    """Nodal positions and velocities at one time."""

    x: np.ndarray  # (3m,)
    v: np.ndarray  # (3m,)
    t: float = 0.0


@dataclass(frozen=True)
class WindModel:
    """Uniform oscillating force a * sin(2*pi*f*t + phase) added to every node."""

    amplitude: np.ndarray  # (3,) N
    frequency: float  # Hz
    phase: float  # rad

    def force(self, t: float) -> np.ndarray:
        return np.asarray(self.amplitude, dtype=np.float64) * np.sin(
            2.0 * np.pi * self.frequency * t + self.phase
        )


@dataclass(frozen=True)
class SolverOptions:
    forward_tol: float = 1e-6  # outer loop, infinity norm of position change (m)
    max_outer: int = 200
    contact_tol: float = 1e-6  # inner loop, infinity norm of velocity change (m/s)
    max_contact_iters: int = 400
    adjoint_epsilon: float = 1e-6
    adjoint_max_iters: int = 400
    detection_margin: float = 1e-3  # m


class Model:
    """Compiled, immutable description of one simulated system."""

    def __init__(
        self,
        mesh: TriMesh,
        mass: MassMatrix,
        constraints: ConstraintSet,
        h: float,
        gravity: np.ndarray = (0.0, 0.0, -9.81),
        wind: WindModel | None = None,
        obstacles: Sequence[Obstacle] = (),
        self_collision: SelfCollisionConfig = SelfCollisionConfig(),
        options: SolverOptions = SolverOptions(),
        density: float = 1.0,
        frame_gradients: bool = True,
    ):
        if h <= 0:
            raise ValueError("time step must be positive")
        self.mesh = mesh
        self.mass = mass
        self.constraints = constraints
        self.h = float(h)
        self.gravity = np.asarray(gravity, dtype=np.float64)
        self.wind = wind
        self.obstacles = list(obstacles)
        self.self_collision = self_collision
        self.options = options
        self.density = float(density)
        self.frame_gradients = frame_gradients

        self.node_mass = mass.node_mass
        self.mass_diag = mass.diagonal  # (3m,)
        self.splitting = ((h * h) * constraints.stiffness).tocsr()  # C in P = M + C
        n3 = self.splitting.shape[0]
        self.system_matrix = (
            sp.diags(self.mass_diag) + self.splitting
        ).tocsr()  # P, constant
        self.factorization: SymmetricFactorization = factorize_spd(self.system_matrix)
        self.num_dof = n3

    def external_force(self, t: float) -> np.ndarray:
        return external_force(self, t)


def external_force(model: Model, t: float, mesh: TriMesh | None = None) -> np.ndarray:
    """Gravity plus (optionally) the uniform wind force, stacked per node."""
    m = model.mesh.num_vertices if mesh is None else mesh.num_vertices
    f = (model.node_mass[:, None] * model.gravity[None, :]).copy()
    if model.wind is not None:
        f += model.wind.force(t)[None, :]
    return f.reshape(3 * m)


def wind_force_gradients(wind: WindModel, t: float) -> dict[str, np.ndarray]:
    """Per-node derivatives of the wind force w.r.t. its five parameters."""
    phase = 2.0 * np.pi * wind.frequency * t + wind.phase
    s, c = np.sin(phase), np.cos(phase)
    a = np.asarray(wind.amplitude, dtype=np.float64)
    return {
        "wind_amplitude": s * np.eye(3),  # (3 params, 3 force comps)
        "wind_frequency": 2.0 * np.pi * t * c * a,
        "wind_phase": c * a,
    }


@dataclass
class StepTape:
    """Saved quantities of one converged step, consumed by the gradient pass."""

    x_prev: np.ndarray
    v_prev: np.ndarray
    t_prev: float
    h: float
    f_ext: np.ndarray
    y: np.ndarray  # inertia target x + h v + h^2 M^-1 f_ext
    x_next: np.ndarray
    v_next: np.ndarray
    contact_set: ContactSet
    contact_d_world: np.ndarray  # (c, 3) free momentum, world frame
    contact_d_local: np.ndarray  # (c, 3) free momentum, contact frame
    contact_impulse_local: np.ndarray  # (c, 3) r_hat = h * force
    contact_u_local: np.ndarray  # (c, 3) post-impulse relative velocity
    contact_case: np.ndarray  # (c,) ContactCase codes
    outer_iterations: int
    converged: bool
    contact_iterations: int
    contact_converged: bool
    surrogate_trace: list[float] = field(default_factory=list)
    _model: Model | None = field(default=None, repr=False)
    _projections: Projections | None = field(default=None, repr=False)

    @property
    def projections(self) -> Projections:
        """Projections (values and derivatives) at the converged positions."""
        if self._projections is None:
            self._projections = self._model.constraints.project_all(
                self.x_next, self.t_prev + self.h
            )
        return self._projections


def surrogate_energy(
    model: Model, y: np.ndarray, x: np.ndarray, proj: Projections
) -> float:
    """Inertia term plus the quadratic constraint energies at fixed projections."""
    d = x - y
    inertia = 0.5 / (model.h * model.h) * float(d @ (model.mass_diag * d))
    return inertia + model.constraints.energy(x, proj)


def _rhs_velocity_base(model: Model, x: np.ndarray, v: np.ndarray, f_ext: np.ndarray) -> np.ndarray:
    # (M y - P x_n)/h without the projection part: M v + h f_ext - h K x_n
    return model.mass_diag * v + model.h * f_ext - model.h * (
        model.constraints.stiffness @ x
    )


def global_step_velocity(
    model: Model,
    b_tilde: np.ndarray,
    contacts: ContactSet,
    v_guess: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, bool]:
    """Velocity-form global solve with per-contact impulse enforcement.

    Without contacts this is a single back-substitution.  With contacts, the
    impulses are re-derived from the splitting's per-node free momentum and
    the velocity re-solved against the prefactorized matrix until the
    velocity update stalls below tolerance.  Returns (v, local impulses,
    case codes, iterations, converged).
    """
    opts = model.options
    if len(contacts) == 0:
        v = solve_prefactorized(model.factorization, b_tilde)
        return v, np.zeros((0, 3)), np.zeros(0, dtype=np.int64), 1, True
    v = v_guess.copy()
    mus = contacts.mus
    r_local = np.zeros((len(contacts), 3))
    case = np.zeros(len(contacts), dtype=np.int64)
    converged = False
    iters = 0
    for iters in range(1, opts.max_contact_iters + 1):
        f = b_tilde - model.splitting @ v
        _, d_local = contacts.local_free_momentum(f, model.node_mass)
        r_local, case = enforce_batch(d_local, mus)
        impulse = contacts.scatter_impulses(contacts.to_world(r_local))
        v_new = solve_prefactorized(model.factorization, b_tilde + impulse)
        diff = float(np.max(np.abs(v_new - v)))
        v = v_new
        if diff <= opts.contact_tol:
            converged = True
            break
    return v, r_local, case, iters, converged


def step(model: Model, state: SimState) -> tuple[SimState, StepTape]:
    """Advance one step of size model.h and record the tape.

    The contact set is detected once from the start-of-step positions and
    frozen for the whole step.  Convergence is measured on the infinity norm
    of the position update; non-convergence is flagged on the tape, never
    raised, and the last iterate is returned.
    """
    h = model.h
    opts = model.options
    x, v, t = state.x, state.v, state.t
    f_ext = external_force(model, t)
    y = x + h * v + (h * h) * f_ext / model.mass_diag
    contacts = detect(
        x,
        v,
        model.obstacles,
        model.self_collision,
        model.mesh,
        model.node_mass,
        margin=opts.detection_margin,
    )
    track_surrogate = len(contacts) == 0

    base = _rhs_velocity_base(model, x, v, f_ext)
    x_est = x + h * v
    v_est = v.copy()
    b_tilde = base
    surrogate: list[float] = []
    converged = False
    contact_iters = 0
    contact_ok = True
    outer = 0
    for outer in range(1, opts.max_outer + 1):
        proj = model.constraints.project_all(x_est, t + h)
        b_tilde = base + h * model.constraints.projection_rhs(proj)
        if track_surrogate:
            surrogate.append(surrogate_energy(model, y, x_est, proj))
        v_new, _, _, it, ok = global_step_velocity(model, b_tilde, contacts, v_est)
        contact_iters += it if len(contacts) else 0
        contact_ok = contact_ok and ok
        x_new = x + h * v_new
        if track_surrogate:
            surrogate.append(surrogate_energy(model, y, x_new, proj))
        dx = float(np.max(np.abs(x_new - x_est)))
        x_est, v_est = x_new, v_new
        if dx <= opts.forward_tol:
            converged = True
            break

    # Re-derive the contact solution at the converged state so the recorded
    # (impulse, velocity) pairs satisfy the contact law exactly.
    proj = model.constraints.project_all(x_est, t + h)
    b_tilde = base + h * model.constraints.projection_rhs(proj)
    if len(contacts):
        f = b_tilde - model.splitting @ v_est
        d_world, d_local = contacts.local_free_momentum(f, model.node_mass)
        r_local, case = enforce_batch(d_local, contacts.mus)
        u_local = (d_local + r_local) / contacts.effective_masses[:, None]
    else:
        d_world = d_local = r_local = u_local = np.zeros((0, 3))
        case = np.zeros(0, dtype=np.int64)

    new_state = SimState(x_est, v_est, t + h)
    tape = StepTape(
        x_prev=x,
        v_prev=v,
        t_prev=t,
        h=h,
        f_ext=f_ext,
        y=y,
        x_next=x_est,
        v_next=v_est,
        contact_set=contacts,
        contact_d_world=d_world,
        contact_d_local=d_local,
        contact_impulse_local=r_local,
        contact_u_local=u_local,
        contact_case=case,
        outer_iterations=outer,
        converged=converged,
        contact_iterations=contact_iters,
        contact_converged=contact_ok,
        surrogate_trace=surrogate,
        _model=model,
    )
    return new_state, tape


def simulate(
    model: Model, state: SimState, n_steps: int, keep_tapes: bool = True
) -> tuple[list[SimState], list[StepTape]]:
    """Roll the model forward n_steps; returns all states and (optionally) tapes."""
    states = [state]
    tapes: list[StepTape] = []
    for _ in range(n_steps):
        state, tape = step(model, state)
        states.append(state)
        if keep_tapes:
            tapes.append(tape)
    return states, tapes
