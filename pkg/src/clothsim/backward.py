"""Reverse-mode differentiation through recorded time steps.

Per step the converged forward solution satisfies

    P v = b(v) + F(v),        b = rhs from projections, F = contact impulses,

so the step Jacobian in velocity space is P - dP - dR, where dP collects the
projection derivatives (h^2 * sum_i w_i A_i^T dp_i*/dx) and dR collects the
contact response.  The contact impulses are an explicit function of the
per-node free momentum delivered by the splitting P = M + C, which makes dR
a product of 3x3 local response blocks with (dP - C).  Differentiating this
exact fixed point reproduces the true sensitivities of all three contact
cases, including the vanishing sensitivity of stuck nodes.

The transposed system is solved by a stationary iteration that reuses the
prefactorized P (one back-substitution plus one sparse product per sweep)
and falls back to a direct sparse LU when the iteration stalls or diverges.
Loss gradients are then pushed to the previous state and to the scene
parameters analytically from the tape.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .contact import ContactCase
from .errors import SingularAdjointSystem, SingularMatrix
from .forward import Model, SimState, StepTape, simulate, wind_force_gradients
from .sparse import SymmetricFactorization, as_csr, solve_general

__all__ = [
    "AdjointState",
    "AdjointSolveReport",
    "assemble_delta_P",
    "assemble_delta_R",
    "contact_response_matrix",
    "solve_adjoint",
    "backward_step",
    "parameter_gradients",
    "trajectory_gradient",
]


@dataclass
class AdjointState:
    """Loss gradients flowing backwards through the trajectory."""

    dL_dx: np.ndarray
    dL_dv: np.ndarray
    dL_dparams: dict[str, np.ndarray | float] = field(default_factory=dict)

    def add_params(self, other: dict[str, np.ndarray | float]) -> None:
        for k, v in other.items():
            if k in self.dL_dparams:
                self.dL_dparams[k] = self.dL_dparams[k] + v
            else:
                self.dL_dparams[k] = v


@dataclass
class AdjointSolveReport:
    iterations: int
    converged: bool
    used_fallback: bool
    residual: float
    time_iterative: float = 0.0
    time_fallback: float = 0.0


# -- assembly ----------------------------------------------------------------------


def assemble_delta_P(model: Model, tape: StepTape) -> sp.csr_matrix:
    """Projection part of the step Hessian, evaluated at the converged positions."""
    return model.constraints.projection_correction(tape.projections, tape.h)


def _slip_response_batch(d: np.ndarray, n: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Batched derivative of the slip impulse w.r.t. the free momentum."""
    eye = np.eye(3)
    dn = np.einsum("ki,ki->k", d, n)
    dt = d - dn[:, None] * n
    nt = np.linalg.norm(dt, axis=1)
    t = dt / nt[:, None]
    outer = (mu[:, None] * t - n)[:, :, None] * n[:, None, :]
    proj = eye[None] - t[:, :, None] * t[:, None, :] - n[:, :, None] * n[:, None, :]
    return outer + (mu * dn / nt)[:, None, None] * proj


def _slip_normal_gradient_batch(d: np.ndarray, n: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Batched derivative of the slip impulse w.r.t. the contact normal."""
    eye = np.eye(3)
    dn = np.einsum("ki,ki->k", d, n)
    dt = d - dn[:, None] * n
    nt = np.linalg.norm(dt, axis=1)
    t = dt / nt[:, None]
    ddt_dn = -(n[:, :, None] * d[:, None, :] + dn[:, None, None] * eye[None])
    pt = eye[None] - t[:, :, None] * t[:, None, :]
    dt_dn = np.einsum("kab,kbc->kac", pt, ddt_dn) / nt[:, None, None]
    first = (mu[:, None] * t - n)[:, :, None] * d[:, None, :]
    return first + dn[:, None, None] * (mu[:, None, None] * dt_dn - eye[None])


def contact_response_matrix(model: Model, tape: StepTape) -> sp.csr_matrix | None:
    """World-space derivative of the scattered contact impulses w.r.t. the
    per-node free momentum; block structure over contact nodes.  None when
    every contact is taking off (zero response)."""
    contacts = tape.contact_set
    if len(contacts) == 0:
        return None
    case = tape.contact_case
    active = case != int(ContactCase.TAKE_OFF)
    if not np.any(active):
        return None
    frames = contacts.frames
    normals = frames[:, :, 2]
    W = np.zeros((len(contacts), 3, 3))
    stick = case == int(ContactCase.STICK)
    W[stick] = -np.eye(3)
    slip = case == int(ContactCase.SLIP)
    if np.any(slip):
        W[slip] = _slip_response_batch(
            tape.contact_d_world[slip], normals[slip], contacts.mus[slip]
        )

    a = contacts.node_a
    b = contacts.node_b
    meff = contacts.effective_masses
    mass = model.node_mass
    obs = active & (b < 0)
    pair = active & (b >= 0)

    blocks: list[np.ndarray] = []
    rblk: list[np.ndarray] = []
    cblk: list[np.ndarray] = []
    if np.any(obs):
        blocks.append(W[obs])
        rblk.append(a[obs])
        cblk.append(a[obs])
    if np.any(pair):
        wa = (meff[pair] / mass[a[pair]])[:, None, None]
        wb = (meff[pair] / mass[b[pair]])[:, None, None]
        Wp = W[pair]
        blocks.extend([wa * Wp, -wb * Wp, -wa * Wp, wb * Wp])
        rblk.extend([a[pair], a[pair], b[pair], b[pair]])
        cblk.extend([a[pair], b[pair], a[pair], b[pair]])

    data = np.concatenate(blocks, axis=0)
    rb = np.concatenate(rblk)
    cb = np.concatenate(cblk)
    rows = (3 * rb)[:, None, None] + np.arange(3)[None, :, None]
    cols = (3 * cb)[:, None, None] + np.arange(3)[None, None, :]
    rows = np.broadcast_to(rows, data.shape)
    cols = np.broadcast_to(cols, data.shape)
    n3 = model.num_dof
    return sp.coo_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())), shape=(n3, n3)
    ).tocsr()


def assemble_delta_R(
    model: Model, tape: StepTape, delta_P: sp.csr_matrix | None = None
) -> sp.csr_matrix:
    """Contact correction entering the adjoint system (P - dP - dR) z = rhs.

    The forward-side correction is G (dP - C) with G the local impulse
    response; the adjoint uses its transpose (dP - C) G^T.  Take-off
    contacts contribute nothing.
    """
    n3 = model.num_dof
    G = contact_response_matrix(model, tape)
    if G is None:
        return sp.csr_matrix((n3, n3))
    if delta_P is None:
        delta_P = assemble_delta_P(model, tape)
    return ((delta_P - model.splitting) @ G.T).tocsr()


# -- adjoint solve ------------------------------------------------------------------


def solve_adjoint(
    P_fact: SymmetricFactorization,
    delta_P,
    delta_R,
    rhs: np.ndarray,
    epsilon: float = 1e-6,
    max_iters: int = 400,
    system_matrix: sp.csr_matrix | None = None,
) -> tuple[np.ndarray, AdjointSolveReport]:
    """Solve (P - dP - dR) z = rhs, reusing the factorization of P.

    Iterates P z' = (dP + dR) z + rhs from z0 = P^{-1} rhs until the update
    stalls below epsilon * (1 + |rhs|_inf) and the rate-extrapolated
    remaining error is below the same bound.  Divergence (five consecutive
    growing updates, non-finite iterates, or the iteration cap) routes
    through a direct sparse LU on the assembled system; `system_matrix`
    (the matrix behind P_fact) is required for that path.
    """
    S = (as_csr(delta_P) + as_csr(delta_R)).tocsr()
    rhs_scale = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    tol = epsilon * (1.0 + rhs_scale)
    t0 = time.perf_counter()
    z = P_fact.solve(rhs)
    if S.nnz == 0:
        dt = time.perf_counter() - t0
        return z, AdjointSolveReport(1, True, False, 0.0, time_iterative=dt)

    converged = False
    prev_diff = np.inf
    grew = 0
    iters = 0
    diff = np.inf
    for iters in range(1, max_iters + 1):
        z_new = P_fact.solve(S @ z + rhs)
        if not np.all(np.isfinite(z_new)):
            z = z_new
            break
        diff = float(np.max(np.abs(z_new - z)))
        z = z_new
        if diff <= tol:
            rate = diff / prev_diff if np.isfinite(prev_diff) and prev_diff > 0 else 0.0
            est = diff * rate / (1.0 - rate) if rate < 1.0 else np.inf
            if est <= tol:
                converged = True
                break
        if diff >= prev_diff:
            grew += 1
            if grew >= 5:
                break
        else:
            grew = 0
        prev_diff = diff
    time_iterative = time.perf_counter() - t0

    if converged:
        # one extra sweep: the residual at the refined iterate is S (z - z')
        t0 = time.perf_counter()
        z_ref = P_fact.solve(S @ z + rhs)
        residual = float(np.max(np.abs(S @ (z - z_ref))))
        time_iterative += time.perf_counter() - t0
        return z_ref, AdjointSolveReport(
            iters + 1, True, False, residual, time_iterative=time_iterative
        )

    if system_matrix is None:
        raise SingularAdjointSystem(
            "iteration did not converge and no system matrix was supplied for the fallback"
        )
    t1 = time.perf_counter()
    K = (system_matrix - S).tocsc()
    try:
        z = solve_general(K, rhs)
    except SingularMatrix as exc:
        raise SingularAdjointSystem(str(exc)) from exc
    residual = float(np.max(np.abs(K @ z - rhs)))
    return z, AdjointSolveReport(
        iters,
        False,
        True,
        residual,
        time_iterative=time_iterative,
        time_fallback=time.perf_counter() - t1,
    )


# -- gradient accumulation ----------------------------------------------------------


def _frame_position_terms(model: Model, tape: StepTape, z: np.ndarray) -> np.ndarray:
    """Gradient contribution from contact normals built from start positions.

    Only slipping contacts on curved geometry (spheres, node pairs) depend on
    the normal direction; planes and the stick/take-off impulses do not.
    """
    out = np.zeros_like(z)
    contacts = tape.contact_set
    slip = tape.contact_case == int(ContactCase.SLIP)
    if not np.any(slip):
        return out
    idx = np.where(slip)[0]
    frames = contacts.frames[idx]
    normals = frames[:, :, 2]
    d = tape.contact_d_world[idx]
    mus = contacts.mus[idx]
    Mn = _slip_normal_gradient_batch(d, normals, mus)  # (k, 3, 3)

    z3 = z.reshape(-1, 3)
    x3 = tape.x_prev.reshape(-1, 3)
    a = contacts.node_a[idx]
    b = contacts.node_b[idx]
    pickup = z3[a].copy()
    haspair = b >= 0
    pickup[haspair] -= z3[b[haspair]]
    g_n = np.einsum("kab,ka->kb", Mn, pickup)  # (dr/dn)^T picked-up adjoint

    out3 = out.reshape(-1, 3)
    eye = np.eye(3)
    obstacle_ids = np.array(
        [
            -1 if contacts.contacts[j].obstacle_index is None else contacts.contacts[j].obstacle_index
            for j in idx
        ]
    )
    for oi, ob in enumerate(model.obstacles):
        sel = obstacle_ids == oi
        if not np.any(sel) or not hasattr(ob, "center"):
            continue  # half-spaces have constant normals
        nodes = a[sel]
        rad = np.linalg.norm(x3[nodes] - ob.center[None, :], axis=1)
        sign = 1.0 if ob.side == "exterior" else -1.0
        nn = normals[sel]
        proj = eye[None] - nn[:, :, None] * nn[:, None, :]
        contrib = sign / rad[:, None] * np.einsum("kab,kb->ka", proj, g_n[sel])
        np.add.at(out3, nodes, contrib)
    if np.any(haspair):
        na = a[haspair]
        nb = b[haspair]
        dist = np.linalg.norm(x3[na] - x3[nb], axis=1)
        nn = normals[haspair]
        proj = eye[None] - nn[:, :, None] * nn[:, None, :]
        contrib = np.einsum("kab,kb->ka", proj, g_n[haspair]) / dist[:, None]
        np.add.at(out3, na, contrib)
        np.add.at(out3, nb, -contrib)
    return out


def parameter_gradients(
    model: Model, tape: StepTape, z: np.ndarray, w: np.ndarray
) -> dict[str, np.ndarray | float]:
    """Per-step contribution of every scene parameter to the loss gradient.

    z is the adjoint solution; w is the contact-corrected vector (z plus the
    transposed impulse response applied to z) through which every right-hand
    side dependency flows.
    """
    cs = model.constraints
    h = tape.h
    proj = tape.projections
    x1 = tape.x_next
    out: dict[str, np.ndarray | float] = {}

    rs = cs.A_stretch @ x1 - proj.stretch_p.ravel()
    out["stretch_weight"] = -h * float((cs.A_stretch @ w) @ rs)
    if len(cs.hinges):
        rb = cs.A_bend @ x1 - proj.bend_p.ravel()
        out["bend_weight"] = -h * float((cs.A_bend @ w) @ rb)
    else:
        out["bend_weight"] = 0.0

    mhat = model.mass_diag / model.density
    grav = np.tile(model.gravity, model.mesh.num_vertices)
    out["density"] = -float(z @ (mhat * tape.v_next)) + float(
        w @ (mhat * (tape.v_prev + h * grav))
    )

    if model.wind is not None:
        grads = wind_force_gradients(model.wind, tape.t_prev)
        w_sum = w.reshape(-1, 3).sum(axis=0)
        out["wind_amplitude"] = h * (grads["wind_amplitude"] @ w_sum)
        out["wind_frequency"] = h * float(grads["wind_frequency"] @ w_sum)
        out["wind_phase"] = h * float(grads["wind_phase"] @ w_sum)

    mu_obstacle = np.zeros(len(model.obstacles))
    mu_self = 0.0
    contacts = tape.contact_set
    slip = tape.contact_case == int(ContactCase.SLIP)
    if np.any(slip):
        idx = np.where(slip)[0]
        normals = contacts.frames[idx][:, :, 2]
        d = tape.contact_d_world[idx]
        dn = np.einsum("ki,ki->k", d, normals)
        dt = d - dn[:, None] * normals
        nt = np.linalg.norm(dt, axis=1)
        dr_dmu = dn[:, None] * dt / nt[:, None]
        z3 = z.reshape(-1, 3)
        a = contacts.node_a[idx]
        b = contacts.node_b[idx]
        pickup = z3[a].copy()
        haspair = b >= 0
        pickup[haspair] -= z3[b[haspair]]
        per_contact = np.einsum("ki,ki->k", pickup, dr_dmu)
        for j, g in zip(idx, per_contact):
            oi = contacts.contacts[j].obstacle_index
            if oi is None:
                mu_self += g
            else:
                mu_obstacle[oi] += g
    for oi in range(len(model.obstacles)):
        out[f"mu_obstacle_{oi}"] = float(mu_obstacle[oi])
    if model.self_collision.enabled:
        out["mu_self"] = float(mu_self)
    return out


def backward_step(
    model: Model,
    tape: StepTape,
    upstream: AdjointState,
    epsilon: float | None = None,
    solver: str = "jacobi",
    timings: dict[str, float] | None = None,
) -> tuple[AdjointState, AdjointSolveReport]:
    """Propagate loss gradients across one recorded step.

    upstream carries dL/dx_{n+1} and dL/dv_{n+1}; the returned state carries
    dL/dx_n, dL/dv_n and this step's parameter contributions.  solver is
    "jacobi" (prefactorization-reusing iteration with direct fallback) or
    "direct" (sparse LU on the assembled system).
    """
    h = tape.h
    eps = model.options.adjoint_epsilon if epsilon is None else epsilon

    t0 = time.perf_counter()
    dP = assemble_delta_P(model, tape)
    t1 = time.perf_counter()
    G = contact_response_matrix(model, tape)
    dPC = (dP - model.splitting).tocsr()
    dR = (dPC @ G.T).tocsr() if G is not None else sp.csr_matrix(dP.shape)
    t2 = time.perf_counter()

    rhs = upstream.dL_dv + h * upstream.dL_dx
    if solver == "jacobi":
        z, report = solve_adjoint(
            model.factorization,
            dP,
            dR,
            rhs,
            eps,
            model.options.adjoint_max_iters,
            system_matrix=model.system_matrix,
        )
        t_jac, t_dir = report.time_iterative, report.time_fallback
    elif solver == "direct":
        t3 = time.perf_counter()
        K = (model.system_matrix - dP - dR).tocsc()
        try:
            z = solve_general(K, rhs)
        except SingularMatrix as exc:
            raise SingularAdjointSystem(str(exc)) from exc
        residual = float(np.max(np.abs(K @ z - rhs)))
        t_dir = time.perf_counter() - t3
        t_jac = 0.0
        report = AdjointSolveReport(0, True, True, residual, time_fallback=t_dir)
    else:
        raise ValueError(f"unknown solver {solver!r}")

    t4 = time.perf_counter()
    w = z + G.T @ z if G is not None else z
    grad_v_prev = model.mass_diag * w
    grad_x_prev = upstream.dL_dx + (dPC @ w) / h
    if model.frame_gradients:
        grad_x_prev = grad_x_prev + _frame_position_terms(model, tape, z)
    params = parameter_gradients(model, tape, z, w)
    t5 = time.perf_counter()

    if timings is not None:
        timings["delta_P"] = timings.get("delta_P", 0.0) + (t1 - t0)
        timings["contact"] = timings.get("contact", 0.0) + (t2 - t1) + (t5 - t4)
        timings["jacobi_solve"] = timings.get("jacobi_solve", 0.0) + t_jac
        timings["direct_solve"] = timings.get("direct_solve", 0.0) + t_dir

    out = AdjointState(grad_x_prev, grad_v_prev, dict(upstream.dL_dparams))
    out.add_params(params)
    return out, report


def trajectory_gradient(
    model: Model,
    state0: SimState,
    n_steps: int,
    loss,
    epsilon: float | None = None,
    solver: str = "jacobi",
) -> tuple[float, dict[str, np.ndarray | float], list[AdjointSolveReport]]:
    """Simulate, evaluate the loss, and run the full reverse sweep.

    loss must provide evaluate(states) -> (value, seeds_x, seeds_v) with one
    (3m,) seed pair per state.  Returns the loss value, a gradient map with
    "initial_x"/"initial_v" plus per-parameter entries, and the per-step
    solve reports (in reverse step order).
    """
    states, tapes = simulate(model, state0, n_steps)
    value, seeds_x, seeds_v = loss.evaluate(states)
    adj = AdjointState(seeds_x[n_steps].copy(), seeds_v[n_steps].copy())
    reports: list[AdjointSolveReport] = []
    for i in reversed(range(n_steps)):
        adj, rep = backward_step(model, tapes[i], adj, epsilon=epsilon, solver=solver)
        adj.dL_dx = adj.dL_dx + seeds_x[i]
        adj.dL_dv = adj.dL_dv + seeds_v[i]
        reports.append(rep)
    grads: dict[str, np.ndarray | float] = {
        "initial_x": adj.dL_dx,
        "initial_v": adj.dL_dv,
    }
    grads.update(adj.dL_dparams)
    return value, grads, reports
