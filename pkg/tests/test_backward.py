from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from clothsim.backward import (
    AdjointState,
    assemble_delta_P,
    assemble_delta_R,
    backward_step,
    contact_response_matrix,
    solve_adjoint,
    trajectory_gradient,
)
from clothsim.contact import HalfSpace, SelfCollisionConfig, enforce_batch
from clothsim.energy import build_constraints
from clothsim.forward import Model, SimState, SolverOptions, WindModel, simulate, step
from clothsim.mesh import TriMesh, lumped_mass, make_grid
from clothsim.optimize import TrajectoryL2
from clothsim.sparse import factorize_spd, solve_general

from test_forward import TIGHT, build, rest_state, _slope_model_and_state

GROUND = HalfSpace(np.zeros(3), np.array([0.0, 0.0, 1.0]), mu=0.5)


def deviation_loss(state0, steps):
    return TrajectoryL2(np.tile(state0.x, (steps + 1, 1)))


# -- delta_P ------------------------------------------------------------------------


def test_delta_P_zero_for_attach_only():
    mesh = make_grid(2, 2, 1.0)
    model = build(mesh, ws=1e-30, wb=1e-30, attachments=[(0, lambda t: np.zeros(3))])
    s0 = rest_state(mesh)
    _, tape = step(model, s0)
    dP = assemble_delta_P(model, tape)
    assert np.max(np.abs(dP.toarray())) <= 1e-25


def test_P_minus_delta_P_matches_fd_hessian():
    # columns of (M + h^2 d(-f_int)/dx) from finite differences of the force
    mesh = make_grid(3, 3, 0.4)
    model = build(mesh, ws=9.0, wb=0.08, h=0.02)
    rng = np.random.default_rng(5)
    s0 = SimState(
        rest_state(mesh).x + 0.02 * rng.standard_normal(27),
        np.zeros(27),
        0.0,
    )
    _, tape = step(model, s0)
    x1 = tape.x_next
    cs = model.constraints
    h = model.h

    def neg_force(xv):
        return cs.energy_gradient(xv, cs.project_all(xv, 0.0))

    n3 = x1.size
    H_fd = np.zeros((n3, n3))
    fd = 1e-6
    for i in range(n3):
        e = np.zeros(n3)
        e[i] = fd
        H_fd[:, i] = (neg_force(x1 + e) - neg_force(x1 - e)) / (2 * fd)
    lhs = model.system_matrix.toarray() - assemble_delta_P(model, tape).toarray()
    rhs = np.diag(model.mass_diag) + h * h * H_fd
    rel = np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(rhs)))
    assert rel <= 1e-4


# -- delta_R ------------------------------------------------------------------------


def test_delta_R_zero_when_all_take_off():
    mesh = make_grid(2, 2, 1.0)
    model = build(mesh, obstacles=[GROUND], options=TIGHT)
    s0 = SimState(rest_state(mesh).x, np.tile([0.0, 0.0, 1.0], 4), 0.0)
    _, tape = step(model, s0)
    assert len(tape.contact_set) == 4
    assert np.all(tape.contact_case == 0)
    assert assemble_delta_R(model, tape).nnz == 0
    assert contact_response_matrix(model, tape) is None


def _impulse_field(model, tape, v):
    """Scattered contact impulses as a function of the converged velocity."""
    contacts = tape.contact_set
    x, h, t = tape.x_prev, tape.h, tape.t_prev
    base = (
        model.mass_diag * tape.v_prev
        + h * tape.f_ext
        - h * (model.constraints.stiffness @ x)
    )
    proj = model.constraints.project_all(x + h * v, t + h)
    bt = base + h * model.constraints.projection_rhs(proj)
    f = bt - model.splitting @ v
    _, d_local = contacts.local_free_momentum(f, model.node_mass)
    r_local, case = enforce_batch(d_local, contacts.mus)
    return contacts.scatter_impulses(contacts.to_world(r_local)), case


@pytest.mark.parametrize("scene", ["stick", "slip", "pair"])
def test_delta_R_matches_fd_of_impulse_field(scene):
    if scene == "stick":
        model, s0 = _slope_model_and_state(15.0, 0.6, n=4)
    elif scene == "slip":
        model, s0 = _slope_model_and_state(35.0, 0.3, n=4)
    else:
        base = make_grid(3, 3, 0.1)
        verts = np.vstack(
            [base.vertices, base.vertices + np.array([0.04, 0.03, 0.095])]
        )
        tris = np.vstack([base.triangles, base.triangles + 9])
        mesh = TriMesh.build(verts, tris)
        pins = [(i, (lambda t, p=mesh.vertices[i]: p)) for i in (0, 2, 6, 8)]
        model = build(
            mesh,
            ws=25.0,
            wb=1e-4,
            h=0.005,
            attachments=pins,
            self_collision=SelfCollisionConfig(True, 0.09, 0.35),
            options=TIGHT,
        )
        s0 = SimState(
            rest_state(mesh).x,
            np.tile([0.15, 0.1, -0.6], 18) * np.repeat([0.0, 1.0], 27),
            0.0,
        )
    extra = 7 if scene == "pair" else 2
    s1, tape = step(model, s0)
    for _ in range(extra):  # more steps to develop sliding/contact
        s1, tape = step(model, s1)
    assert len(tape.contact_set) > 0
    G = contact_response_matrix(model, tape)
    assert G is not None
    dP = assemble_delta_P(model, tape)
    dR_fwd = (G @ (dP - model.splitting)).tocsr()
    v = tape.v_next
    rng = np.random.default_rng(0)
    fd = 1e-7
    for _ in range(4):
        e = rng.standard_normal(v.size)
        e /= np.linalg.norm(e)
        fp, cp = _impulse_field(model, tape, v + fd * e)
        fm, cm = _impulse_field(model, tape, v - fd * e)
        if not (np.array_equal(cp, tape.contact_case) and np.array_equal(cm, tape.contact_case)):
            continue  # case flipped under this direction: derivative not defined
        fd_dir = (fp - fm) / (2 * fd)
        an_dir = dR_fwd @ e
        denom = max(np.max(np.abs(fd_dir)), 1e-10)
        assert np.max(np.abs(an_dir - fd_dir)) / denom <= 1e-4


# -- solve_adjoint -------------------------------------------------------------------


def test_solve_adjoint_trivial_one_iteration():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((12, 12))
    P = sp.csr_matrix(A.T @ A + 12 * np.eye(12))
    F = factorize_spd(P)
    rhs = rng.standard_normal(12)
    zero = sp.csr_matrix((12, 12))
    z, rep = solve_adjoint(F, zero, zero, rhs, 1e-6, 100, system_matrix=P)
    assert rep.iterations == 1 and rep.converged and not rep.used_fallback
    assert np.allclose(z, F.solve(rhs))


def test_solve_adjoint_converges_below_unit_spectral_radius():
    rng = np.random.default_rng(2)
    n = 25
    A = rng.standard_normal((n, n))
    P = A.T @ A + n * np.eye(n)
    dP = rng.standard_normal((n, n))
    dR = rng.standard_normal((n, n))
    S = dP + dR
    # scale so the dense-eigenvalue oracle certifies convergence
    radius = np.max(np.abs(np.linalg.eigvals(np.linalg.solve(P, S))))
    scale = 0.6 / radius
    dP, dR = sp.csr_matrix(dP * scale), sp.csr_matrix(dR * scale)
    Pm = sp.csr_matrix(P)
    rhs = rng.standard_normal(n)
    z, rep = solve_adjoint(factorize_spd(Pm), dP, dR, rhs, 1e-10, 500, system_matrix=Pm)
    assert rep.converged and not rep.used_fallback
    z_ref = solve_general(Pm - dP - dR, rhs)
    assert np.max(np.abs(z - z_ref)) <= 1e-8 * (1 + np.max(np.abs(z_ref)))


def test_solve_adjoint_fallback_on_divergence():
    rng = np.random.default_rng(3)
    n = 10
    P = sp.csr_matrix(np.eye(n))
    dP = sp.csr_matrix(2.0 * np.eye(n))  # spectral radius 2: diverges
    dR = sp.csr_matrix((n, n))
    rhs = rng.standard_normal(n)
    z, rep = solve_adjoint(factorize_spd(P), dP, dR, rhs, 1e-8, 200, system_matrix=P)
    assert rep.used_fallback and not rep.converged
    K = (P - dP - dR).toarray()
    assert np.max(np.abs(K @ z - rhs)) <= 1e-8 * (1 + np.max(np.abs(rhs)))
    assert rep.residual <= 1e-8 * (1 + np.max(np.abs(rhs)))


def test_solve_adjoint_fallback_on_iteration_cap():
    rng = np.random.default_rng(4)
    n = 12
    A = rng.standard_normal((n, n))
    P = sp.csr_matrix(A.T @ A + n * np.eye(n))
    dP = sp.csr_matrix(0.5 * np.eye(n))
    dR = sp.csr_matrix((n, n))
    rhs = rng.standard_normal(n)
    z, rep = solve_adjoint(factorize_spd(P), dP, dR, rhs, 1e-14, 2, system_matrix=P)
    assert rep.used_fallback
    K = (P - dP).toarray()
    assert np.max(np.abs(K @ z - rhs)) <= 1e-8 * (1 + np.max(np.abs(rhs)))


# -- backward_step -------------------------------------------------------------------


def test_backward_free_fall_identity():
    mesh = make_grid(2, 2, 1.0)
    model = build(mesh, ws=1e-30, wb=1e-30, h=0.02)
    s0 = rest_state(mesh)
    _, tape = step(model, s0)
    rng = np.random.default_rng(6)
    gx = rng.standard_normal(12)
    adj, rep = backward_step(model, tape, AdjointState(gx.copy(), np.zeros(12)))
    assert np.allclose(adj.dL_dx, gx, rtol=1e-10, atol=1e-12)
    assert np.allclose(adj.dL_dv, 0.02 * gx, rtol=1e-10, atol=1e-12)


def _fd_state_directional(model, s0, steps, loss, which, direction, eps=1e-6):
    if which == "x":
        sp_ = SimState(s0.x + eps * direction, s0.v, s0.t)
        sm_ = SimState(s0.x - eps * direction, s0.v, s0.t)
    else:
        sp_ = SimState(s0.x, s0.v + eps * direction, s0.t)
        sm_ = SimState(s0.x, s0.v - eps * direction, s0.t)
    lp = loss.evaluate(simulate(model, sp_, steps)[0])[0]
    lm = loss.evaluate(simulate(model, sm_, steps)[0])[0]
    return (lp - lm) / (2 * eps)


def test_hanging_cloth_initial_velocity_gradient():
    mesh = make_grid(4, 4, 0.3)
    pins = [(12, lambda t: mesh.vertices[12]), (15, lambda t: mesh.vertices[15])]
    model = build(mesh, ws=25.0, wb=1e-3, h=0.01, attachments=pins, options=TIGHT)
    s0 = rest_state(mesh)
    steps = 12
    loss = deviation_loss(s0, steps)
    value, grads, reports = trajectory_gradient(model, s0, steps, loss, epsilon=1e-6)
    assert all(r.converged or r.used_fallback for r in reports)
    rng = np.random.default_rng(7)
    for _ in range(3):
        d = rng.standard_normal(48)
        d /= np.linalg.norm(d)
        fd = _fd_state_directional(model, s0, steps, loss, "v", d)
        an = float(grads["initial_v"] @ d)
        assert abs(an - fd) / max(abs(fd), 1e-10) <= 1e-3
        fdx = _fd_state_directional(model, s0, steps, loss, "x", d, eps=1e-7)
        anx = float(grads["initial_x"] @ d)
        assert abs(anx - fdx) / max(abs(fdx), 1e-10) <= 1e-3


def test_slope_friction_gradient_matches_fd():
    steps = 15
    mu = 0.3

    def run(mu_val, want_grad):
        model, s0 = _slope_model_and_state(35.0, mu_val, n=5)
        loss = deviation_loss(s0, steps)
        if want_grad:
            return trajectory_gradient(model, s0, steps, loss, epsilon=1e-6)
        states, tapes = simulate(model, s0, steps)
        cases = tuple(tuple(t.contact_case.tolist()) for t in tapes)
        return loss.evaluate(states)[0], cases

    _, grads, _ = run(mu, True)
    fd_step = 1e-5
    lp, cp = run(mu + fd_step, False)
    lm, cm = run(mu - fd_step, False)
    assert cp == cm  # case-stable finite difference
    fd = (lp - lm) / (2 * fd_step)
    an = float(grads["mu_obstacle_0"])
    assert abs(an - fd) / max(abs(fd), 1e-10) <= 1e-2


def test_mu_gradient_zero_when_stick_or_take_off():
    model, s0 = _slope_model_and_state(10.0, 0.8, n=4)  # sticks firmly
    steps = 8
    loss = deviation_loss(s0, steps)
    _, grads, _ = trajectory_gradient(model, s0, steps, loss)
    assert grads["mu_obstacle_0"] == 0.0


def test_wind_amplitude_gradient_symmetry_zero():
    # zero-amplitude wind in a direction the loss ignores: gradient must vanish
    mesh = make_grid(3, 3, 0.3)
    pins = [(6, lambda t: mesh.vertices[6]), (8, lambda t: mesh.vertices[8])]
    wind = WindModel(np.array([0.0, 0.0, 0.0]), 1.0, 0.0)  # sin(0) = 0 at t=0 too
    model = build(mesh, ws=20.0, wb=1e-3, h=0.01, attachments=pins, wind=wind, options=TIGHT)
    s0 = rest_state(mesh)
    steps = 6
    # loss that only reads z coordinates
    targets = np.tile(s0.x, (steps + 1, 1))

    class ZLoss(TrajectoryL2):
        def evaluate(self, states):
            v, sx, sv = super().evaluate(states)
            mask = np.tile([0.0, 0.0, 1.0], mesh.num_vertices)
            v = 0.0
            for i, s in enumerate(states[1:], start=1):
                d = (s.x - targets[i]) * mask
                v += float(d @ d)
                sx[i] = 2.0 * d
            return v, sx, sv

    _, grads, _ = trajectory_gradient(model, s0, steps, ZLoss(targets))
    # x-amplitude cannot move the z coordinates to first order at a = 0
    assert abs(grads["wind_amplitude"][0]) <= 1e-9


def test_all_parameter_gradients_on_contact_scene():
    # 6x6 cloth sliding on a shallow slope under wind: every parameter active
    theta = np.deg2rad(25.0)
    mesh0 = make_grid(6, 6, 0.08)
    R = np.array(
        [
            [np.cos(-theta), 0, np.sin(-theta)],
            [0, 1, 0],
            [-np.sin(-theta), 0, np.cos(-theta)],
        ]
    )
    mesh = TriMesh.build(mesh0.vertices @ R.T, mesh0.triangles)
    plane = HalfSpace(np.zeros(3), np.array([-np.sin(theta), 0.0, np.cos(theta)]), mu=0.3)
    wind = WindModel(np.array([2e-3, 1e-3, 5e-4]), 1.3, 0.2)

    def make_model(ws=22.0, wb=8e-4, rho=0.4, mu=0.3, amp=None, freq=1.3, phase=0.2):
        pl = HalfSpace(plane.point, plane.normal, mu=mu)
        wd = WindModel(np.array([2e-3, 1e-3, 5e-4]) if amp is None else amp, freq, phase)
        return build(
            mesh, density=rho, ws=ws, wb=wb, h=0.01, obstacles=[pl], wind=wd, options=TIGHT
        )

    steps = 12
    model = make_model()
    s0 = rest_state(mesh)
    loss = deviation_loss(s0, steps)
    _, grads, _ = trajectory_gradient(model, s0, steps, loss, epsilon=1e-6)

    def loss_at(**kw):
        m = make_model(**kw)
        states, tapes = simulate(m, s0, steps)
        cases = tuple(tuple(t.contact_case.tolist()) for t in tapes)
        return loss.evaluate(states)[0], cases

    def check(name, kw_name, base, scale=None, grad_val=None, rel=1e-5):
        s = rel * (abs(base) if scale is None else scale)
        lp, cp = loss_at(**{kw_name: base + s})
        lm, cm = loss_at(**{kw_name: base - s})
        assert cp == cm, f"{name}: case flip in FD"
        fd = (lp - lm) / (2 * s)
        an = grad_val if grad_val is not None else float(grads[name])
        assert abs(an - fd) / max(abs(fd), 1e-9) <= 1e-2, (
            f"{name}: adjoint {an:.6e} vs fd {fd:.6e}"
        )

    check("stretch_weight", "ws", 22.0)
    # the bend weight barely moves the loss: a larger step keeps the
    # difference above the forward solver's noise floor
    check("bend_weight", "wb", 8e-4, rel=0.05)
    check("density", "rho", 0.4)
    check("mu_obstacle_0", "mu", 0.3, scale=1.0)
    check("wind_frequency", "freq", 1.3)
    check("wind_phase", "phase", 0.2, scale=1.0)
    amp0 = np.array([2e-3, 1e-3, 5e-4])
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-8
        lp, cp = loss_at(amp=amp0 + e)
        lm, cm = loss_at(amp=amp0 - e)
        assert cp == cm
        fd = (lp - lm) / (2e-8)
        an = float(grads["wind_amplitude"][k])
        assert abs(an - fd) / max(abs(fd), 1e-9) <= 1e-2


def test_node_node_contact_gradients():
    # two-layer cloth: gradients through node-node contacts, incl. self mu
    base = make_grid(4, 4, 0.08)
    off = np.array([0.03, 0.02, 0.09])
    verts = np.vstack([base.vertices, base.vertices + off])
    tris = np.vstack([base.triangles, base.triangles + 16])
    mesh = TriMesh.build(verts, tris)
    pins = [(i, (lambda t, p=mesh.vertices[i]: p)) for i in (0, 3, 12, 15)]

    def make_model(mu=0.25):
        return build(
            mesh,
            ws=25.0,
            wb=5e-4,
            h=0.005,
            attachments=pins,
            self_collision=SelfCollisionConfig(True, 0.07, mu),
            options=TIGHT,
        )

    rng = np.random.default_rng(9)
    v0 = np.zeros(verts.size)
    v0.reshape(-1, 3)[16:] = [0.25, 0.18, -0.9]
    s0 = SimState(rest_state(mesh).x, v0, 0.0)
    steps = 10
    model = make_model()
    states, tapes = simulate(model, s0, steps)
    assert any(len(t.contact_set) > 0 for t in tapes)
    assert any(np.any(t.contact_case == 2) for t in tapes)  # some slip
    loss = deviation_loss(s0, steps)
    _, grads, _ = trajectory_gradient(model, s0, steps, loss, epsilon=1e-6)

    # self-collision mu FD
    s = 2e-5
    def loss_at(mu):
        m = make_model(mu)
        sts, tps = simulate(m, s0, steps)
        return loss.evaluate(sts)[0], tuple(tuple(t.contact_case.tolist()) for t in tps)

    lp, cp = loss_at(0.25 + s)
    lm, cm = loss_at(0.25 - s)
    assert cp == cm
    fd = (lp - lm) / (2 * s)
    an = float(grads["mu_self"])
    assert abs(an - fd) / max(abs(fd), 1e-9) <= 1e-2

    # initial-velocity directional FD through the pair contacts
    for _ in range(2):
        d = rng.standard_normal(v0.size)
        d /= np.linalg.norm(d)
        fdv = _fd_state_directional(model, s0, steps, loss, "v", d, eps=1e-6)
        anv = float(grads["initial_v"] @ d)
        assert abs(anv - fdv) / max(abs(fdv), 1e-9) <= 1e-2
