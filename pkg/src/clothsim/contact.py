"""Collision detection and the local dry-friction contact law.

Contacts are nodal: a cloth node against an analytic obstacle (half-space or
sphere, either side) or a pair of non-adjacent cloth nodes.  Each contact
carries an orthonormal frame whose third column is the contact normal,
estimated from positions at the start of the step.  The local law splits
into three mutually exclusive cases:

* take-off -- zero impulse, separating normal velocity;
* stick    -- zero relative velocity, impulse inside the friction cone;
* slip     -- impulse on the cone boundary, tangential velocity antiparallel
  to the tangential impulse.

The enforcement works on the free momentum d (what m * u would be with zero
impulse) and is positively homogeneous in d.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import scipy.sparse as sp

from .errors import SlipWithZeroTangent
from .mesh import TriMesh

__all__ = [
    "HalfSpace",
    "SphereObstacle",
    "ContactCase",
    "Contact",
    "ContactSet",
    "SelfCollisionConfig",
    "detect",
    "enforce_signorini_coulomb",
    "enforce_batch",
    "local_case_jacobians",
    "impulse_response",
    "impulse_normal_gradient",
    "impulse_mu_gradient",
    "contact_frame",
    "brute_force_pairs",
]

_TANGENT_SWITCH = 0.9


class ContactCase(IntEnum):
    TAKE_OFF = 0
    STICK = 1
    SLIP = 2


@dataclass(frozen=True)
class HalfSpace:
    """Solid half-space; the outward normal points into free space."""

    point: np.ndarray
    normal: np.ndarray
    mu: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("half-space normal must be unit length")
        if self.mu < 0:
            raise ValueError("friction coefficient must be nonnegative")
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))
        object.__setattr__(self, "normal", n)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        return (x - self.point[None, :]) @ self.normal

    def normals_at(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, x.shape).copy()


@dataclass(frozen=True)
class SphereObstacle:
    """Sphere; `side` says which region is free space for the cloth.

    exterior -- cloth lives outside the ball (a solid ball obstacle);
    interior -- cloth lives inside (a bowl-like concave surface).
    """

    center: np.ndarray
    radius: float
    mu: float = 0.0
    side: str = "exterior"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if self.side not in ("exterior", "interior"):
            raise ValueError("side must be 'exterior' or 'interior'")
        if self.mu < 0:
            raise ValueError("friction coefficient must be nonnegative")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(x - self.center[None, :], axis=1)
        return r - self.radius if self.side == "exterior" else self.radius - r

    def normals_at(self, x: np.ndarray) -> np.ndarray:
        d = x - self.center[None, :]
        r = np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        n = d / r
        return n if self.side == "exterior" else -n


Obstacle = HalfSpace | SphereObstacle


@dataclass(frozen=True)
class SelfCollisionConfig:
    enabled: bool = False
    radius: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if self.enabled and self.radius <= 0:
            raise ValueError("self-collision radius must be positive when enabled")


def contact_frame(normal: np.ndarray) -> np.ndarray:
    """Orthonormal frame with the normal in column 3.

    Tangents are completed by Gram-Schmidt against global x, or global y
    when the normal is nearly aligned with x, so frames are deterministic.
    """
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(n @ ref) > _TANGENT_SWITCH:
        ref = np.array([0.0, 1.0, 0.0])
    t1 = ref - (ref @ n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.column_stack([t1, t2, n])


@dataclass(frozen=True)
class Contact:
    """One active contact.

    node_b is None for node-obstacle contacts.  The normal points from the
    obstacle into the cloth, or from node_b towards node_a.  effective_mass
    is the node mass, or the reduced mass of the pair.
    """

    kind: str  # "obstacle" | "node-node"
    node_a: int
    node_b: int | None
    frame: np.ndarray  # (3, 3), columns (t1, t2, n)
    mu: float
    effective_mass: float
    obstacle_index: int | None = None
    depth: float = 0.0

    @property
    def normal(self) -> np.ndarray:
        return self.frame[:, 2]


@dataclass
class ContactSet:
    """Active contacts of one step, sorted by (kind, node index)."""

    contacts: list[Contact]
    num_vertices: int
    _jac: sp.csr_matrix | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.contacts)

    @property
    def node_a(self) -> np.ndarray:
        return np.array([c.node_a for c in self.contacts], dtype=np.int64)

    @property
    def node_b(self) -> np.ndarray:
        return np.array(
            [-1 if c.node_b is None else c.node_b for c in self.contacts], dtype=np.int64
        )

    @property
    def frames(self) -> np.ndarray:
        if not self.contacts:
            return np.zeros((0, 3, 3))
        return np.stack([c.frame for c in self.contacts])

    @property
    def mus(self) -> np.ndarray:
        return np.array([c.mu for c in self.contacts])

    @property
    def effective_masses(self) -> np.ndarray:
        return np.array([c.effective_mass for c in self.contacts])

    def jacobian(self) -> sp.csr_matrix:
        """Map from global velocities to stacked local relative velocities.

        Row block j holds R_j^T at the node's columns; node-node rows add
        -R_j^T at the partner's columns (relative velocity is v_a - v_b).
        """
        if self._jac is None:
            rows, cols, vals = [], [], []
            for j, c in enumerate(self.contacts):
                rt = c.frame.T
                for r in range(3):
                    for cc in range(3):
                        rows.append(3 * j + r)
                        cols.append(3 * c.node_a + cc)
                        vals.append(rt[r, cc])
                        if c.node_b is not None:
                            rows.append(3 * j + r)
                            cols.append(3 * c.node_b + cc)
                            vals.append(-rt[r, cc])
            self._jac = sp.csr_matrix(
                (vals, (rows, cols)),
                shape=(3 * len(self.contacts), 3 * self.num_vertices),
            )
        return self._jac

    def local_free_momentum(self, f: np.ndarray, node_mass: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-contact free momentum in world and local coordinates.

        f is a (3m,) momentum-like vector.  Obstacle contact: the node's
        block of f.  Node-node: m_eff * (f_a / m_a - f_b / m_b), i.e. what
        m_eff * u would be at zero impulse.
        """
        if not self.contacts:
            return np.zeros((0, 3)), np.zeros((0, 3))
        f3 = f.reshape(-1, 3)
        a = self.node_a
        b = self.node_b
        d_world = f3[a].copy()
        pair = b >= 0
        if np.any(pair):
            meff = self.effective_masses[pair][:, None]
            d_world[pair] = meff * (
                f3[a[pair]] / node_mass[a[pair]][:, None]
                - f3[b[pair]] / node_mass[b[pair]][:, None]
            )
        d_local = np.einsum("cba,cb->ca", self.frames, d_world)
        return d_world, d_local

    def scatter_impulses(self, r_world: np.ndarray) -> np.ndarray:
        """Accumulate world impulses onto the global vector (J^T r)."""
        out = np.zeros(3 * self.num_vertices)
        if not self.contacts:
            return out
        o3 = out.reshape(-1, 3)
        np.add.at(o3, self.node_a, r_world)
        b = self.node_b
        pair = b >= 0
        if np.any(pair):
            np.add.at(o3, b[pair], -r_world[pair])
        return out

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return np.einsum("cab,cb->ca", self.frames, local)

    def to_local(self, world: np.ndarray) -> np.ndarray:
        return np.einsum("cba,cb->ca", self.frames, world)


# -- detection -------------------------------------------------------------------


def _hash_pairs(pos: np.ndarray, radius: float) -> np.ndarray:
    """Candidate node pairs closer than `radius`, via a uniform grid."""
    cells = np.floor(pos / radius).astype(np.int64)
    grid: dict[tuple[int, int, int], list[int]] = {}
    for i, c in enumerate(map(tuple, cells)):
        grid.setdefault(c, []).append(i)
    out = []
    seen = set()
    offsets = [
        (dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    ]
    for c, nodes in grid.items():
        for off in offsets:
            nb = (c[0] + off[0], c[1] + off[1], c[2] + off[2])
            others = grid.get(nb)
            if not others:
                continue
            for i in nodes:
                for j in others:
                    if i < j and (i, j) not in seen:
                        if np.linalg.norm(pos[i] - pos[j]) < radius:
                            out.append((i, j))
                            seen.add((i, j))
    return np.asarray(sorted(out), dtype=np.int64).reshape(-1, 2)


def brute_force_pairs(pos: np.ndarray, radius: float) -> np.ndarray:
    """O(m^2) reference for the spatial-hash pair query."""
    m = pos.shape[0]
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    i, j = np.where((d < radius) & (np.arange(m)[:, None] < np.arange(m)[None, :]))
    return np.column_stack([i, j]).astype(np.int64)


def detect(
    x: np.ndarray,
    v: np.ndarray,
    obstacles: list[Obstacle],
    self_collision: SelfCollisionConfig,
    mesh: TriMesh,
    node_mass: np.ndarray,
    margin: float = 1e-3,
) -> ContactSet:
    """Collision detection at the start of a step.

    A node enters contact with an obstacle when its signed distance is at
    most `margin`; two non-adjacent nodes (graph distance > 2) collide when
    closer than the self-collision radius.  Each node joins at most one
    contact, chosen by deepest penetration.  `v` is accepted for interface
    stability but detection is purely positional.
    """
    pos = x.reshape(-1, 3)
    m = pos.shape[0]
    candidates: list[tuple[float, int, int, int, Contact]] = []

    for oi, ob in enumerate(obstacles):
        sd = ob.signed_distance(pos)
        idx = np.where(sd <= margin)[0]
        if idx.size == 0:
            continue
        normals = ob.normals_at(pos[idx])
        for node, nrm, dist in zip(idx, normals, sd[idx]):
            c = Contact(
                kind="obstacle",
                node_a=int(node),
                node_b=None,
                frame=contact_frame(nrm),
                mu=ob.mu,
                effective_mass=float(node_mass[node]),
                obstacle_index=oi,
                depth=float(margin - dist),
            )
            candidates.append((c.depth, 0, int(node), -1, c))

    if self_collision.enabled and m > 1:
        near = mesh.near_adjacency(hops=2)
        pairs = _hash_pairs(pos, self_collision.radius)
        for i, j in pairs:
            if near[i, j]:
                continue
            delta = pos[i] - pos[j]
            dist = float(np.linalg.norm(delta))
            if dist < 1e-12:
                continue  # coincident nodes: no usable normal
            c = Contact(
                kind="node-node",
                node_a=int(i),
                node_b=int(j),
                frame=contact_frame(delta / dist),
                mu=self_collision.mu,
                effective_mass=float(
                    node_mass[i] * node_mass[j] / (node_mass[i] + node_mass[j])
                ),
                depth=float(self_collision.radius - dist),
            )
            candidates.append((c.depth, 1, int(i), int(j), c))

    # deepest penetration wins; a node appears in at most one contact
    candidates.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    used: set[int] = set()
    chosen: list[Contact] = []
    for _, _, a, b, c in candidates:
        if a in used or (b >= 0 and b in used):
            continue
        used.add(a)
        if b >= 0:
            used.add(b)
        chosen.append(c)

    chosen.sort(key=lambda c: (0 if c.kind == "obstacle" else 1, c.node_a, c.node_b or -1))
    return ContactSet(chosen, m)


# -- local law --------------------------------------------------------------------


def enforce_batch(d_local: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized local enforcement; returns impulses and case codes."""
    d = np.atleast_2d(d_local)
    c = d.shape[0]
    r = np.zeros_like(d)
    case = np.full(c, int(ContactCase.TAKE_OFF), dtype=np.int64)
    dn = d[:, 2]
    dt = d[:, :2]
    nt = np.linalg.norm(dt, axis=1)
    pressing = dn < 0.0
    cone = mu * (-dn)
    stick = pressing & (nt <= cone)
    slip = pressing & (nt > cone)
    r[stick, :2] = -dt[stick]
    r[stick, 2] = -dn[stick]
    case[stick] = int(ContactCase.STICK)
    if np.any(slip):
        unit = dt[slip] / nt[slip][:, None]
        r[slip, :2] = -cone[slip][:, None] * unit
        r[slip, 2] = -dn[slip]
        case[slip] = int(ContactCase.SLIP)
    return r, case


def enforce_signorini_coulomb(
    d: np.ndarray, mu: float, m_eff: float
) -> tuple[np.ndarray, ContactCase]:
    """Impulse solving the local contact law for free momentum d.

    d is the local-frame momentum the node would carry with zero impulse;
    the resulting velocity is (d + r_hat) / m_eff.  Exactly one case holds:

    * d_N >= 0: take off, r_hat = 0;
    * pressing, |d_T| <= mu * |d_N|: stick, r_hat = -d (velocity zeroed);
    * otherwise: slip, normal cancelled, tangential impulse on the cone.
    """
    if m_eff <= 0:
        raise ValueError("effective mass must be positive")
    if mu < 0:
        raise ValueError("friction coefficient must be nonnegative")
    d = np.asarray(d, dtype=np.float64).reshape(3)
    r, case = enforce_batch(d[None, :], np.array([mu]))
    return r[0], ContactCase(int(case[0]))


def local_case_jacobians(
    contact: Contact, case: ContactCase, d: np.ndarray, mu: float
) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the converged case's three equality constraints.

    The constraint map C(r, u) per case (rows ordered normal-first):
    take-off: C = r; stick: C = u; slip: C = (u_N, r_T + mu * r_N * t(u_T))
    with t the unit tangential velocity direction.  Returns (dC/dr, dC/du)
    as 3x3 blocks in local (t1, t2, n) component order.
    """
    d = np.asarray(d, dtype=np.float64).reshape(3)
    if case == ContactCase.TAKE_OFF:
        return np.eye(3), np.zeros((3, 3))
    if case == ContactCase.STICK:
        return np.zeros((3, 3)), np.eye(3)
    r, _ = enforce_batch(d[None, :], np.array([mu]))
    u = (d + r[0]) / contact.effective_mass
    ut = u[:2]
    n = np.linalg.norm(ut)
    if n < 1e-12:
        raise SlipWithZeroTangent("tangential direction undefined at zero sliding velocity")
    t_hat = ut / n
    dC_dr = np.zeros((3, 3))
    dC_du = np.zeros((3, 3))
    # row 0: u_N = 0
    dC_du[0, 2] = 1.0
    # rows 1..2: r_T + mu * r_N * t(u_T) = 0
    dC_dr[1:, :2] = np.eye(2)
    dC_dr[1:, 2] = mu * t_hat
    dtdu = (np.eye(2) - np.outer(t_hat, t_hat)) / n
    rn = r[0, 2]
    dC_du[1:, :2] = mu * rn * dtdu
    return dC_dr, dC_du


# -- world-space derivatives of the local solve (consumed by the adjoint) ---------


def impulse_response(case: int, d_world: np.ndarray, normal: np.ndarray, mu: float) -> np.ndarray:
    """3x3 world map: derivative of the returned impulse w.r.t. free momentum.

    take-off: 0.  stick: -I (the impulse absorbs any momentum change).
    slip: derivative of d_N * (mu * t - n) with t the unit tangential
    direction of d; independent of the tangent basis choice.
    """
    if case == ContactCase.TAKE_OFF:
        return np.zeros((3, 3))
    if case == ContactCase.STICK:
        return -np.eye(3)
    n = normal
    dn = float(d_world @ n)
    dt = d_world - dn * n
    nt = np.linalg.norm(dt)
    if nt < 1e-300:
        raise SlipWithZeroTangent("slip response undefined at zero tangential momentum")
    t = dt / nt
    proj = np.eye(3) - np.outer(t, t) - np.outer(n, n)
    return np.outer(mu * t - n, n) + (mu * dn / nt) * proj


def impulse_normal_gradient(d_world: np.ndarray, normal: np.ndarray, mu: float) -> np.ndarray:
    """3x3 map: derivative of the slip impulse w.r.t. the contact normal.

    Only the slip case depends on the normal direction (take-off is zero and
    the stick impulse -d is frame-independent).
    """
    n = normal
    dn = float(d_world @ n)
    dt = d_world - dn * n
    nt = np.linalg.norm(dt)
    if nt < 1e-300:
        raise SlipWithZeroTangent("slip response undefined at zero tangential momentum")
    t = dt / nt
    # r(n) = (n . d) * (mu * t(n) - n), t(n) = (d - (n . d) n)/|...|
    ddt_dn = -(np.outer(n, d_world) + dn * np.eye(3))
    dt_dn = (np.eye(3) - np.outer(t, t)) @ ddt_dn / nt
    return np.outer(mu * t - n, d_world) + dn * (mu * dt_dn - np.eye(3))


def impulse_mu_gradient(d_world: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Derivative of the slip impulse w.r.t. the friction coefficient: d_N * t."""
    n = normal
    dn = float(d_world @ n)
    dt = d_world - dn * n
    nt = np.linalg.norm(dt)
    if nt < 1e-300:
        raise SlipWithZeroTangent("slip response undefined at zero tangential momentum")
    return dn * (dt / nt)
