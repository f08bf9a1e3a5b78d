"""Quadratic constraint energies, local projections, and system assembly.

Each constraint contributes an energy ``w/2 * |A x - p|^2`` where ``A`` picks
a linear quantity off the global position vector and ``p`` is the projection
of ``A x`` onto the constraint manifold:

* stretch  -- per edge; ``A x`` is the edge vector, the manifold is the
  sphere of radius rest-length (projection rescales the edge).
* bend     -- per hinge; ``A x`` applies cotangent coefficients over the
  4-vertex stencil, the manifold is {0} for a flat rest shape, otherwise
  the sphere of radius rest-curvature magnitude.
* attach   -- per pinned vertex; the manifold is the (time-indexed) target
  point, so the projection ignores the current positions entirely.

The sum M + h^2 * sum_i w_i A_i^T A_i is constant across a simulation and is
factorized once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateEdge
from .mesh import MassMatrix, TriMesh
from .sparse import SparseMatrix

__all__ = [
    "PDConstraint",
    "ProjectionResult",
    "ConstraintSet",
    "Projections",
    "build_constraints",
    "project_local",
    "assemble_P",
    "hinge_coefficients",
]

STRETCH = "stretch"
BEND = "bend"
ATTACH = "attach"

_DEGENERATE_TOL = 1e-12
_FLAT_TOL = 1e-12

TargetFn = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class PDConstraint:
    """One quadratic energy term.

    kind     -- stretch | bend | attach
    weight   -- stiffness, > 0
    stencil  -- vertex indices whose positions the selector reads
    rest     -- rest length (stretch) or rest-curvature magnitude (bend)
    coeffs   -- cotangent coefficients (bend only), one per stencil vertex
    target   -- t -> (3,) target point (attach only)
    """

    kind: str
    weight: float
    stencil: tuple[int, ...]
    rest: float = 0.0
    coeffs: np.ndarray | None = None
    target: TargetFn | None = None

    def selector(self, num_vertices: int) -> sp.csr_matrix:
        """The 3 x 3m sparse row block mapping positions to A x."""
        A = SparseMatrix(3, 3 * num_vertices)
        if self.kind == STRETCH:
            i, j = self.stencil
            for c in range(3):
                A.add([c, c], [3 * i + c, 3 * j + c], [-1.0, 1.0])
        elif self.kind == BEND:
            for v, k in zip(self.stencil, self.coeffs):
                for c in range(3):
                    A.add([c], [3 * v + c], [float(k)])
        else:
            (i,) = self.stencil
            for c in range(3):
                A.add([c], [3 * i + c], [1.0])
        return A.tocsr()


@dataclass(frozen=True)
class ProjectionResult:
    """Projected value and its exact derivative.

    p_star   -- (3,) point on the constraint manifold
    jacobian -- (3, 3k) derivative of p_star w.r.t. the k stencil vertices
    """

    p_star: np.ndarray
    jacobian: np.ndarray


def _rescale_projection(q: np.ndarray, radius: float, label: str) -> tuple[np.ndarray, np.ndarray]:
    n = float(np.linalg.norm(q))
    if n < _DEGENERATE_TOL:
        raise DegenerateEdge(f"{label}: cannot rescale a near-zero vector")
    unit = q / n
    p = radius * unit
    jac = (radius / n) * (np.eye(3) - np.outer(unit, unit))
    return p, jac


def project_local(c: PDConstraint, x: np.ndarray, t: float = 0.0) -> ProjectionResult:
    """Project A x onto the constraint manifold; exact local derivative.

    Raises DegenerateEdge when a rescaling manifold sees |A x| below
    tolerance (the projection direction is undefined there).
    """
    pos = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if c.kind == STRETCH:
        i, j = c.stencil
        q = pos[j] - pos[i]
        p, jq = _rescale_projection(q, c.rest, "stretch")
        jac = np.hstack([-jq, jq])
        return ProjectionResult(p, jac)
    if c.kind == BEND:
        q = np.einsum("k,kd->d", c.coeffs, pos[list(c.stencil)])
        if c.rest < _FLAT_TOL:
            return ProjectionResult(np.zeros(3), np.zeros((3, 12)))
        p, jq = _rescale_projection(q, c.rest, "bend")
        jac = np.hstack([float(k) * jq for k in c.coeffs])
        return ProjectionResult(p, jac)
    # attach: target point, independent of current positions
    return ProjectionResult(np.asarray(c.target(t), dtype=np.float64), np.zeros((3, 3)))


def hinge_coefficients(rest: np.ndarray, hinge: np.ndarray) -> np.ndarray:
    """Cotangent coefficients (k0, k1, k2, k3) for one hinge stencil.

    Stencil order: shared edge (v0, v1), opposite vertices v2 and v3.  The
    coefficients sum to zero and annihilate any configuration in which the
    two triangles lie flat in a common plane with their rest shapes.
    """
    x0, x1, x2, x3 = (rest[int(v)] for v in hinge)

    def cot(a, b):
        cross = np.linalg.norm(np.cross(a, b))
        if cross < 1e-300:
            raise DegenerateEdge("degenerate hinge angle")
        return float(np.dot(a, b) / cross)

    c01 = cot(x1 - x0, x2 - x0)
    c02 = cot(x1 - x0, x3 - x0)
    c03 = cot(x0 - x1, x2 - x1)
    c04 = cot(x0 - x1, x3 - x1)
    return np.array([c03 + c04, c01 + c02, -c01 - c03, -c02 - c04])


@dataclass
class Projections:
    """Batched projection results for one evaluation point."""

    stretch_p: np.ndarray  # (E, 3)
    stretch_jac: np.ndarray  # (E, 3, 3) derivative w.r.t. the edge vector
    bend_p: np.ndarray  # (H, 3)
    bend_jac: np.ndarray  # (H, 3, 3) derivative w.r.t. the bending vector
    attach_p: np.ndarray  # (K, 3)


class ConstraintSet:
    """All constraints of a scene, compiled for batched evaluation."""

    def __init__(
        self,
        mesh: TriMesh,
        stretch_weight: float,
        bend_weight: float,
        attachments: Sequence[tuple[int, TargetFn]] = (),
        attach_weight: float | None = None,
    ):
        if stretch_weight <= 0 or bend_weight <= 0:
            raise ValueError("constraint weights must be positive")
        self.mesh = mesh
        self.stretch_weight = float(stretch_weight)
        self.bend_weight = float(bend_weight)
        self.attach_weight = float(
            attach_weight if attach_weight is not None else 1e4 * stretch_weight
        )

        m = mesh.num_vertices
        self.edges = mesh.edges
        rest = mesh.vertices
        self.rest_lengths = np.linalg.norm(
            rest[self.edges[:, 1]] - rest[self.edges[:, 0]], axis=1
        )
        if np.any(self.rest_lengths < _DEGENERATE_TOL):
            raise DegenerateEdge("mesh contains a zero-length rest edge")

        self.hinges = mesh.hinges
        self.bend_coeffs = np.array(
            [hinge_coefficients(rest, h) for h in self.hinges]
        ).reshape(-1, 4)
        if len(self.hinges):
            q0 = np.einsum("hk,hkd->hd", self.bend_coeffs, rest[self.hinges])
            self.bend_rest = np.linalg.norm(q0, axis=1)
        else:
            self.bend_rest = np.zeros(0)
        self._bend_flat = self.bend_rest < _FLAT_TOL

        self.attach_vertices = np.asarray([a[0] for a in attachments], dtype=np.int64)
        if self.attach_vertices.size and (
            self.attach_vertices.min() < 0 or self.attach_vertices.max() >= m
        ):
            raise IndexError("attachment vertex index out of bounds")
        self.attach_targets: list[TargetFn] = [a[1] for a in attachments]

        self._compile(m)

    # -- compiled sparse operators -------------------------------------------------

    def _compile(self, m: int) -> None:
        E = len(self.edges)
        H = len(self.hinges)
        K = len(self.attach_vertices)

        rows = np.repeat(np.arange(3 * E), 2)
        base = np.repeat(3 * self.edges, 3, axis=0)  # (3E, 2)
        offs = np.tile(np.arange(3), E)[:, None]
        cols = (base + offs).ravel()
        vals = np.tile([-1.0, 1.0], 3 * E)
        self.A_stretch = sp.csr_matrix((vals, (rows, cols)), shape=(3 * E, 3 * m))

        rows = np.repeat(np.arange(3 * H), 4)
        base = np.repeat(3 * self.hinges, 3, axis=0)  # (3H, 4)
        offs = np.tile(np.arange(3), H)[:, None] if H else np.zeros((0, 1), dtype=np.int64)
        cols = (base + offs).ravel()
        vals = np.repeat(self.bend_coeffs, 3, axis=0).ravel()
        self.A_bend = sp.csr_matrix((vals, (rows, cols)), shape=(3 * H, 3 * m))

        rows = np.arange(3 * K)
        cols = (
            (3 * self.attach_vertices)[:, None] + np.arange(3)[None, :]
        ).ravel() if K else np.zeros(0, dtype=np.int64)
        self.A_attach = sp.csr_matrix(
            (np.ones(3 * K), (rows, cols)), shape=(3 * K, 3 * m)
        )

        self.At_stretch = self.A_stretch.T.tocsr()
        self.At_bend = self.A_bend.T.tocsr()
        self.At_attach = self.A_attach.T.tocsr()

        # weighted Gram matrix sum_i w_i A_i^T A_i, shared by P and the splitting
        self.stiffness = (
            self.stretch_weight * (self.At_stretch @ self.A_stretch)
            + self.bend_weight * (self.At_bend @ self.A_bend)
            + self.attach_weight * (self.At_attach @ self.A_attach)
        ).tocsr()

    # -- spec-style per-constraint views -------------------------------------------

    def constraints(self) -> list[PDConstraint]:
        out: list[PDConstraint] = []
        for e, rest in zip(self.edges, self.rest_lengths):
            out.append(
                PDConstraint(STRETCH, self.stretch_weight, (int(e[0]), int(e[1])), float(rest))
            )
        for h, k, rest in zip(self.hinges, self.bend_coeffs, self.bend_rest):
            out.append(
                PDConstraint(BEND, self.bend_weight, tuple(int(v) for v in h), float(rest), coeffs=k)
            )
        for v, tgt in zip(self.attach_vertices, self.attach_targets):
            out.append(PDConstraint(ATTACH, self.attach_weight, (int(v),), target=tgt))
        return out

    # -- batched evaluation ---------------------------------------------------------

    def project_all(self, x: np.ndarray, t: float) -> Projections:
        pos = x.reshape(-1, 3)
        eye = np.eye(3)

        e = pos[self.edges[:, 1]] - pos[self.edges[:, 0]]
        n = np.linalg.norm(e, axis=1)
        if np.any(n < _DEGENERATE_TOL):
            raise DegenerateEdge(f"edge {int(np.argmin(n))} collapsed during projection")
        unit = e / n[:, None]
        sp_p = self.rest_lengths[:, None] * unit
        scale = (self.rest_lengths / n)[:, None, None]
        sp_j = scale * (eye[None] - unit[:, :, None] * unit[:, None, :])

        H = len(self.hinges)
        if H:
            q = np.einsum("hk,hkd->hd", self.bend_coeffs, pos[self.hinges])
            bp = np.zeros((H, 3))
            bj = np.zeros((H, 3, 3))
            curved = ~self._bend_flat
            if np.any(curved):
                qc = q[curved]
                nc = np.linalg.norm(qc, axis=1)
                if np.any(nc < _DEGENERATE_TOL):
                    raise DegenerateEdge("bending vector collapsed during projection")
                uc = qc / nc[:, None]
                rc = self.bend_rest[curved]
                bp[curved] = rc[:, None] * uc
                bj[curved] = (rc / nc)[:, None, None] * (
                    eye[None] - uc[:, :, None] * uc[:, None, :]
                )
        else:
            bp = np.zeros((0, 3))
            bj = np.zeros((0, 3, 3))

        ap = (
            np.array([tgt(t) for tgt in self.attach_targets], dtype=np.float64).reshape(-1, 3)
            if self.attach_targets
            else np.zeros((0, 3))
        )
        return Projections(sp_p, sp_j, bp, bj, ap)

    def projection_rhs(self, proj: Projections) -> np.ndarray:
        """sum_i w_i A_i^T p_i for the global step's right-hand side."""
        out = self.stretch_weight * (self.At_stretch @ proj.stretch_p.ravel())
        if len(self.hinges):
            out += self.bend_weight * (self.At_bend @ proj.bend_p.ravel())
        if len(self.attach_vertices):
            out += self.attach_weight * (self.At_attach @ proj.attach_p.ravel())
        return out

    def projection_correction(self, proj: Projections, h: float) -> sp.csr_matrix:
        """h^2 * sum_i w_i A_i^T (d p_i*/d x): the projection part of the step Hessian."""
        m3 = self.A_stretch.shape[1]
        E = len(self.edges)
        out = sp.csr_matrix((m3, m3))
        if E:
            bd = sp.bsr_matrix(
                (proj.stretch_jac, np.arange(E), np.arange(E + 1)), shape=(3 * E, 3 * E)
            )
            out = out + self.stretch_weight * (self.At_stretch @ (bd @ self.A_stretch))
        H = len(self.hinges)
        if H and np.any(~self._bend_flat):
            bd = sp.bsr_matrix(
                (proj.bend_jac, np.arange(H), np.arange(H + 1)), shape=(3 * H, 3 * H)
            )
            out = out + self.bend_weight * (self.At_bend @ (bd @ self.A_bend))
        return (h * h) * out.tocsr()

    def residuals(self, x: np.ndarray, proj: Projections) -> tuple[np.ndarray, ...]:
        """Per-kind stacked A x - p at the evaluation point."""
        rs = self.A_stretch @ x - proj.stretch_p.ravel()
        rb = self.A_bend @ x - proj.bend_p.ravel() if len(self.hinges) else np.zeros(0)
        ra = (
            self.A_attach @ x - proj.attach_p.ravel()
            if len(self.attach_vertices)
            else np.zeros(0)
        )
        return rs, rb, ra

    def energy(self, x: np.ndarray, proj: Projections) -> float:
        rs, rb, ra = self.residuals(x, proj)
        return 0.5 * (
            self.stretch_weight * float(rs @ rs)
            + self.bend_weight * float(rb @ rb)
            + self.attach_weight * float(ra @ ra)
        )

    def energy_gradient(self, x: np.ndarray, proj: Projections) -> np.ndarray:
        """sum_i w_i A_i^T (A_i x - p_i*); exact because p* is a minimizer."""
        rs, rb, ra = self.residuals(x, proj)
        g = self.stretch_weight * (self.At_stretch @ rs)
        if rb.size:
            g += self.bend_weight * (self.At_bend @ rb)
        if ra.size:
            g += self.attach_weight * (self.At_attach @ ra)
        return g


def build_constraints(
    mesh: TriMesh,
    stretch_weight: float,
    bend_weight: float,
    attachments: Sequence[tuple[int, TargetFn]] = (),
    attach_weight: float | None = None,
) -> ConstraintSet:
    """One stretch constraint per edge, one bend per hinge, one attach per pin."""
    return ConstraintSet(mesh, stretch_weight, bend_weight, attachments, attach_weight)


def assemble_P(M: MassMatrix, constraints: ConstraintSet, h: float) -> SparseMatrix:
    """The constant implicit-step matrix M + h^2 * sum_i w_i A_i^T A_i."""
    if h <= 0:
        raise ValueError("time step must be positive")
    K = ((h * h) * constraints.stiffness).tocoo()
    n = K.shape[0]
    out = SparseMatrix(n, n)
    diag = np.arange(n)
    out.add(diag, diag, M.diagonal)
    if K.nnz:
        out.add(K.row, K.col, K.data)
    return out
