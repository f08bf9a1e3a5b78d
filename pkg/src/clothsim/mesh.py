"""Triangle meshes: topology, lumped masses, OBJ input/output.

A mesh is immutable after construction.  Edge and hinge topology is derived
once: an edge is a unique vertex pair appearing in at least one triangle, a
hinge is an interior edge together with the two vertices opposite it in the
adjacent triangles (the stencil used by the bending constraint).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateTriangle, NonManifoldEdge, ParseError

__all__ = ["TriMesh", "MassMatrix", "make_grid", "load_obj", "save_obj", "lumped_mass"]

_AREA_TOL = 1e-14


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    b = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh with derived edge/hinge topology.

    vertices   -- (m, 3) rest positions in meters
    triangles  -- (t, 3) vertex index triples
    edges      -- (e, 2) unique vertex pairs, each row sorted, rows ordered
    hinges     -- (h, 4) rows [i, j, k, l]: shared edge (i, j), opposite
                  vertices k and l (k < l); one row per interior edge
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray = field(repr=False)
    hinges: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, vertices, triangles) -> "TriMesh":
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError("vertices must be (m, 3)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError("triangles must be (t, 3)")
        m = vertices.shape[0]
        if triangles.size and (triangles.min() < 0 or triangles.max() >= m):
            raise IndexError("triangle index out of bounds")
        areas = _triangle_areas(vertices, triangles)
        if np.any(areas <= _AREA_TOL):
            bad = int(np.argmin(areas))
            raise DegenerateTriangle(f"triangle {bad} has zero rest area")
        edges, hinges = _derive_topology(triangles)
        return cls(vertices, triangles, edges, hinges)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def triangle_areas(self, positions: np.ndarray | None = None) -> np.ndarray:
        pos = self.vertices if positions is None else positions
        return _triangle_areas(pos, self.triangles)

    def total_area(self, positions: np.ndarray | None = None) -> float:
        return float(self.triangle_areas(positions).sum())

    def near_adjacency(self, hops: int = 2) -> sp.csr_matrix:
        """Boolean matrix marking vertex pairs within `hops` edges (incl. self)."""
        m = self.num_vertices
        i = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        j = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        a1 = sp.csr_matrix(
            (np.ones(i.size, dtype=bool), (i, j)), shape=(m, m), dtype=bool
        )
        reach = sp.identity(m, dtype=bool, format="csr")
        acc = reach
        for _ in range(hops):
            reach = reach @ a1
            acc = (acc + reach).astype(bool)
        return acc.tocsr()


def _derive_topology(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    edge_opposite: dict[tuple[int, int], list[int]] = {}
    for tri in triangles:
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            opp = int(tri[(k + 2) % 3])
            key = (a, b) if a < b else (b, a)
            edge_opposite.setdefault(key, []).append(opp)
    edges = []
    hinges = []
    for key in sorted(edge_opposite):
        opps = edge_opposite[key]
        if len(opps) > 2:
            raise NonManifoldEdge(f"edge {key} is shared by {len(opps)} triangles")
        edges.append(key)
        if len(opps) == 2:
            k, l = sorted(opps)
            hinges.append((key[0], key[1], k, l))
    edges_arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    hinges_arr = np.asarray(hinges, dtype=np.int64).reshape(-1, 4)
    return edges_arr, hinges_arr


def make_grid(nx: int, ny: int, spacing: float) -> TriMesh:
    """Regular nx-by-ny grid in the z=0 plane with alternating diagonal split."""
    if nx < 2 or ny < 2:
        raise ValueError("grid needs nx, ny >= 2")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    xs = np.arange(nx) * spacing
    ys = np.arange(ny) * spacing
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack(
        [gx.ravel(), gy.ravel(), np.zeros(nx * ny)]
    )  # index = iy * nx + ix
    tris = []
    for iy in range(ny - 1):
        for ix in range(nx - 1):
            v00 = iy * nx + ix
            v10 = v00 + 1
            v01 = v00 + nx
            v11 = v01 + 1
            if (ix + iy) % 2 == 0:
                tris.append((v00, v10, v11))
                tris.append((v00, v11, v01))
            else:
                tris.append((v00, v10, v01))
                tris.append((v10, v11, v01))
    return TriMesh.build(vertices, np.asarray(tris, dtype=np.int64))


def load_obj(path) -> TriMesh:
    """Load the OBJ subset ``v x y z`` / ``f i j k ...``.

    Faces use 1-based indices; ``/...`` suffixes are stripped.  Polygons with
    more than three vertices are fan-triangulated.  Texture and normal
    records are ignored.
    """
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex record needs 3 coordinates", lineno)
                try:
                    vertices.append(tuple(float(p) for p in parts[1:4]))
                except ValueError as exc:
                    raise ParseError(f"bad vertex coordinate: {exc}", lineno)
            elif tag == "f":
                if len(parts) < 4:
                    raise ParseError("face record needs at least 3 vertices", lineno)
                idx = []
                for p in parts[1:]:
                    head = p.split("/")[0]
                    try:
                        k = int(head)
                    except ValueError:
                        raise ParseError(f"bad face index {p!r}", lineno)
                    if k <= 0:
                        raise ParseError("face indices must be positive", lineno)
                    idx.append(k - 1)
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append((idx[0], a, b))
            # other records (vt, vn, usemtl, ...) are ignored
    if not vertices:
        raise ParseError("no vertex records found")
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    verts = np.asarray(vertices, dtype=np.float64)
    if tris.size and tris.max() >= len(verts):
        raise ParseError(f"face references vertex {int(tris.max()) + 1} of {len(verts)}")
    return TriMesh.build(verts, tris)


def save_obj(path, positions: np.ndarray, triangles: np.ndarray, frame: int | None = None) -> None:
    """Write the OBJ subset; the comment header records the frame index."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="utf-8") as fh:
        if frame is not None:
            fh.write(f"# frame {int(frame)}\n")
        for p in positions:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for t in np.asarray(triangles, dtype=np.int64):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


@dataclass(frozen=True)
class MassMatrix:
    """Lumped diagonal mass matrix; one positive mass per node."""

    node_mass: np.ndarray  # (m,) kg

    def __post_init__(self):
        if np.any(self.node_mass <= 0.0):
            raise ValueError("node masses must be strictly positive")

    @property
    def diagonal(self) -> np.ndarray:
        """Per-coordinate diagonal, each node mass replicated three times."""
        return np.repeat(self.node_mass, 3)

    @property
    def total(self) -> float:
        return float(self.node_mass.sum())


def lumped_mass(mesh: TriMesh, density: float) -> MassMatrix:
    """Each node receives one third of the rest area of its incident triangles."""
    if density <= 0:
        raise ValueError("density must be positive")
    areas = mesh.triangle_areas()
    node_mass = np.zeros(mesh.num_vertices)
    np.add.at(node_mass, mesh.triangles.ravel(), np.repeat(areas / 3.0, 3))
    return MassMatrix(node_mass * density)
