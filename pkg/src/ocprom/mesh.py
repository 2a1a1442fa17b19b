"""Two-dimensional triangular meshes with tagged boundaries and subdomain labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DIRICHLET = "D"
NEUMANN = "N"
BULK = "BULK"
CONTROL = "CONTROL"
OBSERVATION = "OBSERVATION"

SIDES = ("west", "east", "south", "north", "diagonal")


class MeshError(ValueError):
    """Base class for invalid meshes and malformed mesh files."""


class MeshFormatError(MeshError):
    pass


class MeshIndexError(MeshError):
    pass


class UntaggedBoundaryError(MeshError):
    pass


class DuplicateEdgeError(MeshError):
    pass


class OrientationError(MeshError):
    pass


class ManifoldError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable P1 triangulation.

    ``boundary_edges`` is an ``(nb, 2)`` vertex-index array with one tag
    (``"D"`` or ``"N"``) per row in ``boundary_tags``. ``labels`` carries one
    subdomain label per triangle.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    labels: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("vertices", "triangles", "boundary_edges", "boundary_tags", "labels"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def tagged_vertices(self, tag: str) -> np.ndarray:
        """Sorted unique vertices lying on edges carrying ``tag``."""
        mask = self.boundary_tags == tag
        return np.unique(self.boundary_edges[mask].ravel())

    def label_set(self) -> set[str]:
        return set(self.labels.tolist())

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
            and np.array_equal(self.boundary_tags, other.boundary_tags)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = object.__hash__


def _edge_key(edges: np.ndarray) -> np.ndarray:
    return np.sort(edges, axis=1)


def topological_boundary(triangles: np.ndarray) -> np.ndarray:
    """Edges used by exactly one triangle, as sorted vertex pairs.

    Raises ``ManifoldError`` if any edge is shared by more than two triangles.
    """
    edges = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    keys, counts = np.unique(_edge_key(edges), axis=0, return_counts=True)
    if np.any(counts > 2):
        raise ManifoldError("edge shared by more than two triangles")
    return keys[counts == 1]


def validate_mesh(mesh: Mesh) -> None:
    """Check orientation, edge-manifoldness and boundary tag cover."""
    nv = mesh.n_vertices
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= nv):
        raise MeshIndexError("triangle references a vertex out of range")
    if mesh.boundary_edges.size and (
        mesh.boundary_edges.min() < 0 or mesh.boundary_edges.max() >= nv
    ):
        raise MeshIndexError("boundary edge references a vertex out of range")
    if np.any(mesh.signed_areas() <= 0.0):
        raise OrientationError("triangle with non-positive signed area")
    if len(mesh.labels) != mesh.n_triangles:
        raise MeshError("one label per triangle required")

    boundary = topological_boundary(mesh.triangles)
    tagged = _edge_key(mesh.boundary_edges)
    uniq, counts = np.unique(tagged, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise DuplicateEdgeError("boundary edge listed more than once")
    if not set(np.unique(mesh.boundary_tags).tolist()) <= {DIRICHLET, NEUMANN}:
        raise MeshError("boundary tags must be 'D' or 'N'")
    b_set = {tuple(e) for e in boundary.tolist()}
    t_set = {tuple(e) for e in uniq.tolist()}
    if b_set - t_set:
        raise UntaggedBoundaryError(f"{len(b_set - t_set)} boundary edge(s) without a tag")
    if t_set - b_set:
        raise ManifoldError("tagged edge is not on the topological boundary")


def _classify_side(p0, p1, extent, tol) -> str:
    x0, x1, y0, y1 = extent
    if abs(p0[0] - p1[0]) <= tol:
        if abs(p0[0] - x0) <= tol:
            return "west"
        if abs(p0[0] - x1) <= tol:
            return "east"
    if abs(p0[1] - p1[1]) <= tol:
        if abs(p0[1] - y0) <= tol:
            return "south"
        if abs(p0[1] - y1) <= tol:
            return "north"
    return "diagonal"


def generate_structured_rectangle(
    nx: int,
    ny: int,
    extent=(0.0, 1.0, 0.0, 1.0),
    tagging=None,
    subdomains=(),
) -> Mesh:
    """Structured triangulation of a rectangle.

    Each grid cell is split along its lower-left to upper-right diagonal.

    Parameters
    ----------
    nx, ny
        Cell counts per direction.
    extent
        ``(x0, x1, y0, y1)``.
    tagging
        Mapping from side name (``west``, ``east``, ``south``, ``north``,
        ``diagonal``) to ``"D"`` or ``"N"``. Missing sides default to ``"D"``.
    subdomains
        Sequence of ``(label, (x0, x1, y0, y1))`` boxes. A triangle takes the
        label of the first box containing its barycenter, else ``BULK``.
    """
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    x0, x1, y0, y1 = map(float, extent)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate extent")
    tagging = dict(tagging or {})
    unknown = set(tagging) - set(SIDES)
    if unknown:
        raise MeshError(f"unknown side(s) {sorted(unknown)}")
    for lab, (bx0, bx1, by0, by1) in subdomains:
        if bx0 < x0 or bx1 > x1 or by0 < y0 or by1 > y1 or bx1 <= bx0 or by1 <= by0:
            raise MeshError(f"subdomain box {lab!r} not inside extent")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    bary = vertices[triangles].mean(axis=1)
    labels = np.full(len(triangles), BULK, dtype=object)
    assigned = np.zeros(len(triangles), dtype=bool)
    for lab, (bx0, bx1, by0, by1) in subdomains:
        inside = (
            (bary[:, 0] >= bx0) & (bary[:, 0] <= bx1)
            & (bary[:, 1] >= by0) & (bary[:, 1] <= by1) & ~assigned
        )
        labels[inside] = lab
        assigned |= inside

    edges = topological_boundary(triangles)
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    tags = np.array(
        [
            tagging.get(_classify_side(vertices[a], vertices[b], (x0, x1, y0, y1), tol), DIRICHLET)
            for a, b in edges
        ],
        dtype=object,
    )
    mesh = Mesh(vertices, triangles, edges, tags.astype(str), labels.astype(str))
    validate_mesh(mesh)
    return mesh


def save_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format (17 significant digits)."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles} {len(mesh.boundary_edges)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices.tolist()]
    lines += [
        f"{a} {b} {c} {lab}" for (a, b, c), lab in zip(mesh.triangles.tolist(), mesh.labels)
    ]
    lines += [f"{a} {b} {t}" for (a, b), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    """Read a mesh written by :func:`save_mesh`.

    Triangles are reoriented counter-clockwise. Each class of defect raises
    its own :class:`MeshError` subclass.
    """
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 3:
        raise MeshFormatError("header must read 'NV NT NB'")
    try:
        nv, nt, nb = (int(t) for t in rows[0])
    except ValueError as exc:
        raise MeshFormatError("header counts must be integers") from exc
    if min(nv, nt, nb) < 0 or len(rows) != 1 + nv + nt + nb:
        raise MeshFormatError("line count does not match header")
    try:
        vertices = np.array([[float(a), float(b)] for a, b in rows[1 : 1 + nv]], dtype=float)
        tri_rows = rows[1 + nv : 1 + nv + nt]
        triangles = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in tri_rows], dtype=np.int64)
        labels = np.array([r[3] for r in tri_rows], dtype=str)
        edge_rows = rows[1 + nv + nt :]
        edges = np.array([[int(r[0]), int(r[1])] for r in edge_rows], dtype=np.int64)
        tags = np.array([r[2] for r in edge_rows], dtype=str)
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"malformed record: {exc}") from exc
    vertices = vertices.reshape(nv, 2)
    triangles = triangles.reshape(nt, 3)
    edges = edges.reshape(nb, 2)

    for arr, what in ((triangles, "triangle"), (edges, "boundary edge")):
        if arr.size and (arr.min() < 0 or arr.max() >= nv):
            raise MeshIndexError(f"{what} references vertex index outside 0..{nv - 1}")
    if nb:
        _, counts = np.unique(_edge_key(edges), axis=0, return_counts=True)
        if np.any(counts > 1):
            raise DuplicateEdgeError("boundary edge listed twice")
    if not set(tags.tolist()) <= {DIRICHLET, NEUMANN}:
        raise MeshFormatError("boundary tag must be D or N")

    p = vertices[triangles]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = area2 < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    mesh = Mesh(vertices, triangles, edges, tags, labels)
    validate_mesh(mesh)
    return mesh
