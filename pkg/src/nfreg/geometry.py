"""Triangle meshes, point clouds and the geometric plumbing around them.

Hard point-wise maps are plain integer arrays throughout the package:
``p2p[j] = i`` sends point ``j`` of the *target* to point ``i`` of the
*source*. Soft maps are row-stochastic ``(n_target, n_source)`` matrices.
"""

from __future__ import annotations

import heapq
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGeometry,
    EmptyMesh,
    MissingProvenance,
    NotARotation,
    NoVisibleSurface,
    ParseError,
)

logger = logging.getLogger(__name__)

AREA_EPS = 1e-12


def _readonly(a):
    a.flags.writeable = False
    return a


class Mesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : (N, 3) array_like
    faces : (F, 3) array_like of int
    validate : bool
        Check index range and reject zero-area faces. Deformed copies of an
        already validated mesh skip this (see :meth:`with_vertices`).
    """

    def __init__(self, vertices, faces, validate=True):
        v = np.array(vertices, dtype=np.float64)
        f = np.array(faces, dtype=np.int64)
        if v.size == 0 or f.size == 0:
            raise EmptyMesh("mesh needs at least one vertex and one face")
        if v.ndim != 2 or v.shape[1] != 3:
            raise ParseError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ParseError(f"faces must be (F, 3), got {f.shape}")
        if validate:
            if f.min() < 0 or f.max() >= len(v):
                raise ParseError(
                    f"face index out of range [0, {len(v)}): "
                    f"min={f.min()}, max={f.max()}"
                )
            repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if repeated.any():
                raise DegenerateGeometry(f"face {np.flatnonzero(repeated)[0]} repeats a vertex")
            small = _face_areas(v, f) <= AREA_EPS
            if small.any():
                raise DegenerateGeometry(f"face {np.flatnonzero(small)[0]} has zero area")
        self.vertices = _readonly(v)
        self.faces = _readonly(f)

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_faces={len(self.faces)})"

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def points(self):
        return self.vertices

    def with_vertices(self, vertices):
        """Same connectivity, new positions (no validation)."""
        return Mesh(vertices, self.faces, validate=False)

    @cached_property
    def face_areas(self):
        return _readonly(_face_areas(self.vertices, self.faces))

    @cached_property
    def vertex_areas(self):
        """Lumped (barycentric) area: a third of every incident face."""
        a = np.zeros(self.n_vertices)
        np.add.at(a, self.faces.ravel(), np.repeat(self.face_areas / 3.0, 3))
        return _readonly(a)

    @property
    def area(self):
        return float(self.face_areas.sum())

    @cached_property
    def edges(self):
        """Unique undirected edges as an (E, 2) array with ``e[:, 0] < e[:, 1]``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return _readonly(np.unique(e, axis=0))

    @cached_property
    def adjacency(self):
        """Symmetric sparse matrix of Euclidean edge lengths."""
        e = self.edges
        w = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        n = self.n_vertices
        A = sparse.coo_matrix(
            (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(n, n),
        )
        return A.tocsr()

    @cached_property
    def neighbors(self):
        A = self.adjacency
        return [A.indices[A.indptr[i]:A.indptr[i + 1]].copy() for i in range(self.n_vertices)]

    @cached_property
    def centroid(self):
        a = self.vertex_areas
        return _readonly(a @ self.vertices / a.sum())

    @property
    def bbox_diagonal(self):
        return bbox_diagonal(self.vertices)

    def n_components(self):
        return csgraph.connected_components(self.adjacency, directed=False)[0]


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D points, optionally tagged with indices into a parent mesh."""

    points: np.ndarray
    provenance: np.ndarray | None = field(default=None)

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if len(p) < 1:
            raise EmptyMesh("point cloud is empty")
        object.__setattr__(self, "points", _readonly(p))
        if self.provenance is not None:
            prov = np.array(self.provenance, dtype=np.int64).ravel()
            if len(prov) != len(p):
                raise MissingProvenance(f"{len(prov)} provenance indices for {len(p)} points")
            if prov.min() < 0 or len(np.unique(prov)) != len(prov):
                raise MissingProvenance("provenance indices must be unique and non-negative")
            object.__setattr__(self, "provenance", _readonly(prov))

    def __len__(self):
        return len(self.points)

    @property
    def n_vertices(self):
        return len(self.points)

    @property
    def centroid(self):
        return self.points.mean(axis=0)


def _face_areas(v, f):
    return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)


def bbox_diagonal(points):
    points = np.asarray(points)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def as_points(shape):
    if isinstance(shape, (Mesh, PointCloud)):
        return shape.points
    return np.asarray(shape, dtype=np.float64)


def nearest_neighbors(data, queries, tree=None):
    """Nearest row of ``data`` for every row of ``queries``.

    Exact distance ties resolve to the lowest index.

    Returns
    -------
    idx : (n_queries,) int array
    dist : (n_queries,) float array
    """
    data = np.asarray(data, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if tree is None:
        tree = cKDTree(data)
    k = min(4, len(data))
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        return idx.astype(np.int64), dist
    tied = dist == dist[:, :1]
    best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    return best.astype(np.int64), dist[:, 0]


# --------------------------------------------------------------------------- I/O


def _tokens(path):
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                yield line


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_off(path):
    lines = list(_tokens(path))
    if not lines:
        raise ParseError(f"{path}: empty file")
    head = lines[0].split()
    if head[0] != "OFF":
        raise ParseError(f"{path}: missing OFF header")
    rest = head[1:]
    body = lines[1:]
    if not rest:
        rest, body = body[0].split(), body[1:]
    try:
        nv, nf = int(rest[0]), int(rest[1])
        verts = [[float(x) for x in body[i].split()[:3]] for i in range(nv)]
        faces = []
        for i in range(nf):
            parts = [int(x) for x in body[nv + i].split()]
            faces.extend(_fan(parts[1:1 + parts[0]]))
    except (ValueError, IndexError) as err:
        raise ParseError(f"{path}: malformed OFF ({err})") from err
    return verts, faces


def _read_ply_ascii(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: missing ply magic")
    elements = []
    i = 1
    try:
        while lines[i].strip() != "end_header":
            parts = lines[i].split()
            if parts[0] == "format" and parts[1] != "ascii":
                raise ParseError(f"{path}: only ascii PLY is supported")
            if parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                elements[-1][2].append(parts[-1])
            i += 1
    except IndexError as err:
        raise ParseError(f"{path}: unterminated PLY header") from err
    body = [ln for ln in lines[i + 1:] if ln.strip()]
    verts, faces, pos = [], [], 0
    try:
        for name, count, props in elements:
            rows = body[pos:pos + count]
            if len(rows) != count:
                raise ParseError(f"{path}: expected {count} {name} rows")
            pos += count
            if name == "vertex":
                ix = [props.index(c) for c in "xyz"]
                for r in rows:
                    vals = r.split()
                    verts.append([float(vals[j]) for j in ix])
            elif name == "face":
                for r in rows:
                    vals = [int(x) for x in r.split()]
                    faces.extend(_fan(vals[1:1 + vals[0]]))
    except ValueError as err:
        raise ParseError(f"{path}: malformed PLY body ({err})") from err
    return verts, faces


def load_mesh(path):
    """Read an ascii OFF or PLY triangle mesh; polygons are fan-triangulated."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".off":
        verts, faces = _read_off(path)
    elif ext == ".ply":
        verts, faces = _read_ply_ascii(path)
    else:
        raise ParseError(f"unsupported mesh extension {ext!r}")
    if not verts or not faces:
        raise EmptyMesh(f"{path}: no vertices or faces")
    return Mesh(verts, faces)


def _fmt_rows(a, fmt):
    return "".join(fmt % tuple(r) + "\n" for r in a)


def save_mesh(path, mesh):
    ext = os.path.splitext(str(path))[1].lower()
    v, f = mesh.vertices, mesh.faces
    if ext == ".off":
        text = f"OFF\n{len(v)} {len(f)} 0\n" + _fmt_rows(v, "%.17g %.17g %.17g")
        text += _fmt_rows(f, "3 %d %d %d")
    elif ext == ".ply":
        text = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(v)}\nproperty double x\nproperty double y\nproperty double z\n"
            f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
        )
        text += _fmt_rows(v, "%.17g %.17g %.17g") + _fmt_rows(f, "3 %d %d %d")
    else:
        raise ParseError(f"unsupported mesh extension {ext!r}")
    with open(path, "w") as fh:
        fh.write(text)


def provenance_path(path):
    return str(path) + ".prov"


def load_cloud(path):
    """Read an XYZ or PLY point cloud, plus its ``.prov`` sidecar if present."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".xyz":
        try:
            pts = [[float(x) for x in ln.split()[:3]] for ln in _tokens(path)]
        except ValueError as err:
            raise ParseError(f"{path}: malformed XYZ ({err})") from err
    elif ext == ".ply":
        pts, _ = _read_ply_ascii(path)
    elif ext == ".off":
        pts = load_mesh(path).vertices
    else:
        raise ParseError(f"unsupported cloud extension {ext!r}")
    prov = None
    if os.path.exists(provenance_path(path)):
        prov = load_indices(provenance_path(path))
    return PointCloud(np.asarray(pts, dtype=np.float64).reshape(-1, 3), prov)


def save_cloud(path, cloud):
    ext = os.path.splitext(str(path))[1].lower()
    pts = as_points(cloud)
    if ext == ".xyz":
        text = _fmt_rows(pts, "%.17g %.17g %.17g")
    elif ext == ".ply":
        text = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(pts)}\nproperty double x\nproperty double y\nproperty double z\n"
            "end_header\n"
        ) + _fmt_rows(pts, "%.17g %.17g %.17g")
    else:
        raise ParseError(f"unsupported cloud extension {ext!r}")
    with open(path, "w") as fh:
        fh.write(text)
    if isinstance(cloud, PointCloud) and cloud.provenance is not None:
        save_indices(provenance_path(path), cloud.provenance)


def save_indices(path, idx):
    with open(path, "w") as fh:
        fh.write("".join(f"{int(i)}\n" for i in np.asarray(idx).ravel()))


def load_indices(path):
    try:
        return np.array([int(ln) for ln in _tokens(path)], dtype=np.int64)
    except ValueError as err:
        raise ParseError(f"{path}: expected one integer per line") from err


# ---------------------------------------------------------------- geodesics


def geodesic_matrix(mesh):
    """All-pairs shortest paths along mesh edges (Euclidean edge weights).

    Vertices in different connected components are at distance ``inf``.
    """
    D = csgraph.dijkstra(mesh.adjacency, directed=False)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def k_nearest_seeds(adjacency, seeds, k):
    """Graph distances from every vertex to its ``k`` geodesically nearest seeds.

    A label-propagating Dijkstra: each vertex settles at most ``k`` distinct
    seeds, so memory stays O(N k) instead of O(N H).

    Returns
    -------
    idx : (N, k) int array, position into ``seeds`` (-1 where unreachable)
    dist : (N, k) float array (``inf`` where unreachable)
    """
    A = sparse.csr_matrix(adjacency)
    n = A.shape[0]
    idx = np.full((n, k), -1, dtype=np.int64)
    dist = np.full((n, k), np.inf)
    count = np.zeros(n, dtype=np.int64)
    settled = [set() for _ in range(n)]
    heap = [(0.0, int(s), si) for si, s in enumerate(seeds)]
    heapq.heapify(heap)
    indptr, indices, data = A.indptr, A.indices, A.data
    while heap:
        d, v, s = heapq.heappop(heap)
        if count[v] >= k or s in settled[v]:
            continue
        settled[v].add(s)
        idx[v, count[v]] = s
        dist[v, count[v]] = d
        count[v] += 1
        for p in range(indptr[v], indptr[v + 1]):
            u = indices[p]
            if count[u] < k and s not in settled[u]:
                heapq.heappush(heap, (d + data[p], int(u), s))
    return idx, dist


# ------------------------------------------------------------ rigid alignment


def check_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NotARotation(f"expected a finite 3x3 matrix, got shape {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise NotARotation("matrix is not orthonormal with determinant +1")
    return R


def center_and_orient(shape, rotation=None):
    """Move the centroid to the origin, then apply the inverse rotation ``R^T``.

    Meshes use the area-weighted centroid, clouds the arithmetic mean.
    Returns an object of the same type as ``shape``.
    """
    R = np.eye(3) if rotation is None else check_rotation(rotation)
    pts = (shape.points - shape.centroid) @ R
    if isinstance(shape, Mesh):
        return shape.with_vertices(pts)
    return PointCloud(pts, shape.provenance)


# ------------------------------------------------------------ partial views


def icosahedron_vertices():
    """The 12 unit vertices of a regular icosahedron."""
    p = (1.0 + np.sqrt(5.0)) / 2.0
    v = []
    for a in (-1.0, 1.0):
        for b in (-p, p):
            v += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    v = np.array(v)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def fibonacci_directions(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _frame(d):
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return d, e1, np.cross(d, e1)


def cast_view(mesh, direction, resolution=256, eps=1e-12):
    """Orthographic first-hit ray casting from ``direction`` toward the origin.

    Rays start on a ``resolution x resolution`` grid of pixel centres spanning
    the mesh's projected bounding box and travel along ``-direction``.
    Each ray is tested with the Moller-Trumbore algorithm against the faces
    whose projected bounding box contains its pixel.

    Returns
    -------
    faces : (n_hits,) int array of the first face hit per pixel
    points : (n_hits, 3) hit positions
    """
    V, F = mesh.vertices, mesh.faces
    d, e1, e2 = _frame(np.asarray(direction, dtype=np.float64))
    a, b = V @ e1, V @ e2
    lo_a, lo_b = a.min(), b.min()
    span = max(a.max() - lo_a, b.max() - lo_b)
    pix = span * (1.0 + 1e-6) / resolution
    fa, fb = a[F], b[F]
    i0 = np.clip(np.ceil((fa.min(1) - lo_a) / pix - 0.5), 0, resolution - 1).astype(np.int64)
    i1 = np.clip(np.floor((fa.max(1) - lo_a) / pix - 0.5), -1, resolution - 1).astype(np.int64)
    j0 = np.clip(np.ceil((fb.min(1) - lo_b) / pix - 0.5), 0, resolution - 1).astype(np.int64)
    j1 = np.clip(np.floor((fb.max(1) - lo_b) / pix - 0.5), -1, resolution - 1).astype(np.int64)
    wi = np.maximum(i1 - i0 + 1, 0)
    wj = np.maximum(j1 - j0 + 1, 0)
    counts = wi * wj
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    face = np.repeat(np.arange(len(F)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    pi = i0[face] + local % wi[face]
    pj = j0[face] + local // wi[face]

    height = (V @ d).max() + span + 1.0
    orig = (lo_a + (pi + 0.5) * pix)[:, None] * e1 + (lo_b + (pj + 0.5) * pix)[:, None] * e2 + height * d
    ray = -d
    v0 = V[F[face, 0]]
    edge1 = V[F[face, 1]] - v0
    edge2 = V[F[face, 2]] - v0
    p = np.cross(ray, edge2)
    det = np.einsum("ij,ij->i", edge1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = orig - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, edge1)
    v = (q @ ray) * inv
    t = np.einsum("ij,ij->i", edge2, q) * inv
    tol = 1e-9
    hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol) & (t > 0)
    if not hit.any():
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    pid = (pi * resolution + pj)[hit]
    t, face, orig = t[hit], face[hit], orig[hit]
    order = np.lexsort((face, t, pid))
    first = order[np.r_[True, pid[order][1:] != pid[order][:-1]]]
    return face[first], orig[first] + t[first, None] * ray


def sample_partial_views(mesh, n_views=12, points_per_view=None, directions=None, resolution=256, seed=0):
    """Partial point clouds of ``mesh`` as seen from several directions.

    Views default to the 12 icosahedron vertices (any other count uses a
    Fibonacci sphere). Every first-hit sample is snapped to the nearest
    corner of the face it hit; each output holds the distinct visible
    vertices, in increasing index order, with their indices as provenance.
    At most ``points_per_view`` vertices are kept (seeded subsample).
    """
    if directions is None:
        directions = icosahedron_vertices() if n_views == 12 else fibonacci_directions(n_views)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    rng = np.random.default_rng(seed)
    centred = mesh.with_vertices(mesh.vertices - mesh.centroid)
    views = []
    for k, d in enumerate(directions):
        faces, hits = cast_view(centred, d, resolution)
        if len(faces) == 0:
            raise NoVisibleSurface(f"view {k} ({d}) hits no surface")
        corners = mesh.faces[faces]
        gap = np.linalg.norm(centred.vertices[corners] - hits[:, None, :], axis=2)
        vids = np.unique(corners[np.arange(len(corners)), gap.argmin(axis=1)])
        if points_per_view is not None and len(vids) > points_per_view:
            vids = np.sort(rng.choice(vids, size=points_per_view, replace=False))
        views.append(PointCloud(mesh.vertices[vids], vids))
        logger.debug("view %d: %d rays hit, %d vertices visible", k, len(faces), len(vids))
    return views
