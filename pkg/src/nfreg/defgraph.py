"""Embedded deformation graph.

Nodes are a quadric-decimated subset of the mesh vertices. Every node ``h``
carries an axis-angle rotation ``theta[h]`` and a translation ``trans[h]``;
a vertex ``v`` bound to nodes ``h`` with weights ``w`` moves to::

    v' = sum_h w_h (R(theta_h) (v - g_h) + g_h + trans_h)
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DimensionMismatch
from .geometry import k_nearest_seeds

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-8
SKIN_K = 4
DEFAULT_BETA = 10.0


# ----------------------------------------------------------------- rotations


def skew(w):
    """Cross-product matrices for (..., 3) vectors."""
    w = np.asarray(w, dtype=np.float64)
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -w[..., 2], w[..., 1]
    S[..., 1, 0], S[..., 1, 2] = w[..., 2], -w[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -w[..., 1], w[..., 0]
    return S


def rodrigues(theta):
    """Rotation matrices for axis-angle vectors of shape (3,) or (H, 3).

    Below ``|theta| = 1e-8`` the second-order series ``I + K + K^2/2`` is
    used (``K = [theta]_x``), which is exact to rounding there and returns
    the identity at zero.
    """
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    th = np.atleast_2d(theta)
    angle = np.linalg.norm(th, axis=1)
    K = skew(th)
    K2 = K @ K
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2
    return R[0] if single else R


def rodrigues_jacobian(theta):
    """Derivatives ``dR/dtheta_i`` as an (H, 3, 3, 3) array indexed [h, i].

    Uses ``dR/dtheta_i = (theta_i [theta]_x + [theta x (I - R) e_i]_x) R / |theta|^2``
    away from zero and the series derivative of ``I + K + K^2/2`` near it.
    """
    th = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    H = len(th)
    R = rodrigues(th)
    angle2 = np.einsum("hi,hi->h", th, th)
    small = np.sqrt(angle2) < SMALL_ANGLE
    K = skew(th)
    E = skew(np.eye(3))  # E[i] = [e_i]_x
    J = np.empty((H, 3, 3, 3))
    IminusR = np.eye(3) - R
    for i in range(3):
        w = np.cross(th, IminusR[:, :, i])
        big = (th[:, i, None, None] * K + skew(w)) @ R / np.where(small, 1.0, angle2)[:, None, None]
        series = E[i] + 0.5 * (E[i] @ K + K @ E[i])
        J[:, i] = np.where(small[:, None, None], series, big)
    return J


def rotation_to_axis_angle(R):
    return Rotation.from_matrix(R).as_rotvec()


# ---------------------------------------------------------------- parameters


@dataclass
class GraphParams:
    """Per-node axis-angle rotations and translations, both (H, 3)."""

    theta: np.ndarray
    trans: np.ndarray

    @classmethod
    def identity(cls, n_nodes):
        return cls(np.zeros((n_nodes, 3)), np.zeros((n_nodes, 3)))

    @classmethod
    def from_rigid(cls, graph, R, t):
        """Parameters that move every node by the rigid motion ``x -> R x + t``."""
        R = np.asarray(R, dtype=np.float64)
        g = graph.nodes
        theta = np.tile(rotation_to_axis_angle(R), (len(g), 1))
        return cls(theta, g @ R.T + np.asarray(t) - g)

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=np.float64).reshape(2, -1, 3)
        return cls(x[0].copy(), x[1].copy())

    def to_vector(self):
        return np.concatenate([self.theta.ravel(), self.trans.ravel()])

    @property
    def n_nodes(self):
        return len(self.theta)

    def wrapped(self):
        """Equivalent parameters with every rotation angle below 2 pi."""
        angle = np.linalg.norm(self.theta, axis=1)
        over = angle >= 2 * np.pi
        if not over.any():
            return self
        theta = self.theta.copy()
        theta[over] *= (np.mod(angle[over], 2 * np.pi) / angle[over])[:, None]
        return GraphParams(theta, self.trans.copy())


# --------------------------------------------------------------- decimation


def _face_quadrics(mesh):
    v, f = mesh.vertices, mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area = 0.5 * np.linalg.norm(n, axis=1)
    n = n / (2 * area[:, None])
    plane = np.concatenate([n, -np.einsum("ij,ij->i", n, v[f[:, 0]])[:, None]], axis=1)
    K = area[:, None, None] * plane[:, :, None] * plane[:, None, :]
    Q = np.zeros((mesh.n_vertices, 4, 4))
    for c in range(3):
        np.add.at(Q, f[:, c], K)
    return Q


def quadric_decimate(mesh, target):
    """Greedy quadric-error edge contraction down to ``target`` vertices.

    Contractions are half-edge collapses (the survivor keeps its original
    position) so the result is a subset of mesh vertices; costs are the
    summed plane quadrics evaluated at the survivor plus a tiny squared
    edge-length term that spreads collapses evenly over flat regions.

    Returns
    -------
    kept : (target,) sorted int array of surviving vertex indices
    edges : (E, 2) int array of surviving edges, in terms of vertex indices
    """
    n = mesh.n_vertices
    V = mesh.vertices
    Vh = np.concatenate([V, np.ones((n, 1))], axis=1)
    Q = _face_quadrics(mesh)
    scale = 1e-6 / max(mesh.area / max(len(mesh.faces), 1), 1e-300)
    adj = [set(map(int, nb)) for nb in mesh.neighbors]
    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    heap = []

    def push(a, b):
        q = Q[a] + Q[b]
        length2 = float(np.sum((V[a] - V[b]) ** 2)) * scale
        ca = float(Vh[a] @ q @ Vh[a]) + length2  # keep a, drop b
        cb = float(Vh[b] @ q @ Vh[b]) + length2
        keep, drop, cost = (a, b, ca) if (ca, a) <= (cb, b) else (b, a, cb)
        heapq.heappush(heap, (cost, min(a, b), max(a, b), keep, drop, version[a], version[b]))

    for a in range(n):
        for b in adj[a]:
            if a < b:
                push(a, b)
    count = n
    while count > target and heap:
        cost, a, b, keep, drop, va, vb = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
            continue
        alive[drop] = False
        count -= 1
        Q[keep] += Q[drop]
        for w in adj[drop]:
            adj[w].discard(drop)
            if w != keep:
                adj[w].add(keep)
                adj[keep].add(w)
        adj[drop] = set()
        version[keep] += 1
        for w in adj[keep]:
            push(keep, w)
    kept = np.flatnonzero(alive)
    edges = np.array(sorted((a, b) for a in kept for b in adj[a] if a < b), dtype=np.int64).reshape(-1, 2)
    return kept, edges


def farthest_point_sampling(points, count, start=0):
    points = np.asarray(points)
    chosen = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(sorted(chosen), dtype=np.int64)


# -------------------------------------------------------------------- graph


@dataclass
class DeformationGraph:
    """Nodes, node adjacency and vertex skinning of an embedded deformation graph.

    Attributes
    ----------
    nodes : (H, 3) rest positions
    node_ids : (H,) mesh vertex index of each node
    edges : (E, 2) undirected node-index pairs
    skin_idx, skin_w : (N, K) node indices and weights per mesh vertex
    fallback : True when farthest-point sampling replaced decimation
    """

    nodes: np.ndarray
    node_ids: np.ndarray
    edges: np.ndarray
    skin_idx: np.ndarray
    skin_w: np.ndarray
    fallback: bool = False

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def directed_edges(self):
        """Both orientations of every edge: ``(h, l)`` for ``l`` in the 1-ring of ``h``."""
        e = self.edges
        return np.concatenate([e, e[:, ::-1]])

    def neighbors(self, h):
        d = self.directed_edges
        return np.sort(d[d[:, 0] == h, 1])

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(f"nodes {self.n_nodes}\n")
            for i, (vid, p) in enumerate(zip(self.node_ids, self.nodes)):
                fh.write(f"n {i} {vid} {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            fh.write(f"edges {len(self.edges)}\n")
            fh.writelines(f"e {a} {b}\n" for a, b in self.edges)
            fh.write(f"skin {len(self.skin_idx)} {self.skin_idx.shape[1]}\n")
            for v, (ii, ww) in enumerate(zip(self.skin_idx, self.skin_w)):
                fh.write(f"s {v} " + " ".join(f"{i}:{w:.9g}" for i, w in zip(ii, ww)) + "\n")


def _skin(mesh, node_ids, k):
    n, H = mesh.n_vertices, len(node_ids)
    k = min(k, H)
    n_seeds = min(k + 1, H)
    idx, dist = k_nearest_seeds(mesh.adjacency, node_ids, n_seeds)
    lost = ~np.isfinite(dist[:, n_seeds - 1])
    if lost.any():
        # vertices cut off from enough nodes fall back to Euclidean distance
        tree = cKDTree(mesh.vertices[node_ids])
        d_e, i_e = tree.query(mesh.vertices[lost], k=n_seeds)
        dist[lost], idx[lost] = np.reshape(d_e, (-1, n_seeds)), np.reshape(i_e, (-1, n_seeds))
    if n_seeds > k:
        d_max = dist[:, k]
    else:
        d_max = dist[:, -1] * (1 + 1e-6) + 1e-12
    w = np.maximum(0.0, 1.0 - dist[:, :k] / np.maximum(d_max, 1e-300)[:, None]) ** 2
    total = w.sum(axis=1)
    flat = total <= 0
    w[flat] = 1.0
    total[flat] = k
    return idx[:, :k], w / total[:, None]


def build_graph(mesh, target_nodes=None, k=SKIN_K):
    """Deformation graph with ``target_nodes`` nodes (default ``N // 2``).

    Requests below 4 nodes (or decimation that cannot reach the target)
    switch to farthest-point sampling with k-nearest node edges, and the
    result is flagged ``fallback=True``.
    """
    n = mesh.n_vertices
    if target_nodes is None:
        target_nodes = n // 2
    target_nodes = int(min(max(target_nodes, 1), n))
    if target_nodes == n:
        ids = np.arange(n)
        skin_idx = np.zeros((n, k), dtype=np.int64)
        skin_idx[:, 0] = ids
        skin_w = np.zeros((n, k))
        skin_w[:, 0] = 1.0
        return DeformationGraph(mesh.vertices.copy(), ids, mesh.edges.copy(), skin_idx, skin_w)

    fallback = target_nodes < 4
    if not fallback:
        ids, vedges = quadric_decimate(mesh, target_nodes)
        fallback = len(ids) != target_nodes
    if fallback:
        logger.warning("decimation to %d nodes not possible; using farthest-point sampling", target_nodes)
        ids = farthest_point_sampling(mesh.vertices, target_nodes)
        edges = _knn_edges(mesh.vertices[ids], min(3, len(ids) - 1))
    else:
        pos = np.full(n, -1)
        pos[ids] = np.arange(len(ids))
        edges = pos[vedges]
    skin_idx, skin_w = _skin(mesh, ids, k)
    return DeformationGraph(mesh.vertices[ids].copy(), ids, edges, skin_idx, skin_w, fallback)


def _knn_edges(points, k):
    if k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    _, nb = cKDTree(points).query(points, k=k + 1)
    pairs = {(min(a, b), max(a, b)) for a, row in enumerate(nb) for b in row[1:] if a != b}
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


# ------------------------------------------------------ deformation and ARAP


def _check(graph, params, vertices=None):
    if params.theta.shape != (graph.n_nodes, 3) or params.trans.shape != (graph.n_nodes, 3):
        raise DimensionMismatch(f"params for {params.theta.shape[0]} nodes, graph has {graph.n_nodes}")
    if vertices is not None and len(vertices) != len(graph.skin_idx):
        raise DimensionMismatch(f"{len(vertices)} vertices, graph skins {len(graph.skin_idx)}")


def apply(graph, params, vertices, R=None):
    """Deform rest ``vertices`` (N, 3) with the node transforms in ``params``."""
    _check(graph, params, vertices)
    if R is None:
        R = rodrigues(params.theta)
    idx, w = graph.skin_idx, graph.skin_w
    local = vertices[:, None, :] - graph.nodes[idx]
    moved = np.einsum("nkij,nkj->nki", R[idx], local) + graph.nodes[idx] + params.trans[idx]
    return np.einsum("nk,nki->ni", w, moved)


def _scatter(index, values, n):
    """Sum rows of ``values`` (m, ...) into ``n`` buckets given by ``index`` (m,)."""
    flat = values.reshape(len(values), -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(index, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + values.shape[1:])


def _rot_grad_to_theta(dR, J):
    return np.einsum("hab,hiab->hi", dR, J)


def apply_vjp(graph, params, vertices, grad_out, J=None):
    """Pull a gradient w.r.t. deformed vertices back to node parameters."""
    idx, w = graph.skin_idx, graph.skin_w
    H = graph.n_nodes
    flat_idx = idx.ravel()
    wg = (w[:, :, None] * grad_out[:, None, :]).reshape(-1, 3)
    local = (vertices[:, None, :] - graph.nodes[idx]).reshape(-1, 3)
    d_trans = _scatter(flat_idx, wg, H)
    dR = _scatter(flat_idx, wg[:, :, None] * local[:, None, :], H)
    if J is None:
        J = rodrigues_jacobian(params.theta)
    return GraphParams(_rot_grad_to_theta(dR, J), d_trans)


def arap_energy(graph, params, beta=DEFAULT_BETA, R=None, J=None):
    """As-rigid-as-possible energy of the node transforms and its gradient.

    ``E = sum_h sum_{l in N(h)} |d_hl|^2 + beta |R_h - R_l|_F^2`` with
    ``d_hl = R_h (g_l - g_h) + g_h + t_h - (g_l + t_l)``, summed over both
    orientations of every graph edge.

    Returns
    -------
    energy : float
    grad : GraphParams
    """
    _check(graph, params)
    if R is None:
        R = rodrigues(params.theta)
    if J is None:
        J = rodrigues_jacobian(params.theta)
    H = graph.n_nodes
    de = graph.directed_edges
    if len(de) == 0:
        return 0.0, GraphParams.identity(H)
    h, l = de[:, 0], de[:, 1]
    g, t = graph.nodes, params.trans
    rel = g[l] - g[h]
    d = np.einsum("eij,ej->ei", R[h], rel) - rel + t[h] - t[l]  # g_h - g_l = -rel
    dRdiff = R[h] - R[l]
    energy = float(np.sum(d * d) + beta * np.sum(dRdiff * dRdiff))

    d_trans = _scatter(h, 2 * d, H) - _scatter(l, 2 * d, H)
    dR = _scatter(h, 2 * d[:, :, None] * rel[:, None, :], H)
    dR += _scatter(h, 2 * beta * dRdiff, H) - _scatter(l, 2 * beta * dRdiff, H)
    return energy, GraphParams(_rot_grad_to_theta(dR, J), d_trans)
