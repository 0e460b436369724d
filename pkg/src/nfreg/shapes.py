"""Synthetic meshes and deformations for tests, demos and benchmarks."""

import numpy as np

from .geometry import Mesh, bbox_diagonal


def tetrahedron(edge=1.0):
    """Regular tetrahedron centred at the origin."""
    v = np.array([(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)], float)
    f = [(0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2)]
    return Mesh(v * edge / (2.0 * np.sqrt(2.0)), f)


def grid(nx=2, ny=2, size=(1.0, 1.0)):
    """Flat ``nx x ny`` vertex grid in the z=0 plane, normal +z."""
    x, y = np.meshgrid(np.linspace(0, size[0], nx), np.linspace(0, size[1], ny), indexing="xy")
    v = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            faces += [(a, a + 1, a + nx + 1), (a, a + nx + 1, a + nx)]
    return Mesh(v, faces)


def unit_square():
    return grid(2, 2)


def icosphere(level=2, radius=1.0):
    """Subdivided icosahedron projected onto a sphere."""
    p = (1.0 + 5.0**0.5) / 2.0
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
         (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, float) / np.linalg.norm(x) for x in v]
    faces = f
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(verts) * radius, faces)


def uv_sphere(n_lat, n_lon):
    """Latitude/longitude sphere with ``n_lat * n_lon + 2`` vertices."""
    theta = np.linspace(0, np.pi, n_lat + 2)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)
    v = np.vstack([[0, 0, 1.0], ring, [0, 0, -1.0]])
    south = len(v) - 1
    faces = []
    for j in range(n_lon):
        faces.append((0, 1 + j, 1 + (j + 1) % n_lon))
    for i in range(n_lat - 1):
        for j in range(n_lon):
            a = 1 + i * n_lon + j
            b = 1 + i * n_lon + (j + 1) % n_lon
            faces += [(a, a + n_lon, b), (b, a + n_lon, b + n_lon)]
    base = 1 + (n_lat - 1) * n_lon
    for j in range(n_lon):
        faces.append((south, base + (j + 1) % n_lon, base + j))
    return Mesh(v, faces)


def blob(n_lat=40, n_lon=50, seed=3):
    """Smooth, asymmetric closed surface (a lumpy ellipsoid).

    The default resolution has 2002 vertices. Lumps are placed at random
    but fixed directions so the shape has no intrinsic symmetry.
    """
    base = uv_sphere(n_lat, n_lon)
    u = base.vertices
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = np.array([0.25, 0.18, 0.15, 0.12, 0.1])
    r = 1.0 + (amps * np.exp(4.0 * (u @ dirs.T - 1.0))).sum(axis=1)
    v = u * r[:, None] * np.array([1.0, 0.6, 0.45])
    return Mesh(v, base.faces)


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def bend(vertices, fraction=0.05, axis=0, direction=1):
    """Smooth quadratic bend along one coordinate axis.

    The largest per-vertex displacement equals ``fraction`` times the
    bounding-box diagonal; vertices keep their order, so the identity is the
    ground-truth correspondence.
    """
    v = np.array(vertices, dtype=np.float64)
    x = v[:, axis] - v[:, axis].mean()
    disp = x**2
    disp = disp / disp.max() * fraction * bbox_diagonal(v)
    out = v.copy()
    out[:, direction] += disp - disp.mean()
    return out
