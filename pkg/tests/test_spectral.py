import math

import numpy as np
import pytest
import scipy.linalg

from nfreg import shapes, spectral
from nfreg.errors import KTooLarge, MissingProvenance
from nfreg.geometry import Mesh, PointCloud


def reference_laplacian(mesh):
    """Face-by-face cotangent assembly, written independently as an oracle."""
    n = mesh.n_vertices
    L = np.zeros((n, n))
    mass = np.zeros(n)
    V = mesh.vertices
    for tri in mesh.faces:
        area = 0.5 * np.linalg.norm(np.cross(V[tri[1]] - V[tri[0]], V[tri[2]] - V[tri[0]]))
        mass[tri] += area / 3
        for k in range(3):
            o, i, j = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            u, w = V[i] - V[o], V[j] - V[o]
            cot = u @ w / np.linalg.norm(np.cross(u, w))
            L[i, j] -= cot / 2
            L[j, i] -= cot / 2
            L[i, i] += cot / 2
            L[j, j] += cot / 2
    return L, mass


def test_laplacian_matches_reference(blob200):
    L, mass = spectral.cotan_laplacian(blob200)
    L_ref, m_ref = reference_laplacian(blob200)
    assert np.abs(L.toarray() - L_ref).max() < 1e-12
    assert np.allclose(mass, m_ref, rtol=1e-12)


def test_unit_square_rows_sum_to_zero():
    L, _ = spectral.cotan_laplacian(shapes.unit_square())
    assert np.abs(np.asarray(L.sum(axis=1))).max() < 1e-12


def test_equilateral_pair_weight():
    h = math.sqrt(3) / 2
    m = Mesh([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0]], [[0, 1, 2], [0, 3, 1]])
    L, _ = spectral.cotan_laplacian(m)
    assert L[0, 1] == pytest.approx(-1 / math.sqrt(3), abs=1e-12)


def test_constant_in_kernel_and_symmetric_psd(blob200):
    L, _ = spectral.cotan_laplacian(blob200)
    assert np.abs(L @ np.ones(blob200.n_vertices)).max() < 1e-12
    assert abs(L - L.T).max() < 1e-15
    assert np.linalg.eigvalsh(L.toarray()).min() > -1e-10


def test_eigenbasis_matches_dense_oracle(blob200):
    L_ref, m_ref = reference_laplacian(blob200)
    ref = scipy.linalg.eigh(L_ref, np.diag(m_ref), eigvals_only=True)[:20]
    for method in ("sparse", "dense"):
        b = spectral.eigenbasis(blob200, 20, method=method)
        assert np.allclose(b.evals[1:], ref[1:], rtol=1e-6)
        assert abs(b.evals[0]) < 1e-8


def test_basis_invariants(blob300):
    b = spectral.eigenbasis(blob300, 25, method="sparse")
    L, mass = spectral.cotan_laplacian(blob300)
    assert np.abs(b.evecs.T @ (mass[:, None] * b.evecs) - np.eye(25)).max() < 1e-6
    assert np.all(np.diff(b.evals) >= 0)
    assert abs(b.evals[0]) <= 1e-6 * b.evals[1]
    phi0 = b.evecs[:, 0]
    assert np.ptp(phi0) < 1e-6 * np.abs(phi0).max()
    res = L @ b.evecs - mass[:, None] * b.evecs * b.evals
    assert np.linalg.norm(res[:, 1:], axis=0).max() < 1e-6 * np.linalg.norm(L @ b.evecs[:, 1:], axis=0).min()
    dirichlet = np.einsum("ij,ij->j", b.evecs, L @ b.evecs)
    assert np.allclose(dirichlet[1:], b.evals[1:], rtol=1e-6)


def test_sign_convention(blob200):
    b = spectral.eigenbasis(blob200, 10)
    for col in b.evecs.T:
        nz = col[np.abs(col) > 1e-8 * np.abs(col).max()]
        assert nz[0] > 0


def test_k_too_large(blob200):
    with pytest.raises(KTooLarge):
        spectral.eigenbasis(blob200, blob200.n_vertices)


def test_rigid_motion_invariance(blob200):
    R = shapes.rotation_matrix([1, -2, 0.3], 1.1)
    moved = blob200.with_vertices(blob200.vertices @ R.T + [3, -1, 2])
    L0, m0 = spectral.cotan_laplacian(blob200)
    L1, m1 = spectral.cotan_laplacian(moved)
    assert abs(L0 - L1).max() < 1e-9 and np.abs(m0 - m1).max() < 1e-9
    e0 = spectral.eigenbasis(blob200, 12).evals
    e1 = spectral.eigenbasis(moved, 12).evals
    assert np.allclose(e0, e1, rtol=1e-9, atol=1e-9)


def test_uniform_scaling(blob200):
    s = 2.5
    e0 = spectral.eigenbasis(blob200, 12).evals
    e1 = spectral.eigenbasis(blob200.with_vertices(s * blob200.vertices), 12).evals
    assert np.allclose(e1[1:], e0[1:] / s**2, rtol=1e-6)


def test_repeated_eigenvalues_warn():
    with pytest.warns(RuntimeWarning, match="near-repeated"):
        spectral.eigenbasis(shapes.icosphere(2), 6)


def test_truncate_identity_and_single_row(blob200):
    b = spectral.eigenbasis(blob200, 10)
    full = spectral.truncate_basis(b, PointCloud(blob200.vertices, np.arange(blob200.n_vertices)))
    assert np.array_equal(full.evecs, b.evecs)
    one = spectral.truncate_basis(b, PointCloud(blob200.vertices[[3]], [3]))
    assert np.array_equal(one.evecs, b.evecs[[3]])
    assert one.n == 1 and one.k == 10 and np.array_equal(one.evals, b.evals)


def test_truncate_random_half_is_bit_identical(blob200, rng):
    b = spectral.eigenbasis(blob200, 10)
    sel = rng.choice(blob200.n_vertices, blob200.n_vertices // 2, replace=False)
    t = spectral.truncate_basis(b, PointCloud(blob200.vertices[sel], sel))
    for i, s in enumerate(sel):
        assert np.array_equal(t.evecs[i], b.evecs[s])


def test_truncate_needs_provenance(blob200):
    b = spectral.eigenbasis(blob200, 5)
    with pytest.raises(MissingProvenance):
        spectral.truncate_basis(b, PointCloud(blob200.vertices))
    with pytest.raises(MissingProvenance):
        spectral.truncate_basis(b, PointCloud(np.zeros((1, 3)), [blob200.n_vertices]))
