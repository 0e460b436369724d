"""Cotangent Laplacian, lumped mass and truncated Laplace-Beltrami eigenbases."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from .errors import ConvergenceFailure, DegenerateGeometry, KTooLarge, MissingProvenance
from .geometry import AREA_EPS

logger = logging.getLogger(__name__)

COT_CLAMP = 1e6
DENSE_MAX_N = 500
DEFAULT_K = 30


def cotan_laplacian(mesh):
    """Stiffness matrix of linear FEM on the mesh, plus lumped vertex areas.

    Returns
    -------
    L : (N, N) csr_matrix
        Symmetric positive semi-definite; off-diagonal entry for edge (i, j)
        is ``-(cot a + cot b) / 2`` over the two opposite angles.
    mass : (N,) array
        Barycentric vertex areas.
    """
    v, f = mesh.vertices, mesh.faces
    n = len(v)
    rows, cols, vals = [], [], []
    dbl_area = 2.0 * mesh.face_areas
    if (dbl_area <= 2 * AREA_EPS).any():
        raise DegenerateGeometry("cannot build a Laplacian on zero-area faces")
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        u, w = v[i] - v[o], v[j] - v[o]
        # cot of the angle at o = <u, w> / |u x w|
        cot = np.einsum("ij,ij->i", u, w) / dbl_area
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        rows += [i, j]
        cols += [j, i]
        vals += [-0.5 * cot, -0.5 * cot]
    W = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    L = W - sparse.diags(np.asarray(W.sum(axis=1)).ravel())
    return L.tocsr(), np.array(mesh.vertex_areas)


@dataclass(frozen=True)
class SpectralBasis:
    """First ``k`` eigenpairs of ``L phi = mu M phi`` with ``M = diag(mass)``.

    Attributes
    ----------
    evecs : (N, k) array, mass-orthonormal
    evals : (k,) array, ascending
    mass : (N,) array
    """

    evecs: np.ndarray
    evals: np.ndarray
    mass: np.ndarray

    @property
    def k(self):
        return self.evecs.shape[1]

    @property
    def n(self):
        return self.evecs.shape[0]

    def truncate(self, k):
        return SpectralBasis(self.evecs[:, :k], self.evals[:k], self.mass)


@dataclass(frozen=True)
class TruncatedBasis:
    """Rows of a full basis picked out by an index list; nothing is recomputed."""

    parent: SpectralBasis
    selection: np.ndarray

    @property
    def evecs(self):
        return self.parent.evecs[self.selection]

    @property
    def evals(self):
        return self.parent.evals

    @property
    def k(self):
        return self.parent.k

    @property
    def n(self):
        return len(self.selection)


def _fix_signs(evecs, rel=1e-8):
    for c in range(evecs.shape[1]):
        col = evecs[:, c]
        nz = np.flatnonzero(np.abs(col) > rel * np.abs(col).max())
        if len(nz) and col[nz[0]] < 0:
            evecs[:, c] = -col
    return evecs


def eigenbasis(mesh, k=DEFAULT_K, method="auto", sigma=-1e-8):
    """Smallest ``k`` eigenpairs of the cotangent Laplacian.

    Parameters
    ----------
    mesh : Mesh
    k : int
        Basis size, must be smaller than the vertex count.
    method : {'auto', 'sparse', 'dense'}
        'sparse' runs shift-invert Lanczos around ``sigma``; 'dense' solves
        the full generalized problem. 'auto' picks dense for small meshes and
        also falls back to it if the sparse solve fails to converge.

    Returns
    -------
    SpectralBasis
        Columns made mass-orthonormal, eigenvalues ascending, the sign of
        each column chosen so its first nonzero entry is positive.
    """
    n = mesh.n_vertices
    if k >= n:
        raise KTooLarge(f"k={k} must be smaller than the vertex count {n}")
    L, mass = cotan_laplacian(mesh)
    if method == "auto":
        method = "dense" if n <= DENSE_MAX_N else "sparse"
    if method == "sparse" and k >= n - 1:
        method = "dense"
    if method == "sparse":
        M = sparse.diags(mass).tocsc()
        try:
            evals, evecs = eigsh(L.tocsc(), k=k, M=M, sigma=sigma, which="LM")
        except (ArpackNoConvergence, ArpackError) as err:
            if n > 4 * DENSE_MAX_N:
                raise ConvergenceFailure(str(err)) from err
            logger.warning("sparse eigensolver failed (%s); using dense solver", err)
            method = "dense"
    if method == "dense":
        evals, evecs = scipy.linalg.eigh(L.toarray(), np.diag(mass), subset_by_index=[0, k - 1])
    elif method != "sparse":
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(evals)
    evals, evecs = evals[order], evecs[:, order]
    evecs = evecs / np.sqrt(np.einsum("ij,i,ij->j", evecs, mass, evecs))
    evecs = _fix_signs(evecs)
    _warn_repeated(evals)
    return SpectralBasis(evecs, evals, mass)


def _warn_repeated(evals, rel=1e-6):
    if len(evals) < 2:
        return
    gaps = np.diff(evals)
    close = np.flatnonzero(gaps < rel * abs(evals[-1]))
    if len(close):
        warnings.warn(
            f"near-repeated eigenvalues at indices {close.tolist()}; "
            "eigenvector signs and ordering may be unstable",
            RuntimeWarning,
            stacklevel=3,
        )


def truncate_basis(basis, cloud):
    """Spatially truncated embedding: the parent rows at the cloud's provenance."""
    prov = getattr(cloud, "provenance", None)
    if prov is None:
        raise MissingProvenance("point cloud carries no provenance indices")
    prov = np.asarray(prov)
    if prov.max() >= basis.n:
        raise MissingProvenance(f"provenance index {prov.max()} outside a basis of {basis.n} rows")
    return TruncatedBasis(basis, prov)
