"""Per-point feature providers.

The learned point feature extractor is replaced by deterministic, training
free stand-ins (raw coordinates and a heat-kernel signature). Features from
any external extractor can be imported through the NFRM matrix format.
"""

import numpy as np

from . import _nfrm
from .errors import CountMismatch, NonFiniteEntry, ParseError
from .geometry import Mesh, as_points
from .spectral import SpectralBasis, TruncatedBasis, eigenbasis, truncate_basis

DEFAULT_SCALES = 16
DEFAULT_COORD_WEIGHT = 1.0


def coordinate_features(shape):
    """The (aligned) xyz coordinates themselves."""
    return np.array(as_points(shape), dtype=np.float64)


def heat_times(evals, n_scales=DEFAULT_SCALES):
    """Log-spaced diffusion times on ``[4 ln 10 / mu_max, 4 ln 10 / mu_1]``."""
    pos = evals[1:][evals[1:] > 0]
    if len(pos) == 0:
        return np.ones(n_scales)
    return np.geomspace(4 * np.log(10) / pos[-1], 4 * np.log(10) / pos[0], n_scales)


def spectral_descriptor(basis, n_scales=DEFAULT_SCALES, times=None):
    """Heat kernel signature, one column per diffusion time.

    ``hks(x, t) = sum_i exp(-mu_i t) phi_i(x)^2``; each column is scaled to
    unit mass-weighted norm. A truncated basis returns the matching rows of
    its parent's descriptor, so partial and full descriptors agree.
    """
    if isinstance(basis, TruncatedBasis):
        return spectral_descriptor(basis.parent, n_scales, times)[basis.selection]
    if times is None:
        times = heat_times(basis.evals, n_scales)
    times = np.asarray(times, dtype=np.float64)
    weights = np.exp(-np.outer(np.maximum(basis.evals, 0.0), times))
    hks = (basis.evecs**2) @ weights
    norms = np.sqrt(basis.mass @ hks**2)
    return hks / norms


def mesh_spectral_descriptor(mesh, k=30, n_scales=DEFAULT_SCALES):
    return spectral_descriptor(eigenbasis(mesh, k), n_scales)


def hybrid_features(hks, points, area, coord_weight=DEFAULT_COORD_WEIGHT):
    """Heat kernel signature stacked with scaled, pre-aligned coordinates.

    Both blocks are made dimensionless: HKS rows are rescaled to roughly
    unit norm (``sqrt(area / n_scales)``) and coordinates are divided by
    ``sqrt(area)``. ``coord_weight=0`` leaves the pure (rescaled) HKS.
    The coordinate block plays the role of the pose awareness that learned
    point features acquire from canonically oriented inputs.
    """
    hks = np.asarray(hks, dtype=np.float64)
    scale = np.sqrt(area)
    out = hks * (scale / np.sqrt(hks.shape[1]))
    if coord_weight:
        out = np.hstack([out, coord_weight * np.asarray(points, dtype=np.float64) / scale])
    return out


class SpectralFeatures:
    """Source-side provider recomputing the descriptor on deformed vertices."""

    def __init__(self, faces, k=30, n_scales=DEFAULT_SCALES, coord_weight=DEFAULT_COORD_WEIGHT):
        self.faces = np.asarray(faces)
        self.k = k
        self.n_scales = n_scales
        self.coord_weight = coord_weight

    def __call__(self, vertices):
        mesh = Mesh(vertices, self.faces, validate=False)
        hks = mesh_spectral_descriptor(mesh, self.k, self.n_scales)
        return hybrid_features(hks, vertices, mesh.area, self.coord_weight)


def target_spectral_features(mesh, cloud=None, k=30, n_scales=DEFAULT_SCALES, coord_weight=DEFAULT_COORD_WEIGHT):
    """Target-side features; a partial ``cloud`` with provenance takes the
    rows of the full mesh's (spatially truncated) spectral embedding."""
    basis = eigenbasis(mesh, k)
    points = mesh.vertices
    if cloud is not None:
        basis = truncate_basis(basis, cloud)
        points = as_points(cloud)
    hks = spectral_descriptor(basis, n_scales)
    return hybrid_features(hks, points, mesh.area, coord_weight)


def save_features(path, features):
    _nfrm.write_all(path, [features])


def load_features(path, expected_n=None):
    """Read a single-record NFRM feature matrix as float64."""
    records = _nfrm.read_all(path)
    if len(records) != 1:
        raise ParseError(f"{path}: expected one matrix record, found {len(records)}")
    F = records[0]
    if expected_n is not None and F.shape[0] != expected_n:
        raise CountMismatch(f"{path}: {F.shape[0]} rows, expected {expected_n}")
    if not np.all(np.isfinite(F)):
        raise NonFiniteEntry(f"{path}: non-finite feature values")
    return F.astype(np.float64)


def save_basis(path, basis: SpectralBasis):
    """Eigenvectors, then eigenvalues and mass as 1-row records."""
    _nfrm.write_all(path, [basis.evecs, basis.evals[None, :], basis.mass[None, :]])


def load_basis(path):
    records = _nfrm.read_all(path)
    if len(records) != 3:
        raise ParseError(f"{path}: expected 3 records (evecs, evals, mass), found {len(records)}")
    evecs, evals, mass = (r.astype(np.float64) for r in records)
    return SpectralBasis(evecs, evals.ravel(), mass.ravel())
