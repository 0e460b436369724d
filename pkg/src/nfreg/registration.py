"""Two-stage non-rigid registration of a source mesh onto a target point cloud.

Stage I matches points in a feature space, Stage II by raw coordinates of
the deforming source. Correspondences are refreshed every ``refresh``
iterations, filtered by a bijectivity test on precomputed source geodesics,
and the node parameters of an embedded deformation graph are optimized
between refreshes by Levenberg-Marquardt on the stacked residuals of all
energy terms. A step is accepted only if it lowers the total energy, so
the energy history is monotone within every refresh window.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, splu
from scipy.spatial import cKDTree

from . import defgraph
from .errors import NoCorrespondences, NonFiniteEnergy
from .features import SpectralFeatures, coordinate_features, target_spectral_features
from .geometry import Mesh, as_points, bbox_diagonal, geodesic_matrix, nearest_neighbors

logger = logging.getLogger(__name__)


@dataclass
class Weights:
    corr: float
    cd: float
    arap: float


@dataclass
class RegistrationConfig:
    """Every knob of :func:`register`; all have defaults.

    ``tau`` is a fraction of ``sqrt(source area)``. ``features`` is one of
    ``'coordinates'``, ``'spectral'`` or ``'external'`` and selects the
    Stage-I correspondence space.

    With ``normalize_arap`` the ARAP term is averaged over directed graph
    edges, so its weights are on a different scale from the point terms
    (means over points). The stiffness is annealed: whenever a refresh
    window lowers the energy by less than ``anneal_tol`` (relative), the
    effective ARAP weight is multiplied by ``arap_decay``, at most
    ``anneal_steps`` times over the whole run.
    """

    lambda_corr_1: float = 1.0
    lambda_cd_1: float = 0.1
    lambda_arap_1: float = 150.0
    lambda_corr_2: float = 1.0
    lambda_cd_2: float = 1.0
    lambda_arap_2: float = 30.0
    beta: float = defgraph.DEFAULT_BETA
    normalize_arap: bool = True
    refresh: int = 100
    tau: float = 0.05
    max_iter: int = 1500
    tol: float = 1e-5
    partial: bool = False
    anneal_steps: int = 3
    arap_decay: float = 0.1
    anneal_tol: float = 1e-2
    features: str = "coordinates"
    spectral_k: int = 30
    spectral_scales: int = 16
    feature_coord_weight: float = 1.0
    n_nodes: int | None = None
    damping: float = 1e-4
    step_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_corr_1", "lambda_cd_1", "lambda_arap_1", "lambda_corr_2", "lambda_cd_2", "lambda_arap_2", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.refresh < 1:
            raise ValueError("refresh must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.features not in ("coordinates", "spectral", "external"):
            raise ValueError(f"unknown feature provider {self.features!r}")

    def weights(self, stage):
        if stage == 1:
            return Weights(self.lambda_corr_1, self.lambda_cd_1, self.lambda_arap_1)
        return Weights(self.lambda_corr_2, self.lambda_cd_2, self.lambda_arap_2)

    def as_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Build from string or typed values (unknown keys raise ``KeyError``)."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for key, val in values.items():
            if key not in fields:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _coerce(fields[key].type, val)
        return cls(**kw)


def _coerce(type_name, val):
    if not isinstance(val, str):
        return val
    t = str(type_name)
    low = val.strip().lower()
    if t.startswith("bool"):
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if t.startswith("int"):
        return None if low in ("none", "") else int(val)
    if t.startswith("float"):
        return float(val)
    return val.strip()


# ------------------------------------------------------------------ energies


def corr_energy(V, T, pairs):
    """Mean squared distance over correspondence pairs ``(i_source, j_target)``.

    Returns ``(energy, dE/dV)``; an empty pair set contributes zero.
    """
    grad = np.zeros_like(V)
    if len(pairs) == 0:
        return 0.0, grad
    i, j = pairs[:, 0], pairs[:, 1]
    diff = V[i] - T[j]
    n = len(pairs)
    np.add.at(grad, i, 2.0 * diff / n)
    return float(np.sum(diff * diff) / n), grad


def chamfer_energy(V, T, partial=False, tree_T=None):
    """Mean-of-min squared Chamfer distance and its gradient w.r.t. ``V``.

    ``partial=True`` keeps only the target-to-source term, so source
    vertices with no target point nearby are not penalized. Nearest
    neighbours are treated as constants when differentiating.
    """
    grad = np.zeros_like(V)
    energy = 0.0
    if not partial:
        idx, _ = nearest_neighbors(T, V, tree_T)
        diff = V - T[idx]
        energy += float(np.sum(diff * diff) / len(V))
        grad += 2.0 * diff / len(V)
    idx, _ = nearest_neighbors(V, T)
    diff = V[idx] - T
    energy += float(np.sum(diff * diff) / len(T))
    np.add.at(grad, idx, 2.0 * diff / len(T))
    return energy, grad


def bijectivity_filter(p2p_ST, p2p_TS, geo, tau, area):
    """Keep source vertex ``i`` iff its round trip S -> T -> S lands close to it.

    ``p2p_ST[i]`` is a target index, ``p2p_TS[j]`` a source index; ``geo``
    holds rest-pose source geodesics. The threshold is ``tau * sqrt(area)``.

    Returns
    -------
    pairs : (P, 2) int array of kept ``(i_source, j_target)``
    """
    p2p_ST = np.asarray(p2p_ST)
    back = np.asarray(p2p_TS)[p2p_ST]
    src = np.arange(len(p2p_ST))
    keep = geo[src, back] <= tau * math.sqrt(area)
    return np.stack([src[keep], p2p_ST[keep]], axis=1)


def total_energy(params, graph, rest, T, pairs, weights, beta=defgraph.DEFAULT_BETA, partial=False,
                 tree_T=None, arap_scale=1.0):
    """Weighted sum of the correspondence, Chamfer and ARAP energies.

    ``arap_scale`` multiplies the ARAP term before weighting (the registration
    loop uses ``1 / #directed graph edges``).

    Returns
    -------
    energy : float
    grad : defgraph.GraphParams
    parts : dict of the unweighted terms (ARAP after ``arap_scale``)
    """
    R = defgraph.rodrigues(params.theta)
    J = defgraph.rodrigues_jacobian(params.theta)
    V = defgraph.apply(graph, params, rest, R=R)
    gV = np.zeros_like(V)
    parts = {"corr": 0.0, "cd": 0.0, "arap": 0.0}
    if weights.corr:
        e, g = corr_energy(V, T, pairs)
        parts["corr"] = e
        gV += weights.corr * g
    if weights.cd:
        e, g = chamfer_energy(V, T, partial, tree_T)
        parts["cd"] = e
        gV += weights.cd * g
    grad = defgraph.apply_vjp(graph, params, rest, gV, J=J)
    if weights.arap:
        e, g = defgraph.arap_energy(graph, params, beta, R=R, J=J)
        parts["arap"] = e * arap_scale
        grad.theta += weights.arap * arap_scale * g.theta
        grad.trans += weights.arap * arap_scale * g.trans
    energy = weights.corr * parts["corr"] + weights.cd * parts["cd"] + weights.arap * parts["arap"]
    return energy, grad, parts


# ----------------------------------------------------------------- optimizer


def _vertex_terms(V, T, pairs, weights, partial, tree_T):
    """Vertex residual items ``c * (V[i] - u)`` whose squared sum is the
    weighted correspondence plus Chamfer energy (neighbours held fixed)."""
    vi, u, c = [], [], []
    if weights.corr and len(pairs):
        vi.append(pairs[:, 0])
        u.append(T[pairs[:, 1]])
        c.append(np.full(len(pairs), math.sqrt(weights.corr / len(pairs))))
    if weights.cd:
        if not partial:
            idx, _ = nearest_neighbors(T, V, tree_T)
            vi.append(np.arange(len(V)))
            u.append(T[idx])
            c.append(np.full(len(V), math.sqrt(weights.cd / len(V))))
        idx, _ = nearest_neighbors(V, T)
        vi.append(idx)
        u.append(T)
        c.append(np.full(len(T), math.sqrt(weights.cd / len(T))))
    if not vi:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(vi), np.concatenate(u), np.concatenate(c)


def residuals(params, graph, rest, T, pairs, weights, beta=defgraph.DEFAULT_BETA, partial=False, tree_T=None,
              arap_scale=1.0, jacobian=True):
    """Stacked residual vector ``r`` with ``r @ r`` equal to :func:`total_energy`.

    Returns ``(r, J)`` where ``J`` is the sparse Jacobian with respect to
    ``params.to_vector()`` (``None`` when ``jacobian=False``). Nearest
    neighbours in the Chamfer term are fixed at the current deformation.
    """
    H = graph.n_nodes
    R = defgraph.rodrigues(params.theta)
    V = defgraph.apply(graph, params, rest, R=R)
    vi, u, c = _vertex_terms(V, T, pairs, weights, partial, tree_T)
    parts = [(c[:, None] * (V[vi] - u)).ravel()]
    de = graph.directed_edges if weights.arap else np.zeros((0, 2), dtype=np.int64)
    h, l = de[:, 0], de[:, 1]
    g, t = graph.nodes, params.trans
    rel = g[l] - g[h]
    ca = math.sqrt(weights.arap * arap_scale)
    cb = math.sqrt(weights.arap * arap_scale * beta)
    d = np.einsum("eij,ej->ei", R[h], rel) - rel + t[h] - t[l]  # g_h - g_l = -rel
    parts += [ca * d.ravel(), cb * (R[h] - R[l]).ravel()]
    r = np.concatenate(parts)
    if not jacobian:
        return r, None

    Jr = defgraph.rodrigues_jacobian(params.theta)
    a3 = np.arange(3)
    rows, cols, vals = [], [], []
    # vertex rows: d v_a / d theta_{h,b} = w (dR_h/dtheta_b (v - g_h))_a, d v_a / d t_{h,a} = w
    idx, w = graph.skin_idx[vi], graph.skin_w[vi]
    local = rest[vi][:, None, :] - g[idx]
    A = np.einsum("nkbac,nkc->nkba", Jr[idx], local) * (w * c[:, None])[:, :, None, None]
    r_id = np.arange(len(vi))[:, None, None, None]
    rows.append(np.broadcast_to(3 * r_id + a3, A.shape).ravel())
    cols.append(np.broadcast_to(3 * idx[:, :, None, None] + a3[:, None], A.shape).ravel())
    vals.append(A.ravel())
    shp = (len(vi), idx.shape[1], 3)
    rows.append(np.broadcast_to(3 * r_id[..., 0] + a3, shp).ravel())
    cols.append(np.broadcast_to(3 * H + 3 * idx[:, :, None] + a3, shp).ravel())
    vals.append(np.broadcast_to((w * c[:, None])[:, :, None], shp).ravel())
    # ARAP offset rows
    off = 3 * len(vi)
    e_id = np.arange(len(de))
    Ad = ca * np.einsum("ebac,ec->eba", Jr[h], rel)
    rows.append(np.broadcast_to(off + 3 * e_id[:, None, None] + a3, Ad.shape).ravel())
    cols.append(np.broadcast_to(3 * h[:, None, None] + a3[:, None], Ad.shape).ravel())
    vals.append(Ad.ravel())
    for node, sign in ((h, ca), (l, -ca)):
        rows.append((off + 3 * e_id[:, None] + a3).ravel())
        cols.append((3 * H + 3 * node[:, None] + a3).ravel())
        vals.append(np.full(3 * len(de), sign))
    # ARAP rotation-smoothness rows
    off += 3 * len(de)
    a9 = np.arange(9)
    for node, sign in ((h, cb), (l, -cb)):
        B = sign * Jr[node].reshape(len(de), 3, 9)
        rows.append(np.broadcast_to(off + 9 * e_id[:, None, None] + a9, B.shape).ravel())
        cols.append(np.broadcast_to(3 * node[:, None, None] + a3[:, None], B.shape).ravel())
        vals.append(B.ravel())
    J = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(r), 6 * H)
    )
    return r, J


def _damped_solve(A, damp, b, cache, cg_iter=30, rtol=1e-6):
    """Solve ``(A + diag(damp)) x = b``.

    The last sparse LU factorization (kept in ``cache``) preconditions a
    conjugate-gradient solve; consecutive LM systems differ little, so a
    fresh factorization is only needed when CG does not converge quickly.
    """
    M = (A + sparse.diags(damp, format="csc")).tocsc()
    lu = cache.get("lu")
    if lu is not None:
        pre = LinearOperator(M.shape, matvec=lu.solve, dtype=np.float64)
        x, info = cg(M, b, x0=lu.solve(b), rtol=rtol, maxiter=cg_iter, M=pre)
        if info == 0 and np.all(np.isfinite(x)):
            return x
    try:
        lu = splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError:
        cache.pop("lu", None)
        return None
    cache["lu"] = lu
    return lu.solve(b)


def lm_window(fun, x, n_iter, damping=1e-4, rel_stop=1e-4, max_damping=1e12, callback=None):
    """Levenberg-Marquardt iterations on a sum of squares.

    ``fun(x, jacobian) -> (r, J)``. Each step solves
    ``(J^T J + mu diag(J^T J)) dx = -J^T r`` and is accepted only when the
    true energy ``r @ r`` (re-evaluated at ``x + dx``) decreases; rejected
    steps raise ``mu``, i.e. shrink the step. The window ends after
    ``n_iter`` accepted steps, when the relative decrease of an accepted
    step drops below ``rel_stop``, or when no step is accepted.

    Returns
    -------
    x, f, iterations_done, stalled
    """
    r, J = fun(x, True)
    f = float(r @ r)
    if not np.isfinite(f):
        raise NonFiniteEnergy(f"energy is {f}")
    mu, nu = damping, 2.0
    done = 0
    cache = {}
    while done < n_iter:
        A = (J.T @ J).tocsc()
        g = J.T @ r
        diag = A.diagonal()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        while True:
            dx = _damped_solve(A, mu * diag, -g, cache)
            if dx is not None and np.all(np.isfinite(dx)):
                r_new, _ = fun(x + dx, False)
                f_new = float(r_new @ r_new)
                if np.isfinite(f_new) and f_new < f:
                    predicted = -(2.0 * dx @ g + dx @ (A @ dx))
                    rho = (f - f_new) / predicted if predicted > 0 else 0.0
                    mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                    nu = 2.0
                    break
            mu *= nu
            nu *= 2.0
            if mu > max_damping:
                return x, f, done, True
        x = x + dx
        rel = (f - f_new) / max(f, 1e-300)
        done += 1
        r, J = fun(x, True)
        f = float(r @ r)
        if callback is not None:
            callback(x, f)
        if rel < rel_stop:
            return x, f, done, True
    return x, f, done, False


# ------------------------------------------------------------- registration


@dataclass
class RegistrationState:
    iteration: int = 0
    stage: int = 1
    level: int = 0
    params: defgraph.GraphParams | None = None
    vertices: np.ndarray | None = None
    pairs: np.ndarray | None = None
    history: list = field(default_factory=list)


@dataclass
class RegistrationResult:
    vertices: np.ndarray
    p2p_ST: np.ndarray
    p2p_TS: np.ndarray
    params: defgraph.GraphParams
    graph: defgraph.DeformationGraph
    state: RegistrationState
    config: RegistrationConfig

    @property
    def history(self):
        return self.state.history

    def log_lines(self):
        head = "iteration stage E_total E_corr E_cd E_arap kept"
        rows = [
            f"{r['iteration']} {r['stage']} {r['total']:.10e} {r['corr']:.10e} {r['cd']:.10e} {r['arap']:.10e} {r['kept']}"
            for r in self.state.history
        ]
        return [head] + rows


def _feature_providers(source, target, config, source_features, target_features, target_mesh):
    """Stage-I feature callables for the deforming source and the fixed target."""
    if config.features == "coordinates":
        return coordinate_features, coordinate_features(target)
    if config.features == "spectral":
        src = source_features
        if src is None:
            src = SpectralFeatures(source.faces, config.spectral_k, config.spectral_scales, config.feature_coord_weight)
        if target_features is None:
            cloud = None
            if target_mesh is None:
                if not isinstance(target, Mesh):
                    raise ValueError("spectral features need target_features, target_mesh or a target Mesh")
                target_mesh = target
            elif not isinstance(target, Mesh):
                cloud = target
            target_features = target_spectral_features(target_mesh, cloud, config.spectral_k, config.spectral_scales,
                                                       config.feature_coord_weight)
        return src, np.asarray(target_features)
    if source_features is None or target_features is None:
        raise ValueError("external features need both source_features and target_features")
    fixed = np.asarray(source_features) if not callable(source_features) else None
    src = source_features if fixed is None else (lambda V: fixed)
    return src, np.asarray(target_features)


def register(source, target, config=None, source_features=None, target_features=None, geodesics=None,
             graph=None, callback=None, target_mesh=None):
    """Deform ``source`` (a Mesh) onto ``target`` (points, PointCloud or Mesh).

    Both shapes must already be rigidly pre-aligned.

    Parameters
    ----------
    source_features, target_features
        Stage-I features. ``source_features`` may be a callable on the
        deformed vertices; missing ones are derived from ``config.features``.
    geodesics : (N, N) array, optional
        Precomputed rest-pose source geodesics.
    graph : DeformationGraph, optional
    callback : callable(state), optional
        Called after every accepted iteration.
    target_mesh : Mesh, optional
        Full mesh the target cloud was sampled from (its ``provenance``
        indexes this mesh); lets spectral features use the truncated
        embedding of a partial target.

    Returns
    -------
    RegistrationResult
        Final vertices, nearest-neighbour maps in both directions computed on
        the deformed coordinates, parameters, graph and the iteration log.
    """
    config = config or RegistrationConfig()
    T = as_points(target)
    rest = source.vertices
    if geodesics is None:
        geodesics = geodesic_matrix(source)
    if graph is None:
        graph = defgraph.build_graph(source, config.n_nodes)
    feat_S, feat_T = _feature_providers(source, target, config, source_features, target_features, target_mesh)
    tree_T = cKDTree(T)
    tree_fT = cKDTree(feat_T)
    area = source.area
    arap_scale = 1.0 / max(len(graph.directed_edges), 1) if config.normalize_arap else 1.0
    scale = bbox_diagonal(np.vstack([rest, T]))

    state = RegistrationState(params=defgraph.GraphParams.identity(graph.n_nodes), vertices=rest.copy())
    x = state.params.to_vector()
    stage_iter = 0
    while True:
        V = defgraph.apply(graph, state.params, rest)
        state.vertices = V
        if state.stage == 1:
            fS = np.asarray(feat_S(V))
            p2p_ST = nearest_neighbors(feat_T, fS, tree_fT)[0]
            p2p_TS = nearest_neighbors(fS, feat_T)[0]
        else:
            p2p_ST = nearest_neighbors(T, V, tree_T)[0]
            p2p_TS = nearest_neighbors(V, T)[0]
        pairs = bijectivity_filter(p2p_ST, p2p_TS, geodesics, config.tau, area)
        if config.partial:
            # only source vertices some target point lands on are covered by both maps
            pairs = pairs[np.isin(pairs[:, 0], p2p_TS)]
        if len(pairs) == 0:
            raise NoCorrespondences(
                f"bijectivity filter rejected every pair at iteration {state.iteration} (stage {state.stage})"
            )
        state.pairs = pairs
        weights = config.weights(state.stage)
        weights.arap *= config.arap_decay**state.level

        def fun(vec, jac):
            p = defgraph.GraphParams.from_vector(vec)
            return residuals(p, graph, rest, T, pairs, weights, config.beta, config.partial, tree_T,
                             arap_scale, jacobian=jac)

        def record(vec, f):
            if not np.isfinite(f):
                raise NonFiniteEnergy(f"energy became {f} at iteration {state.iteration}")
            state.iteration += 1
            p = defgraph.GraphParams.from_vector(vec)
            _, _, parts = total_energy(p, graph, rest, T, pairs, weights, config.beta, config.partial, tree_T,
                                       arap_scale)
            state.history.append({"iteration": state.iteration, "stage": state.stage, "total": f,
                                  **parts, "kept": len(pairs), "lambda_arap": weights.arap})
            if callback is not None:
                state.params = p
                callback(state)

        r0, _ = fun(x, False)
        f_start = float(r0 @ r0)
        if not np.isfinite(f_start):
            raise NonFiniteEnergy(f"energy is {f_start} at iteration {state.iteration}")
        n_iter = min(config.refresh, config.max_iter - stage_iter)
        x, f_end, done, stalled = lm_window(fun, x, n_iter, config.damping, rel_stop=config.step_tol,
                                            callback=record)
        params = defgraph.GraphParams.from_vector(x)
        wrapped = params.wrapped()
        if wrapped is not params:
            x = wrapped.to_vector()
        state.params = wrapped
        stage_iter += done
        if stalled:
            # keep the k % refresh == 0 schedule
            skipped = n_iter - done
            state.iteration += skipped
            stage_iter += skipped
        rel = (f_start - f_end) / max(abs(f_start), 1e-300)
        logger.info("stage %d iter %d: E %.6e -> %.6e (%d pairs, lambda_arap %.3g)", state.stage, state.iteration,
                    f_start, f_end, len(pairs), weights.arap)
        exact = f_end < 1e-24 * scale**2
        settled = rel < config.tol
        if not exact and state.level < config.anneal_steps and stage_iter < config.max_iter:
            if rel < config.anneal_tol:
                # relax the stiffness and keep going in the same stage
                state.level += 1
            continue
        if exact or settled or stage_iter >= config.max_iter:
            if state.stage == 1:
                # the stiffness level carries over: Stage II never stiffens
                # back beyond what Stage I already relaxed to
                state.stage = 2
                stage_iter = 0
            else:
                break

    V = defgraph.apply(graph, state.params, rest)
    state.vertices = V
    p2p_ST = nearest_neighbors(T, V, tree_T)[0]
    p2p_TS = nearest_neighbors(V, T)[0]
    return RegistrationResult(V, p2p_ST, p2p_TS, state.params, graph, state, config)
