"""Command line front end: ``nfreg <command> ...``.

Commands: embed, register, match, partial-sample, eval, prop1-check.
Exit codes: 0 success, 1 other failure, 2 bad input, 3 no correspondences
survived filtering, 4 non-finite energy. Every command writes a JSON
manifest next to its outputs; outputs of a failed run are removed.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import evaluation, features, fmaps, geometry, registration, spectral
from .errors import NFRError, NoCorrespondences, NonFiniteEnergy

logger = logging.getLogger("nfreg")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NOCORR, EXIT_NONFINITE = 0, 1, 2, 3, 4


class InputError(Exception):
    pass


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_config(path):
    """``key = value`` lines; ``#`` starts a comment, ``[section]`` headers are ignored."""
    values = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line or (line.startswith("[") and line.endswith("]")):
                continue
            if "=" not in line:
                raise InputError(f"{path}:{n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val.strip("\"'")
    return values


def parse_sets(pairs):
    values = {}
    for item in pairs or ():
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def build_config(args):
    values = read_config(args.config) if getattr(args, "config", None) else {}
    values.update(parse_sets(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    try:
        return registration.RegistrationConfig.from_dict(values)
    except (KeyError, ValueError, TypeError) as err:
        raise InputError(f"bad configuration: {err}") from err


class Outputs:
    """Tracks written files so a failed command leaves nothing behind."""

    def __init__(self, directory):
        self.dir = directory
        self.paths = []
        self.created_dir = False

    def path(self, name):
        if not os.path.isdir(self.dir):
            os.makedirs(self.dir)
            self.created_dir = True
        p = os.path.join(self.dir, name)
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            with contextlib.suppress(OSError):
                os.remove(p)
            with contextlib.suppress(OSError):
                os.remove(geometry.provenance_path(p))
        if self.created_dir:
            with contextlib.suppress(OSError):
                os.rmdir(self.dir)


def write_manifest(out, command, inputs, seed, config=None, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config if config is not None else {},
        "inputs": {os.path.basename(p): sha256(p) for p in inputs},
    }
    if extra:
        manifest.update(extra)
    with open(out.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _check_inputs(paths):
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise InputError(f"no such file: {p}")


def _load_target(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".off":
        return geometry.load_mesh(path)
    return geometry.load_cloud(path)


def _load_rotation(path):
    if path is None:
        return None
    return geometry.check_rotation(np.loadtxt(path).reshape(3, 3))


# ------------------------------------------------------------------ commands


def cmd_embed(args):
    _check_inputs([args.mesh])
    mesh = geometry.load_mesh(args.mesh)
    basis = spectral.eigenbasis(mesh, args.k)
    out = Outputs(args.out)
    try:
        features.save_basis(out.path(args.name), basis)
        write_manifest(out, "embed", [args.mesh], args.seed, {"k": args.k})
    except BaseException:
        out.cleanup()
        raise
    print(f"k={basis.k}")
    print(f"n={basis.n}")
    print("evals=" + ",".join(f"{v:.10g}" for v in basis.evals))
    return EXIT_OK


def _register_one(source, target_path, config, rotation, source_features, target_features):
    """Pre-align, register, and return results in the target's original frame."""
    target = _load_target(target_path)
    src = geometry.center_and_orient(source)
    tgt = geometry.center_and_orient(target, rotation)
    feat_T = None
    if target_features is not None:
        feat_T = features.load_features(target_features, len(tgt.points))
    feat_S = None
    if source_features is not None:
        feat_S = features.load_features(source_features, source.n_vertices)
    if feat_S is not None and feat_T is not None:
        config = dataclasses.replace(config, features="external")
    res = registration.register(src, tgt, config, source_features=feat_S, target_features=feat_T)
    R = np.eye(3) if rotation is None else rotation
    vertices = res.vertices @ R.T + target.centroid
    return res, source.with_vertices(vertices), target


def _mesh_name(args, default="deformed.off"):
    return default if args.mesh_format == "off" else default.replace(".off", ".ply")


def cmd_register(args):
    _check_inputs([args.source, args.target, args.config, args.rotation, args.gt] + list(args.features or []))
    config = build_config(args)
    source = geometry.load_mesh(args.source)
    rotation = _load_rotation(args.rotation)
    f_src, f_tgt = args.features if args.features else (None, None)
    res, deformed, target = _register_one(source, args.target, config, rotation, f_src, f_tgt)
    chamfer = evaluation.chamfer_metric(deformed, target)
    diag = geometry.bbox_diagonal(source.vertices)
    out = Outputs(args.out)
    try:
        geometry.save_mesh(out.path(_mesh_name(args)), deformed)
        geometry.save_indices(out.path("p2p_ST.txt"), res.p2p_ST)
        geometry.save_indices(out.path("p2p_TS.txt"), res.p2p_TS)
        summary = [f"final_chamfer={chamfer:.10g}", f"final_chamfer_over_diag={chamfer / diag:.10g}",
                   f"iterations={res.state.iteration}"]
        if args.gt:
            gt = geometry.load_indices(args.gt)
            geo = geometry.geodesic_matrix(source)
            report = evaluation.geodesic_error(res.p2p_TS, gt, geo, source.area)
            summary.append(f"geodesic_error={report.mean * 100:.10g}")
        with open(out.path("run.log"), "w") as fh:
            fh.write("".join(f"# {k}={v}\n" for k, v in res.config.as_dict().items()))
            fh.write("\n".join(res.log_lines()) + "\n")
            fh.write("".join(f"# {s}\n" for s in summary))
        inputs = [p for p in [args.source, args.target, args.config, args.rotation, args.gt] if p]
        write_manifest(out, "register", inputs + list(args.features or []), config.seed, res.config.as_dict())
    except BaseException:
        out.cleanup()
        raise
    for line in summary:
        print(line)
    return EXIT_OK


def cmd_match(args):
    _check_inputs([args.cloud_a, args.cloud_b, args.template, args.config])
    config = build_config(args)
    template = geometry.load_mesh(args.template)
    res_a, _, _ = _register_one(template, args.cloud_a, config, None, None, None)
    res_b, _, _ = _register_one(template, args.cloud_b, config, None, None, None)
    # A -> template -> B
    map_ab = res_b.p2p_ST[res_a.p2p_TS]
    out = Outputs(args.out)
    try:
        geometry.save_indices(out.path("map_AB.txt"), map_ab)
        geometry.save_indices(out.path("p2p_TS_A.txt"), res_a.p2p_TS)
        geometry.save_indices(out.path("p2p_ST_B.txt"), res_b.p2p_ST)
        write_manifest(out, "match", [p for p in [args.cloud_a, args.cloud_b, args.template, args.config] if p],
                       config.seed, config.as_dict())
    except BaseException:
        out.cleanup()
        raise
    print(f"n_A={len(map_ab)}")
    print(f"identity_fraction={np.mean(map_ab == np.arange(len(map_ab))):.10g}")
    return EXIT_OK


def cmd_partial_sample(args):
    _check_inputs([args.mesh])
    mesh = geometry.load_mesh(args.mesh)
    views = geometry.sample_partial_views(mesh, args.views, args.points, resolution=args.resolution, seed=args.seed)
    out = Outputs(args.out)
    try:
        for k, view in enumerate(views):
            geometry.save_cloud(out.path(f"view_{k:02d}.xyz"), view)
            out.paths.append(geometry.provenance_path(out.paths[-1]))
        write_manifest(out, "partial-sample", [args.mesh], args.seed,
                       {"views": args.views, "points": args.points, "resolution": args.resolution})
    except BaseException:
        out.cleanup()
        raise
    for k, view in enumerate(views):
        print(f"view_{k:02d}={len(view)}")
    return EXIT_OK


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()] if text else []


def cmd_eval(args):
    _check_inputs([args.source, args.pred, args.gt, args.pred_points, args.gt_points, args.chamfer_a, args.chamfer_b])
    lines = []
    report = None
    if args.pred or args.gt:
        if not (args.pred and args.gt and args.source):
            raise InputError("geodesic error needs --source, --pred and --gt")
        mesh = geometry.load_mesh(args.source)
        report = evaluation.geodesic_error(geometry.load_indices(args.pred), geometry.load_indices(args.gt),
                                           geometry.geodesic_matrix(mesh), mesh.area)
        lines += evaluation.report_lines(report, scale=100.0)
    if args.pred_points or args.gt_points:
        if not (args.pred_points and args.gt_points):
            raise InputError("recall needs both --pred-points and --gt-points")
        ae, rec = evaluation.euclidean_recall(geometry.load_cloud(args.pred_points).points,
                                              geometry.load_cloud(args.gt_points).points,
                                              _float_list(args.thresholds))
        lines += evaluation.report_lines(ae=ae, recalls=rec)
    if args.chamfer_a or args.chamfer_b:
        if not (args.chamfer_a and args.chamfer_b):
            raise InputError("chamfer needs --chamfer-a and --chamfer-b")
        c = evaluation.chamfer_metric(_load_target(args.chamfer_a), _load_target(args.chamfer_b))
        lines += evaluation.report_lines(chamfer=c)
    if not lines:
        raise InputError("nothing to evaluate")
    if args.curve:
        if report is None:
            raise InputError("--curve needs a geodesic error evaluation")
        try:
            evaluation.write_curve_csv(args.curve, report)
        except BaseException:
            with contextlib.suppress(OSError):
                os.remove(args.curve)
            raise
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_prop1(args):
    _check_inputs([args.source, args.target, args.map])
    mesh_S, mesh_T = geometry.load_mesh(args.source), geometry.load_mesh(args.target)
    p2p = geometry.load_indices(args.map)
    sizes = [float(x) if "." in x else int(x) for x in args.subsets.split(",")]
    report = fmaps.check_prop1(mesh_S, mesh_T, p2p, sizes, k=args.k, seed=args.seed)
    for line in report.lines():
        print(line)
    print(f"max_gap={report.max_gap:.6e}")
    return EXIT_OK


# ---------------------------------------------------------------- plumbing


def build_parser():
    p = argparse.ArgumentParser(prog="nfreg", description="Non-rigid registration with deformation graphs.")
    p.add_argument("--version", action="version", version=f"nfreg {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads (env NFR_THREADS)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("-o", "--out", default=".", help="output directory")

    sp = sub.add_parser("embed", help="Laplace-Beltrami eigenbasis of a mesh")
    sp.add_argument("mesh")
    sp.add_argument("--k", type=int, default=spectral.DEFAULT_K)
    sp.add_argument("--name", default="basis.nfrm")
    common(sp)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("register", help="deform a source mesh onto a target cloud")
    sp.add_argument("source")
    sp.add_argument("target")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--features", nargs=2, metavar=("SOURCE_NFRM", "TARGET_NFRM"),
                    help="external Stage-I features for source and target")
    sp.add_argument("--rotation", help="3x3 rotation of the target (inverse is applied)")
    sp.add_argument("--gt", help="ground-truth target-to-source map, for reporting")
    sp.add_argument("--mesh-format", choices=("off", "ply"), default="off")
    common(sp)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("match", help="map cloud A to cloud B through a template mesh")
    sp.add_argument("cloud_a")
    sp.add_argument("cloud_b")
    sp.add_argument("--template", required=True)
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    common(sp)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("partial-sample", help="visible-vertex clouds from icosahedron views")
    sp.add_argument("mesh")
    sp.add_argument("--views", type=int, default=12)
    sp.add_argument("--points", type=int, default=None)
    sp.add_argument("--resolution", type=int, default=256)
    common(sp)
    sp.set_defaults(func=cmd_partial_sample)

    sp = sub.add_parser("eval", help="geodesic error, recall and Chamfer metrics")
    sp.add_argument("--source", help="source mesh for geodesic error")
    sp.add_argument("--pred")
    sp.add_argument("--gt")
    sp.add_argument("--curve", help="write the error curve as CSV")
    sp.add_argument("--pred-points")
    sp.add_argument("--gt-points")
    sp.add_argument("--thresholds", default="0.05,0.1")
    sp.add_argument("--chamfer-a")
    sp.add_argument("--chamfer-b")
    common(sp, out=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("prop1-check", help="truncated-alignment residual gaps on vertex subsets")
    sp.add_argument("source")
    sp.add_argument("target")
    sp.add_argument("--map", required=True, help="target-to-source vertex map")
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--subsets", default="0.1,0.3,0.5,0.7,0.9")
    common(sp, out=False)
    sp.set_defaults(func=cmd_prop1)
    return p


def _thread_limit(n):
    if n is None:
        env = os.environ.get("NFR_THREADS")
        n = int(env) if env else None
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if getattr(args, "seed", None) is None and args.command != "register" and args.command != "match":
        args.seed = 0
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except NoCorrespondences as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NOCORR
    except NonFiniteEnergy as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NONFINITE
    except (InputError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except NFRError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    except KeyboardInterrupt:
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
