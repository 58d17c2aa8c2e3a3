"""Command-line entry point: phantom generation, fitting, evaluation,
rendering and field export.

Every subcommand validates all of its inputs before any compute starts and
uses stable exit codes for CI: 0 success, 2 validation failure, 3 numerical
abort, 4 I/O failure.  Errors print as a single machine-parsable line on
stderr.  Outputs land under one run directory together with a manifest of
the produced artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import NumericalAbort, ValidationError
from . import gauss, metrics, motion, optim, phantom, volgrid

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _require_empty_dir(path, overwrite):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise ValidationError(
            f"output directory {path} is not empty (pass --overwrite to reuse)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out_dir, kind, artifacts, extra=None):
    manifest = {"kind": kind, "artifacts": artifacts}
    if extra:
        manifest.update(extra)
    (Path(out_dir) / "run_manifest.json").write_text(
        json.dumps(manifest, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    spec = phantom.PhantomSpec.load(args.spec) if args.spec else phantom.PhantomSpec()
    out = _require_empty_dir(args.out, args.overwrite)
    seq, ed_labels, _ = phantom.generate_phantom(spec)
    volgrid.save_sequence(seq, out / "sequence")
    volgrid.save_volume(ed_labels, out / "ed_labels")
    spec.save(out / "phantom_spec.json")
    artifacts = {
        "sequence": "sequence",
        "ed_labels": "ed_labels.vjson",
        "spec_echo": "phantom_spec.json",
    }
    _write_manifest(out, "gausstrack-phantom", artifacts)
    return EXIT_OK


def _load_fit_inputs(args):
    config = optim.FitConfig.load(args.config) if args.config else optim.FitConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    config.deterministic = not args.non_deterministic
    sequence = volgrid.load_sequence(args.sequence)
    mask = volgrid.load_volume(args.mask)
    if not isinstance(mask, volgrid.LabelVolume):
        raise ValidationError(f"{args.mask}: mask must be a u8 label volume")
    if mask.dims != sequence.dims:
        raise ValidationError(
            f"mask dims {mask.dims} do not match sequence dims {sequence.dims}")
    return config, sequence, mask


def cmd_fit(args):
    config, sequence, mask = _load_fit_inputs(args)
    out = _require_empty_dir(args.out, args.overwrite)
    result = optim.fit(sequence, mask, config)
    gauss.save_gaussians(result.gaussians, out / "gaussians")
    motion.save_nodes(result.nodes, out / "nodes")
    motion.save_network(result.net, out / "network")
    (out / "report.json").write_text(result.report.to_json(), encoding="utf-8")
    config.save(out / "config.json")
    artifacts = {
        "gaussians": "gaussians.gjson",
        "nodes": "nodes.njson",
        "network": "network.wjson",
        "report": "report.json",
        "config": "config.json",
    }
    _write_manifest(out, "gausstrack-fit", artifacts, extra={
        "grid": {"dims": list(sequence.dims), "spacing": list(sequence.spacing)},
        "k_neighbors": config.k_neighbors,
        "cutoff_multiplier": config.cutoff_multiplier,
        "occupancy_floor": config.occupancy_floor,
    })
    return EXIT_OK


def _load_fitted(fitted_dir):
    fitted = Path(fitted_dir)
    manifest_path = fitted / "run_manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"{fitted}: no run_manifest.json (not a fit output?)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("kind") != "gausstrack-fit":
        raise ValidationError(f"{fitted}: manifest kind is not gausstrack-fit")
    g = gauss.load_gaussians(fitted / manifest["artifacts"]["gaussians"])
    nodes = motion.load_nodes(fitted / manifest["artifacts"]["nodes"])
    net = motion.load_network(fitted / manifest["artifacts"]["network"])
    return g, nodes, net, manifest


class _Grid:
    def __init__(self, dims, spacing):
        self.dims = tuple(int(d) for d in dims)
        self.spacing = tuple(float(s) for s in spacing)


def cmd_eval(args):
    g, nodes, net, manifest = _load_fitted(args.fitted)
    sequence = volgrid.load_sequence(args.sequence)
    truth = volgrid.load_volume(args.truth)
    if not isinstance(truth, volgrid.LabelVolume):
        raise ValidationError(f"{args.truth}: truth mask must be a u8 label volume")
    if truth.dims != sequence.dims:
        raise ValidationError(
            f"truth dims {truth.dims} do not match sequence dims {sequence.dims}")
    report = metrics.evaluate_run(
        g, nodes, net, sequence, truth,
        k=manifest.get("k_neighbors", 4),
        cutoff_multiplier=manifest.get("cutoff_multiplier", 3.0),
        occupancy_floor=manifest.get("occupancy_floor", 0.5))
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return EXIT_OK


def cmd_render(args):
    g, nodes, net, manifest = _load_fitted(args.fitted)
    grid = _Grid(**manifest["grid"])
    idx = motion.knn_indices(g.centers, nodes.positions,
                             manifest.get("k_neighbors", 4))
    deformed, _ = motion.apply_motion(g, nodes, net, args.time, idx)
    vol = gauss.render_volume(deformed, grid, manifest.get("cutoff_multiplier", 3.0))
    volgrid.save_volume(vol, args.out)
    return EXIT_OK


def cmd_export_field(args):
    g, nodes, net, manifest = _load_fitted(args.fitted)
    grid = _Grid(**manifest["grid"])
    field = metrics.dense_field_on_grid(g, nodes, net, args.time, grid,
                                        k=manifest.get("k_neighbors", 4))
    out = Path(args.out)
    names = {}
    for i, comp in enumerate(("ux", "uy", "uz")):
        vol = volgrid.VoxelVolume(grid.dims, grid.spacing, field.vectors[..., i])
        volgrid.save_volume(vol, out.parent / f"{out.name}_{comp}")
        names[comp] = f"{out.name}_{comp}.vjson"
    index = {"kind": "gausstrack-field", "t": float(args.time),
             "units": "normalized", "components": names}
    out.parent.mkdir(parents=True, exist_ok=True)
    (out.parent / f"{out.name}.json").write_text(json.dumps(index, indent=1),
                                                 encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="gausstrack",
        description="4D motion tracking with deformable Gaussian volumes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic 4D sequence")
    p.add_argument("--spec", help="phantom spec JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="fit Gaussians + motion to a sequence")
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--mask", required=True, help="ED label volume (.vjson)")
    p.add_argument("--config", help="run-config JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="cap renderer parallelism")
    p.add_argument("--non-deterministic", action="store_true",
                   help="allow run-to-run variance")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score a fitted state at the ES frame")
    p.add_argument("--fitted", required=True, help="fit output directory")
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--truth", required=True, help="ES truth labels (.vjson)")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render the deformed volume at a time")
    p.add_argument("--fitted", required=True)
    p.add_argument("--time", type=float, required=True, help="normalized time")
    p.add_argument("--out", required=True, help="output volume path (.vjson)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-field", help="export the dense displacement field")
    p.add_argument("--fitted", required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_export_field)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"gausstrack: validation: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalAbort as e:
        print(f"gausstrack: numerical: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"gausstrack: io: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
