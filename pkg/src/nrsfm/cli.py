"""Subcommand front-end wiring the pipeline end to end.

One JSON config file per run is the canonical input; ``--set`` flags
override individual leaf keys.  Every run writes a manifest with the
resolved config, the seed and SHA-256 checksums of all artifacts, so a
run can be replayed exactly.  Progress goes to standard error only.

Exit codes: 0 success, 2 validation, 3 format/I-O, 4 numerical,
5 insufficient clean frames.
"""

import argparse
import glob as globmod
import hashlib
import json
import os
import sys

# Named solver-parameter profiles for typical input regimes.  "default"
# suits moderately textured close-range sequences; "low_smoothing" keeps
# more high-frequency deformation; "strong_prior" leans harder on the
# shape prior for sequences with long occlusions.
PROFILES = {
    "default": {"lam": 1e4, "theta": 1e-5, "tau": 1e4, "gamma": 5e4},
    "low_smoothing": {"lam": 5e3, "theta": 1e-5, "tau": 5e3, "gamma": 1e3},
    "strong_prior": {"lam": 5e4, "theta": 1e-5, "tau": 4.2e3, "gamma": 1e5},
}

SOLVER_KEYS = {
    "lam": 1e4, "gamma": 5e4, "tau": 1e4, "theta": 1e-5, "sigma_dual": 1.0,
    "max_outer": 30, "max_pd": 100, "max_si": 20,
    "tol_outer": 1e-6, "tol_pd": 1e-5, "tol_si": 1e-5, "tv_enabled": True,
}

SCHEMAS = {
    "synth": {
        "output_dir": ".",
        "seed": 0,
        "scene": {"grid_w": 20, "grid_h": 20, "frames": 40,
                  "amplitude": 0.85, "frequency": 0.08, "wave_speed": 0.045,
                  "view_tilt_deg": 30.0, "tilt_sweep_deg": 25.0,
                  "yaw_sweep_deg": 15.0, "tilt_period": 16.0,
                  "yaw_period": 11.0},
        "occluder": {"pattern": None, "frame_range": [10, 30],
                     "stripe_width": 4, "grid_pitch": 6, "grid_thickness": 2,
                     "box": [4, 4, 12, 12]},
        "corruption": {"model": "freeze", "sigma": 1.0},
        "write_frames": False,
        "write_flows": False,
    },
    "occlusion": {
        "output_dir": ".",
        "frames_glob": None,
        "frames": None,
        "flows_glob": None,
        "flows": None,
        "reference_index": 0,
        "k": 11, "sigma_g": 2.0,
        "epsilon": 0.05, "epsilon_prime": 0.02, "min_window": 5,
        "write_maps": True,
    },
    "prior": {
        "output_dir": ".",
        "w": None, "mask": None,
        "f_sp": None, "window_json": None,
        "external_prior": None,
        "occlusion_maps_glob": None,
        "policy": "mean", "min_window": 5, "with_scale": True,
        "profile": "default",
        "solver": dict(SOLVER_KEYS),
    },
    "solve": {
        "output_dir": ".",
        "w": None, "mask": None,
        "prior": None,
        "mode": "none",
        "occlusion_maps_glob": None,
        "binarize": False, "threshold": 0.5, "average_map": False,
        "profile": "default",
        "solver": dict(SOLVER_KEYS),
        "ply_frames": [],
    },
    "eval": {
        "output_dir": ".",
        "shapes": None, "reference": None,
        "align": "procrustes+reflection",
        "occluded_frames": None,
    },
    "bench": {
        "output_dir": ".",
        "scene": {}, "occluder": {}, "corruption": {},
        "seed": 0, "solver": {}, "prior": {},
        "configurations": None,
        "align": "procrustes+reflection",
        "gamma_sweep": None,
    },
}


class ConfigError(ValueError):
    """Config-file problem; always maps to exit code 2."""


def _merge_checked(schema, override, path=""):
    """Deep-merge override into schema defaults, rejecting unknown keys."""
    import copy
    out = {}
    for key, default in schema.items():
        out[key] = copy.deepcopy(default)
    for key, value in (override or {}).items():
        where = "%s.%s" % (path, key) if path else key
        if key not in schema:
            raise ConfigError("unknown config key %r" % where)
        if isinstance(schema[key], dict) and not path.startswith("bench"):
            if not isinstance(value, dict):
                raise ConfigError("config key %r must be an object" % where)
            out[key] = _merge_checked(schema[key], value, where)
        else:
            out[key] = value
    return out


def _apply_set(config, assignment):
    """Apply one --set dotted.path=value override to a config dict."""
    if "=" not in assignment:
        raise ConfigError("--set needs key.path=value, got %r" % assignment)
    keypath, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = keypath.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError("unknown config key %r" % keypath)
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError("unknown config key %r" % keypath)
    node[parts[-1]] = value


def _load_config(command, args):
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("cannot read config: %s" % exc)
        except json.JSONDecodeError as exc:
            raise ConfigError("config is not valid JSON: %s" % exc)
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    config = _merge_checked(SCHEMAS[command], raw,
                            "bench" if command == "bench" else "")
    for assignment in args.set or []:
        _apply_set(config, assignment)
    if args.out:
        config["output_dir"] = args.out
    return config


def _progress(msg):
    print(msg, file=sys.stderr)


class Manifest:
    """Collects artifact checksums; written at the end of every run."""

    def __init__(self, command, config, out_dir):
        self.command = command
        self.config = config
        self.out_dir = out_dir
        self.artifacts = {}
        self.extra = {}

    def path(self, name):
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, name)

    def add(self, path):
        digest = hashlib.sha256()
        with open(path, "rb") as fh:
            digest.update(fh.read())
        self.artifacts[os.path.relpath(path, self.out_dir)] = \
            digest.hexdigest()

    def write(self):
        payload = {"command": self.command, "config": self.config,
                   "seed": self.config.get("seed"),
                   "artifacts": self.artifacts}
        payload.update(self.extra)
        path = self.path("manifest.json")
        with open(path, "w", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _resolve_files(config, list_key, glob_key, what):
    paths = config.get(list_key)
    if paths is None and config.get(glob_key):
        paths = sorted(globmod.glob(config[glob_key]))
    if not paths:
        raise ConfigError("no %s given (%s or %s)" % (what, list_key, glob_key))
    return paths


def _solver_params(config):
    from .solver import SolverParams
    profile = config.get("profile", "default")
    if profile not in PROFILES:
        raise ConfigError("unknown profile %r (have %s)"
                          % (profile, ", ".join(sorted(PROFILES))))
    merged = dict(SOLVER_KEYS)
    merged.update(PROFILES[profile])
    merged.update({k: v for k, v in config["solver"].items()
                   if v != SOLVER_KEYS.get(k)})
    return SolverParams(**merged)


# --- subcommands ------------------------------------------------------------

def cmd_synth(config):
    import numpy as np

    from . import bench, io_formats
    from .core import center_measurements

    man = Manifest("synth", config, config["output_dir"])
    scene = bench.generate_sheet_scene(**config["scene"])
    spec = None
    w_raw = scene.gt_w
    if config["occluder"]["pattern"]:
        occ = config["occluder"]
        spec = bench.OccluderSpec(
            pattern=occ["pattern"], frame_range=tuple(occ["frame_range"]),
            stripe_width=occ["stripe_width"], grid_pitch=occ["grid_pitch"],
            grid_thickness=occ["grid_thickness"], box=tuple(occ["box"]))
        w_raw, covered = bench.apply_occluder(
            scene, spec, model=config["corruption"]["model"],
            sigma=config["corruption"]["sigma"], seed=config["seed"])
        man.extra["covered_tracks"] = int(covered.sum())
    w = center_measurements(w_raw)

    path = man.path("w.spva")
    io_formats.write_matrix_container(w, path)
    man.add(path)
    path = man.path("gt_shapes.spva")
    io_formats.write_shape_container(scene.gt_shapes, path)
    man.add(path)
    path = man.path("mask.pgm")
    io_formats.write_mask(scene.mask, path)
    man.add(path)
    if spec is not None:
        tensor = bench.occluder_tensor(scene, spec)
        for f in range(tensor.frames):
            path = man.path("occ_%03d.pgm" % f)
            io_formats.write_pgm(tensor.maps[f], path)
            man.add(path)
    if config["write_frames"]:
        images = bench.render_frames(scene, spec)
        for f in range(images.shape[0]):
            path = man.path("frame_%03d.pgm" % f)
            io_formats.write_pgm(images[f], path)
            man.add(path)
    if config["write_flows"]:
        # The rendered texture is static in the reference view, so the
        # ground-truth flow of every frame is identically zero.
        h, wid = scene.mask.height, scene.mask.width
        zero = np.zeros((h, wid), dtype=np.float32)
        from .occlusion import FlowField
        frames = scene.gt_shapes.frames
        for f in range(frames):
            if f == 0:
                continue
            path = man.path("flow_%03d.flo" % f)
            io_formats.write_flo(FlowField(u=zero, v=zero, frame_index=f),
                                 path)
            man.add(path)
    man.write()
    _progress("synth: %d frames, %d tracks -> %s"
              % (scene.gt_shapes.frames, scene.gt_shapes.points,
                 config["output_dir"]))
    return 0


def cmd_occlusion(config):
    from . import io_formats, occlusion

    man = Manifest("occlusion", config, config["output_dir"])
    frame_paths = _resolve_files(config, "frames", "frames_glob", "frames")
    flow_paths = _resolve_files(config, "flows", "flows_glob", "flow fields")
    images = [io_formats.read_image(p) for p in frame_paths]
    flows = [io_formats.read_flo(p) for p in flow_paths]
    _progress("occlusion: %d frames, %d flow fields"
              % (len(images), len(flows)))
    tensor = occlusion.occlusion_tensor(
        images, flows, k=config["k"], sigma_g=config["sigma_g"],
        reference_index=config["reference_index"])
    if config["write_maps"]:
        for f in range(tensor.frames):
            path = man.path("occ_%03d.pgm" % f)
            io_formats.write_pgm(tensor.maps[f], path)
            man.add(path)
    ti = occlusion.ti_series(tensor, epsilon=config["epsilon"],
                             epsilon_prime=config["epsilon_prime"])
    path = man.path("ti.csv")
    occlusion.write_ti_csv(ti, path)
    man.add(path)
    f_sp = occlusion.select_prior_window(ti, min_window=config["min_window"])
    path = man.path("window.json")
    with open(path, "w", newline="\n") as fh:
        json.dump({"f_sp": f_sp}, fh)
        fh.write("\n")
    man.add(path)
    man.extra["f_sp"] = f_sp
    man.write()
    _progress("occlusion: clean prior window is %d frames" % f_sp)
    return 0


def _load_window_weights(config, mask, f_sp):
    """Per-pixel window weights from stored occlusion maps, if given."""
    if not config.get("occlusion_maps_glob"):
        return None
    import numpy as np

    from . import io_formats, occlusion
    paths = sorted(globmod.glob(config["occlusion_maps_glob"]))
    if not paths:
        raise ConfigError("occlusion_maps_glob matched no files")
    maps = np.stack([io_formats.read_pgm(p).astype(float) for p in paths])
    tensor = occlusion.OcclusionTensor(maps=maps)
    return occlusion.build_weights(tensor, mask, "per_pixel")[:3 * f_sp]


def cmd_prior(config):
    from . import io_formats, prior as prior_mod

    man = Manifest("prior", config, config["output_dir"])
    if config["external_prior"]:
        shapes = io_formats.read_shape_container(config["external_prior"])
        path = man.path("prior.spva")
        io_formats.write_shape_container(shapes, path)
        man.add(path)
        man.write()
        _progress("prior: using external prior (%d frames), window solve "
                  "skipped" % shapes.frames)
        return 0
    if not config["w"] or not config["mask"]:
        raise ConfigError("prior needs 'w' and 'mask' paths")
    w = io_formats.read_matrix_container(config["w"])
    mask = io_formats.read_mask(config["mask"])
    f_sp = config["f_sp"]
    if f_sp is None and config["window_json"]:
        with open(config["window_json"]) as fh:
            f_sp = json.load(fh)["f_sp"]
    if f_sp is None:
        raise ConfigError("prior needs 'f_sp' or 'window_json'")
    import dataclasses
    params = dataclasses.replace(_solver_params(config), gamma=0.0)
    weights = _load_window_weights(config, mask, f_sp)
    _progress("prior: solving %d-frame window" % f_sp)
    est = prior_mod.estimate_prior(w, mask, params, f_sp,
                                   weights_window=weights,
                                   policy=config["policy"],
                                   with_scale=config["with_scale"],
                                   min_window=config["min_window"])
    path = man.path("prior.spva")
    io_formats.write_shape_container(est.aligned_prior, path)
    man.add(path)
    man.extra["f_sp"] = est.window
    man.extra["anchor_points"] = [int(i) for i in est.anchor_points]
    man.write()
    _progress("prior: wrote %d-frame prior" % est.aligned_prior.frames)
    return 0


def cmd_solve(config):
    import csv

    import numpy as np

    from . import core, io_formats, occlusion, solver

    man = Manifest("solve", config, config["output_dir"])
    if not config["w"] or not config["mask"]:
        raise ConfigError("solve needs 'w' and 'mask' paths")
    w = io_formats.read_matrix_container(config["w"])
    mask = io_formats.read_mask(config["mask"])
    params = _solver_params(config)
    mode = config["mode"]
    if mode == "none":
        pspec = solver.PriorSpec(mode="none")
        init = None
    else:
        if not config["prior"]:
            raise ConfigError("mode %r needs a 'prior' path" % mode)
        s_prior = io_formats.read_shape_container(config["prior"])
        kwargs = {"mode": mode, "s_prior": s_prior}
        if mode in ("per_frame", "per_pixel"):
            if not config["occlusion_maps_glob"]:
                raise ConfigError(
                    "mode %r needs occlusion_maps_glob" % mode)
            paths = sorted(globmod.glob(config["occlusion_maps_glob"]))
            if not paths:
                raise ConfigError("occlusion_maps_glob matched no files")
            maps = np.stack([io_formats.read_pgm(p).astype(float)
                             for p in paths])
            tensor = occlusion.OcclusionTensor(maps=maps)
            weights = occlusion.build_weights(
                tensor, mask, mode, binarize=config["binarize"],
                threshold=config["threshold"],
                average_map=config["average_map"])
            key = "frame_weights" if mode == "per_frame" else "pixel_weights"
            kwargs[key] = weights
        pspec = solver.PriorSpec(**kwargs)
        # Start prior-regularized solves from the prior itself so the
        # iterate and the prior share one gauge.
        init = (core.estimate_rotations(w, s_prior), s_prior)
    _progress("solve: %d frames, %d tracks, mode=%s, gamma=%g"
              % (w.frames, w.points, mode, params.gamma))
    result = solver.solve(w, pspec, mask, params, init=init)
    _progress("solve: %s after %d outer iterations"
              % ("converged" if result.converged else "iteration cap",
                 result.iterations_used["outer"]))

    path = man.path("shapes.spva")
    io_formats.write_shape_container(result.shape, path)
    man.add(path)
    path = man.path("poses.csv")
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "r11", "r12", "r13", "r21", "r22", "r23"])
        for f in range(w.frames):
            writer.writerow([f] + [repr(float(v))
                                   for v in result.poses.rows2x3[f].ravel()])
    man.add(path)
    path = man.path("energy.csv")
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "energy"])
        for it, e in result.energy_trace:
            writer.writerow([it, repr(float(e))])
    man.add(path)
    for f in config["ply_frames"]:
        path = man.path("frame_%03d.ply" % f)
        io_formats.write_ply(result.shape, f, path)
        man.add(path)
    man.extra["converged"] = result.converged
    man.extra["final_energy"] = float(result.energy_trace[-1][1])
    man.write()
    return 0


def cmd_eval(config):
    import csv

    from . import bench, io_formats

    man = Manifest("eval", config, config["output_dir"])
    if not config["shapes"] or not config["reference"]:
        raise ConfigError("eval needs 'shapes' and 'reference' paths")
    shapes = io_formats.read_shape_container(config["shapes"])
    ref = io_formats.read_shape_container(config["reference"])
    e_whole, per_frame = bench.mean_rms(shapes, ref, align=config["align"])
    rows = [("whole", e_whole)]
    if config["occluded_frames"]:
        f0, f1 = config["occluded_frames"]
        if not (0 <= f0 <= f1 < shapes.frames):
            raise ConfigError("occluded_frames out of range")
        rows.append(("occluded", float(per_frame[f0:f1 + 1].mean())))
    path = man.path("metrics.csv")
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "e3d"])
        for split, value in rows:
            writer.writerow([split, repr(float(value))])
    man.add(path)
    path = man.path("per_frame.csv")
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "e3d"])
        for f, value in enumerate(per_frame):
            writer.writerow([f, repr(float(value))])
    man.add(path)
    man.write()
    for split, value in rows:
        _progress("eval: %s e3d = %.6f" % (split, value))
    return 0


def cmd_bench(config):
    import csv

    from . import bench

    man = Manifest("bench", config, config["output_dir"])
    allowed = {section: set(bench.DEFAULT_BENCH_CONFIG[section])
               for section in ("scene", "occluder", "corruption", "solver",
                               "prior")}
    allowed["occluder"] |= {"grid_pitch", "grid_thickness", "box"}
    for section, keys in allowed.items():
        for key in config.get(section) or {}:
            if key not in keys:
                raise ConfigError("unknown config key %r" % ("%s.%s"
                                                             % (section, key)))
    bench_config = {k: v for k, v in config.items()
                    if k in ("scene", "occluder", "corruption", "seed",
                             "solver", "prior", "configurations", "align")
                    and v not in (None, {})}
    _progress("bench: running %d configurations"
              % len(bench_config.get(
                  "configurations",
                  bench.DEFAULT_BENCH_CONFIG["configurations"])))
    report = bench.run_benchmark(bench_config)
    path = man.path("report.csv")
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in bench.report_csv_rows(report):
            writer.writerow(row)
    man.add(path)
    path = man.path("report.txt")
    with open(path, "w", newline="\n") as fh:
        fh.write(bench.report_text(report) + "\n")
    man.add(path)
    if config["gamma_sweep"]:
        sweep_cfg = config["gamma_sweep"]
        sweep = bench.gamma_sweep(
            bench_config, gammas=sweep_cfg.get("gammas",
                                               (0.0, 1e2, 1e3, 1e4, 1e6, 1e9)),
            mode=sweep_cfg.get("mode", "per_sequence"))
        path = man.path("sweep.csv")
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gamma", "e3d_whole", "e3d_occluded"])
            for gamma, e_whole, e_occ in sweep:
                writer.writerow([repr(gamma), repr(e_whole), repr(e_occ)])
        man.add(path)
    man.extra["f_sp"] = report["f_sp"]
    man.write()
    _progress(bench.report_text(report))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "occlusion": cmd_occlusion,
    "prior": cmd_prior,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="nrsfm",
        description="Dense orthographic NRSfM with a soft shape prior.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override one config leaf key")
        p.add_argument("--out", help="output directory override")
    return parser


def main(argv=None):
    # Thread-count override must land before BLAS pools spin up.
    threads = os.environ.get("NRSFM_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    args = _build_parser().parse_args(argv)
    from .errors import (FormatError, InsufficientCleanFramesError,
                         InvalidInputError, NumericalError)
    try:
        config = _load_config(args.command, args)
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except InvalidInputError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except FormatError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    except NumericalError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 4
    except InsufficientCleanFramesError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
