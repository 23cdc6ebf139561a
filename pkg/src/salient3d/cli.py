"""Command-line entry point.

Every command prints one JSON line to stdout; logs go to stderr.
Exit codes: 0 ok, 1 contract/config error, 2 I/O or file format error,
64 unknown command.

Options may also come from a flat ``key = value`` file given with
``--config``; explicit flags win over the file, which wins over defaults.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, ParseError, Salient3DError
from .fixtures import SceneSpec, generate_synthetic_scene, write_scene
from .fusion import (
    DEFAULT_TARGET_COUNT,
    fuse_point_features,
    load_cloud_ply,
    save_cloud_ply,
)
from .geometry import DEFAULT_MARGIN, OrientedBox, assign_pseudo_labels, detection_ap, save_json
from .pipeline import box_from_labels, segment_ncut
from .plyio import read_ply
from .regularizers import (
    DEFAULT_BIN_EPS,
    DEFAULT_K,
    DEFAULT_LAMBDA,
    DEFAULT_WEIGHT,
    LossWeights,
    SdfSampleSet,
    box_sdf,
    evaluate_all,
)
from .seg_transformer import (
    DEFAULT_D_MODEL,
    DEFAULT_HEADS,
    SegTransformer,
    TransformerConfig,
    load_weights,
    predict,
    save_weights,
    train,
)
from .sfm_ingest import load_feature_store, parse_sfm

log = logging.getLogger("salient3d")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64


class ConfigError(Exception):
    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field


def _csv_paths(text):
    return [p for p in str(text).split(",") if p]


# name -> (type, default, help); None default means "required when used"
OPTIONS = {
    "seed": (int, 0, "random seed"),
    "out": (str, None, "output path"),
    "sfm": (str, None, "directory with cameras.txt, images.txt, points3D.txt"),
    "features": (str, None, "ARFS feature file"),
    "cloud": (str, None, "featured point cloud PLY (with a label channel where needed)"),
    "clouds": (_csv_paths, None, "comma-separated pseudo-labelled cloud PLYs"),
    "weights": (str, None, "ARTW weight file"),
    "box": (str, None, "box JSON"),
    "pred": (str, None, "predicted box JSON"),
    "gt": (str, None, "ground-truth box JSON"),
    "log": (str, None, "training log (JSON lines)"),
    "opacities": (str, None, "optional .npy of per-ray opacities"),
    "shape": (str, "box", "synthetic object shape: box or sphere"),
    "n_foreground": (int, 400, "synthetic foreground points"),
    "n_ground": (int, 500, "synthetic ground points"),
    "n_clutter": (int, 250, "synthetic clutter points"),
    "target_count": (int, DEFAULT_TARGET_COUNT, "NCut downsampling target"),
    "voxel": (float, None, "explicit voxel size (overrides target_count)"),
    "sigma_s": (float, None, "spatial kernel width (default 0.2 x cloud radius)"),
    "feature_exponent": (float, 1.0, "exponent on the clamped similarity"),
    "ransac_iters": (int, 1000, "RANSAC iterations"),
    "ransac_tol": (float, None, "RANSAC inlier tolerance (default 0.02 x radius)"),
    "margin": (float, DEFAULT_MARGIN, "relative OBB margin"),
    "d_model": (int, DEFAULT_D_MODEL, "transformer width"),
    "heads": (int, DEFAULT_HEADS, "attention heads"),
    "lr": (float, 1e-3, "learning rate"),
    "steps": (int, 1600, "training steps"),
    "augment": (int, 1, "1 = random feature-space and yaw rotations while training, 0 = off"),
    "k": (int, DEFAULT_K, "neighbours for distance statistics"),
    "lam": (float, DEFAULT_LAMBDA, "std multiplier for the distance bound"),
    "eps": (float, DEFAULT_BIN_EPS, "binary-loss epsilon"),
    "w_eik": (float, DEFAULT_WEIGHT, "eikonal weight"),
    "w_ground": (float, DEFAULT_WEIGHT, "ground weight"),
    "w_fg": (float, DEFAULT_WEIGHT, "foreground weight"),
    "w_bin": (float, DEFAULT_WEIGHT, "binary weight"),
    "step": (int, None, "current step for annealing"),
    "anneal_steps": (int, None, "annealing horizon"),
    "l_color": (float, 0.0, "photometric loss to add to the total"),
}

COMMANDS = {
    "synth": ("generate a synthetic scene", ["out", "seed", "shape", "n_foreground", "n_ground", "n_clutter"], ["out"]),
    "fuse": ("fuse 2D features onto SfM points", ["sfm", "features", "out"], ["sfm", "features", "out"]),
    "segment-ncut": ("foreground segmentation by Normalized Cut",
                     ["cloud", "out", "target_count", "voxel", "sigma_s", "feature_exponent"], ["cloud", "out"]),
    "segment-transformer": ("foreground segmentation with trained weights", ["cloud", "weights", "out"],
                            ["cloud", "weights", "out"]),
    "train": ("train the segmentation transformer on pseudo-labels",
              ["clouds", "weights", "log", "d_model", "heads", "lr", "steps", "augment", "seed"], ["clouds", "weights"]),
    "box": ("ground plane and oriented box from a labelled cloud",
            ["cloud", "out", "ransac_iters", "ransac_tol", "margin", "seed"], ["cloud", "out"]),
    "pseudo-labels": ("positive/negative/ignore labels from a labelled cloud and box", ["cloud", "box", "out"],
                      ["cloud", "box", "out"]),
    "eval-detection": ("AP of predicted boxes against ground truth", ["pred", "gt"], ["pred", "gt"]),
    "losses-eval": ("evaluate the SDF regularizers with the box SDF",
                    ["cloud", "box", "opacities", "k", "lam", "eps", "w_eik", "w_ground", "w_fg", "w_bin",
                     "step", "anneal_steps", "l_color"], ["cloud", "box"]),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("arguments", message)


def build_parser():
    parser = _Parser(prog="salient3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (help_text, opts, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="flat key = value option file")
        p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
        p.add_argument("-v", "--verbose", action="store_true")
        for opt in opts:
            typ, default, h = OPTIONS[opt]
            shown = "" if default is None else f" (default {default})"
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, type=typ, default=argparse.SUPPRESS,
                           help=h + shown)
    return parser


def read_config(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError:
        raise ParseError(str(path)) from None
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {num}", "expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_options(command, flags, config_path=None):
    """Merge defaults < config file < flags for ``command``."""
    _, opts, required = COMMANDS[command]
    values = {k: OPTIONS[k][1] for k in opts}
    if config_path:
        for key, raw in read_config(config_path).items():
            if key in ("deterministic", "verbose"):
                continue
            if key not in values:
                log.warning("config key %r is not used by %s", key, command)
                continue
            try:
                values[key] = OPTIONS[key][0](raw)
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw!r}") from None
    values.update({k: v for k, v in flags.items() if k in values})
    for key in required:
        if values[key] is None:
            raise ConfigError(key, "missing required field")
    return values


# --------------------------------------------------------------------------
# helpers


def _load_labelled(path, channel):
    cloud = load_cloud_ply(path)
    rec, _ = read_ply(path)
    if channel not in rec.dtype.names:
        raise FormatError(f"{path}: no '{channel}' channel")
    return cloud, np.asarray(rec[channel])


def _load_box(path):
    try:
        obj = json.loads(Path(path).read_text())
    except OSError:
        raise ParseError(str(path)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return obj


def _box_from(obj):
    for key in ("box", "gt_box"):
        if isinstance(obj, dict) and key in obj:
            return OrientedBox.from_json(obj[key])
    return OrientedBox.from_json(obj)


def _boxes(obj):
    """A single box document or a mapping from scan id to box documents."""
    if isinstance(obj, dict) and "scans" in obj:
        return {str(k): _box_from(v) for k, v in obj["scans"].items()}
    return {"0": _box_from(obj)}


def _fg_fraction(labels):
    return float(np.mean(labels)) if labels.size else 0.0


# --------------------------------------------------------------------------
# commands


def cmd_synth(o):
    scene = generate_synthetic_scene(SceneSpec(seed=o["seed"], shape=o["shape"], n_foreground=o["n_foreground"],
                                               n_ground=o["n_ground"], n_clutter=o["n_clutter"]))
    out = write_scene(scene, o["out"])
    return {"out": str(out), "points": len(scene.sfm.points), "frames": len(scene.sfm.frames),
            "foreground": int(sum(scene.gt_labels.values()))}


def cmd_fuse(o):
    sfm = parse_sfm(o["sfm"])
    store = load_feature_store(o["features"])
    cloud = fuse_point_features(sfm, store)
    save_cloud_ply(cloud, o["out"])
    return {"out": o["out"], "points": len(cloud), "dropped": len(sfm.points) - len(cloud),
            "heads": cloud.heads, "dim": cloud.dim}


def cmd_segment_ncut(o):
    cloud = load_cloud_ply(o["cloud"])
    labels, seg = segment_ncut(cloud, o["target_count"], o["voxel"], o["sigma_s"], o["feature_exponent"])
    save_cloud_ply(cloud, o["out"], {"label": labels.astype(np.uint8)})
    return {"out": o["out"], "points": len(cloud), "graph_vertices": int(seg.labels.size),
            "foreground_fraction": _fg_fraction(labels), **seg.summary()}


def cmd_segment_transformer(o):
    cloud = load_cloud_ply(o["cloud"])
    model = load_weights(o["weights"])
    prob = predict(model, cloud)
    labels = prob > 0.5
    save_cloud_ply(cloud, o["out"], {"label": labels.astype(np.uint8), "probability": prob})
    return {"out": o["out"], "points": len(cloud), "foreground_fraction": _fg_fraction(labels)}


def cmd_train(o):
    samples = [_load_labelled(p, "pseudo_label") for p in o["clouds"]]
    d_feat = {c.heads * c.dim for c, _ in samples}
    if len(d_feat) != 1:
        raise ConfigError("clouds", "feature sizes differ between clouds")
    cfg = TransformerConfig(d_feat.pop(), d_model=o["d_model"], heads=o["heads"])
    model = SegTransformer.init(cfg, rng=o["seed"])
    with contextlib.ExitStack() as stack:
        fid = stack.enter_context(open(o["log"], "w")) if o["log"] else None

        def record(entry):
            if fid:
                fid.write(json.dumps(entry) + "\n")
            if entry["step"] % 100 == 0:
                log.info("step %d loss %.6f", entry["step"], entry["loss"])

        samples = [(c, lab.astype(np.int8)) for c, lab in samples]
        losses = train(model, samples, o["steps"], o["lr"], log=record,
                       augment_rng=o["seed"] + 1 if o["augment"] else None)
    save_weights(model, o["weights"])
    return {"weights": o["weights"], "steps": o["steps"], "first_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None, "parameters": model.num_parameters()}


def cmd_box(o):
    cloud, labels = _load_labelled(o["cloud"], "label")
    plane, box = box_from_labels(cloud, labels.astype(bool), o["ransac_iters"], o["ransac_tol"],
                                 o["margin"], rng=o["seed"])
    doc = {"box": box.to_json(), "plane": plane.to_json(), "plane_inliers": int(plane.inliers.size)}
    save_json(doc, o["out"])
    return {"out": o["out"], "volume": box.volume, **doc}


def cmd_pseudo_labels(o):
    cloud, labels = _load_labelled(o["cloud"], "label")
    box = _box_from(_load_box(o["box"]))
    pseudo = assign_pseudo_labels(cloud, labels.astype(bool), box)
    save_cloud_ply(cloud, o["out"], {"pseudo_label": pseudo.astype(np.int8)})
    return {"out": o["out"], "positive": int(np.sum(pseudo == 1)), "negative": int(np.sum(pseudo == 0)),
            "ignore": int(np.sum(pseudo == -1))}


def cmd_eval_detection(o):
    pred, gt = _boxes(_load_box(o["pred"])), _boxes(_load_box(o["gt"]))
    return {"ap@0.5": detection_ap(pred, gt, 0.5), "ap@0.7": detection_ap(pred, gt, 0.7), "scans": len(gt)}


def cmd_losses_eval(o):
    cloud, labels = _load_labelled(o["cloud"], "label")
    labels = labels.astype(bool)
    box = _box_from(_load_box(o["box"]))
    sdf, grad = box_sdf(box, cloud.positions)
    fg = SdfSampleSet(cloud.positions[labels], sdf[labels], grad[labels])
    ground = SdfSampleSet(cloud.positions[~labels], sdf[~labels])
    if o["opacities"]:
        try:
            opac = np.load(o["opacities"])
        except (OSError, ValueError):
            raise ParseError(o["opacities"]) from None
    else:
        opac = np.zeros(0)
    weights = LossWeights(o["w_eik"], o["w_ground"], o["w_fg"], o["w_bin"])
    return evaluate_all(ground, fg, opac, o["l_color"], weights, o["k"], o["lam"], o["eps"],
                        o["step"], o["anneal_steps"])


HANDLERS = {
    "synth": cmd_synth, "fuse": cmd_fuse, "segment-ncut": cmd_segment_ncut,
    "segment-transformer": cmd_segment_transformer, "train": cmd_train, "box": cmd_box,
    "pseudo-labels": cmd_pseudo_labels, "eval-detection": cmd_eval_detection, "losses-eval": cmd_losses_eval,
}


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _run(command, opts, deterministic):
    if not deterministic:
        return HANDLERS[command](opts)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        return HANDLERS[command](opts)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    first = next((a for a in argv if not a.startswith("-")), None)
    if first is None and not any(a in ("-h", "--help", "--version") for a in argv):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if first is not None and first not in COMMANDS and not any(a in ("-h", "--help") for a in argv):
        parser.print_help(sys.stderr)
        sys.stderr.write(f"unknown command: {first}\n")
        return EXIT_USAGE
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
        flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "deterministic", "verbose")}
        opts = resolve_options(ns.command, flags, ns.config)
        result = _run(ns.command, opts, ns.deterministic)
    except ConfigError as exc:
        _emit({"error": "config", "field": exc.field, "message": str(exc)})
        return EXIT_CONTRACT
    except (ParseError, FormatError, OSError) as exc:
        _emit({"error": "io", "message": str(exc)})
        return EXIT_IO
    except Salient3DError as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_CONTRACT
    _emit({"command": ns.command, **result})
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
