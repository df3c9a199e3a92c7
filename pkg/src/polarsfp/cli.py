"""Command-line entry point: ``polarsfp <subcommand> [options]``.

Every subcommand takes an optional ``--config`` JSON file whose keys mirror the
long option names (dashes become underscores). Precedence is flag > file >
built-in default, and unknown keys are rejected. Exit status: 0 on success,
1 for input errors, 2 for numerical failures.
"""

import argparse
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from polarsfp import __version__
from polarsfp.errors import ConfigurationError, NumericalError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

# subcommand -> {option: (type, default, help)}; _REQ marks required options
_REQ = object()
OPTIONS = {
    "decompose": {
        "in": ("paths", _REQ, "four polarizer images (PFM), ordered 0, 45, 90, 135 deg"),
        "out": (str, _REQ, "output Stokes tensor (PSFP, channels i_un, rho, phi, valid)"),
        "rho_min": (float, 1e-3, "DoP below which the AoP is flagged unreliable"),
    },
    "synth": {
        "stokes": (str, _REQ, "Stokes tensor written by decompose"),
        "out": (str, _REQ, "output directory for stack_{0,45,90,135}.pfm"),
    },
    "render": {
        "scene": (str, _REQ, "scene description (JSON)"),
        "out": (str, _REQ, "output directory"),
        "projection": (str, None, "override the scene projection (perspective or orthographic)"),
    },
    "solve": {
        "in": ("paths", _REQ, "four polarizer images (PFM)"),
        "camera": (str, _REQ, "camera JSON (intrinsics)"),
        "out": (str, _REQ, "output normal map (PSFP)"),
        "eta": (float, 1.5, "refractive index"),
        "mode": (str, "perspective", "perspective or orthographic"),
        "strategy": (str, "smoothness", "smoothness or oracle"),
        "reflection": (str, "both", "candidate reflection types: both, diffuse or specular"),
        "gt": (str, None, "ground-truth normals (PSFP), needed by the oracle strategy"),
        "rho_min": (float, 1e-3, "DoP threshold"),
    },
    "prep": {
        "depth_dir": (str, _REQ, "directory of depth frames"),
        "depth_format": (str, "png", "png (16-bit, mm) or pfm (m)"),
        "pol": ("paths", _REQ, "four polarizer images (PFM)"),
        "cams": (str, _REQ, "camera JSON with 'depth' and 'polar' blocks"),
        "out": (str, _REQ, "output ground-truth normal map (PSFP)"),
        "gray": (str, None, "depth-camera intensity image (PFM); enables extrinsic refinement"),
        "viewing": (str, "none", "also write the viewing encoding (v, vc, vp or none) to --viewing-out"),
        "viewing_out": (str, None, "PSFP path for the viewing encoding"),
        "k_neighbors": (int, 30, "PCA neighbourhood size"),
        "max_range": (float, 5.0, "maximum valid depth in metres"),
        "min_neighbors": (int, 10, "minimum neighbours within the density radius"),
        "density_radius": (float, 0.02, "density radius in metres"),
    },
    "encode-view": {
        "camera": (str, _REQ, "camera JSON (intrinsics)"),
        "out": (str, _REQ, "output PSFP"),
        "viewing": (str, "v", "v, vc, vp or none"),
        "bands": (int, 6, "frequency bands for vp"),
    },
    "train": {
        "data": (str, _REQ, "directory of render outputs (one subdirectory per sample)"),
        "out": (str, _REQ, "checkpoint directory"),
        "viewing": (str, "v", "viewing encoding"),
        "variant": (str, "ours", "polarization representation"),
        "bands": (int, 6, "frequency bands for vp"),
        "width": (float, 0.125, "channel width factor"),
        "attention_blocks": (int, 8, "self-attention blocks in the bottleneck"),
        "heads": (int, None, "attention heads (default min(8, dim))"),
        "lr": (float, 1e-3, "initial learning rate"),
        "batch_size": (int, 4, "batch size"),
        "epochs": (int, 1000, "epochs"),
        "steps": (int, None, "total optimizer steps (overrides epochs)"),
        "crop": (int, 64, "crop size (multiple of 16)"),
    },
    "infer": {
        "ckpt": (str, _REQ, "checkpoint directory"),
        "in": ("paths", _REQ, "four polarizer images (PFM)"),
        "camera": (str, None, "camera JSON, needed by the v encoding"),
        "viewing": (str, None, "viewing encoding (default: as trained)"),
        "out": (str, _REQ, "output normal map (PSFP)"),
    },
    "eval": {
        "pred": (str, _REQ, "predicted normals (PSFP)"),
        "gt": (str, _REQ, "ground-truth normals (PSFP)"),
        "format": (str, "table", "table or json"),
        "out": (str, None, "also write the JSON report here"),
    },
    "fresnel-table": {
        "eta": (float, 1.5, "refractive index"),
        "type": (str, "diffuse", "diffuse or specular"),
        "step": (float, 1.0, "angle step in degrees"),
        "max_angle": (float, 89.0, "largest angle in degrees"),
        "out": (str, None, "CSV path (default: stdout)"),
    },
}

CHOICES = {
    "mode": ("perspective", "orthographic"),
    "strategy": ("smoothness", "oracle"),
    "reflection": ("both", "diffuse", "specular"),
    "depth_format": ("png", "pfm"),
    "viewing": ("v", "vc", "vp", "none"),
    "variant": ("ours", "raw", "kondo"),
    "format": ("table", "json"),
    "type": ("diffuse", "specular"),
    "projection": ("perspective", "orthographic"),
}

# paths each subcommand reads (validated before any work)
INPUTS = {
    "decompose": ("in",), "synth": ("stokes",), "render": ("scene",), "solve": ("in", "camera", "gt"),
    "prep": ("depth_dir", "pol", "cams", "gray"), "encode-view": ("camera",), "train": ("data",),
    "infer": ("ckpt", "in", "camera"), "eval": ("pred", "gt"), "fresnel-table": (),
}


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def build_parser():
    parser = _Parser(prog="polarsfp", description="Shape-from-polarization toolkit.")
    parser.add_argument("--version", action="version", version=f"polarsfp {__version__}")
    parser.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    parser.add_argument("--threads", type=int, default=1, help="cap on numeric worker threads")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with option values")
        for key, (typ, default, help_) in opts.items():
            flag = "--" + key.replace("_", "-")
            kw = {"dest": key, "default": None, "help": help_}
            if typ == "paths":
                kw["nargs"] = "+"
            else:
                kw["type"] = typ
            if key in CHOICES:
                kw["choices"] = CHOICES[key]
            p.add_argument(flag, **kw)
    return parser


def resolve_options(command, args):
    """Merge flag > config file > default; reject unknown config keys."""
    opts = OPTIONS[command]
    file_values = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        with open(cfg_path) as fh:
            try:
                file_values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{cfg_path}: invalid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigurationError(f"{cfg_path}: top level must be an object")
        file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
        unknown = set(file_values) - set(opts)
        if unknown:
            raise ConfigurationError(f"unknown config keys for {command}: {sorted(unknown)}")
    out = {}
    for key, (typ, default, _) in opts.items():
        value = getattr(args, key)
        if value is None and key in file_values:
            value = file_values[key]
            if typ == "paths":
                value = [value] if isinstance(value, str) else list(value)
            elif value is not None:
                value = typ(value)
            if key in CHOICES and value is not None and value not in CHOICES[key]:
                raise ConfigurationError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
        if value is None:
            if default is _REQ:
                raise InputError(f"polarsfp {command}: --{key.replace('_', '-')} is required")
            value = default
        out[key] = value
    return out


def validate_paths(command, opts):
    for key in INPUTS[command]:
        value = opts.get(key)
        if value is None:
            continue
        for p in value if isinstance(value, list) else [value]:
            if not os.path.exists(p):
                raise FileNotFoundError(f"input not found: {p}")


# ---------------------------------------------------------------- helpers

ANGLE_RE = re.compile(r"(?<!\d)(0|45|90|135)(?!\d)")


def order_stack_paths(paths):
    """Put four polarizer files in 0/45/90/135 order when their names carry the angle.

    Shell globs sort stack_135 before stack_45; names without a unique angle
    token keep the order given.
    """
    if len(paths) != 4:
        raise ConfigurationError(f"expected 4 polarizer images, got {len(paths)}")
    angles = []
    for p in paths:
        found = ANGLE_RE.findall(Path(p).stem)
        angles.append(int(found[-1]) if found else None)
    if None not in angles and sorted(angles) == [0, 45, 90, 135]:
        return [p for _, p in sorted(zip(angles, paths))]
    return list(paths)


def load_stack(paths):
    from polarsfp.io import read_pfm
    from polarsfp.polar import PolarizerStack

    images = [read_pfm(p).astype(float) for p in order_stack_paths(paths)]
    shapes = {im.shape for im in images}
    if len(shapes) != 1 or images[0].ndim != 2:
        raise ConfigurationError(f"polarizer images must be single-channel and equal in size, got {shapes}")
    return PolarizerStack(np.stack(images))


def write_stack(directory, stack):
    from polarsfp.io import write_pfm

    for angle, image in zip((0, 45, 90, 135), stack.images):
        write_pfm(os.path.join(directory, f"stack_{angle}.pfm"), image.astype(np.float32))


def load_camera(path):
    from polarsfp.camera import load_cameras

    cam = load_cameras(path)
    if isinstance(cam, dict):
        if "polar" not in cam:
            raise ConfigurationError(f"{path}: expected a single camera or a 'polar' block")
        cam = cam["polar"]
    return cam


def load_normals(path):
    from polarsfp.io import read_psfp
    from polarsfp.scene import NormalMap

    arr = read_psfp(path)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigurationError(f"{path}: expected a [3, H, W] normal map, got {list(arr.shape)}")
    return NormalMap.from_array(arr)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_parent(path):
    parent = Path(path).parent
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {parent}")


# ---------------------------------------------------------------- commands

def cmd_decompose(o, seed):
    from polarsfp.io import write_psfp
    from polarsfp.polar import decompose

    _ensure_parent(o["out"])
    stokes = decompose(load_stack(o["in"]), o["rho_min"])
    write_psfp(o["out"], stokes.to_array())


def cmd_synth(o, seed):
    from polarsfp.io import read_psfp
    from polarsfp.polar import StokesMaps, synthesize

    stokes = StokesMaps.from_array(read_psfp(o["stokes"]))
    os.makedirs(o["out"], exist_ok=True)
    write_stack(o["out"], synthesize(stokes.i_un, stokes.rho, stokes.phi))


def cmd_render(o, seed):
    from polarsfp.io import write_pfm, write_psfp
    from polarsfp.scene import SyntheticScene, render_scene

    scene = SyntheticScene.load(o["scene"])
    r = render_scene(scene, o["projection"])
    os.makedirs(o["out"], exist_ok=True)
    write_stack(o["out"], r.stack)
    write_psfp(os.path.join(o["out"], "normals.psfp"), r.normals.to_array())
    write_pfm(os.path.join(o["out"], "depth.pfm"), r.depth.astype(np.float32))
    write_json(os.path.join(o["out"], "camera.json"), scene.camera.to_dict())


def cmd_solve(o, seed):
    from polarsfp.io import write_psfp
    from polarsfp.solver import solve
    from polarsfp.viewing import viewing_direction_map

    _ensure_parent(o["out"])
    stack = load_stack(o["in"])
    cam = load_camera(o["camera"])
    if cam.shape != stack.images.shape[1:]:
        raise ConfigurationError(f"camera size {cam.shape} does not match images {stack.images.shape[1:]}")
    gt = load_normals(o["gt"]) if o["gt"] else None
    if o["mode"] == "perspective":
        view = viewing_direction_map(cam).channels.transpose(1, 2, 0)
    else:
        view = np.broadcast_to(np.array([0.0, 0.0, 1.0]), cam.shape + (3,)).copy()
    normals = solve(stack, view, o["eta"], o["mode"], o["strategy"], gt=gt, reflection=o["reflection"],
                    rho_min=o["rho_min"])
    write_psfp(o["out"], normals.to_array())


def cmd_prep(o, seed):
    from polarsfp.camera import load_cameras
    from polarsfp.dataset import PrepConfig, load_depth_frames, prepare_ground_truth
    from polarsfp.io import read_pfm, write_psfp
    from polarsfp.polar import decompose
    from polarsfp.viewing import encode_view

    _ensure_parent(o["out"])
    if o["viewing"] != "none":
        if not o["viewing_out"]:
            raise ConfigurationError("--viewing needs --viewing-out")
        _ensure_parent(o["viewing_out"])
    cams = load_cameras(o["cams"])
    if not isinstance(cams, dict) or set(cams) != {"depth", "polar"}:
        raise ConfigurationError(f"{o['cams']}: needs both 'depth' and 'polar' cameras")
    frames = load_depth_frames(o["depth_dir"], o["depth_format"])
    stack = load_stack(o["pol"])
    i_un = decompose(stack).i_un
    gray = read_pfm(o["gray"]).astype(float) if o["gray"] else None
    cfg = PrepConfig(k_neighbors=o["k_neighbors"], max_range=o["max_range"], min_neighbors=o["min_neighbors"],
                     density_radius=o["density_radius"])
    normals, _, refine = prepare_ground_truth(frames, cams["depth"], cams["polar"], gray,
                                              i_un if gray is not None else None, cfg)
    if refine is not None and refine.status != "ok":
        print(f"warning: extrinsic refinement {refine.status}; initial extrinsics kept", file=sys.stderr)
    write_psfp(o["out"], normals.to_array())
    if o["viewing"] != "none":
        write_psfp(o["viewing_out"], encode_view(o["viewing"], cams["polar"]).channels)


def cmd_encode_view(o, seed):
    from polarsfp.io import write_psfp
    from polarsfp.viewing import encode_view

    _ensure_parent(o["out"])
    cam = load_camera(o["camera"])
    write_psfp(o["out"], encode_view(o["viewing"], cam, bands=o["bands"]).channels)


def _load_render_dir(d, viewing, variant, bands):
    from polarsfp.nn.train import network_input

    stack = load_stack([os.path.join(d, f"stack_{a}.pfm") for a in (0, 45, 90, 135)])
    cam = load_camera(os.path.join(d, "camera.json"))
    gt = load_normals(os.path.join(d, "normals.psfp"))
    return network_input(stack, cam, viewing, variant, bands), gt


def cmd_train(o, seed):
    from polarsfp.nn.model import ModelConfig, build_model, save_checkpoint
    from polarsfp.nn.train import TrainConfig, train
    from polarsfp.viewing import encoding_channels

    dirs = sorted(p for p in Path(o["data"]).iterdir() if (p / "normals.psfp").exists())
    if not dirs:
        raise ConfigurationError(f"no render directories with normals.psfp under {o['data']}")
    samples = [_load_render_dir(d, o["viewing"], o["variant"], o["bands"]) for d in dirs]
    in_ch = 8 + encoding_channels(o["viewing"], o["bands"])
    if o["variant"] == "kondo":
        in_ch -= 1
    mcfg = ModelConfig(width=o["width"], attention_blocks=o["attention_blocks"], heads=o["heads"],
                       in_channels=in_ch, input_size=o["crop"], seed=seed)
    tcfg = TrainConfig(lr=o["lr"], batch_size=o["batch_size"], epochs=o["epochs"], crop=o["crop"],
                       seed=seed, steps=o["steps"])
    model, curve = train(build_model(mcfg), samples, tcfg)
    steps = tcfg.steps if tcfg.steps is not None else tcfg.epochs * -(-len(samples) // tcfg.batch_size)
    extra = {"viewing": o["viewing"], "variant": o["variant"], "bands": o["bands"], "train": tcfg.to_dict()}
    save_checkpoint(model, o["out"], step=steps, extra=extra)
    write_json(os.path.join(o["out"], "loss_curve.json"), {"epoch_mean_loss": curve})


def cmd_infer(o, seed):
    from polarsfp.io import write_psfp
    from polarsfp.nn.model import load_checkpoint
    from polarsfp.nn.train import network_input, predict
    from polarsfp.scene import NormalMap

    _ensure_parent(o["out"])
    model, manifest = load_checkpoint(o["ckpt"])
    extra = manifest.get("extra", {})
    viewing = o["viewing"] or extra.get("viewing", "v")
    if o["viewing"] and extra.get("viewing") and o["viewing"] != extra["viewing"]:
        raise ConfigurationError(f"checkpoint was trained with --viewing {extra['viewing']}")
    stack = load_stack(o["in"])
    h, w = stack.images.shape[1:]
    if o["camera"]:
        cam = load_camera(o["camera"])
    elif viewing == "v":
        raise ConfigurationError("--viewing v needs --camera")
    else:
        from polarsfp.camera import CameraModel

        cam = CameraModel(1.0, 1.0, (w - 1) / 2, (h - 1) / 2, w, h)
    x = network_input(stack, cam, viewing, extra.get("variant", "ours"), extra.get("bands", 6))
    n = predict(model, x).astype(float).transpose(1, 2, 0)
    write_psfp(o["out"], NormalMap(n, np.ones((h, w), dtype=bool)).to_array())


def cmd_eval(o, seed):
    from polarsfp.metrics import angular_error_map, summarize

    report = summarize(*angular_error_map(load_normals(o["pred"]), load_normals(o["gt"])))
    if o["out"]:
        _ensure_parent(o["out"])
        with open(o["out"], "w") as fh:
            fh.write(report.to_json() + "\n")
    print(report.to_json() if o["format"] == "json" else report.to_table())


def cmd_fresnel_table(o, seed):
    from polarsfp.fresnel import fresnel_table

    rows = fresnel_table(o["eta"], o["type"], o["step"], o["max_angle"])
    lines = ["theta_v_deg,rho"] + [f"{t:.6f},{r:.12f}" for t, r in rows]
    text = "\n".join(lines) + "\n"
    if o["out"]:
        _ensure_parent(o["out"])
        with open(o["out"], "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "decompose": cmd_decompose, "synth": cmd_synth, "render": cmd_render, "solve": cmd_solve,
    "prep": cmd_prep, "encode-view": cmd_encode_view, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "fresnel-table": cmd_fresnel_table,
}


def _report(exc, code, as_json):
    if as_json:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise InputError(parser.format_usage().strip())
        if args.threads < 1:
            raise ConfigurationError("--threads must be positive")
        opts = resolve_options(args.command, args)
        validate_paths(args.command, opts)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads), np.errstate(invalid="ignore", divide="ignore"):
            COMMANDS[args.command](opts, args.seed)
    except SystemExit as exc:  # --version / --help
        return int(exc.code or 0)
    except (NumericalError, FloatingPointError) as exc:
        _report(exc, EXIT_NUMERIC, as_json)
        return EXIT_NUMERIC
    except (InputError, OSError, ValueError, KeyError) as exc:
        _report(exc, EXIT_INPUT, as_json)
        return EXIT_INPUT
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
