"""Command-line entry point: ``displayps <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import ConfigError, load_config, schema_json
from .learning import FAMILY_K, OptimizerSchedule, TrainingEntry, TrainingSet, init_patterns, learn
from .lens import CameraModel, default_camera, load_camera, save_camera, undistort_image
from .pipeline import (ReconstructionSettings, SceneBundle, SensorSettings, reconstruct, render_bundle)
from .report import alpha_table, family_table
from .scene import AlbedoMap, BasisStack, NormalMap, PatternSet, SceneMesh, make_display_geometry
from .sensor import ExposureStack, WeightFunction, merge_hdr
from .stereo import light_directions
from .tensorfile import read_tensor, write_tensor

logger = logging.getLogger("displayps")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PNG_CELL = 32  # pixels per superpixel in exported pattern images


class CommandError(RuntimeError):
    """Runtime failure reported to the user without a traceback."""


# --------------------------------------------------------------------------- PNG export

def normals_to_rgb(normals: np.ndarray) -> np.ndarray:
    """Map unit normals to 8-bit RGB; a camera-facing normal (0, 0, -1) becomes (128, 128, 255)."""
    rgb = np.stack([(normals[..., 0] + 1) / 2, (normals[..., 1] + 1) / 2, (1 - normals[..., 2]) / 2], axis=-1)
    return np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def albedo_to_rgb(albedo: np.ndarray):
    """Scale albedo so its maximum maps to 255; returns ``(image, scale)``."""
    peak = float(albedo.max())
    scale = 1.0 / peak if peak > 0 else 1.0
    return np.rint(np.clip(albedo * scale, 0, 1) * 255).astype(np.uint8), scale


def pattern_to_rgb(pattern: np.ndarray, rows: int, cols: int, cell: int = PNG_CELL) -> np.ndarray:
    grid = pattern.reshape(rows, cols, 3)
    big = np.repeat(np.repeat(grid, cell, axis=0), cell, axis=1)
    return np.rint(np.clip(big, 0, 1) * 255).astype(np.uint8)


def save_png(path: Path, rgb: np.ndarray) -> None:
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(np.ascontiguousarray(rgb)).save(path, format="PNG", optimize=False, compress_level=6)


# --------------------------------------------------------------------------- helpers

def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror}") from exc


def _display(cfg):
    d = cfg["display"]
    return make_display_geometry(d["rows"], d["cols"], d["width_m"], d["height_m"], tuple(d["offset"]))


def _camera(cfg) -> CameraModel:
    if cfg["camera"] is None:
        return default_camera(cfg["resolution"])
    try:
        cam = load_camera(cfg["camera"])
    except OSError as exc:
        raise CommandError(f"cannot read camera {cfg['camera']}: {exc.strerror}") from exc
    if (cam.height, cam.width) != (cfg["resolution"], cfg["resolution"]):
        raise CommandError(f"camera is {cam.width}x{cam.height} but resolution is {cfg['resolution']}")
    return cam


def _sensor(cfg):
    s = cfg["sensor"]
    if not s["enabled"]:
        return None
    return SensorSettings(tuple(s["exposures"]), s["read_sigma"], s["quantization_bits"], s["weight"],
                          s["clip_margin"], s["headroom"], s["reference_exposure"], s["denoise_sigma"])


def _recon_settings(cfg) -> ReconstructionSettings:
    r = cfg["reconstruction"]
    return ReconstructionSettings(_sensor(cfg), r["undistort"], r["plane_depth"], r["albedo_mode"], r["damping"])


def _scene_name(index: int, scene_cfg: dict) -> str:
    return f"{index:02d}_{scene_cfg['kind']}"


def _render_all(cfg):
    display = _display(cfg)
    camera = _camera(cfg)
    bundles = {}
    for i, scene_cfg in enumerate(cfg["scenes"]):
        bundles[_scene_name(i, scene_cfg)] = render_bundle(
            scene_cfg["kind"], resolution=cfg["resolution"], amplitude=scene_cfg.get("amplitude", 0.0),
            seed=scene_cfg.get("seed", 0), base_depth=cfg["base_depth"], display=display, camera=camera,
            falloff=cfg["falloff"], ambient_fraction=cfg["ambient"])
    return bundles


def _write_scene(directory: Path, bundle: SceneBundle, scene_cfg: dict, cfg) -> None:
    _mkdir(directory)
    scene = bundle.scene
    meta = {"kind": scene_cfg["kind"], "seed": scene_cfg.get("seed", 0), "amplitude": scene_cfg.get("amplitude", 0.0),
            "ambient_level": scene.ambient_level, "falloff": cfg["falloff"]}
    write_tensor(directory / "depth.dmdt", scene.height_field, meta)
    write_tensor(directory / "basis.dmdt", bundle.basis.values, meta)
    write_tensor(directory / "basis_valid.dmdt", bundle.basis.valid_mask.astype(np.float32))
    write_tensor(directory / "gt_normals.dmdt", scene.gt_normals.values)
    write_tensor(directory / "gt_albedo.dmdt", scene.gt_albedo.values)
    lights = light_directions(bundle.display, scene.camera, cfg["reconstruction"]["plane_depth"])
    write_tensor(directory / "lights.dmdt", lights.directions)
    save_camera(bundle.camera, directory / "camera.json")
    _write_text(directory / "display.json", json.dumps(cfg["display"], indent=2, sort_keys=True) + "\n")
    save_png(directory / "gt_normals.png", normals_to_rgb(scene.gt_normals.values))


def _load_scene(directory: Path) -> SceneBundle:
    try:
        basis, _ = read_tensor(directory / "basis.dmdt")
        valid, _ = read_tensor(directory / "basis_valid.dmdt")
        depth, meta = read_tensor(directory / "depth.dmdt")
        normals, _ = read_tensor(directory / "gt_normals.dmdt")
        albedo, _ = read_tensor(directory / "gt_albedo.dmdt")
        camera = load_camera(directory / "camera.json")
        d = json.loads((directory / "display.json").read_text())
    except OSError as exc:
        raise CommandError(f"incomplete scene directory {directory}: {exc}") from exc
    display = make_display_geometry(d["rows"], d["cols"], d["width_m"], d["height_m"], tuple(d["offset"]))
    if basis.shape[0] != display.b or basis.shape[1:3] != (camera.height, camera.width):
        raise CommandError(f"{directory}: basis {basis.shape} inconsistent with camera/display")
    if normals.shape[:2] != basis.shape[1:3]:
        raise CommandError(f"{directory}: ground truth {normals.shape} inconsistent with basis {basis.shape}")
    pinhole = CameraModel(camera.f, camera.px, camera.py, camera.width, camera.height)
    norms = np.linalg.norm(normals.astype(np.float64), axis=-1, keepdims=True)
    scene = SceneMesh(depth.astype(np.float64), NormalMap(normals / norms), AlbedoMap(albedo.astype(np.float64)),
                      float(meta.get("ambient_level", 0.0)), pinhole)
    return SceneBundle(scene, camera, display, BasisStack(basis.astype(np.float64), valid > 0.5))


def _scenes(cfg, scenes_dir):
    if scenes_dir is None:
        return _render_all(cfg)
    root = Path(scenes_dir)
    dirs = sorted(p for p in root.iterdir() if (p / "basis.dmdt").exists()) if root.is_dir() else []
    if not dirs:
        raise CommandError(f"no rendered scenes found under {root}")
    return {p.name: _load_scene(p) for p in dirs}


def _training_set(bundles, plane_depth) -> TrainingSet:
    return TrainingSet([
        TrainingEntry(b.basis, b.scene.gt_normals, light_directions(b.display, b.scene.camera, plane_depth))
        for b in bundles.values()
    ])


def _mean_error(bundles, patterns: PatternSet, settings, seed: int) -> float:
    errors = [reconstruct(b.basis, patterns, b.camera, b.display, b.scene.gt_normals, settings, seed + i).mean_error
              for i, b in enumerate(bundles.values())]
    return float(np.mean(errors))


def _learn(cfg, bundles, family: str, K: int, alpha: int, seed: int):
    s, l = cfg["schedule"], cfg["learning"]
    display = next(iter(bundles.values())).display
    schedule = OptimizerSchedule(lr0=s["lr0"], alpha=alpha, decay=s["decay"], epochs=s["epochs"])
    train = _training_set(bundles, cfg["reconstruction"]["plane_depth"])
    return learn(train, family, K, display, schedule, l["smooth_sigma"], seed, noise_sigma=l["noise_sigma"],
                 albedo_mode=l["albedo_mode"], damping=l["damping"], init_jitter=l["init_jitter"])


def _write_patterns(directory: Path, patterns: PatternSet, display, meta: dict, stem: str = "pattern") -> None:
    write_tensor(directory / f"{stem}s.dmdt", patterns.values, meta)
    for i, p in enumerate(patterns.values):
        save_png(directory / f"{stem}_{i:02d}.png", pattern_to_rgb(p, display.rows, display.cols))


# --------------------------------------------------------------------------- commands

def cmd_render(args, cfg) -> int:
    out = _mkdir(Path(cfg["output_dir"]) / "scenes")
    for (name, bundle), scene_cfg in zip(_render_all(cfg).items(), cfg["scenes"]):
        _write_scene(out / name, bundle, scene_cfg, cfg)
        print(f"rendered {name}")
    return EXIT_OK


def cmd_reconstruct(args, cfg) -> int:
    bundles = _scenes(cfg, args.scenes)
    if args.patterns:
        values, _ = read_tensor(args.patterns)
        patterns = PatternSet(values.astype(np.float64))
    else:
        p = cfg["patterns"]
        display = next(iter(bundles.values())).display
        patterns = init_patterns(p["family"], p["K"], display, cfg["seed"]).patterns
    for name, b in bundles.items():
        if patterns.b != b.basis.b:
            raise CommandError(f"patterns have b={patterns.b} but scene {name} has b={b.basis.b}")
    settings = _recon_settings(cfg)
    results = {name: reconstruct(b.basis, patterns, b.camera, b.display, b.scene.gt_normals, settings,
                                 cfg["seed"] + i)
               for i, (name, b) in enumerate(bundles.items())}
    out = _mkdir(Path(cfg["output_dir"]) / "reconstruct")
    lines = ["scene,mean_error"]
    for name, r in results.items():
        d = _mkdir(out / name)
        write_tensor(d / "normals.dmdt", r.normals.values)
        write_tensor(d / "normals_valid.dmdt", r.normals.valid_mask.astype(np.float32))
        rgb, scale = albedo_to_rgb(r.albedo.values)
        write_tensor(d / "albedo.dmdt", r.albedo.values, {"png_scale": scale})
        write_tensor(d / "error.dmdt", np.nan_to_num(r.error_map, nan=0.0), {"mean_error": r.mean_error})
        save_png(d / "normals.png", normals_to_rgb(r.normals.values))
        save_png(d / "albedo.png", rgb)
        lines.append(f"{name},{r.mean_error!r}")
        print(f"{name}: mean angular error {r.mean_error:.6g}")
    mean = float(np.mean([r.mean_error for r in results.values()]))
    lines.append(f"mean,{mean!r}")
    _write_text(out / "metrics.csv", "\n".join(lines) + "\n")
    print(f"mean angular error {mean:.6g}")
    return EXIT_OK


def cmd_learn(args, cfg) -> int:
    bundles = _scenes(cfg, args.scenes)
    family = args.family or cfg["patterns"]["family"]
    K = args.K or cfg["patterns"]["K"]
    patterns, history = _learn(cfg, bundles, family, K, cfg["schedule"]["alpha"], cfg["seed"])
    display = next(iter(bundles.values())).display
    out = _mkdir(Path(cfg["output_dir"]) / "learn")
    meta = {"family": family, "K": K, "rows": display.rows, "cols": display.cols, "best_epoch": history.best_epoch}
    _write_patterns(out, patterns, display, meta)
    init = init_patterns(family, K, display, cfg["seed"]).patterns
    write_tensor(out / "initial_patterns.dmdt", init.values, meta)
    _write_text(out / "history.csv", history.to_csv())
    print(f"learned {K} {family} patterns; training loss {history.mean_loss[0] if history.mean_loss else float('nan'):.6g}"
          f" -> {history.final_loss:.6g}")
    return EXIT_OK


def _sweep_cell(cfg, bundles, family, K, alpha, directory: Path):
    settings = _recon_settings(cfg)
    display = next(iter(bundles.values())).display
    initial = _mean_error(bundles, init_patterns(family, K, display, cfg["seed"]).patterns, settings, cfg["seed"])
    patterns, history = _learn(cfg, bundles, family, K, alpha, cfg["seed"])
    learned = _mean_error(bundles, patterns, settings, cfg["seed"])
    _mkdir(directory)
    write_tensor(directory / "patterns.dmdt", patterns.values, {"family": family, "K": K, "alpha": alpha})
    _write_text(directory / "history.csv", history.to_csv())
    return initial, learned


def cmd_sweep(args, cfg) -> int:
    bundles = _scenes(cfg, args.scenes)
    sweep = cfg["sweep"]
    root = _mkdir(Path(cfg["output_dir"]) / "sweep" / args.axis)
    if args.axis == "alpha":
        cells = [(f, cfg["patterns"]["K"], a) for f in sweep["alpha_families"] for a in sweep["alphas"]]
    else:
        cells = [(f, FAMILY_K[f], cfg["schedule"]["alpha"]) for f in sweep["families"]]

    def run(cell):
        family, K, alpha = cell
        try:
            return _sweep_cell(cfg, bundles, family, K, alpha, root / f"{family}_K{K}_alpha{alpha}")
        except Exception as exc:  # a failed cell must not stop the sweep
            logger.error("cell %s K=%d alpha=%d failed: %s", family, K, alpha, exc)
            return exc

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        outcomes = list(pool.map(run, cells))
    failures = [(c, o) for c, o in zip(cells, outcomes) if isinstance(o, Exception)]
    values = {c: (o if not isinstance(o, Exception) else (math.nan, math.nan)) for c, o in zip(cells, outcomes)}
    if args.axis == "alpha":
        errors = {(f, a): values[(f, K, a)][1] for f, K, a in cells}
        table = alpha_table(sweep["alpha_families"], sweep["alphas"], errors)
    else:
        table = family_table([(f, K, *values[(f, K, a)]) for f, K, a in cells])
    _write_text(root / "report.csv", table.to_csv())
    _write_text(root / "report.md", table.to_markdown())
    if failures:
        _write_text(root / "failures.csv", "family,K,alpha,error\n" + "".join(
            f"{f},{K},{a},{type(e).__name__}: {e}\n" for (f, K, a), e in failures))
    print(table.to_markdown(), end="")
    return EXIT_OK if not failures else EXIT_RUNTIME


def cmd_merge_hdr(args, cfg) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read manifest {manifest_path}: {exc}") from exc
    frames = manifest.get("frames") if isinstance(manifest, dict) else None
    if not frames:
        raise CommandError("manifest needs a non-empty 'frames' list")
    stack = []
    for entry in frames:
        if set(entry) != {"path", "exposure_s"}:
            raise CommandError(f"manifest frame entries need exactly 'path' and 'exposure_s', got {sorted(entry)}")
        image, _ = read_tensor(manifest_path.parent / entry["path"])
        stack.append((image.astype(np.float64), float(entry["exposure_s"])))
    s = cfg["sensor"]
    merged = merge_hdr(ExposureStack(stack), WeightFunction(s["weight"], s["clip_margin"]))
    out = _mkdir(Path(cfg["output_dir"]))
    write_tensor(out / "merged.dmdt", merged.values, {"exposures": [t for _, t in stack]})
    write_tensor(out / "saturated.dmdt", merged.saturated_mask.astype(np.float32))
    print(f"merged {len(stack)} frames; {int(merged.saturated_mask.sum())} pixels flagged")
    return EXIT_OK


def cmd_undistort(args, cfg) -> int:
    camera = load_camera(args.camera) if args.camera else _camera(cfg)
    image, meta = read_tensor(args.image)
    out_img, valid = undistort_image(camera, image.astype(np.float64), nearest=args.nearest)
    out = _mkdir(Path(cfg["output_dir"]))
    write_tensor(out / "undistorted.dmdt", out_img, meta)
    write_tensor(out / "undistorted_valid.dmdt", valid.astype(np.float32))
    print(f"undistorted {image.shape[1]}x{image.shape[0]} image; {int((~valid).sum())} pixels fell outside")
    return EXIT_OK


def cmd_schema(args, cfg) -> int:
    sys.stdout.write(schema_json())
    return EXIT_OK


# --------------------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment configuration JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the configured seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="override the output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="parallel sweep cells")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="displayps", parents=[common],
                                     description="Display photometric stereo simulation and pattern learning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("render", parents=[common], help="render scenes, basis stacks and ground truth")

    p = sub.add_parser("reconstruct", parents=[common], help="simulate captures and reconstruct normals")
    p.add_argument("--scenes", help="directory written by 'render' (default: render in memory)")
    p.add_argument("--patterns", help="pattern tensor (K x b x 3); default: configured initial family")

    p = sub.add_parser("learn", parents=[common], help="learn display patterns")
    p.add_argument("--scenes", help="directory written by 'render' (default: render in memory)")
    p.add_argument("--family", choices=sorted(FAMILY_K), help="initial pattern family")
    p.add_argument("--K", type=int, help="number of patterns")

    p = sub.add_parser("sweep", parents=[common], help="learn and evaluate over a grid, write a report")
    p.add_argument("--axis", choices=["alpha", "family"], required=True)
    p.add_argument("--scenes", help="directory written by 'render' (default: render in memory)")

    p = sub.add_parser("merge-hdr", parents=[common], help="merge an exposure stack described by a manifest")
    p.add_argument("manifest", help="JSON with frames: [{path, exposure_s}]")

    p = sub.add_parser("undistort", parents=[common], help="undistort an image tensor")
    p.add_argument("image", help="tensor file (H x W [x C])")
    p.add_argument("--camera", help="camera JSON (default: configured camera)")
    p.add_argument("--nearest", action="store_true", help="nearest-neighbour instead of bilinear sampling")

    sub.add_parser("schema", parents=[common], help="print the configuration JSON schema")
    return parser


COMMANDS = {
    "render": cmd_render,
    "reconstruct": cmd_reconstruct,
    "learn": cmd_learn,
    "sweep": cmd_sweep,
    "merge-hdr": cmd_merge_hdr,
    "undistort": cmd_undistort,
    "schema": cmd_schema,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("threads", 1), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["output_dir"] = args.out
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"displayps: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except (CommandError, ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"displayps: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
