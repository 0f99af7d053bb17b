"""Shared builders for small synthetic problems used across the test modules."""

import json
from pathlib import Path

import numpy as np

from displayps.cli import main
from displayps.learning import PatternParams, TrainingEntry, forward
from displayps.lens import DistortionCoefficients, default_camera, save_camera
from displayps.scene import SCENE_KINDS, generate_scene, make_display_geometry, render_basis
from displayps.scene import AlbedoMap, PatternSet
from displayps.tensorfile import write_tensor
from displayps.stereo import CaptureSet, LightField, light_directions, solve_normals


def small_instance(seed: int, *, res: int = 16, collinear: bool = False, K: int | None = None):
    """A random (params, entry, noise) triple with b <= 8, K <= 3 and res x res pixels."""
    rng = np.random.default_rng(seed)
    if collinear:
        rows, cols = int(rng.integers(2, 9)), 1
    else:
        rows, cols = int(rng.integers(2, 5)), 2
    display = make_display_geometry(rows, cols, 0.062, 0.134, (0.0, 0.072, 0.0))
    camera = default_camera(res)
    kind = SCENE_KINDS[seed % len(SCENE_KINDS)]
    amplitude = 0.0 if kind == "plane" else 0.02
    scene = generate_scene(kind, res, 0.10, amplitude, seed=seed)
    entry = TrainingEntry(render_basis(scene, display), scene.gt_normals, light_directions(display, camera))
    K = K or int(rng.integers(2, 4))
    params = PatternParams(rng.normal(size=(K, display.b, 3)), (rows, cols))
    noise = 0.01 * entry.radiance_scale * rng.standard_normal((K, res, res, 3))
    return params, entry, noise


def central_difference(params, entry, noise, h: float = 1e-4, **kwargs) -> np.ndarray:
    """Elementwise central finite-difference gradient of the forward loss."""
    fd = np.zeros_like(params.logits)
    for idx in np.ndindex(fd.shape):
        plus = params.logits.copy()
        plus[idx] += h
        minus = params.logits.copy()
        minus[idx] -= h
        fp = forward(PatternParams(plus, params.grid), entry, noise, **kwargs)[0]
        fm = forward(PatternParams(minus, params.grid), entry, noise, **kwargs)[0]
        fd[idx] = (fp - fm) / (2 * h)
    return fd


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    big = np.abs(analytic) > floor
    if not np.any(big):
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[big] / np.abs(analytic[big])))


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def fd_instances():
    """The 20 seeded gradient-check cases: (seed, collinear, albedo_mode, damping)."""
    cases = []
    for seed in range(20):
        collinear = seed % 5 == 4
        mode = "channel" if seed % 2 else "scalar"
        damping = 1e-3 if collinear else 0.0
        cases.append((seed, collinear, mode, damping))
    return cases


SPHERE = fibonacci_sphere(100_000)


def single_pixel(P, lights, I, rho=1.0, **kwargs):
    """Solve one pixel given patterns (K, b, 3), lights (b, 3) and captures (K, 3)."""
    K = P.shape[0]
    captures = CaptureSet(np.asarray(I, dtype=float).reshape(K, 1, 1, 3), PatternSet.unchecked(P))
    albedo = AlbedoMap(np.full((1, 1, 3), rho))
    return solve_normals(captures, PatternSet.unchecked(P), LightField(np.asarray(lights)[None, None]), albedo,
                         **kwargs)


def well_conditioned_system(rng, max_cond=20.0, K=4, b=8):
    """Random physical single-pixel system (all lights in front of the surface) with cond(A) < max_cond."""
    while True:
        n = rng.normal(size=3)
        n[2] = -abs(n[2]) - 1.0
        n /= np.linalg.norm(n)
        lights = rng.normal(scale=0.6, size=(b, 3))
        lights[:, 2] = -1.0
        lights /= np.linalg.norm(lights, axis=1, keepdims=True)
        if np.any(lights @ n <= 0):
            continue
        P = rng.random((K, b, 3))
        A = np.einsum("ijc,jd->icd", P, lights).reshape(-1, 3)
        if np.linalg.cond(A) < max_cond:
            return P, lights, n, A


def grid_residuals(A, I):
    AD = SPHERE @ A.T  # (M, 3K)
    scale = np.clip((AD @ I) / np.einsum("ij,ij->i", AD, AD), 0, None)
    return np.linalg.norm(scale[:, None] * AD - I, axis=1)


def brute_force_normal(A, I):
    """Grid direction whose best non-negative scaling explains ``I`` with the least residual."""
    return SPHERE[np.argmin(grid_residuals(A, I))]


def angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b), -1, 1)))


# ---------------------------------------------------------------- CLI runs

SMALL_CLI_CONFIG = {
    "resolution": 12,
    "scenes": [{"kind": "plane"}, {"kind": "sphere_cap", "amplitude": 0.02}],
    "schedule": {"epochs": 3, "alpha": 2},
}


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def write_config(path: Path, doc: dict) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


def tree(root: Path) -> dict:
    """Relative path -> bytes for every file below ``root``."""
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def hdr_inputs(directory: Path):
    """Three clipped exposures of a known radiance map plus their manifest ``m.json``."""
    rng = np.random.default_rng(0)
    radiance = 50 * 10 ** rng.uniform(-2, 0, size=(6, 5))
    frames = []
    for i, t in enumerate((1 / 200, 1 / 50, 1 / 12.5)):
        write_tensor(directory / f"f{i}.dmdt", np.clip(radiance * t, 0, 1))
        frames.append({"path": f"f{i}.dmdt", "exposure_s": t})
    (directory / "m.json").write_text(json.dumps({"frames": frames}))
    return radiance


def _every_command(out: Path, cfg: str, inputs: Path) -> dict:
    assert run_cli("render", "--config", cfg, "--out", out) == 0
    assert run_cli("reconstruct", "--config", cfg, "--out", out, "--scenes", out / "scenes") == 0
    assert run_cli("learn", "--config", cfg, "--out", out) == 0
    assert run_cli("sweep", "--axis", "family", "--config", cfg, "--out", out) == 0
    assert run_cli("sweep", "--axis", "alpha", "--config", cfg, "--out", out, "--threads", 2) == 0
    assert run_cli("merge-hdr", inputs / "m.json", "--out", out / "hdr") == 0
    assert run_cli("undistort", inputs / "img.dmdt", "--config", cfg, "--out", out / "und") == 0
    return tree(out)


def rerun_every_command(tmp_path: Path):
    """Run each command twice from identical inputs; returns both output trees."""
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    save_camera(default_camera(12, DistortionCoefficients(k1=-0.2, p1=0.01)), inputs / "cam.json")
    doc = SMALL_CLI_CONFIG | {"camera": str(inputs / "cam.json"), "schedule": {"epochs": 2},
                              "sweep": {"families": ["mono_gradient", "tri_gradient"], "alphas": [1, 2],
                                        "alpha_families": ["olat", "mono_random"]}}
    cfg = write_config(inputs / "c.json", doc)
    hdr_inputs(inputs)
    write_tensor(inputs / "img.dmdt", np.random.default_rng(1).random((12, 12, 3)))
    return _every_command(tmp_path / "a", cfg, inputs), _every_command(tmp_path / "b", cfg, inputs)
