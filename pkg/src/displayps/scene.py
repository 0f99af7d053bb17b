"""Shared domain types, display geometry and synthetic scene/basis generation.

Coordinates are in the camera frame: the camera sits at the origin looking
along +z, the display lies in the z=0 plane and the scene at z>0. Surface
normals therefore point toward the camera with n_z < 0.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .lens import CameraModel, default_camera, invert_distortion, pixel_grid, sample_bilinear
from .sensor import gaussian_filter

logger = logging.getLogger(__name__)

SCENE_KINDS = ("plane", "sphere_cap", "perlin_heightfield", "leaf_heightfield")

# 6.1" 19.5:9 phone held in portrait, front camera just above the top edge
DEFAULT_DISPLAY = dict(rows=8, cols=4, width_m=0.062, height_m=0.134, offset=(0.0, 0.072, 0.0))


@dataclass(frozen=True)
class DisplayGeometry:
    rows: int
    cols: int
    superpixel_centers: np.ndarray  # (b, 3) metres, row-major
    emitted_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        centers = np.asarray(self.superpixel_centers, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "superpixel_centers", centers)
        if self.rows * self.cols != len(centers):
            raise InvalidArgumentError("rows * cols must equal the number of superpixel centers")

    @property
    def b(self) -> int:
        return self.rows * self.cols


@dataclass
class PatternSet:
    values: np.ndarray  # (K, b, 3), intensities in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise InvalidArgumentError(f"patterns must be (K, b, 3), got {self.values.shape}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise InvalidArgumentError("pattern intensities must lie in [0, 1]")

    @classmethod
    def unchecked(cls, values) -> "PatternSet":
        """Wrap intensities without the [0, 1] check (for linearity experiments)."""
        obj = object.__new__(cls)
        obj.values = np.asarray(values, dtype=np.float64)
        return obj

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def b(self) -> int:
        return self.values.shape[1]


@dataclass
class BasisStack:
    values: np.ndarray  # (b, H, W, 3)
    valid_mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape[1:3], dtype=bool)

    @property
    def b(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape[1:3]


@dataclass
class NormalMap:
    values: np.ndarray  # (H, W, 3)
    valid_mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape[:2], dtype=bool)


@dataclass
class AlbedoMap:
    values: np.ndarray  # (H, W, 3)
    valid_mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape[:2], dtype=bool)


@dataclass
class SceneMesh:
    height_field: np.ndarray  # (H, W) depth along +z in metres
    gt_normals: NormalMap
    gt_albedo: AlbedoMap
    ambient_level: float = 0.0
    camera: CameraModel = None

    def __post_init__(self):
        if self.camera is None:
            H, W = self.height_field.shape
            self.camera = CameraModel(f=float(W), px=W / 2.0, py=H / 2.0, width=W, height=H)

    @property
    def shape(self):
        return self.height_field.shape


def make_display_geometry(rows: int, cols: int, width_m: float, height_m: float, offset=(0.0, 0.0, 0.0)) -> DisplayGeometry:
    """Regular grid of superpixel cell midpoints in the z=0 plane, shifted by ``offset``."""
    if rows < 1 or cols < 1:
        raise InvalidArgumentError("rows and cols must be >= 1")
    if width_m <= 0 or height_m <= 0:
        raise InvalidArgumentError("display width and height must be positive")
    xs = (np.arange(cols) + 0.5) * (width_m / cols) - width_m / 2
    ys = (np.arange(rows) + 0.5) * (height_m / rows) - height_m / 2
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([xx.ravel(), yy.ravel(), np.zeros(rows * cols)], axis=1)
    return DisplayGeometry(rows, cols, centers + np.asarray(offset, dtype=np.float64))


def default_display() -> DisplayGeometry:
    return make_display_geometry(**DEFAULT_DISPLAY)


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin(shape, cells: int, rng: np.random.Generator) -> np.ndarray:
    """Gradient noise over ``shape`` with ``cells`` lattice cells across the longer side."""
    H, W = shape
    angles = rng.uniform(0, 2 * np.pi, size=(cells + 2, cells + 2))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    scale = cells / max(H, W)
    y, x = np.meshgrid((np.arange(H) + 0.5) * scale, (np.arange(W) + 0.5) * scale, indexing="ij")
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = x - x0, y - y0

    def corner(dx, dy):
        g = grads[y0 + dy, x0 + dx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(1, 0) * u
    bottom = corner(0, 1) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bottom * v


def fractal_noise(shape, seed: int, cells: int = 3, octaves: int = 3, persistence: float = 0.5) -> np.ndarray:
    """Seeded fractal gradient noise normalized to max |value| = 1."""
    rng = np.random.default_rng(seed)
    total = np.zeros(shape)
    amp = 1.0
    for octave in range(octaves):
        total += amp * _perlin(shape, cells * 2 ** octave, rng)
        amp *= persistence
    peak = np.max(np.abs(total))
    return total / peak if peak > 0 else total


def normals_from_depth(depth: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Per-pixel unit normals from a depth map via central differences of back-projected points."""
    u, v = pixel_grid(camera)
    xn = (u - camera.px) / camera.f
    yn = (v - camera.py) / camera.f
    points = depth[..., None] * np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    # np.gradient: central differences inside, one-sided at the borders
    du = np.gradient(points, axis=1)
    dv = np.gradient(points, axis=0)
    n = np.cross(du, dv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(n[..., 2:3] > 0, -n, n)


def _sphere_cap_depth(camera: CameraModel, base_depth: float, amplitude: float) -> np.ndarray:
    u, v = pixel_grid(camera)
    d = np.stack([(u - camera.px) / camera.f, (v - camera.py) / camera.f, np.ones_like(u)], axis=-1)
    depth = np.full(u.shape, base_depth)
    if amplitude <= base_depth * np.finfo(np.float64).eps:  # below depth resolution; also keeps R^2 finite
        return depth
    half_view = 0.5 * min(camera.width, camera.height) / camera.f * base_depth
    a = 0.6 * half_view  # footprint radius on the base plane
    h = amplitude
    R = (a * a + h * h) / (2 * h)
    # ray t * d against the sphere centred at (0, 0, top + R); written without the
    # R^2 - R^2 cancellations that break very flat caps (R >> top)
    top = base_depth - h
    q = d[..., 0] ** 2 + d[..., 1] ** 2
    zc = top + R
    power = top * (top + 2 * R)  # |c|^2 - R^2
    disc = R * R - q * power
    hit = disc >= 0
    t = power / (zc + np.sqrt(np.where(hit, disc, 0.0)))  # nearer root
    return np.where(hit & (t < base_depth), t, base_depth)


def _leaf(camera: CameraModel, base_depth: float, amplitude: float, rng: np.random.Generator):
    u, v = pixel_grid(camera)
    X = (u - camera.px) / camera.f * base_depth
    Y = (v - camera.py) / camera.f * base_depth
    half_view = 0.5 * min(camera.width, camera.height) / camera.f * base_depth
    theta = rng.uniform(0, np.pi)
    length = 0.8 * half_view
    width = 0.38 * half_view
    s = (X * np.cos(theta) + Y * np.sin(theta)) / length
    t = (-X * np.sin(theta) + Y * np.cos(theta)) / width
    inside_s = np.abs(s) < 1
    half_width = np.where(inside_s, np.sin(np.pi * (np.clip(s, -1, 1) + 1) / 2) ** 0.9 * (1 - 0.25 * s), 0.0)
    rel = np.where(half_width > 1e-6, np.abs(t) / np.maximum(half_width, 1e-6), 2.0)
    inside = inside_s & (rel < 1)
    edge = np.clip((1 - rel) / 0.2, 0, 1)
    edge = edge * edge * (3 - 2 * edge)
    body = (1 - rel ** 2).clip(0) * 0.6 + 0.25 * s ** 2
    midrib = 0.15 * np.exp(-(t * width / (0.04 * width)) ** 2)
    vein_phase = (s - 0.7 * np.abs(t)) * rng.uniform(3.5, 5.0)
    veins = 0.08 * np.cos(np.pi * vein_phase) ** 16
    height = np.where(inside, edge * (body + midrib + veins), 0.0)
    peak = height.max()
    if peak > 0:
        height *= amplitude / peak
    albedo = np.empty(u.shape + (3,))
    albedo[:] = (0.5, 0.5, 0.5)
    tone = np.array([0.55, 0.32, 0.10]) * rng.uniform(0.85, 1.15, size=3)
    vein_tone = np.clip(tone * 1.35, 0, 1)
    vein_mix = np.clip(veins / 0.08 + midrib / 0.15, 0, 1)[..., None]
    leaf_color = tone * (1 - vein_mix) + vein_tone * vein_mix
    albedo = np.where(inside[..., None], leaf_color, albedo)
    return height, albedo


def generate_scene(kind: str, resolution: int = 64, base_depth: float = 0.10, amplitude: float = 0.0,
                   seed: int = 0, camera: CameraModel | None = None, ambient_level: float = 0.0) -> SceneMesh:
    """Build a synthetic Lambertian scene as a depth map seen by ``camera``.

    Depths lie in ``[base_depth - amplitude, base_depth]``; ground-truth
    normals come from central differences of the back-projected depth map.
    """
    if kind not in SCENE_KINDS:
        raise InvalidArgumentError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if resolution < 2:
        raise InvalidArgumentError("resolution must be >= 2")
    if base_depth <= 0:
        raise InvalidArgumentError("base_depth must be positive")
    if amplitude < 0:
        raise InvalidArgumentError("amplitude must be >= 0")
    if amplitude >= base_depth:
        raise InvalidArgumentError("amplitude must be smaller than base_depth")
    if camera is None:
        camera = default_camera(resolution)
    shape = (camera.height, camera.width)
    rng = np.random.default_rng(seed)

    if kind == "plane":
        depth = np.full(shape, base_depth)
        albedo = np.ones(shape + (3,))
    elif kind == "sphere_cap":
        depth = _sphere_cap_depth(camera, base_depth, amplitude)
        on_cap = depth < base_depth
        # light object on a dark matte backdrop
        albedo = np.where(on_cap[..., None], np.array([0.8, 0.72, 0.62]), np.array([0.1, 0.1, 0.1]))
    elif kind == "perlin_heightfield":
        noise = fractal_noise(shape, int(rng.integers(2 ** 31)))
        depth = base_depth - amplitude * 0.5 * (noise + 1)
        tint = fractal_noise(shape, int(rng.integers(2 ** 31)), cells=2, octaves=2)
        albedo = np.array([0.7, 0.6, 0.5]) * (1 + 0.25 * tint[..., None] * np.array([1.0, 0.6, -0.4]))
    else:
        height, albedo = _leaf(camera, base_depth, amplitude, rng)
        depth = base_depth - gaussian_filter(height, 1.0)

    normals = normals_from_depth(depth, camera)
    return SceneMesh(
        height_field=depth,
        gt_normals=NormalMap(normals),
        gt_albedo=AlbedoMap(np.clip(albedo, 0, None)),
        ambient_level=float(ambient_level),
        camera=camera,
    )


def render_basis(scene: SceneMesh, display: DisplayGeometry, camera: CameraModel | None = None,
                 falloff: bool = True) -> BasisStack:
    """Render one Lambertian image per superpixel at full white.

    ``B_j = albedo * max(0, n . l_j) [/ d_j^2] + ambient / b``. With a
    distorted ``camera`` every sensor pixel is traced through the inverse
    distortion, so the stack is what a real lens would record.
    """
    camera = camera or scene.camera
    if (camera.height, camera.width) != scene.shape:
        raise InvalidArgumentError(
            f"scene is {scene.shape}, camera is {(camera.height, camera.width)}")
    sc = scene.camera
    u, v = pixel_grid(camera)
    xn = (u - camera.px) / camera.f
    yn = (v - camera.py) / camera.f
    if not camera.dist.is_zero:
        xn, yn = invert_distortion(camera.dist, xn, yn)
    su, sv = sc.f * xn + sc.px, sc.f * yn + sc.py
    exact = camera.dist.is_zero and sc.f == camera.f and sc.px == camera.px and sc.py == camera.py
    if exact:
        depth = scene.height_field
        normals = scene.gt_normals.values
        albedo = scene.gt_albedo.values
    else:
        su = np.clip(su, 0, sc.width - 1)
        sv = np.clip(sv, 0, sc.height - 1)
        depth, _ = sample_bilinear(scene.height_field, su, sv)
        normals, _ = sample_bilinear(scene.gt_normals.values, su, sv)
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        albedo, _ = sample_bilinear(scene.gt_albedo.values, su, sv)

    points = depth[..., None] * np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    to_light = display.superpixel_centers[:, None, None, :] - points[None]
    dist = np.linalg.norm(to_light, axis=-1)
    coincident = dist < 1e-12
    dist = np.where(coincident, 1.0, dist)
    l = to_light / dist[..., None]
    shading = np.clip(np.sum(normals[None] * l, axis=-1), 0.0, None)
    if falloff:
        shading = shading / dist ** 2
    values = albedo[None] * shading[..., None] + scene.ambient_level / display.b
    valid = ~coincident.any(axis=0)
    values[:, ~valid] = 0.0
    return BasisStack(values, valid)


def full_white_peak(basis: BasisStack) -> float:
    """Largest radiance any pixel reaches with every superpixel at full white."""
    return float(basis.values.sum(axis=0).max())
