"""End-to-end simulation: scene rendering, capture through the sensor model, and reconstruction."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .learning import TrainingEntry, TrainingSet
from .lens import CameraModel, default_camera, undistort_image
from .scene import (AlbedoMap, BasisStack, DisplayGeometry, NormalMap, PatternSet, SceneMesh, default_display,
                    full_white_peak, generate_scene, render_basis)
from .sensor import (DEFAULT_EXPOSURES, ExposureStack, NoiseModel, WeightFunction, gaussian_filter,
                     merge_hdr, simulate_ldr)
from .stereo import (CaptureSet, angular_error, estimate_albedo, light_directions,
                     relight, solve_normals)

# (kind, amplitude in metres, seed) of the bundled training scenes
BUNDLED_SCENES = (
    ("sphere_cap", 0.03, 11),
    ("perlin_heightfield", 0.015, 12),
    ("leaf_heightfield", 0.015, 13),
)


@dataclass(frozen=True)
class SensorSettings:
    """How captures are recorded.

    ``headroom`` sets the gain so that the brightest capture reaches this
    fraction of full scale at ``reference_exposure``. The gain does not
    depend on ``exposures``, so different brackets see the same scene
    brightness.
    """

    exposures: tuple = DEFAULT_EXPOSURES
    read_sigma: float = 0.002
    quantization_bits: int = 12
    weight: str = "tent"
    clip_margin: float = 0.02
    headroom: float = 0.9
    reference_exposure: float = DEFAULT_EXPOSURES[0]
    denoise_sigma: float = 0.0

    def __post_init__(self):
        if not self.exposures:
            raise InvalidArgumentError("at least one exposure is required")
        if not 0 < self.headroom <= 1:
            raise InvalidArgumentError("headroom must be in (0, 1]")
        if not self.reference_exposure > 0:
            raise InvalidArgumentError("reference_exposure must be positive")
        if self.denoise_sigma < 0:
            raise InvalidArgumentError("denoise_sigma must be >= 0")
        WeightFunction(self.weight, self.clip_margin)
        NoiseModel(self.read_sigma, self.quantization_bits)


@dataclass(frozen=True)
class ReconstructionSettings:
    sensor: SensorSettings | None = field(default_factory=SensorSettings)  # None records ideal radiance
    undistort: bool = True
    plane_depth: float = 0.10
    albedo_mode: str = "scalar"
    damping: float = 0.0
    reject_shadows: bool = False


@dataclass
class SceneBundle:
    scene: SceneMesh
    camera: CameraModel
    display: DisplayGeometry
    basis: BasisStack


@dataclass
class ReconstructionResult:
    normals: NormalMap
    albedo: AlbedoMap
    radiance: np.ndarray  # (K, H, W, 3) recovered captures fed to the solver
    error_map: np.ndarray
    mean_error: float
    mask: np.ndarray
    saturated: np.ndarray


def render_bundle(kind: str, *, resolution: int = 64, amplitude: float = 0.0, seed: int = 0,
                  base_depth: float = 0.10, display: DisplayGeometry | None = None,
                  camera: CameraModel | None = None, falloff: bool = True,
                  ambient_fraction: float = 0.0) -> SceneBundle:
    """Generate a scene and its basis stack.

    The scene geometry lives on an ideal pinhole grid; ``camera`` may add
    lens distortion, which then shows up in the rendered basis. Ambient light
    is given relative to the full-white display peak of the ambient-free
    rendering.
    """
    if ambient_fraction < 0:
        raise InvalidArgumentError("ambient_fraction must be >= 0")
    display = display or default_display()
    camera = camera or default_camera(resolution)
    pinhole = CameraModel(camera.f, camera.px, camera.py, camera.width, camera.height)
    scene = generate_scene(kind, resolution, base_depth, amplitude, seed, camera=pinhole)
    basis = render_basis(scene, display, camera, falloff)
    if ambient_fraction > 0:
        scene.ambient_level = ambient_fraction * full_white_peak(basis)
        basis = render_basis(scene, display, camera, falloff)
    return SceneBundle(scene, camera, display, basis)


def training_entry(bundle: SceneBundle, plane_depth: float = 0.10) -> TrainingEntry:
    pinhole = bundle.scene.camera
    return TrainingEntry(bundle.basis, bundle.scene.gt_normals,
                         light_directions(bundle.display, pinhole, plane_depth))


def bundled_training_set(resolution: int = 64, display: DisplayGeometry | None = None) -> TrainingSet:
    """The three fixed synthetic scenes used for learning and family comparisons."""
    return TrainingSet([training_entry(b) for b in bundled_scenes(resolution, display)])


def record_captures(captures: CaptureSet, sensor: SensorSettings | None, seed: int = 0):
    """Pass relit radiance through the exposure ladder and HDR merge.

    Returns ``(radiance, saturated)``, radiance in the input's units. Frame
    ``k`` of pattern ``i`` draws noise from stream ``i * n_exposures + k``.
    """
    images = captures.images
    if sensor is None:
        return images.copy(), np.zeros(images.shape[1:3], dtype=bool)
    peak = float(images.max())
    gain = sensor.headroom / (sensor.reference_exposure * peak) if peak > 0 else 1.0
    noise = NoiseModel(sensor.read_sigma, sensor.quantization_bits, seed)
    weight = WeightFunction(sensor.weight, sensor.clip_margin)
    n_exp = len(sensor.exposures)
    out = np.empty_like(images)
    saturated = np.zeros(images.shape[1:3], dtype=bool)
    for i, img in enumerate(images):
        frames = [(simulate_ldr(gain * img, t, noise, stream=i * n_exp + k), t)
                  for k, t in enumerate(sensor.exposures)]
        merged = merge_hdr(ExposureStack(frames), weight)
        out[i] = gaussian_filter(merged.values / gain, sensor.denoise_sigma)
        saturated |= merged.saturated_mask
    return out, saturated


def reconstruct(basis: BasisStack, patterns: PatternSet, camera: CameraModel, display: DisplayGeometry,
                gt: NormalMap | None = None, settings: ReconstructionSettings = ReconstructionSettings(),
                seed: int = 0) -> ReconstructionResult:
    """Relight, record, merge, denoise, undistort and solve for normals.

    When ``gt`` is given the mean angular error over the scene mask (valid
    basis, lit, inside the undistorted frame) is reported;
    otherwise ``mean_error`` is NaN.
    """
    if patterns.b != basis.b:
        raise InvalidArgumentError(f"patterns have b={patterns.b}, basis has b={basis.b}")
    if basis.shape != (camera.height, camera.width):
        raise InvalidArgumentError(f"basis is {basis.shape}, camera is {(camera.height, camera.width)}")
    if gt is not None and gt.values.shape[:2] != basis.shape:
        raise InvalidArgumentError("ground truth and basis differ in size")
    captures = relight(patterns, basis)
    radiance, saturated = record_captures(captures, settings.sensor, seed)
    # saturated pixels stay in the error mask: their clipped estimate is the cost of too few exposures
    valid = basis.valid_mask.copy()
    if settings.undistort and not camera.dist.is_zero:
        radiance = np.stack([undistort_image(camera, img)[0] for img in radiance])
        kept, inside = undistort_image(camera, valid.astype(np.float64), nearest=True)
        valid = inside & (kept > 0.5)
    pinhole = CameraModel(camera.f, camera.px, camera.py, camera.width, camera.height)
    lights = light_directions(display, pinhole, settings.plane_depth)
    recorded = CaptureSet(radiance, patterns)
    albedo = estimate_albedo(recorded)
    normals = solve_normals(recorded, patterns, lights, albedo, albedo_mode=settings.albedo_mode,
                            damping=settings.damping, reject_shadows=settings.reject_shadows)
    # rank-deficient pixels keep their minimum-norm estimate and count as errors
    mask = valid & albedo.valid_mask
    if gt is None:
        return ReconstructionResult(normals, albedo, radiance, np.full(basis.shape, np.nan), float("nan"),
                                    mask, saturated)
    mask &= gt.valid_mask
    error_map, mean = angular_error(normals, gt, mask)
    return ReconstructionResult(normals, albedo, radiance, error_map, mean, mask, saturated)


def reconstruct_bundle(bundle: SceneBundle, patterns: PatternSet,
                       settings: ReconstructionSettings = ReconstructionSettings(), seed: int = 0):
    return reconstruct(bundle.basis, patterns, bundle.camera, bundle.display, bundle.scene.gt_normals,
                       settings, seed)


def mean_reconstruction_error(bundles, patterns: PatternSet,
                              settings: ReconstructionSettings = ReconstructionSettings(), seed: int = 0) -> float:
    """Average of per-scene mean errors, each scene with its own noise seed offset."""
    return float(np.mean([reconstruct_bundle(b, patterns, settings, seed + i).mean_error
                          for i, b in enumerate(bundles)]))


def bundled_scenes(resolution: int = 64, display: DisplayGeometry | None = None):
    display = display or default_display()
    return [render_bundle(kind, resolution=resolution, amplitude=amp, seed=seed, display=display)
            for kind, amp, seed in BUNDLED_SCENES]
