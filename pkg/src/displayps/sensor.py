"""Linear RAW sensor simulation, exposure-bracketed HDR merging and Gaussian denoising."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

# exposure ladder in seconds, factor 4 between neighbours
DEFAULT_EXPOSURES = (1 / 200, 1 / 50, 1 / 12.5, 1 / 3.125)


@dataclass(frozen=True)
class NoiseModel:
    read_sigma: float = 0.0
    quantization_bits: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.read_sigma < 0:
            raise InvalidArgumentError("read_sigma must be >= 0")
        if not 8 <= self.quantization_bits <= 16:
            raise InvalidArgumentError("quantization_bits must be in [8, 16]")

    @property
    def step(self) -> float:
        return 1.0 / (2 ** self.quantization_bits - 1)


@dataclass(frozen=True)
class WeightFunction:
    """Per-value confidence used when merging exposures.

    ``tent`` is a hat peaking at 0.5 and zero within ``clip_margin`` of either
    clip boundary; ``uniform`` weights every value equally.
    """

    kind: str = "tent"
    clip_margin: float = 0.02

    def __post_init__(self):
        if self.kind not in ("tent", "uniform"):
            raise InvalidArgumentError(f"unknown weight kind {self.kind!r}")
        if not 0 <= self.clip_margin < 0.5:
            raise InvalidArgumentError("clip_margin must be in [0, 0.5)")

    def __call__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if self.kind == "uniform":
            return np.ones_like(values)
        m = self.clip_margin
        w = np.minimum(values - m, 1.0 - m - values) / (0.5 - m)
        return np.clip(w, 0.0, None)


@dataclass
class RadianceImage:
    values: np.ndarray
    saturated_mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.saturated_mask is None:
            self.saturated_mask = np.zeros(self.values.shape[:2], dtype=bool)


@dataclass
class ExposureStack:
    frames: list = field(default_factory=list)  # (image, exposure_s) pairs

    def __post_init__(self):
        times = [float(t) for _, t in self.frames]
        if any(t <= 0 for t in times):
            raise InvalidArgumentError("exposure times must be positive")
        if len(set(times)) != len(times):
            raise InvalidArgumentError("exposure times must be pairwise distinct")
        shapes = {np.shape(img) for img, _ in self.frames}
        if len(shapes) > 1:
            raise InvalidArgumentError(f"frames differ in shape: {sorted(shapes)}")


def simulate_ldr(radiance, exposure_s: float, noise: NoiseModel = NoiseModel(), stream: int = 0) -> np.ndarray:
    """Form one clipped, quantized LDR frame from linear radiance.

    ``stream`` selects an independent noise sequence (one per frame) while
    keeping every sample a pure function of ``(noise.seed, stream, pixel)``.
    """
    if exposure_s <= 0:
        raise InvalidArgumentError("exposure_s must be positive")
    values = radiance.values if isinstance(radiance, RadianceImage) else np.asarray(radiance, dtype=np.float64)
    signal = exposure_s * values
    if noise.read_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([noise.seed, stream]))
        signal = signal + noise.read_sigma * rng.standard_normal(signal.shape)
    levels = 2 ** noise.quantization_bits - 1
    return np.rint(np.clip(signal, 0.0, 1.0) * levels) / levels


def merge_hdr(stack: ExposureStack, weight: WeightFunction = WeightFunction()) -> RadianceImage:
    """Weighted average of exposure-normalized frames.

    Pixels where every frame has zero weight (in any channel) are flagged in
    ``saturated_mask`` and take the shortest exposure divided by its time.
    """
    if not stack.frames:
        raise InvalidArgumentError("cannot merge an empty exposure stack")
    num = 0.0
    den = 0.0
    for image, t in stack.frames:
        image = np.asarray(image, dtype=np.float64)
        w = weight(image)
        num = num + w * image / t
        den = den + w
    shortest_img, shortest_t = min(stack.frames, key=lambda f: f[1])
    fallback = np.asarray(shortest_img, dtype=np.float64) / shortest_t
    empty = den == 0
    merged = np.where(empty, fallback, num / np.where(empty, 1.0, den))
    mask = empty if empty.ndim == 2 else empty.reshape(empty.shape[:2] + (-1,)).any(axis=-1)
    return RadianceImage(merged, mask)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_axis(image: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * image.ndim
    pad[axis] = (r, r)
    padded = np.pad(image, pad, mode="edge")
    n = image.shape[axis]
    out = np.zeros_like(image)
    for i, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_filter(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the first two axes with edge replication."""
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    return _filter_axis(_filter_axis(image, k, 0), k, 1)
