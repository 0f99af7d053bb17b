"""Pinhole camera, Brown-Conrady distortion and image undistortion."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, ConvergenceError, InvalidArgumentError


@dataclass(frozen=True)
class DistortionCoefficients:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite(v) for v in asdict(self).values()):
            raise InvalidArgumentError("distortion coefficients must be finite")

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for v in asdict(self).values())


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics ``f, px, py`` (pixels), pose ``R, t`` and lens distortion.

    ``t`` is the camera centre in world coordinates, so a world point maps to
    the camera frame as ``R @ (x_w - t)``.
    """

    f: float
    px: float
    py: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dist: DistortionCoefficients = field(default_factory=DistortionCoefficients)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not self.f > 0:
            raise InvalidArgumentError(f"focal length must be positive, got {self.f}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("camera width and height must be >= 1")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise InvalidArgumentError("R must be a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.px], [0.0, self.f, self.py], [0.0, 0.0, 1.0]])

    def to_json_dict(self) -> dict:
        return {
            "f": float(self.f),
            "px": float(self.px),
            "py": float(self.py),
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "dist": {k: float(v) for k, v in asdict(self.dist).items()},
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraModel":
        expected = {"f", "px", "py", "R", "t", "dist", "width", "height"}
        unknown = set(d) - expected
        if unknown:
            raise InvalidArgumentError(f"unknown camera keys: {sorted(unknown)}")
        missing = expected - set(d)
        if missing:
            raise InvalidArgumentError(f"missing camera keys: {sorted(missing)}")
        if len(d["R"]) != 9 or len(d["t"]) != 3:
            raise InvalidArgumentError("camera R needs 9 values and t needs 3")
        return cls(
            f=float(d["f"]),
            px=float(d["px"]),
            py=float(d["py"]),
            width=int(d["width"]),
            height=int(d["height"]),
            R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.array(d["t"], dtype=np.float64),
            dist=DistortionCoefficients(**{k: float(v) for k, v in d["dist"].items()}),
        )


def default_camera(resolution: int, dist: DistortionCoefficients | None = None) -> CameraModel:
    """Square sensor with a 90 degree horizontal field of view, principal point at the centre pixel."""
    return CameraModel(
        f=float(resolution),
        px=resolution / 2.0,
        py=resolution / 2.0,
        width=resolution,
        height=resolution,
        dist=dist or DistortionCoefficients(),
    )


def load_camera(path) -> CameraModel:
    return CameraModel.from_json_dict(json.loads(Path(path).read_text()))


def save_camera(camera: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(camera.to_json_dict(), indent=2, sort_keys=True) + "\n")


def project(camera: CameraModel, world_point) -> np.ndarray:
    """Project world points to pixel coordinates (no distortion applied).

    ``world_point`` has shape ``(..., 3)`` or homogeneous ``(..., 4)``.
    Returns ``(..., 2)`` pixel coordinates ``(u, v)``.
    """
    X = np.asarray(world_point, dtype=np.float64)
    if X.shape[-1] == 3:
        X = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
    elif X.shape[-1] != 4:
        raise InvalidArgumentError("world_point must have 3 or 4 components")
    extrinsic = np.hstack([camera.R, (-camera.R @ camera.t)[:, None]])
    x_cam = X @ extrinsic.T
    # depth in the camera frame carries the sign of the homogeneous weight
    depth = x_cam[..., 2] * np.sign(X[..., 3])
    if np.any(depth <= 0):
        raise BehindCameraError("point has non-positive depth in the camera frame")
    x_img = x_cam @ camera.K.T
    return x_img[..., :2] / x_img[..., 2:3]


def distort(dist: DistortionCoefficients, x, y):
    """Apply radial (k1, k2, k3) and tangential (p1, p2) distortion to normalized coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r2 = x * x + y * y
    radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
    xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y
    return xd, yd


def _distortion_jacobian(dist: DistortionCoefficients, x, y):
    r2 = x * x + y * y
    radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
    dradial = dist.k1 + r2 * (2.0 * dist.k2 + 3.0 * dist.k3 * r2)  # d radial / d r2
    off = 2.0 * x * y * dradial + 2.0 * dist.p1 * x + 2.0 * dist.p2 * y
    jxx = radial + 2.0 * x * x * dradial + 2.0 * dist.p1 * y + 6.0 * dist.p2 * x
    jyy = radial + 2.0 * y * y * dradial + 6.0 * dist.p1 * y + 2.0 * dist.p2 * x
    return jxx, off, jyy


def invert_distortion(dist: DistortionCoefficients, xd, yd, tol: float = 1e-10, max_iter: int = 50):
    """Find undistorted normalized coordinates whose distortion is ``(xd, yd)``.

    Newton iteration on ``distort(x) = x_d`` started at ``x_d``, using the
    analytic Jacobian. The plain fixed-point update ``x <- x_d - (distort(x) - x)``
    stops contracting for strong coefficients near the edge of the field.
    Works elementwise on arrays; stops once every update is below ``tol``.

    Raises
    ------
    ConvergenceError
        If some point still moves by more than ``tol`` after ``max_iter`` iterations.
    """
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    x, y = xd.copy(), yd.copy()
    mismatch = np.inf
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(max_iter):
            fx, fy = distort(dist, x, y)
            rx, ry = fx - xd, fy - yd
            mismatch = float(np.max(np.hypot(rx, ry), initial=0.0))
            jxx, off, jyy = _distortion_jacobian(dist, x, y)
            det = jxx * jyy - off * off
            dx = (jyy * rx - off * ry) / det
            dy = (jxx * ry - off * rx) / det
            update = float(np.max(np.hypot(dx, dy), initial=0.0))
            if not np.isfinite(update):
                break
            x, y = x - dx, y - dy
            if update < tol:
                return x, y
    # residual is the worst |distort(x) - x_d| at the last finite iterate
    raise ConvergenceError(
        f"distortion inversion did not converge in {max_iter} iterations (residual {mismatch:.3g})",
        residual=mismatch,
    )


def _snap(coords: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    # keeps identity remaps exact despite round-off in (u - px) / f * f + px
    rounded = np.rint(coords)
    return np.where(np.abs(coords - rounded) < eps, rounded, coords)


def sample_bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray, nearest: bool = False):
    """Sample ``image`` (H, W[, C]) at fractional pixel coordinates.

    Returns ``(values, inside)``; samples outside the image are zero and
    ``inside`` is False there.
    """
    H, W = image.shape[:2]
    u = _snap(np.asarray(u, dtype=np.float64))
    v = _snap(np.asarray(v, dtype=np.float64))
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0, W - 1)
    vc = np.clip(v, 0, H - 1)
    extra = (None,) * (image.ndim - 2)
    if nearest:
        out = image[np.rint(vc).astype(int), np.rint(uc).astype(int)]
    else:
        u0 = np.floor(uc).astype(int)
        v0 = np.floor(vc).astype(int)
        u1 = np.minimum(u0 + 1, W - 1)
        v1 = np.minimum(v0 + 1, H - 1)
        a = (uc - u0)[(...,) + extra]
        b = (vc - v0)[(...,) + extra]
        top = image[v0, u0] * (1 - a) + image[v0, u1] * a
        bottom = image[v1, u0] * (1 - a) + image[v1, u1] * a
        out = top * (1 - b) + bottom * b
    out = np.where(inside[(...,) + extra], out, 0.0)
    return out, inside


def pixel_grid(camera: CameraModel):
    v, u = np.meshgrid(np.arange(camera.height, dtype=np.float64),
                       np.arange(camera.width, dtype=np.float64), indexing="ij")
    return u, v


def undistort_image(camera: CameraModel, image, nearest: bool = False):
    """Resample a distorted capture onto the ideal pinhole grid.

    Each output pixel is normalized with the inverse intrinsics, pushed
    through the forward distortion model, mapped back to pixels and sampled
    from ``image``. Returns ``(undistorted, valid_mask)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (camera.height, camera.width):
        raise InvalidArgumentError(
            f"image is {image.shape[:2]}, camera expects {(camera.height, camera.width)}")
    u, v = pixel_grid(camera)
    xn = (u - camera.px) / camera.f
    yn = (v - camera.py) / camera.f
    xd, yd = distort(camera.dist, xn, yn)
    return sample_bilinear(image, camera.f * xd + camera.px, camera.f * yd + camera.py, nearest=nearest)
