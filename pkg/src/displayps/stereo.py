"""Near-field display photometric stereo: relighting and the per-pixel linear normal solve.

Each pixel stacks 3K equations, one per (pattern, channel), ordered
``(pattern 0: R, G, B), (pattern 1: R, G, B), ...``. Row ``(i, c)`` of the
system matrix is ``rho * sum_j P[i, j, c] * l_j`` and the right-hand side is
the observed intensity ``I_i^c``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UndefinedMeanError
from .lens import CameraModel, pixel_grid
from .scene import AlbedoMap, BasisStack, DisplayGeometry, NormalMap, PatternSet

RHO_MIN = 1e-4
RCOND = 1e-8
ALBEDO_MODES = ("scalar", "channel")


@dataclass
class LightField:
    directions: np.ndarray  # (H, W, b, 3) unit vectors toward each superpixel

    @property
    def shape(self):
        return self.directions.shape[:2]


@dataclass
class CaptureSet:
    images: np.ndarray  # (K, H, W, 3) linear radiance
    patterns: PatternSet

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.shape[0] != self.patterns.K:
            raise InvalidArgumentError(
                f"{self.images.shape[0]} captures for {self.patterns.K} patterns")

    @property
    def K(self) -> int:
        return self.images.shape[0]


def light_directions(display: DisplayGeometry, camera: CameraModel, plane_depth: float = 0.10) -> LightField:
    """Directions from the assumed fronto-parallel plane toward each superpixel."""
    if plane_depth <= 0:
        raise InvalidArgumentError("plane_depth must be positive")
    u, v = pixel_grid(camera)
    points = plane_depth * np.stack(
        [(u - camera.px) / camera.f, (v - camera.py) / camera.f, np.ones_like(u)], axis=-1)
    vec = display.superpixel_centers[None, None, :, :] - points[:, :, None, :]
    return LightField(vec / np.linalg.norm(vec, axis=-1, keepdims=True))


def relight(patterns, basis: BasisStack) -> CaptureSet:
    """Synthesize captures as channel-wise weighted sums of basis images.

    ``patterns`` may be a PatternSet or a raw (K, b, 3) array; raw arrays
    skip the [0, 1] check so linearity can be exercised with sums of patterns.
    """
    P = patterns.values if isinstance(patterns, PatternSet) else np.asarray(patterns, dtype=np.float64)
    if P.ndim != 3 or P.shape[1] != basis.b or P.shape[2] != 3:
        raise InvalidArgumentError(f"patterns {P.shape} do not match basis with b={basis.b}")
    images = np.einsum("ijc,jhwc->ihwc", P, basis.values)
    if not isinstance(patterns, PatternSet):
        patterns = PatternSet.unchecked(P)
    return CaptureSet(images, patterns)


def estimate_albedo(captures: CaptureSet, rho_min: float = RHO_MIN) -> AlbedoMap:
    """Per-channel maximum over captures; pixels whose brightest channel is below ``rho_min`` are invalid."""
    rho = captures.images.max(axis=0)
    return AlbedoMap(rho, rho.max(axis=-1) >= rho_min)


def row_weights(rho: np.ndarray, K: int, mode: str = "scalar") -> np.ndarray:
    """Expand a (P, 3) albedo into (P, 3K) row weights.

    ``scalar`` uses the brightest channel for every row, ``channel`` weights
    each row by its own channel's albedo.
    """
    if mode == "scalar":
        return np.repeat(rho.max(axis=-1, keepdims=True), 3 * K, axis=1)
    if mode == "channel":
        return np.tile(rho, (1, K))
    raise InvalidArgumentError(f"unknown albedo mode {mode!r}; expected one of {ALBEDO_MODES}")


def pattern_light_rows(P: np.ndarray, L: np.ndarray) -> np.ndarray:
    """``sum_j P[i, j, c] l_j`` for every pixel: (K, b, 3) x (P, b, 3) -> (P, 3K, 3)."""
    Q = np.einsum("ijc,pjd->picd", P, L)
    return Q.reshape(L.shape[0], -1, 3)


def flatten_captures(images: np.ndarray) -> np.ndarray:
    """(K, H, W, 3) -> (H*W, 3K) with rows ordered (pattern, channel)."""
    K = images.shape[0]
    return np.moveaxis(images, 0, 2).reshape(-1, 3 * K)


@dataclass
class Solution:
    N: np.ndarray  # (P, 3) un-normalized solution
    S: np.ndarray  # (P, 3) singular values, descending
    Vt: np.ndarray  # (P, 3, 3)
    lam: np.ndarray  # (P,) Tikhonov term actually used
    rank: np.ndarray  # (P,)


def solve_system(A: np.ndarray, I: np.ndarray, damping: float = 0.0, rcond: float = RCOND) -> Solution:
    """Batched least-squares ``A^+ I`` via SVD.

    With ``damping > 0`` the solve is Tikhonov-regularized,
    ``(A^T A + lam) N = A^T I`` with ``lam = damping * trace(A^T A) / 3``,
    which keeps the solution smooth through rank-deficient systems. With
    ``damping == 0`` singular values below ``rcond * s_max`` are discarded
    (minimum-norm solution).
    """
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    smax = S[:, :1]
    rank = np.sum(S > rcond * smax, axis=1) * (smax[:, 0] > 0)
    lam = damping * np.sum(S * S, axis=1) / 3.0
    if damping > 0:
        denom = S * S + lam[:, None]
        filt = np.where(denom > 0, S / np.where(denom > 0, denom, 1.0), 0.0)  # all-zero A solves to 0
    else:
        keep = S > rcond * smax
        filt = np.where(keep, 1.0 / np.where(keep, S, 1.0), 0.0)
    coeff = np.einsum("pki,pk->pi", U, I) * filt
    N = np.einsum("pij,pi->pj", Vt, coeff)
    return Solution(N, S, Vt, lam, rank)


def orient(N: np.ndarray):
    """Normalize and flip into the toward-camera hemisphere; returns ``(n, norm, sign)``."""
    norm = np.linalg.norm(N, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    sign = np.where(N[:, 2] > 0, -1.0, 1.0)
    return N * (sign / safe)[:, None], norm, sign


def solve_normals(captures: CaptureSet, patterns: PatternSet, lights: LightField, albedo: AlbedoMap, *,
                  albedo_mode: str = "scalar", damping: float = 0.0, rcond: float = RCOND,
                  reject_shadows: bool = False) -> NormalMap:
    """Per-pixel photometric-stereo solve ``N = (rho * P l)^+ I``.

    Rank-deficient pixels still receive the minimum-norm estimate but are
    flagged invalid, as are pixels with invalid albedo.
    """
    P = patterns.values
    K = P.shape[0]
    H, W = lights.shape
    if captures.images.shape[1:3] != (H, W) or albedo.values.shape[:2] != (H, W):
        raise InvalidArgumentError("captures, albedo and light field differ in size")
    if captures.K != K or lights.directions.shape[2] != P.shape[1]:
        raise InvalidArgumentError("pattern count or superpixel count mismatch")
    L = lights.directions.reshape(H * W, -1, 3)
    w = row_weights(albedo.values.reshape(-1, 3), K, albedo_mode)
    I = flatten_captures(captures.images)
    sol = solve_system(w[..., None] * pattern_light_rows(P, L), I, damping, rcond)
    n, norm, _ = orient(sol.N)
    if reject_shadows:
        lit = (np.einsum("pjd,pd->pj", L, n) > 0)[..., None]
        sol = solve_system(w[..., None] * pattern_light_rows(P, L * lit), I, damping, rcond)
        n, norm, _ = orient(sol.N)
    valid = (sol.rank == 3) & (norm > 0) & albedo.valid_mask.reshape(-1)
    return NormalMap(n.reshape(H, W, 3), valid.reshape(H, W))


def angular_error(estimated: NormalMap, gt: NormalMap, mask=None):
    """``(1 - n . n_gt) / 2`` per pixel and its mean.

    The mean is taken over ``mask`` when given, otherwise over the joint
    validity of both maps. Pixels outside the mask are NaN in the map.
    """
    if estimated.values.shape != gt.values.shape:
        raise InvalidArgumentError("normal maps differ in shape")
    if mask is None:
        mask = estimated.valid_mask & gt.valid_mask
    loss = (1.0 - np.sum(estimated.values * gt.values, axis=-1)) / 2.0
    if not np.any(mask):
        raise UndefinedMeanError("no valid pixels to average over")
    return np.where(mask, loss, np.nan), float(loss[mask].mean())
