"""Differentiable display-pattern learning.

Patterns are parameterized by unconstrained logits and materialized with a
sigmoid, so intensities stay inside (0, 1). The forward pass relights each
training scene, estimates albedo, solves for normals and scores them with
the angular loss ``(1 - n . n_gt) / 2``; :func:`value_and_grad` returns the
exact gradient of that loss with respect to the logits.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEntryError, InvalidArgumentError
from .scene import BasisStack, DisplayGeometry, NormalMap, PatternSet, full_white_peak
from .sensor import gaussian_filter
from .stereo import (RCOND, RHO_MIN, LightField, flatten_captures, orient, pattern_light_rows,
                     row_weights, solve_system)

logger = logging.getLogger(__name__)

FAMILIES = (
    "olat", "group_olat", "mono_gradient", "mono_random", "tri_gradient",
    "tri_random", "flat_gray", "mono_complementary", "tri_complementary",
)
# pattern counts used for each family in the reference comparison
FAMILY_K = {f: 4 for f in FAMILIES} | {"tri_gradient": 2, "tri_complementary": 2}
INIT_EPS = 1e-3
# relative Tikhonov damping used while learning (see solve_system); keeps
# gradients bounded when a start such as flat_gray is rank-deficient
TRAIN_DAMPING = 1e-2
TRAIN_NOISE = 1e-3
INIT_JITTER = 0.2
# noise stream reserved for evaluate(), disjoint from every training epoch
EVAL_STREAM = 2 ** 32 - 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class PatternParams:
    logits: np.ndarray  # (K, b, 3)
    grid: tuple  # (rows, cols) of the display, for smoothing

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if not np.all(np.isfinite(self.logits)):
            raise InvalidArgumentError("logits must be finite")

    @property
    def patterns(self) -> PatternSet:
        return PatternSet(sigmoid(self.logits))


@dataclass(frozen=True)
class OptimizerSchedule:
    lr0: float = 1e-2
    alpha: int = 10
    decay: float = 0.3
    epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise InvalidArgumentError("lr0 must be positive")
        if self.alpha < 1:
            raise InvalidArgumentError("alpha must be >= 1")
        if not 0 < self.decay <= 1:
            raise InvalidArgumentError("decay must be in (0, 1]")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")


@dataclass
class TrainingEntry:
    basis: BasisStack
    gt: NormalMap
    lights: LightField

    def __post_init__(self):
        if not (self.basis.shape == self.gt.values.shape[:2] == self.lights.shape):
            raise InvalidArgumentError("basis, ground truth and light field differ in size")
        if self.lights.directions.shape[2] != self.basis.b:
            raise InvalidArgumentError("light field and basis disagree on superpixel count")

    @property
    def mask(self) -> np.ndarray:
        return self.gt.valid_mask & self.basis.valid_mask

    @property
    def radiance_scale(self) -> float:
        return full_white_peak(self.basis)


@dataclass
class TrainingSet:
    entries: list

    def __post_init__(self):
        if not self.entries:
            raise InvalidArgumentError("training set is empty")


@dataclass
class LearningHistory:
    epoch: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    patterns: PatternSet = None
    final_loss: float = float("nan")
    best_epoch: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,lr,mean_loss,grad_norm"]
        for e, lr, loss, g in zip(self.epoch, self.lr, self.mean_loss, self.grad_norm):
            lines.append(f"{e},{lr!r},{loss!r},{g!r}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- initial patterns

def _centered_xy(display: DisplayGeometry) -> np.ndarray:
    xy = display.superpixel_centers[:, :2]
    return xy - xy.mean(axis=0)


def _ramp(xy: np.ndarray, angle: float) -> np.ndarray:
    proj = xy[:, 0] * np.cos(angle) + xy[:, 1] * np.sin(angle)
    peak = np.max(np.abs(proj))
    if peak < 1e-12:
        return np.full(len(xy), 0.5)
    return 0.5 + 0.5 * proj / peak


def _tile_shape(K: int, rows: int, cols: int):
    best = None
    for kr in range(1, K + 1):
        if K % kr:
            continue
        kc = K // kr
        if kr > rows or kc > cols:
            continue
        score = abs(np.log((rows / kr) / (cols / kc)))
        if best is None or score < best[0]:
            best = (score, kr, kc)
    return None if best is None else best[1:]


def _group_olat(K: int, display: DisplayGeometry) -> np.ndarray:
    rows, cols, b = display.rows, display.cols, display.b
    P = np.zeros((K, b))
    tiles = _tile_shape(K, rows, cols)
    if tiles is None:
        for i, block in enumerate(np.array_split(np.arange(b), K)):
            P[i, block] = 1.0
        return P
    kr, kc = tiles
    idx = np.arange(b).reshape(rows, cols)
    i = 0
    for rblock in np.array_split(np.arange(rows), kr):
        for cblock in np.array_split(np.arange(cols), kc):
            P[i, idx[np.ix_(rblock, cblock)].ravel()] = 1.0
            i += 1
    return P


def _tri_gradient(K: int, xy: np.ndarray, step: float) -> np.ndarray:
    P = np.empty((K, len(xy), 3))
    for i in range(K):
        for c in range(3):
            P[i, :, c] = _ramp(xy, np.deg2rad(120.0 * c) + i * step)
    return P


def make_initial_patterns(family: str, K: int, display: DisplayGeometry, seed: int = 0) -> np.ndarray:
    """Intensities (K, b, 3) of one of the named initial pattern families."""
    if family not in FAMILIES:
        raise InvalidArgumentError(f"unknown pattern family {family!r}; expected one of {FAMILIES}")
    if K < 1:
        raise InvalidArgumentError("K must be >= 1")
    b = display.b
    xy = _centered_xy(display)
    rng = np.random.default_rng(seed)
    mono = None
    if family == "olat":
        mono = np.zeros((K, b))
        mono[np.arange(K), (np.arange(K) * b) // K] = 1.0
    elif family == "group_olat":
        mono = _group_olat(K, display)
    elif family == "mono_gradient":
        mono = np.stack([_ramp(xy, 2 * np.pi * i / K) for i in range(K)])
    elif family == "mono_random":
        mono = rng.uniform(size=(K, b))
    elif family == "flat_gray":
        mono = np.full((K, b), 0.5)
    elif family == "tri_gradient":
        return _tri_gradient(K, xy, 2 * np.pi / K)
    elif family == "tri_random":
        return rng.uniform(size=(K, b, 3))
    else:
        if K % 2:
            raise InvalidArgumentError(f"{family} needs an even number of patterns, got {K}")
        half = K // 2
        # bases rotate over half a turn so no complement duplicates another base
        if family == "mono_complementary":
            base = np.stack([_ramp(xy, np.pi * i / half) for i in range(half)])
            base = np.repeat(base[..., None], 3, axis=-1)
        else:
            base = _tri_gradient(half, xy, np.pi / half)
        out = np.empty((K, b, 3))
        out[0::2] = base
        out[1::2] = 1.0 - base
        return out
    return np.repeat(mono[..., None], 3, axis=-1)


def init_patterns(family: str, K: int, display: DisplayGeometry, seed: int = 0) -> PatternParams:
    P = make_initial_patterns(family, K, display, seed)
    return PatternParams(logit(np.clip(P, INIT_EPS, 1 - INIT_EPS)), (display.rows, display.cols))


# --------------------------------------------------------------------------- forward / backward

@dataclass
class _Cache:
    P: np.ndarray
    B: np.ndarray  # (b, Npix, 3)
    L: np.ndarray  # (Npix, b, 3)
    I: np.ndarray  # (Npix, 3K)
    w: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    sol: object
    n: np.ndarray
    norm: np.ndarray
    sign: np.ndarray
    gt: np.ndarray
    mask: np.ndarray
    argmax: np.ndarray
    albedo_mode: str
    damping: float


def forward(params: PatternParams, entry: TrainingEntry, noise=None, *, albedo_mode: str = "scalar",
            damping: float = 0.0, rcond: float = RCOND):
    """Mean angular loss of the patterns on one training entry.

    ``noise`` is an optional additive (K, H, W, 3) perturbation of the
    synthesized captures. Returns ``(loss, cache)``; the cache feeds
    :func:`backward`.
    """
    P = sigmoid(params.logits)
    K = P.shape[0]
    H, W = entry.basis.shape
    B = entry.basis.values.reshape(entry.basis.b, H * W, 3)
    C = np.einsum("ijc,jpc->ipc", P, B)
    if noise is not None:
        C = C + np.asarray(noise).reshape(C.shape)
    I = flatten_captures(C.reshape(K, H, W, 3))
    L = entry.lights.directions.reshape(H * W, -1, 3)

    if albedo_mode == "scalar":
        argmax = np.argmax(I, axis=1)
        rho_max = I[np.arange(len(I)), argmax]
    else:
        argmax = np.argmax(I.reshape(-1, K, 3), axis=1)
        rho_max = np.take_along_axis(I.reshape(-1, K, 3), argmax[:, None, :], axis=1)[:, 0].max(axis=1)
    rho = I.reshape(-1, K, 3).max(axis=1)
    w = row_weights(rho, K, albedo_mode)
    Q = pattern_light_rows(P, L)
    A = w[..., None] * Q
    sol = solve_system(A, I, damping, rcond)
    n, norm, sign = orient(sol.N)
    gt = entry.gt.values.reshape(-1, 3)
    mask = entry.mask.reshape(-1) & (rho_max >= RHO_MIN) & (norm > 0)
    if not np.any(mask):
        raise DegenerateEntryError("every pixel of the entry is invalid")
    per_pixel = (1.0 - np.sum(n * gt, axis=1)) / 2.0
    loss = float(per_pixel[mask].mean())
    cache = _Cache(P, B, L, I, w, Q, A, sol, n, norm, sign, gt, mask, argmax, albedo_mode, damping)
    return loss, cache


def backward(cache: _Cache) -> np.ndarray:
    """Gradient of the forward loss with respect to the logits."""
    c = cache
    K = c.P.shape[0]
    npix = len(c.I)
    m = c.mask
    count = m.sum()

    gn = np.where(m[:, None], -c.gt / (2.0 * count), 0.0)
    safe_norm = np.where(c.norm > 0, c.norm, 1.0)
    gN = (c.sign / safe_norm)[:, None] * (gn - c.n * np.sum(c.n * gn, axis=1, keepdims=True))

    # adjoint of (A^T A + lam) N = A^T I
    S, Vt = c.sol.S, c.sol.Vt
    denom = S * S + c.sol.lam[:, None]
    if c.damping > 0:
        inv = 1.0 / np.where(denom > 0, denom, 1.0) * (denom > 0)
    else:
        # rank-deficient pixels get no gradient under the plain pseudo-inverse
        full = (c.sol.rank == 3)[:, None]
        inv = np.where(full, 1.0 / np.where(full, denom, 1.0), 0.0)
    inv = np.where(m[:, None], inv, 0.0)
    z = np.einsum("pji,pj->pi", Vt, inv * np.einsum("pij,pj->pi", Vt, gN))
    r = c.I - np.einsum("pkd,pd->pk", c.A, c.sol.N)
    Az = np.einsum("pkd,pd->pk", c.A, z)
    gA = r[:, :, None] * z[:, None, :] - Az[:, :, None] * c.sol.N[:, None, :]
    if c.damping > 0:
        gA -= (2.0 * c.damping / 3.0) * np.sum(z * c.sol.N, axis=1)[:, None, None] * c.A
    gI = Az

    gw = np.sum(gA * c.Q, axis=2)
    gQ = (c.w[..., None] * gA).reshape(npix, K, 3, 3)
    gP = np.einsum("picd,pjd->ijc", gQ, c.L)

    gC = gI.reshape(npix, K, 3).copy()
    rows = np.arange(npix)
    if c.albedo_mode == "scalar":
        flat = gC.reshape(npix, 3 * K)
        flat[rows, c.argmax] += gw.sum(axis=1)
    else:
        grho = gw.reshape(npix, K, 3).sum(axis=1)
        for ch in range(3):
            gC[rows, c.argmax[:, ch], ch] += grho[:, ch]
    gP += np.einsum("pic,jpc->ijc", gC, c.B)
    return gP * c.P * (1.0 - c.P)


def value_and_grad(params: PatternParams, entry: TrainingEntry, noise=None, **kwargs):
    loss, cache = forward(params, entry, noise, **kwargs)
    return loss, backward(cache)


def gradient(params: PatternParams, entry: TrainingEntry, noise=None, **kwargs) -> np.ndarray:
    return value_and_grad(params, entry, noise, **kwargs)[1]


# --------------------------------------------------------------------------- optimization

def lr_at(schedule: OptimizerSchedule, epoch: int) -> float:
    """Step-decayed learning rate: one factor of ``decay`` every ``alpha`` epochs."""
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    return schedule.lr0 * schedule.decay ** (epoch // schedule.alpha)


@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        params = np.array(params, dtype=np.float64)
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0, beta1, beta2, eps)


def adam_step(state: AdamState, grads, lr: float) -> AdamState:
    """One bias-corrected Adam update; returns a new state."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.params.shape:
        raise InvalidArgumentError(f"gradient shape {grads.shape} != parameter shape {state.params.shape}")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(params, m, v, t, state.beta1, state.beta2, state.eps)


def smooth_patterns(params: PatternParams, sigma: float) -> PatternParams:
    """Gaussian-blur each pattern channel over the display grid, then map back to logits."""
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    if sigma == 0:
        return PatternParams(params.logits.copy(), params.grid)
    rows, cols = params.grid
    P = sigmoid(params.logits)
    K = P.shape[0]
    grid = P.reshape(K, rows, cols, 3)
    smoothed = np.stack([gaussian_filter(g, sigma) for g in grid])
    tiny = 1e-12
    return PatternParams(logit(np.clip(smoothed.reshape(P.shape), tiny, 1 - tiny)), params.grid)


def capture_noise(entry: TrainingEntry, K: int, sigma: float, seed: int, epoch: int, index: int):
    """Additive read-noise realization for one (epoch, entry), scaled to the entry's full-white peak."""
    if sigma <= 0:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))
    H, W = entry.basis.shape
    return sigma * entry.radiance_scale * rng.standard_normal((K, H, W, 3))


def evaluate(params: PatternParams, train: TrainingSet, noise_sigma: float = 0.0, seed: int = 0,
             *, albedo_mode: str = "scalar", damping: float = 0.0) -> float:
    """Mean loss over the training set with one fixed noise realization per entry."""
    losses = []
    K = params.logits.shape[0]
    for idx, entry in enumerate(train.entries):
        noise = capture_noise(entry, K, noise_sigma, seed, EVAL_STREAM, idx)
        losses.append(forward(params, entry, noise, albedo_mode=albedo_mode, damping=damping)[0])
    return float(np.mean(losses))


def _epoch_pass(params: PatternParams, train: TrainingSet, epoch: int, noise_sigma: float, seed: int,
                need_grad: bool, **kwargs):
    total = np.zeros_like(params.logits) if need_grad else None
    losses = []
    K = params.logits.shape[0]
    for idx, entry in enumerate(train.entries):
        noise = capture_noise(entry, K, noise_sigma, seed, epoch, idx)
        try:
            if need_grad:
                loss, g = value_and_grad(params, entry, noise, **kwargs)
                total += g
            else:
                loss = forward(params, entry, noise, **kwargs)[0]
        except DegenerateEntryError:
            logger.warning("epoch %d: skipping degenerate training entry %d", epoch, idx)
            continue
        losses.append(loss)
    if not losses:
        raise DegenerateEntryError(f"epoch {epoch}: every training entry is degenerate")
    return float(np.mean(losses)), total


def learn(train: TrainingSet, family: str, K: int, display: DisplayGeometry,
          schedule: OptimizerSchedule = OptimizerSchedule(), smooth_sigma: float = 0.5, seed: int = 0,
          *, noise_sigma: float = TRAIN_NOISE, albedo_mode: str = "scalar", damping: float = TRAIN_DAMPING,
          keep_best: bool = True, init_jitter: float = INIT_JITTER, init: PatternParams | None = None):
    """Optimize display patterns with full-batch Adam.

    Returns ``(patterns, history)``. ``history.mean_loss[e]`` is the training
    loss of the parameters entering epoch ``e``; ``history.final_loss`` scores
    the parameters after the last update. With ``keep_best`` the returned
    patterns are the lowest-loss iterate seen (``history.best_epoch``, where
    ``epochs`` denotes the final parameters); otherwise the final iterate.
    """
    params = init if init is not None else init_patterns(family, K, display, seed)
    kwargs = dict(albedo_mode=albedo_mode, damping=damping)
    best = (math.inf, 0, params)
    if keep_best and schedule.epochs > 0:
        best = (_epoch_pass(params, train, 0, noise_sigma, seed, False, **kwargs)[0], 0, params)
    if init_jitter > 0 and schedule.epochs > 0:
        # breaks the exact symmetry of identical starting patterns (flat_gray)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6A17]))
        params = PatternParams(params.logits + init_jitter * rng.standard_normal(params.logits.shape),
                               params.grid)
    state = AdamState.init(params.logits, schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps)
    history = LearningHistory()
    for epoch in range(schedule.epochs):
        lr = lr_at(schedule, epoch)
        loss, total = _epoch_pass(params, train, epoch, noise_sigma, seed, True, **kwargs)
        if loss < best[0]:
            best = (loss, epoch, params)
        try:
            state = adam_step(state, total, lr)
        except FloatingPointError as exc:
            raise FloatingPointError(f"epoch {epoch}: {exc}") from exc
        params = PatternParams(state.params, params.grid)
        if smooth_sigma > 0:
            params = smooth_patterns(params, smooth_sigma)
            state.params = params.logits.copy()
        current = sigmoid(params.logits)
        assert np.all((current > 0) & (current < 1)), "sigmoid constraint violated"
        assert 0.0 <= loss <= 1.0, "loss left [0, 1]"
        history.epoch.append(epoch)
        history.lr.append(lr)
        history.mean_loss.append(loss)
        history.grad_norm.append(float(np.linalg.norm(total)))
        logger.debug("epoch %d lr %.3g loss %.5f", epoch, lr, loss)
    if schedule.epochs:
        history.final_loss = _epoch_pass(params, train, schedule.epochs, noise_sigma, seed, False, **kwargs)[0]
        if history.final_loss < best[0]:
            best = (history.final_loss, schedule.epochs, params)
    chosen = best if keep_best else (None, schedule.epochs, params)
    history.best_epoch = chosen[1]
    history.patterns = chosen[2].patterns
    return history.patterns, history
