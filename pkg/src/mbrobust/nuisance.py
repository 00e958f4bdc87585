"""Frozen analytic variation model and bounded nuisance codes.

The variation model corrupts an image with a weighted sum of fixed masks::

    snow, rain, brightness:  clamp(x + sum_i z_i M_i, 0, 1)
    contrast:                clamp(x + (x - 0.5) * sum_i z_i M_i, 0, 1)

Masks are regenerated from ``(kind, dim, seed)`` and never change after
construction. Snow and rain codes live in ``[0, rho]^d`` (occluders only add
light); brightness and contrast codes live in ``[-rho, rho]^d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("snow", "rain", "brightness", "contrast")
NONNEGATIVE_KINDS = frozenset({"snow", "rain"})
MAX_LEVEL = 5

# Per-level code magnitude. Snow/rain values are tuned so that level-5
# corruption takes a clean-trained synthetic classifier well below 80% accuracy.
DEFAULT_RHO_UNIT = {"snow": 0.1, "rain": 0.1, "brightness": 0.06, "contrast": 0.12}


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}; expected one of {KINDS}")


def severity_rho(kind: str, level: int, rho_unit: float | None = None) -> float:
    """Linear level -> rho map, ``level * rho_unit``; level 0 is clean."""
    _check_kind(kind)
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"severity level must be an integer in 0..{MAX_LEVEL}, got {level!r}")
    unit = DEFAULT_RHO_UNIT[kind] if rho_unit is None else float(rho_unit)
    if unit < 0:
        raise ValueError(f"rho_unit must be nonnegative, got {unit}")
    return float(level) * unit


@dataclass(frozen=True)
class SeveritySpace:
    kind: str
    rho: float
    dim: int = 16
    level: int | None = None

    def __post_init__(self):
        _check_kind(self.kind)
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        # float32-representable bound, so clipped float32 codes never overshoot it
        object.__setattr__(self, "rho", float(np.float32(self.rho)))

    @classmethod
    def at_level(cls, kind: str, level: int, dim: int = 16, rho_unit: float | None = None) -> "SeveritySpace":
        return cls(kind, severity_rho(kind, level, rho_unit), dim, level)

    @property
    def lower(self) -> float:
        return 0.0 if self.kind in NONNEGATIVE_KINDS else -self.rho

    @property
    def upper(self) -> float:
        return self.rho

    @property
    def center(self) -> float:
        return 0.5 * (self.lower + self.upper)


def sample_uniform(space: SeveritySpace, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """I.i.d. uniform codes in the space's box; shape (dim,) or (n, dim)."""
    size = (space.dim,) if n is None else (n, space.dim)
    if space.rho == 0:
        rng.random(size)  # keep stream consumption independent of rho
        return np.zeros(size, dtype=np.float32)
    u = rng.random(size)
    return (space.lower + (space.upper - space.lower) * u).astype(np.float32)


def project(space: SeveritySpace, z) -> np.ndarray:
    """Coordinate-wise clamp into the space's box."""
    z = np.asarray(z)
    dtype = z.dtype if z.dtype.kind == "f" else np.float32
    return np.clip(z, space.lower, space.upper).astype(dtype, copy=False)


# basis construction


def _grid(size: int):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _snow_masks(rng, dim, size):
    yy, xx = _grid(size)
    masks = []
    for _ in range(dim):
        m = np.zeros((size, size))
        for _ in range(3):
            cy, cx = rng.uniform(-2, size + 1, 2)
            s = rng.uniform(1.2, 3.0)
            m += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        masks.append(np.repeat(m[None], 3, axis=0))
    return masks


def _rain_masks(rng, dim, size):
    yy, xx = _grid(size)
    base_angle = rng.uniform(np.deg2rad(95), np.deg2rad(115))
    tint = np.array([0.85, 0.9, 1.0])[:, None, None]
    masks = []
    for _ in range(dim):
        m = np.zeros((size, size))
        for _ in range(4):
            ang = base_angle + rng.normal(0, np.deg2rad(3))
            dy, dx = np.sin(ang), np.cos(ang)
            cy, cx = rng.uniform(0, size, 2)
            half = rng.uniform(5, 11)
            along = (yy - cy) * dy + (xx - cx) * dx
            across = -(yy - cy) * dx + (xx - cx) * dy
            m += np.exp(-across ** 2 / (2 * 0.6 ** 2)) * (np.abs(along) <= half)
        masks.append(m[None] * tint)
    return masks


def _smooth_fields(rng, dim, size):
    yy, xx = _grid(size)
    u, v = (xx + 0.5) / size - 0.5, (yy + 0.5) / size - 0.5
    fields = [np.ones((size, size)), u, v, u * v]
    while len(fields) < dim:
        fx, fy = rng.integers(0, 3, 2)
        phase = rng.uniform(0, 2 * np.pi)
        fields.append(np.cos(2 * np.pi * (fx * u + fy * v) + phase))
    masks = []
    for i, f in enumerate(fields[:dim]):
        if i < 4:
            tint = np.ones(3)
        else:
            tint = 1.0 + 0.3 * rng.standard_normal(3)
        masks.append(f[None] * tint[:, None, None])
    return masks


@dataclass(frozen=True)
class NuisanceBasis:
    kind: str
    dim: int
    seed: int
    masks: np.ndarray = field(repr=False, compare=False)  # (dim, C, H, W), float32

    @property
    def flat(self) -> np.ndarray:
        return self.masks.reshape(self.dim, -1)


@lru_cache(maxsize=32)
def make_basis(kind: str, dim: int = 16, seed: int = 0, size: int = 32, channels: int = 3) -> NuisanceBasis:
    """Procedurally generated masks, each normalised to unit max-abs value."""
    _check_kind(kind)
    if dim < 1:
        raise ValueError(f"basis dimension must be >= 1, got {dim}")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    build = {"snow": _snow_masks, "rain": _rain_masks}.get(kind, _smooth_fields)
    masks = np.stack(build(rng, dim, size))
    if channels == 1:
        masks = masks.mean(axis=1, keepdims=True)
    peak = np.abs(masks).reshape(dim, -1).max(axis=1)
    masks = masks / peak[:, None, None, None]
    if kind in NONNEGATIVE_KINDS:
        masks = np.clip(masks, 0.0, 1.0)
    masks = masks.astype(np.float32)
    masks.setflags(write=False)
    return NuisanceBasis(kind, dim, seed, masks)


def apply(basis: NuisanceBasis, x, z) -> Tensor:
    """Corrupt images ``x`` (B, C, H, W) with codes ``z`` (B, d) or a shared (d,).

    Differentiable in both ``x`` and ``z`` when they are tracked tensors.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=x.dtype))
    if x.ndim != 4 or x.shape[1:] != basis.masks.shape[1:]:
        raise T.ShapeError(f"image batch {x.shape} does not match basis masks {basis.masks.shape[1:]}")
    if z.shape[-1] != basis.dim:
        raise T.ShapeError(f"code dimension {z.shape[-1]} does not match basis dimension {basis.dim}")
    if z.ndim == 1:
        z = T.reshape(z, (1, basis.dim))
    if z.ndim != 2 or z.shape[0] not in (1, x.shape[0]):
        raise T.ShapeError(f"codes {z.shape} do not match batch of {x.shape[0]} images")
    masks = Tensor(basis.flat, dtype=x.dtype)
    field_ = T.reshape(T.matmul(z, masks), (z.shape[0],) + x.shape[1:])
    if basis.kind == "contrast":
        delta = T.mul(T.add_scalar(x, -0.5), field_)
    else:
        delta = field_
    return T.clamp(T.add(x, delta), 0.0, 1.0)


def corrupt(basis: NuisanceBasis, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Untracked convenience wrapper returning a plain array."""
    return apply(basis, Tensor(np.asarray(x)), Tensor(np.asarray(z, dtype=np.float32))).data
