# -*- coding: UTF-8 -*-
"""
Core photometric-stereo types
Normal maps, light sets, image stacks and the counter-based random streams
shared by every other module.

Coordinate frame: x right, y up, z toward the camera; the view direction is
(0, 0, 1). Image rows grow downward, so a row index runs along -y.
"""

import logging
import math
import threading
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import InputError

logger = logging.getLogger(__name__)

EPS_NORM = 1e-12
UNIT_TOL = 1e-6
VIEW = np.array([0.0, 0.0, 1.0])


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def dot(self, other: "Vec3") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def norm(self) -> float:
        return math.sqrt(self.dot(self))


VecLike = Union[Vec3, Sequence[float], np.ndarray]


class _DegenerateCounter:
    """Thread-safe count of zero-norm vectors passed to unit_normalize"""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def value(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


degenerate_normals = _DegenerateCounter()


def _as_vec3(v: VecLike) -> Vec3:
    if isinstance(v, Vec3):
        return v
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise InputError("Expected a 3-vector, got shape {}".format(np.shape(v)))
    return Vec3(float(arr[0]), float(arr[1]), float(arr[2]))


def unit_normalize(v: VecLike) -> Vec3:
    """
    Scale a vector to unit length

    A vector whose norm is at most EPS_NORM maps to (0, 0, 1) and bumps the
    degenerate-normal counter.
    """
    v = _as_vec3(v)
    if not all(math.isfinite(c) for c in v):
        raise InputError("unit_normalize needs a finite vector, got {}".format(tuple(v)))
    n = v.norm()
    if n <= EPS_NORM:
        degenerate_normals.add()
        logger.warning("Degenerate zero-norm vector replaced by (0, 0, 1)")
        return Vec3(0.0, 0.0, 1.0)
    return Vec3(v.x / n, v.y / n, v.z / n)


def unit_normalize_field(field: np.ndarray) -> np.ndarray:
    """Vectorised unit_normalize over the last axis (size 3) of an array"""
    field = np.asarray(field, dtype=np.float64)
    norms = np.sqrt(np.einsum("...k,...k->...", field, field))
    degenerate = norms <= EPS_NORM
    out = np.empty_like(field)
    safe = np.where(degenerate, 1.0, norms)
    out[...] = field / safe[..., None]
    if degenerate.any():
        count = int(degenerate.sum())
        degenerate_normals.add(count)
        logger.warning("%s degenerate zero-norm vectors replaced by (0, 0, 1)", count)
        out[degenerate] = (0.0, 0.0, 1.0)
    return out


def angular_error(a: VecLike, b: VecLike) -> float:
    """Angle in degrees between two unit vectors, clamped so equal inputs give exactly 0"""
    a = _as_vec3(a)
    b = _as_vec3(b)
    if not all(math.isfinite(c) for c in (*a, *b)):
        raise InputError("angular_error needs finite vectors")
    if a == b:
        return 0.0
    cos = min(1.0, max(-1.0, a.dot(b)))
    return math.degrees(math.acos(cos))


def angular_error_field(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-element angular error in degrees over the last axis"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InputError("angular_error needs finite vectors")
    cos = np.clip(np.einsum("...k,...k->...", a, b), -1.0, 1.0)
    return np.where(np.all(a == b, axis=-1), 0.0, np.degrees(np.arccos(cos)))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Per-pixel unit normals (h, w, 3) with a validity mask (h, w)"""

    normals: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        normals = np.asarray(self.normals, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if normals.ndim != 3 or normals.shape[2] != 3:
            raise InputError("Normal map must be h x w x 3, got {}".format(normals.shape))
        if mask.shape != normals.shape[:2]:
            raise InputError(
                "Mask shape {} does not match normal map {}".format(mask.shape, normals.shape[:2])
            )
        normals = np.where(mask[..., None], normals, 0.0)
        if mask.any():
            norms = np.linalg.norm(normals[mask], axis=1)
            if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
                raise InputError(
                    "Masked-in normals must be unit length (worst deviation {:.3g})".format(
                        float(np.max(np.abs(norms - 1.0)))
                    )
                )
        object.__setattr__(self, "normals", _frozen(normals))
        object.__setattr__(self, "mask", _frozen(mask))

    @classmethod
    def from_field(cls, field: np.ndarray, mask: Optional[np.ndarray] = None) -> "NormalMap":
        """Normalise an arbitrary vector field and wrap it"""
        field = unit_normalize_field(field)
        if mask is None:
            mask = np.ones(field.shape[:2], dtype=bool)
        return cls(field, mask)

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]

    def crop(self, row: int, col: int, height: int, width: int) -> "NormalMap":
        return NormalMap(
            self.normals[row : row + height, col : col + width],
            self.mask[row : row + height, col : col + width],
        )

    def with_mask(self, mask: np.ndarray) -> "NormalMap":
        return NormalMap(self.normals, np.logical_and(self.mask, mask))


@dataclass(frozen=True, eq=False)
class LightSet:
    """Calibrated unit light directions (m, 3) and intensities (m,) or (m, c)"""

    directions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        directions = np.asarray(self.directions, dtype=np.float64)
        intensities = np.asarray(self.intensities, dtype=np.float64)
        if directions.ndim != 2 or directions.shape[1] != 3 or directions.shape[0] < 1:
            raise InputError("Light directions must be m x 3 with m >= 1, got {}".format(directions.shape))
        if intensities.ndim not in (1, 2) or intensities.shape[0] != directions.shape[0]:
            raise InputError(
                "Expected {} light intensities, got shape {}".format(directions.shape[0], intensities.shape)
            )
        if not (np.isfinite(directions).all() and np.isfinite(intensities).all()):
            raise InputError("Light directions and intensities must be finite")
        norms = np.linalg.norm(directions, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise InputError("Light {} direction is not unit length".format(int(bad[0])))
        below = np.flatnonzero(directions[:, 2] <= 0.0)
        if below.size:
            raise InputError(
                "Light {} points below the horizon (z = {})".format(int(below[0]), directions[below[0], 2])
            )
        object.__setattr__(self, "directions", _frozen(directions))
        object.__setattr__(self, "intensities", _frozen(intensities))

    @classmethod
    def uniform(cls, directions: np.ndarray, intensity: float = 1.0) -> "LightSet":
        directions = np.asarray(directions, dtype=np.float64)
        return cls(directions, np.full(directions.shape[0], intensity))

    @property
    def m(self) -> int:
        return self.directions.shape[0]

    def __len__(self) -> int:
        return self.m

    def subset(self, indices: Sequence[int]) -> "LightSet":
        idx = np.asarray(indices, dtype=np.intp)
        return LightSet(self.directions[idx], self.intensities[idx])


@dataclass(frozen=True, eq=False)
class ImageStack:
    """m images (m, h, w, c) sharing one LightSet and one mask"""

    images: np.ndarray
    lights: LightSet
    mask: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.dtype not in (np.float32, np.float64):
            images = images.astype(np.float64)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise InputError("Image stack must be m x h x w x c, got {}".format(images.shape))
        mask = np.asarray(self.mask, dtype=bool)
        if images.shape[0] != self.lights.m:
            raise InputError(
                "Stack has {} images but {} lights".format(images.shape[0], self.lights.m)
            )
        if mask.shape != images.shape[1:3]:
            raise InputError("Mask shape {} does not match images {}".format(mask.shape, images.shape[1:3]))
        if self.lights.intensities.ndim == 2 and self.lights.intensities.shape[1] != images.shape[3]:
            raise InputError(
                "Per-channel intensities have {} channels, images have {}".format(
                    self.lights.intensities.shape[1], images.shape[3]
                )
            )
        if np.any(images < 0) or not np.isfinite(images).all():
            raise InputError("Image values must be finite and non-negative")
        object.__setattr__(self, "images", _frozen(images))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def m(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, indices: Sequence[int]) -> "ImageStack":
        idx = np.asarray(indices, dtype=np.intp)
        return ImageStack(self.images[idx], self.lights.subset(idx), self.mask)

    def crop(self, row: int, col: int, height: int, width: int) -> "ImageStack":
        return ImageStack(
            self.images[:, row : row + height, col : col + width],
            self.lights,
            self.mask[row : row + height, col : col + width],
        )


def normalize_by_intensity(stack: ImageStack) -> ImageStack:
    """Divide each image by its light intensity so every light becomes unit strength"""
    s = stack.lights.intensities
    bad = np.flatnonzero(np.any(np.reshape(s, (s.shape[0], -1)) <= 0.0, axis=1))
    if bad.size:
        raise InputError("Light {} has non-positive intensity".format(int(bad[0])))
    if np.all(s == 1.0):
        return stack
    scale = s[:, None, None, None] if s.ndim == 1 else s[:, None, None, :]
    lights = LightSet(stack.lights.directions, np.ones(s.shape[0]))
    return ImageStack(stack.images / scale, lights, stack.mask)


class Rng:
    """
    Counter-based random stream

    Wraps numpy's Philox generator keyed by (seed, stream path). Child
    streams are derived by name, so what a consumer draws never depends on
    what other consumers drew before it.
    """

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed) % (1 << 64)
        self.stream = tuple(stream)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def split(self, name: Union[str, int]) -> "Rng":
        key = name if isinstance(name, int) else zlib.crc32(str(name).encode("utf-8"))
        return Rng(self.seed, self.stream + (int(key),))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.generator.permutation(x)

    def get_state(self) -> dict:
        """JSON-friendly snapshot of the generator position"""
        return {"seed": self.seed, "stream": list(self.stream), "bit_generator": _jsonable(self.generator.bit_generator.state)}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["stream"]))
        rng.generator.bit_generator.state = _from_jsonable(state["bit_generator"])
        return rng


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return {"__ndarray__": [int(x) for x in value.tolist()], "dtype": str(value.dtype)}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value):
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


def dtype_for(precision: str):
    """numpy dtype for a precision flag"""
    if precision == "f64":
        return np.float64
    if precision == "f32":
        return np.float32
    raise InputError("Unknown precision {!r}; expected 'f32' or 'f64'".format(precision))
