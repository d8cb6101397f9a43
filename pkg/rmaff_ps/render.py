# -*- coding: UTF-8 -*-
"""
Synthetic scene rendering
Blobby heightfields, spatially varying Lambertian + Blinn-Phong materials,
attached and cast shadows, additive camera noise. Every rendered stack comes
with its exact ground-truth normal map.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.ndimage import map_coordinates

from .core import VIEW, ImageStack, LightSet, NormalMap, Rng, unit_normalize_field
from .errors import InputError

logger = logging.getLogger(__name__)

OCCLUSION_TOL = 1e-6


class Bump(BaseModel):
    """Anisotropic Gaussian bump; center and radii in pixels, amplitude in scene units"""

    center: Tuple[float, float]
    amplitude: float = 1.0
    radii: Tuple[float, float] = (4.0, 4.0)
    rotation: float = 0.0

    @field_validator("radii")
    @classmethod
    def _positive_radii(cls, value):
        if min(value) <= 0:
            raise ValueError("bump radii must be positive")
        return value


class Material(BaseModel):
    albedo: List[float] = Field(default_factory=lambda: [0.8, 0.8, 0.8], min_length=1)
    spec_strength: float = Field(0.0, ge=0.0)
    shininess: float = Field(1.0, ge=1.0)

    @field_validator("albedo")
    @classmethod
    def _albedo_range(cls, value):
        if any(a < 0.0 or a > 1.0 for a in value):
            raise ValueError("albedo values must lie in [0, 1]")
        return value


class MaterialRegion(Material):
    """Material painted over a rectangle (x0, y0, x1, y1) or a disc (cx, cy, r)"""

    shape: Literal["rect", "disc"] = "rect"
    rect: Optional[Tuple[float, float, float, float]] = None
    disc: Optional[Tuple[float, float, float]] = None

    @model_validator(mode="after")
    def _has_geometry(self):
        if self.shape == "rect" and self.rect is None:
            raise ValueError("rect region needs 'rect'")
        if self.shape == "disc" and self.disc is None:
            raise ValueError("disc region needs 'disc'")
        return self


class SceneSpec(BaseModel):
    name: Optional[str] = None
    width: int = Field(32, ge=1)
    height: int = Field(32, ge=1)
    pixel_pitch: float = Field(1.0, gt=0.0)
    channels: Literal[1, 3] = 3
    bumps: List[Bump] = Field(min_length=1)
    base: Material = Field(default_factory=Material)
    regions: List[MaterialRegion] = Field(default_factory=list)
    noise_sigma: float = Field(0.01, ge=0.0)
    cast_shadows: bool = False
    border: int = Field(0, ge=0)
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Heightfield:
    z: np.ndarray
    pixel_pitch: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.z).all():
            raise InputError("Heightfield elevations must be finite")
        if self.pixel_pitch <= 0:
            raise InputError("pixel_pitch must be positive")

    @property
    def height(self) -> int:
        return self.z.shape[0]

    @property
    def width(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True, eq=False)
class MaterialMap:
    albedo: np.ndarray  # h x w x c, [0, 1]
    spec_strength: np.ndarray  # h x w, >= 0
    shininess: np.ndarray  # h x w, >= 1


def make_heightfield(spec: SceneSpec) -> Heightfield:
    """Sum of rotated anisotropic Gaussian bumps, z = sum A exp(-q)"""
    if not spec.bumps:
        raise InputError("Scene needs at least one bump")
    rows, cols = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    z = np.zeros((spec.height, spec.width))
    for bump in spec.bumps:
        z += bump.amplitude * np.exp(-_bump_quadratic(bump, rows, cols))
    return Heightfield(z, spec.pixel_pitch)


def _bump_quadratic(bump: Bump, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    theta = math.radians(bump.rotation)
    dx = cols - bump.center[0]
    dy = rows - bump.center[1]
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    return 0.5 * ((u / bump.radii[0]) ** 2 + (v / bump.radii[1]) ** 2)


def heightfield_gradient(hf: Heightfield) -> Tuple[np.ndarray, np.ndarray]:
    """(dz/dcol, dz/drow) per scene unit; central inside, one-sided at borders"""
    grads = []
    for axis in (1, 0):
        if hf.z.shape[axis] < 2:
            grads.append(np.zeros_like(hf.z))
        else:
            grads.append(np.gradient(hf.z, hf.pixel_pitch, axis=axis))
    return grads[0], grads[1]


def heightfield_normals(hf: Heightfield) -> NormalMap:
    """Unit normals (-dz/dx, -dz/dy, 1); rows run along -y so dz/dy = -dz/drow"""
    dz_dcol, dz_drow = heightfield_gradient(hf)
    field = np.stack([-dz_dcol, dz_drow, np.ones_like(hf.z)], axis=-1)
    return NormalMap.from_field(field)


def make_material_map(spec: SceneSpec) -> MaterialMap:
    h, w, c = spec.height, spec.width, spec.channels
    albedo = np.empty((h, w, c))
    albedo[...] = _albedo_vector(spec.base.albedo, c)
    spec_strength = np.full((h, w), spec.base.spec_strength)
    shininess = np.full((h, w), spec.base.shininess)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    for region in spec.regions:
        if region.shape == "rect":
            x0, y0, x1, y1 = region.rect
            inside = (cols >= x0) & (cols < x1) & (rows >= y0) & (rows < y1)
        else:
            cx, cy, r = region.disc
            inside = (cols - cx) ** 2 + (rows - cy) ** 2 <= r * r
        albedo[inside] = _albedo_vector(region.albedo, c)
        spec_strength[inside] = region.spec_strength
        shininess[inside] = region.shininess
    return MaterialMap(albedo, spec_strength, shininess)


def _albedo_vector(values: Sequence[float], channels: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size == channels:
        return values
    if values.size == 1:
        return np.full(channels, values[0])
    if channels == 1:
        return np.array([values.mean()])
    raise InputError("Albedo has {} values for {} channels".format(values.size, channels))


def cast_shadow_visibility(hf: Heightfield, light: np.ndarray) -> np.ndarray:
    """
    Ray-march every pixel toward the light one pixel per step

    A pixel is shadowed when some sample along its ray (bilinear elevation)
    rises more than OCCLUSION_TOL above the ray.
    """
    lx, ly, lz = (float(c) for c in light)
    horizontal = math.hypot(lx, ly)
    h, w = hf.z.shape
    visible = np.ones((h, w), dtype=bool)
    if horizontal < 1e-12:
        return visible
    step_col = lx / horizontal
    step_row = -ly / horizontal
    rise = hf.pixel_pitch * lz / horizontal
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    z_max = float(hf.z.max())
    for t in range(1, int(math.ceil(math.hypot(h, w))) + 1):
        rr = rows + t * step_row
        cc = cols + t * step_col
        ray = hf.z + t * rise
        live = (rr >= 0) & (rr <= h - 1) & (cc >= 0) & (cc <= w - 1) & visible & (ray <= z_max + OCCLUSION_TOL)
        if not live.any():
            break
        sample = map_coordinates(hf.z, [rr[live], cc[live]], order=1, mode="nearest")
        blocked = np.zeros_like(visible)
        blocked[live] = sample > ray[live] + OCCLUSION_TOL
        visible &= ~blocked
    return visible


def shade(normals: NormalMap, mat: MaterialMap, light, s, rng: Optional[Rng], spec: SceneSpec, hf: Heightfield) -> np.ndarray:
    """
    One image of the scene under one directional light

    I = s [rho_d max(n.l, 0) + rho_s max(n.h, 0)^alpha [n.l > 0]] vis + noise,
    clamped at zero.
    """
    l = np.asarray(light, dtype=np.float64)
    n = normals.normals
    n_dot_l = n @ l
    lit = n_dot_l > 0.0
    half = unit_normalize_field(l + VIEW)
    n_dot_h = np.maximum(n @ half, 0.0)
    specular = mat.spec_strength * np.power(n_dot_h, mat.shininess) * lit
    radiance = mat.albedo * np.maximum(n_dot_l, 0.0)[..., None] + specular[..., None]
    if spec.cast_shadows:
        radiance = radiance * cast_shadow_visibility(hf, l)[..., None]
    image = np.asarray(s, dtype=np.float64) * radiance
    if spec.noise_sigma > 0.0 and rng is not None:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    return np.maximum(image, 0.0)


def render_scene(spec: SceneSpec, lights: LightSet) -> Tuple[ImageStack, NormalMap]:
    hf = make_heightfield(spec)
    normals = heightfield_normals(hf)
    mat = make_material_map(spec)
    noise = Rng(spec.seed).split("noise")
    images = np.stack(
        [
            shade(normals, mat, lights.directions[j], lights.intensities[j], noise.split(j), spec, hf)
            for j in range(lights.m)
        ]
    )
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    b = spec.border
    mask[b : spec.height - b, b : spec.width - b] = True
    return ImageStack(images, lights, mask), normals.with_mask(mask)


def render_dataset(specs: Sequence[SceneSpec], lights: LightSet, threads: int = 1) -> List[Tuple[ImageStack, NormalMap]]:
    """Render every scene under the same lights; output order follows specs"""
    if not specs:
        raise InputError("render_dataset needs at least one scene")
    if threads > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: render_scene(s, lights), specs))
    else:
        results = [render_scene(s, lights) for s in specs]
    logger.info("Rendered %s scenes under %s lights", len(results), lights.m)
    return results


def hemisphere_lights(count: int, rng: Rng, max_zenith_deg: float = 60.0, intensity_range=(1.0, 1.0)) -> LightSet:
    """Random directions uniform over the spherical cap around +z"""
    if count < 1:
        raise InputError("Need at least one light")
    cos_max = math.cos(math.radians(max_zenith_deg))
    cos_t = rng.uniform(cos_max, 1.0, count)
    phi = rng.uniform(0.0, 2.0 * math.pi, count)
    sin_t = np.sqrt(1.0 - cos_t**2)
    dirs = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    dirs = unit_normalize_field(dirs)
    lo, hi = intensity_range
    intensities = np.full(count, lo) if lo == hi else rng.uniform(lo, hi, count)
    return LightSet(dirs, intensities)


def ring_lights(count: int, zenith_deg: float = 45.0, intensity: float = 1.0) -> LightSet:
    """Evenly spaced azimuths on one zenith ring (six lights at 45 deg: 60 deg apart)"""
    if count < 1:
        raise InputError("Need at least one light")
    t = math.radians(zenith_deg)
    phi = np.arange(count) * (2.0 * math.pi / count)
    dirs = np.stack([math.sin(t) * np.cos(phi), math.sin(t) * np.sin(phi), np.full(count, math.cos(t))], axis=1)
    return LightSet(unit_normalize_field(dirs), np.full(count, intensity))


def random_scene_spec(
    rng: Rng,
    width: int = 64,
    height: int = 64,
    channels: int = 3,
    bumps: Tuple[int, int] = (2, 6),
    regions: Tuple[int, int] = (0, 3),
    specular_probability: float = 0.5,
    noise_sigma: float = 0.01,
    cast_shadows: bool = True,
    name: Optional[str] = None,
) -> SceneSpec:
    """Random blobby scene with a few material patches"""
    size = min(width, height)

    def material():
        albedo = rng.uniform(0.2, 1.0, channels).tolist()
        if rng.uniform() < specular_probability:
            return {"albedo": albedo, "spec_strength": float(rng.uniform(0.1, 0.8)), "shininess": float(rng.uniform(5.0, 60.0))}
        return {"albedo": albedo}

    bump_list = [
        Bump(
            center=(float(rng.uniform(0, width - 1)), float(rng.uniform(0, height - 1))),
            amplitude=float(rng.uniform(-0.4, 1.0) * size / 4.0),
            radii=(float(rng.uniform(0.08, 0.3) * size), float(rng.uniform(0.08, 0.3) * size)),
            rotation=float(rng.uniform(0.0, 180.0)),
        )
        for _ in range(int(rng.integers(bumps[0], bumps[1] + 1)))
    ]
    region_list = []
    for _ in range(int(rng.integers(regions[0], regions[1] + 1))):
        if rng.uniform() < 0.5:
            x0, y0 = rng.uniform(0, width * 0.7), rng.uniform(0, height * 0.7)
            rect = (float(x0), float(y0), float(x0 + rng.uniform(4, width / 2)), float(y0 + rng.uniform(4, height / 2)))
            region_list.append(MaterialRegion(shape="rect", rect=rect, **material()))
        else:
            disc = (float(rng.uniform(0, width)), float(rng.uniform(0, height)), float(rng.uniform(3, size / 3)))
            region_list.append(MaterialRegion(shape="disc", disc=disc, **material()))
    return SceneSpec(
        name=name,
        width=width,
        height=height,
        channels=channels,
        bumps=bump_list,
        base=Material(**material()),
        regions=region_list,
        noise_sigma=noise_sigma,
        cast_shadows=cast_shadows,
        seed=int(rng.integers(0, 2**31 - 1)),
    )
