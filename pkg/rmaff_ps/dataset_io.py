# -*- coding: UTF-8 -*-
"""
Dataset directories

    lights.txt       one light per line: "lx ly lz s" or "lx ly lz sr sg sb"
    mask.png         8-bit, nonzero = inside
    img_000.png ...  16-bit grey or RGB, one per light
    normal_gt.pfm    optional float ground-truth normals
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .codecs import read_normal_pfm, read_png, read_png_unit, to_png16, write_normal_pfm, write_png
from .core import UNIT_TOL, ImageStack, LightSet, NormalMap, normalize_by_intensity
from .errors import InputError

logger = logging.getLogger(__name__)

LIGHTS_FILE = "lights.txt"
MASK_FILE = "mask.png"
GT_FILE = "normal_gt.pfm"
IMAGE_PATTERN = "img_{:03d}.png"

PathLike = Union[str, Path]


def write_lights(path: PathLike, lights: LightSet) -> None:
    rows = np.column_stack([lights.directions, lights.intensities.reshape(lights.m, -1)])
    text = "".join(" ".join("%.17g" % v for v in row) + "\n" for row in rows)
    Path(path).write_text(text, encoding="utf-8")


def read_lights(path: PathLike) -> LightSet:
    """Parse a lights file as stored; intensities are not folded into the images here"""
    path = Path(path)
    if not path.exists():
        raise InputError("Missing {}".format(path))
    directions, intensities = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError as e:
            raise InputError("{}:{}: {}".format(path, lineno, e)) from e
        if len(values) not in (4, 6):
            raise InputError("{}:{}: expected 4 or 6 numbers, got {}".format(path, lineno, len(values)))
        d = np.array(values[:3])
        if not np.isfinite(values).all():
            raise InputError("{}:{}: non-finite value".format(path, lineno))
        if d[2] <= 0.0:
            raise InputError("{}:{}: light points below the horizon (z = {})".format(path, lineno, d[2]))
        norm = float(np.linalg.norm(d))
        if abs(norm - 1.0) > UNIT_TOL:
            logger.debug("%s:%s: direction re-normalised (norm %.9g)", path, lineno, norm)
            d = d / norm
        directions.append(d)
        intensities.append(values[3:])
    if not directions:
        raise InputError("{} lists no lights".format(path))
    widths = {len(s) for s in intensities}
    if len(widths) != 1:
        raise InputError("{}: mixes single and per-channel intensities".format(path))
    s = np.array(intensities)
    return LightSet(np.array(directions), s[:, 0] if s.shape[1] == 1 else s)


def parse_image_subset(text: Optional[str]) -> Optional[List[int]]:
    """
    Index list from "20:96", "0,3,7" or a mix like "0:4,10"

    Ranges are half-open. None or an empty string means every image.
    """
    if text is None or not text.strip():
        return None
    indices: List[int] = []
    for part in text.split(","):
        part = part.strip()
        try:
            if ":" in part:
                lo, hi = part.split(":", 1)
                indices.extend(range(int(lo), int(hi)))
            else:
                indices.append(int(part))
        except ValueError as e:
            raise InputError("Bad image subset {!r}: {}".format(text, e)) from e
    if not indices or min(indices) < 0:
        raise InputError("Bad image subset {!r}".format(text))
    return indices


def save_dataset(directory: PathLike, stack: ImageStack, gt: Optional[NormalMap] = None) -> Path:
    """Write a stack (raw, not intensity-normalised) in the directory layout"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_lights(directory / LIGHTS_FILE, stack.lights)
    write_png(directory / MASK_FILE, stack.mask.astype(np.uint8) * 255, bitdepth=8)
    for j in range(stack.m):
        image = stack.images[j]
        pixels = image[..., 0] if stack.channels == 1 else image
        write_png(directory / IMAGE_PATTERN.format(j), to_png16(pixels, "{}/{}".format(directory.name, IMAGE_PATTERN.format(j))))
    if gt is not None:
        write_normal_pfm(directory / GT_FILE, gt)
    logger.info("Saved %s images to %s", stack.m, directory)
    return directory


def load_raw_dataset(directory: PathLike, images: Optional[Sequence[int]] = None) -> Tuple[ImageStack, Optional[NormalMap]]:
    """Dataset as stored: images in [0, 1], lights with their intensities"""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError("Dataset directory {} not found".format(directory))
    lights = read_lights(directory / LIGHTS_FILE)
    files = sorted(p.name for p in directory.glob("img_*.png"))
    expected = [IMAGE_PATTERN.format(j) for j in range(lights.m)]
    if files != expected:
        raise InputError(
            "{}: {} lists {} lights but found {} image files ({})".format(
                directory, LIGHTS_FILE, lights.m, len(files), ", ".join(sorted(set(files) ^ set(expected))[:4])
            )
        )
    if not (directory / MASK_FILE).exists():
        raise InputError("Missing {}".format(directory / MASK_FILE))
    mask_pixels, _ = read_png(directory / MASK_FILE)
    mask = mask_pixels[..., 0] > 0

    chosen = list(range(lights.m)) if images is None else list(images)
    bad = [j for j in chosen if j >= lights.m]
    if bad:
        raise InputError("{}: image index {} out of range (m = {})".format(directory, bad[0], lights.m))
    stack_images = []
    for j in chosen:
        name = IMAGE_PATTERN.format(j)
        image = read_png_unit(directory / name)
        if image.shape[:2] != mask.shape:
            raise InputError(
                "{}: {} is {}x{} but {} is {}x{}".format(directory, name, image.shape[1], image.shape[0], MASK_FILE, mask.shape[1], mask.shape[0])
            )
        if stack_images and image.shape != stack_images[0].shape:
            raise InputError("{}: {} has {} channels, {} has {}".format(directory, name, image.shape[2], IMAGE_PATTERN.format(chosen[0]), stack_images[0].shape[2]))
        stack_images.append(image)
    stack = ImageStack(np.stack(stack_images), lights.subset(chosen), mask)

    gt = None
    if (directory / GT_FILE).exists():
        gt = read_normal_pfm(directory / GT_FILE)
        if gt.normals.shape[:2] != mask.shape:
            raise InputError("{}: {} does not match {} dimensions".format(directory, GT_FILE, MASK_FILE))
        gt = gt.with_mask(mask)
    return stack, gt


def load_dataset(directory: PathLike, images: Optional[Sequence[int]] = None) -> Tuple[ImageStack, Optional[NormalMap]]:
    """Dataset ready for the solvers: intensity-normalised, unit-strength lights"""
    stack, gt = load_raw_dataset(directory, images)
    return normalize_by_intensity(stack), gt


def list_scene_dirs(root: PathLike) -> List[Path]:
    """root itself when it is a dataset, otherwise its dataset subdirectories by name"""
    root = Path(root)
    if (root / LIGHTS_FILE).exists():
        return [root]
    if not root.is_dir():
        raise InputError("Dataset root {} not found".format(root))
    scenes = sorted(p for p in root.iterdir() if p.is_dir() and (p / LIGHTS_FILE).exists())
    if not scenes:
        raise InputError("No dataset directories under {}".format(root))
    return scenes


def load_scenes(root: PathLike, images: Optional[Sequence[int]] = None) -> List[Tuple[str, ImageStack, NormalMap]]:
    """Every scene under root that carries ground truth, as (name, stack, gt)"""
    scenes = []
    for directory in list_scene_dirs(root):
        stack, gt = load_dataset(directory, images)
        if gt is None:
            logger.warning("Skipping %s: no %s", directory, GT_FILE)
            continue
        scenes.append((directory.name, stack, gt))
    if not scenes:
        raise InputError("No scenes with ground truth under {}".format(root))
    return scenes
