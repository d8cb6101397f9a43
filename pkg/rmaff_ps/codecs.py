# -*- coding: UTF-8 -*-
"""
Image codecs
16-bit PNG (pypng) for images and encoded normal maps, 8-bit PNG for masks
and error maps, PFM for float ground truth.
"""

import logging
import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import png

from .core import NormalMap, angular_error_field
from .errors import InputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MAX16 = 65535
DEFAULT_MAX_DEGREES = 90.0


# ---------------------------------------------------------------------------
# PNG


def write_png(path: PathLike, pixels: np.ndarray, bitdepth: int = 16, compression: int = 9) -> None:
    """Write an (h, w) grey or (h, w, 3) RGB integer array"""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    h, w, planes = pixels.shape
    if planes not in (1, 3):
        raise InputError("PNG needs 1 or 3 channels, got {}".format(planes))
    limit = (1 << bitdepth) - 1
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > limit:
        raise InputError("Pixel values outside [0, {}] for a {}-bit PNG".format(limit, bitdepth))
    writer = png.Writer(width=w, height=h, greyscale=planes == 1, bitdepth=bitdepth, compression=compression)
    rows = pixels.astype(np.uint16 if bitdepth > 8 else np.uint8).reshape(h, w * planes)
    with open(path, "wb") as f:
        writer.write(f, rows.tolist())


def read_png(path: PathLike) -> Tuple[np.ndarray, int]:
    """(h, w, planes) integer array and its bit depth; alpha is dropped"""
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.array([np.asarray(r) for r in rows], dtype=np.uint32)
    except png.Error as e:
        raise InputError("{} is not a readable PNG: {}".format(path, e)) from e
    except OSError as e:
        raise InputError("Cannot read {}: {}".format(path, e)) from e
    planes = info["planes"]
    data = data.reshape(height, width, planes)
    if info.get("alpha"):
        data = data[..., : planes - 1]
    return data, info["bitdepth"]


def read_png_unit(path: PathLike) -> np.ndarray:
    """Pixel values scaled to [0, 1] by the file's bit depth"""
    data, bitdepth = read_png(path)
    return data.astype(np.float64) / ((1 << bitdepth) - 1)


def to_png16(values: np.ndarray, label: str = "image") -> np.ndarray:
    """[0, 1] floats to 16-bit integers; out-of-range values are clipped with a warning"""
    saturated = int(np.count_nonzero(values > 1.0))
    if saturated:
        logger.warning("%s: %s values above 1 clipped when quantising to 16 bits", label, saturated)
    return np.round(np.clip(values, 0.0, 1.0) * MAX16).astype(np.uint16)


# ---------------------------------------------------------------------------
# Normal maps


def encode_normals(normals: NormalMap) -> np.ndarray:
    """round((n + 1) / 2 * 65535) per component; masked-out pixels are (0, 0, 0)"""
    enc = np.round((normals.normals + 1.0) / 2.0 * MAX16)
    enc = np.where(normals.mask[..., None], enc, 0.0)
    return enc.astype(np.uint16)


def decode_normals(pixels: np.ndarray) -> NormalMap:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InputError("Encoded normals must be h x w x 3, got {}".format(pixels.shape))
    mask = np.any(pixels != 0, axis=2)
    field = pixels.astype(np.float64) / MAX16 * 2.0 - 1.0
    norms = np.linalg.norm(field, axis=2, keepdims=True)
    mask &= norms[..., 0] > 0.0
    field = np.where(mask[..., None], field / np.where(norms > 0.0, norms, 1.0), 0.0)
    return NormalMap(field, mask)


def write_normal_png(path: PathLike, normals: NormalMap) -> None:
    write_png(path, encode_normals(normals), bitdepth=16)


def read_normal_png(path: PathLike) -> NormalMap:
    data, bitdepth = read_png(path)
    if bitdepth != 16 or data.shape[2] != 3:
        raise InputError("{}: normal maps are 16-bit RGB PNGs (got {}-bit, {} planes)".format(path, bitdepth, data.shape[2]))
    return decode_normals(data)


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    """Little-endian PFM (scale -1), rows stored bottom-up"""
    values = np.asarray(values, dtype="<f4")
    if values.ndim == 3 and values.shape[2] == 1:
        values = values[..., 0]
    if values.ndim == 2:
        header = "Pf"
    elif values.ndim == 3 and values.shape[2] == 3:
        header = "PF"
    else:
        raise InputError("PFM holds (h, w) or (h, w, 3) arrays, got {}".format(values.shape))
    h, w = values.shape[:2]
    with open(path, "wb") as f:
        f.write("{}\n{} {}\n-1.0\n".format(header, w, h).encode("ascii"))
        f.write(np.ascontiguousarray(values[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    """(h, w) or (h, w, 3) float64 array, top row first"""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise InputError("Cannot read {}: {}".format(path, e)) from e
    match = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", blob)
    if not match:
        raise InputError("{} is not a PFM file".format(path))
    channels = 3 if match.group(1) == b"PF" else 1
    w, h = int(match.group(2)), int(match.group(3))
    scale = float(match.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    body = blob[match.end() :]
    expected = w * h * channels * 4
    if len(body) < expected:
        raise InputError("{}: expected {} bytes of pixel data, found {}".format(path, expected, len(body)))
    data = np.frombuffer(body[:expected], dtype=dtype).astype(np.float64)
    data = data.reshape((h, w, channels) if channels == 3 else (h, w))
    return data[::-1].copy()


def write_normal_pfm(path: PathLike, normals: NormalMap) -> None:
    write_pfm(path, normals.normals)


def read_normal_pfm(path: PathLike) -> NormalMap:
    """Zero vectors mark masked-out pixels; the rest are re-normalised"""
    data = read_pfm(path)
    if data.ndim != 3:
        raise InputError("{}: ground-truth normals need 3 channels".format(path))
    norms = np.linalg.norm(data, axis=2, keepdims=True)
    mask = norms[..., 0] > 0.0
    field = np.where(mask[..., None], data / np.where(norms > 0.0, norms, 1.0), 0.0)
    return NormalMap(field, mask)


def read_normals(path: PathLike) -> NormalMap:
    """Normal map from a .png (encoded) or .pfm (float) file"""
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_normal_pfm(path)
    if suffix == ".png":
        return read_normal_png(path)
    raise InputError("{}: normal maps are read from .png or .pfm files".format(path))


def write_normals(path: PathLike, normals: NormalMap) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        write_normal_pfm(path, normals)
    elif suffix == ".png":
        write_normal_png(path, normals)
    else:
        raise InputError("{}: normal maps are written as .png or .pfm files".format(path))


# ---------------------------------------------------------------------------
# Error maps


@lru_cache(maxsize=1)
def error_colormap() -> np.ndarray:
    """The published 256-entry colour table, (256, 3) uint8"""
    text = resources.files("rmaff_ps").joinpath("data/error_colormap.tsv").read_text(encoding="utf-8")
    rows = [line.split("\t") for line in text.splitlines() if line and not line.startswith("#")]
    table = np.array([[int(v) for v in row[1:4]] for row in rows], dtype=np.uint8)
    if table.shape != (256, 3):
        raise InputError("Colour table must have 256 entries, found {}".format(len(table)))
    table.setflags(write=False)
    return table


def colormap_index(errors: np.ndarray, max_degrees: float = DEFAULT_MAX_DEGREES) -> np.ndarray:
    if max_degrees <= 0:
        raise InputError("max_degrees must be positive, got {}".format(max_degrees))
    return np.clip(np.floor(np.asarray(errors) / max_degrees * 255.0 + 0.5), 0, 255).astype(np.intp)


def encode_error_map(pred: NormalMap, gt: NormalMap, max_degrees: float = DEFAULT_MAX_DEGREES) -> np.ndarray:
    """(h, w, 3) uint8 colour image; pixels outside the joint mask are black"""
    if pred.normals.shape != gt.normals.shape:
        raise InputError("Error map needs equal shapes, got {} and {}".format(pred.normals.shape, gt.normals.shape))
    mask = pred.mask & gt.mask
    errors = np.where(mask, angular_error_field(pred.normals, gt.normals), 0.0)
    rgb = error_colormap()[colormap_index(errors, max_degrees)]
    return np.where(mask[..., None], rgb, 0).astype(np.uint8)


def error_map_png(pred: NormalMap, gt: NormalMap, path: PathLike, max_degrees: float = DEFAULT_MAX_DEGREES) -> Path:
    # stored deflate: identical bytes from every zlib build
    write_png(path, encode_error_map(pred, gt, max_degrees), bitdepth=8, compression=0)
    return Path(path)
