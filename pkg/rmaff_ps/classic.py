# -*- coding: UTF-8 -*-
"""
Calibrated Lambertian least-squares photometric stereo
Per pixel, solve L g = b over the lights that are not in shadow; the
normal is g / |g| and the albedo |g|.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .core import ImageStack, NormalMap, unit_normalize_field
from .errors import InputError

logger = logging.getLogger(__name__)

PIXEL_CHUNK = 1 << 16


class L2Options(BaseModel):
    shadow_threshold: float = Field(0.02, ge=0.0, description="fraction of the stack's peak intensity")
    min_lights: int = Field(3, ge=3)
    max_condition: float = Field(1e8, gt=1.0)


class L2Result(NamedTuple):
    normals: NormalMap
    albedo: np.ndarray
    degenerate: int
    residual: np.ndarray


def solve_pixels(
    L: np.ndarray, b: np.ndarray, valid: np.ndarray, min_lights: int = 3, max_condition: float = 1e8
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normal-equation least squares for P pixels at once

    Args:
        L: (m, 3) light directions
        b: (P, m) observations, or (P, m, c) for per-channel solves
        valid: (P, m) observations kept after shadow thresholding

    Returns:
        g of shape (P, 3) or (P, c, 3), and the (P,) mask of solvable pixels
    """
    w = valid.astype(np.float64)
    A = np.einsum("pk,ki,kj->pij", w, L, L)
    eig = np.linalg.eigvalsh(A)
    lo, hi = eig[:, 0], eig[:, -1]
    ok = (valid.sum(axis=1) >= min_lights) & (lo > 0.0) & (hi <= max_condition * np.where(lo > 0.0, lo, np.inf))
    per_channel = b.ndim == 3
    bc = b if per_channel else b[..., None]
    rhs = np.einsum("pk,pkc,ki->pic", w, bc, L)
    g = np.zeros(rhs.shape)
    if ok.any():
        g[ok] = np.linalg.solve(A[ok], rhs[ok])
    g = np.moveaxis(g, 1, 2)  # (P, c, 3)
    return (g if per_channel else g[:, 0, :]), ok


def _canonical_order(stack: ImageStack) -> np.ndarray:
    """Order observations independently of how the stack was permuted"""
    d = stack.lights.directions
    content = stack.images.reshape(stack.m, -1).sum(axis=1)
    return np.lexsort((content, d[:, 2], d[:, 1], d[:, 0]))


def l2_solve(stack: ImageStack, opts: L2Options = None, threads: int = 1) -> L2Result:
    """Least-squares normals and albedo for every masked-in pixel of an intensity-normalised stack"""
    opts = opts or L2Options()
    if stack.m < 3:
        raise InputError("Least squares needs at least 3 images, got {}".format(stack.m))
    order = _canonical_order(stack)
    L = stack.lights.directions[order]
    images = stack.images[order].astype(np.float64)
    h, w, c = stack.height, stack.width, stack.channels

    pix = np.flatnonzero(stack.mask.reshape(-1))
    obs = images.reshape(stack.m, h * w, c)[:, pix, :].transpose(1, 0, 2)  # (P, m, c)
    gray = obs.mean(axis=2)
    peak = float(gray.max()) if gray.size else 0.0
    threshold = opts.shadow_threshold * peak
    valid = gray >= threshold

    def solve_chunk(sl):
        g, ok = solve_pixels(L, gray[sl], valid[sl], opts.min_lights, opts.max_condition)
        gc, _ = solve_pixels(L, obs[sl], valid[sl], opts.min_lights, opts.max_condition)
        return g, ok, gc

    chunks = [slice(i, i + PIXEL_CHUNK) for i in range(0, len(pix), PIXEL_CHUNK)] or [slice(0, 0)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(solve_chunk, chunks))
    else:
        parts = [solve_chunk(sl) for sl in chunks]
    g = np.concatenate([p[0] for p in parts])
    ok = np.concatenate([p[1] for p in parts])
    gc = np.concatenate([p[2] for p in parts])

    ok &= np.linalg.norm(g, axis=1) > 0.0
    degenerate = int(len(pix) - ok.sum())
    if degenerate:
        logger.warning("Least squares masked out %s degenerate pixels", degenerate)

    field = np.zeros((h * w, 3))
    field[pix[ok]] = unit_normalize_field(g[ok])
    mask = np.zeros(h * w, dtype=bool)
    mask[pix[ok]] = True

    albedo = np.zeros((h * w, c))
    albedo[pix[ok]] = np.linalg.norm(gc[ok], axis=2)

    fit = np.einsum("pi,ki->pk", g, L)
    resid = np.sqrt(np.sum(np.where(valid, fit - gray, 0.0) ** 2, axis=1))
    residual = np.zeros(h * w)
    residual[pix[ok]] = resid[ok]

    normals = NormalMap(field.reshape(h, w, 3), mask.reshape(h, w))
    return L2Result(normals, albedo.reshape(h, w, c), degenerate, residual.reshape(h, w))
