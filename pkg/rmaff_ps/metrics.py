# -*- coding: UTF-8 -*-
"""
Angular-error metrics and report tables
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .core import NormalMap, angular_error_field
from .errors import InputError

logger = logging.getLogger(__name__)

PERCENTILES = (50, 75, 90)
AVG_COLUMN = "Avg."


def _joint_mask(pred: NormalMap, gt: NormalMap) -> np.ndarray:
    if pred.normals.shape != gt.normals.shape:
        raise InputError(
            "Prediction is {}x{} but ground truth is {}x{}".format(pred.width, pred.height, gt.width, gt.height)
        )
    mask = pred.mask & gt.mask
    if not mask.any():
        raise InputError("Prediction and ground truth share no masked-in pixels")
    return mask


def error_map(pred: NormalMap, gt: NormalMap) -> np.ndarray:
    """Per-pixel angular error in degrees; NaN outside the joint mask"""
    mask = _joint_mask(pred, gt)
    return np.where(mask, angular_error_field(pred.normals, gt.normals), np.nan)


def mae(pred: NormalMap, gt: NormalMap) -> float:
    """Mean angular error in degrees over the joint mask"""
    mask = _joint_mask(pred, gt)
    return float(np.mean(angular_error_field(pred.normals[mask], gt.normals[mask])))


@dataclass
class EvalReport:
    name: str
    mae: float
    errors: np.ndarray = field(repr=False)
    percentiles: Dict[int, float]
    pixels: int
    runtime: float = 0.0

    def summary(self) -> Dict[str, float]:
        out = {"name": self.name, "mae": self.mae, "pixels": self.pixels, "runtime": self.runtime}
        out.update({"p{}".format(p): v for p, v in self.percentiles.items()})
        return out

    def to_tsv(self) -> str:
        head = ["scene", "mae_deg"] + ["p{}_deg".format(p) for p in self.percentiles] + ["pixels", "seconds"]
        row = [self.name, "%.6f" % self.mae] + ["%.6f" % v for v in self.percentiles.values()] + [str(self.pixels), "%.3f" % self.runtime]
        return "\t".join(head) + "\n" + "\t".join(row) + "\n"


def evaluate(pred: NormalMap, gt: NormalMap, name: str = "scene", runtime: float = 0.0) -> EvalReport:
    errors = error_map(pred, gt)
    inside = errors[~np.isnan(errors)]
    value = float(np.mean(inside))
    pct = {p: float(np.percentile(inside, p)) for p in PERCENTILES}
    return EvalReport(name, value, errors, pct, int(inside.size), runtime)


def _fmt(value: float) -> str:
    return "{:.10g}".format(value)


def ablation_table(results: Mapping[str, Mapping[str, float]]) -> str:
    """
    Rows are variants, columns the scenes plus an "Avg." column

    Every variant must report the same scene names.
    """
    if not results:
        raise InputError("Ablation table needs at least one variant")
    variants = list(results)
    scenes = list(results[variants[0]])
    if not scenes:
        raise InputError("Ablation table needs at least one scene")
    for variant in variants[1:]:
        if set(results[variant]) != set(scenes):
            raise InputError("Variant {} reports scenes {} but {} reports {}".format(
                variant, sorted(results[variant]), variants[0], sorted(scenes)))
    lines = ["\t".join(["variant"] + scenes + [AVG_COLUMN])]
    for variant in variants:
        row = [float(results[variant][s]) for s in scenes]
        lines.append("\t".join([variant] + [_fmt(v) for v in row] + [_fmt(float(np.mean(row)))]))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> Tuple[List[str], Dict[str, List[float]]]:
    """Header columns and numeric rows of a TSV table written by this module"""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise InputError("Empty table")
    header = lines[0].split("\t")
    rows = {}
    for line in lines[1:]:
        cells = line.split("\t")
        rows[cells[0]] = [float(c) for c in cells[1:]]
    return header, rows


def sweep_table(rows: Sequence[Tuple[int, int, float]]) -> str:
    """(images, scale, mae) rows as TSV"""
    lines = ["images\tscale\tmae_deg"]
    lines += ["{}\t{}\t{}".format(m, s, _fmt(v)) for m, s, v in rows]
    return "\n".join(lines) + "\n"
