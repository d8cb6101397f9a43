# -*- coding: UTF-8 -*-
"""
End-to-end jobs shared by the command line and the MCP tools
Each function takes plain paths and a ToolkitConfig, does one job and
returns a result object; none of them prints.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from config import PS_DETERMINISTIC, PS_THREADS

from .checkpoint import Checkpoint, load_checkpoint, network_from_checkpoint
from .classic import l2_solve
from .codecs import error_map_png, read_normals, write_normals
from .core import ImageStack, LightSet, NormalMap, Rng
from .dataset_io import load_dataset, load_scenes, save_dataset
from .errors import InputError
from .gradcheck import GradCheckReport, run_suite
from .metrics import EvalReport, ablation_table, evaluate, mae, sweep_table
from .network import RMAFFPSN, network_forward
from .render import SceneSpec, hemisphere_lights, random_scene_spec, render_scene, ring_lights
from .settings import VARIANTS, ToolkitConfig
from .train import fit, split_dataset

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
METHODS = ("l2", "rmaff")
T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Sequence[T], threads: int = PS_THREADS) -> List[R]:
    """Order-preserving map over a thread pool; serial for one thread"""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


# ---------------------------------------------------------------------------
# Rendering


def make_lights(cfg: ToolkitConfig) -> LightSet:
    lc = cfg.render.lights
    if lc.kind == "ring":
        return ring_lights(lc.count, lc.zenith_deg, lc.intensity_range[0])
    return hemisphere_lights(lc.count, Rng(cfg.seed).split("lights"), lc.max_zenith_deg, tuple(lc.intensity_range))


def scene_specs(cfg: ToolkitConfig) -> List[SceneSpec]:
    """Scenes listed in the config followed by the requested number of random ones"""
    rc = cfg.render
    specs = [s if s.name else s.model_copy(update={"name": "custom_{:03d}".format(i)}) for i, s in enumerate(rc.scenes)]
    base = Rng(cfg.seed).split("scenes")
    for i in range(rc.random_scenes):
        specs.append(
            random_scene_spec(
                base.split(i),
                width=rc.width,
                height=rc.height,
                channels=rc.channels,
                specular_probability=rc.specular_probability,
                noise_sigma=rc.noise_sigma,
                cast_shadows=rc.cast_shadows,
                name="scene_{:03d}".format(i),
            )
        )
    if not specs:
        raise InputError("Config renders no scenes (no scenes listed and random_scenes = 0)")
    return specs


def render_to_dir(cfg: ToolkitConfig, out_dir: PathLike, threads: int = PS_THREADS) -> List[Path]:
    """Render every configured scene into <out_dir>/<scene name>/ in the dataset layout"""
    out = Path(out_dir)
    lights = make_lights(cfg)
    specs = scene_specs(cfg)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InputError("Scene names must be unique")

    def job(spec: SceneSpec) -> Path:
        stack, gt = render_scene(spec, lights)
        return save_dataset(out / spec.name, stack, gt)

    dirs = parallel_map(job, specs, threads)
    logger.info("Rendered %s scenes under %s lights into %s", len(dirs), lights.m, out)
    return dirs


# ---------------------------------------------------------------------------
# Solving and evaluation


def solve_stack(stack: ImageStack, method: str = "l2", net: Optional[RMAFFPSN] = None, cfg: Optional[ToolkitConfig] = None, threads: int = PS_THREADS) -> NormalMap:
    if method == "l2":
        return l2_solve(stack, (cfg or ToolkitConfig()).l2, threads).normals
    if method == "rmaff":
        if net is None:
            raise InputError("--method rmaff needs a checkpoint")
        return network_forward(stack, net, "eval")
    raise InputError("Unknown method {!r}; expected one of {}".format(method, ", ".join(METHODS)))


def load_network(checkpoint: Optional[PathLike]) -> Optional[RMAFFPSN]:
    return network_from_checkpoint(load_checkpoint(checkpoint)) if checkpoint is not None else None


def solve_dataset(
    dataset_dir: PathLike,
    out: PathLike,
    method: str = "l2",
    checkpoint: Optional[PathLike] = None,
    images: Optional[Sequence[int]] = None,
    cfg: Optional[ToolkitConfig] = None,
    threads: int = PS_THREADS,
) -> Tuple[NormalMap, float]:
    """Estimate normals for one dataset and write them to out (.png or .pfm); returns (normals, seconds)"""
    stack, _ = load_dataset(dataset_dir, images)
    net = load_network(checkpoint) if method == "rmaff" else None
    started = time.perf_counter()
    normals = solve_stack(stack, method, net, cfg, threads)
    seconds = time.perf_counter() - started
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_normals(out, normals)
    logger.info("Solved %s with %s in %.2fs -> %s", dataset_dir, method, seconds, out)
    return normals, seconds


def evaluate_prediction(
    pred_path: PathLike,
    dataset_dir: PathLike,
    out_dir: Optional[PathLike] = None,
    max_degrees: float = 90.0,
    runtime: float = 0.0,
) -> EvalReport:
    """Compare a predicted normal map against a dataset's ground truth; optionally write report + error map"""
    pred = read_normals(pred_path)
    _, gt = load_dataset(dataset_dir)
    if gt is None:
        raise InputError("{} has no ground-truth normals".format(dataset_dir))
    if pred.normals.shape != gt.normals.shape:
        raise InputError(
            "{} is {}x{} but {} ground truth is {}x{}".format(pred_path, pred.width, pred.height, dataset_dir, gt.width, gt.height)
        )
    report = evaluate(pred, gt, Path(dataset_dir).name, runtime)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
        error_map_png(pred, gt, out / "error_map.png", max_degrees)
    return report


# ---------------------------------------------------------------------------
# Training, ablation, sweeps


def load_training_scenes(cfg: ToolkitConfig, train_dir: PathLike) -> Tuple[list, list]:
    scenes = load_scenes(train_dir)
    return split_dataset(scenes, cfg.train.val_fraction, Rng(cfg.train.seed).split("split"))


def train_from_dir(
    cfg: ToolkitConfig,
    train_dir: PathLike,
    out_dir: PathLike,
    resume: Optional[PathLike] = None,
    stop_after: Optional[int] = None,
    deterministic: bool = PS_DETERMINISTIC,
) -> Checkpoint:
    train, val = load_training_scenes(cfg, train_dir)
    logger.info("Training on %s scenes, validating on %s", len(train), len(val))
    return fit(train, val, cfg, out_dir, resume=resume, stop_after=stop_after, deterministic=deterministic)


def score_scenes(net: Optional[RMAFFPSN], scenes: Sequence, method: str, cfg: ToolkitConfig, threads: int = PS_THREADS) -> Dict[str, float]:
    """Per-scene MAE, evaluated in parallel over scenes"""

    def job(item) -> float:
        name, stack, gt = item
        return mae(solve_stack(stack, method, net, cfg, 1), gt)

    values = parallel_map(job, list(scenes), threads)
    return {name: v for (name, _, _), v in zip(scenes, values)}


def ablate(
    cfg: ToolkitConfig,
    train_dir: PathLike,
    out_dir: PathLike,
    test_dir: Optional[PathLike] = None,
    variants: Sequence[str] = VARIANTS,
    deterministic: bool = PS_DETERMINISTIC,
    threads: int = PS_THREADS,
) -> str:
    """Train and score every variant on the same scenes; returns (and writes) the TSV table"""
    out = Path(out_dir)
    train, val = load_training_scenes(cfg, train_dir)
    test = load_scenes(test_dir) if test_dir is not None else val
    results: Dict[str, Dict[str, float]] = {}
    for variant in variants:
        vcfg = cfg.model_copy(update={"network": cfg.network.model_copy(update={"variant": variant})})
        best = fit(train, val, vcfg, out / variant, deterministic=deterministic)
        results[variant] = score_scenes(network_from_checkpoint(best), test, "rmaff", vcfg, threads)
        logger.info("Variant %s: mean MAE %.3f deg", variant, float(np.mean(list(results[variant].values()))))
    table = ablation_table(results)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    return table


def downscale(stack: ImageStack, gt: Optional[NormalMap], factor: int) -> Tuple[ImageStack, Optional[NormalMap]]:
    """Every factor-th pixel in both directions"""
    if factor < 1:
        raise InputError("Scale factor must be at least 1, got {}".format(factor))
    if factor == 1:
        return stack, gt
    small = ImageStack(stack.images[:, ::factor, ::factor], stack.lights, stack.mask[::factor, ::factor])
    small_gt = NormalMap(gt.normals[::factor, ::factor], gt.mask[::factor, ::factor]) if gt is not None else None
    return small, small_gt


def spread_indices(m: int, count: int) -> List[int]:
    """count light indices spread evenly over 0..m-1"""
    if count < 1 or count > m:
        raise InputError("Cannot pick {} of {} images".format(count, m))
    return sorted(set(int(i) for i in np.round(np.linspace(0, m - 1, count))))


def sweep(
    dataset_dir: PathLike,
    method: str,
    light_counts: Sequence[int],
    scales: Sequence[int] = (1,),
    checkpoint: Optional[PathLike] = None,
    cfg: Optional[ToolkitConfig] = None,
    threads: int = PS_THREADS,
) -> str:
    """MAE as a function of the number of input images and of the test resolution"""
    stack, gt = load_dataset(dataset_dir)
    if gt is None:
        raise InputError("{} has no ground-truth normals".format(dataset_dir))
    net = load_network(checkpoint) if method == "rmaff" else None
    rows = []
    for count in light_counts:
        subset = stack.subset(spread_indices(stack.m, count))
        for factor in scales:
            small, small_gt = downscale(subset, gt, factor)
            rows.append((subset.m, factor, mae(solve_stack(small, method, net, cfg, threads), small_gt)))
    return sweep_table(rows)


def gradcheck(cfg: ToolkitConfig, seed: int, probes: int = 8, full_network: bool = True) -> List[Tuple[str, GradCheckReport]]:
    return run_suite(cfg.network, Rng(seed).split("gradcheck"), probes, full_network)
