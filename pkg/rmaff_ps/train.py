# -*- coding: UTF-8 -*-
"""
Training loop
Cosine loss, a learning rate halved on a fixed epoch period, random
patch/light-subset batches, Adam or momentum SGD, per-epoch validation MAE
and checkpoints with a BEST pointer.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from config import PS_DETERMINISTIC

from . import engine as E
from .checkpoint import Checkpoint, best_stem, load_checkpoint, save_checkpoint, write_best
from .core import ImageStack, NormalMap, Rng, normalize_by_intensity
from .errors import ConfigError, InputError, TrainingError
from .layers import Module
from .metrics import mae
from .network import RMAFFPSN, build_network, network_forward
from .settings import ToolkitConfig, TrainConfig

logger = logging.getLogger(__name__)

LOG_FILE = "train_log.tsv"
LOG_HEADER = "epoch\tlr\tloss\tval_mae\tseconds"

Scene = Tuple[ImageStack, NormalMap]


def cosine_loss(pred: NormalMap, gt: NormalMap) -> float:
    """Mean of 1 - n . n' over pixels masked in on both maps"""
    if pred.normals.shape != gt.normals.shape:
        raise InputError("cosine loss needs equal shapes, got {} and {}".format(pred.normals.shape, gt.normals.shape))
    mask = pred.mask & gt.mask
    if not mask.any():
        raise InputError("cosine loss: no masked-in pixels")
    dots = np.einsum("pk,pk->p", pred.normals[mask], gt.normals[mask])
    return float(np.mean(np.clip(1.0 - dots, 0.0, 2.0)))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise InputError("epoch must be non-negative, got {}".format(epoch))
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


# ---------------------------------------------------------------------------
# Batches


class Batch(NamedTuple):
    samples: List[Scene]
    origins: List[Tuple[int, int, int]]
    light_indices: np.ndarray

    def arrays(self, image_channels: int, dtype) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """images (n, k, c, p, p), lights (n, k, 3), target normals (n, 3, p, p), mask (n, p, p)"""
        images = np.stack([np.transpose(s.images, (0, 3, 1, 2)) for s, _ in self.samples])
        if images.shape[2] != image_channels:
            if images.shape[2] == 1:
                images = np.repeat(images, image_channels, axis=2)
            else:
                images = images.mean(axis=2, keepdims=True)
        lights = np.stack([s.lights.directions for s, _ in self.samples])
        target = np.stack([np.transpose(g.normals, (2, 0, 1)) for _, g in self.samples])
        mask = np.stack([s.mask & g.mask for s, g in self.samples])
        return images.astype(dtype), lights.astype(dtype), target.astype(dtype), mask


@lru_cache(maxsize=None)
def _warn_light_shortfall(available: int, wanted: int) -> None:
    logger.warning("Only %s lights available, sampling all of them instead of %s", available, wanted)


def _as_scene(item) -> Scene:
    if len(item) == 3:
        return item[1], item[2]
    return item[0], item[1]


def make_batch(dataset: Sequence, rng: Rng, cfg: TrainConfig) -> Batch:
    """
    Random patch crops with random light subsets

    Scenes are drawn uniformly with replacement; every sample in a batch
    uses the same number of lights, the smaller of lights_per_sample and
    the fewest lights any scene has.
    """
    scenes = [_as_scene(item) for item in dataset]
    if not scenes:
        raise InputError("make_batch needs at least one scene")
    p = cfg.patch
    for stack, _ in scenes:
        if stack.height < p or stack.width < p:
            raise InputError("Scene of {}x{} is smaller than the {}x{} patch".format(stack.width, stack.height, p, p))
    fewest = min(stack.m for stack, _ in scenes)
    k = min(cfg.lights_per_sample, fewest)
    if k < cfg.lights_per_sample:
        _warn_light_shortfall(fewest, cfg.lights_per_sample)

    samples, origins, chosen = [], [], []
    for _ in range(cfg.batch_size):
        index = int(rng.integers(0, len(scenes)))
        stack, gt = scenes[index]
        row = int(rng.integers(0, stack.height - p + 1))
        col = int(rng.integers(0, stack.width - p + 1))
        lights = np.asarray(rng.choice(stack.m, size=k, replace=False), dtype=np.intp)
        crop = normalize_by_intensity(stack.subset(lights).crop(row, col, p, p))
        samples.append((crop, gt.crop(row, col, p, p)))
        origins.append((index, row, col))
        chosen.append(lights)
    return Batch(samples, origins, np.stack(chosen))


def batch_rng(seed: int, epoch: int, index: int) -> Rng:
    return Rng(seed).split("batch").split(epoch).split(index)


def batches_per_epoch(dataset: Sequence, cfg: TrainConfig) -> int:
    """Configured count, otherwise enough batches to cover every scene's non-overlapping patches once"""
    if cfg.batches_per_epoch:
        return cfg.batches_per_epoch
    patches = sum((s.height // cfg.patch) * (s.width // cfg.patch) for s, _ in (_as_scene(i) for i in dataset))
    return max(1, math.ceil(patches / cfg.batch_size))


def iter_batches(dataset: Sequence, cfg: TrainConfig, epoch: int, count: int, prefetch: bool) -> Iterator[Batch]:
    """Batches of one epoch; with prefetch the next one is assembled while the current one trains"""
    if not prefetch or count == 1:
        for b in range(count):
            yield make_batch(dataset, batch_rng(cfg.seed, epoch, b), cfg)
        return
    with ThreadPoolExecutor(max_workers=1) as pool:
        future = pool.submit(make_batch, dataset, batch_rng(cfg.seed, epoch, 0), cfg)
        for b in range(count):
            batch = future.result()
            if b + 1 < count:
                future = pool.submit(make_batch, dataset, batch_rng(cfg.seed, epoch, b + 1), cfg)
            yield batch


def split_dataset(scenes: Sequence, val_fraction: float, rng: Rng) -> Tuple[list, list]:
    """Shuffle then hold out round(n * val_fraction) scenes, at least one when there are two or more"""
    scenes = list(scenes)
    if len(scenes) < 2 or val_fraction <= 0.0:
        logger.warning("Validating on the training scenes (%s scenes, val_fraction %s)", len(scenes), val_fraction)
        return scenes, list(scenes)
    order = rng.permutation(len(scenes))
    n_val = min(len(scenes) - 1, max(1, int(round(len(scenes) * val_fraction))))
    val = [scenes[i] for i in sorted(order[:n_val])]
    train = [scenes[i] for i in sorted(order[n_val:])]
    return train, val


# ---------------------------------------------------------------------------
# Optimizers


class Adam:
    kind = "adam"

    def __init__(self, params: Sequence[Tuple[str, E.Tensor]], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = (b1 * self.m[name] + (1.0 - b1) * g).astype(p.dtype)
            self.v[name] = (b2 * self.v[name] + (1.0 - b2) * g * g).astype(p.dtype)
            if lr != 0.0:
                update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
                p.data = (p.data - update).astype(p.dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam.t": np.array(float(self.t))}
        state.update({"adam.m/" + k: v for k, v in self.m.items()})
        state.update({"adam.v/" + k: v for k, v in self.v.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"])
        for name, p in self.params:
            self.m[name] = np.asarray(state["adam.m/" + name], dtype=p.dtype).reshape(p.shape)
            self.v[name] = np.asarray(state["adam.v/" + name], dtype=p.dtype).reshape(p.shape)


class SGD:
    kind = "sgd"

    def __init__(self, params: Sequence[Tuple[str, E.Tensor]], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.t = 0
        self.buf = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            self.buf[name] = (self.momentum * self.buf[name] + p.grad).astype(p.dtype)
            if lr != 0.0:
                p.data = (p.data - lr * self.buf[name]).astype(p.dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"sgd.t": np.array(float(self.t))}
        state.update({"sgd.buf/" + k: v for k, v in self.buf.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["sgd.t"])
        for name, p in self.params:
            self.buf[name] = np.asarray(state["sgd.buf/" + name], dtype=p.dtype).reshape(p.shape)


def make_optimizer(net: Module, cfg: TrainConfig) -> Union[Adam, SGD]:
    params = list(net.named_parameters())
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.momentum)
    return Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# Fitting


def train_step(net: RMAFFPSN, optimizer, batch: Batch, lr: float, batch_id: str = "") -> float:
    """One forward/backward/update; returns the batch loss"""
    images, lights, target, mask = batch.arrays(net.cfg.image_channels, net.dtype)
    net.zero_grad()
    pred = net.forward_batch(images, lights, "train")
    loss = E.cosine_loss_tensor(pred, target, mask)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError("Loss is {} at batch {}".format(value, batch_id or "?"), batch_id=batch_id)
    loss.backward()
    optimizer.step(lr)
    return value


def validation_mae(net: RMAFFPSN, val_set: Sequence) -> float:
    """Mean over scenes of the eval-mode MAE using every light"""
    scores = [mae(network_forward(stack, net, "eval"), gt) for stack, gt in (_as_scene(i) for i in val_set)]
    return float(np.mean(scores))


def _append_log(out_dir: Optional[Path], line: str) -> None:
    if out_dir is None:
        return
    with open(out_dir / LOG_FILE, "a", encoding="utf-8") as f:
        f.write(line + "\n")


def fit(
    dataset: Sequence,
    val_set: Sequence,
    cfg: ToolkitConfig,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Union[str, Path]] = None,
    stop_after: Optional[int] = None,
    deterministic: bool = PS_DETERMINISTIC,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> Checkpoint:
    """
    Train RMAFF-PSN and return the checkpoint with the lowest validation MAE

    Args:
        dataset: training scenes as (stack, gt) or (name, stack, gt)
        val_set: validation scenes in the same form
        out_dir: where checkpoints, BEST and the training log go
        resume: checkpoint to continue from (epoch after the stored one)
        stop_after: run at most this many epochs in this call
        deterministic: serial batch assembly and zero wall-clock fields
        on_epoch: called with (epoch, loss, val_mae) after every epoch
    """
    if not dataset:
        raise InputError("Training set is empty")
    if not val_set:
        raise InputError("Validation set is empty")
    tcfg = cfg.train
    net_cfg = cfg.network.model_copy(update={"precision": tcfg.precision})
    net = build_network(net_cfg, Rng(tcfg.seed).split("init"))
    optimizer = make_optimizer(net, tcfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start = 0
    best: Optional[Checkpoint] = None
    best_val, best_epoch = math.inf, -1
    if resume is not None:
        ckpt = load_checkpoint(resume)
        net.load_state_dict(ckpt.params)
        optimizer.load_state_dict(ckpt.optimizer)
        stream = ckpt.rng_state
        if int(stream.get("seed", tcfg.seed)) != tcfg.seed:
            raise ConfigError(
                "Checkpoint {} drew its batches with seed {}, config has {}".format(resume, stream["seed"], tcfg.seed)
            )
        start = int(stream.get("next_epoch", ckpt.epoch + 1))
        best_val = float(ckpt.meta.get("best_val_mae", ckpt.val_mae))
        best_epoch = int(ckpt.meta.get("best_epoch", ckpt.epoch))
        logger.info("Resuming from %s at epoch %s", resume, start)
    elif out is not None:
        (out / LOG_FILE).write_text(LOG_HEADER + "\n", encoding="utf-8")

    count = batches_per_epoch(dataset, tcfg)
    prefetch = tcfg.prefetch and not deterministic
    end = tcfg.epochs if stop_after is None else min(tcfg.epochs, start + stop_after)
    for epoch in range(start, end):
        started = time.perf_counter()
        lr = lr_at(epoch, tcfg)
        losses = [
            train_step(net, optimizer, batch, lr, "{}:{}".format(epoch, b))
            for b, batch in enumerate(iter_batches(dataset, tcfg, epoch, count, prefetch))
        ]
        loss = float(np.mean(losses))
        val = validation_mae(net, val_set)
        seconds = 0.0 if deterministic else time.perf_counter() - started
        _append_log(out, "{}\t{:.10g}\t{:.10g}\t{:.10g}\t{:.3f}".format(epoch, lr, loss, val, seconds))
        logger.info("Epoch %s: lr %.3g, loss %.5f, val MAE %.3f deg", epoch, lr, loss, val)

        improved = val < best_val
        if improved:
            best_val, best_epoch = val, epoch
        meta = {
            "network": net_cfg.model_dump(mode="json"),
            "train": tcfg.model_dump(mode="json"),
            "lr": lr,
            "loss": loss,
            "step": optimizer.t,
            "best_epoch": best_epoch,
            "best_val_mae": best_val,
        }
        # batch streams are keyed by (seed, epoch, index)
        stream = {"seed": tcfg.seed, "next_epoch": epoch + 1}
        ckpt = Checkpoint(epoch, net.state_dict(), optimizer.state_dict(), val, stream, meta)
        if out is not None:
            stem = "epoch_{:03d}".format(epoch)
            save_checkpoint(ckpt, out / stem)
            if improved:
                write_best(out, stem)
        if improved:
            best = ckpt
        if on_epoch is not None:
            on_epoch(epoch, loss, val)

    if best is None:
        if out is not None and best_stem(out):
            return load_checkpoint(out)
        raise TrainingError("No epoch was run (start epoch {}, configured {})".format(start, tcfg.epochs))
    return best
