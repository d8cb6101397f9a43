# -*- coding: UTF-8 -*-
"""
Finite-difference gradient verification
Analytic gradients from the engine are compared with central differences
of a random projection of the output. Runs in double precision only.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import engine as E
from .core import Rng
from .engine import Tensor
from .errors import InputError
from .layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    GlobalMaxPool,
    L2Norm,
    LeakyReLU,
    Linear,
    MaxPool2d,
    Module,
    Sequential,
    Sigmoid,
    Upsample,
    conv_bn_act,
    init_params,
)
from .network import RMAFF, build_network
from .render import hemisphere_lights
from .settings import NetworkConfig

logger = logging.getLogger(__name__)

PASS_THRESHOLD = 1e-4
DEFAULT_STEP = 1e-5
DEFAULT_PROBES = 8
DENOM_FLOOR = 1e-8
# entries far below the largest gradient are judged against this fraction of it
SCALE_FLOOR = 1e-5
# successively smaller steps tried when a probe straddles a kink
STEP_LADDER = (1.0, 0.1, 0.01)


def relative_error(analytic: float, numeric: float, floor: float = DENOM_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor, DENOM_FLOOR)


@dataclass
class GradCheckEntry:
    name: str
    max_error: float
    probes: int


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)
    threshold: float = PASS_THRESHOLD
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max((e.max_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold

    @property
    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if e.max_error >= self.threshold]

    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.max_error, default=None)


def _probe_indices(grad: np.ndarray, rng: Rng, probes: int) -> List[Tuple[int, ...]]:
    """The entry with the largest analytic gradient plus random others"""
    size = grad.size
    flat = [int(np.argmax(np.abs(grad).reshape(-1)))]
    if size > 1 and probes > 1:
        others = rng.choice(size, size=min(probes - 1, size), replace=False)
        flat.extend(int(i) for i in others if int(i) != flat[0])
    flat = flat[:probes]
    return [np.unravel_index(i, grad.shape) if grad.ndim else () for i in flat]


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tuple[str, Tensor]],
    rng: Rng,
    probes: int = DEFAULT_PROBES,
    step: float = DEFAULT_STEP,
    threshold: float = PASS_THRESHOLD,
) -> GradCheckReport:
    """
    Compare backward() against central differences

    Args:
        loss_fn: rebuilds the scalar loss from the current tensor data
        tensors: named leaves to verify; each must have requires_grad
        probes: entries checked per tensor
    """
    started = time.perf_counter()
    for _, t in tensors:
        if t.data.dtype != np.float64:
            raise InputError("Gradient checks need double precision, {} is {}".format(t.name, t.data.dtype))
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors}
    # a bias feeding straight into batch norm has an exactly-zero gradient; its differences are pure rounding
    floor = SCALE_FLOOR * max((float(np.max(np.abs(g))) for g in analytic.values() if g.size), default=0.0)

    def value() -> float:
        return float(loss_fn().data)

    report = GradCheckReport(threshold=threshold)
    for name, t in tensors:
        grad = analytic[name]
        worst = 0.0
        picks = _probe_indices(grad, rng.split(name), probes)
        for idx in picks:
            original = t.data[idx]
            best = np.inf
            for factor in STEP_LADDER:
                h = step * factor
                t.data[idx] = original + h
                plus = value()
                t.data[idx] = original - h
                minus = value()
                t.data[idx] = original
                best = min(best, relative_error(float(grad[idx]), (plus - minus) / (2.0 * h), floor))
                if best < threshold:
                    break
            worst = max(worst, best)
        report.entries.append(GradCheckEntry(name, worst, len(picks)))
    report.seconds = time.perf_counter() - started
    if not report.passed:
        logger.warning("Gradient check failed: worst %s at %.3g", report.worst().name, report.max_error)
    return report


def _as_module(net: Union[Module, Sequence[Module]]) -> Module:
    if isinstance(net, Module):
        return net
    layers = list(net)
    if not layers:
        raise InputError("Gradient check needs at least one layer")
    return Sequential(*layers, dtype=layers[0].dtype)


def grad_check(
    net: Union[Module, Sequence[Module]],
    input_shape: Tuple[int, ...],
    rng: Rng,
    probes: int = DEFAULT_PROBES,
    step: float = DEFAULT_STEP,
    threshold: float = PASS_THRESHOLD,
) -> GradCheckReport:
    """Check every parameter of net and its input on a random input of input_shape"""
    module = _as_module(net)
    if module.dtype != np.float64:
        raise InputError("Gradient checks need a double-precision network")
    saved = {name: b.copy() for name, b in module.named_buffers()}
    x = Tensor(rng.split("input").normal(0.0, 1.0, input_shape), requires_grad=True, name="input")
    projection = Tensor(rng.split("projection").normal(0.0, 1.0, module(x, "train").shape))

    def loss_fn():
        out = module(x, "train")
        return E.total(E.mul(out, projection)) if out.data.ndim else out

    tensors = list(module.named_parameters()) + [("input", x)]
    try:
        report = check_gradients(loss_fn, tensors, rng.split("probes"), probes, step, threshold)
    finally:
        for name, b in saved.items():
            module.set_buffer(name, b)
        module.zero_grad()
    return report


def network_grad_check(
    cfg: NetworkConfig, rng: Rng, images: int = 2, size: int = 8, probes: int = DEFAULT_PROBES
) -> GradCheckReport:
    """Full-network check on one random m-image stack; images are inputs, not checked"""
    if cfg.precision != "f64":
        cfg = cfg.model_copy(update={"precision": "f64"})
    net = build_network(cfg, rng.split("init"))
    data = rng.split("images").uniform(0.0, 1.0, (1, images, cfg.image_channels, size, size))
    lights = hemisphere_lights(images, rng.split("lights")).directions[None]
    projection = Tensor(rng.split("projection").normal(0.0, 1.0, (1, 3, size, size)))
    saved = {name: b.copy() for name, b in net.named_buffers()}

    def loss_fn():
        return E.total(E.mul(net.forward_batch(data, lights, "train"), projection))

    try:
        return check_gradients(loss_fn, list(net.named_parameters()), rng.split("probes"), probes)
    finally:
        for name, b in saved.items():
            net.set_buffer(name, b)
        net.zero_grad()


class _GatedProduct(Module):
    """x * sigmoid(conv1x1(x)), the shape of an attention gate"""

    def __init__(self, channels: int, dtype=np.float64):
        super().__init__(dtype)
        self.conv = self.add_child("conv", Conv2d(channels, channels, 1, dtype=dtype))

    def forward(self, x, mode="train"):
        return E.mul(x, E.sigmoid(self.conv(x, mode)))


def layer_suite(cfg: NetworkConfig) -> List[Tuple[str, Module, Tuple[int, ...]]]:
    """One small double-precision instance of every layer kind the network uses"""
    f64 = np.float64
    cfg = cfg.model_copy(update={"precision": "f64"})
    suite = [
        ("conv1x1", Conv2d(3, 4, 1, dtype=f64), (2, 3, 5, 5)),
        ("conv3x3", Conv2d(3, 4, 3, dtype=f64), (2, 3, 5, 5)),
        ("conv1x3", Conv2d(3, 4, (1, 3), dtype=f64), (2, 3, 5, 5)),
        ("conv3x1", Conv2d(3, 4, (3, 1), dtype=f64), (2, 3, 5, 5)),
        ("conv3x3/2", Conv2d(3, 4, 3, stride=2, dtype=f64), (2, 3, 7, 6)),
        ("batchnorm", BatchNorm2d(3, dtype=f64), (2, 3, 4, 4)),
        ("leaky-relu", LeakyReLU(0.1, dtype=f64), (2, 3, 4, 4)),
        ("sigmoid", Sigmoid(dtype=f64), (2, 3, 4, 4)),
        ("sigmoid-gate", _GatedProduct(4, dtype=f64), (2, 4, 4, 4)),
        ("max-pool", MaxPool2d(dtype=f64), (2, 3, 5, 4)),
        ("avg-pool", AvgPool2d(dtype=f64), (2, 3, 5, 4)),
        ("global-max-pool", GlobalMaxPool(dtype=f64), (2, 3, 4, 4)),
        ("global-avg-pool", GlobalAvgPool(dtype=f64), (2, 3, 4, 4)),
        ("upsample", Upsample(dtype=f64), (2, 3, 3, 3)),
        ("fully-connected", Linear(6, 4, dtype=f64), (3, 6)),
        ("l2norm", L2Norm(dtype=f64), (2, 3, 4, 4)),
        ("conv+bn+lrelu x2", Sequential(conv_bn_act(3, 4, 3, dtype=f64), conv_bn_act(4, 4, 3, dtype=f64), dtype=f64), (2, 3, 6, 6)),
        ("rmaff", RMAFF(cfg.c_branch * 2, cfg.c_branch * 2, cfg, dtype=f64), (2, cfg.c_branch * 2, 6, 6)),
    ]
    for _, module, _ in suite:
        module.finalize_names()
    return suite


def run_suite(cfg: NetworkConfig, rng: Rng, probes: int = DEFAULT_PROBES, full_network: bool = True) -> List[Tuple[str, GradCheckReport]]:
    """Every layer kind, the RMAFF module and (optionally) the tiny full network"""
    results = []
    for label, module, shape in layer_suite(cfg):
        init_params(module, rng.split("init").split(label))
        for name, p in module.named_parameters():
            if name.endswith("bias") and p.data.size:
                p.data = rng.split("bias").split(label).normal(0.0, 0.1, p.shape)
        results.append((label, grad_check(module, shape, rng.split(label), probes)))
        logger.debug("%s: max relative error %.3g", label, results[-1][1].max_error)
    if full_network:
        results.append(("network", network_grad_check(cfg, rng.split("network"), probes=probes)))
    return results
