# -*- coding: UTF-8 -*-
"""
RMAFF-PSN
Per-image shallow/deep feature extraction refined by residual multi-scale
attention feature fusion (RMAFF) modules, order-agnostic max-pool fusion
across images, and a dense-block normal regressor with an L2-normalised
output.
"""

import logging
import time
from typing import List, Sequence

import numpy as np

from . import engine as E
from .core import ImageStack, NormalMap, Rng, dtype_for
from .engine import Tensor
from .errors import InputError, ShapeError
from .layers import Conv2d, L2Norm, Linear, MaxPool2d, Module, Sequential, conv_bn_act, init_params
from .settings import NetworkConfig

logger = logging.getLogger(__name__)


class AsymmetricConv(Module):
    """1x1 channel mixing, then 1x3 and 3x1 convolutions, each with batch norm and leaky ReLU"""

    def __init__(self, in_channels: int, out_channels: int, slope: float, dtype):
        super().__init__(dtype)
        self.body = self.add_child(
            "body",
            Sequential(
                conv_bn_act(in_channels, out_channels, 1, slope=slope, dtype=dtype),
                conv_bn_act(out_channels, out_channels, (1, 3), slope=slope, dtype=dtype),
                conv_bn_act(out_channels, out_channels, (3, 1), slope=slope, dtype=dtype),
                dtype=dtype,
            ),
        )

    def forward(self, x, mode="train"):
        return self.body(x, mode)


class ChannelAttention(Module):
    """g_c = sigmoid(MLP(gap(F)) + MLP(gmp(F))), shared two-layer MLP C -> C/r -> C"""

    def __init__(self, channels: int, reduction: int, slope: float, dtype):
        super().__init__(dtype)
        if reduction < 1 or channels % reduction:
            raise InputError("Channel attention reduction {} must divide {} channels".format(reduction, channels))
        self.channels, self.slope = channels, slope
        self.fc1 = self.add_child("fc1", Linear(channels, channels // reduction, bias=False, dtype=dtype))
        self.fc2 = self.add_child("fc2", Linear(channels // reduction, channels, bias=False, dtype=dtype))

    def mlp(self, v: Tensor, mode: str) -> Tensor:
        return self.fc2(E.leaky_relu(self.fc1(v, mode), self.slope), mode)

    def gate(self, x: Tensor, mode: str = "train") -> Tensor:
        n, c = x.shape[0], x.shape[1]
        avg = E.reshape(E.global_avg_pool(x), (n, c))
        mx = E.reshape(E.global_max_pool(x), (n, c))
        return E.reshape(E.sigmoid(E.add(self.mlp(avg, mode), self.mlp(mx, mode))), (n, c, 1, 1))

    def forward(self, x, mode="train"):
        if x.shape[1] != self.channels:
            raise ShapeError("{}: expects {} channels, got {}".format(self.name or "channel attention", self.channels, x.shape))
        return E.mul(x, self.gate(x, mode))


class SpatialAttention(Module):
    """g_s = sigmoid(conv_kxk([channel mean; channel max]))"""

    def __init__(self, kernel: int, dtype):
        super().__init__(dtype)
        self.conv = self.add_child("conv", Conv2d(2, 1, kernel, bias=False, dtype=dtype))

    def gate(self, x: Tensor, mode: str = "train") -> Tensor:
        pooled = E.concat([E.channel_mean(x), E.channel_max(x)], axis=1)
        return E.sigmoid(self.conv(pooled, mode))

    def forward(self, x, mode="train"):
        return E.mul(x, self.gate(x, mode))


class RMAFF(Module):
    """
    Residual multi-scale attention feature fusion

    Four cascaded asymmetric-convolution branches, each fed the (width
    matched) input plus the previous branch; concatenated, reweighted by
    channel then spatial attention, projected by a 3x3 convolution and added
    to a 1x1 projection of the input.
    """

    def __init__(self, in_channels: int, out_channels: int, cfg: NetworkConfig, attention: bool = True, dtype=np.float32):
        super().__init__(dtype)
        cb = cfg.c_branch
        slope = cfg.leaky_slope
        self.in_channels, self.out_channels, self.attention = in_channels, out_channels, attention
        self.match = self.add_child("match", Conv2d(in_channels, cb, 1, bias=False, dtype=dtype)) if in_channels != cb else None
        self.branches = [
            self.add_child("branch{}".format(k + 1), AsymmetricConv(in_channels if k == 0 else cb, cb, slope, dtype))
            for k in range(4)
        ]
        if attention:
            self.channel_att = self.add_child("channel_att", ChannelAttention(4 * cb, cfg.attention_reduction, slope, dtype))
            self.spatial_att = self.add_child("spatial_att", SpatialAttention(cfg.spatial_kernel, dtype))
        self.fuse = self.add_child("fuse", Conv2d(4 * cb, out_channels, 3, dtype=dtype))
        self.skip = self.add_child("skip", Conv2d(in_channels, out_channels, 1, dtype=dtype))

    def matched_input(self, x: Tensor, mode: str = "train") -> Tensor:
        return self.match(x, mode) if self.match is not None else x

    def branch_outputs(self, x: Tensor, mode: str = "train") -> List[Tensor]:
        if x.shape[1] != self.in_channels:
            raise ShapeError("{}: expects {} channels, got {}".format(self.name or "rmaff", self.in_channels, x.shape))
        outs = [self.branches[0](x, mode)]
        base = self.matched_input(x, mode) if len(self.branches) > 1 else None
        for branch in self.branches[1:]:
            outs.append(branch(E.add(base, outs[-1]), mode))
        return outs

    def refine(self, cat: Tensor, mode: str = "train") -> Tensor:
        if not self.attention:
            return cat
        return self.spatial_att(self.channel_att(cat, mode), mode)

    def forward(self, x, mode="train"):
        cat = E.concat(self.branch_outputs(x, mode), axis=1)
        return E.add(self.skip(x, mode), self.fuse(self.refine(cat, mode), mode))


def rmaff_branches(F: Tensor, module: RMAFF, mode: str = "train") -> List[Tensor]:
    return module.branch_outputs(F, mode)


def channel_attention(F_cat: Tensor, module: ChannelAttention, mode: str = "train") -> Tensor:
    return module(F_cat, mode)


def spatial_attention(F_CA: Tensor, module: SpatialAttention, mode: str = "train") -> Tensor:
    return module(F_CA, mode)


def rmaff_forward(F: Tensor, module: RMAFF, mode: str = "train") -> Tensor:
    return module(F, mode)


class FeatureExtractor(Module):
    """Image + broadcast light -> shallow (full-res) and deep (quarter-res) paths -> fused features"""

    def __init__(self, cfg: NetworkConfig, dtype):
        super().__init__(dtype)
        self.cfg = cfg
        slope = cfg.leaky_slope
        cin = cfg.image_channels + 3
        cs, cd = cfg.c_shallow, cfg.c_deep
        per_branch = cfg.rmaff_placement == "per_branch"
        attention = cfg.variant != "no_attention"

        self.shallow = self.add_child(
            "shallow", Sequential(conv_bn_act(cin, cs, 3, slope=slope, dtype=dtype), conv_bn_act(cs, cs, 3, slope=slope, dtype=dtype), dtype=dtype)
        )
        if cfg.downsample == "conv":
            down1 = conv_bn_act(cin, cd, 3, stride=2, slope=slope, dtype=dtype)
            down2 = conv_bn_act(cd, cd, 3, stride=2, slope=slope, dtype=dtype)
            after1 = cd
        else:
            down1 = MaxPool2d(dtype=dtype)
            down2 = MaxPool2d(dtype=dtype)
            after1 = cin
        self.deep = self.add_child(
            "deep",
            Sequential(
                down1,
                conv_bn_act(after1, cd, 3, slope=slope, dtype=dtype),
                down2,
                conv_bn_act(cd, cd, 3, slope=slope, dtype=dtype),
                dtype=dtype,
            ),
        )
        self.rmaff_shallow = None
        self.rmaff_deep = None
        self.rmaff_joint = None
        if cfg.variant != "no_rmaff":
            if per_branch:
                if cfg.variant != "single_rmaff":
                    self.rmaff_shallow = self.add_child("rmaff_shallow", RMAFF(cs, cs, cfg, attention, dtype))
                self.rmaff_deep = self.add_child("rmaff_deep", RMAFF(cd, cd, cfg, attention, dtype))
            else:
                self.rmaff_joint = self.add_child("rmaff_joint", RMAFF(cs + cd, cs + cd, cfg, attention, dtype))
        self.project = self.add_child("project", conv_bn_act(cs + cd, cfg.c_fused, 1, slope=slope, dtype=dtype))

    def forward(self, x, mode="train"):
        h, w = x.shape[2], x.shape[3]
        if h < 4 or w < 4:
            raise ShapeError("Feature extraction needs images of at least 4x4, got {}x{}".format(h, w))
        shallow = self.shallow(x, mode)
        deep = self.deep(x, mode)
        if self.rmaff_shallow is not None:
            shallow = self.rmaff_shallow(shallow, mode)
        if self.rmaff_deep is not None:
            deep = self.rmaff_deep(deep, mode)
        deep = E.upsample_bilinear(deep, -(-h // 2), -(-w // 2))
        deep = E.upsample_bilinear(deep, h, w)
        joint = E.concat([shallow, deep], axis=1)
        if self.rmaff_joint is not None:
            joint = self.rmaff_joint(joint, mode)
        return self.project(joint, mode)


class DenseBlock(Module):
    """Each layer sees the concatenation of the block input and every earlier layer's output"""

    def __init__(self, in_channels: int, layers: int, growth: int, slope: float, dtype):
        super().__init__(dtype)
        self.layers = [
            self.add_child("layer{}".format(k), conv_bn_act(in_channels + k * growth, growth, 3, slope=slope, dtype=dtype))
            for k in range(layers)
        ]
        self.out_channels = in_channels + layers * growth

    def forward(self, x, mode="train"):
        features = [x]
        for layer in self.layers:
            features.append(layer(E.concat(features, axis=1) if len(features) > 1 else x, mode))
        return E.concat(features, axis=1)


class ResidualStack(Module):
    def __init__(self, channels: int, layers: int, slope: float, dtype):
        super().__init__(dtype)
        self.blocks = [self.add_child("block{}".format(k), conv_bn_act(channels, channels, 3, slope=slope, dtype=dtype)) for k in range(layers)]
        self.out_channels = channels

    def forward(self, x, mode="train"):
        for block in self.blocks:
            x = E.add(x, block(x, mode))
        return x


class NormalRegressor(Module):
    def __init__(self, cfg: NetworkConfig, dtype):
        super().__init__(dtype)
        slope = cfg.leaky_slope
        c = cfg.c_fused
        self.stem = self.add_child("stem", conv_bn_act(c, c, 3, slope=slope, dtype=dtype))
        if cfg.regressor == "dense":
            body = DenseBlock(c, cfg.dense_layers, cfg.dense_growth, slope, dtype)
            width = body.out_channels
        elif cfg.regressor == "residual":
            body = ResidualStack(c, cfg.dense_layers, slope, dtype)
            width = body.out_channels
        else:
            body = Sequential(*[conv_bn_act(c, c, 3, slope=slope, dtype=dtype) for _ in range(cfg.dense_layers)], dtype=dtype)
            width = c
        self.body = self.add_child("body", body)
        self.width = width
        self.head = self.add_child("head", Conv2d(width, 3, 3, dtype=dtype))
        self.norm = self.add_child("norm", L2Norm(dtype=dtype))

    def forward(self, x, mode="train"):
        return self.norm(self.head(self.body(self.stem(x, mode), mode), mode), mode)


class RMAFFPSN(Module):
    """Full network; parameters are shared across every (image, light) pair"""

    def __init__(self, cfg: NetworkConfig):
        dtype = dtype_for(cfg.precision)
        super().__init__(dtype)
        self.cfg = cfg
        self.extractor = self.add_child("extractor", FeatureExtractor(cfg, dtype))
        self.regressor = self.add_child("regressor", NormalRegressor(cfg, dtype))
        self.finalize_names()

    def features(self, images: np.ndarray, lights: np.ndarray, mode: str = "train") -> List[Tensor]:
        """
        Per-image features

        Args:
            images: (n, m, c, h, w) batch of m-image stacks
            lights: (n, m, 3) matching light directions
        """
        n, m, c, h, w = images.shape
        if c != self.cfg.image_channels:
            raise ShapeError("Network expects {} image channels, got {}".format(self.cfg.image_channels, c))
        feats = []
        for j in range(m):
            feats.append(extract_features(images[:, j], lights[:, j], self, mode))
        return feats

    def forward_batch(self, images: np.ndarray, lights: np.ndarray, mode: str = "train") -> Tensor:
        fused = fuse_maxpool(self.features(images, lights, mode))
        return self.regressor(fused, mode)

    def forward(self, x, mode="train"):
        images, lights = x
        return self.forward_batch(images, lights, mode)


def build_network(cfg: NetworkConfig, rng: Rng) -> RMAFFPSN:
    net = RMAFFPSN(cfg)
    init_params(net, rng)
    logger.info("Built RMAFF-PSN (%s variant, %s parameters)", cfg.variant, sum(p.data.size for p in net.parameters()))
    return net


def extract_features(image: np.ndarray, light: np.ndarray, net: RMAFFPSN, mode: str = "train") -> Tensor:
    """
    Features of one image per batch entry under its light

    image is (n, c, h, w) or (c, h, w); light is (n, 3) or (3,).
    """
    image = np.asarray(image, dtype=net.dtype)
    light = np.asarray(light, dtype=net.dtype)
    if image.ndim == 3:
        image = image[None]
    if light.ndim == 1:
        light = light[None]
    n, _, h, w = image.shape
    x = E.concat([Tensor(image), E.broadcast_light(light, h, w, net.dtype)], axis=1)
    return net.extractor(x, mode)


def fuse_maxpool(feats: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum over the image axis; independent of image order"""
    if not feats:
        raise InputError("fuse_maxpool needs at least one feature map")
    if len(feats) == 1:
        return feats[0]
    return E.maximum(list(feats))


def regress_normals(fused: Tensor, net: RMAFFPSN, mask: np.ndarray = None, mode: str = "train") -> NormalMap:
    """Normal map of the first batch entry"""
    out = net.regressor(fused, mode)
    return tensor_to_normal_map(out, mask)


def tensor_to_normal_map(out: Tensor, mask: np.ndarray = None, index: int = 0) -> NormalMap:
    field = np.transpose(out.data[index], (1, 2, 0)).astype(np.float64)
    if mask is None:
        mask = np.ones(field.shape[:2], dtype=bool)
    norms = np.linalg.norm(field, axis=2, keepdims=True)
    field = np.where(norms > 0, field / np.where(norms > 0, norms, 1.0), 0.0)
    return NormalMap(field, mask & (norms[..., 0] > 0))


def stack_to_arrays(stack: ImageStack, image_channels: int, dtype) -> tuple:
    """(1, m, c, h, w) images and (1, m, 3) lights from an ImageStack"""
    images = np.transpose(stack.images, (0, 3, 1, 2))
    if images.shape[1] != image_channels:
        if images.shape[1] == 1 and image_channels == 3:
            images = np.repeat(images, 3, axis=1)
        elif images.shape[1] == 3 and image_channels == 1:
            images = images.mean(axis=1, keepdims=True)
        else:
            raise ShapeError("Cannot feed {}-channel images to a {}-channel network".format(images.shape[1], image_channels))
    return images[None].astype(dtype), stack.lights.directions[None].astype(dtype)


def network_forward(stack: ImageStack, net: RMAFFPSN, mode: str = "eval") -> NormalMap:
    """Normal map of an intensity-normalised stack, masked by the stack's mask"""
    if stack.m < 1:
        raise InputError("Network needs at least one image")
    started = time.perf_counter()
    images, lights = stack_to_arrays(stack, net.cfg.image_channels, net.dtype)
    fused = fuse_maxpool(net.features(images, lights, mode))
    result = regress_normals(fused, net, stack.mask, mode)
    logger.debug(
        "Network forward: %s images of %sx%s in %.3fs", stack.m, stack.height, stack.width, time.perf_counter() - started
    )
    return result
