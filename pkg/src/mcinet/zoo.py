"""Builders for AlexNet, VGG16, GoogLeNet and ResNet18.

Each builder takes ``class_count`` plus optional ``input_size`` and ``width``
(a channel multiplier) so the same topology can be run at desk scale.
Weights are He-uniform with zero biases, drawn from ``seed``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .graph import GraphError, LayerNode, ModelGraph, he_uniform, infer_shapes, node_output_shape
from .layers import LayerParams

ARCHITECTURES = ("alexnet", "vgg16", "googlenet", "resnet18")
NATIVE_INPUT = {"alexnet": 227, "vgg16": 224, "googlenet": 224, "resnet18": 224}

RESNET_NOTE = ("resnet18: canonical network has 20 conv (16 block convs + stem + 3 projection "
               "shortcuts) and 1 fc; a count of 16 conv and 2 fc is also quoted for this network")


class _Builder:
    def __init__(self, arch, input_size, class_count, width, seed):
        if class_count < 2:
            raise GraphError(f"class_count must be >= 2, got {class_count}")
        self.g = ModelGraph((3, input_size, input_size), class_count, {"arch": arch})
        self.width = width
        self.rng = np.random.default_rng(seed)
        self.shapes = {}
        self.last: Optional[str] = None

    def ch(self, c: int) -> int:
        return max(1, int(round(c * self.width)))

    def _add(self, node: LayerNode) -> str:
        ins = [self.shapes[s] for s in node.inputs] or [self.g.input_shape]
        self.shapes[node.id] = node_output_shape(node, ins)
        self.g.add(node)
        self.last = node.id
        return node.id

    def _src(self, src):
        src = self.last if src is None else src
        return [] if src is None else [src]

    def conv(self, nid, cout, k, stride=1, pad=0, src=None):
        inputs = self._src(src)
        cin = self.shapes[inputs[0]][0] if inputs else self.g.input_shape[0]
        fan_in = cin * k * k
        w = he_uniform(self.rng, (cout, cin, k, k), fan_in)
        return self._add(LayerNode(nid, "conv", inputs, {"stride": stride, "pad": pad, "kernel": k,
                                                         "channels": cout},
                                   LayerParams(w, np.zeros(cout))))

    def fc(self, nid, units, src=None):
        inputs = self._src(src)
        din = int(np.prod(self.shapes[inputs[0]]))
        w = he_uniform(self.rng, (units, din), din)
        return self._add(LayerNode(nid, "fc", inputs, {"units": units},
                                   LayerParams(w, np.zeros(units))))

    def bn(self, nid, src=None):
        inputs = self._src(src)
        c = self.shapes[inputs[0]][0]
        p = LayerParams(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))
        return self._add(LayerNode(nid, "batchnorm", inputs, {"channels": c}, p))

    def op(self, nid, kind, src=None, **geometry):
        return self._add(LayerNode(nid, kind, self._src(src), geometry))

    def pool(self, nid, k, stride, pad=0, src=None):
        return self.op(nid, "maxpool", src, kernel=k, stride=stride, pad=pad)

    def merge(self, nid, kind, sources):
        return self._add(LayerNode(nid, kind, list(sources)))

    def finish(self, feature_node, notes=()):
        self.g.meta["feature_node"] = feature_node
        self.g.meta["width"] = self.width
        if notes:
            self.g.meta["census_notes"] = list(notes)
        infer_shapes(self.g)
        return self.g


def build_alexnet(class_count: int = 1000, *, input_size: Optional[int] = None,
                  width: float = 1.0, hidden: Optional[int] = None, seed: int = 0) -> ModelGraph:
    """Five conv layers (ungrouped) and three fully-connected layers.

    At the native 227 x 227 input the 11 x 11 stride-4 stem is unpadded; any
    other input size pads the stem by 2 (so 224 and 64 both work).
    """
    size = input_size or NATIVE_INPUT["alexnet"]
    b = _Builder("alexnet", size, class_count, width, seed)
    b.conv("conv1", b.ch(96), 11, stride=4, pad=0 if size == 227 else 2)
    b.op("relu1", "relu")
    b.op("lrn1", "lrn")
    b.pool("pool1", 3, 2)
    b.conv("conv2", b.ch(256), 5, pad=2)
    b.op("relu2", "relu")
    b.op("lrn2", "lrn")
    b.pool("pool2", 3, 2)
    b.conv("conv3", b.ch(384), 3, pad=1)
    b.op("relu3", "relu")
    b.conv("conv4", b.ch(384), 3, pad=1)
    b.op("relu4", "relu")
    b.conv("conv5", b.ch(256), 3, pad=1)
    b.op("relu5", "relu")
    b.pool("pool5", 3, 2)
    # an explicit hidden size is absolute; otherwise it scales with width
    hidden = b.ch(4096) if hidden is None else hidden
    b.fc("fc6", hidden)
    b.op("relu6", "relu")
    b.op("drop6", "dropout", p=0.5)
    b.fc("fc7", hidden)
    b.op("relu7", "relu")
    b.op("drop7", "dropout", p=0.5)
    b.fc("fc8", class_count)
    return b.finish("pool5")


def build_vgg16(class_count: int = 1000, *, input_size: Optional[int] = None,
                width: float = 1.0, hidden: Optional[int] = None, seed: int = 0) -> ModelGraph:
    size = input_size or NATIVE_INPUT["vgg16"]
    b = _Builder("vgg16", size, class_count, width, seed)
    for block, (reps, channels) in enumerate(zip((2, 2, 3, 3, 3), (64, 128, 256, 512, 512)), 1):
        for i in range(1, reps + 1):
            b.conv(f"conv{block}_{i}", b.ch(channels), 3, pad=1)
            b.op(f"relu{block}_{i}", "relu")
        b.pool(f"pool{block}", 2, 2)
    # an explicit hidden size is absolute; otherwise it scales with width
    hidden = b.ch(4096) if hidden is None else hidden
    b.fc("fc6", hidden)
    b.op("relu6", "relu")
    b.op("drop6", "dropout", p=0.5)
    b.fc("fc7", hidden)
    b.op("relu7", "relu")
    b.op("drop7", "dropout", p=0.5)
    b.fc("fc8", class_count)
    return b.finish("pool5")


# (1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool projection)
INCEPTION = {
    "3a": (64, 96, 128, 16, 32, 32),
    "3b": (128, 128, 192, 32, 96, 64),
    "4a": (192, 96, 208, 16, 48, 64),
    "4b": (160, 112, 224, 24, 64, 64),
    "4c": (128, 128, 256, 24, 64, 64),
    "4d": (112, 144, 288, 32, 64, 64),
    "4e": (256, 160, 320, 32, 128, 128),
    "5a": (256, 160, 320, 32, 128, 128),
    "5b": (384, 192, 384, 48, 128, 128),
}


def _inception(b: _Builder, name: str, cfg) -> str:
    c1, r3, c3, r5, c5, pp = (b.ch(c) for c in cfg)
    src = b.last
    p = f"inc{name}"
    b.conv(f"{p}/1x1", c1, 1, src=src)
    b1 = b.op(f"{p}/1x1/relu", "relu")
    b.conv(f"{p}/3x3_reduce", r3, 1, src=src)
    b.op(f"{p}/3x3_reduce/relu", "relu")
    b.conv(f"{p}/3x3", c3, 3, pad=1)
    b2 = b.op(f"{p}/3x3/relu", "relu")
    b.conv(f"{p}/5x5_reduce", r5, 1, src=src)
    b.op(f"{p}/5x5_reduce/relu", "relu")
    b.conv(f"{p}/5x5", c5, 5, pad=2)
    b3 = b.op(f"{p}/5x5/relu", "relu")
    b.pool(f"{p}/pool", 3, 1, pad=1, src=src)
    b.conv(f"{p}/pool_proj", pp, 1)
    b4 = b.op(f"{p}/pool_proj/relu", "relu")
    return b.merge(f"{p}/output", "concat", [b1, b2, b3, b4])


def build_googlenet(class_count: int = 1000, *, input_size: Optional[int] = None,
                    width: float = 1.0, seed: int = 0) -> ModelGraph:
    """GoogLeNet without auxiliary classifiers."""
    size = input_size or NATIVE_INPUT["googlenet"]
    b = _Builder("googlenet", size, class_count, width, seed)
    b.conv("conv1", b.ch(64), 7, stride=2, pad=3)
    b.op("conv1/relu", "relu")
    b.pool("pool1", 3, 2, pad=1)
    b.op("lrn1", "lrn")
    b.conv("conv2_reduce", b.ch(64), 1)
    b.op("conv2_reduce/relu", "relu")
    b.conv("conv2", b.ch(192), 3, pad=1)
    b.op("conv2/relu", "relu")
    b.op("lrn2", "lrn")
    b.pool("pool2", 3, 2, pad=1)
    for name in ("3a", "3b"):
        _inception(b, name, INCEPTION[name])
    b.pool("pool3", 3, 2, pad=1)
    for name in ("4a", "4b", "4c", "4d", "4e"):
        _inception(b, name, INCEPTION[name])
    b.pool("pool4", 3, 2, pad=1)
    for name in ("5a", "5b"):
        _inception(b, name, INCEPTION[name])
    b.op("gap", "global-avg-pool")
    b.op("drop", "dropout", p=0.4)
    b.fc("fc", class_count)
    return b.finish("gap")


def _basic_block(b: _Builder, name: str, channels: int, stride: int) -> str:
    src = b.last
    b.conv(f"{name}.conv1", channels, 3, stride=stride, pad=1, src=src)
    b.bn(f"{name}.bn1")
    b.op(f"{name}.relu1", "relu")
    b.conv(f"{name}.conv2", channels, 3, pad=1)
    main = b.bn(f"{name}.bn2")
    shortcut = src
    if stride != 1 or b.shapes[src][0] != channels:
        b.conv(f"{name}.downsample", channels, 1, stride=stride, src=src)
        shortcut = b.bn(f"{name}.downsample_bn")
    b.merge(f"{name}.add", "residual-add", [main, shortcut])
    return b.op(f"{name}.relu2", "relu")


def build_resnet18(class_count: int = 1000, *, input_size: Optional[int] = None,
                   width: float = 1.0, seed: int = 0) -> ModelGraph:
    size = input_size or NATIVE_INPUT["resnet18"]
    b = _Builder("resnet18", size, class_count, width, seed)
    b.conv("conv1", b.ch(64), 7, stride=2, pad=3)
    b.bn("bn1")
    b.op("relu", "relu")
    b.pool("maxpool", 3, 2, pad=1)
    for stage, channels in enumerate((64, 128, 256, 512), 1):
        for block in range(2):
            stride = 2 if stage > 1 and block == 0 else 1
            _basic_block(b, f"layer{stage}.{block}", b.ch(channels), stride)
    b.op("gap", "global-avg-pool")
    b.fc("fc", class_count)
    return b.finish("gap", notes=[RESNET_NOTE])


BUILDERS = {
    "alexnet": build_alexnet,
    "vgg16": build_vgg16,
    "googlenet": build_googlenet,
    "resnet18": build_resnet18,
}


def build(arch: str, class_count: int = 1000, **kwargs) -> ModelGraph:
    try:
        builder = BUILDERS[arch.lower()]
    except KeyError:
        raise GraphError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}") from None
    return builder(class_count, **kwargs)
