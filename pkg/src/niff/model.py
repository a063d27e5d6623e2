"""Desk-scale CNNs built from spatial or NIFF convolutions.

A model is a chain of blocks followed by global average pooling and a linear
classifier.  Each block is ``conv -> batchnorm -> relu``; a residual block runs
two such convs (the second without the relu), adds the input back and then
applies the relu.  Normalization and activation always run in the spatial
domain.  Downsampling is always a spatial stride-2 convolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import freqconv as fc
from .layers import BatchNorm2d, GlobalAvgPool, Linear, ReLU
from .synthesis import ACTIVATIONS, GRID_NORMS, PRESETS

CONV_KINDS = (
    "spatial",
    "spatial_depthwise",
    "spatial_pointwise",
    "spatial_stride2",
    "niff_depthwise",
    "niff_full",
    "niff_decomposed",
    "freq_pointwise",
)
NIFF_KINDS = ("niff_depthwise", "niff_full", "niff_decomposed")
DEPTHWISE_KINDS = ("spatial_depthwise", "niff_depthwise")

# NIFF kind -> spatial counterpart with the same role in the network
SPATIAL_TWIN = {
    "niff_full": "spatial",
    "niff_decomposed": "spatial",
    "niff_depthwise": "spatial_depthwise",
    "freq_pointwise": "spatial_pointwise",
}


class SpecError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    channels: int
    preset: str = "cifar_small"
    activation: str = "relu"
    norm: str = "batchnorm"
    kernel_size: int = 3
    residual: bool = False


@dataclass
class ModelSpec:
    blocks: list
    in_channels: int = 1
    input_size: tuple = (28, 28)
    num_classes: int = 10
    grid_norm: str = "normalized"
    spectral_path: str = "complex"

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = [LayerSpec(**b) for b in d["blocks"]]
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)

    def with_input_size(self, h, w):
        return replace(self, input_size=(h, w))

    def validate(self):
        if self.grid_norm not in GRID_NORMS:
            raise SpecError(f"unknown grid_norm {self.grid_norm!r}; expected one of {GRID_NORMS}")
        if self.spectral_path not in fc.PATHS:
            raise SpecError(f"unknown spectral_path {self.spectral_path!r}; expected one of {fc.PATHS}")
        c = self.in_channels
        h, w = self.input_size
        if min(c, h, w, self.num_classes) < 1:
            raise SpecError("channels, input size and class count must be positive")
        for i, b in enumerate(self.blocks):
            where = f"block {i} ({b.kind})"
            if b.kind not in CONV_KINDS:
                raise SpecError(f"{where}: unknown conv kind; expected one of {CONV_KINDS}")
            if b.norm != "batchnorm":
                raise SpecError(f"{where}: only batchnorm is supported")
            if b.kind in NIFF_KINDS:
                if b.preset not in PRESETS:
                    raise SpecError(f"{where}: unknown preset {b.preset!r}")
                if b.activation not in ACTIVATIONS:
                    raise SpecError(f"{where}: unknown activation {b.activation!r}")
            if b.kind.startswith("spatial") and b.kind != "spatial_pointwise" and b.kernel_size % 2 == 0:
                raise SpecError(f"{where}: kernel size must be odd")
            if b.kind in DEPTHWISE_KINDS and b.channels != c:
                raise SpecError(f"{where}: depthwise conv cannot change channels {c} -> {b.channels}")
            if b.residual:
                if b.kind == "spatial_stride2":
                    raise SpecError(f"{where}: residual blocks must keep the resolution")
                if b.channels != c:
                    raise SpecError(f"{where}: residual block cannot change channels {c} -> {b.channels}")
            if b.kind == "spatial_stride2":
                h, w = -(-h // 2), -(-w // 2)
            c = b.channels
        return self


def spatial_twin(spec: ModelSpec) -> ModelSpec:
    """Same topology with every frequency-domain conv swapped for its spatial counterpart."""
    blocks = [replace(b, kind=SPATIAL_TWIN.get(b.kind, b.kind)) for b in spec.blocks]
    return replace(spec, blocks=blocks)


def desk_plain(variant="niff", channels=(16, 32, 64), preset="cifar_small", activation="relu",
               in_channels=1, input_size=(28, 28), num_classes=10) -> ModelSpec:
    """Three depthwise-separable stages joined by stride-2 convs."""
    blocks = [LayerSpec("niff_full", channels[0], preset, activation)]
    for i, c in enumerate(channels):
        if i:
            blocks.append(LayerSpec("spatial_stride2", c))
        blocks.append(LayerSpec("niff_depthwise", c, preset, activation))
        blocks.append(LayerSpec("freq_pointwise", c))
    spec = ModelSpec(blocks, in_channels, tuple(input_size), num_classes)
    return spec if variant == "niff" else spatial_twin(spec)


def desk_resnet(variant="niff", channels=(16, 32, 64), blocks_per_stage=2, preset="cifar_small",
                activation="relu", full="decomposed", in_channels=1, input_size=(28, 28),
                num_classes=10) -> ModelSpec:
    """Three residual stages; convs are decomposed (depthwise + 1x1) or full NIFF."""
    kind = {"decomposed": "niff_decomposed", "full": "niff_full"}[full]
    blocks = [LayerSpec(kind, channels[0], preset, activation)]
    for i, c in enumerate(channels):
        if i:
            blocks.append(LayerSpec("spatial_stride2", c))
        blocks += [LayerSpec(kind, c, preset, activation, residual=True) for _ in range(blocks_per_stage)]
    spec = ModelSpec(blocks, in_channels, tuple(input_size), num_classes)
    return spec if variant == "niff" else spatial_twin(spec)


DESK_PRESETS = {"plain": desk_plain, "resnet": desk_resnet}


# ------------------------------------------------------------------ blocks

def make_conv(spec: LayerSpec, c_in, rng, dtype, grid_norm):
    k, c = spec.kind, spec.channels
    if k == "spatial":
        return fc.SpatialConv(c_in, c, spec.kernel_size, 1, rng=rng, dtype=dtype)
    if k == "spatial_stride2":
        return fc.SpatialConv(c_in, c, spec.kernel_size, 2, rng=rng, dtype=dtype)
    if k == "spatial_depthwise":
        return fc.SpatialDepthwise(c, spec.kernel_size, rng=rng, dtype=dtype)
    if k == "spatial_pointwise":
        return fc.SpatialPointwise(c_in, c, rng=rng, dtype=dtype)
    if k == "freq_pointwise":
        return fc.FreqPointwise(c_in, c, rng=rng, dtype=dtype)
    common = dict(preset_name=spec.preset, activation=spec.activation, rng=rng, dtype=dtype, grid_norm=grid_norm)
    if k == "niff_depthwise":
        return fc.NiffDepthwise(c, **common)
    if k == "niff_full":
        return fc.NiffFull(c_in, c, **common)
    if k == "niff_decomposed":
        return fc.NiffDecomposed(c_in, c, **common)
    raise SpecError(f"unknown conv kind {k!r}")


class ConvBlock:
    def __init__(self, spec, c_in, rng, dtype, grid_norm):
        self.conv = make_conv(spec, c_in, rng, dtype, grid_norm)
        self.bn = BatchNorm2d(spec.channels, dtype=dtype)
        self.act = ReLU()

    def named_layers(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def forward(self, x, train=True):
        return self.act.forward(self.bn.forward(self.conv.forward(x, train), train), train)

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.act.backward(dy)))


class ResidualBlock:
    def __init__(self, spec, c_in, rng, dtype, grid_norm):
        self.conv1 = make_conv(spec, c_in, rng, dtype, grid_norm)
        self.bn1 = BatchNorm2d(spec.channels, dtype=dtype)
        self.act1 = ReLU()
        self.conv2 = make_conv(spec, spec.channels, rng, dtype, grid_norm)
        self.bn2 = BatchNorm2d(spec.channels, dtype=dtype)
        self.act2 = ReLU()

    def named_layers(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]

    def forward(self, x, train=True):
        h = self.act1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        return self.act2.forward(h + x, train)

    def backward(self, dy):
        d = self.act2.backward(dy)
        dh = self.conv2.backward(self.bn2.backward(d))
        dh = self.conv1.backward(self.bn1.backward(self.act1.backward(dh)))
        return dh + d


class Model:
    def __init__(self, spec: ModelSpec, rng=None, dtype=np.float32):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(rng)
        self.blocks = []
        self.resolutions = {}
        c = spec.in_channels
        h, w = spec.input_size
        for i, b in enumerate(spec.blocks):
            block = (ResidualBlock if b.residual else ConvBlock)(b, c, rng, dtype, spec.grid_norm)
            for _, layer in block.named_layers():
                if hasattr(layer, "spectral_path"):
                    layer.spectral_path = spec.spectral_path
            if b.kind == "spatial_stride2":
                h, w = -(-h // 2), -(-w // 2)
            for name, _ in block.named_layers():
                if name.startswith("conv"):
                    self.resolutions[f"blocks.{i}.{name}"] = (h, w)
            self.blocks.append(block)
            c = b.channels
        self.last_residues = {}
        self.pool = GlobalAvgPool()
        self.head = Linear(c, spec.num_classes, rng, dtype)

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            for name, layer in block.named_layers():
                yield f"blocks.{i}.{name}", layer
        yield "head", self.head

    def niff_layers(self):
        """``(name, layer, (h, w))`` for every layer with MLP-synthesized filters."""
        return [(n, l, self.resolutions[n]) for n, l in self.named_layers() if isinstance(l, fc._NiffLayer)]

    def named_parameters(self):
        for lname, layer in self.named_layers():
            for pname, p in layer.params.items():
                yield f"{lname}.{pname}", p

    def named_buffers(self):
        for lname, layer in self.named_layers():
            for bname, b in layer.buffers.items():
                yield f"{lname}.{bname}", b

    def named_grads(self):
        for lname, layer in self.named_layers():
            for pname in layer.params:
                yield f"{lname}.{pname}", layer.grads[pname]

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def set_bank_caching(self, enabled: bool):
        for _, layer, _ in self.niff_layers():
            layer.cache_banks = enabled
            layer.invalidate()

    def forward(self, x, train=True):
        for block in self.blocks:
            x = block.forward(x, train)
        return self.head.forward(self.pool.forward(x, train), train)

    def backward(self, dlogits):
        d = self.pool.backward(self.head.backward(dlogits))
        for block in reversed(self.blocks):
            d = block.backward(d)
        return d

    def set_residue_tracking(self, enabled: bool):
        for _, layer in self.named_layers():
            if hasattr(layer, "track_residue"):
                layer.track_residue = enabled

    def residues(self):
        """Largest dropped imaginary magnitude per frequency layer, from the last tracked forward."""
        return {n: l.last_residue for n, l in self.named_layers() if hasattr(l, "last_residue")}


def build_model(spec: ModelSpec, seed=0, dtype=np.float32) -> Model:
    return Model(spec, np.random.default_rng([seed, 0]), dtype)


def large_kernel_equivalent_parameters(spec: ModelSpec) -> int:
    """Parameters of the spatial net whose kernels span the whole feature map.

    Every NIFF conv becomes the explicit spatial kernel it represents: one
    ``h x w`` tap grid per filter at that layer's resolution.  The remaining
    layers, batchnorms and the head are counted as built.
    """
    spec.validate()
    c = spec.in_channels
    h, w = spec.input_size
    total = 0
    for b in spec.blocks:
        if b.kind == "spatial_stride2":
            h, w = -(-h // 2), -(-w // 2)
        for j in range(2 if b.residual else 1):
            c_in, c_out = (c if j == 0 else b.channels), b.channels
            m2 = b.kernel_size ** 2
            total += {
                "niff_full": c_out * c_in * h * w,
                "niff_depthwise": c_out * h * w,
                "niff_decomposed": c_in * h * w + c_out * c_in,
                "freq_pointwise": c_out * c_in,
                "spatial_pointwise": c_out * c_in,
                "spatial": c_out * c_in * m2,
                "spatial_stride2": c_out * c_in * m2,
                "spatial_depthwise": c_out * m2,
            }[b.kind]
            total += 2 * c_out  # batchnorm scale and shift
        c = b.channels
    return total + c * spec.num_classes + spec.num_classes
