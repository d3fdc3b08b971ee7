"""Deep convolutional feature extraction with named layers and Gram matrices.

Activations of a layer are returned as an ``N x M`` matrix: N filters by M
spatial positions flattened row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import UnknownLayerError
from .imgcore import Image, to_rgb

LayerActivations = dict  # layer name -> (N_l, M_l) array


def gram(features):
    """Gram matrix G = F F^T of an N x M feature matrix (numpy or torch)."""
    return features @ features.T


@dataclass
class ConvStage:
    name: str
    weight: torch.Tensor
    bias: torch.Tensor | None = None
    activation: str = "tanh"
    pool: str | None = None  # applied after the activation, before the next stage


class FeatureExtractor:
    """Base class: subclasses implement ``forward`` on a (1, C, H, W) tensor."""

    layer_names: tuple = ()
    dtype = torch.float64

    def forward(self, x: torch.Tensor, layers) -> dict:
        raise NotImplementedError

    def check_layers(self, layers):
        unknown = [name for name in layers if name not in self.layer_names]
        if unknown:
            raise UnknownLayerError(f"unknown layer(s) {unknown}; available: {list(self.layer_names)}")

    def image_tensor(self, img) -> torch.Tensor:
        if isinstance(img, Image):
            px = to_rgb(img).pixels if img.colorspace != "YIQ" else img.pixels
        else:
            px = np.asarray(img, dtype=np.float64)
        return torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1)[None])).to(self.dtype)

    def extract(self, img, layers) -> LayerActivations:
        self.check_layers(layers)
        with torch.no_grad():
            acts = self.forward(self.image_tensor(img), layers)
        return {name: acts[name].double().numpy() for name in layers}

    def reverse(self, img, upstream: dict) -> np.ndarray:
        """Gradient w.r.t. input pixels (H, W, C) of sum_l <upstream_l, F_l>."""
        self.check_layers(upstream)
        x = self.image_tensor(img).requires_grad_(True)
        acts = self.forward(x, list(upstream))
        outs = [acts[name] for name in upstream]
        grads = [torch.as_tensor(np.asarray(upstream[name]), dtype=acts[name].dtype) for name in upstream]
        (gx,) = torch.autograd.grad(outs, x, grad_outputs=grads)
        return gx[0].permute(1, 2, 0).double().numpy()


def _activate(x, kind):
    if kind == "tanh":
        return torch.tanh(x)
    if kind == "relu":
        return torch.relu(x)
    if kind in (None, "linear"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _pool(x, kind):
    if kind == "avg":
        return F.avg_pool2d(x, 2)
    if kind == "max":
        return F.max_pool2d(x, 2)
    return x


class ConvStackExtractor(FeatureExtractor):
    """Sequential 'same'-padded convolutions; each stage's activation is a named layer."""

    def __init__(self, stages, dtype=torch.float64):
        self.dtype = dtype
        self.stages = [
            ConvStage(
                s.name,
                torch.as_tensor(s.weight, dtype=dtype),
                None if s.bias is None else torch.as_tensor(s.bias, dtype=dtype),
                s.activation,
                s.pool,
            )
            for s in stages
        ]
        self.layer_names = tuple(s.name for s in self.stages)

    @property
    def in_channels(self) -> int:
        return self.stages[0].weight.shape[1]

    def forward(self, x, layers):
        self.check_layers(layers)
        wanted = set(layers)
        out = {}
        for stage in self.stages:
            k = stage.weight.shape[-1]
            x = F.conv2d(x, stage.weight, stage.bias, padding=k // 2)
            x = _activate(x, stage.activation)
            if stage.name in wanted:
                out[stage.name] = x[0].reshape(x.shape[1], -1)
                if len(out) == len(wanted):
                    break
            x = _pool(x, stage.pool)
        return out


def tiny_extractor(seed: int = 0, in_channels: int = 3, widths=(8, 16), bias: bool = False) -> ConvStackExtractor:
    """Seeded random two-layer tanh network used for offline tests and the tiny profile."""
    rng = np.random.default_rng(seed)
    stages = []
    c_in = in_channels
    for i, width in enumerate(widths, start=1):
        fan_in = c_in * 9
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(width, c_in, 3, 3))
        b = rng.normal(0.0, 0.1, size=width) if bias else None
        stages.append(ConvStage(f"conv{i}", torch.from_numpy(w), None if b is None else torch.from_numpy(b),
                                "tanh", "avg" if i < len(widths) else None))
        c_in = width
    return ConvStackExtractor(stages)


# torchvision ``vgg19().features`` indices of each convolution
_VGG19_CONVS = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28, "conv5_2": 30, "conv5_3": 32, "conv5_4": 34,
}
VGG_CONTENT_LAYERS = ("conv4_2",)
VGG_STYLE_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class VGG19Extractor(FeatureExtractor):
    """VGG-19 convolutional stack; layer ``convX_Y`` is the ReLU output of that convolution.

    Pretrained weights are read from a local torch state dict (either the full
    torchvision classifier or just its ``features`` part). Without a path the
    network keeps torchvision's random initialisation.
    """

    dtype = torch.float32

    def __init__(self, weights_path=None, pool: str = "avg", seed: int = 0):
        from torchvision.models import vgg19

        torch.manual_seed(seed)
        features = vgg19(weights=None).features
        if weights_path is not None:
            state = torch.load(Path(weights_path), map_location="cpu", weights_only=True)
            if any(k.startswith("features.") for k in state):
                state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            features.load_state_dict(state)
        if pool == "avg":
            for i, mod in enumerate(features):
                if isinstance(mod, torch.nn.MaxPool2d):
                    features[i] = torch.nn.AvgPool2d(2)
        self.net = features.eval().requires_grad_(False)
        self.layer_names = tuple(_VGG19_CONVS)
        self._mean = torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1)

    def forward(self, x, layers):
        self.check_layers(layers)
        x = (x.to(self.dtype) - self._mean) / self._std
        stop = {_VGG19_CONVS[name] + 1: name for name in layers}  # ReLU follows each conv
        last = max(stop)
        out = {}
        for i, mod in enumerate(self.net):
            x = mod(x)
            if i in stop:
                out[stop[i]] = x[0].reshape(x.shape[1], -1)
            if i >= last:
                break
        return out


def build_extractor(spec: dict | None) -> FeatureExtractor:
    """Extractor from a config mapping such as ``{"kind": "tiny", "seed": 0}``."""
    spec = dict(spec or {"kind": "tiny"})
    kind = spec.pop("kind", "tiny")
    if kind == "tiny":
        return tiny_extractor(seed=spec.get("seed", 0), widths=tuple(spec.get("widths", (8, 16))))
    if kind == "vgg19":
        return VGG19Extractor(weights_path=spec.get("weights"), pool=spec.get("pool", "avg"))
    raise ValueError(f"unknown extractor kind {kind!r}")


def default_layers(extractor: FeatureExtractor) -> tuple[tuple, tuple]:
    """(content_layers, style_layers) conventional for the extractor."""
    if isinstance(extractor, VGG19Extractor):
        return VGG_CONTENT_LAYERS, VGG_STYLE_LAYERS
    names = extractor.layer_names
    return (names[-1],), tuple(names)
