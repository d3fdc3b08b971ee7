"""Shallow triplet-trained patch descriptor, its losses, training and weight files."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    InsufficientDataError,
    TrainingDivergedError,
    TruncatedFileError,
    WeightFormatError,
    WeightShapeError,
)

log = logging.getLogger(__name__)

MAGIC = b"TFW1"
NORM_EPS = 1e-6


class DescriptorNet(nn.Module):
    """conv(k1, c1) - tanh - maxpool 2 - conv(k2, c2) - tanh - linear(out) - tanh.

    Defaults give the 32x32 -> 128 shape; smaller settings build the
    scaled-down nets used for gradient checks.
    """

    def __init__(
        self,
        input_side: int = 32,
        conv1: tuple = (7, 32),
        conv2: tuple = (6, 64),
        out_dim: int = 128,
        bias: bool = True,
        seed: int | None = 0,
    ):
        super().__init__()
        self.input_side = input_side
        self.arch = {"input_side": input_side, "conv1": tuple(conv1), "conv2": tuple(conv2),
                     "out_dim": out_dim, "bias": bias}
        if seed is not None:
            torch.manual_seed(seed)
        k1, c1 = conv1
        k2, c2 = conv2
        self.conv1 = nn.Conv2d(1, c1, k1, bias=bias)
        self.conv2 = nn.Conv2d(c1, c2, k2, bias=bias)
        side = (input_side - k1 + 1) // 2 - k2 + 1
        if side < 1:
            raise ValueError(f"input side {input_side} too small for kernels {k1}, {k2}")
        self.fc = nn.Linear(c2 * side * side, out_dim, bias=bias)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, S, S) or (B, 1, S, S) patches in [0, 1] -> (B, out_dim) descriptors."""
        if x.dim() == 3:
            x = x.unsqueeze(1)
        x = normalize_patches(x)
        x = torch.tanh(self.conv1(x))
        x = F.max_pool2d(x, 2)
        x = torch.tanh(self.conv2(x))
        return torch.tanh(self.fc(x.flatten(1)))


def normalize_patches(x):
    """Per-patch zero-mean / unit-std normalisation; flat patches become zero."""
    dims = tuple(range(1, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    std = x.std(dim=dims, keepdim=True, unbiased=False)
    return (x - mean) / (std + NORM_EPS)


def _as_batch(net: DescriptorNet, patches) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    t = torch.as_tensor(np.asarray(patches), dtype=dtype)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.shape[-1] != net.input_side or t.shape[-2] != net.input_side:
        raise DimensionMismatchError(
            f"patch side {tuple(t.shape[-2:])} does not match net input {net.input_side}"
        )
    return t


def describe(net: DescriptorNet, patch) -> np.ndarray:
    return describe_batch(net, patch)[0]


def describe_batch(net: DescriptorNet, patches, batch_size: int = 512) -> np.ndarray:
    t = _as_batch(net, patches)
    out = []
    with torch.no_grad():
        for i in range(0, len(t), batch_size):
            out.append(net(t[i : i + batch_size]).double().numpy())
    if not out:
        return np.zeros((0, net.out_dim))
    return np.concatenate(out)


@dataclass(frozen=True)
class Triplet:
    a: np.ndarray
    p: np.ndarray
    n: np.ndarray


@dataclass(frozen=True)
class TripletDistances:
    delta_plus: float
    delta_minus: float


def _distances_t(fa, fp, fn):
    return torch.linalg.vector_norm(fa - fp, dim=-1), torch.linalg.vector_norm(fa - fn, dim=-1)


def triplet_distances(net, t: Triplet) -> TripletDistances:
    """Euclidean embedding distances anchor-positive and anchor-negative."""
    emb = describe_batch(net, np.stack([t.a, t.p, t.n])) if isinstance(net, DescriptorNet) else np.stack(
        [net(t.a), net(t.p), net(t.n)]
    )
    return TripletDistances(
        delta_plus=float(np.linalg.norm(emb[0] - emb[1])),
        delta_minus=float(np.linalg.norm(emb[0] - emb[2])),
    )


def _lib(x):
    return torch if isinstance(x, torch.Tensor) else np


def margin_ranking_loss(delta_plus, delta_minus, mu: float = 1.0):
    if isinstance(delta_plus, torch.Tensor):
        return torch.clamp(mu + delta_plus - delta_minus, min=0.0)
    return np.maximum(0.0, mu + np.asarray(delta_plus) - np.asarray(delta_minus))


def ratio_loss(delta_plus, delta_minus):
    """Squared softmax ratio loss, shifted by the larger distance against overflow."""
    xp = _lib(delta_plus)
    if xp is np:
        delta_plus = np.asarray(delta_plus, dtype=np.float64)
        delta_minus = np.asarray(delta_minus, dtype=np.float64)
    m = xp.maximum(delta_plus, delta_minus)
    ep = xp.exp(delta_plus - m)
    en = xp.exp(delta_minus - m)
    s = ep + en
    return (ep / s) ** 2 + (1.0 - en / s) ** 2


@dataclass
class TrainConfig:
    loss: str = "margin"
    mu: float = 1.0
    learning_rate: float = 0.1
    momentum: float = 0.0
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("margin", "ratio"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "margin" and self.mu <= 0:
            raise ValueError("margin mu must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def triplet_batch_loss(net: DescriptorNet, a, p, n, cfg: TrainConfig) -> torch.Tensor:
    fa, fp, fn = net(a), net(p), net(n)
    dp, dn = _distances_t(fa, fp, fn)
    if cfg.loss == "margin":
        return margin_ranking_loss(dp, dn, cfg.mu).mean()
    return ratio_loss(dp, dn).mean()


def _stack_triplets(triplets):
    if isinstance(triplets, dict) or hasattr(triplets, "anchors"):
        get = triplets.__getitem__ if isinstance(triplets, dict) else lambda k: getattr(triplets, k)
        return [np.asarray(get(k), dtype=np.float32) for k in ("anchors", "positives", "negatives")]
    triplets = list(triplets)
    return [np.stack([getattr(t, k) for t in triplets]).astype(np.float32) for k in ("a", "p", "n")]


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)


def train(net: DescriptorNet, triplets, cfg: TrainConfig | None = None) -> tuple[DescriptorNet, TrainHistory]:
    """Mini-batch SGD (optional momentum) on the configured triplet loss.

    The net is updated in place and returned. Batch order comes from a
    generator seeded with ``cfg.seed``, so equal inputs give equal weights.
    """
    cfg = cfg or TrainConfig()
    a, p, n = _stack_triplets(triplets)
    if len(a) == 0:
        raise InsufficientDataError("no training triplets")
    dtype = next(net.parameters()).dtype
    a, p, n = (torch.as_tensor(v, dtype=dtype) for v in (a, p, n))
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    history = TrainHistory()
    net.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(a), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(a), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = triplet_batch_loss(net, a[idx], p[idx], n[idx], cfg)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.step_loss.append(value)
            total += value * len(idx)
            count += len(idx)
        history.epoch_loss.append(total / count)
        log.info("epoch %d: mean %s loss %.5f", epoch, cfg.loss, history.epoch_loss[-1])
    net.eval()
    return net, history


def fpr_at_95(distances, labels) -> float:
    """False-positive rate at the smallest threshold accepting 95% of positives."""
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    pos = np.sort(d[y])
    if len(pos) == 0:
        raise InsufficientDataError("no positive pairs")
    k = max(1, int(math.ceil(0.95 * len(pos))))
    threshold = pos[k - 1]
    neg = d[~y]
    if len(neg) == 0:
        return 0.0
    return float(np.mean(neg <= threshold))


@dataclass(frozen=True)
class DescriptorMetrics:
    fpr95: float
    mean_delta_plus: float
    mean_delta_minus: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_descriptor(net: DescriptorNet, patches_1, patches_2, labels) -> DescriptorMetrics:
    """FPR@95 and mean matching/non-matching distances over labelled patch pairs."""
    y = np.asarray(labels, dtype=bool)
    if not y.any():
        raise InsufficientDataError("no positive pairs")
    d = np.linalg.norm(describe_batch(net, patches_1) - describe_batch(net, patches_2), axis=1)
    return DescriptorMetrics(
        fpr95=fpr_at_95(d, y),
        mean_delta_plus=float(d[y].mean()),
        mean_delta_minus=float(d[~y].mean()) if (~y).any() else float("nan"),
    )


def triplets_to_pairs(triplets):
    """Split triplets into labelled pairs: (a, p) positive and (a, n) negative."""
    a, p, n = _stack_triplets(triplets)
    first = np.concatenate([a, a])
    second = np.concatenate([p, n])
    labels = np.concatenate([np.ones(len(a), bool), np.zeros(len(a), bool)])
    return first, second, labels


# weight files: "TFW1", u32 count, then per tensor u16 name length, name,
# u8 rank, u32 dims, float32 data, all little-endian


def save_weights(net: DescriptorNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends inside {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_weight_file(path) -> dict:
    """Raw {name: float32 array} contents of a weight file."""
    r = _Reader(Path(path).read_bytes())
    if r.data[:4] != MAGIC:
        raise BadMagicError("not a TFW1 weight file")
    r.pos = 4
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError("tensor name is not UTF-8") from exc
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = r.take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.data):
        raise WeightFormatError(f"{len(r.data) - r.pos} trailing bytes after the last tensor")
    return tensors


def load_weights(path, **arch) -> DescriptorNet:
    """Load a weight file into a net of the declared architecture (default shape)."""
    tensors = read_weight_file(path)
    net = DescriptorNet(seed=None, **arch)
    state = net.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise WeightFormatError(f"tensor names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, expected in state.items():
        if tuple(expected.shape) != tensors[name].shape:
            raise WeightShapeError(name, expected.shape, tensors[name].shape)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    net.eval()
    return net
