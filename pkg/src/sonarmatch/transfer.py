"""Style-transfer losses, pixel-space optimisation and the colour/luminance controls.

The loss functions accept numpy arrays or torch tensors alike, so the same
code is evaluated by the optimiser (through autograd) and by the tests.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateStyleError, DimensionMismatchError, OptimizationDivergedError, UnknownLayerError
from .features import FeatureExtractor, default_layers, gram
from .imgcore import GRAY, RGB, YIQ, Image, rgb_to_yiq, to_gray, to_rgb, yiq_to_rgb

log = logging.getLogger(__name__)

FULL = "full"
LUMINANCE_ONLY = "luminance_only"
COLOR_EPS = 1e-6
MAX_HALVINGS = 30


@dataclass(frozen=True)
class ContentTarget:
    layers: dict  # name -> P^l (N_l x M_l)


@dataclass(frozen=True)
class StyleTarget:
    grams: dict  # name -> A^l (N_l x N_l)
    weights: dict  # name -> w_l
    sizes: dict  # name -> (N_l, M_l)


@dataclass
class TransferConfig:
    alpha: float = 1.0
    beta: float = 1e3
    content_layers: tuple | None = None
    style_layers: tuple | None = None
    num_iterations: int = 300
    step_size: float = 1.0
    mode: str = FULL
    color_prematch: bool = False
    seed: int = 0
    # "style_to_content" rescales the style luminance onto the content statistics
    luminance_direction: str = "style_to_content"
    # "adam": per-pixel adaptive steps of about step_size grey levels;
    # "descent": max-normalised gradient descent with backtracking (monotone trace)
    optimizer: str = "adam"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("alpha and beta must be non-negative and not both zero")
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be >= 1")
        if self.mode not in (FULL, LUMINANCE_ONLY):
            raise ValueError(f"unknown transfer mode {self.mode!r}")
        if self.luminance_direction not in ("style_to_content", "content_to_style"):
            raise ValueError(f"unknown luminance direction {self.luminance_direction!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {sorted(OPTIMIZERS)}")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for key in ("content_layers", "style_layers"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


@dataclass
class TransferResult:
    image: Image
    trace: list = field(default_factory=list)  # one dict per evaluated iterate
    yiq: Image | None = None  # assembled YIQ output in luminance-only mode

    @property
    def initial_loss(self) -> float:
        return self.trace[0]["total"]

    @property
    def final_loss(self) -> float:
        """Loss of the returned (pre-clamp) iterate, the lowest total in the trace."""
        return min(t["total"] for t in self.trace)


def _sum(x):
    return x.sum()


def content_loss(activations: dict, target) -> float:
    """Half the squared activation residual, summed over the content layers."""
    layers = target.layers if isinstance(target, ContentTarget) else target
    total = 0.0
    for name, p in layers.items():
        if name not in activations:
            raise UnknownLayerError(f"no activations for content layer {name!r}")
        f = activations[name]
        if tuple(f.shape) != tuple(p.shape):
            raise DimensionMismatchError(f"layer {name}: activations {tuple(f.shape)} vs target {tuple(p.shape)}")
        total = total + 0.5 * _sum((f - p) ** 2)
    return total


def style_layer_loss(g, a, n_filters: int, n_positions: int):
    if tuple(g.shape) != tuple(a.shape):
        raise DimensionMismatchError(f"Gram shapes differ: {tuple(g.shape)} vs {tuple(a.shape)}")
    return _sum((g - a) ** 2) / (4.0 * n_filters**2 * n_positions**2)


def style_loss(grams: dict, target: StyleTarget):
    total = 0.0
    for name, a in target.grams.items():
        if name not in grams:
            raise UnknownLayerError(f"no Gram matrix for style layer {name!r}")
        n, m = target.sizes[name]
        total = total + target.weights[name] * style_layer_loss(grams[name], a, n, m)
    return total


def total_loss(content, style, alpha: float, beta: float):
    return alpha * content + beta * style


def content_target(extractor: FeatureExtractor, img, layers) -> ContentTarget:
    return ContentTarget(extractor.extract(img, layers))


def style_target(extractor: FeatureExtractor, img, layers, weights=None) -> StyleTarget:
    acts = extractor.extract(img, layers)
    if weights is None:
        weights = {name: 1.0 / len(layers) for name in layers}
    elif not isinstance(weights, dict):
        weights = dict(zip(layers, weights))
    return StyleTarget(
        grams={name: gram(f) for name, f in acts.items()},
        weights=dict(weights),
        sizes={name: f.shape for name, f in acts.items()},
    )


def luminance_match(style_lum, mu_c: float, sigma_c: float) -> np.ndarray:
    """Shift and scale the style luminance to mean ``mu_c`` and std ``sigma_c``.

    Uses population statistics. The result is not clamped.
    """
    lum = style_lum.plane(0) if isinstance(style_lum, Image) else np.asarray(style_lum, dtype=np.float64)
    mu_s = lum.mean()
    sigma_s = lum.std()
    if sigma_s <= 0.0:
        raise DegenerateStyleError("style luminance has zero variance")
    return (sigma_c / sigma_s) * (lum - mu_s) + mu_c


def color_transform(style_pixels: np.ndarray, content_pixels: np.ndarray):
    """(A, b) with A = chol(cov_c) chol(cov_s)^-1 and b = mu_c - A mu_s."""
    ps = style_pixels.reshape(-1, 3)
    pc = content_pixels.reshape(-1, 3)
    mu_s, mu_c = ps.mean(axis=0), pc.mean(axis=0)
    cov_s = np.cov(ps, rowvar=False, bias=True)
    cov_c = np.cov(pc, rowvar=False, bias=True)
    try:
        l_s = np.linalg.cholesky(cov_s)
    except np.linalg.LinAlgError:
        warnings.warn("style colour covariance is singular; regularising", RuntimeWarning, stacklevel=2)
        try:
            l_s = np.linalg.cholesky(cov_s + COLOR_EPS * np.eye(3))
        except np.linalg.LinAlgError as exc:
            raise DegenerateStyleError("style colour covariance is singular") from exc
    try:
        l_c = np.linalg.cholesky(cov_c)
    except np.linalg.LinAlgError:
        l_c = np.linalg.cholesky(cov_c + COLOR_EPS * np.eye(3))
    a = l_c @ np.linalg.inv(l_s)
    b = mu_c - a @ mu_s
    return a, b


def color_match_pixels(style_pixels: np.ndarray, content_pixels: np.ndarray) -> np.ndarray:
    """Unclamped affine colour map giving the style the content's mean and covariance."""
    a, b = color_transform(style_pixels, content_pixels)
    shape = style_pixels.shape
    return (style_pixels.reshape(-1, 3) @ a.T + b).reshape(shape)


def color_match(style: Image, content: Image) -> Image:
    """New style image whose RGB mean/covariance match the content image."""
    if style.colorspace != RGB or content.colorspace != RGB:
        raise ValueError("color_match needs two RGB images")
    return Image(np.clip(color_match_pixels(style.pixels, content.pixels), 0.0, 1.0), RGB)


class TransferObjective:
    """Weighted content plus Gram-style objective as a function of pixels."""

    def __init__(self, extractor, content_img, style_img, cfg: TransferConfig):
        default_c, default_s = default_layers(extractor)
        self.content_layers = tuple(cfg.content_layers or default_c)
        self.style_layers = tuple(cfg.style_layers or default_s)
        self.extractor = extractor
        self.cfg = cfg
        extractor.check_layers(self.content_layers + self.style_layers)
        self.content = content_target(extractor, content_img, self.content_layers)
        self.style = style_target(extractor, style_img, self.style_layers)
        dt = extractor.dtype
        self._p = {k: torch.as_tensor(v, dtype=dt) for k, v in self.content.layers.items()}
        self._a = {k: torch.as_tensor(v, dtype=dt) for k, v in self.style.grams.items()}

    def terms(self, x: torch.Tensor):
        layers = list(dict.fromkeys(self.content_layers + self.style_layers))
        acts = self.extractor.forward(x, layers)
        lc = content_loss({k: acts[k] for k in self.content_layers}, self._p)
        grams = {k: gram(acts[k]) for k in self.style_layers}
        ls = style_loss(grams, StyleTarget(self._a, self.style.weights, self.style.sizes))
        lt = total_loss(lc, ls, self.cfg.alpha, self.cfg.beta)
        return lc, ls, lt

    def value_and_grad(self, x: torch.Tensor):
        x = x.detach().clone().requires_grad_(True)
        lc, ls, lt = self.terms(x)
        (g,) = torch.autograd.grad(lt, x)
        return float(lc), float(ls), float(lt), g


def _to_tensor(pixels: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)[None])).to(dtype)


def _evaluator(objective, lift):
    dt = objective.extractor.dtype

    def evaluate(var, need_grad):
        v = var.detach().clone().requires_grad_(need_grad)
        terms = objective.terms(lift(v).to(dt))
        vals = [float(t.detach()) for t in terms]
        if not all(math.isfinite(t) for t in vals):
            raise OptimizationDivergedError(f"non-finite loss {vals}")
        grad = torch.autograd.grad(terms[2], v)[0].to(torch.float64) if need_grad else None
        return vals, grad

    return evaluate


def _entry(it, vals, step):
    return {"iteration": it, "content": vals[0], "style": vals[1], "total": vals[2], "step": step}


def _optimize_adam(objective: TransferObjective, x0: np.ndarray, cfg: TransferConfig, channel_map=None):
    """Adam on the pixels with learning rate step_size/255.

    The returned image is the iterate with the lowest total loss seen, so the
    output never scores worse than the content initialisation.
    """
    evaluate = _evaluator(objective, channel_map or (lambda v: v))
    var = _to_tensor(x0, torch.float64).requires_grad_(True)
    lr = cfg.step_size / 255.0
    vals, g = evaluate(var, True)
    trace = [_entry(0, vals, cfg.step_size)]
    best, best_total = var.detach().clone(), vals[2]
    if lr == 0:
        trace.extend(_entry(it, vals, 0.0) for it in range(1, cfg.num_iterations + 1))
        return best[0].permute(1, 2, 0).numpy(), trace
    opt = torch.optim.Adam([var], lr=lr)
    for it in range(1, cfg.num_iterations + 1):
        opt.zero_grad()
        var.grad = g.to(var.dtype)
        opt.step()
        vals, g = evaluate(var, True)
        trace.append(_entry(it, vals, cfg.step_size))
        if vals[2] < best_total:
            best, best_total = var.detach().clone(), vals[2]
    return best[0].permute(1, 2, 0).numpy(), trace


def _optimize(objective: TransferObjective, x0: np.ndarray, cfg: TransferConfig, channel_map=None):
    """Descent on the max-normalised gradient with step halving.

    A step moves the most-affected pixel by step/255 grey levels. A trial step
    that would raise the loss is halved until it does not, so the recorded
    trace never increases; after each accepted step the step doubles again, up
    to ``cfg.step_size``.
    ``channel_map`` lifts the optimised variable into the extractor's input
    (used to drive a 3-channel extractor from a single luminance plane).
    """
    evaluate = _evaluator(objective, channel_map or (lambda v: v))
    var = _to_tensor(x0, torch.float64)
    vals, g = evaluate(var, True)
    trace = [_entry(0, vals, cfg.step_size)]
    step = cfg.step_size
    for it in range(1, cfg.num_iterations + 1):
        peak = float(g.abs().max())
        if step > 0 and peak > 0:
            direction = g / (255.0 * peak)
            for _ in range(MAX_HALVINGS):
                trial = var - step * direction
                trial_vals, _ = evaluate(trial, False)
                if trial_vals[2] <= vals[2]:
                    var = trial
                    vals, g = evaluate(var, True)
                    trace_step = step
                    step = min(2.0 * step, cfg.step_size)
                    break
                step *= 0.5
            else:
                trace_step = 0.0
        else:
            trace_step = 0.0
        trace.append(_entry(it, vals, trace_step))
    out = var[0].permute(1, 2, 0).numpy()
    return out, trace


OPTIMIZERS = {"adam": _optimize_adam, "descent": _optimize}


def run_transfer(content: Image, style: Image, extractor: FeatureExtractor, cfg: TransferConfig) -> TransferResult:
    """Generate an image with the content of ``content`` and the style of ``style``.

    Optimisation starts from the content image. Output pixels are clamped to
    [0, 1] once, after the last iteration, and the output keeps the content's
    colorspace and size.
    """
    torch.manual_seed(cfg.seed)
    content_rgb = to_rgb(content)
    style_rgb = to_rgb(style)
    if cfg.color_prematch:
        style_rgb = color_match(style_rgb, content_rgb)

    if cfg.mode == FULL:
        objective = TransferObjective(extractor, content_rgb, style_rgb, cfg)
        out, trace = OPTIMIZERS[cfg.optimizer](objective, content_rgb.pixels, cfg)
        image = Image(np.clip(out, 0.0, 1.0), RGB)
        if content.colorspace == GRAY:
            image = to_gray(image)
        return TransferResult(image=image, trace=trace)

    content_yiq = rgb_to_yiq(content_rgb).pixels.copy()
    if content.colorspace == GRAY:
        content_yiq[:, :, 0] = content.plane(0)
    y_c = content_yiq[:, :, :1]
    y_s = rgb_to_yiq(style_rgb).pixels[:, :, 0]
    if cfg.luminance_direction == "style_to_content":
        style_lum = luminance_match(y_s, float(y_c.mean()), float(y_c.std()))
    else:
        style_lum = y_s
        y_c = luminance_match(y_c[:, :, 0], float(y_s.mean()), float(y_s.std()))[:, :, None]
    replicate = lambda v: v.expand(-1, 3, -1, -1)  # noqa: E731
    objective = TransferObjective(
        extractor,
        np.repeat(y_c, 3, axis=2),
        np.repeat(style_lum[:, :, None], 3, axis=2),
        cfg,
    )
    out, trace = OPTIMIZERS[cfg.optimizer](objective, y_c, cfg, channel_map=replicate)
    assembled = content_yiq.copy()
    assembled[:, :, 0] = np.clip(out[:, :, 0], 0.0, 1.0)
    yiq = Image(assembled, YIQ)
    image = yiq_to_rgb(yiq)
    if content.colorspace == GRAY:
        image = Image(assembled[:, :, :1], GRAY)
    return TransferResult(image=image, trace=trace, yiq=yiq)
