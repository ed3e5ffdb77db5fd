"""Expected-gradients SHAP attributions, attention and gradient rollout, and overlay rendering."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .artifacts import atomic_write_bytes, digest
from .errors import ConfigurationError, ValidationError

FUSIONS = ("mean", "max", "min")
STYLES = ("heat_overlay", "signed_diverging")


@dataclass
class AttributionMap:
    values: np.ndarray  # (C, H, W) signed scores
    target_class: int
    background_id: str
    n_samples: int = 0

    def channel_sum(self) -> np.ndarray:
        return self.values.sum(axis=0)


def _background_id(background: torch.Tensor) -> str:
    return digest(background.detach().cpu().numpy().tobytes())


def shap_gradient_explain(
    model,
    image,
    background,
    target_class: int,
    n_samples: int = 200,
    seed: int = 0,
    output: str = "logits",
    batch_size: int = 50,
) -> AttributionMap:
    """Expected-gradients estimate of SHAP values for one image.

    Each draw pairs a background sample ``b`` with a path position ``alpha``
    (stratified over [0, 1) per background sample) and accumulates ``(x - b) * grad f_c(b + alpha (x - b))``. Background samples
    are used equally often (the draw count is rounded up to a multiple of the
    background size), so for a linear model the result is exactly
    ``w * (x - mean(background))``.
    """
    background = torch.as_tensor(background)
    if background.ndim == 0 or len(background) == 0:
        raise ConfigurationError("SHAP needs a non-empty background set")
    x = torch.as_tensor(image, dtype=background.dtype)
    if x.shape != background.shape[1:]:
        raise ValidationError(f"image shape {tuple(x.shape)} does not match background {tuple(background.shape[1:])}")
    if output not in ("logits", "probs"):
        raise ConfigurationError("output must be 'logits' or 'probs'")
    n_bg = len(background)
    reps = max(1, math.ceil(n_samples / n_bg))
    rng = np.random.default_rng(seed)
    bg_idx = np.tile(np.arange(n_bg), reps)
    # stratified path positions: the r-th draw of each background sample lies in [r/reps, (r+1)/reps)
    strata = np.repeat(np.arange(reps), n_bg)
    alphas = (strata + rng.uniform(0.0, 1.0, size=len(bg_idx))) / reps
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    acc = torch.zeros_like(x)
    try:
        for start in range(0, len(bg_idx), batch_size):
            idx = torch.from_numpy(bg_idx[start:start + batch_size])
            a = torch.from_numpy(alphas[start:start + batch_size]).to(x.dtype).view(-1, *([1] * x.ndim))
            b = background[idx]
            delta = x.unsqueeze(0) - b
            xi = (b + a * delta).detach().requires_grad_(True)
            out = model(xi)
            if output == "probs":
                out = F.softmax(out, dim=1)
            (grad,) = torch.autograd.grad(out[:, target_class].sum(), xi)
            acc += (delta * grad).sum(0).detach()
    finally:
        if was_training:
            model.train()
    values = (acc / len(bg_idx)).cpu().numpy()
    return AttributionMap(values, int(target_class), _background_id(background), len(bg_idx))


@dataclass(frozen=True)
class RolloutConfig:
    fusion: str = "mean"
    discard_ratio: float = 0.8

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown head fusion {self.fusion!r}")
        if not 0.0 <= self.discard_ratio < 1.0:
            raise ConfigurationError("discard_ratio must be in [0, 1)")


@dataclass
class RolloutMask:
    grid: np.ndarray  # (side, side), max-normalized to [0, 1]
    raw: np.ndarray  # class-token row over patch tokens before normalization
    layers: list = field(default_factory=list, repr=False)  # per-layer row-normalized transitions

    def upsample(self, size: int = 224) -> np.ndarray:
        factor = size // self.grid.shape[0]
        if factor * self.grid.shape[0] != size:
            raise ValidationError(f"cannot upsample a {self.grid.shape[0]}-grid to {size} pixels")
        return np.kron(self.grid, np.ones((factor, factor)))


def fuse_heads(attn, fusion: str) -> np.ndarray:
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim == 2:
        return a
    if fusion == "mean":
        return a.mean(axis=0)
    if fusion == "max":
        return a.max(axis=0)
    return a.min(axis=0)


def discard_lowest(fused: np.ndarray, ratio: float) -> np.ndarray:
    """Zero the lowest ``ratio`` fraction of entries outside column 0."""
    out = np.array(fused, dtype=np.float64)
    if ratio <= 0:
        return out
    body = out[:, 1:]
    flat = body.ravel()
    k = int(flat.size * ratio)
    if k:
        flat[np.argsort(flat, kind="stable")[:k]] = 0.0
        out[:, 1:] = flat.reshape(body.shape)
    return out


def layer_transition(fused: np.ndarray, ratio: float) -> np.ndarray:
    a = discard_lowest(fused, ratio) + np.eye(fused.shape[0])
    return a / a.sum(axis=-1, keepdims=True)


def _check_stack(attentions, what="attention"):
    if not len(attentions):
        raise ValidationError(f"empty {what} stack")
    arrays = [np.asarray(a, dtype=np.float64) for a in attentions]
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ValidationError(f"{what} layer {i} has shape {a.shape}, expected {shape}")
        if a.shape[-1] != a.shape[-2]:
            raise ValidationError(f"{what} matrices must be square")
    return arrays


def _rollout(fused_layers, config: RolloutConfig) -> RolloutMask:
    n = fused_layers[0].shape[0]
    side = math.isqrt(n - 1)
    if side * side != n - 1:
        raise ValidationError(f"{n - 1} patch tokens do not form a square grid")
    result = np.eye(n)
    transitions = []
    for fused in fused_layers:
        t = layer_transition(fused, config.discard_ratio)
        transitions.append(t)
        result = t @ result
    raw = result[0, 1:].copy()
    grid = raw.reshape(side, side)
    peak = grid.max()
    grid = grid / peak if peak > 0 else np.zeros_like(grid)
    return RolloutMask(grid, raw, transitions)


def rollout_product(attentions, config: RolloutConfig = RolloutConfig()) -> np.ndarray:
    """Full token-to-token rollout matrix, for inspection and testing."""
    arrays = _check_stack(attentions)
    result = np.eye(arrays[0].shape[-1])
    for a in arrays:
        result = layer_transition(fuse_heads(a, config.fusion), config.discard_ratio) @ result
    return result


def attention_rollout(attentions, config: RolloutConfig = RolloutConfig()) -> RolloutMask:
    """Roll attention through the layers and return the class-token mask over patches.

    ``attentions`` is a sequence of per-layer arrays shaped (heads, T, T) or
    (T, T), input layer first.
    """
    arrays = _check_stack(attentions)
    return _rollout([fuse_heads(a, config.fusion) for a in arrays], config)


def gradient_rollout(attentions, attention_gradients, target_class: int, config: RolloutConfig = RolloutConfig()) -> RolloutMask:
    """Rollout of attention weighted by its gradient toward ``target_class``.

    Negative attention-gradient products are clamped to zero before head fusion.
    """
    if attention_gradients is None or len(attention_gradients) != len(attentions):
        raise ConfigurationError("gradient rollout needs one gradient tensor per attention layer")
    arrays = _check_stack(attentions)
    grads = _check_stack(attention_gradients, "gradient")
    if grads[0].shape != arrays[0].shape:
        raise ValidationError("gradients must be shaped like the attentions")
    fused = [fuse_heads(np.clip(a * g, 0.0, None), config.fusion) for a, g in zip(arrays, grads)]
    return _rollout(fused, config)


@contextmanager
def record_attention(model, with_gradients: bool = False):
    """Capture softmax attention (and optionally its gradient) from each timm ViT block.

    Yields a dict with ``attentions`` and ``gradients`` lists that fill up on
    the next forward / backward pass.
    """
    backbone = getattr(model, "backbone", model)
    blocks = getattr(backbone, "blocks", None)
    if blocks is None:
        raise ConfigurationError("attention rollout requires a transformer backbone")
    store = {"attentions": [], "gradients": []}
    handles, fused_flags = [], []

    def hook(module, inputs, output):
        store["attentions"].append(output.detach())
        if with_gradients and output.requires_grad:
            output.register_hook(lambda g: store["gradients"].insert(0, g.detach()))

    for blk in blocks:
        fused_flags.append(blk.attn.fused_attn)
        blk.attn.fused_attn = False
        handles.append(blk.attn.attn_drop.register_forward_hook(hook))
    try:
        yield store
    finally:
        for h in handles:
            h.remove()
        for blk, flag in zip(blocks, fused_flags):
            blk.attn.fused_attn = flag


def collect_attention(model, image, target_class: int | None = None) -> tuple:
    """Per-layer attention (heads, T, T) for one image, plus gradients when a target is given."""
    was_training = model.training
    model.eval()
    x = torch.as_tensor(image, dtype=torch.float32).unsqueeze(0)
    try:
        with record_attention(model, with_gradients=target_class is not None) as store:
            if target_class is None:
                with torch.no_grad():
                    model(x)
            else:
                x.requires_grad_(True)
                model(x)[0, target_class].backward()
    finally:
        if was_training:
            model.train()
    attns = [a[0].numpy() for a in store["attentions"]]
    grads = [g[0].numpy() for g in store["gradients"]] if target_class is not None else None
    return attns, grads


def _colormap(name: str, values: np.ndarray) -> np.ndarray:
    import matplotlib

    return matplotlib.colormaps[name](values)[..., :3]


def _to_unit_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[2] != 3:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an RGB image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def _align(values: np.ndarray, hw: tuple) -> np.ndarray:
    if values.shape == hw:
        return values
    fy, fx = hw[0] // values.shape[0], hw[1] // values.shape[1]
    if fy >= 1 and fy == fx and values.shape[0] * fy == hw[0] and values.shape[1] * fx == hw[1]:
        return np.kron(values, np.ones((fy, fx)))
    raise ValidationError(f"map of shape {values.shape} is not aligned with a {hw} image")


def overlay_pixels(image, values, style: str = "heat_overlay", alpha: float = 0.6) -> np.ndarray:
    """Blend a map onto an image; returns uint8 RGB. Zero scores leave pixels untouched."""
    if style not in STYLES:
        raise ConfigurationError(f"unknown overlay style {style!r}")
    img = _to_unit_rgb(image)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v.sum(axis=0) if v.shape[0] == 3 else v.sum(axis=-1)
    v = _align(v, img.shape[:2])
    if style == "heat_overlay":
        peak = v.max()
        m = np.clip(v / peak if peak > 1 else v, 0.0, 1.0)
        color = _colormap("jet", m)
        weight = alpha * m
    else:
        scale = np.abs(v).max()
        s = v / scale if scale > 0 else np.zeros_like(v)
        color = _colormap("bwr", (s + 1.0) / 2.0)
        weight = alpha * np.abs(s)
    out = img * (1.0 - weight[..., None]) + color * weight[..., None]
    return np.rint(out * 255.0).astype(np.uint8)


def render_overlay(image, values, style: str, path, alpha: float = 0.6, text: dict | None = None) -> Path:
    """Write the overlay as PNG; ``text`` entries are embedded as PNG text chunks."""
    import io

    pixels = overlay_pixels(image, values, style, alpha)
    info = PngInfo()
    for k, v in sorted((text or {}).items()):
        info.add_text(str(k), str(v))
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG", pnginfo=info)
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue())
    return path
