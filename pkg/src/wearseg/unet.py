"""Basic encoder/decoder U-Net with a sigmoid or softmax head.

Four encoder blocks (two 3x3 same-padded convolutions each, optional batch
normalization before each ReLU, 2x max-pool), a two-convolution bottleneck,
four decoder blocks (2x transposed-convolution upsampling, skip
concatenation, two convolutions) and a final 1x1 convolution to one channel
(binary) or K channels (multiclass). Filters double per level from
base_filters. The network is fully convolutional: any input edge divisible
by 16 works, which is what overlap-tile inference relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import N_CLASSES


@dataclass(frozen=True)
class ModelConfig:
    mode: str  # "binary" | "multiclass"
    use_batch_norm: bool = False
    input_edge: int = 512
    channels_in: int = 3
    base_filters: int = 64

    def __post_init__(self):
        if self.mode not in ("binary", "multiclass"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.input_edge % 16 != 0:
            raise ValueError(
                f"input edge {self.input_edge} must be divisible by 16 "
                "(four 2x downsamplings)"
            )
        if self.channels_in not in (1, 3):
            raise ValueError(f"channels_in must be 1 or 3, got {self.channels_in}")

    @property
    def out_channels(self) -> int:
        return 1 if self.mode == "binary" else N_CLASSES


class _ConvBlock(nn.Module):
    """Two 3x3 same-padded convolutions, each optionally BN'd before ReLU."""

    def __init__(self, channels_in: int, channels_out: int, batch_norm: bool):
        super().__init__()
        layers: list[nn.Module] = []
        for cin in (channels_in, channels_out):
            layers.append(nn.Conv2d(cin, channels_out, kernel_size=3, padding=1))
            if batch_norm:
                layers.append(nn.BatchNorm2d(channels_out))
            layers.append(nn.ReLU(inplace=True))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class WearUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        bf, bn = config.base_filters, config.use_batch_norm
        widths = [bf, 2 * bf, 4 * bf, 8 * bf]

        self.encoders = nn.ModuleList()
        cin = config.channels_in
        for w in widths:
            self.encoders.append(_ConvBlock(cin, w, bn))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _ConvBlock(widths[-1], 16 * bf, bn)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = 16 * bf
        for w in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose2d(cin, w, kernel_size=2, stride=2))
            self.decoders.append(_ConvBlock(2 * w, w, bn))
            cin = w
        self.head = nn.Conv2d(bf, config.out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, C, H, W) float input -> (N, K, H, W) logits."""
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


def build_unet(config: ModelConfig, seed: int | None = None) -> WearUNet:
    """Construct a U-Net; a seed makes the weight initialization reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return WearUNet(config)


def activate(logits: np.ndarray, mode: str) -> np.ndarray:
    """Logits -> probabilities, numerically stable for arbitrary finite inputs.

    Channel-last layout. binary: elementwise 1/(1+exp(-x)); multiclass:
    per-pixel softmax with max subtraction, channels summing to 1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "binary":
        out = np.empty_like(logits)
        pos = logits >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
        ex = np.exp(logits[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if mode != "multiclass":
        raise ValueError(f"unknown mode {mode!r}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def predict_classes(probs: np.ndarray, mode: str) -> np.ndarray:
    """Probability map -> class raster.

    binary: 1 where p >= 0.5 (ties go to wear); multiclass: argmax with ties
    broken toward the lowest class index.
    """
    probs = np.asarray(probs)
    if mode == "binary":
        if probs.ndim == 3:
            probs = probs[:, :, 0]
        return (probs >= 0.5).astype(np.uint8)
    if mode != "multiclass":
        raise ValueError(f"unknown mode {mode!r}")
    return probs.argmax(axis=-1).astype(np.uint8)


def predict_probs(model: WearUNet, pixels: np.ndarray,
                  batch_size: int = 8) -> np.ndarray:
    """Run inference on (d, d, C) or (N, d, d, C) pixels -> channel-last probs."""
    single = pixels.ndim == 3
    batch = pixels[None] if single else pixels
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, batch.shape[0], batch_size):
            x = torch.from_numpy(
                np.ascontiguousarray(batch[i:i + batch_size].transpose(0, 3, 1, 2))
            ).float()
            logits = model(x).numpy().transpose(0, 2, 3, 1)
            outs.append(activate(logits, model.config.mode))
    probs = np.concatenate(outs, axis=0)
    return probs[0] if single else probs


def make_predictor(model: WearUNet, batch_size: int = 8):
    """Tile predictor callable for evaluate_testset / stitch_predict."""
    return lambda pixels: predict_probs(model, pixels, batch_size=batch_size)


def save_checkpoint(model: WearUNet, path: str | Path) -> None:
    """Persist config + weights; load_checkpoint round-trips bit-exactly."""
    torch.save({"config": asdict(model.config),
                "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path) -> WearUNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = WearUNet(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
