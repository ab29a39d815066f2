"""Convolutional autoencoder: architecture descriptor, reconstruction, losses.

Inputs are images with values in [0, 1]. The encoder is a stack of strided
3x3 convolution blocks (conv + group norm + SiLU); the decoder mirrors it
with transposed convolutions and ends in a sigmoid so reconstructions stay
in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import DivergenceError, ShapeMismatchError

DEFAULT_WIDTHS = (32, 64, 128, 256, 256, 128, 64)


@dataclass(frozen=True)
class CAEConfig:
    """Architecture descriptor: block widths, strides and the input geometry.

    The decoder is always the exact mirror of the encoder, so the descriptor
    only spells out the encoder stack.
    """

    input_side: int = 224
    in_channels: int = 3
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    strides: tuple[int, ...] = (2, 2, 2, 2, 2, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.input_side < 1 or self.in_channels < 1:
            raise ValueError("input_side and in_channels must be positive")
        if len(self.widths) != len(self.strides):
            raise ValueError(
                f"widths ({len(self.widths)}) and strides ({len(self.strides)}) "
                "must have the same length"
            )
        if not self.widths:
            raise ValueError("at least one block is required")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError("strides must be 1 or 2")
        if self.input_side % self.downsample_factor != 0:
            raise ValueError(
                f"input side {self.input_side} is not divisible by the "
                f"downsampling factor {self.downsample_factor}"
            )

    @property
    def downsample_factor(self) -> int:
        return int(np.prod(self.strides))

    @property
    def latent_side(self) -> int:
        return self.input_side // self.downsample_factor

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        """Latent tensor shape as (channels, height, width)."""
        return (self.widths[-1], self.latent_side, self.latent_side)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.input_side, self.input_side)

    @classmethod
    def for_input_side(cls, side: int, in_channels: int = 3) -> "CAEConfig":
        """Default 7-block descriptor with the stride count adapted to `side`.

        Downsampling stops once the latent side would drop below 4 pixels.
        """
        n_down = 0
        s = side
        while n_down < 5 and s % 2 == 0 and s // 2 >= 4:
            s //= 2
            n_down += 1
        if n_down == 0:
            raise ValueError(f"input side {side} supports no downsampling")
        strides = (2,) * n_down + (1,) * (len(DEFAULT_WIDTHS) - n_down)
        return cls(input_side=side, in_channels=in_channels,
                   widths=DEFAULT_WIDTHS, strides=strides)

    def to_json(self) -> str:
        return json.dumps({
            "input_side": self.input_side,
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "strides": list(self.strides),
        })

    @classmethod
    def from_json(cls, text: str) -> "CAEConfig":
        d = json.loads(text)
        return cls(input_side=d["input_side"], in_channels=d["in_channels"],
                   widths=tuple(d["widths"]), strides=tuple(d["strides"]))


def _num_groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


class CAE(nn.Module):
    """Mirrored convolutional autoencoder built from a CAEConfig."""

    def __init__(self, config: CAEConfig):
        super().__init__()
        self.config = config
        enc: list[nn.Module] = []
        c = config.in_channels
        for w, s in zip(config.widths, config.strides):
            enc += [nn.Conv2d(c, w, kernel_size=3, stride=s, padding=1),
                    nn.GroupNorm(_num_groups(w), w),
                    nn.SiLU()]
            c = w
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = []
        out_channels = (config.in_channels,) + config.widths[:-1]
        for i in reversed(range(len(config.widths))):
            s = config.strides[i]
            dec.append(nn.ConvTranspose2d(config.widths[i], out_channels[i],
                                          kernel_size=3, stride=s, padding=1,
                                          output_padding=s - 1))
            if i > 0:
                dec += [nn.GroupNorm(_num_groups(out_channels[i]), out_channels[i]),
                        nn.SiLU()]
        dec.append(nn.Sigmoid())
        self.decoder = nn.Sequential(*dec)

    def _check_input(self, x: torch.Tensor) -> None:
        expected = self.config.input_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"expected input of shape (N, {expected[0]}, {expected[1]}, "
                f"{expected[2]}), got {tuple(x.shape)}"
            )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        expected = self.config.latent_shape
        if z.dim() != 4 or tuple(z.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"expected latent of shape (N, {expected[0]}, {expected[1]}, "
                f"{expected[2]}), got {tuple(z.shape)}"
            )
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Seeded uniform fan-in initialisation; norm layers start as identity.

    Uses a local generator so results do not depend on global RNG state.
    """
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.uniform_(-bound, bound, generator=g)
                if mod.bias is not None:
                    mod.bias.uniform_(-bound, bound, generator=g)
            elif isinstance(mod, nn.GroupNorm):
                mod.weight.fill_(1.0)
                mod.bias.fill_(0.0)
    return model


def per_sample_mse(x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    """Mean squared error per sample, averaged over all pixels and channels.

    Accepts a single image (3-D) or a batch (4-D); returns a scalar or a
    length-N tensor accordingly.
    """
    if x.shape != xhat.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    sq = (x - xhat) ** 2
    if x.dim() <= 3:
        return sq.mean()
    return sq.flatten(1).mean(dim=1)


def _as_weight_tensor(weights, n: int, like: torch.Tensor) -> torch.Tensor:
    w = torch.as_tensor(weights, dtype=like.dtype)
    if w.dim() != 1 or w.numel() != n:
        raise ValueError(f"expected {n} weights, got {tuple(w.shape)}")
    if bool((w < 0).any()) or bool((w > 1).any()):
        raise ValueError("weights must lie in [0, 1]")
    return w.detach()

def weighted_batch_objective(losses, weights) -> torch.Tensor:
    """Weighted sum of per-sample losses divided by the batch size.

    With all weights equal to 1 this reduces to the plain mean
    reconstruction loss. Weights are treated as constants: no gradient
    flows through them.
    """
    l = losses if isinstance(losses, torch.Tensor) else torch.as_tensor(
        losses, dtype=torch.float64)
    if l.dim() != 1:
        raise ValueError("losses must be a 1-D sequence")
    w = _as_weight_tensor(weights, l.numel(), l)
    return (w * l).sum() / l.numel()


def weighted_gradient(model: CAE, images: torch.Tensor, weights) -> dict[str, torch.Tensor]:
    """Gradient of the weighted batch objective w.r.t. every model parameter.

    Raises DivergenceError if any loss or gradient component is non-finite.
    """
    losses = per_sample_mse(images, model(images))
    if not bool(torch.isfinite(losses).all()):
        raise DivergenceError("non-finite reconstruction loss")
    objective = weighted_batch_objective(losses, weights)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(objective, params, allow_unused=True)
    out: dict[str, torch.Tensor] = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise DivergenceError(f"non-finite gradient in parameter '{name}'")
        out[name] = g
    return out


def images_to_tensor(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    """Stack HWC float images in [0, 1] into an NCHW float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeMismatchError(f"expected HWC image(s), got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    """Inverse of images_to_tensor: NCHW tensor to (N, H, W, C) float32."""
    return t.detach().permute(0, 2, 3, 1).contiguous().numpy()
