"""Small trainable convolutional feature extractor.

A stack of conv -> bias -> ReLU stages followed by global average pooling,
so the embedding dimension equals the last stage's channel count no matter
what resolution the branch consumes. Kernels use fan-in-scaled Gaussian
initialization; convolutions pad by kernel_size // 2 and downsample by their
stage stride.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import checkpoint
from .ndgrad import ShapeError, Tensor, add_channel_bias, conv2d, global_avg_pool, relu


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int
    channels_per_stage: tuple[int, ...] = (16, 32, 64)
    stage_strides: tuple[int, ...] = (2, 2, 2)
    kernel_size: int = 3
    embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channels_per_stage", tuple(self.channels_per_stage))
        object.__setattr__(self, "stage_strides", tuple(self.stage_strides))
        if self.input_side < 1:
            raise ValueError(f"input_side must be positive, got {self.input_side}")
        if len(self.channels_per_stage) != len(self.stage_strides) or not self.channels_per_stage:
            raise ValueError(
                "channels_per_stage and stage_strides must be equal-length and non-empty"
            )
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be positive, got {self.kernel_size}")
        if self.embed_dim != self.channels_per_stage[-1]:
            raise ValueError(
                f"embed_dim {self.embed_dim} must equal the last stage width "
                f"{self.channels_per_stage[-1]} (the embedding is the pooled last feature map)"
            )

    def with_input_side(self, side: int) -> "BackboneConfig":
        return replace(self, input_side=int(side))

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "channels_per_stage": list(self.channels_per_stage),
            "stage_strides": list(self.stage_strides),
            "kernel_size": self.kernel_size,
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_side=d["input_side"],
            channels_per_stage=tuple(d["channels_per_stage"]),
            stage_strides=tuple(d["stage_strides"]),
            kernel_size=d["kernel_size"],
            embed_dim=d["embed_dim"],
        )


@dataclass
class BackboneParams:
    config: BackboneConfig
    kernels: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    def tensors(self) -> Iterator[Tensor]:
        for k, b in zip(self.kernels, self.biases):
            yield k
            yield b


def init_backbone(config: BackboneConfig, seed) -> BackboneParams:
    """Fan-in-scaled Gaussian kernels (stddev sqrt(2/fan_in)), zero biases.

    ``seed`` is anything ``numpy.random.default_rng`` accepts; equal seeds
    give bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    params = BackboneParams(config=config)
    c_in = 3
    k = config.kernel_size
    for c_out in config.channels_per_stage:
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in)
        params.kernels.append(Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)), requires_grad=True))
        params.biases.append(Tensor(np.zeros(c_out), requires_grad=True))
        c_in = c_out
    return params


def embed(params: BackboneParams, image: Tensor) -> Tensor:
    """Map a (3, s, s) image tensor to the pooled embedding of length d."""
    cfg = params.config
    expected = (3, cfg.input_side, cfg.input_side)
    if image.shape != expected:
        raise ShapeError(f"embed: expected image of shape {expected}, got {image.shape}")
    pad = cfg.kernel_size // 2
    h = image
    for kernel, bias, stride in zip(params.kernels, params.biases, cfg.stage_strides):
        h = relu(add_channel_bias(conv2d(h, kernel, stride=stride, padding=pad), bias))
    return global_avg_pool(h)


def save_backbone(path, params: BackboneParams) -> None:
    checkpoint.write_checkpoint(
        path, "backbone", params.config.to_dict(), [t.data for t in params.tensors()]
    )


def load_backbone(path) -> BackboneParams:
    kind, config, arrays = checkpoint.read_checkpoint(path)
    if kind != "backbone":
        raise checkpoint.CheckpointError(f"{path}: expected a backbone checkpoint, got {kind!r}")
    cfg = BackboneConfig.from_dict(config)
    params = BackboneParams(config=cfg)
    for i in range(len(cfg.channels_per_stage)):
        params.kernels.append(Tensor(arrays[2 * i], requires_grad=True))
        params.biases.append(Tensor(arrays[2 * i + 1], requires_grad=True))
    return params
