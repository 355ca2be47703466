# nets.py

import math
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ArgumentError, ConfigurationError, DatasetIOError, ShapeError, format_validation_error

CHECKPOINT_FORMAT_VERSION = 1
KERNEL = 4
LEAKY_SLOPE = 0.2

Conditioning = Literal["none", "input", "pose", "input_pose"]


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_T: int = Field(50, ge=1, le=512)
    base_channels: int = Field(64, ge=1)
    input_resolution: int = 64
    joint_count: int = Field(10, ge=1)
    com_conditioning: bool = True
    discriminator_condition: Conditioning = "none"
    pose_embedding: int = Field(64, ge=1)

    @field_validator("input_resolution")
    @classmethod
    def _check_resolution(cls, value: int) -> int:
        if value < 16 or value & (value - 1):
            raise ValueError(f"input_resolution must be a power of two >= 16, got {value}")
        return value

    @property
    def stage_channels(self) -> Tuple[int, ...]:
        # one stride-2 stage per halving from input_resolution down to 4x4
        stages = int(math.log2(self.input_resolution // 4))
        return tuple(self.base_channels * 2**i for i in range(stages))

    @property
    def conditions_on_input(self) -> bool:
        return self.discriminator_condition in ("input", "input_pose")

    @property
    def conditions_on_pose(self) -> bool:
        return self.discriminator_condition in ("pose", "input_pose")


def weights_init(m):
    classname = m.__class__.__name__
    if classname.find("Conv") != -1:
        nn.init.normal_(m.weight.data, 0.0, 0.02)
        if m.bias is not None:
            nn.init.constant_(m.bias.data, 0)
    elif classname.find("BatchNorm") != -1:
        nn.init.normal_(m.weight.data, 1.0, 0.02)
        nn.init.constant_(m.bias.data, 0)


def _as_image_batch(images: torch.Tensor, resolution: int) -> torch.Tensor:
    if images.dim() == 3:
        images = images.unsqueeze(1)
    if images.dim() != 4 or images.shape[1] != 1 or images.shape[2:] != (resolution, resolution):
        raise ShapeError(f"expected images of shape (B, 1, {resolution}, {resolution}), got {tuple(images.shape)}")
    return images


def _downsampling_stages(in_channels: int, channels: Tuple[int, ...], activation) -> nn.Sequential:
    layers = []
    for out_channels in channels:
        layers += [
            nn.Conv2d(in_channels, out_channels, KERNEL, 2, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            activation(),
        ]
        in_channels = out_channels
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """f: depth crop (B, 1, R, R) -> latent code (B, d_T). DCGAN discriminator layout with ReLUs."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        channels = config.stage_channels
        self.features = _downsampling_stages(1, channels, lambda: nn.ReLU(True))
        # global 4x4 convolution onto the latent code
        self.project = nn.Conv2d(channels[-1], config.d_T, KERNEL, 1, 0, bias=True)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        images = _as_image_batch(images, self.config.input_resolution)
        return self.project(self.features(images)).flatten(1)


class Decoder(nn.Module):
    """g: latent code (+ normalized CoM) -> second view in (-1, 1). DCGAN generator layout with leaky ReLUs."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        channels = config.stage_channels[::-1]
        in_channels = config.d_T + (3 if config.com_conditioning else 0)

        layers = [
            nn.ConvTranspose2d(in_channels, channels[0], KERNEL, 1, 0, bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
        ]
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers += [
                nn.ConvTranspose2d(c_in, c_out, KERNEL, 2, 1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            ]
        layers += [nn.ConvTranspose2d(channels[-1], 1, KERNEL, 2, 1, bias=False), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, code: torch.Tensor, com: Optional[torch.Tensor] = None) -> torch.Tensor:
        if code.dim() != 2 or code.shape[1] != self.config.d_T:
            raise ShapeError(f"expected codes of shape (B, {self.config.d_T}), got {tuple(code.shape)}")
        if self.config.com_conditioning:
            if com is None:
                com = code.new_zeros(code.shape[0], 3)
            code = torch.cat([code, com], dim=1)
        return self.main(code[:, :, None, None])


class PoseHead(nn.Module):
    """g_l: a single affine layer from the latent code to K x 3 normalized joints."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.joint_count = config.joint_count
        self.linear = nn.Linear(config.d_T, 3 * config.joint_count)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        return self.linear(code).view(-1, self.joint_count, 3)


class Discriminator(nn.Module):
    """h: scores a second view, optionally conditioned on the input view and/or a pose."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        channels = config.stage_channels
        in_channels = 2 if config.conditions_on_input else 1
        self.features = _downsampling_stages(in_channels, channels, lambda: nn.LeakyReLU(LEAKY_SLOPE, inplace=True))
        embedding = 0
        if config.conditions_on_pose:
            embedding = config.pose_embedding
            self.pose_proj = nn.Linear(3 * config.joint_count, embedding)
        self.head = nn.Conv2d(channels[-1] + embedding, 1, KERNEL, 1, 0, bias=True)

    @property
    def input_channels(self) -> int:
        return self.features[0].in_channels

    def forward(
        self,
        image: torch.Tensor,
        condition_image: Optional[torch.Tensor] = None,
        pose: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        resolution = self.config.input_resolution
        image = _as_image_batch(image, resolution)
        if (condition_image is not None) != self.config.conditions_on_input:
            raise ConfigurationError(
                f"input-view conditioning is {'enabled' if self.config.conditions_on_input else 'not enabled'} "
                f"(discriminator_condition={self.config.discriminator_condition!r})"
            )
        if (pose is not None) != self.config.conditions_on_pose:
            raise ConfigurationError(
                f"pose conditioning is {'enabled' if self.config.conditions_on_pose else 'not enabled'} "
                f"(discriminator_condition={self.config.discriminator_condition!r})"
            )
        if condition_image is not None:
            image = torch.cat([image, _as_image_batch(condition_image, resolution)], dim=1)

        features = self.features(image)
        if pose is not None:
            pose = pose.reshape(pose.shape[0], -1)
            if pose.shape[1] != 3 * self.config.joint_count:
                raise ShapeError(f"pose condition needs {3 * self.config.joint_count} values, got {pose.shape[1]}")
            embedded = self.pose_proj(pose)[:, :, None, None].expand(-1, -1, *features.shape[2:])
            features = torch.cat([features, embedded], dim=1)
        return self.head(features).flatten()


def expected_parameter_counts(config: NetworkConfig) -> Dict[str, int]:
    """Closed-form parameter counts of every network for a configuration."""
    k2 = KERNEL * KERNEL
    channels = config.stage_channels

    def stages(in_channels: int) -> int:
        total = 0
        for out_channels in channels:
            total += in_channels * out_channels * k2 + 2 * out_channels
            in_channels = out_channels
        return total

    top = channels[-1]
    encoder = stages(1) + top * config.d_T * k2 + config.d_T

    decoder_in = config.d_T + (3 if config.com_conditioning else 0)
    reversed_channels = channels[::-1]
    decoder = decoder_in * top * k2 + 2 * top
    for c_in, c_out in zip(reversed_channels[:-1], reversed_channels[1:]):
        decoder += c_in * c_out * k2 + 2 * c_out
    decoder += channels[0] * k2

    pose_values = 3 * config.joint_count
    head = config.d_T * pose_values + pose_values

    embedding = config.pose_embedding if config.conditions_on_pose else 0
    discriminator = stages(2 if config.conditions_on_input else 1) + (top + embedding) * k2 + 1
    if embedding:
        discriminator += pose_values * embedding + embedding
    return {"encoder": encoder, "decoder": decoder, "pose_head": head, "discriminator": discriminator}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class PreViewModel(nn.Module):
    """Encoder, decoder and pose head sharing one latent code."""

    def __init__(self, config: NetworkConfig, target_view: str = "view2"):
        super().__init__()
        self.config = config
        self.target_view = target_view
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.pose_head = PoseHead(config)
        self.register_buffer("com_mean", torch.zeros(3))
        self.register_buffer("com_scale", torch.ones(()))

    def set_com_normalization(self, mean: np.ndarray, scale: float):
        self.com_mean.copy_(torch.as_tensor(mean, dtype=self.com_mean.dtype))
        self.com_scale.fill_(float(scale))

    def normalize_com(self, com: torch.Tensor) -> torch.Tensor:
        return (com - self.com_mean) / self.com_scale

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode(self, code: torch.Tensor, com: Optional[torch.Tensor] = None, target_view: Optional[str] = None) -> torch.Tensor:
        """Predict the target view; com is in mm and normalized with the stored dataset statistics."""
        if target_view is not None and target_view != self.target_view:
            raise ArgumentError(f"decoder was trained to predict {self.target_view!r}, not {target_view!r}")
        normalized = None if com is None else self.normalize_com(com)
        return self.decoder(code, normalized)

    def predict_pose(self, code: torch.Tensor) -> torch.Tensor:
        return self.pose_head(code)


def build_networks(
    config: NetworkConfig,
    seed: int = 0,
    with_discriminator: bool = False,
    target_view: str = "view2",
) -> Tuple[PreViewModel, Optional[Discriminator]]:
    """Seeded construction; the discriminator draws from seed + 1 so adding it never shifts the model's init."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PreViewModel(config, target_view)
        model.encoder.apply(weights_init)
        model.decoder.apply(weights_init)
        discriminator = None
        if with_discriminator:
            torch.manual_seed(seed + 1)
            discriminator = Discriminator(config)
            discriminator.apply(weights_init)
    return model, discriminator


def save_checkpoint(
    path: Union[str, Path],
    model: PreViewModel,
    discriminator: Optional[Discriminator] = None,
    extra: Optional[Dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "network_config": model.config.model_dump(),
        "target_view": model.target_view,
        "encoder": model.encoder.state_dict(),
        "decoder": model.decoder.state_dict(),
        "pose_head": model.pose_head.state_dict(),
        "com_mean": model.com_mean.detach().clone(),
        "com_scale": model.com_scale.detach().clone(),
        "extra": extra or {},
    }
    if discriminator is not None:
        payload["discriminator"] = discriminator.state_dict()
    torch.save(payload, path)
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path],
    map_location: Union[str, torch.device] = "cpu",
) -> Tuple[PreViewModel, Optional[Discriminator], Dict]:
    """Rebuild the networks from a checkpoint; returns (model, discriminator or None, extra)."""
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        logger.error(f"Could not read checkpoint {path}: {e}")
        raise DatasetIOError(f"checkpoint {path} is unreadable: {e}") from e

    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(f"checkpoint format {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})")
    try:
        config = NetworkConfig(**payload["network_config"])
    except ValidationError as e:
        field, message = format_validation_error(e)
        raise ConfigurationError(f"checkpoint network_config.{field}: {message}") from e

    model = PreViewModel(config, payload["target_view"])
    model.encoder.load_state_dict(payload["encoder"])
    model.decoder.load_state_dict(payload["decoder"])
    model.pose_head.load_state_dict(payload["pose_head"])
    model.com_mean.copy_(payload["com_mean"])
    model.com_scale.copy_(payload["com_scale"])
    model.eval()

    discriminator = None
    if "discriminator" in payload:
        discriminator = Discriminator(config)
        discriminator.load_state_dict(payload["discriminator"])
        discriminator.eval()
    return model, discriminator, payload.get("extra", {})
