# losses.py

from typing import Optional, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ArgumentError, ShapeError

Scalar = Union[float, torch.Tensor]


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_l: float = Field(10.0, ge=0)
    lambda_a: float = Field(0.0, ge=0)
    huber_epsilon: float = Field(0.1, gt=0)
    l_r: float = 1.0
    l_g: float = 0.0

    @model_validator(mode="after")
    def _check_labels(self) -> "LossWeights":
        if self.l_r == self.l_g:
            raise ValueError("real and generated target labels l_r and l_g must differ")
        return self


def recon_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 reconstruction loss, mean over every pixel (background included)."""
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {tuple(prediction.shape)} and target {tuple(target.shape)} differ in shape")
    return (prediction - target).abs().mean()


def huber(d: Scalar, epsilon: float) -> Scalar:
    """
    Huber penalty of a non-negative distance.

    Args:
        d: Distance(s), float or tensor, all >= 0.
        epsilon: Switch point between the quadratic and the linear branch.

    Returns:
        0.5 d^2 where d < epsilon, epsilon (d - 0.5 epsilon) elsewhere.
    """
    if epsilon <= 0:
        raise ArgumentError(f"huber epsilon must be positive, got {epsilon}")
    if isinstance(d, torch.Tensor):
        if torch.any(d < 0):
            raise ArgumentError("huber is defined for non-negative distances only")
        return torch.where(d < epsilon, 0.5 * d**2, epsilon * (d - 0.5 * epsilon))
    if d < 0:
        raise ArgumentError(f"huber is defined for non-negative distances only, got {d}")
    return 0.5 * d * d if d < epsilon else epsilon * (d - 0.5 * epsilon)


def pose_loss(prediction: torch.Tensor, target: torch.Tensor, epsilon: float = 0.1) -> torch.Tensor:
    """
    Huber of each joint's Euclidean error, summed over joints and averaged over the batch.

    Works on squared distances so that the gradient stays finite at a zero error.
    """
    if prediction.shape != target.shape or prediction.shape[-1] != 3:
        raise ShapeError(f"pose prediction {tuple(prediction.shape)} does not match target {tuple(target.shape)}")
    if epsilon <= 0:
        raise ArgumentError(f"huber epsilon must be positive, got {epsilon}")
    if prediction.dim() == 2:
        prediction, target = prediction.unsqueeze(0), target.unsqueeze(0)

    squared = ((prediction - target) ** 2).sum(dim=-1)
    quadratic = squared < epsilon**2
    # sqrt only sees values on the linear branch
    distance = torch.sqrt(torch.where(quadratic, torch.full_like(squared, epsilon**2), squared))
    per_joint = torch.where(quadratic, 0.5 * squared, epsilon * (distance - 0.5 * epsilon))
    return per_joint.sum(dim=-1).mean()


def semi_loss(
    l_u: Scalar,
    l_l: Scalar,
    weights: LossWeights,
    labeled: bool,
    l_a: Optional[Scalar] = None,
) -> Scalar:
    lambda_l = weights.lambda_l if labeled else 0.0
    total = l_u + lambda_l * l_l
    if l_a is not None:
        total = total + weights.lambda_a * l_a
    return total


def adversarial_generator_loss(score_fake: torch.Tensor, l_r: float = 1.0) -> torch.Tensor:
    return (0.5 * (score_fake - l_r) ** 2).mean()


def adversarial_discriminator_loss(
    score_real: torch.Tensor,
    score_fake: torch.Tensor,
    l_r: float = 1.0,
    l_g: float = 0.0,
) -> torch.Tensor:
    return (0.5 * (score_real - l_r) ** 2).mean() + (0.5 * (score_fake - l_g) ** 2).mean()
