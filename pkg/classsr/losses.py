"""Probability-blended SR output and the three training losses."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import ClassSRValueError, NonFiniteError, ProbabilityError, ShapeError
from .tensor import Tensor

PROB_TOLERANCE = 1e-4


@dataclass
class LossWeights:
    """Weights of the Image-Loss, Class-Loss and Average-Loss."""

    w1: float = 2000.0
    w2: float = 1.0
    w3: float = 6.0

    def validate(self) -> None:
        weights = (self.w1, self.w2, self.w3)
        if min(weights) < 0 or max(weights) <= 0:
            raise ClassSRValueError(
                f"Loss weights must be nonnegative with one positive: {weights}"
            )


def check_probabilities(probs: np.ndarray, tolerance: float = PROB_TOLERANCE) -> None:
    """Raise ProbabilityError unless every row is a distribution."""
    probs = np.asarray(probs)
    if probs.ndim not in (1, 2) or probs.shape[-1] < 1:
        raise ProbabilityError(f"Expected (M,) or (B, M) probabilities: {probs.shape}")
    if not np.all(np.isfinite(probs)) or np.any(probs < -tolerance):
        raise ProbabilityError("Probabilities must be finite and nonnegative.")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > tolerance):
        raise ProbabilityError("Probabilities must sum to 1.")


def _as_rows(probs: Tensor) -> Tensor:
    return probs.reshape(1, -1) if probs.ndim == 1 else probs


def blended_output(probs: Tensor, branch_outputs: Sequence[Tensor]) -> Tensor:
    """Return ``sum_i P_i * f_i(x)`` for a batch of tiles.

    Args:
        probs: (B, M) or (M,) probabilities.
        branch_outputs: M tensors of shape (B, C, H, W).

    Raises:
        ShapeError: The number of outputs or the batch size does not match.
    """
    rows = _as_rows(probs)
    batch, classes = rows.shape
    if len(branch_outputs) != classes:
        raise ShapeError(
            f"{len(branch_outputs)} branch outputs for {classes} probabilities."
        )
    stacked = T.stack(branch_outputs, axis=1)
    if stacked.shape[0] != batch:
        raise ShapeError(f"Batch of {stacked.shape[0]} tiles for {batch} rows.")
    weights = rows.reshape((batch, classes) + (1,) * (stacked.ndim - 2))
    return (stacked * weights).sum(axis=1)


def image_loss(y: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error over all elements.

    Raises:
        ShapeError: Shape mismatch.
    """
    if y.shape != gt.shape:
        raise ShapeError(f"Output {y.shape} does not match ground truth {gt.shape}.")
    return (y - gt).abs().mean()


def class_loss(probs: Tensor) -> Tensor:
    """Negative sum of pairwise probability distances, averaged over the batch.

    Ranges from ``-(M - 1)`` at one-hot vectors to 0 at the uniform vector.

    Raises:
        ProbabilityError: Invalid distribution.
    """
    check_probabilities(probs.data)
    rows = _as_rows(probs)
    batch, classes = rows.shape
    diffs = rows.reshape(batch, classes, 1) - rows.reshape(batch, 1, classes)
    # every unordered pair appears twice in the full difference matrix
    per_sample = diffs.abs().sum(axis=(1, 2)) * -0.5
    return per_sample.mean()


def average_loss(probs: Tensor, strict: bool = True) -> Tensor:
    """Distance of each class's batch probability mass from ``B / M``.

    Raises:
        ProbabilityError: Invalid distribution.
        ClassSRValueError: B is not divisible by M in strict mode.
    """
    check_probabilities(probs.data)
    rows = _as_rows(probs)
    batch, classes = rows.shape
    if strict and batch % classes != 0:
        raise ClassSRValueError(
            f"Batch size {batch} is not divisible by {classes} classes."
        )
    return (rows.sum(axis=0) - batch / classes).abs().sum()


def total_loss(l1: Tensor, lc: Tensor, la: Tensor, w: LossWeights) -> Tensor:
    """Weighted sum ``w1 * l1 + w2 * lc + w3 * la``.

    Raises:
        NonFiniteError: A loss term is not finite.
    """
    for name, term in (("l1", l1), ("lc", lc), ("la", la)):
        if not np.all(np.isfinite(term.data)):
            raise NonFiniteError(f"Loss term {name} is not finite.")
    return l1 * w.w1 + lc * w.w2 + la * w.w3
