"""Modality noise filter: a channel mask on the teacher feature, learned with
a triplet objective that pulls the masked feature toward the student."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module
from .tensor import Tensor, concat, cosine_similarity, detach, mean, mul, relu, shift, sigmoid, sub


class FeatureSelectionBlock(Module):
    """concat[f_v, f_a] -> linear -> relu -> linear -> sigmoid, one gate per
    teacher channel."""

    def __init__(self, d_v: int, d_a: int, hidden: int, rng: np.random.Generator):
        self.d_v = d_v
        self.d_a = d_a
        self.fc1 = Linear(d_v + d_a, hidden, rng)
        self.fc2 = Linear(hidden, d_a, rng)

    def __call__(self, joint: Tensor) -> Tensor:
        return sigmoid(self.fc2(relu(self.fc1(joint))))


@dataclass
class MnfOutput:
    mask: Tensor
    purified: Tensor
    triplet: Tensor


def compute_mask(f_v: Tensor, f_a: Tensor, fs: FeatureSelectionBlock) -> Tensor:
    """Soft mask in (0, 1)^d_a.  The student feature enters detached."""
    if f_v.ndim != 2 or f_a.ndim != 2 or f_v.shape[0] != f_a.shape[0]:
        raise ValueError(f"compute_mask: bad shapes {f_v.shape}, {f_a.shape}")
    if f_v.shape[1] != fs.d_v or f_a.shape[1] != fs.d_a:
        raise ValueError(
            f"compute_mask: block expects widths ({fs.d_v}, {fs.d_a}), got ({f_v.shape[1]}, {f_a.shape[1]})"
        )
    return fs(concat([detach(f_v), f_a], axis=-1))


def purify(f_a: Tensor, mask: Tensor) -> Tensor:
    return mul(f_a, mask)


def triplet_loss(f_a: Tensor, f_a_p: Tensor, f_v: Tensor, margin: float) -> Tensor:
    """Batch mean of max(cos(f_a, f_v) - cos(f_a_p, f_v) + margin, 0).

    The raw teacher feature is the negative, the purified one the positive,
    and the student feature is the (detached) anchor.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    if f_a.shape != f_v.shape:
        raise ValueError(f"triplet_loss needs equal teacher/student widths, got {f_a.shape} vs {f_v.shape}")
    anchor = detach(f_v)
    gap = sub(cosine_similarity(f_a, anchor), cosine_similarity(f_a_p, anchor))
    return mean(relu(shift(gap, margin)))


def filter_noise(f_v: Tensor, f_a: Tensor, fs: FeatureSelectionBlock, margin: float) -> MnfOutput:
    mask = compute_mask(f_v, f_a, fs)
    purified = purify(f_a, mask)
    return MnfOutput(mask, purified, triplet_loss(f_a, purified, f_v, margin))


def raw_channel_mask(mask: np.ndarray, jacobian: np.ndarray) -> np.ndarray:
    """Pull a feature-channel mask back onto raw teacher channels.

    Raw channel r receives the mask values of the feature channels it feeds,
    weighted by squared sensitivity: sum_c m_c J_cr^2 / sum_c J_cr^2.  Shapes:
    mask [n, d_a], jacobian [n, d_a, d_raw] -> [n, d_raw].
    """
    mask = np.asarray(mask, dtype=np.float64)
    jac = np.asarray(jacobian, dtype=np.float64)
    if jac.ndim != 3 or mask.shape != jac.shape[:2]:
        raise ValueError(f"raw_channel_mask: mask {mask.shape} vs jacobian {jac.shape}")
    energy = jac ** 2
    total = energy.sum(axis=1)
    weighted = np.einsum("nc,ncr->nr", mask, energy)
    # a raw channel with no influence gets the plain mask mean
    fallback = np.broadcast_to(mask.mean(axis=1, keepdims=True), total.shape)
    return np.where(total > 0, weighted / np.where(total > 0, total, 1.0), fallback)
