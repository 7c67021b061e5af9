"""Contrastive semantic calibration.

The purified teacher feature queries the student feature map (single-head
scaled dot-product attention); the attended context goes through a small
MLP to give the guided feature.  The guided feature is trained with its own
classifier and with a supervised contrastive loss against the pooled student
feature, where each pair's temperature is the cross-modal cosine plus delta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import ClassifierHead
from .nn import Linear, Module
from .tensor import (
    Tensor,
    bmm,
    cross_entropy,
    log_softmax,
    mul,
    pairwise_cosine,
    relu,
    reshape,
    scale,
    softmax,
    tensor_sum,
)


class GuidedAttention(Module):
    def __init__(self, d_a: int, d_v: int, d_k: int, h_tv: int, rng: np.random.Generator):
        self.d_a = d_a
        self.d_v = d_v
        self.d_k = d_k
        self.w_q = Linear(d_a, d_k, rng, bias=False)
        self.w_k = Linear(d_v, d_k, rng, bias=False)
        self.w_v = Linear(d_v, d_v, rng, bias=False)
        self.tv1 = Linear(d_v, h_tv, rng)
        self.tv2 = Linear(h_tv, d_v, rng)

    def transform(self, context: Tensor) -> Tensor:
        return self.tv2(relu(self.tv1(context)))


@dataclass
class TemperatureMatrix:
    tau: np.ndarray  # [b, b], tau[i, j] = cos(f_v_i, f_a_p_j) + delta
    delta: float


def guided_attend(f_a_p: Tensor, f_v_map: Tensor, attn: GuidedAttention) -> tuple[Tensor, Tensor]:
    """Returns the guided feature [b, d_v] and attention weights [b, P]."""
    if f_v_map.ndim != 5 or f_v_map.shape[-1] != attn.d_v:
        raise ValueError(f"expected a [b, T, H, W, {attn.d_v}] map, got {f_v_map.shape}")
    b = f_v_map.shape[0]
    if f_a_p.shape != (b, attn.d_a):
        raise ValueError(f"query must be [{b}, {attn.d_a}], got {f_a_p.shape}")
    n_pos = int(np.prod(f_v_map.shape[1:4]))
    cells = reshape(f_v_map, (b, n_pos, attn.d_v))
    q = reshape(attn.w_q(f_a_p), (b, attn.d_k, 1))
    keys = attn.w_k(cells)
    values = attn.w_v(cells)
    scores = scale(reshape(bmm(keys, q), (b, n_pos)), 1.0 / np.sqrt(attn.d_k))
    weights = softmax(scores, axis=1)
    context = reshape(bmm(reshape(weights, (b, 1, n_pos)), values), (b, attn.d_v))
    return attn.transform(context), weights


def guided_ce_loss(f_v_g: Tensor, labels, head: ClassifierHead) -> Tensor:
    return cross_entropy(head(f_v_g), labels)


def temperature_matrix(f_v: Tensor, f_a_p: Tensor, delta: float) -> TemperatureMatrix:
    if not delta > 1.0:
        raise ValueError(f"delta must be > 1, got {delta}")
    return TemperatureMatrix(pairwise_cosine(f_v, f_a_p).data + delta, float(delta))


def positive_sets(labels) -> list[np.ndarray]:
    """Indices sharing the anchor's label; the anchor itself is included."""
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == y) for y in labels]


def positive_weights(labels) -> np.ndarray:
    """W[i, p] = 1 / (|B| |P_i|) on positives, 0 elsewhere."""
    labels = np.asarray(labels)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True) / labels.size


def calibrated_contrastive_loss(
    f_v: Tensor,
    f_v_g: Tensor,
    f_a_p: Tensor,
    labels,
    delta: float,
    tau: np.ndarray | None = None,
) -> Tensor:
    """Supervised contrastive loss between pooled student features (anchors)
    and guided features, with per-pair temperatures.

    ``tau`` overrides the temperatures computed from ``f_a_p``; either way
    they are constants to the gradient.
    """
    labels = np.asarray(labels)
    b = f_v.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if f_v_g.shape != f_v.shape or labels.shape != (b,):
        raise ValueError(f"shape mismatch: f_v {f_v.shape}, f_v_g {f_v_g.shape}, labels {labels.shape}")
    if not delta > 1.0:
        raise ValueError(f"delta must be > 1, got {delta}")
    if tau is None:
        tau = temperature_matrix(f_v, f_a_p, delta).tau
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (b, b) or not np.all(tau > 0):
        raise ValueError(f"temperatures must be a positive [{b}, {b}] matrix")
    logits = mul(pairwise_cosine(f_v, f_v_g), Tensor(1.0 / tau))
    log_prob = log_softmax(logits, axis=1)
    return scale(tensor_sum(mul(log_prob, Tensor(positive_weights(labels)))), -1.0)
