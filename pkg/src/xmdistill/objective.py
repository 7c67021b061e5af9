"""Loss composition, the training loop and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .config import DistillConfig
from .csc import GuidedAttention, calibrated_contrastive_loss, guided_attend, guided_ce_loss, temperature_matrix
from .encoders import ClassifierHead, StudentEncoder, TeacherEncoder, teacher_pretrain
from .metrics import MetricsReport, retrieval, top1_accuracy
from .mnf import FeatureSelectionBlock, compute_mask, purify, triplet_loss
from .nn import Module
from .synthgen import Dataset
from .tensor import Tape, Tensor, add, backward, cosine_similarity, cross_entropy, detach, mean, scale

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    L_t: float
    L_ce_c: float
    L_cl_c: float
    L_distill: float
    L_ce_v: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardState:
    f_a: Tensor
    f_v_map: Tensor
    f_v: Tensor
    mask: Tensor
    f_a_p: Tensor
    f_v_g: Tensor
    attention: Tensor
    logits_v: Tensor
    logits_c: Optional[Tensor]
    terms: dict[str, Tensor]
    # detached values, reusable to pin the stop-gradient inputs
    pinned: dict[str, np.ndarray] = field(default_factory=dict)


def compose(l_t: float, l_ce_c: float, l_cl_c: float, l_ce_v: float, lam: float) -> LossBreakdown:
    distill = l_t + l_ce_c + l_cl_c
    return LossBreakdown(l_t, l_ce_c, l_cl_c, distill, l_ce_v, l_ce_v + lam * distill)


class DistillModel(Module):
    def __init__(self, config: DistillConfig, teacher: TeacherEncoder, seed: Optional[int] = None):
        config.validate()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        c = config
        self.config = config
        self.teacher = teacher
        self.student = StudentEncoder(c.d_raw_student, c.t_dim, c.h_dim, c.w_dim, c.d_v, rng)
        self.fs = FeatureSelectionBlock(c.d_v, c.d_a, c.h_fs, rng)
        self.attn = GuidedAttention(c.d_a, c.d_v, c.d_k, c.h_tv, rng)
        self.head_v = ClassifierHead(c.d_v, c.n_classes, rng)
        self.head_c = ClassifierHead(c.d_v, c.n_classes, rng)

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if not k.startswith("teacher.")}

    def embed(self, raw_student: np.ndarray) -> np.ndarray:
        _, f_v = self.student(Tensor(raw_student))
        return f_v.data

    def predict_logits(self, raw_student: np.ndarray) -> np.ndarray:
        _, f_v = self.student(Tensor(raw_student))
        return self.head_v(f_v).data


def split_roles(data: Dataset, config: DistillConfig) -> tuple[np.ndarray, np.ndarray]:
    """(teacher inputs, student inputs) for the configured direction."""
    return data.modality(config.teacher_modality), data.modality(config.student_modality)


def baseline_feature_kd(f_v: Tensor, f_a: Tensor) -> Tensor:
    """Plain feature matching: mean(1 - cos(f_v, f_a))."""
    if f_v.shape != f_a.shape:
        raise ValueError(f"feature KD needs equal shapes, got {f_v.shape} vs {f_a.shape}")
    return scale(add(mean(cosine_similarity(f_v, f_a)), Tensor(-1.0)), -1.0)


def forward_step(
    model: DistillModel,
    raw_teacher: np.ndarray,
    raw_student: np.ndarray,
    labels: np.ndarray,
    pinned: Optional[dict[str, np.ndarray]] = None,
) -> tuple[ForwardState, LossBreakdown]:
    """One forward pass through every branch.

    ``pinned`` replaces the detached student anchor (``f_v``) and the
    temperature matrix (``tau``) by fixed values; finite-difference checks use
    it to hold stop-gradient inputs constant.
    """
    c = model.config
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] < 2:
        raise ValueError("batch must hold at least 2 samples")
    zero = Tensor(0.0)

    f_a = model.teacher(Tensor(raw_teacher))
    f_v_map, f_v = model.student(Tensor(raw_student))
    anchor = Tensor(pinned["f_v"]) if pinned else detach(f_v)

    terms = {"L_t": zero, "L_ce_c": zero, "L_cl_c": zero}
    if c.enable_mnf:
        mask = compute_mask(anchor, f_a, model.fs)
        f_a_p = purify(f_a, mask)
        if c.enable_L_t:
            terms["L_t"] = triplet_loss(f_a, f_a_p, anchor, c.margin)
    else:
        mask = Tensor(np.ones(f_a.shape))
        f_a_p = f_a

    f_v_g, weights = guided_attend(f_a_p, f_v_map, model.attn)
    logits_c = None
    if c.enable_L_ce_c:
        logits_c = model.head_c(f_v_g)
        terms["L_ce_c"] = cross_entropy(logits_c, labels)
    tau = pinned["tau"] if pinned else temperature_matrix(f_v, f_a_p, c.delta).tau
    if c.enable_L_cl:
        terms["L_cl_c"] = calibrated_contrastive_loss(f_v, f_v_g, f_a_p, labels, c.delta, tau=tau)

    if c.baseline == "feature_kd":
        terms = {"L_t": zero, "L_ce_c": zero, "L_cl_c": baseline_feature_kd(f_v, f_a)}

    logits_v = model.head_v(f_v)
    terms["L_ce_v"] = cross_entropy(logits_v, labels)
    terms["L_distill"] = add(add(terms["L_t"], terms["L_ce_c"]), terms["L_cl_c"])
    terms["total"] = add(terms["L_ce_v"], scale(terms["L_distill"], c.lam))

    state = ForwardState(
        f_a=f_a, f_v_map=f_v_map, f_v=f_v, mask=mask, f_a_p=f_a_p, f_v_g=f_v_g,
        attention=weights, logits_v=logits_v, logits_c=logits_c, terms=terms,
        pinned={"f_v": anchor.data.copy(), "tau": np.array(tau, copy=True)},
    )
    breakdown = compose(
        terms["L_t"].item(), terms["L_ce_c"].item(), terms["L_cl_c"].item(), terms["L_ce_v"].item(), c.lam
    )
    return state, breakdown


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches assembled from same-class chunks, so most anchors
    see at least one same-class peer."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    per_class = max(2, batch_size // max(1, classes.size))
    chunks = []
    for k in classes:
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        chunks.extend(idx[i:i + per_class] for i in range(0, idx.size, per_class))
    order = rng.permutation(len(chunks))
    flat = np.concatenate([chunks[i] for i in order])
    batches = [flat[i:i + batch_size] for i in range(0, flat.size, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


@dataclass
class TrainState:
    step: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.history)


def train(model: DistillModel, data: Dataset, epochs: Optional[int] = None, seed: Optional[int] = None) -> TrainState:
    c = model.config
    epochs = c.epochs if epochs is None else epochs
    seed = c.seed if seed is None else seed
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if c.batch_size < 2:
        raise ValueError("batch size must be >= 2")
    if not model.teacher.frozen:
        raise ValueError("teacher must be pretrained and frozen before distillation")
    rng = np.random.default_rng(seed + 7919)
    x_t, x_s = split_roles(data, c)
    params = model.trainable()
    opt = Adam(params, lr=c.lr)
    state = TrainState(seed=seed)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(6)
        count = 0
        for idx in balanced_batches(data.labels, c.batch_size, rng):
            if idx.size < 2:
                continue
            with Tape():
                fstate, parts = forward_step(model, x_t[idx], x_s[idx], data.labels[idx])
            opt.zero_grad()
            backward(fstate.terms["total"])
            opt.step()
            state.step += 1
            sums += np.array(list(parts.to_dict().values())) * idx.size
            count += idx.size
        rec = dict(zip(LossBreakdown.__dataclass_fields__, (sums / max(count, 1)).tolist()))
        rec["epoch"] = epoch
        rec["wall_clock"] = time.perf_counter() - t0
        state.history.append(rec)
        logger.debug("epoch %d total %.4f", epoch, rec["total"])
    return state


def pretrain_teacher(data: Dataset, config: DistillConfig) -> TeacherEncoder:
    x_t, _ = split_roles(data, config)
    return teacher_pretrain(
        x_t, data.labels, config.n_classes, config.teacher_epochs, config.teacher_lr,
        hidden=config.teacher_hidden, d_a=config.d_a, seed=config.seed + 1,
    )


def evaluate(model: DistillModel, data: Dataset, split: str = "test") -> MetricsReport:
    """Student-only evaluation: top-1 from the student head, retrieval on the
    pooled student feature with the split acting as its own gallery."""
    _, x_s = split_roles(data, model.config)
    logits = model.predict_logits(x_s)
    emb = model.embed(x_s)
    n = len(data)
    acc = top1_accuracy(logits, data.labels)
    ret = retrieval(emb, emb, data.labels, data.labels, r_ks=(1, 5, 20), map_ks=(100, 500), exclude_self=True)
    per_class = {}
    pred = np.argmax(logits, axis=1)
    for k in range(data.n_classes):
        sel = data.labels == k
        if sel.any():
            per_class[k] = float(np.mean(pred[sel] == k) * 100.0)
    return MetricsReport(accuracy=acc, r_at=ret["r_at"], map_at=ret["map_at"], per_class=per_class, split=split, n=n)
