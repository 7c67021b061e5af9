"""Seeded experiment runs and the ablation grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .config import DistillConfig
from .encoders import TeacherEncoder
from .metrics import MetricsReport
from .mnf import raw_channel_mask
from .objective import DistillModel, TrainState, evaluate, forward_step, pretrain_teacher, split_roles, train
from .synthgen import Dataset, generate, mix_audio

logger = logging.getLogger(__name__)

# (name, overrides, mixed teacher input)
LOSS_ABLATIONS = [
    ("ce_c", dict(enable_L_t=False, enable_L_cl=False), False),
    ("ce_c+L_t", dict(enable_L_t=True, enable_L_cl=False), False),
    ("ce_c+L_cl", dict(enable_L_t=False, enable_L_cl=True), False),
    ("full", dict(enable_L_t=True, enable_L_cl=True), False),
]
MIXED_ABLATIONS = [
    ("mixed_no_mnf", dict(enable_mnf=False, enable_L_t=False, enable_L_cl=False), True),
    ("mixed_mnf", dict(enable_mnf=True, enable_L_t=True, enable_L_cl=False), True),
]
ABLATIONS = LOSS_ABLATIONS + MIXED_ABLATIONS


@dataclass
class Prepared:
    config: DistillConfig
    train: Dataset
    test: Dataset
    teacher: TeacherEncoder


def prepare(config: DistillConfig, seed: Optional[int] = None) -> Prepared:
    """Generate the seed's dataset, split it and pretrain the frozen teacher."""
    seed = config.seed if seed is None else seed
    config = replace(config, seed=seed, data=replace(config.data, seed=seed))
    data = generate(config.data)
    tr, te = data.split(config.test_fraction, seed=seed)
    teacher = pretrain_teacher(tr, config)
    return Prepared(config, tr, te, teacher)


def run_variant(
    prep: Prepared,
    overrides: Optional[dict] = None,
    mix_fraction: float = 0.0,
) -> tuple[DistillModel, TrainState, MetricsReport]:
    config = replace(prep.config, **(overrides or {})).validate()
    data = prep.train
    if mix_fraction > 0:
        data = mix_audio(data, mix_fraction, seed=config.seed)
    model = DistillModel(config, prep.teacher)
    state = train(model, data)
    return model, state, evaluate(model, prep.test)


def ablate(config: DistillConfig, seeds, mix_fraction: float = 1.0, variants=ABLATIONS) -> list[dict]:
    """One row per (variant, seed) with Acc, R@1 and mAP."""
    rows = []
    for seed in seeds:
        prep = prepare(config, seed)
        for name, overrides, mixed in variants:
            _, _, rep = run_variant(prep, overrides, mix_fraction if mixed else 0.0)
            rows.append(_row(name, seed, rep))
            logger.info("seed %d %-14s acc %.2f R@1 %.2f", seed, name, rep.accuracy, rep.r_at[1])
    return rows


def _row(name: str, seed: int, rep: MetricsReport) -> dict:
    return {
        "variant": name,
        "seed": int(seed),
        "acc": rep.accuracy,
        "r1": rep.r_at[1],
        "map100": rep.map_at[100],
        "map500": rep.map_at[500],
    }


def summarize(rows: list[dict]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        out[name] = {k: float(np.mean([r[k] for r in sel])) for k in ("acc", "r1", "map100", "map500")}
    return out


def mixing_drop(config: DistillConfig, seeds, mix_fraction: float = 1.0) -> list[dict]:
    """Clean minus mixed accuracy for the two mixed-input variants, per seed."""
    rows = []
    for seed in seeds:
        prep = prepare(config, seed)
        for name, overrides, _ in MIXED_ABLATIONS:
            clean = run_variant(prep, overrides, 0.0)[2].accuracy
            mixed = run_variant(prep, overrides, mix_fraction)[2].accuracy
            rows.append({"variant": name, "seed": int(seed), "clean": clean, "mixed": mixed, "drop": clean - mixed})
    return rows


def mask_probe(model: DistillModel, data: Dataset) -> dict:
    """Held-out mask and similarity statistics of a trained model.

    ``noise_mask``/``signal_mask``: the feature mask pulled back onto raw
    teacher channels, averaged over the ground-truth noise and signal
    channels.  ``cos_purified``/``cos_raw``: mean cosine of the purified and
    unmasked teacher feature with the student feature.
    """
    if model.config.teacher_modality != "audio":
        raise ValueError("ground-truth noise channels exist on the audio side only")
    x_t, x_s = split_roles(data, model.config)
    state, _ = forward_step(model, x_t, x_s, data.labels)
    raw_mask = raw_channel_mask(state.mask.data, model.teacher.jacobian(x_t))
    noise = data.noise_channels
    signal = data.signal_channels
    return {
        "noise_mask": float(raw_mask[:, noise].mean()),
        "signal_mask": float(raw_mask[:, signal].mean()),
        "cos_purified": float(_cos(state.f_a_p.data, state.f_v.data).mean()),
        "cos_raw": float(_cos(state.f_a.data, state.f_v.data).mean()),
    }


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-8)
