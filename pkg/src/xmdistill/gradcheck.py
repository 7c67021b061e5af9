"""Central finite-difference checks of every loss against the tape."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DistillConfig, micro_config
from .encoders import TeacherEncoder
from .objective import DistillModel, forward_step
from .tensor import KinkMonitor, Tape, backward

LOSS_NAMES = ("L_t", "L_ce_c", "L_cl_c", "L_ce_v", "total")
H = 1e-5
TOL = 1e-4


KINK_MARGIN = 1e-3


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|n|, 1e-8)."""
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)  # loss -> rel. error of the full gradient
    worst_param: dict[str, str] = field(default_factory=dict)  # loss -> tensor with the largest |a - n|

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def ok(self, tol: float = TOL) -> bool:
        return self.max_error < tol


def random_batch(config: DistillConfig, b: int, rng: np.random.Generator):
    """Gaussian raw inputs and labels with at least one repeated class."""
    k = config.n_classes
    labels = rng.integers(0, k, size=b)
    labels[-1] = labels[0]
    x_t = rng.standard_normal((b, config.d_raw_teacher))
    x_s = rng.standard_normal((b, config.d_raw_student))
    return x_t, x_s, labels


def kink_margin(model: DistillModel, batch) -> float:
    with KinkMonitor() as mon:
        forward_step(model, *batch)
    return mon.margin


def build_micro(seed: int, **overrides) -> tuple[DistillModel, tuple]:
    """Random micro model plus a batch whose relu inputs (hinge included) all
    sit at least KINK_MARGIN away from zero, so central differences are valid."""
    config = micro_config(seed, **overrides).validate()
    rng = np.random.default_rng(seed + 100)
    teacher = TeacherEncoder(config.d_raw_teacher, config.teacher_hidden, config.d_a, rng).freeze()
    model = DistillModel(config, teacher)
    for _ in range(1000):
        batch = random_batch(config, int(rng.integers(3, 6)), rng)
        if kink_margin(model, batch) > KINK_MARGIN:
            return model, batch
    raise RuntimeError(f"no kink-free batch found for seed {seed}")


def analytic_grads(model: DistillModel, batch, loss: str) -> dict[str, np.ndarray]:
    params = model.trainable()
    for p in params.values():
        p.grad = None
    with Tape():
        state, _ = forward_step(model, *batch)
    target = state.terms[loss]
    if target.requires_grad:
        backward(target)
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}


def numeric_grads(model: DistillModel, batch, h: float = H) -> dict[str, dict[str, np.ndarray]]:
    """d(loss)/d(param) for every loss at once, with the stop-gradient
    inputs held at their unperturbed values."""
    base, _ = forward_step(model, *batch)
    pinned = base.pinned
    out = {name: {} for name in LOSS_NAMES}
    for key, p in model.trainable().items():
        grads = {name: np.zeros_like(p.data) for name in LOSS_NAMES}
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = forward_step(model, *batch, pinned=pinned)
            flat[i] = orig - h
            down, _ = forward_step(model, *batch, pinned=pinned)
            flat[i] = orig
            for name in LOSS_NAMES:
                grads[name].reshape(-1)[i] = (up.terms[name].item() - down.terms[name].item()) / (2 * h)
        for name in LOSS_NAMES:
            out[name][key] = grads[name]
    return out


def check_model(model: DistillModel, batch, h: float = H) -> GradReport:
    numeric = numeric_grads(model, batch, h)
    report = GradReport()
    for name in LOSS_NAMES:
        analytic = analytic_grads(model, batch, name)
        keys = list(analytic)
        a = np.concatenate([analytic[k].ravel() for k in keys])
        n = np.concatenate([numeric[name][k].ravel() for k in keys])
        report.errors[name] = rel_error(a, n)
        report.worst_param[name] = max(keys, key=lambda k: float(np.max(np.abs(analytic[k] - numeric[name][k]))))
    return report


def run_suite(n_configs: int = 20, seed: int = 0, **overrides) -> list[GradReport]:
    return [check_model(*build_micro(seed + i, **overrides)) for i in range(n_configs)]
