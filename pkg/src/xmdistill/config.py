"""Experiment configuration: one flat JSON object plus a nested ``data`` block."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .synthgen import GenSpec

ROLES = ("audio->visual", "visual->audio")
BASELINES = ("none", "feature_kd")

# Default benchmark: the plain generator makes the student task trivially
# separable, so samples deviate from their prototype and the student view is
# noisier.  Without this every ablation variant scores 100%.
BENCHMARK = GenSpec(jitter=0.8, student_noise=0.5)


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config: " + "; ".join(self.errors))


@dataclass
class DistillConfig:
    seed: int = 0
    role: str = "audio->visual"
    # feature map geometry and widths
    t_dim: int = 2
    h_dim: int = 2
    w_dim: int = 2
    d_v: int = 16
    d_a: int = 16
    d_k: int = 16
    h_fs: int = 32
    h_tv: int = 32
    teacher_hidden: int = 32
    # method hyperparameters
    margin: float = 0.2
    delta: float = 1.5
    lam: float = 1.0
    # optimization
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    teacher_epochs: int = 20
    teacher_lr: float = 0.5
    test_fraction: float = 0.25
    # ablation switches
    enable_L_t: bool = True
    enable_L_cl: bool = True
    enable_L_ce_c: bool = True
    enable_mnf: bool = True
    baseline: str = "none"
    data: GenSpec = field(default_factory=lambda: BENCHMARK)

    @property
    def n_positions(self) -> int:
        return self.t_dim * self.h_dim * self.w_dim

    @property
    def n_classes(self) -> int:
        return self.data.n_classes

    @property
    def teacher_modality(self) -> str:
        return "audio" if self.role == "audio->visual" else "visual"

    @property
    def student_modality(self) -> str:
        return "visual" if self.role == "audio->visual" else "audio"

    @property
    def d_raw_teacher(self) -> int:
        return self.data.d_raw_a if self.teacher_modality == "audio" else self.data.d_raw_v

    @property
    def d_raw_student(self) -> int:
        return self.data.d_raw_v if self.student_modality == "visual" else self.data.d_raw_a

    def errors(self) -> list[str]:
        errs = []
        if self.role not in ROLES:
            errs.append(f"role must be one of {ROLES}, got {self.role!r}")
        if self.baseline not in BASELINES:
            errs.append(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        for name in ("t_dim", "h_dim", "w_dim", "d_v", "d_a", "d_k", "h_fs", "h_tv", "teacher_hidden"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.d_a != self.d_v:
            errs.append(f"d_a ({self.d_a}) must equal d_v ({self.d_v}) for the cosine terms")
        if not self.delta > 1.0:
            errs.append(f"delta must be > 1 to keep temperatures positive, got {self.delta}")
        if self.margin < 0:
            errs.append(f"margin must be >= 0, got {self.margin}")
        if self.lam < 0:
            errs.append(f"lam must be >= 0, got {self.lam}")
        if self.batch_size < 2:
            errs.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0 or self.teacher_lr <= 0:
            errs.append("learning rates must be positive")
        if self.epochs < 0 or self.teacher_epochs < 0:
            errs.append("epoch counts must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            errs.append("test_fraction must lie in (0, 1)")
        try:
            self.data.validate()
        except ValueError as e:
            errs.append(f"data: {e}")
        return errs

    def validate(self) -> "DistillConfig":
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = self.data.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError([f"unknown field {k!r}" for k in unknown])
        kw = dict(raw)
        data = kw.pop("data", None) or {}
        gen_known = {f.name for f in fields(GenSpec)}
        bad = sorted(set(data) - gen_known)
        if bad:
            raise ConfigError([f"unknown data field {k!r}" for k in bad])
        try:
            return cls(data=GenSpec(**data), **kw)
        except TypeError as e:
            raise ConfigError([str(e)]) from e

    @classmethod
    def load(cls, path) -> "DistillConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def micro_config(seed: int = 0, **overrides) -> DistillConfig:
    """Tiny dimensions for finite-difference checks."""
    base = dict(
        seed=seed,
        t_dim=2, h_dim=1, w_dim=2,
        d_v=4, d_a=4, d_k=3, h_fs=5, h_tv=5, teacher_hidden=5,
        batch_size=4,
        data=GenSpec(n_classes=3, n_samples=24, d_raw_v=5, d_raw_a=6, d_z=3, seed=seed),
    )
    base.update(overrides)
    return DistillConfig(**base)
