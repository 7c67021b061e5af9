"""Synthetic paired-modality datasets with known noise channels.

Every sample pairs a student-side vector ``raw_v`` with a teacher-side vector
``raw_a``.  The teacher vector has two kinds of channels:

* signal channels: ``rho * A_a z_y + (1 - rho) * A_a z_other``, so ``rho``
  sets how strongly the teacher content agrees with the label;
* noise channels: ``eta * background[b]`` with ``b`` one of a few
  class-independent patterns.

``rho`` is drawn per sample from Beta(alpha, beta) and stored, so analyses
can correlate behaviour with the ground-truth correlation strength.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"XMDS"
VERSION = 1
N_BACKGROUNDS = 4


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class GenSpec:
    n_classes: int = 8
    n_samples: int = 960
    d_raw_v: int = 32
    d_raw_a: int = 32
    d_z: int = 8
    alpha: float = 2.0
    beta: float = 2.0
    eta: float = 1.0
    noise: float = 0.1
    # per-sample deviation from the class prototype, shared by both modalities
    jitter: float = 0.0
    # extra observation noise on the student side only
    student_noise: float = 0.0
    rho: Optional[float] = None  # fixes rho for every sample when set
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if self.n_classes < 1:
            errs.append("n_classes must be >= 1")
        if self.n_samples < 1:
            errs.append("n_samples must be >= 1")
        for name in ("d_raw_v", "d_raw_a", "d_z"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.d_raw_a < 2:
            errs.append("d_raw_a must be >= 2 to hold signal and noise channels")
        if self.alpha <= 0 or self.beta <= 0:
            errs.append("alpha and beta must be positive")
        for name in ("eta", "noise", "jitter", "student_noise"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0")
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            errs.append("rho must lie in [0, 1]")
        if self.n_classes < 2 and (self.rho is None or self.rho < 1.0):
            errs.append("rho < 1 needs at least two classes")
        if errs:
            raise SpecError("; ".join(errs))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    raw_v: np.ndarray  # [N, d_raw_v]
    raw_a: np.ndarray  # [N, d_raw_a]
    labels: np.ndarray  # [N] int64
    rho: np.ndarray  # [N]
    is_mixed: np.ndarray  # [N] bool
    noise_channels: np.ndarray  # sorted indices into raw_a
    n_classes: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def signal_channels(self) -> np.ndarray:
        mask = np.ones(self.raw_a.shape[1], dtype=bool)
        mask[self.noise_channels] = False
        return np.flatnonzero(mask)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        bg = self.background[idx] if self.background.size else self.background
        return Dataset(
            self.raw_v[idx].copy(),
            self.raw_a[idx].copy(),
            self.labels[idx].copy(),
            self.rho[idx].copy(),
            self.is_mixed[idx].copy(),
            self.noise_channels.copy(),
            self.n_classes,
            bg.copy(),
        )

    def split(self, test_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Stratified train/test split."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for k in range(self.n_classes):
            idx = np.flatnonzero(self.labels == k)
            idx = idx[rng.permutation(idx.size)]
            n_test = int(round(test_fraction * idx.size))
            test.extend(idx[:n_test])
            train.extend(idx[n_test:])
        return self.subset(np.sort(train)), self.subset(np.sort(test))

    def modality(self, which: str) -> np.ndarray:
        if which == "visual":
            return self.raw_v
        if which == "audio":
            return self.raw_a
        raise ValueError(f"unknown modality {which!r}")

    # ---- serialization

    def to_bytes(self) -> bytes:
        n, dv = self.raw_v.shape
        da = self.raw_a.shape[1]
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IIIIII", VERSION, n, self.n_classes, dv, da, len(self.noise_channels)))
        buf.write(np.asarray(self.noise_channels, dtype="<u4").tobytes())
        rec = np.dtype([("label", "<u4"), ("rho", "<f8"), ("mixed", "u1"), ("v", "<f8", (dv,)), ("a", "<f8", (da,))])
        records = np.zeros(n, dtype=rec)
        records["label"] = self.labels
        records["rho"] = self.rho
        records["mixed"] = self.is_mixed
        records["v"] = self.raw_v
        records["a"] = self.raw_a
        buf.write(records.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        if blob[:4] != MAGIC:
            raise ValueError("not an XMDS dataset file")
        version, n, k, dv, da, nn = struct.unpack_from("<IIIIII", blob, 4)
        if version != VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        off = 4 + 24
        noise = np.frombuffer(blob, dtype="<u4", count=nn, offset=off).astype(np.int64)
        off += 4 * nn
        rec = np.dtype([("label", "<u4"), ("rho", "<f8"), ("mixed", "u1"), ("v", "<f8", (dv,)), ("a", "<f8", (da,))])
        if len(blob) - off != n * rec.itemsize:
            raise ValueError("truncated or oversized dataset payload")
        records = np.frombuffer(blob, dtype=rec, count=n, offset=off)
        return cls(
            raw_v=records["v"].astype(np.float64),
            raw_a=records["a"].astype(np.float64),
            labels=records["label"].astype(np.int64),
            rho=records["rho"].astype(np.float64),
            is_mixed=records["mixed"].astype(bool),
            noise_channels=noise,
            n_classes=int(k),
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())


def generate(spec: GenSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    K, N = spec.n_classes, spec.n_samples

    n_noise = spec.d_raw_a // 2
    noise_channels = np.sort(rng.choice(spec.d_raw_a, size=n_noise, replace=False))
    signal_mask = np.ones(spec.d_raw_a, dtype=bool)
    signal_mask[noise_channels] = False
    n_signal = spec.d_raw_a - n_noise

    protos = rng.standard_normal((K, spec.d_z))
    A_v = rng.standard_normal((spec.d_raw_v, spec.d_z)) / np.sqrt(spec.d_z)
    A_a = rng.standard_normal((n_signal, spec.d_z)) / np.sqrt(spec.d_z)
    backgrounds = rng.standard_normal((N_BACKGROUNDS, n_noise))

    labels = np.arange(N) % K
    labels = labels[rng.permutation(N)]
    if spec.rho is None:
        rho = rng.beta(spec.alpha, spec.beta, size=N)
    else:
        rho = np.full(N, float(spec.rho))
    if K > 1:
        other = (labels + rng.integers(1, K, size=N)) % K
    else:
        other = labels.copy()
    bg = rng.integers(0, N_BACKGROUNDS, size=N)

    z = protos[labels] + spec.jitter * rng.standard_normal((N, spec.d_z))
    z_other = protos[other] + spec.jitter * rng.standard_normal((N, spec.d_z))

    raw_v = z @ A_v.T + spec.noise * rng.standard_normal((N, spec.d_raw_v))
    if spec.student_noise > 0:
        raw_v = raw_v + spec.student_noise * rng.standard_normal((N, spec.d_raw_v))

    raw_a = np.empty((N, spec.d_raw_a))
    sig = rho[:, None] * (z @ A_a.T) + (1.0 - rho[:, None]) * (z_other @ A_a.T)
    raw_a[:, signal_mask] = sig
    raw_a[:, noise_channels] = spec.eta * backgrounds[bg]
    raw_a += spec.noise * rng.standard_normal((N, spec.d_raw_a))

    return Dataset(
        raw_v=raw_v,
        raw_a=raw_a,
        labels=labels.astype(np.int64),
        rho=rho,
        is_mixed=np.zeros(N, dtype=bool),
        noise_channels=noise_channels.astype(np.int64),
        n_classes=K,
        background=bg.astype(np.int64),
    )


def mix_audio(dataset: Dataset, fraction: float, seed: int = 0, return_donors: bool = False):
    """Blend the teacher-side vector of a random ``fraction`` of samples 50/50
    with that of a donor from a different class.  Student inputs are untouched.

    With ``return_donors`` also returns the donor index per sample (-1 where
    the sample was left alone).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    out = dataset.subset(np.arange(len(dataset)))
    n_pick = int(round(fraction * len(dataset)))
    donor_of = np.full(len(dataset), -1, dtype=np.int64)
    if n_pick == 0:
        return (out, donor_of) if return_donors else out
    if np.unique(dataset.labels).size < 2:
        raise ValueError("mixing needs at least two classes for a different-class donor")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(dataset), size=n_pick, replace=False))
    donors = np.empty(n_pick, dtype=np.int64)
    for i, r in enumerate(picked):
        pool = np.flatnonzero(dataset.labels != dataset.labels[r])
        donors[i] = pool[rng.integers(pool.size)]
    out.raw_a[picked] = 0.5 * dataset.raw_a[picked] + 0.5 * dataset.raw_a[donors]
    out.is_mixed[picked] = True
    donor_of[picked] = donors
    return (out, donor_of) if return_donors else out


def with_spec(spec: GenSpec, **overrides) -> GenSpec:
    return replace(spec, **overrides)
