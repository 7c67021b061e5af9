"""Small stand-in encoders and the XMDL checkpoint format."""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .nn import Linear, Module
from .tensor import Tape, Tensor, backward, cross_entropy, mean_pool, relu, reshape, tanh

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"XMDL"
CKPT_VERSION = 1


class StudentEncoder(Module):
    """raw -> linear -> relu -> [T, H, W, d_v] map -> per-position tanh mixing.

    The pooled feature is the global average of the map over T, H, W.
    """

    def __init__(self, d_raw: int, t: int, h: int, w: int, d_v: int, rng: np.random.Generator):
        self.d_raw = d_raw
        self.grid = (t, h, w)
        self.d_v = d_v
        self.proj = Linear(d_raw, t * h * w * d_v, rng)
        self.mix = Linear(d_v, d_v, rng)

    def __call__(self, raw: Tensor) -> tuple[Tensor, Tensor]:
        if raw.ndim != 2 or raw.shape[1] != self.d_raw:
            raise ValueError(f"student expects [b, {self.d_raw}] input, got {raw.shape}")
        b = raw.shape[0]
        t, h, w = self.grid
        cells = reshape(relu(self.proj(raw)), (b * t * h * w, self.d_v))
        fmap = reshape(tanh(self.mix(cells)), (b, t, h, w, self.d_v))
        return fmap, mean_pool(fmap, axes=(1, 2, 3))


class TeacherEncoder(Module):
    def __init__(self, d_raw: int, hidden: int, d_a: int, rng: np.random.Generator):
        self.d_raw = d_raw
        self.d_a = d_a
        self.fc1 = Linear(d_raw, hidden, rng)
        self.fc2 = Linear(hidden, d_a, rng)
        self.frozen = False
        self.train_accuracy: float | None = None

    def __call__(self, raw: Tensor) -> Tensor:
        if raw.ndim != 2 or raw.shape[1] != self.d_raw:
            raise ValueError(f"teacher expects [b, {self.d_raw}] input, got {raw.shape}")
        return self.fc2(relu(self.fc1(raw)))

    def freeze(self) -> "TeacherEncoder":
        self.set_trainable(False)
        self.frozen = True
        return self

    def jacobian(self, raw: np.ndarray) -> np.ndarray:
        """d f_a / d raw per sample, shape [n, d_a, d_raw]."""
        w1, b1 = self.fc1.weight.data, self.fc1.bias.data
        w2 = self.fc2.weight.data
        active = (raw @ w1 + b1) > 0
        return np.einsum("hc,nh,rh->ncr", w2, active.astype(float), w1)


class ClassifierHead(Module):
    def __init__(self, d_in: int, n_classes: int, rng: np.random.Generator):
        self.fc = Linear(d_in, n_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(x)


def teacher_pretrain(
    raw: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    epochs: int = 20,
    lr: float = 0.05,
    *,
    hidden: int = 32,
    d_a: int = 16,
    seed: int = 0,
) -> TeacherEncoder:
    """Full-batch gradient descent with cross-entropy through a throwaway
    head, then freeze.  The training accuracy is kept on the teacher."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise ValueError("teacher pretraining needs a non-empty [n, d] array")
    rng = np.random.default_rng(seed)
    teacher = TeacherEncoder(raw.shape[1], hidden, d_a, rng)
    head = ClassifierHead(d_a, n_classes, rng)
    x = Tensor(raw)
    params = teacher.parameters() + head.parameters()
    for _ in range(epochs):
        with Tape():
            loss = cross_entropy(head(teacher(x)), labels)
        for p in params:
            p.grad = None
        backward(loss)
        for p in params:
            p.data = p.data - lr * p.grad
    logits = head(teacher(x)).data
    teacher.train_accuracy = float(np.mean(np.argmax(logits, axis=1) == labels) * 100.0)
    logger.info("teacher pretrained for %d epochs, train acc %.1f%%", epochs, teacher.train_accuracy)
    return teacher.freeze()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        enc = name.encode("utf-8")
        out.append(struct.pack("<I", len(enc)))
        out.append(enc)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an XMDL checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return state
