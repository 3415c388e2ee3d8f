"""Class prototypes from pseudo-labelled features, their fusion and their losses.

A :class:`PrototypeBank` holds one feature-space prototype per class plus a
presence mask; absent classes have zero rows and never enter an average or a
loss.  Bank rows may be live tensors (gradients flow through masked average
pooling back into the model) or detached constants.
"""

from __future__ import annotations

import itertools
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class PrototypeBank:
    protos: Tensor  # K×C
    present: np.ndarray  # bool, K
    counts: np.ndarray = None  # per-class update counters (the running-mean index)
    epoch: int = 0

    def __post_init__(self):
        if not isinstance(self.protos, Tensor):
            self.protos = Tensor(self.protos)
        self.present = np.asarray(self.present, dtype=bool).copy()
        if self.counts is None:
            self.counts = np.zeros(self.num_classes, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64).copy()
        if self.protos.ndim != 2 or self.present.shape != (self.protos.shape[0],):
            raise DimensionError(f"bank shape {self.protos.shape} disagrees with presence {self.present.shape}")

    @property
    def num_classes(self) -> int:
        return self.protos.shape[0]

    @property
    def channels(self) -> int:
        return self.protos.shape[1]

    @classmethod
    def empty(cls, num_classes: int, channels: int) -> "PrototypeBank":
        return cls(Tensor(np.zeros((num_classes, channels), np.float32)), np.zeros(num_classes, bool))

    def detach(self) -> "PrototypeBank":
        return PrototypeBank(self.protos.detach(), self.present, self.counts, self.epoch)

    def is_empty(self) -> bool:
        return not self.present.any()


def hard_pseudo_label(P) -> Tensor:
    """One-hot argmax over the class axis (axis −3); ties go to the lowest index."""
    logits = P.data if isinstance(P, Tensor) else np.asarray(P)
    if logits.ndim < 3:
        raise DimensionError(f"expected K×h×w logits, got {logits.shape}")
    k = logits.shape[-3]
    idx = logits.argmax(axis=-3)
    onehot = (np.arange(k).reshape((k, 1, 1)) == idx[..., None, :, :]).astype(np.float32)
    return Tensor(onehot)


def masked_average_pooling(f_up: Tensor, y_hat) -> PrototypeBank:
    """Mean feature vector under each class mask.

    ``f_up`` is C×h×w, already resampled to the mask resolution; ``y_hat`` is a
    K×h×w one-hot mask.
    """
    mask = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat, dtype=np.float32)
    if f_up.ndim != 3 or mask.ndim != 3 or f_up.shape[1:] != mask.shape[1:]:
        raise DimensionError(f"features {f_up.shape} and mask {mask.shape} differ spatially")
    k, c = mask.shape[0], f_up.shape[0]
    flat_mask = mask.reshape(k, -1)
    area = flat_mask.sum(axis=1, dtype=np.float64)
    sums = T.matmul(Tensor(flat_mask), f_up.reshape(c, -1).T)
    protos = sums / Tensor(np.maximum(area, 1.0)[:, None].astype(np.float32))
    return PrototypeBank(protos, area > 0)


def extract_prototypes(P: Tensor, f: Tensor) -> PrototypeBank:
    """Prototype bank for one image: pseudo-label ``P`` and pool upsampled ``f``."""
    y_hat = hard_pseudo_label(P)
    f_up = T.upsample_bilinear(f, P.shape[-2:])
    return masked_average_pooling(f_up, y_hat)


def aggregate(banks: Sequence[PrototypeBank]) -> PrototypeBank:
    """Presence-aware per-class mean across banks; presence is the OR."""
    if not banks:
        raise ValueError("aggregate needs at least one bank")
    shape = banks[0].protos.shape
    if any(b.protos.shape != shape for b in banks):
        raise DimensionError("banks disagree on K or C")
    members = np.stack([b.present for b in banks]).astype(np.float64)
    n = members.sum(axis=0)
    weights = members / np.maximum(n, 1.0)
    out = None
    for b, w in zip(banks, weights):
        if not w.any():
            continue
        term = b.protos * Tensor(w[:, None].astype(np.float32))
        out = term if out is None else out + term
    if out is None:
        out = Tensor(np.zeros(shape, np.float32))
    return PrototypeBank(out, n > 0)


def fuse(tau_p: PrototypeBank, tau_f: PrototypeBank) -> PrototypeBank:
    """Combine tangent-patch and fixed-FoV prototypes by presence-aware mean."""
    return aggregate([tau_p, tau_f])


def update_global(tau_g_prev: PrototypeBank, tau_pf: PrototypeBank) -> PrototypeBank:
    """Running-mean update with per-class counters.

    For a class present now, with counter ``i`` after increment, the row becomes
    ``new/i + (1 − 1/i)·old``; absent classes keep their row and counter.
    """
    if tau_g_prev.protos.shape != tau_pf.protos.shape:
        raise DimensionError("global and epoch banks disagree on K or C")
    old = tau_g_prev.protos.data.astype(np.float64)
    new = tau_pf.protos.data.astype(np.float64)
    counts = tau_g_prev.counts.copy()
    counts[tau_pf.present] += 1
    rows = old.copy()
    for k in np.flatnonzero(tau_pf.present):
        i = counts[k]
        rows[k] = new[k] / i + (1.0 - 1.0 / i) * old[k]
    present = tau_g_prev.present | tau_pf.present
    return PrototypeBank(Tensor(rows.astype(np.float32)), present, counts, tau_g_prev.epoch + 1)


def _row_mse(a: PrototypeBank, b: PrototypeBank, rows: np.ndarray) -> Tensor:
    diff = a.protos[rows] - b.protos[rows]
    return (diff * diff).mean()


def loss_sft(ffp_banks: Sequence[PrototypeBank]) -> Tensor:
    """Sum over unordered bank pairs of the per-class mean squared row difference.

    Each pair is averaged over the classes present in both of its members.
    """
    total = Tensor(np.zeros((), np.float32))
    for a, b in itertools.combinations(ffp_banks, 2):
        joint = np.flatnonzero(a.present & b.present)
        if joint.size:
            total = total + _row_mse(a, b, joint)
    return total


def loss_ppa(tau_g: PrototypeBank, tau_t: PrototypeBank) -> Tensor:
    """Squared distance between global and target prototypes on jointly present classes.

    ``tau_g`` is treated as a constant.
    """
    if tau_g.protos.shape != tau_t.protos.shape:
        raise DimensionError("global and target banks disagree on K or C")
    joint = np.flatnonzero(tau_g.present & tau_t.present)
    if not joint.size:
        logger.warning("loss_ppa: no class present in both banks; returning 0")
        return Tensor(np.zeros((), np.float32))
    return _row_mse(tau_g.detach(), tau_t, joint)


@dataclass
class BankAccumulator:
    """Presence-aware running mean of detached banks within one epoch."""

    num_classes: int
    channels: int
    sums: np.ndarray = field(init=False)
    hits: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sums = np.zeros((self.num_classes, self.channels))
        self.hits = np.zeros(self.num_classes, dtype=np.int64)

    def add(self, bank: PrototypeBank) -> None:
        self.sums[bank.present] += bank.protos.data[bank.present]
        self.hits += bank.present

    def mean(self) -> PrototypeBank:
        rows = self.sums / np.maximum(self.hits, 1)[:, None]
        return PrototypeBank(Tensor(rows.astype(np.float32)), self.hits > 0)


# -- persistence ---------------------------------------------------------------------
def save_bank(path, bank: PrototypeBank) -> None:
    """Tensor blob, one presence byte per class, u32 per-class counters, u32 epoch."""
    with open(path, "wb") as fh:
        T.write_tensor(fh, bank.protos)
        fh.write(bank.present.astype(np.uint8).tobytes())
        fh.write(bank.counts.astype("<u4").tobytes())
        fh.write(struct.pack("<I", bank.epoch))


def load_bank(path) -> PrototypeBank:
    with open(path, "rb") as fh:
        protos = T.read_tensor(fh)
        k = protos.shape[0]
        present = np.frombuffer(fh.read(k), dtype=np.uint8).astype(bool)
        counts = np.frombuffer(fh.read(4 * k), dtype="<u4").astype(np.int64)
        tail = fh.read(4)
    if present.shape != (k,) or counts.shape != (k,) or len(tail) != 4:
        raise ValueError(f"{path}: truncated prototype bank")
    (epoch,) = struct.unpack("<I", tail)
    return PrototypeBank(protos, present, counts, epoch)


def bank_to_json(bank: PrototypeBank) -> str:
    return json.dumps(
        {
            "epoch": int(bank.epoch),
            "present": bank.present.astype(int).tolist(),
            "counts": bank.counts.tolist(),
            "protos": bank.protos.data.astype(float).tolist(),
        },
        indent=2,
    )


def bank_from_json(text: str) -> PrototypeBank:
    obj = json.loads(text)
    return PrototypeBank(
        Tensor(np.asarray(obj["protos"], dtype=np.float32)),
        np.asarray(obj["present"], dtype=bool),
        np.asarray(obj["counts"], dtype=np.int64),
        int(obj["epoch"]),
    )
