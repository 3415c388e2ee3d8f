"""Toy encoder-decoder segmentation network and its training utilities.

Three conv-BN-ReLU blocks (stride 2 each) produce a feature map at 1/8
resolution; a 1×1 conv maps it to class logits, which are bilinearly
upsampled back to the input size.
"""

from __future__ import annotations

import io
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"PSFCKPT1"
STRIDE = 8


@dataclass
class BnStats:
    """Running mean/variance of the last normalisation layer."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).copy()
        self.var = np.asarray(self.var, dtype=np.float32).copy()
        if self.mean.shape != self.var.shape:
            raise DimensionError("BnStats mean and var lengths differ")
        if np.any(self.var < 0):
            raise ValueError("BnStats variance must be non-negative")


def _kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, cin, cout, k, stride=1, padding=0, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return T.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var, training, self.momentum, self.eps
        )


class SegModel:
    """Stride-8 segmentation network returning ``(logits, features)``."""

    def __init__(self, num_classes: int = 5, feat_channels: int = 32, seed: int = 0, widths=(16, 32)):
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.feat_channels = feat_channels
        chans = (3,) + tuple(widths) + (feat_channels,)
        self.blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.blocks.append((Conv2d(cin, cout, 3, 2, 1, bias=False, rng=rng), BatchNorm2d(cout)))
        self.decoder = Conv2d(feat_channels, num_classes, 1, rng=rng)

    # -- parameter plumbing ----------------------------------------------------
    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for i, (conv, bn) in enumerate(self.blocks, start=1):
            out[f"enc{i}.conv.weight"] = conv.weight
            out[f"enc{i}.bn.weight"] = bn.weight
            out[f"enc{i}.bn.bias"] = bn.bias
        out["dec.weight"] = self.decoder.weight
        out["dec.bias"] = self.decoder.bias
        return out

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for i, (_, bn) in enumerate(self.blocks, start=1):
            out[f"enc{i}.bn.running_mean"] = bn.running_mean
            out[f"enc{i}.bn.running_var"] = bn.running_var
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())
        state.update((k, v.copy()) for k, v in self.named_buffers().items())
        return state

    def load_state_dict(self, state) -> None:
        params, bufs = self.named_parameters(), self.named_buffers()
        missing = set(params) | set(bufs)
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float32)
            target = params[name].data if name in params else bufs.get(name)
            if target is None:
                raise KeyError(f"unexpected entry '{name}'")
            if target.shape != value.shape:
                raise DimensionError(f"'{name}': expected {target.shape}, got {value.shape}")
            target[...] = value
            missing.discard(name)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)}")

    def clone(self) -> "SegModel":
        twin = SegModel(self.num_classes, self.feat_channels, widths=self.widths)
        twin.load_state_dict(self.state_dict())
        return twin

    @property
    def widths(self) -> tuple:
        return tuple(conv.weight.shape[0] for conv, _ in self.blocks[:-1])

    @property
    def last_bn(self) -> BatchNorm2d:
        return self.blocks[-1][1]

    def bn_stats(self) -> BnStats:
        bn = self.last_bn
        return BnStats(bn.running_mean, bn.running_var)

    # -- forward ---------------------------------------------------------------
    def __call__(self, x, train_mode: bool = False):
        return forward(self, x, train_mode)


def forward(model: SegModel, x, train_mode: bool = False):
    """Return ``(P, f)``: logits at input resolution and stride-8 features.

    A 3-D input (C×H×W) yields 3-D outputs; a 4-D batch yields 4-D outputs.
    """
    logits, feat, _ = forward_with_bn_input(model, x, train_mode)
    return logits, feat


def forward_with_bn_input(model: SegModel, x, train_mode: bool = False):
    """Like :func:`forward`, also returning the input of the last batchnorm layer."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected 3×H×W or N×3×H×W input, got {x.shape}")
    h, w = x.shape[2:]
    if h % STRIDE or w % STRIDE:
        raise DimensionError(f"input dims {h}×{w} must be divisible by {STRIDE}")
    feat = x
    for conv, bn in model.blocks:
        pre = conv(feat)
        feat = T.relu(bn(pre, train_mode))
    logits = T.upsample_bilinear(model.decoder(feat), (h, w))
    if single:
        drop = lambda t: t.reshape(t.shape[1:])  # noqa: E731
        return drop(logits), drop(feat), drop(pre)
    return logits, feat, pre


def predict_labels(model: SegModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode argmax labels for an N×3×H×W stack."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = forward(model, Tensor(images[i : i + batch_size]), train_mode=False)
            out.append(logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.uint8)


class SGD:
    """SGD with classical momentum: ``v = μ v + g``, ``p -= lr v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9, max_grad_norm: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm  # 0 disables clipping
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.params if p.grad is not None)
        return float(np.sqrt(sq))

    def step(self) -> None:
        scale = 1.0
        if self.max_grad_norm > 0:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad * scale if scale != 1.0 else p.grad
            p.data -= (self.lr * v).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- checkpoints -------------------------------------------------------------------
def save_checkpoint(path, model: SegModel, bn_stats: Optional[BnStats] = None) -> None:
    """Index of named tensors in fixed topological order.

    Layout: ``PSFCKPT1``, u32 entry count, then per entry a u16 name length,
    the UTF-8 name and a ``PSFK1`` tensor blob.
    """
    entries = list(model.state_dict().items())
    if bn_stats is not None:
        entries += [("bnstats.mean", bn_stats.mean), ("bnstats.var", bn_stats.var)]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        T.write_tensor(buf, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint_entries(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        entries = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            entries[name] = T.read_tensor(fh).data
    return entries


def load_checkpoint(path):
    """Return ``(model, bn_stats_or_None)``; architecture is inferred from shapes."""
    entries = read_checkpoint_entries(path)
    stats = None
    if "bnstats.mean" in entries:
        stats = BnStats(entries.pop("bnstats.mean"), entries.pop("bnstats.var"))
    convs = sorted(k for k in entries if k.startswith("enc") and k.endswith(".conv.weight"))
    widths = tuple(entries[k].shape[0] for k in convs[:-1])
    k_cls, c_feat = entries["dec.weight"].shape[:2]
    model = SegModel(int(k_cls), int(c_feat), widths=widths)
    model.load_state_dict(entries)
    return model, stats


# -- source pretraining ------------------------------------------------------------------
def pretrain_source(
    model: SegModel,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 20,
    lr: float = 0.01,
    batch_size: int = 8,
    seed: int = 0,
    momentum: float = 0.9,
):
    """Supervised cross-entropy training on labelled pinhole crops.

    Returns ``(model, bn_stats, epoch_losses)``; the model is trained in place.
    """
    if len(images) == 0:
        raise ConfigError("pretraining dataset is empty")
    if len(images) != len(labels):
        raise ConfigError("images and labels differ in count")
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), lr, momentum)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            logits, _ = forward(model, Tensor(images[idx]), train_mode=True)
            loss = T.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        logger.info("pretrain epoch %d: ce=%.4f", epoch + 1, history[-1])
    return model, model.bn_stats(), history
