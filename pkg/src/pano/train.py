"""Source-free adaptation loop.

Per batch of panoramas the frozen-statistics source model sees tangent patches
and fixed-FoV slabs, producing prototypes, a stitched pseudo-label and rebuilt
features.  The target model is trained on the weighted sum of supervision,
prototype, BN-statistics and cross-attention losses; the source model is
fine-tuned with the slab prototype-consistency loss alone.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import cdam, ppam
from . import tensor as T
from .errors import ConfigError, DimensionError, EvaluationError
from .metrics import ConfusionMatrix, miou
from .model import SGD, BnStats, SegModel, forward, forward_with_bn_input, predict_labels
from .projection import ffp_split, get_layout, project_tp, stitch_ffp
from .tensor import Tensor

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "sup", "ppa", "sft", "bns", "cda", "total", "miou")
LOSS_NAMES = ("sup", "ppa", "sft", "bns", "cda")
_KEY_ALIASES = {"lambda": "lam"}


@dataclass
class AdaptConfig:
    lam: float = 100.0
    gamma: float = 0.1
    epochs: int = 5
    batch_size: int = 4
    lr_target: float = 0.001
    lr_source: float = 0.0001
    momentum: float = 0.9
    max_grad_norm: float = 1.0  # global-norm clip on the target step; 0 disables
    seed: int = 7
    ffp_fov: int = 90
    layout: str = "default"
    patch_size: int = 64
    use_sup: bool = True
    use_ppa: bool = True
    use_sft: bool = True
    use_cda: bool = True
    use_bns: bool = True
    sup_source: str = "ffp"  # "ffp": stitched slab predictions; "erp": one more source pass on the panorama
    proto_sources: str = "tp,ffp"
    target_bn: str = "frozen"  # "frozen": keep source running stats; "train": batch stats + running updates
    bns_features: str = "bn_input"  # "bn_input": input of the last batchnorm; "f": pre-decoder features

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ConfigError("lambda and gamma must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.max_grad_norm < 0:
            raise ConfigError("max_grad_norm must be non-negative")
        if self.sup_source not in ("ffp", "erp"):
            raise ConfigError(f"sup_source must be 'ffp' or 'erp', got {self.sup_source!r}")
        if self.target_bn not in ("frozen", "train"):
            raise ConfigError(f"target_bn must be 'frozen' or 'train', got {self.target_bn!r}")
        if self.bns_features not in ("f", "bn_input"):
            raise ConfigError(f"bns_features must be 'f' or 'bn_input', got {self.bns_features!r}")
        srcs = set(self.proto_sources.split(","))
        if not srcs or not srcs <= {"tp", "ffp"}:
            raise ConfigError(f"proto_sources must list tp and/or ffp, got {self.proto_sources!r}")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    def banner(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.as_dict().items())


def _coerce(kind, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    return kind(raw.strip())


def config_from_mapping(values: dict, base: Optional[AdaptConfig] = None) -> AdaptConfig:
    current = asdict(base or AdaptConfig())
    types = {f.name: type(current[f.name]) for f in fields(AdaptConfig)}
    for key, raw in values.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in types:
            raise ConfigError(f"unknown config key '{key}'")
        try:
            current[name] = raw if not isinstance(raw, str) else _coerce(types[name], raw)
        except ValueError:
            raise ConfigError(f"bad value for '{key}': {raw!r}") from None
    return AdaptConfig(**current)


def parse_config(text: str, base: Optional[AdaptConfig] = None) -> AdaptConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return config_from_mapping(values, base)


def load_config(path) -> AdaptConfig:
    with open(path) as fh:
        return parse_config(fh.read())


@dataclass
class LossRecord:
    sup: float
    ppa: float
    sft: float
    bns: float
    cda: float
    total: float


@dataclass
class StepLosses:
    """Live loss tensors of one step, before any optimiser update."""

    sup: Tensor
    ppa: Tensor
    sft: Tensor
    bns: Tensor
    cda: Tensor
    total: Tensor
    tau_pf: ppam.PrototypeBank
    attention: Optional[tuple] = None

    def record(self) -> LossRecord:
        return LossRecord(*(float(getattr(self, n).data) for n in LOSS_NAMES + ("total",)))


def _zero() -> Tensor:
    return Tensor(np.zeros((), np.float32))


def _checked(name: str, fn):
    try:
        value = fn()
    except EvaluationError as exc:
        raise EvaluationError(f"loss term '{name}' became non-finite: {exc}") from exc
    if not np.isfinite(value.data).all():
        raise EvaluationError(f"loss term '{name}' became non-finite")
    return value


def loss_sup(P_target: Tensor, ffp_preds) -> Tensor:
    """Cross-entropy of target logits against the argmax of stitched slab logits.

    ``P_target`` is K×H×W (or N×K×H×W); ``ffp_preds`` are the slab logits in
    slab order.  The pseudo-label is a constant.
    """
    stitched = stitch_ffp([p.data if isinstance(p, Tensor) else np.asarray(p) for p in ffp_preds])
    if stitched.shape != P_target.shape:
        raise DimensionError(f"stitched predictions {stitched.shape} vs target {P_target.shape}")
    labels = stitched.argmax(axis=-3)
    logits = P_target if P_target.ndim == 4 else P_target.reshape((1,) + P_target.shape)
    return T.cross_entropy(logits, labels.reshape((logits.shape[0],) + labels.shape[-2:]))


def _image_banks(P: Tensor, f: Tensor) -> list:
    return [ppam.extract_prototypes(P[i], f[i]) for i in range(P.shape[0])]


def compute_losses(
    source: SegModel,
    target: SegModel,
    erp_batch: np.ndarray,
    tau_g: ppam.PrototypeBank,
    stats: BnStats,
    cfg: AdaptConfig,
    keep_attention: bool = False,
) -> StepLosses:
    """Forward passes and all loss terms for one batch (no parameter update)."""
    layout = get_layout(cfg.layout, (cfg.patch_size, cfg.patch_size))
    b = erp_batch.shape[0]
    srcs = set(cfg.proto_sources.split(","))

    # tangent patches through the source model (constants)
    tp_banks = []
    if "tp" in srcs:
        with T.no_grad():
            patches = np.concatenate([project_tp(img, layout).data for img in erp_batch])
            P_tp, f_tp = forward(source, Tensor(patches), train_mode=False)
            n_tp = len(layout.centers)
            per_erp = _image_banks(P_tp, f_tp)
            tp_banks = [ppam.aggregate(per_erp[i * n_tp : (i + 1) * n_tp]) for i in range(b)]

    # fixed-FoV slabs through the source model (live for the fine-tuning loss)
    slabs = ffp_split(erp_batch, cfg.ffp_fov)
    n_slab = len(slabs)
    live = cfg.use_sft and T.is_grad_enabled()
    with T.no_grad() if not live else contextlib.nullcontext():
        P_ff, f_ff, pre_ff = forward_with_bn_input(source, Tensor(np.concatenate(slabs)), train_mode=False)
    slab_index = [[k * b + i for k in range(n_slab)] for i in range(b)]
    ffp_banks = [[ppam.extract_prototypes(P_ff[j], f_ff[j]) for j in idx] for idx in slab_index]
    if cfg.use_sft:
        sft = _checked("sft", lambda: _mean([ppam.loss_sft(banks) for banks in ffp_banks]))
    else:
        sft = _zero()
    ff_banks = [ppam.aggregate([bk.detach() for bk in banks]) for banks in ffp_banks]

    P_ff_c, f_ff_c = P_ff.data, f_ff.data
    rebuilt = np.stack([stitch_ffp([f_ff_c[j] for j in idx]) for idx in slab_index])
    if cfg.bns_features == "bn_input":
        rebuilt_bns = np.stack([stitch_ffp([pre_ff.data[j] for j in idx]) for idx in slab_index])
    else:
        rebuilt_bns = rebuilt
    if cfg.sup_source == "erp":
        with T.no_grad():
            P_erp, _ = forward(source, Tensor(erp_batch), train_mode=False)
        pseudo = P_erp.data.argmax(axis=1)
    else:
        pseudo = np.stack([stitch_ffp([P_ff_c[j] for j in idx]) for idx in slab_index]).argmax(axis=1)

    parts = []
    if tp_banks:
        parts.append(ppam.aggregate(tp_banks))
    if "ffp" in srcs:
        parts.append(ppam.aggregate(ff_banks))
    tau_pf = parts[0] if len(parts) == 1 else ppam.fuse(*parts)

    # target model on the panoramas
    P, f, pre = forward_with_bn_input(target, Tensor(erp_batch), train_mode=cfg.target_bn == "train")

    def maybe(enabled, weight):
        if not enabled:
            return None
        return contextlib.nullcontext() if weight != 0 else T.no_grad()

    sup = _checked("sup", lambda: T.cross_entropy(P, pseudo)) if cfg.use_sup else _zero()

    ppa = _zero()
    ctx = maybe(cfg.use_ppa, cfg.lam)
    if ctx is not None and not tau_g.is_empty():
        with ctx:
            tau_t = ppam.aggregate(_image_banks(P, f))
            ppa = _checked("ppa", lambda: ppam.loss_ppa(tau_g, tau_t))

    F_prime = Tensor(rebuilt)
    if cfg.use_bns:
        F_bns, F_bns_prime = (pre, Tensor(rebuilt_bns)) if cfg.bns_features == "bn_input" else (f, F_prime)
        bns = _checked("bns", lambda: cdam.loss_bns(F_bns, F_bns_prime, stats))
    else:
        bns = _zero()

    cda, attention = _zero(), None
    ctx = maybe(cfg.use_cda, cfg.gamma)
    if ctx is not None:
        with ctx:
            terms = []
            for i in range(b):
                loss_i, sp, ch = cdam.cross_dual_loss(f[i], F_prime[i])
                terms.append(loss_i)
                if keep_attention and i == 0:
                    attention = (sp, ch)
            cda = _checked("cda", lambda: _mean(terms))

    total = _checked("total", lambda: ppa * cfg.lam + cda * cfg.gamma + bns + sup)
    return StepLosses(sup, ppa, sft, bns, cda, total, tau_pf, attention)


def _mean(terms) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out / float(len(terms))


def adapt_step(source, target, erp_batch, tau_g, stats, cfg, opt_target: SGD, opt_source: SGD, keep_attention=False):
    """One synchronous update: target on the weighted objective, then source on the fine-tuning loss.

    Returns ``(LossRecord, tau_pf, losses)``.
    """
    source.zero_grad()
    target.zero_grad()
    losses = compute_losses(source, target, erp_batch, tau_g, stats, cfg, keep_attention)
    if losses.total.requires_grad:
        losses.total.backward()
        opt_target.step()
    if cfg.use_sft and losses.sft.requires_grad:
        losses.sft.backward()
        opt_source.step()
    return losses.record(), losses.tau_pf, losses


def evaluate(model: SegModel, images: np.ndarray, labels: np.ndarray, num_classes: Optional[int] = None):
    cm = ConfusionMatrix(num_classes or model.num_classes)
    cm.accumulate(predict_labels(model, images), labels)
    return cm


@dataclass
class AdaptResult:
    target: SegModel
    source: SegModel
    tau_g: ppam.PrototypeBank
    rows: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def adapt(
    cfg: AdaptConfig,
    source: SegModel,
    stats: BnStats,
    target_images: np.ndarray,
    eval_images: Optional[np.ndarray] = None,
    eval_labels: Optional[np.ndarray] = None,
    attention_dir: Optional[str] = None,
) -> AdaptResult:
    """Run ``cfg.epochs`` epochs of adaptation; the input model is not modified."""
    if len(target_images) == 0:
        raise ConfigError("no target panoramas to adapt on")
    source = source.clone()
    target = source.clone()
    opt_t = SGD(target.parameters(), cfg.lr_target, cfg.momentum, cfg.max_grad_norm)
    opt_s = SGD(source.parameters(), cfg.lr_source, cfg.momentum)
    tau_g = ppam.PrototypeBank.empty(source.num_classes, source.feat_channels)
    rng = np.random.default_rng(cfg.seed)
    result = AdaptResult(target, source, tau_g)

    for epoch in range(1, cfg.epochs + 1):
        acc = ppam.BankAccumulator(source.num_classes, source.feat_channels)
        order = rng.permutation(len(target_images))
        sums = dict.fromkeys(LOSS_NAMES + ("total",), 0.0)
        n_steps = 0
        last = None
        for i in range(0, len(order), cfg.batch_size):
            batch = target_images[np.sort(order[i : i + cfg.batch_size])]
            rec, tau_pf, last = adapt_step(
                source, target, batch, tau_g, stats, cfg, opt_t, opt_s, keep_attention=attention_dir is not None
            )
            acc.add(tau_pf)
            result.steps.append(rec)
            for k in sums:
                sums[k] += getattr(rec, k)
            n_steps += 1
        tau_g = ppam.update_global(tau_g, acc.mean())
        row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        if eval_images is not None and eval_labels is not None:
            row["miou"] = miou(evaluate(target, eval_images, eval_labels))[1]
        else:
            row["miou"] = math.nan
        result.rows.append(row)
        logger.info("epoch %d: %s", epoch, ", ".join(f"{k}={row[k]:.4f}" for k in CSV_COLUMNS[1:]))
        if attention_dir is not None and last is not None and last.attention is not None:
            _dump_attention(attention_dir, epoch, last.attention)

    result.tau_g = tau_g
    return result


def _dump_attention(directory, epoch, attention) -> None:
    from .imageio import write_gray

    os.makedirs(directory, exist_ok=True)
    sp, ch = attention
    for name, m in (("sp", sp.M), ("sp_prime", sp.M_prime), ("ch", ch.M), ("ch_prime", ch.M_prime)):
        write_gray(os.path.join(directory, f"epoch{epoch:03d}_{name}.png"), cdam.attention_to_image(m))


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else repr(float(v))


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in CSV_COLUMNS])
