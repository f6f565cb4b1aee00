"""Cloud-side learning from data and from recycled device models."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import recmodel as rm
from . import tensor as T
from .datahub import InteractionLog, make_batch, training_rows
from .metapatch import patch_tensors
from .recmodel import ALL_ON, BackboneConfig, PatchGate
from .tensor import AdamState, Tensor

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7


class TrainingAborted(RuntimeError):
    def __init__(self, stage: str, epoch: int, step: int):
        super().__init__(f"{stage}: non-finite loss at epoch {epoch}, step {step}")
        self.stage, self.epoch, self.step = stage, epoch, step


@dataclass
class DistillConfig:
    beta: float = 0.01
    batch_size: int = 256
    epochs: int = 1
    lr: float = 1e-3
    n_neg: int = 4
    max_hist: int = 50

    def __post_init__(self):
        if self.beta < 0 or self.lr < 0 or min(self.batch_size, self.epochs) < 1:
            raise ValueError(f"invalid distillation config {self}")


# ---------------------------------------------------------------- KL

def kl_bernoulli(p, q, eps: float = CLAMP_EPS):
    """KL(Bern(p) || Bern(q)) with both arguments clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    q = np.clip(np.asarray(q, dtype=np.float64), eps, 1 - eps)
    out = p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))
    return float(out) if out.ndim == 0 else out


def _entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(p) + (1 - p) * np.log1p(-p))


def kl_to_logits(p_teacher: np.ndarray, logits: Tensor, eps: float = CLAMP_EPS) -> Tensor:
    """Elementwise KL(p || sigmoid(logits)); the teacher side is a constant.

    Student probabilities are clamped to [eps, 1-eps] by clipping the logits,
    and KL is evaluated as cross-entropy minus teacher entropy.
    """
    p = np.clip(np.asarray(p_teacher, dtype=np.float64), eps, 1 - eps)
    bound = math.log((1 - eps) / eps)
    z = T.clip(logits, -bound, bound)
    return T.sub(T.sigmoid_xent(z, p), Tensor(_entropy(p)))


# ---------------------------------------------------------------- encoder

ENC_KEYS = ("enc_w1", "enc_w2", "enc_w3")


def init_encoder(k_hat: int, d_u: int, rng: np.random.Generator, scale: float = 0.1) -> dict[str, np.ndarray]:
    """W1 starts at zero so the proxy begins exactly at the cloud model."""
    return {"enc_w1": np.zeros((k_hat, k_hat)),
            "enc_w2": rng.normal(0.0, scale, size=(k_hat, k_hat)),
            "enc_w3": rng.normal(0.0, scale, size=(k_hat, d_u))}


def encode(enc: dict[str, np.ndarray], code: np.ndarray, u: np.ndarray) -> np.ndarray:
    """W1 tanh(W2 code + W3 u); works on single vectors or row batches."""
    code, u = np.asarray(code, dtype=np.float64), np.asarray(u, dtype=np.float64)
    k = enc["enc_w2"].shape[1]
    if code.shape[-1] != k or u.shape[-1] != enc["enc_w3"].shape[1]:
        raise T.ShapeError(f"encode: code {code.shape} / profile {u.shape} vs encoder {k}x{enc['enc_w3'].shape[1]}")
    return np.tanh(code @ enc["enc_w2"].T + u @ enc["enc_w3"].T) @ enc["enc_w1"].T


def encode_t(enc: dict[str, Tensor], codes: Tensor, u: Tensor) -> Tensor:
    pre = T.add(T.matmul(codes, T.transpose(enc["enc_w2"])), T.matmul(u, T.transpose(enc["enc_w3"])))
    return T.matmul(T.tanh(pre), T.transpose(enc["enc_w1"]))


# ---------------------------------------------------------------- teachers

@dataclass
class TeacherBundle:
    """Frozen last-round cloud state plus the recycle table as a code matrix."""

    backbone: dict
    basis: dict
    codes: np.ndarray        # (n_devices, K̂)
    present: np.ndarray      # (n_devices,) bool: device uploaded a row
    gate: PatchGate = ALL_ON
    fallbacks: int = 0
    _frozen: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.backbone = {k: np.array(v, copy=True) for k, v in self.backbone.items()}
        self.basis = {k: np.array(v, copy=True) for k, v in self.basis.items()}
        self.codes = np.array(self.codes, copy=True)
        for a in (*self.backbone.values(), *self.basis.values(), self.codes):
            a.setflags(write=False)
        self._frozen = {"backbone": rm.as_tensors(self.backbone, False), "basis": rm.as_tensors(self.basis, False)}

    def probs(self, cfg: BackboneConfig, batch) -> np.ndarray:
        """Personalized-model probabilities for each row's device; no tape."""
        self.fallbacks += int((~self.present[batch.user]).sum())
        with T.no_grad():
            codes = Tensor(self.codes[batch.user])
            patches = patch_tensors(cfg, self._frozen["basis"], codes, self.gate)
            z = rm.forward_logits(cfg, self._frozen["backbone"], batch, patches, self.gate)
        return T._sigmoid(z.data)


# ---------------------------------------------------------------- training loop

@dataclass
class EpochTrace:
    epoch: int
    ce: float
    kl: float
    total: float


def _train(stage: str, arrays: dict[str, np.ndarray], lg: InteractionLog, positives: np.ndarray,
           config: DistillConfig, rng: np.random.Generator,
           objective: Callable[[dict[str, Tensor], object], tuple[Tensor, Tensor | None]]) -> list[EpochTrace]:
    """Adam over ``arrays`` (updated in place) on shuffled positives + sampled negatives."""
    if len(positives) == 0:
        raise ValueError(f"{stage}: no training data")
    state = AdamState(lr=config.lr)
    traces = []
    for ep in range(config.epochs):
        rows = training_rows(lg, positives, config.n_neg, rng)
        sums = np.zeros(3)
        n_batches = 0
        for step, a in enumerate(range(0, len(rows), config.batch_size)):
            r = rows.take(slice(a, a + config.batch_size))
            batch = make_batch(lg, r.user, r.item, r.anchor, r.label, config.max_hist)
            leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
            ce, kl = objective(leaves, batch)
            total = ce if kl is None else T.add(ce, T.scale(kl, config.beta))
            if not np.isfinite(total.data):
                raise TrainingAborted(stage, ep, step)
            grads = T.backward(total)
            T.adam_step(arrays, grads, state)
            sums += (float(ce.data), 0.0 if kl is None else float(kl.data), float(total.data))
            n_batches += 1
        sums /= n_batches
        traces.append(EpochTrace(ep, *sums))
        log.debug("%s epoch %d: ce=%.5f kl=%.5f total=%.5f", stage, ep, *sums)
    return traces


def write_loss_trace(path, traces: list[EpochTrace], stage: str | None = None, append: bool = False):
    """CSV ``epoch,ce,kl,total`` (plus a leading ``stage`` column when given)."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writerow((["stage"] if stage is not None else []) + ["epoch", "ce", "kl", "total"])
        for t in traces:
            w.writerow(([stage] if stage is not None else []) + [t.epoch, repr(t.ce), repr(t.kl), repr(t.total)])


# ---------------------------------------------------------------- stages

def incremental_train(cfg: BackboneConfig, backbone: dict[str, np.ndarray], lg: InteractionLog,
                      positives: np.ndarray, config: DistillConfig, rng: np.random.Generator):
    """Model-over-data: cross-entropy only.  Returns (new backbone, traces)."""
    params = {k: v.copy() for k, v in backbone.items()}

    def objective(p, batch):
        logits = rm.forward_logits(cfg, p, batch)
        return T.mean(T.sigmoid_xent(logits, batch.label)), None

    return params, _train("incremental", params, lg, positives, config, rng, objective)


def distill_backbone(cfg: BackboneConfig, teachers: TeacherBundle, lg: InteractionLog, positives: np.ndarray,
                     config: DistillConfig, rng: np.random.Generator):
    """Cross-entropy plus beta * KL(personalized teacher || student cloud model).

    The student starts from the teachers' snapshot backbone.
    """
    params = {k: v.copy() for k, v in teachers.backbone.items()}

    def objective(p, batch):
        target = teachers.probs(cfg, batch)
        logits = rm.forward_logits(cfg, p, batch)
        ce = T.mean(T.sigmoid_xent(logits, batch.label))
        kl = T.mean(kl_to_logits(target, logits))
        return ce, kl

    return params, _train("distill_backbone", params, lg, positives, config, rng, objective)


def proxy_logits(cfg: BackboneConfig, backbone: dict[str, Tensor], basis: dict[str, Tensor],
                 enc: dict[str, Tensor], codes: np.ndarray, profiles: np.ndarray, batch,
                 gate: PatchGate = ALL_ON, grouped: bool = False) -> Tensor:
    """Backbone patched with Theta @ U(code, u).

    ``codes``/``profiles`` are per row, or per group of rows when ``grouped``.
    """
    if grouped:
        c, u = codes, profiles
    else:
        c, u = codes[batch.user], profiles[batch.user]
    mapped = encode_t(enc, Tensor(c), Tensor(u))
    patches = patch_tensors(cfg, basis, mapped, gate)
    return rm.forward_logits(cfg, backbone, batch, patches, gate)


def distill_basis(cfg: BackboneConfig, basis: dict[str, np.ndarray], enc: dict[str, np.ndarray],
                  backbone: dict[str, np.ndarray], teachers: TeacherBundle, lg: InteractionLog,
                  positives: np.ndarray, profiles: np.ndarray, config: DistillConfig,
                  rng: np.random.Generator):
    """With the backbone fixed, fit (basis, encoder) so the proxy device model
    matches labels and the true device model.  Returns (basis, enc, traces)."""
    frozen = rm.as_tensors(backbone, trainable=False)
    params = {**{f"basis_{k}": v.copy() for k, v in basis.items()}, **{k: v.copy() for k, v in enc.items()}}
    sites = list(basis)

    def objective(p, batch):
        target = teachers.probs(cfg, batch)
        b = {s: p[f"basis_{s}"] for s in sites}
        e = {k: p[k] for k in ENC_KEYS}
        logits = proxy_logits(cfg, frozen, b, e, teachers.codes, profiles, batch, teachers.gate)
        ce = T.mean(T.sigmoid_xent(logits, batch.label))
        kl = T.mean(kl_to_logits(target, logits))
        return ce, kl

    traces = _train("distill_basis", params, lg, positives, config, rng, objective)
    return {s: params[f"basis_{s}"] for s in sites}, {k: params[k] for k in ENC_KEYS}, traces


def pretrain_basis(cfg: BackboneConfig, backbone: dict[str, np.ndarray], basis: dict[str, np.ndarray],
                   enc: dict[str, np.ndarray], lg: InteractionLog, positives: np.ndarray,
                   profiles: np.ndarray, config: DistillConfig, rng: np.random.Generator,
                   gate: PatchGate = ALL_ON):
    """Basis distillation with every device code at zero: the teacher is the
    pretrained cloud model itself."""
    k_hat = next(iter(basis.values())).shape[1]
    teachers = TeacherBundle(backbone, basis, np.zeros((lg.n_users, k_hat)),
                             np.ones(lg.n_users, dtype=bool), gate)
    return distill_basis(cfg, basis, enc, backbone, teachers, lg, positives, profiles, config, rng)
