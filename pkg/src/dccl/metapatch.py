"""On-device personalization: patches generated from a shared basis and a
per-device code, with only the code trained on local data."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import recmodel as rm
from . import tensor as T
from .datahub import InteractionLog, Rows, make_batch, training_rows
from .recmodel import ALL_ON, BackboneConfig, GeneratedPatch, PatchGate
from .tensor import AdamState, Tensor

log = logging.getLogger(__name__)

CODE_NAME = "theta_hat"


@dataclass
class LocalTrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    n_neg: int = 4
    max_hist: int = 50

    def __post_init__(self):
        if self.lr < 0 or min(self.batch_size, self.epochs) < 1 or self.n_neg < 0:
            raise ValueError(f"invalid local training config {self}")


@dataclass
class DeviceState:
    device: int
    code: np.ndarray
    buffer: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    adam: AdamState | None = None
    steps: int = 0
    trained: bool = False


@dataclass
class PersonalizeResult:
    device: int
    code: np.ndarray
    status: str            # "ok" | "empty" | "nan"
    final_loss: float      # mean batch loss over the last epoch
    losses: list           # per-step mean batch loss
    steps: int


# ---------------------------------------------------------------- basis

def init_basis(cfg: BackboneConfig, k_hat: int, rng: np.random.Generator, scale: float = 1e-3) -> dict[str, np.ndarray]:
    sizes, total = rm.patch_dims(cfg)
    if k_hat < 1:
        raise ValueError("code length must be >= 1")
    if k_hat >= total:
        log.warning("code length %d is not smaller than total patch size %d", k_hat, total)
    return {s: rng.normal(0.0, scale, size=(k, k_hat)) for s, k in sizes.items()}


def code_length(basis: dict[str, np.ndarray]) -> int:
    return next(iter(basis.values())).shape[1]


def generate_patches(cfg: BackboneConfig, basis: dict[str, np.ndarray], code: np.ndarray) -> dict[str, GeneratedPatch]:
    """theta_l = Theta_l @ code for every junction."""
    code = np.asarray(code, dtype=np.float64)
    out = {}
    for site in rm.patch_sites(cfg):
        B = basis[site.site]
        if B.shape != (site.size, code.shape[0]) or code.ndim != 1:
            raise T.ShapeError(f"basis {site.site} {B.shape} incompatible with code {code.shape}")
        out[site.site] = GeneratedPatch(site, B @ code)
    return out


def patch_tensors(cfg: BackboneConfig, basis: dict[str, Tensor], codes: Tensor, gate: PatchGate = ALL_ON) -> dict[str, Tensor]:
    """Tape version: codes (G, K̂) -> {site: (G, K_l)} for the gated-on sites."""
    return {s.site: T.matmul(codes, T.transpose(basis[s.site]))
            for s in rm.patch_sites(cfg) if gate.on(s.site)}


# ---------------------------------------------------------------- local training

def device_rng(seed: int, device: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_idx, device, 0xDE71CE]))


def _plan_device(lg: InteractionLog, dev: DeviceState, config: LocalTrainConfig, rng) -> list[Rows]:
    """Per-step row blocks for all epochs, drawn from the device's own RNG."""
    blocks = []
    for _ in range(config.epochs):
        rows = training_rows(lg, dev.buffer, config.n_neg, rng)
        for a in range(0, len(rows), config.batch_size):
            blocks.append(rows.take(slice(a, a + config.batch_size)))
    return blocks


def personalize_cohort(cfg: BackboneConfig, devices: list[DeviceState], backbone: dict[str, np.ndarray],
                       basis: dict[str, np.ndarray], lg: InteractionLog, config: LocalTrainConfig,
                       gate: PatchGate = ALL_ON, seed: int = 0, round_idx: int = 0,
                       chunk: int = 256) -> list[PersonalizeResult]:
    """Train each device's code on its own buffer with its own Adam state.

    Devices never share rows, losses or optimizer state; advancing them in
    lockstep only batches the arithmetic.  Backbone and basis are read-only.
    """
    G = config.batch_size
    n = len(devices)
    codes = np.stack([np.array(d.code, dtype=np.float64) for d in devices]) if n else np.zeros((0, 1))
    start = codes.copy()
    plans, status = [], ["ok"] * n
    for i, d in enumerate(devices):
        if len(d.buffer) == 0:
            status[i] = "empty"
            plans.append([])
        else:
            plans.append(_plan_device(lg, d, config, device_rng(seed, d.device, round_idx)))
    n_empty = status.count("empty")
    if n_empty:
        log.warning("%d of %d devices have empty buffers; skipped", n_empty, n)
    m = np.zeros_like(codes)
    v = np.zeros_like(codes)
    t = np.zeros(n, dtype=np.int64)
    losses: list[list] = [[] for _ in range(n)]
    b1, b2, eps = 0.9, 0.999, 1e-8

    frozen = rm.as_tensors(backbone, trainable=False)
    basis_t = rm.as_tensors(basis, trainable=False)
    n_steps = max((len(p) for p in plans), default=0)
    for s in range(n_steps):
        active = [i for i in range(n) if s < len(plans[i]) and status[i] == "ok"]
        for c0 in range(0, len(active), chunk):
            ids = active[c0:c0 + chunk]
            A = len(ids)
            users, items, anchors, labels, weight = [], [], [], [], np.zeros((A, G))
            for r, i in enumerate(ids):
                blk = plans[i][s]
                k = len(blk)
                pad = np.r_[np.arange(k), np.zeros(G - k, dtype=np.int64)]
                users.append(blk.user[pad])
                items.append(blk.item[pad])
                anchors.append(blk.anchor[pad])
                labels.append(blk.label[pad])
                weight[r, :k] = 1.0 / k
            batch = make_batch(lg, np.concatenate(users), np.concatenate(items), np.concatenate(anchors),
                               np.concatenate(labels), config.max_hist)
            code_t = Tensor(codes[ids], requires_grad=True, name=CODE_NAME)
            patches = patch_tensors(cfg, basis_t, code_t, gate)
            logits = rm.forward_logits(cfg, frozen, batch, patches, gate)
            xent = T.sigmoid_xent(logits, batch.label)
            loss = T.sum_(T.mul(xent, Tensor(weight.ravel())))
            grads = T.backward(loss)
            per_dev = (xent.data.reshape(A, G) * weight).sum(axis=1)
            g = grads.get(CODE_NAME, np.zeros((A, codes.shape[1])))
            ok = np.isfinite(per_dev) & np.all(np.isfinite(g), axis=1)
            for r, i in enumerate(ids):
                losses[i].append(float(per_dev[r]))
                if not ok[r]:
                    status[i] = "nan"
                    codes[i] = start[i]
                    log.warning("device %d: non-finite loss at step %d; code reverted", devices[i].device, s)
            idx = np.array([i for r, i in enumerate(ids) if ok[r]], dtype=np.int64)
            if len(idx) == 0:
                continue
            g = g[ok]
            t[idx] += 1
            c1 = (1.0 - b1 ** t[idx])[:, None]
            c2 = (1.0 - b2 ** t[idx])[:, None]
            m[idx] = b1 * m[idx] + (1.0 - b1) * g
            v[idx] = b2 * v[idx] + (1.0 - b2) * g * g
            codes[idx] -= config.lr * (m[idx] / c1) / (np.sqrt(v[idx] / c2) + eps)

    results = []
    for i, d in enumerate(devices):
        per_epoch = max(1, len(plans[i]) // config.epochs) if plans[i] else 1
        last = losses[i][-per_epoch:] if status[i] == "ok" else losses[i]
        final = float(np.mean(last)) if last else float("nan")
        results.append(PersonalizeResult(d.device, codes[i].copy(), status[i], final, losses[i], int(t[i])))
    return results


def personalize(cfg: BackboneConfig, device: DeviceState, backbone: dict[str, np.ndarray],
                basis: dict[str, np.ndarray], lg: InteractionLog, config: LocalTrainConfig,
                gate: PatchGate = ALL_ON, seed: int = 0, round_idx: int = 0) -> PersonalizeResult:
    """Adam on the device code only, pointwise cross-entropy of the patched model."""
    res = personalize_cohort(cfg, [device], backbone, basis, lg, config, gate, seed, round_idx)[0]
    if res.status != "empty":
        device.code = res.code.copy()
        device.steps += res.steps
        device.trained = True
    return res


def local_loss(cfg: BackboneConfig, backbone: dict[str, np.ndarray], basis: dict[str, np.ndarray],
               code: np.ndarray, lg: InteractionLog, rows: Rows, gate: PatchGate = ALL_ON,
               max_hist: int = 50) -> float:
    """Mean cross-entropy of the patched model on fixed rows."""
    batch = make_batch(lg, rows.user, rows.item, rows.anchor, rows.label, max_hist)
    flat = {k: v.theta[None, :] for k, v in generate_patches(cfg, basis, code).items()}
    with T.no_grad():
        logits = rm.forward_logits(cfg, rm.as_tensors(backbone, False), batch,
                                   {k: Tensor(v) for k, v in flat.items()}, gate)
        return float(T.mean(T.sigmoid_xent(logits, batch.label)).data)


# ---------------------------------------------------------------- recycle table

def export_patch_row(device: DeviceState) -> tuple[int, np.ndarray]:
    return int(device.device), np.array(device.code, dtype=np.float64)


def write_recycle_table(path, rows: list[tuple[int, np.ndarray]], extra_cols: dict | None = None):
    """CSV ``device_id,theta_0,...``; floats written with 17 significant digits
    so reading back is exact.  ``extra_cols`` maps a column name (inserted after
    ``device_id``) to per-row values."""
    if not rows:
        k = 0
    else:
        k = len(rows[0][1])
    extra_cols = extra_cols or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device_id", *extra_cols, *[f"theta_{i}" for i in range(k)]])
        for r, (dev, vec) in enumerate(rows):
            if len(vec) != k:
                raise ValueError("recycle rows have unequal code lengths")
            w.writerow([dev, *[col[r] for col in extra_cols.values()], *[f"{x:.17g}" for x in vec]])


def read_recycle_table(path) -> dict[int, np.ndarray]:
    out = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[0] != "device_id":
            raise ValueError(f"{path}: not a recycle table")
        cols = [i for i, h in enumerate(header) if h.startswith("theta_")]
        for row in r:
            out[int(row[0])] = np.array([float(row[i]) for i in cols], dtype=np.float64)
    return out


def codes_matrix(table: dict[int, np.ndarray], n_devices: int, k_hat: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense (n_devices, K̂) code matrix; devices absent from the table get 0.
    Also returns the boolean 'present' mask."""
    codes = np.zeros((n_devices, k_hat))
    present = np.zeros(n_devices, dtype=bool)
    for dev, vec in table.items():
        if 0 <= dev < n_devices:
            codes[dev] = vec
            present[dev] = True
    return codes, present

