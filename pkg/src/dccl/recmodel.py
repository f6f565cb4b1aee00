"""DIN-style click model with bottleneck patches at three tower junctions.

Layout of the forward pass::

    item/cat embeddings -> target attention over history (Q,K,V)
    [user emb | candidate emb | attended history]
      -> fc1 (64, relu)  -> J1
      -> fc2 (32, relu)  -> J2
      -> fc3 (32, relu)  -> J3
      -> out (1) -> sigmoid

At an active junction the layer output ``v`` becomes ``v + h(v)`` with
``h(v) = up @ tanh(down @ v + b_mid) + b_out``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .datahub import Batch, Sample, collate
from .tensor import Tensor

SITES = ("J1", "J2", "J3")


@dataclass(frozen=True)
class BackboneConfig:
    n_users: int
    n_items: int
    n_cats: int
    item_dim: int = 8
    user_dim: int = 8
    cat_dim: int = 8
    att_dim: int = 32
    tower: tuple = (64, 32)
    pre_out: int = 32
    bottlenecks: tuple = (32, 16, 32)
    max_hist: int = 50

    def __post_init__(self):
        dims = (self.n_users, self.n_items, self.n_cats, self.item_dim, self.user_dim, self.cat_dim,
                self.att_dim, self.pre_out, self.max_hist, *self.tower, *self.bottlenecks)
        if min(dims) < 1:
            raise ValueError(f"all backbone dimensions must be >= 1: {self}")
        if len(self.tower) != 2 or len(self.bottlenecks) != 3:
            raise ValueError("tower needs 2 widths and bottlenecks 3 widths")

    @property
    def emb_dim(self) -> int:
        return self.item_dim + self.cat_dim

    @property
    def widths(self) -> tuple:
        return (self.tower[0], self.tower[1], self.pre_out)


@dataclass(frozen=True)
class PatchSite:
    """One junction.  Flat parameter layout, in order:
    down (w*b, row-major w x b), b_mid (b), up (b*w, row-major b x w), b_out (w)."""

    site: str
    width: int
    bottleneck: int

    @property
    def size(self) -> int:
        w, b = self.width, self.bottleneck
        return 2 * w * b + b + w

    def offsets(self) -> dict[str, tuple[int, int]]:
        w, b = self.width, self.bottleneck
        cuts = np.cumsum([0, w * b, b, b * w, w])
        names = ("down", "b_mid", "up", "b_out")
        return {n: (int(cuts[i]), int(cuts[i + 1])) for i, n in enumerate(names)}


def patch_sites(cfg: BackboneConfig) -> tuple[PatchSite, ...]:
    return tuple(PatchSite(s, w, b) for s, w, b in zip(SITES, cfg.widths, cfg.bottlenecks))


def patch_dims(cfg: BackboneConfig) -> tuple[dict[str, int], int]:
    sizes = {p.site: p.size for p in patch_sites(cfg)}
    return sizes, sum(sizes.values())


@dataclass
class GeneratedPatch:
    site: PatchSite
    theta: np.ndarray  # flat, length K_l

    def view(self, part: str) -> np.ndarray:
        a, b = self.site.offsets()[part]
        w, k = self.site.width, self.site.bottleneck
        shape = {"down": (w, k), "b_mid": (k,), "up": (k, w), "b_out": (w,)}[part]
        return self.theta[a:b].reshape(shape)

    @property
    def down(self):
        return self.view("down")

    @property
    def b_mid(self):
        return self.view("b_mid")

    @property
    def up(self):
        return self.view("up")

    @property
    def b_out(self):
        return self.view("b_out")

    @classmethod
    def from_parts(cls, site: PatchSite, down, b_mid, up, b_out) -> "GeneratedPatch":
        theta = np.concatenate([np.ravel(down), np.ravel(b_mid), np.ravel(up), np.ravel(b_out)]).astype(np.float64)
        if theta.size != site.size:
            raise T.ShapeError(f"patch {site.site}: parts give {theta.size} values, expected {site.size}")
        return cls(site, theta)


@dataclass(frozen=True)
class PatchGate:
    mask: tuple = (True, True, True)

    def __post_init__(self):
        if len(self.mask) != 3:
            raise ValueError(f"gate mask needs 3 entries, got {self.mask}")

    def on(self, site: str) -> bool:
        return bool(self.mask[SITES.index(site)])

    @classmethod
    def parse(cls, text: str) -> "PatchGate":
        bits = [c for c in str(text) if c in "01"]
        return cls(tuple(c == "1" for c in bits))

    def __str__(self):
        return "".join("1" if m else "0" for m in self.mask)


ALL_ON = PatchGate()
ALL_OFF = PatchGate((False, False, False))


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: BackboneConfig) -> dict[str, tuple]:
    e = cfg.emb_dim
    w1, w2, w3 = cfg.widths
    d_in = cfg.user_dim + e + cfg.att_dim
    return {
        "item_emb": (cfg.n_items, cfg.item_dim),
        "cat_emb": (cfg.n_cats, cfg.cat_dim),
        "user_emb": (cfg.n_users, cfg.user_dim),
        "att_q": (e, cfg.att_dim),
        "att_k": (e, cfg.att_dim),
        "att_v": (e, cfg.att_dim),
        "fc1_w": (d_in, w1), "fc1_b": (w1,),
        "fc2_w": (w1, w2), "fc2_b": (w2,),
        "fc3_w": (w2, w3), "fc3_b": (w3,),
        "out_w": (w3, 1), "out_b": (1,),
    }


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_emb"):
            params[name] = rng.normal(0.0, 0.05, size=shape)
        elif name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            params[name] = rng.normal(0.0, std, size=shape)
    return params


def check_params(cfg: BackboneConfig, params: dict[str, np.ndarray]):
    want = param_shapes(cfg)
    for k, shape in want.items():
        if k not in params:
            raise KeyError(f"backbone missing tensor {k!r}")
        if params[k].shape != shape:
            raise T.ShapeError(f"backbone tensor {k!r}: {params[k].shape} != {shape}")
        if not np.all(np.isfinite(params[k])):
            raise ValueError(f"backbone tensor {k!r} has non-finite values")


def as_tensors(arrays: dict[str, np.ndarray], trainable: bool, prefix: str = "") -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable, name=prefix + k) for k, v in arrays.items()}


# ---------------------------------------------------------------- forward

def apply_patch(v: Tensor, theta: Tensor, site: PatchSite) -> Tensor:
    """v + h(v) for a flat patch tensor ``theta`` of shape (G, K_l).

    The B rows of ``v`` are split into G contiguous groups of B/G rows and
    group g uses patch row g: G=1 shares one patch, G=B gives one per row.
    """
    w, b = site.width, site.bottleneck
    off = site.offsets()
    B, G = v.shape[0], theta.shape[0]
    if G == 0 or B % G:
        raise T.ShapeError(f"patch {site.site}: {G} patch rows do not divide batch of {B}")
    down = T.reshape(T.slice_last(theta, *off["down"]), (G, w, b))
    b_mid = T.reshape(T.slice_last(theta, *off["b_mid"]), (G, 1, b))
    up = T.reshape(T.slice_last(theta, *off["up"]), (G, b, w))
    b_out = T.reshape(T.slice_last(theta, *off["b_out"]), (G, 1, w))
    v3 = T.reshape(v, (G, B // G, w))
    hidden = T.tanh(T.add(T.matmul(v3, down), b_mid))
    h = T.add(T.matmul(hidden, up), b_out)
    return T.add(v, T.reshape(h, (B, w)))


def _validate_batch(cfg: BackboneConfig, batch: Batch):
    for name, arr, n in (("user", batch.user, cfg.n_users), ("item", batch.item, cfg.n_items),
                         ("category", batch.cat, cfg.n_cats), ("history item", batch.hist_item, cfg.n_items),
                         ("history category", batch.hist_cat, cfg.n_cats)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise IndexError(f"{name} index out of vocabulary (size {n})")


def forward_logits(cfg: BackboneConfig, params: dict[str, Tensor], batch: Batch,
                   patches: dict[str, Tensor] | None = None, gate: PatchGate = ALL_ON,
                   trace: dict | None = None) -> Tensor:
    """Logits of shape (B,).  ``patches`` maps site -> (G, K_l) tensor, G | B
    (see :func:`apply_patch`)."""
    _validate_batch(cfg, batch)
    B, L = batch.hist_item.shape
    e = cfg.emb_dim
    cand = T.concat([T.gather(params["item_emb"], batch.item), T.gather(params["cat_emb"], batch.cat)])
    hist = T.concat([T.gather(params["item_emb"], batch.hist_item), T.gather(params["cat_emb"], batch.hist_cat)])
    q = T.matmul(cand, params["att_q"])                                   # (B, A)
    k = T.matmul(T.reshape(hist, (B * L, e)), params["att_k"])            # (B*L, A)
    val = T.matmul(T.reshape(hist, (B * L, e)), params["att_v"])
    k = T.reshape(k, (B, L, cfg.att_dim))
    val = T.reshape(val, (B, L, cfg.att_dim))
    scores = T.matmul(k, T.reshape(q, (B, cfg.att_dim, 1)))                # (B, L, 1)
    scores = T.scale(T.reshape(scores, (B, L)), 1.0 / math.sqrt(cfg.att_dim))
    weights = T.softmax(scores, mask=batch.hist_mask)
    attended = T.reshape(T.matmul(T.reshape(weights, (B, 1, L)), val), (B, cfg.att_dim))
    z = T.concat([T.gather(params["user_emb"], batch.user), cand, attended])

    sites = patch_sites(cfg)
    for i, layer in enumerate(("fc1", "fc2", "fc3")):
        z = T.relu(T.bias_add(T.matmul(z, params[f"{layer}_w"]), params[f"{layer}_b"]))
        site = sites[i]
        if patches is not None and gate.on(site.site) and site.site in patches:
            theta = patches[site.site]
            if theta.data.ndim != 2 or theta.shape[1] != site.size:
                raise T.ShapeError(f"patch {site.site}: expected (G, {site.size}), got {theta.shape}")
            z = apply_patch(z, theta, site)
        if trace is not None:
            trace[site.site] = z.data
    logits = T.bias_add(T.matmul(z, params["out_w"]), params["out_b"])
    if trace is not None:
        trace["attention"] = weights.data
    return T.reshape(logits, (B,))


def predict(cfg: BackboneConfig, params: dict[str, np.ndarray], batch: Batch,
            patches: dict[str, np.ndarray] | None = None, gate: PatchGate = ALL_ON) -> np.ndarray:
    """Click probabilities, no tape."""
    with T.no_grad():
        pt = None if patches is None else {s: Tensor(np.atleast_2d(v)) for s, v in patches.items()}
        z = forward_logits(cfg, as_tensors(params, False), batch, pt, gate)
        return T._sigmoid(z.data)


def backbone_forward(cfg: BackboneConfig, params: dict[str, np.ndarray], sample: Sample | Batch) -> np.ndarray | float:
    batch = collate([sample]) if isinstance(sample, Sample) else sample
    p = predict(cfg, params, batch)
    return float(p[0]) if isinstance(sample, Sample) else p


def patched_forward(cfg: BackboneConfig, params: dict[str, np.ndarray], patches: dict[str, GeneratedPatch],
                    gate: PatchGate, sample: Sample | Batch) -> np.ndarray | float:
    batch = collate([sample]) if isinstance(sample, Sample) else sample
    flat = {}
    for site in patch_sites(cfg):
        if site.site in patches:
            gp = patches[site.site]
            if gp.theta.shape != (site.size,):
                raise T.ShapeError(f"patch {site.site}: {gp.theta.shape} != ({site.size},)")
            flat[site.site] = gp.theta
    p = predict(cfg, params, batch, flat, gate)
    return float(p[0]) if isinstance(sample, Sample) else p


# ---------------------------------------------------------------- checkpoints
#
# File layout (all header lines ASCII, '\n'-terminated):
#   DCCL-CKPT 1
#   count <n>
#   then n records in ascending name order:
#     tensor <name> <ndim> <d_1> ... <d_ndim>
#     <prod(d) float64 values, little-endian, row-major>

MAGIC = b"DCCL-CKPT 1\n"


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(f"count {len(tensors)}\n".encode())
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f8")
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        buf.write(f"tensor {name} {a.ndim} {' '.join(map(str, a.shape))}".rstrip().encode() + b"\n")
        buf.write(a.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    f = io.BytesIO(raw)
    if f.readline() != MAGIC:
        raise ValueError(f"{path}: not a DCCL checkpoint")
    head = f.readline().split()
    if len(head) != 2 or head[0] != b"count":
        raise ValueError(f"{path}: bad count line")
    out = {}
    for _ in range(int(head[1])):
        parts = f.readline().decode().split()
        if not parts or parts[0] != "tensor":
            raise ValueError(f"{path}: bad tensor header {parts}")
        name, nd = parts[1], int(parts[2])
        shape = tuple(int(x) for x in parts[3:3 + nd])
        n = int(np.prod(shape, dtype=np.int64))
        data = f.read(8 * n)
        if len(data) != 8 * n:
            raise ValueError(f"{path}: truncated tensor {name}")
        out[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def config_to_dict(cfg: BackboneConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}


def config_from_dict(d: dict) -> BackboneConfig:
    d = dict(d)
    for k in ("tower", "bottlenecks"):
        if k in d:
            d[k] = tuple(d[k])
    return BackboneConfig(**d)

