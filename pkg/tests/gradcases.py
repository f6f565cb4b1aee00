"""Finite-difference cases shared by the tensor tests and the acceptance run.

Each builder takes a seed and returns ``(loss_fn, params)`` for
:func:`dccl.tensor.grad_check`.
"""
from __future__ import annotations

import numpy as np

from dccl import datahub as dh
from dccl import metapatch as mp
from dccl import momodistill as md
from dccl import recmodel as rm
from dccl import tensor as T
from dccl.tensor import Tensor

TINY = rm.BackboneConfig(n_users=3, n_items=6, n_cats=2, item_dim=2, user_dim=2, cat_dim=2, att_dim=3,
                         tower=(4, 3), pre_out=3, bottlenecks=(2, 2, 2), max_hist=4)


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalar loss with a random upstream gradient."""
    if out.data.ndim == 0:
        return out
    return T.sum_(T.mul(out, Tensor(rng.normal(size=out.shape))))


def _dims(rng, n=2, lo=1, hi=5):
    return [int(d) for d in rng.integers(lo, hi, size=n)]


def _away_from_zero(rng, shape, lo=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.5, size=shape)


def op_case(kind: str, seed: int):
    rng = np.random.default_rng([seed, len(kind)])
    m, n = _dims(rng)
    kw: dict = {}
    if kind == "matmul":
        k = int(rng.integers(1, 5))
        params = {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))}
    elif kind in ("add", "sub", "elementwise-mul"):
        params = {"a": rng.normal(size=(m, n)), "b": rng.normal(size=(m, n))}
    elif kind == "bias-add":
        params = {"a": rng.normal(size=(m, n)), "b": rng.normal(size=(n,))}
    elif kind == "concat":
        params = {"a": rng.normal(size=(m, n)), "b": rng.normal(size=(m, int(rng.integers(1, 4))))}
    elif kind in ("relu",):
        params = {"a": _away_from_zero(rng, (m, n))}
    elif kind == "clip":
        x = _away_from_zero(rng, (m, n))
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.2, x)   # keep off the clip edges
        params = {"a": x}
        kw = {"lo": -0.5, "hi": 0.5}
    elif kind == "log":
        params = {"a": rng.uniform(0.3, 2.0, size=(m, n))}
    elif kind == "softmax":
        n = max(n, 2)
        mask = rng.random((m, n)) < 0.7
        mask[:, 0] = True
        params = {"a": rng.normal(size=(m, n))}
        kw = {"mask": mask}
    elif kind == "embedding-gather":
        params = {"a": rng.normal(size=(m + 2, n))}
        kw = {"idx": rng.integers(0, m + 2, size=(3, 4))}
    elif kind == "scale":
        params = {"a": rng.normal(size=(m, n))}
        kw = {"c": float(rng.normal())}
    elif kind == "reshape":
        params = {"a": rng.normal(size=(m, n))}
        kw = {"shape": (n, m)}
    elif kind == "slice":
        n = max(n, 2)
        params = {"a": rng.normal(size=(m, n))}
        kw = {"start": 1, "stop": n}
    elif kind == "sigmoid-xent":
        params = {"a": rng.normal(scale=2.0, size=(m, n))}
        kw = {"target": rng.random((m, n))}
    else:   # unary ops and reductions
        params = {"a": rng.normal(size=(m, n))}

    def loss_fn(p):
        inputs = [p[k] for k in sorted(p)]
        return _weighted(T.forward_op(kind, inputs, **kw), rng_w())

    w_seed = int(rng.integers(1 << 30))

    def rng_w():
        return np.random.default_rng(w_seed)

    return loss_fn, params


# ---------------------------------------------------------------- composites

def toy_log(seed: int = 0, n_users: int = 3, n_items: int = 6, n_cats: int = 2, per_user: int = 5) -> dh.InteractionLog:
    rng = np.random.default_rng(seed)
    users = np.repeat(np.arange(n_users), per_user)
    items = np.concatenate([rng.choice(n_items, size=per_user, replace=False) for _ in range(n_users)])
    ts = np.tile(np.arange(per_user) * 10, n_users)
    return dh.InteractionLog(users, items, ts, np.arange(n_items) % n_cats,
                             np.arange(n_users), np.arange(n_items), n_cats)


def toy_batch(seed: int, cfg: rm.BackboneConfig = TINY) -> dh.Batch:
    lg = toy_log(seed, cfg.n_users, cfg.n_items, cfg.n_cats)
    rng = np.random.default_rng(seed + 7)
    anchors = rng.integers(0, len(lg), size=6)
    items = rng.integers(0, cfg.n_items, size=6)
    return dh.make_batch(lg, lg.user[anchors], items, anchors, (rng.random(6) < 0.5).astype(float), cfg.max_hist)


def patch_case(seed: int):
    rng = np.random.default_rng([seed, 101])
    site = rm.PatchSite("J1", 4, 2)
    G = int(rng.choice([1, 2, 4]))
    params = {"v": rng.normal(size=(4, 4)), "theta": rng.normal(scale=0.7, size=(G, site.size))}
    w = rng.normal(size=(4, 4))
    return (lambda p: T.sum_(T.mul(rm.apply_patch(p["v"], p["theta"], site), Tensor(w)))), params


def attention_case(seed: int):
    """The whole tiny backbone, attention block included."""
    rng = np.random.default_rng([seed, 102])
    params = rm.init_backbone(TINY, rng)
    params = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in params.items()}
    batch = toy_batch(seed)
    return (lambda p: T.mean(T.sigmoid_xent(rm.forward_logits(TINY, p, batch), batch.label))), params


def encoder_case(seed: int):
    rng = np.random.default_rng([seed, 103])
    k, d_u = 3, 2
    enc = {kk: rng.normal(size=v.shape) for kk, v in md.init_encoder(k, d_u, rng).items()}
    params = {**enc, "codes": rng.normal(size=(4, k))}
    u = rng.normal(size=(4, d_u))
    w = rng.normal(size=(4, k))

    def loss_fn(p):
        out = md.encode_t({kk: p[kk] for kk in md.ENC_KEYS}, p["codes"], Tensor(u))
        return T.sum_(T.mul(out, Tensor(w)))

    return loss_fn, params


def _frozen_backbone(seed: int):
    rng = np.random.default_rng([seed, 104])
    bb = rm.init_backbone(TINY, rng)
    return {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in bb.items()}, rng


def device_loss_case(seed: int):
    """Pointwise cross-entropy of the patched model w.r.t. the code (and basis)."""
    bb, rng = _frozen_backbone(seed)
    frozen = rm.as_tensors(bb, trainable=False)
    basis = mp.init_basis(TINY, 2, rng, scale=0.5)
    batch = toy_batch(seed)
    params = {"code": rng.normal(size=(1, 2)), **{f"basis_{s}": v for s, v in basis.items()}}

    def loss_fn(p):
        b = {s: p[f"basis_{s}"] for s in basis}
        patches = mp.patch_tensors(TINY, b, p["code"])
        return T.mean(T.sigmoid_xent(rm.forward_logits(TINY, frozen, batch, patches), batch.label))

    return loss_fn, params


def backbone_distill_case(seed: int, beta: float = 0.5):
    """Cross-entropy plus weighted KL to fixed teacher probabilities, w.r.t. the backbone."""
    bb, rng = _frozen_backbone(seed)
    batch = toy_batch(seed)
    teacher = rng.uniform(0.05, 0.95, size=len(batch))

    def loss_fn(p):
        z = rm.forward_logits(TINY, p, batch)
        return T.add(T.mean(T.sigmoid_xent(z, batch.label)), T.scale(T.mean(md.kl_to_logits(teacher, z)), beta))

    return loss_fn, bb


def basis_distill_case(seed: int, beta: float = 0.5):
    """Proxy objective w.r.t. basis and encoder, backbone fixed."""
    bb, rng = _frozen_backbone(seed)
    frozen = rm.as_tensors(bb, trainable=False)
    basis = mp.init_basis(TINY, 2, rng, scale=0.5)
    enc = {k: rng.normal(scale=0.5, size=v.shape) for k, v in md.init_encoder(2, 3, rng).items()}
    codes = rng.normal(size=(TINY.n_users, 2))
    profiles = rng.normal(size=(TINY.n_users, 3))
    batch = toy_batch(seed)
    teacher = rng.uniform(0.05, 0.95, size=len(batch))
    params = {**{f"basis_{s}": v for s, v in basis.items()}, **enc}

    def loss_fn(p):
        b = {s: p[f"basis_{s}"] for s in basis}
        e = {k: p[k] for k in md.ENC_KEYS}
        z = md.proxy_logits(TINY, frozen, b, e, codes, profiles, batch)
        return T.add(T.mean(T.sigmoid_xent(z, batch.label)), T.scale(T.mean(md.kl_to_logits(teacher, z)), beta))

    return loss_fn, params


COMPOSITES = {
    "patch-bottleneck": patch_case,
    "attention-block": attention_case,
    "encoder": encoder_case,
    "device-loss": device_loss_case,
    "backbone-distill-loss": backbone_distill_case,
    "basis-distill-loss": basis_distill_case,
}
