"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .recmodel import PatchGate

MODES = ("baseline-incremental", "dccl-e-only", "dccl-full", "junction-ablation", "interval-study")
SOURCES = ("synthetic", "movielens", "dataset")


def _doc(text: str, default):
    return field(default=default, metadata={"doc": text})


@dataclass
class RunConfig:
    # data
    source: str = _doc("synthetic | movielens (raw ::-delimited dir) | dataset (normalized dir)", "synthetic")
    data_dir: str = _doc("input directory for movielens/dataset sources", "")
    min_interactions: int = _doc("iterative user/item filter threshold (1 = off)", 1)
    synth_users: int = _doc("synthetic: number of users", 2000)
    synth_items: int = _doc("synthetic: number of items", 5000)
    synth_clusters: int = _doc("synthetic: number of item clusters", 20)
    synth_alpha: float = _doc("synthetic: activity power-law exponent", 1.2)
    synth_noise: float = _doc("synthetic: share of off-cluster events", 0.1)
    synth_drift: float = _doc("synthetic: share of users whose home cluster changes halfway", 0.0)
    synth_tail_niche: float = _doc("synthetic: how strongly low-activity users prefer unpopular items", 0.0)
    synth_min_events: int = _doc("synthetic: per-user event floor", 5)
    synth_mean_extra: float = _doc("synthetic: mean events above the floor", 15.0)
    # splits and rounds
    pretrain_frac: float = _doc("share of each user's pre-test events used for pretraining", 0.5)
    n_slices: int = _doc("chronological slices of the collaborative phase", 1)
    interval: int = _doc("slices consumed per round", 1)
    rounds: int = _doc("rounds to run (-1 = all available)", -1)
    # model
    k_hat: int = _doc("metapatch code length", 32)
    gate: str = _doc("patch gate per junction J1 J2 J3, e.g. 111", "111")
    basis_scale: float = _doc("std of the basis initialization", 1e-3)
    # cloud
    beta: float = _doc("weight of the distillation term", 0.01)
    cloud_lr: float = _doc("cloud Adam learning rate", 1e-3)
    cloud_batch: int = _doc("cloud batch size", 1024)
    pretrain_epochs: int = _doc("epochs of backbone pretraining", 3)
    basis_pretrain_epochs: int = _doc("epochs of basis pretraining", 1)
    cloud_epochs: int = _doc("epochs per cloud stage per round", 1)
    cloud_neg: int = _doc("cloud negatives per positive", 4)
    # device
    device_lr: float = _doc("device Adam learning rate", 1e-3)
    device_batch: int = _doc("device batch size", 32)
    device_epochs: int = _doc("device epochs per round", 1)
    device_neg: int = _doc("device negatives per positive", 4)
    code_handoff: str = _doc("carry | reset: start codes each round from the previous round or from zero", "carry")
    # misc
    max_hist: int = _doc("history length cap", 50)
    ndcg: str = _doc("standard | paper-literal", "standard")
    eval_chunk: int = _doc("users per evaluation chunk", 64)
    mode: str = _doc("one of " + " | ".join(MODES), "dccl-full")
    seed: int = _doc("run seed", 0)
    out_dir: str = _doc("output directory", "runs/default")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}; expected one of {SOURCES}")
        PatchGate.parse(self.gate)
        if self.n_slices < 1 or self.interval < 1 or self.n_slices % self.interval:
            raise ValueError(f"interval {self.interval} must divide n_slices {self.n_slices}")
        if self.rounds < -1:
            raise ValueError("rounds must be >= 0 or -1 for all")
        if self.code_handoff not in ("carry", "reset"):
            raise ValueError(f"code_handoff must be carry or reset, got {self.code_handoff!r}")
        if self.ndcg not in ("standard", "paper-literal"):
            raise ValueError(f"ndcg must be standard or paper-literal, got {self.ndcg!r}")
        if min(self.k_hat, self.cloud_batch, self.device_batch, self.eval_chunk, self.max_hist) < 1:
            raise ValueError("sizes must be positive")
        if min(self.pretrain_epochs, self.basis_pretrain_epochs, self.cloud_epochs, self.device_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.source != "synthetic" and not self.data_dir:
            raise ValueError(f"source {self.source} needs data_dir")

    @property
    def n_rounds(self) -> int:
        avail = self.n_slices // self.interval
        return avail if self.rounds < 0 else min(self.rounds, avail)

    @property
    def patch_gate(self) -> PatchGate:
        return PatchGate.parse(self.gate)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_CASTS = {"int": int, "float": float, "str": str}


def coerce(name: str, text: str):
    f = {f.name: f for f in fields(RunConfig)}.get(name)
    if f is None:
        raise KeyError(f"unknown config key {name!r}")
    return _CASTS[f.type if isinstance(f.type, str) else f.type.__name__](text)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Lines of ``key = value``; ``#`` starts a comment; blank lines ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            values[k] = coerce(k, v)
        except KeyError as e:
            raise ValueError(f"config line {lineno}: {e.args[0]}") from None
        except ValueError:
            raise ValueError(f"config line {lineno}: bad value {v!r} for {k}") from None
    return (base or RunConfig()).replace(**values)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        lines.append(f"# {f.metadata['doc']}")
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}" if isinstance(getattr(cfg, f.name), float)
                     else f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path):
    Path(path).write_text(dump_config(cfg))
