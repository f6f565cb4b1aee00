"""The device-cloud lifecycle: pretraining, alternating device and cloud
rounds, evaluation, persistence with resume, and experiment recipes."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import datahub as dh
from . import evalmetrics as em
from . import metapatch as mp
from . import momodistill as md
from . import recmodel as rm
from . import tensor as T
from .config import RunConfig, save_config
from .recmodel import ALL_OFF, BackboneConfig, PatchGate

log = logging.getLogger(__name__)

# RNG stream tags per stage; both cloud backbone stages share one tag so the
# baseline and distillation arms see identical batches.
TAG_INIT, TAG_PRETRAIN, TAG_BASIS_PRE, TAG_BACKBONE, TAG_BASIS = 0xA1, 0xA2, 0xA3, 0xA4, 0xA5

EXIT_CODES = {"data": 3, "pretrain_backbone": 4, "pretrain_basis": 5, "device": 6,
              "backbone": 7, "basis": 8, "eval": 9}


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.exit_code = EXIT_CODES.get(stage.split(":")[0].split("_r")[0], 1)


class StopRequested(Exception):
    """Raised when ``stop_after`` names the stage just persisted (simulated kill)."""


def stage_rng(seed: int, tag: int, round_idx: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, round_idx]))


# ---------------------------------------------------------------- data

@dataclass
class Prepared:
    lg: dh.InteractionLog
    profiles: np.ndarray
    splits: dh.Splits
    cfg: BackboneConfig
    partition: em.GroupPartition
    eval_anchor: np.ndarray
    eval_candidates: np.ndarray


def load_data(config: RunConfig):
    if config.source == "synthetic":
        spec = dh.SynthSpec(clusters=config.synth_clusters, users=config.synth_users, items=config.synth_items,
                            alpha=config.synth_alpha, noise=config.synth_noise, drift=config.synth_drift,
                            tail_niche=config.synth_tail_niche,
                            min_events=config.synth_min_events, mean_extra=config.synth_mean_extra, seed=config.seed)
        lg, profiles = dh.synth_generate(spec)
    elif config.source == "movielens":
        lg, profiles = dh.parse_movielens(config.data_dir)
    else:
        lg, profiles = dh.read_dataset(config.data_dir)
    if config.min_interactions > 1:
        report: dict = {}
        lg = dh.filter_min_interactions(lg, config.min_interactions, report)
        log.info("filter >= %d: %s", config.min_interactions, report)
    return lg, profiles


def prepare(config: RunConfig) -> Prepared:
    lg, profiles = load_data(config)
    splits = dh.build_splits(lg, dh.SplitPlan(config.pretrain_frac, config.n_slices), config.seed)
    cfg = BackboneConfig(lg.n_users, lg.n_items, lg.n_cats, max_hist=config.max_hist)
    ev = splits.eval
    counts = np.bincount(lg.user[np.concatenate([splits.pretrain, splits.dccl])], minlength=lg.n_users)
    partition = em.group_users({int(u): int(counts[u]) for u in ev.user})
    cands = np.concatenate([ev.truth[:, None], ev.negatives], axis=1)
    return Prepared(lg, dh.profile_matrix(lg, profiles), splits, cfg, partition, ev.event, cands)


# ---------------------------------------------------------------- scoring

def score_candidates(cfg: BackboneConfig, lg: dh.InteractionLog, backbone: dict, users: np.ndarray,
                     candidates: np.ndarray, anchors: np.ndarray, codes: np.ndarray | None = None,
                     basis: dict | None = None, gate: PatchGate = ALL_OFF, chunk: int = 64) -> np.ndarray:
    """Probabilities for each user's candidate row, history cut at the anchor.

    With ``codes`` (one row per user) each user is scored by its own patched
    model; otherwise by the shared backbone.
    """
    n, m = candidates.shape
    out = np.empty((n, m))
    frozen = rm.as_tensors(backbone, trainable=False)
    basis_t = rm.as_tensors(basis, trainable=False) if basis is not None else None
    patched = codes is not None and any(gate.mask)
    with T.no_grad():
        for a in range(0, n, chunk):
            sl = slice(a, min(n, a + chunk))
            k = sl.stop - sl.start
            batch = dh.make_batch(lg, np.repeat(users[sl], m), candidates[sl].ravel(),
                                  np.repeat(anchors[sl], m), None, cfg.max_hist)
            patches = mp.patch_tensors(cfg, basis_t, T.Tensor(codes[sl]), gate) if patched else None
            z = rm.forward_logits(cfg, frozen, batch, patches, gate if patched else ALL_OFF)
            out[sl] = T._sigmoid(z.data).reshape(k, m)
    return out


def evaluate_model(name: str, data: Prepared, backbone: dict, codes: np.ndarray | None = None,
                   basis: dict | None = None, gate: PatchGate = ALL_OFF, chunk: int = 64,
                   ndcg_form: str = "standard") -> em.EvalReport:
    ev = data.splits.eval
    user_codes = None if codes is None else codes[ev.user]
    scores = score_candidates(data.cfg, data.lg, backbone, ev.user, data.eval_candidates, data.eval_anchor,
                              user_codes, basis, gate, chunk)
    return em.report_from_scores(name, ev.user, scores, data.partition, ndcg_form)


def proxy_codes(enc: dict, codes: np.ndarray, profiles: np.ndarray) -> np.ndarray:
    """Codes the cloud-side proxy feeds to the basis: U(code, profile) per device."""
    return md.encode(enc, codes, profiles)


# ---------------------------------------------------------------- persisted state

@dataclass
class RoundReport:
    round: int
    devices_trained: int = 0
    devices_empty: int = 0
    devices_reverted: int = 0
    mean_local_loss: float = float("nan")
    teacher_fallbacks: int = 0
    cloud_losses: dict = field(default_factory=dict)     # stage -> list of epoch traces
    evals: dict = field(default_factory=dict)            # model name -> summary
    slices: list = field(default_factory=list)
    wall_time: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        return cls(**d)


class RunDir:
    """Layout of one run's output directory and its stage ledger."""

    def __init__(self, root):
        self.root = Path(root)
        self.ckpt = self.root / "checkpoints"
        self.stages = self.root / "stages"

    def make(self):
        self.ckpt.mkdir(parents=True, exist_ok=True)
        self.stages.mkdir(parents=True, exist_ok=True)

    def stage_file(self, stage: str) -> Path:
        return self.stages / f"{stage}.json"

    def done(self, stage: str) -> bool:
        return self.stage_file(stage).exists()

    def record(self, stage: str, payload: dict):
        tmp = self.stage_file(stage).with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True, indent=1))
        tmp.replace(self.stage_file(stage))

    def load(self, stage: str) -> dict:
        return json.loads(self.stage_file(stage).read_text())

    def save(self, name: str, tensors: dict):
        tmp = self.ckpt / f"{name}.tmp"
        rm.save_checkpoint(tmp, tensors)
        tmp.replace(self.ckpt / f"{name}.ckpt")

    def load_ckpt(self, name: str) -> dict:
        return rm.load_checkpoint(self.ckpt / f"{name}.ckpt")


def _split_cloud(bundle: dict) -> tuple[dict, dict]:
    basis = {k[len("basis_"):]: v for k, v in bundle.items() if k.startswith("basis_")}
    enc = {k: v for k, v in bundle.items() if k in md.ENC_KEYS}
    return basis, enc


def _join_cloud(basis: dict, enc: dict) -> dict:
    return {**{f"basis_{k}": v for k, v in basis.items()}, **enc}


def _trace_dicts(traces) -> list:
    return [asdict(t) for t in traces]


# ---------------------------------------------------------------- lifecycle

class Lifecycle:
    def __init__(self, config: RunConfig, data: Prepared | None = None, stop_after: str | None = None,
                 pretrain_cache: str | Path | None = None):
        self.config = config
        self.run = RunDir(config.out_dir)
        self.data = data
        self.stop_after = stop_after
        self.cache = Path(pretrain_cache) if pretrain_cache else None
        self.stage_order: list[str] = []
        self._stage_time = 0.0

    # -- helpers
    def _cloud_cfg(self, epochs: int) -> md.DistillConfig:
        c = self.config
        return md.DistillConfig(beta=c.beta, batch_size=c.cloud_batch, epochs=max(1, epochs), lr=c.cloud_lr,
                                n_neg=c.cloud_neg, max_hist=c.max_hist)

    def _device_cfg(self) -> mp.LocalTrainConfig:
        c = self.config
        return mp.LocalTrainConfig(lr=c.device_lr, batch_size=c.device_batch, epochs=max(1, c.device_epochs),
                                   n_neg=c.device_neg, max_hist=c.max_hist)

    def _eval(self, name, backbone, codes=None, basis=None, gate=ALL_OFF) -> em.EvalReport:
        c = self.config
        return evaluate_model(name, self.data, backbone, codes, basis, gate, c.eval_chunk, c.ndcg)

    def _finish_stage(self, stage: str, payload: dict):
        payload = {**payload, "wall_time": self._stage_time}
        self.run.record(stage, payload)
        self.stage_order.append(stage)
        self._stage_time = 0.0
        log.info("stage %s persisted", stage)
        if self.stop_after == stage:
            raise StopRequested(stage)

    def _run_stage(self, stage: str, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
            self._stage_time += time.perf_counter() - t0
            return out
        except (StopRequested, StageFailed):
            raise
        except Exception as e:   # noqa: BLE001 - any stage failure halts the run
            raise StageFailed(stage, e) from e

    def _cache_key(self) -> str:
        c = self.config
        keys = ("source", "data_dir", "min_interactions", "synth_users", "synth_items", "synth_clusters",
                "synth_alpha", "synth_noise", "synth_drift", "synth_tail_niche", "synth_min_events", "synth_mean_extra",
                "pretrain_frac", "n_slices", "k_hat", "gate", "basis_scale", "cloud_lr", "cloud_batch",
                "pretrain_epochs", "basis_pretrain_epochs", "cloud_neg", "max_hist", "seed", "beta")
        blob = json.dumps({k: getattr(c, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- pretraining
    def pretrain(self):
        c, d = self.config, self.data
        if not self.run.done("pretrain_backbone"):
            def go():
                cached = self.cache / self._cache_key() / "backbone_r0.ckpt" if self.cache else None
                if cached is not None and cached.exists():
                    bb = rm.load_checkpoint(cached)
                    traces = json.loads((cached.parent / "backbone_r0.json").read_text())
                else:
                    bb = rm.init_backbone(d.cfg, stage_rng(c.seed, TAG_INIT))
                    if c.pretrain_epochs > 0:
                        bb, tr = md.incremental_train(d.cfg, bb, d.lg, d.splits.pretrain,
                                                      self._cloud_cfg(c.pretrain_epochs), stage_rng(c.seed, TAG_PRETRAIN))
                        traces = _trace_dicts(tr)
                    else:
                        traces = []
                    if cached is not None:
                        cached.parent.mkdir(parents=True, exist_ok=True)
                        rm.save_checkpoint(cached, bb)
                        (cached.parent / "backbone_r0.json").write_text(json.dumps(traces))
                self.run.save("backbone_r0", bb)
                return traces
            traces = self._run_stage("pretrain_backbone", go)
            self._finish_stage("pretrain_backbone", {"losses": traces})
        if c.mode != "baseline-incremental" and not self.run.done("pretrain_basis"):
            def go():
                cached = self.cache / self._cache_key() / "basis_r0.ckpt" if self.cache else None
                if cached is not None and cached.exists():
                    bundle = rm.load_checkpoint(cached)
                    traces = json.loads((cached.parent / "basis_r0.json").read_text())
                else:
                    bb = self.run.load_ckpt("backbone_r0")
                    rng = stage_rng(c.seed, TAG_INIT, 1)
                    basis = mp.init_basis(d.cfg, c.k_hat, rng, c.basis_scale)
                    enc = md.init_encoder(c.k_hat, dh.PROFILE_DIM, rng)
                    traces = []
                    if c.basis_pretrain_epochs > 0:
                        basis, enc, tr = md.pretrain_basis(d.cfg, bb, basis, enc, d.lg, d.splits.pretrain, d.profiles,
                                                           self._cloud_cfg(c.basis_pretrain_epochs),
                                                           stage_rng(c.seed, TAG_BASIS_PRE), c.patch_gate)
                        traces = _trace_dicts(tr)
                    bundle = _join_cloud(basis, enc)
                    if cached is not None:
                        cached.parent.mkdir(parents=True, exist_ok=True)
                        rm.save_checkpoint(cached, bundle)
                        (cached.parent / "basis_r0.json").write_text(json.dumps(traces))
                self.run.save("basis_r0", bundle)
                return traces
            traces = self._run_stage("pretrain_basis", go)
            self._finish_stage("pretrain_basis", {"losses": traces})
        if not self.run.done("eval_r0"):
            def go():
                bb = self.run.load_ckpt("backbone_r0")
                return [self._eval("pretrained", bb).summary()]
            self._finish_stage("eval_r0", {"evals": self._run_stage("eval:r0", go)})

    # -- one round
    def _codes_before(self, t: int) -> np.ndarray:
        """Device codes entering round t under the handoff policy."""
        n, k = self.data.lg.n_users, self.config.k_hat
        codes = np.zeros((n, k))
        if self.config.code_handoff == "carry":
            for r in range(1, t):
                table = mp.read_recycle_table(self.run.root / f"recycle_round_{r}.csv")
                for dev, vec in table.items():
                    codes[dev] = vec
        return codes

    def _codes_after(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        codes = self._codes_before(t)
        table = mp.read_recycle_table(self.run.root / f"recycle_round_{t}.csv")
        present = np.zeros(len(codes), dtype=bool)
        for dev, vec in table.items():
            codes[dev] = vec
            present[dev] = True
        return codes, present

    def _ckpt_names(self, t: int) -> tuple[str, str]:
        return f"backbone_r{t}", f"basis_r{t}"

    def round(self, t: int, positives: np.ndarray):
        c, d = self.config, self.data
        gate = c.patch_gate
        prev_bb, prev_basis = self._ckpt_names(t - 1)
        bb_name, basis_name = self._ckpt_names(t)
        baseline = c.mode == "baseline-incremental"

        if baseline:
            if not self.run.done(f"backbone_r{t}"):
                def go():
                    bb, tr = md.incremental_train(d.cfg, self.run.load_ckpt(prev_bb), d.lg, positives,
                                                  self._cloud_cfg(c.cloud_epochs), stage_rng(c.seed, TAG_BACKBONE, t))
                    self.run.save(bb_name, bb)
                    return {"losses": _trace_dicts(tr),
                            "evals": [self._eval("din-incremental", bb).summary()]}
                self._finish_stage(f"backbone_r{t}", self._run_stage(f"backbone_r{t}", go))
            return

        # device phase: broadcast snapshots, personalize, upload codes
        if not self.run.done(f"device_r{t}"):
            def go():
                bb = self.run.load_ckpt(prev_bb)
                basis, _ = _split_cloud(self.run.load_ckpt(prev_basis))
                broadcast = T.tensor_hash({**bb, **_join_cloud(basis, {})})
                start = self._codes_before(t)
                users = d.lg.user[positives]
                order = np.argsort(users, kind="stable")
                bounds = np.searchsorted(users[order], np.arange(d.lg.n_users + 1))
                devices = [mp.DeviceState(u, start[u], np.sort(positives[order[bounds[u]:bounds[u + 1]]]))
                           for u in range(d.lg.n_users) if bounds[u + 1] > bounds[u]]
                res = mp.personalize_cohort(d.cfg, devices, bb, basis, d.lg, self._device_cfg(), gate,
                                            c.seed, t)
                rows = [(r.device, r.code) for r in res if r.status == "ok"]
                mp.write_recycle_table(self.run.root / f"recycle_round_{t}.csv", rows)
                codes, _ = self._codes_after(t)
                losses = [r.final_loss for r in res if r.status == "ok"]
                report = {"devices_trained": len(rows),
                          "devices_empty": d.lg.n_users - len(devices),
                          "devices_reverted": sum(r.status == "nan" for r in res),
                          "mean_local_loss": float(np.mean(losses)) if losses else float("nan"),
                          "broadcast_hash": broadcast,
                          "evals": [self._eval("dccl-e", bb, codes, basis, gate).summary()]}
                return report
            self._finish_stage(f"device_r{t}", self._run_stage(f"device_r{t}", go))
        if c.mode == "dccl-e-only":
            if not self.run.done(f"backbone_r{t}"):
                # cloud untouched: carry snapshots forward so the next round broadcasts them
                def go():
                    self.run.save(bb_name, self.run.load_ckpt(prev_bb))
                    self.run.save(basis_name, self.run.load_ckpt(prev_basis))
                    return {"losses": [], "evals": []}
                self._finish_stage(f"backbone_r{t}", self._run_stage(f"backbone_r{t}", go))
            return

        # cloud phase 1: backbone from data and from device models
        if not self.run.done(f"backbone_r{t}"):
            def go():
                codes, present = self._codes_after(t)
                basis, _ = _split_cloud(self.run.load_ckpt(prev_basis))
                teachers = md.TeacherBundle(self.run.load_ckpt(prev_bb), basis, codes * present[:, None], present, gate)
                bb, tr = md.distill_backbone(d.cfg, teachers, d.lg, positives, self._cloud_cfg(c.cloud_epochs),
                                             stage_rng(c.seed, TAG_BACKBONE, t))
                self.run.save(bb_name, bb)
                return {"losses": _trace_dicts(tr), "teacher_fallbacks": teachers.fallbacks,
                        "evals": [self._eval("cloud", bb).summary()]}
            self._finish_stage(f"backbone_r{t}", self._run_stage(f"backbone_r{t}", go))

        # cloud phase 2: basis and encoder with the new backbone fixed
        if not self.run.done(f"backbone_r{t}"):
            raise RuntimeError("basis distillation requested before backbone distillation")
        if not self.run.done(f"basis_r{t}"):
            def go():
                codes, present = self._codes_after(t)
                basis, enc = _split_cloud(self.run.load_ckpt(prev_basis))
                teachers = md.TeacherBundle(self.run.load_ckpt(prev_bb), basis, codes * present[:, None], present, gate)
                bb = self.run.load_ckpt(bb_name)
                new_basis, new_enc, tr = md.distill_basis(d.cfg, basis, enc, bb, teachers, d.lg, positives,
                                                          d.profiles, self._cloud_cfg(c.cloud_epochs),
                                                          stage_rng(c.seed, TAG_BASIS, t))
                self.run.save(basis_name, _join_cloud(new_basis, new_enc))
                proxy = proxy_codes(new_enc, codes * present[:, None], d.profiles)
                return {"losses": _trace_dicts(tr), "teacher_fallbacks": teachers.fallbacks,
                        "evals": [self._eval("dccl-m", bb, proxy, new_basis, gate).summary()]}
            self._finish_stage(f"basis_r{t}", self._run_stage(f"basis_r{t}", go))

    # -- driver
    def execute(self) -> list[RoundReport]:
        c = self.config
        self.run.make()
        save_config(c, self.run.root / "config.txt")
        if self.data is None:
            try:
                self.data = prepare(c)
            except Exception as e:   # noqa: BLE001
                raise StageFailed("data", e) from e
        self.write_manifest()
        self.pretrain()
        groups = self.data.splits.rounds(c.interval)
        for t in range(1, c.n_rounds + 1):
            t0 = time.perf_counter()
            self.round(t, groups[t - 1])
            log.info("round %d done in %.1fs", t, time.perf_counter() - t0)
        return self.write_outputs()

    def write_manifest(self):
        d = self.data
        man = {"data": d.lg.summary(), "pretrain_events": int(len(d.splits.pretrain)),
               "slice_events": [int(len(s)) for s in d.splits.slices],
               "slice_boundaries": [int(b) for b in d.splits.boundaries],
               "eval_cases": int(len(d.splits.eval)), "excluded_users": len(d.splits.excluded_users),
               "rounds": self.config.n_rounds, "seed": self.config.seed}
        (self.run.root / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")

    def stages_in_order(self) -> list[str]:
        c = self.config
        out = ["pretrain_backbone"]
        if c.mode != "baseline-incremental":
            out.append("pretrain_basis")
        out.append("eval_r0")
        for t in range(1, c.n_rounds + 1):
            if c.mode == "baseline-incremental":
                out.append(f"backbone_r{t}")
            elif c.mode == "dccl-e-only":
                out += [f"device_r{t}", f"backbone_r{t}"]
            else:
                out += [f"device_r{t}", f"backbone_r{t}", f"basis_r{t}"]
        return out

    def write_outputs(self) -> list[RoundReport]:
        """Rebuild ``metrics.csv``, ``loss_trace.csv`` and ``round_report.json``
        from the persisted stage records, so resumed runs write the same bytes."""
        c = self.config
        reports: dict[int, RoundReport] = {}
        metric_rows, loss_rows = [], []
        for stage in self.stages_in_order():
            rec = self.run.load(stage)
            t = 0 if stage.endswith("_r0") or stage.startswith("pretrain") else int(stage.rsplit("_r", 1)[1])
            rr = reports.setdefault(t, RoundReport(t))
            rr.wall_time += rec.get("wall_time", 0.0)
            if t and not rr.slices:
                rr.slices = list(range((t - 1) * c.interval, t * c.interval))
            kind = stage.split("_r")[0] if t else stage
            for tr in rec.get("losses", []):
                loss_rows.append([t, kind, tr["epoch"], repr(tr["ce"]), repr(tr["kl"]), repr(tr["total"])])
            if rec.get("losses"):
                rr.cloud_losses[kind] = rec["losses"]
            for ev in rec.get("evals", []):
                rr.evals[ev["name"]] = ev
                metric_rows += _summary_rows(t, ev)
            if kind == "device":
                rr.devices_trained = rec["devices_trained"]
                rr.devices_empty = rec["devices_empty"]
                rr.devices_reverted = rec["devices_reverted"]
                rr.mean_local_loss = rec["mean_local_loss"]
            if "teacher_fallbacks" in rec:
                rr.teacher_fallbacks = max(rr.teacher_fallbacks, rec["teacher_fallbacks"])
        with open(self.run.root / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "metric", "name", "K", "group", "value"])
            w.writerows(metric_rows)
        with open(self.run.root / "loss_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "stage", "epoch", "ce", "kl", "total"])
            w.writerows(loss_rows)
        out = [reports[t] for t in sorted(reports)]
        (self.run.root / "round_report.json").write_text(
            json.dumps([asdict(r) for r in out], indent=1, sort_keys=True) + "\n")
        return out


def _summary_rows(t: int, ev: dict) -> list:
    rows = [[t, "HitRate", ev["name"], k, "all", repr(v)] for k, v in ev["hit_rate"].items()]
    rows += [[t, "NDCG", ev["name"], k, "all", repr(v)] for k, v in ev["ndcg"].items()]
    rows.append([t, "macro-AUC", ev["name"], "", "all", repr(ev["macro_auc"])])
    rows += [[t, "macro-AUC", ev["name"], "", g, repr(v)] for g, v in ev["group_macro_auc"].items()]
    return rows


def run_lifecycle(config: RunConfig, data: Prepared | None = None, stop_after: str | None = None,
                  pretrain_cache=None) -> list[RoundReport]:
    """Run (or resume) a lifecycle; completed stages found under ``out_dir`` are reused."""
    return Lifecycle(config, data, stop_after, pretrain_cache).execute()


def load_reports(out_dir) -> list[RoundReport]:
    return [RoundReport.from_dict(d) for d in json.loads((Path(out_dir) / "round_report.json").read_text())]


def metric_value(report: RoundReport, name: str, metric: str = "hit_rate", k: int | str = 10,
                 group: int | None = None) -> float:
    ev = report.evals[name]
    if metric == "macro_auc":
        return ev["macro_auc"] if group is None else ev["group_macro_auc"][str(group)]
    return ev[metric][str(k)]


# ---------------------------------------------------------------- patch export

def export_metapatch_table(out_dir, path, data: Prepared | None = None, round_idx: int | None = None,
                           config: RunConfig | None = None):
    """Per-device codes of the latest (or given) round plus each device's
    dominant training category; same layout as the recycle table."""
    root = Path(out_dir)
    tables = sorted(root.glob("recycle_round_*.csv"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not tables:
        raise FileNotFoundError(f"{root}: no completed device round")
    if round_idx is not None:
        tables = [p for p in tables if int(p.stem.rsplit("_", 1)[1]) == round_idx]
        if not tables:
            raise FileNotFoundError(f"{root}: no recycle table for round {round_idx}")
    table = mp.read_recycle_table(tables[-1])
    if data is None:
        from .config import load_config
        data = prepare(config or load_config(root / "config.txt"))
    train = np.concatenate([data.splits.pretrain, data.splits.dccl])
    dominant = {}
    cats = data.lg.cat
    for dev in table:
        mine = train[data.lg.user[train] == dev]
        dominant[dev] = int(np.bincount(cats[mine], minlength=data.lg.n_cats).argmax()) if len(mine) else -1
    devs = sorted(table)
    mp.write_recycle_table(path, [(d_, table[d_]) for d_ in devs], {"category": [dominant[d_] for d_ in devs]})
    return path


# ---------------------------------------------------------------- experiments

RECIPES = ("rq1", "rq2", "rq3", "junction-ablation", "one-round-ablation")


def _sub(config: RunConfig, root: Path, name: str, **kw) -> RunConfig:
    return config.replace(out_dir=str(root / name), **kw)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(recipe: str, config: RunConfig, data: Prepared | None = None) -> dict:
    """Run a recipe's lifecycles under ``config.out_dir/<recipe>`` and write its summary files."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    root = Path(config.out_dir) / recipe
    root.mkdir(parents=True, exist_ok=True)
    cache = root / "pretrain_cache"
    data = data or prepare(config)
    out: dict = {"recipe": recipe, "runs": {}}

    def go(name, **kw):
        cfg = _sub(config, root, name, **kw)
        reps = run_lifecycle(cfg, data, pretrain_cache=cache)
        out["runs"][name] = cfg.out_dir
        return reps

    if recipe in ("rq1", "one-round-ablation"):
        rounds = 1 if recipe == "one-round-ablation" else config.rounds
        base = go("baseline", mode="baseline-incremental", rounds=rounds)
        dccl = go("dccl", mode="dccl-full", rounds=rounds)
        last_b, last_d = base[-1], dccl[-1]
        methods = [("DIN-incremental", last_b, "din-incremental"), ("DCCL-e", last_d, "dccl-e"),
                   ("DCCL-m", last_d, "dccl-m")]
        if recipe == "rq1":
            methods = [methods[0], ("DCCL", last_d, "dccl-m")]
        rows = []
        for label, rep, key in methods:
            ev = rep.evals[key]
            rows += [[label, "HitRate", k, repr(v)] for k, v in ev["hit_rate"].items()]
            rows += [[label, "NDCG", k, repr(v)] for k, v in ev["ndcg"].items()]
            rows.append([label, "macro-AUC", "", repr(ev["macro_auc"])])
        _write_rows(root / "table.csv", ["method", "metric", "K", "value"], rows)
        out["table"] = str(root / "table.csv")
    elif recipe == "rq2":
        base = go("baseline", mode="baseline-incremental", rounds=1)
        dccl_e = go("dccl-e", mode="dccl-e-only", rounds=1)
        rows = []
        for label, rep, key in (("DIN", base[-1], "din-incremental"), ("DCCL-e", dccl_e[-1], "dccl-e")):
            rows += [[label, g, repr(v)] for g, v in sorted(rep.evals[key]["group_macro_auc"].items(),
                                                          key=lambda kv: int(kv[0]))]
        _write_rows(root / "groups.csv", ["method", "group", "macro_auc"], rows)
        out["groups"] = str(root / "groups.csv")
    elif recipe == "rq3":
        rows = []
        divisors = [i for i in range(1, config.n_slices + 1) if config.n_slices % i == 0]
        labels = {divisors[0]: "short", divisors[-1]: "long"}
        if len(divisors) > 2:
            labels[divisors[len(divisors) // 2]] = "medium"
        for interval, label in sorted(labels.items()):
            reps = go(f"interval-{interval}", mode="interval-study", interval=interval, rounds=-1)
            for rep in reps[1:]:
                for key in ("dccl-e", "dccl-m", "cloud"):
                    if key in rep.evals:
                        rows.append([label, interval, rep.round, rep.round * interval, key,
                                     repr(rep.evals[key]["hit_rate"]["10"]), repr(rep.evals[key]["macro_auc"])])
        _write_rows(root / "traces.csv", ["schedule", "interval", "round", "slices_consumed", "model",
                                          "hit_rate_10", "macro_auc"], rows)
        out["traces"] = str(root / "traces.csv")
    elif recipe == "junction-ablation":
        rows = []
        for gate in ("100", "010", "001"):
            reps = go(f"gate-{gate}", mode="junction-ablation", gate=gate, rounds=1)
            for key in ("dccl-e", "dccl-m"):
                ev = reps[-1].evals[key]
                rows.append([gate, key, repr(ev["hit_rate"]["10"]), repr(ev["ndcg"]["10"]), repr(ev["macro_auc"])])
        _write_rows(root / "junctions.csv", ["gate", "model", "hit_rate_10", "ndcg_10", "macro_auc"], rows)
        out["junctions"] = str(root / "junctions.csv")
    shutil.rmtree(cache, ignore_errors=True)
    (root / "experiment.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    return out
