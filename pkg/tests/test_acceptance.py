"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run standalone with ``python tests/test_acceptance.py`` or through pytest.
The long-tail and interval studies train full lifecycles on 2,000- and
1,000-user synthetic worlds and take a while.  The MovieLens study reads
raw files from ``$DCCL_MOVIELENS_DIR``.
"""
from __future__ import annotations

import filecmp
import os
import shutil
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import gradcases as G  # noqa: E402
from conftest import VERDICTS  # noqa: E402
from dccl import datahub as dh  # noqa: E402
from dccl import evalmetrics as em  # noqa: E402
from dccl import metapatch as mp  # noqa: E402
from dccl import momodistill as md  # noqa: E402
from dccl import orchestrator as O  # noqa: E402
from dccl import recmodel as rm  # noqa: E402
from dccl import tensor as T  # noqa: E402
from dccl.config import RunConfig  # noqa: E402

SEEDS = (0, 1, 2, 3, 4)

# tolerances and thresholds
GRAD_TOL = 1e-4
GRAD_SEEDS = 20
GRAD_BUDGET_S = 60.0
PATCH_SIZES = {"J1": 4192, "J2": 1072, "J3": 2112}
PATCH_TOTAL = 7376
CODE_RATIO_MAX = 0.005
METRIC_TOL = 1e-12
N_FIXTURES = 200
N_MONOTONE = 10
KL_TOL = 1e-6
KL_09_05 = 0.368064
KL_05_09 = 0.340483
N_KL_PAIRS = 100_000
TAIL_GAIN = 0.01
HEAD_SLACK = 0.005
LONG_TAIL_BUDGET_S = 600.0
MOVIELENS_BUDGET_S = 1800.0
ORDER_MIN_SEEDS = 4


def verdict(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line, flush=True)
    VERDICTS.append(line)
    return line


# ---------------------------------------------------------------- 1

def test_gradient_fidelity():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    cases = [(k, lambda s, k=k: G.op_case(k, s)) for k in T.OP_KINDS] + list(G.COMPOSITES.items())
    for name, build in cases:
        for seed in range(GRAD_SEEDS):
            loss_fn, params = build(seed)
            worst[name] = max(worst.get(name, 0.0), T.grad_check(loss_fn, params, h=1e-5).max_rel_error)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= GRAD_TOL}
    ok = not bad and elapsed < GRAD_BUDGET_S
    name, val = max(worst.items(), key=lambda kv: kv[1])
    line = verdict(1, "gradient fidelity", ok,
                   f"{len(worst)} op kinds and composites x {GRAD_SEEDS} seeds; worst {name} {val:.2e} "
                   f"(tol {GRAD_TOL:g}); {elapsed:.1f}s (budget {GRAD_BUDGET_S:g}s); failing {sorted(bad)}")
    assert ok, line


# ---------------------------------------------------------------- 2

def test_zero_patch_identity():
    rng = np.random.default_rng(2)
    lg, profiles = dh.synth_generate(dh.SynthSpec(users=300, items=600, clusters=10, seed=2))
    cfg = rm.BackboneConfig(lg.n_users, lg.n_items, lg.n_cats)
    bb = rm.init_backbone(cfg, rng)
    anchors = rng.integers(0, len(lg), size=1000)
    items = rng.integers(0, lg.n_items, size=1000)
    batch = dh.make_batch(lg, lg.user[anchors], items, anchors)
    base = rm.backbone_forward(cfg, bb, batch)
    basis = {s: rng.normal(size=v.shape) for s, v in mp.init_basis(cfg, 32, rng).items()}
    zero = rm.patched_forward(cfg, bb, mp.generate_patches(cfg, basis, np.zeros(32)), rm.ALL_ON, batch)
    loud = rm.patched_forward(cfg, bb, mp.generate_patches(cfg, basis, rng.normal(size=32)), rm.ALL_OFF, batch)
    ok = np.array_equal(zero, base) and np.array_equal(loud, base)
    line = verdict(2, "zero-patch identity", ok,
                   f"1000 samples; zero code max diff {np.abs(zero - base).max():.1e}, "
                   f"all-off gate max diff {np.abs(loud - base).max():.1e} (bit-exact required)")
    assert ok, line


# ---------------------------------------------------------------- 3

def test_parameter_budget():
    cfg = rm.BackboneConfig(100, 100, 10)
    sizes, total = rm.patch_dims(cfg)
    # independent count: allocate each part and count its entries
    counted = {}
    for s in rm.patch_sites(cfg):
        parts = [np.zeros((s.width, s.bottleneck)), np.zeros(s.bottleneck),
                 np.zeros((s.bottleneck, s.width)), np.zeros(s.width)]
        counted[s.site] = sum(p.size for p in parts)
    ratio = 32 / total
    ok = sizes == PATCH_SIZES == counted and total == PATCH_TOTAL and ratio < CODE_RATIO_MAX
    line = verdict(3, "parameter budget", ok, f"K={sizes}, total {total}, code/total {ratio:.5f} (< {CODE_RATIO_MAX})")
    assert ok, line


# ---------------------------------------------------------------- 4

def _brute_rank(scores):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], 0 if i else 1))
    return order.index(0) + 1


def _brute_auc(pos, neg):
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def test_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    mono_worst = 0.0
    for _ in range(N_FIXTURES):
        n = int(rng.integers(1, 9))
        # coarse grid so ties occur
        scores = rng.integers(0, 6, size=(n, 101)) / 5.0
        ranks = [_brute_rank(list(row)) for row in scores]
        rep = em.report_from_scores("x", np.arange(n), scores)
        for k in em.HIT_KS:
            worst = max(worst, abs(rep.hit[k] - sum(r <= k for r in ranks) / n))
        for k in em.NDCG_KS:
            worst = max(worst, abs(rep.ndcg[k] - sum(1 / np.log2(r + 1) if r <= k else 0.0 for r in ranks) / n))
        worst = max(worst, abs(rep.auc - sum(_brute_auc(row[:1], row[1:]) for row in scores) / n))
        per_user = {u: (rng.normal(size=int(rng.integers(1, 4))), rng.normal(size=int(rng.integers(1, 6))))
                    for u in range(n)}
        base = em.macro_auc(per_user).value
        for _ in range(N_MONOTONE // 5 or 1):
            a, b = rng.uniform(0.1, 3.0), rng.normal()
            for f in (np.exp, np.tanh, lambda x: a * x + b, lambda x: x ** 3, lambda x: np.arctan(a * x)):
                moved = em.macro_auc({u: (f(p), f(q)) for u, (p, q) in per_user.items()}).value
                mono_worst = max(mono_worst, abs(moved - base))
    ok = worst <= METRIC_TOL and mono_worst <= METRIC_TOL
    line = verdict(4, "metric oracles", ok, f"{N_FIXTURES} fixtures; max deviation from brute force {worst:.1e}; "
                   f"max change under {N_MONOTONE} monotone maps {mono_worst:.1e} (tol {METRIC_TOL:g})")
    assert ok, line


# ---------------------------------------------------------------- 5

def _beta_zero_pair():
    lg, _ = dh.synth_generate(dh.SynthSpec(users=120, items=300, clusters=6, seed=5))
    sp = dh.build_splits(lg, dh.SplitPlan(0.5), 5)
    cfg = rm.BackboneConfig(lg.n_users, lg.n_items, lg.n_cats)
    bb = rm.init_backbone(cfg, np.random.default_rng(5))
    basis = mp.init_basis(cfg, 8, np.random.default_rng(6), scale=0.05)
    codes = np.random.default_rng(7).normal(size=(lg.n_users, 8))
    teachers = md.TeacherBundle(bb, basis, codes, np.ones(lg.n_users, bool))
    conf = md.DistillConfig(beta=0.0, batch_size=128, epochs=2)
    inc, tr_inc = md.incremental_train(cfg, bb, lg, sp.dccl, conf, np.random.default_rng(9))
    dis, tr_dis = md.distill_backbone(cfg, teachers, lg, sp.dccl, conf, np.random.default_rng(9))
    return inc, dis, tr_inc, tr_dis


def test_kl_correctness():
    a, b = md.kl_bernoulli(0.9, 0.5), md.kl_bernoulli(0.5, 0.9)
    rng = np.random.default_rng(55)
    p, q = rng.random(N_KL_PAIRS), rng.random(N_KL_PAIRS)
    kl = md.kl_bernoulli(p, q)
    inc, dis, tr_inc, tr_dis = _beta_zero_pair()
    same = all(np.array_equal(inc[k], dis[k]) for k in inc) and [t.ce for t in tr_inc] == [t.ce for t in tr_dis]
    oracle = [float(x * mpmath.log(x / y) + (1 - x) * mpmath.log((1 - x) / (1 - y)))
              for x, y in ((mpmath.mpf("0.9"), mpmath.mpf("0.5")), (mpmath.mpf("0.5"), mpmath.mpf("0.9")))]
    ok = abs(a - KL_09_05) <= KL_TOL and abs(b - KL_05_09) <= KL_TOL and bool(np.all(kl >= 0)) and same
    line = verdict(5, "KL correctness", ok,
                   f"KL(0.9||0.5)={a:.7f} vs pinned {KL_09_05}, KL(0.5||0.9)={b:.7f} vs pinned {KL_05_09} "
                   f"(tol {KL_TOL:g}; 30-digit closed form gives {oracle[0]:.7f}, {oracle[1]:.7f}); min over {N_KL_PAIRS} pairs "
                   f"{kl.min():.2e}; beta=0 trajectory bit-identical: {same}")
    assert ok, line


# ---------------------------------------------------------------- 6

def _synth_config(tmp: Path, seed: int, **kw) -> RunConfig:
    return RunConfig(source="synthetic", synth_users=2000, synth_alpha=1.2, seed=seed, out_dir=str(tmp), **kw)


def test_long_tail_improvement(tmp_path):
    tail_gain, head_gap, times = [], [], []
    for seed in SEEDS:
        t0 = time.perf_counter()
        cfg = _synth_config(tmp_path / f"s{seed}", seed, rounds=1)
        out = O.run_experiment("rq2", cfg)
        base = O.load_reports(out["runs"]["baseline"])[-1].evals["din-incremental"]["group_macro_auc"]
        dcl = O.load_reports(out["runs"]["dccl-e"])[-1].evals["dccl-e"]["group_macro_auc"]
        diff = {int(g): dcl[g] - base[g] for g in base}
        tail_gain.append(float(np.mean([diff[g] for g in range(11, 21)])))
        head_gap.append([diff[g] for g in range(1, 11)])
        times.append(time.perf_counter() - t0)
        shutil.rmtree(tmp_path / f"s{seed}", ignore_errors=True)
        print(f"  seed {seed}: tail-half gain {tail_gain[-1]:+.4f}, worst head group {min(head_gap[-1]):+.4f}, "
              f"{times[-1]:.0f}s", flush=True)
    med_tail = float(np.median(tail_gain))
    med_head = np.median(np.array(head_gap), axis=0)
    ok = med_tail >= TAIL_GAIN and bool(np.all(med_head >= -HEAD_SLACK)) and max(times) < LONG_TAIL_BUDGET_S
    line = verdict(6, "long-tail improvement", ok,
                   f"median tail-half gain {med_tail:+.4f} (need >= {TAIL_GAIN}); worst head-group median "
                   f"{med_head.min():+.4f} (need >= -{HEAD_SLACK}); slowest seed {max(times):.0f}s")
    assert ok, line


# ---------------------------------------------------------------- 7

def test_one_round_ordering(tmp_path):
    src = os.environ.get("DCCL_MOVIELENS_DIR", "")
    if not src or not (Path(src) / "ratings.dat").is_file():
        line = verdict(7, "one-round ordering", False,
                       "MovieLens-1M not available: set DCCL_MOVIELENS_DIR to the ml-1m directory")
        pytest.fail(line)
    data_dir = tmp_path / "ml"
    lg, profiles = dh.parse_movielens(src)
    lg = dh.filter_min_interactions(lg, 20)
    dh.write_dataset(data_dir, lg, profiles)
    wins, rows, times = 0, [], []
    for seed in SEEDS:
        t0 = time.perf_counter()
        cfg = RunConfig(source="dataset", data_dir=str(data_dir), cloud_batch=256, pretrain_epochs=5,
                        basis_pretrain_epochs=1, seed=seed, out_dir=str(tmp_path / f"s{seed}"))
        out = O.run_experiment("one-round-ablation", cfg)
        rep = O.load_reports(out["runs"]["dccl"])[-1]
        base = O.load_reports(out["runs"]["baseline"])[-1]
        din = O.metric_value(base, "din-incremental")
        e, m = O.metric_value(rep, "dccl-e"), O.metric_value(rep, "dccl-m")
        wins += m >= e >= din
        rows.append(f"{din:.4f}/{e:.4f}/{m:.4f}")
        times.append(time.perf_counter() - t0)
        print(f"  seed {seed}: DIN {din:.4f}, DCCL-e {e:.4f}, DCCL-m {m:.4f}, {times[-1]:.0f}s", flush=True)
    ok = wins >= ORDER_MIN_SEEDS and max(times) < MOVIELENS_BUDGET_S
    line = verdict(7, "one-round ordering", ok, f"ordered in {wins}/5 seeds (need {ORDER_MIN_SEEDS}); "
                   f"DIN/e/m HitRate@10 {rows}; slowest seed {max(times):.0f}s")
    assert ok, line


# ---------------------------------------------------------------- 8

def test_interval_trend(tmp_path):
    short, long_, traces = [], [], []
    for seed in SEEDS:
        cfg = RunConfig(source="synthetic", synth_users=1000, synth_items=3000, n_slices=4, seed=seed,
                        out_dir=str(tmp_path / f"s{seed}"))
        out = O.run_experiment("rq3", cfg)
        final = {}
        for name, run_dir in out["runs"].items():
            final[name] = O.metric_value(O.load_reports(run_dir)[-1], "dccl-m")
        short.append(final["interval-1"])
        long_.append(final["interval-4"])
        traces.append(out["traces"])
        print(f"  seed {seed}: final HitRate@10 short {short[-1]:.4f}, medium {final['interval-2']:.4f}, "
              f"long {long_[-1]:.4f}; traces {out['traces']}", flush=True)
    med = float(np.median(np.array(short) - np.array(long_)))
    ok = med >= 0 and all(Path(t).is_file() for t in traces)
    line = verdict(8, "interval trend", ok, f"median (short - long) final HitRate@10 {med:+.4f} (need >= 0); "
                   f"short {np.round(short, 4).tolist()}, long {np.round(long_, 4).tolist()}")
    assert ok, line


# ---------------------------------------------------------------- 9

def _small(tmp: Path, name: str) -> RunConfig:
    return RunConfig(source="synthetic", synth_users=150, synth_items=400, synth_clusters=8, n_slices=2,
                     pretrain_epochs=1, cloud_batch=256, seed=9, out_dir=str(tmp / name))


def test_determinism_and_resume(tmp_path):
    O.run_lifecycle(_small(tmp_path, "a"))
    O.run_lifecycle(_small(tmp_path, "b"))
    ref = tmp_path / "a" / "metrics.csv"
    same = filecmp.cmp(ref, tmp_path / "b" / "metrics.csv", shallow=False)
    stages = O.Lifecycle(_small(tmp_path, "a")).stages_in_order()
    resumed = []
    for stage in stages:
        cfg = _small(tmp_path, f"kill-{stage}")
        with pytest.raises(O.StopRequested):
            O.run_lifecycle(cfg, stop_after=stage)
        O.run_lifecycle(cfg)
        resumed.append(filecmp.cmp(ref, Path(cfg.out_dir) / "metrics.csv", shallow=False))
    ok = same and all(resumed)
    line = verdict(9, "determinism and resume", ok, f"repeat run byte-identical: {same}; resumed after "
                   f"{sum(resumed)}/{len(stages)} stages byte-identical")
    assert ok, line


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
