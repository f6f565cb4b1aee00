"""Leave-one-out ranking metrics and the long-tail user partition."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

HIT_KS = (1, 5, 10)
NDCG_KS = (5, 10)
N_GROUPS = 20
NDCG_FORMS = ("standard", "paper-literal")


class MetricError(ValueError):
    pass


@dataclass
class RankedCase:
    user: int
    rank: int               # 1-indexed rank of the ground truth
    scores: np.ndarray      # ground truth first, then negatives


def rank_case(scores, user: int = -1) -> RankedCase:
    """``scores[0]`` is the ground truth.  Tied negatives count as ranked above it."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise MetricError(f"need ground truth plus negatives, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise MetricError(f"non-finite score for user {user}")
    return RankedCase(user, 1 + int(np.sum(s[1:] >= s[0])), s)


def rank_matrix(scores: np.ndarray) -> np.ndarray:
    """Vectorized ranks for an (n, 1 + negatives) score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        bad = np.nonzero(~np.all(np.isfinite(s), axis=1))[0]
        raise MetricError(f"non-finite scores in rows {bad[:5].tolist()}")
    return 1 + (s[:, 1:] >= s[:, :1]).sum(axis=1)


def _ranks(cases) -> np.ndarray:
    r = np.array([c.rank if isinstance(c, RankedCase) else c for c in cases], dtype=np.int64)
    if r.size == 0:
        raise MetricError("no evaluation cases")
    return r


def hit_rate_at_k(cases, k: int) -> float:
    return float(np.mean(_ranks(cases) <= k))


def ndcg_at_k(cases, k: int, form: str = "standard") -> float:
    """Single-relevant NDCG: 1/log2(R+1) for hits.  The ``paper-literal`` form
    uses (2^hit - 1)/log2(hit + 1), which equals the hit indicator."""
    r = _ranks(cases)
    hit = r <= k
    if form == "standard":
        return float(np.mean(np.where(hit, 1.0 / np.log2(r + 1.0), 0.0)))
    if form == "paper-literal":
        h = hit.astype(np.float64)
        gain = np.divide(2.0 ** h - 1.0, np.log2(h + 1.0), out=np.zeros_like(h), where=hit)
        return float(np.mean(gain))
    raise ValueError(f"unknown NDCG form {form!r}; expected one of {NDCG_FORMS}")


def user_auc(pos, neg) -> float:
    """Share of (positive, negative) pairs ordered correctly; ties earn half."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(neg, dtype=np.float64).ravel())
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    return float((below + 0.5 * tied).sum() / (len(pos) * len(neg)))


@dataclass
class AUCResult:
    value: float
    per_user: dict
    excluded: list


def macro_auc(per_user: dict) -> AUCResult:
    """``per_user`` maps user -> (positive scores, negative scores).

    Users missing either side are excluded and listed.
    """
    aucs, excluded = {}, []
    for u, (pos, neg) in per_user.items():
        pos, neg = np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)
        if pos.size == 0 or neg.size == 0:
            excluded.append(u)
            continue
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise MetricError(f"non-finite score for user {u}")
        aucs[u] = user_auc(pos, neg)
    if excluded:
        log.warning("macro-AUC: %d users without both positives and negatives excluded", len(excluded))
    if not aucs:
        raise MetricError("no user has both positive and negative scores")
    return AUCResult(float(np.mean(list(aucs.values()))), aucs, excluded)


# ---------------------------------------------------------------- groups

@dataclass
class GroupPartition:
    order: np.ndarray        # users sorted head -> tail
    group_of: dict           # user -> group index (1 = head)
    groups: list             # list of user arrays

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def group_users(counts: dict | np.ndarray, n_groups: int = N_GROUPS) -> GroupPartition:
    """Sort users by descending count (ties by ascending id), then cut into
    contiguous groups whose sizes differ by at most one."""
    if isinstance(counts, dict):
        users = np.array(sorted(counts), dtype=np.int64)
        c = np.array([counts[u] for u in users])
    else:
        c = np.asarray(counts)
        users = np.arange(len(c), dtype=np.int64)
    if len(users) == 0:
        raise MetricError("no users to partition")
    if len(users) < n_groups:
        log.warning("only %d users; using %d groups instead of %d", len(users), len(users), n_groups)
        n_groups = len(users)
    order = users[np.lexsort((users, -c))]
    groups = [g for g in np.array_split(order, n_groups)]
    group_of = {int(u): gi + 1 for gi, g in enumerate(groups) for u in g}
    return GroupPartition(order, group_of, groups)


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    name: str
    n_cases: int
    hit: dict                       # K -> value
    ndcg: dict                      # K -> value
    auc: float
    group_auc: dict = field(default_factory=dict)   # group -> macro-AUC
    excluded: list = field(default_factory=list)

    def rows(self) -> list[tuple]:
        out = [("HitRate", self.name, k, "all", v) for k, v in sorted(self.hit.items())]
        out += [("NDCG", self.name, k, "all", v) for k, v in sorted(self.ndcg.items())]
        out.append(("macro-AUC", self.name, "", "all", self.auc))
        out += [("macro-AUC", self.name, "", g, v) for g, v in sorted(self.group_auc.items())]
        return out

    def summary(self) -> dict:
        return {"name": self.name, "cases": self.n_cases,
                "hit_rate": {str(k): v for k, v in sorted(self.hit.items())},
                "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
                "macro_auc": self.auc,
                "group_macro_auc": {str(g): v for g, v in sorted(self.group_auc.items())},
                "excluded_users": list(map(int, self.excluded))}


def report_from_scores(name: str, users: np.ndarray, scores: np.ndarray,
                       partition: GroupPartition | None = None, ndcg_form: str = "standard") -> EvalReport:
    """``scores``: (n, 1 + negatives) with the ground truth in column 0."""
    ranks = rank_matrix(scores)
    per_user = {int(u): (scores[i, :1], scores[i, 1:]) for i, u in enumerate(users)}
    auc = macro_auc(per_user)
    group_auc = {}
    if partition is not None:
        for gi, g in enumerate(partition.groups, start=1):
            vals = [auc.per_user[int(u)] for u in g if int(u) in auc.per_user]
            if vals:
                group_auc[gi] = float(np.mean(vals))
    return EvalReport(name, len(users), {k: hit_rate_at_k(ranks, k) for k in HIT_KS},
                      {k: ndcg_at_k(ranks, k, ndcg_form) for k in NDCG_KS}, auc.value, group_auc, auc.excluded)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(path, reports: Sequence[EvalReport], prefix_cols: dict | None = None, append: bool = False):
    """``metric,name,K,group,value``; extra leading columns (e.g. round) via ``prefix_cols``."""
    prefix_cols = prefix_cols or {}
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writerow([*prefix_cols, "metric", "name", "K", "group", "value"])
        for rep in reports:
            for row in rep.rows():
                w.writerow([*prefix_cols.values(), *row[:4], _fmt(row[4])])


def write_summary_json(path, reports: Sequence[EvalReport], extra: dict | None = None):
    with open(path, "w") as fh:
        json.dump({**(extra or {}), "reports": [r.summary() for r in reports]}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def evaluate(name: str, score_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
             eval_users: np.ndarray, candidates: np.ndarray, anchors: np.ndarray,
             partition: GroupPartition | None = None, ndcg_form: str = "standard") -> EvalReport:
    """Score each user's candidate row with ``score_fn(users, candidates, anchors)``."""
    scores = score_fn(eval_users, candidates, anchors)
    return report_from_scores(name, eval_users, scores, partition, ndcg_form)
