"""Interaction logs, splits, evaluation cases and the synthetic generator."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PROFILE_DIM = 8
N_EVAL_NEGATIVES = 100


# ---------------------------------------------------------------- model inputs

@dataclass
class Sample:
    device: int
    item: int
    cat: int
    hist_item: list
    hist_cat: list
    label: float = 0.0


@dataclass
class Batch:
    user: np.ndarray       # (B,) device id
    item: np.ndarray       # (B,)
    cat: np.ndarray        # (B,)
    hist_item: np.ndarray  # (B, L), 0 where masked
    hist_cat: np.ndarray   # (B, L)
    hist_mask: np.ndarray  # (B, L) bool
    label: np.ndarray      # (B,)

    def __len__(self):
        return len(self.user)


def collate(samples: list[Sample]) -> Batch:
    L = max(1, max(len(s.hist_item) for s in samples))
    B = len(samples)
    hi = np.zeros((B, L), dtype=np.int64)
    hc = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for r, s in enumerate(samples):
        n = len(s.hist_item)
        hi[r, :n] = s.hist_item
        hc[r, :n] = s.hist_cat
        mask[r, :n] = True
    return Batch(np.array([s.device for s in samples], dtype=np.int64),
                 np.array([s.item for s in samples], dtype=np.int64),
                 np.array([s.cat for s in samples], dtype=np.int64),
                 hi, hc, mask, np.array([s.label for s in samples], dtype=np.float64))


# ---------------------------------------------------------------- logs

class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Events sorted by (user, timestamp, arrival order); ids are dense."""

    user: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    item_cat: np.ndarray        # category of each dense item
    user_keys: np.ndarray       # raw id of each dense user
    item_keys: np.ndarray       # raw id of each dense item
    n_cats: int
    offsets: np.ndarray = field(init=False)
    hist_end: np.ndarray = field(init=False)
    _keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        order = np.lexsort((np.arange(len(self.user)), self.ts, self.user))
        self.user = np.asarray(self.user, dtype=np.int64)[order]
        self.item = np.asarray(self.item, dtype=np.int64)[order]
        self.ts = np.asarray(self.ts, dtype=np.int64)[order]
        self.item_cat = np.asarray(self.item_cat, dtype=np.int64)
        self.offsets = np.searchsorted(self.user, np.arange(self.n_users + 1)).astype(np.int64)
        # history of event g is [offsets[u], hist_end[g]): strictly earlier timestamps
        composite = self.user * (int(self.ts.max(initial=0)) + 1) + self.ts
        self.hist_end = np.searchsorted(composite, composite, side="left").astype(np.int64)
        self._keys = np.unique(self.user * self.n_items + self.item)

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    @property
    def cat(self) -> np.ndarray:
        return self.item_cat[self.item]

    def __len__(self):
        return len(self.user)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def events_of(self, u: int) -> slice:
        return slice(int(self.offsets[u]), int(self.offsets[u + 1]))

    def seen(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Whether each (user, item) pair occurs anywhere in the log."""
        k = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._keys, k)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == k

    def summary(self) -> dict:
        return {"users": self.n_users, "items": self.n_items, "categories": int(self.n_cats),
                "interactions": len(self)}


@dataclass
class UserProfile:
    user: int
    features: np.ndarray


def profile_matrix(log_: InteractionLog, profiles: dict) -> np.ndarray:
    """Rows aligned with dense users; ``profiles`` is keyed by raw user id."""
    out = np.zeros((log_.n_users, PROFILE_DIM))
    for u, key in enumerate(log_.user_keys):
        p = profiles[int(key)]
        out[u] = p.features if isinstance(p, UserProfile) else p
    return out


def _densify(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys, dense = np.unique(raw, return_inverse=True)
    return keys, dense


# ---------------------------------------------------------------- MovieLens

_AGE_BUCKETS = (1, 18, 25, 35, 45, 50, 56)
_N_OCCUPATIONS = 21


def _split_line(line: str, n: int, path: Path, lineno: int) -> list[str]:
    parts = line.rstrip("\r\n").split("::")
    if len(parts) != n:
        raise DataError(f"{path}:{lineno}: expected {n} '::'-separated fields, got {len(parts)}")
    return parts


def _occupation_projection() -> np.ndarray:
    # fixed, data-independent projection of the occupation one-hot
    return np.random.default_rng(20211).normal(0.0, 1.0 / np.sqrt(6), size=(_N_OCCUPATIONS, 6))


def movielens_profile(gender: str, age: int, occupation: int) -> np.ndarray:
    if gender not in ("M", "F") or age not in _AGE_BUCKETS or not 0 <= occupation < _N_OCCUPATIONS:
        raise DataError(f"bad profile fields {(gender, age, occupation)}")
    age_pos = _AGE_BUCKETS.index(age) / (len(_AGE_BUCKETS) - 1) * 2.0 - 1.0
    return np.concatenate([[1.0 if gender == "M" else -1.0, age_pos], _occupation_projection()[occupation]])


def parse_movielens(path) -> tuple[InteractionLog, dict[int, UserProfile]]:
    """Read ``ratings.dat``, ``users.dat`` and ``movies.dat`` from a directory.

    Every rating is a positive event; the category is the first listed genre.
    """
    root = Path(path)
    files = {n: root / f"{n}.dat" for n in ("ratings", "users", "movies")}
    for f in files.values():
        if not f.is_file():
            raise FileNotFoundError(f"missing MovieLens file {f}")

    genre_of: dict[int, str] = {}
    with open(files["movies"], encoding="latin-1") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            mid, _title, genres = _split_line(line, 3, files["movies"], i)
            genre_of[int(mid)] = genres.split("|")[0]

    profiles: dict[int, UserProfile] = {}
    with open(files["users"], encoding="latin-1") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            uid, g, age, occ, _zip = _split_line(line, 5, files["users"], i)
            try:
                profiles[int(uid)] = UserProfile(int(uid), movielens_profile(g, int(age), int(occ)))
            except (ValueError, DataError) as e:
                raise DataError(f"{files['users']}:{i}: {e}") from None

    users, items, stamps = [], [], []
    with open(files["ratings"], encoding="latin-1") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            u, m, r, t = _split_line(line, 4, files["ratings"], i)
            try:
                users.append(int(u))
                items.append(int(m))
                int(r)
                stamps.append(int(t))
            except ValueError:
                raise DataError(f"{files['ratings']}:{i}: non-integer field in {line.strip()!r}") from None
            if items[-1] not in genre_of:
                raise DataError(f"{files['ratings']}:{i}: movie {items[-1]} not in movies.dat")
            if users[-1] not in profiles:
                raise DataError(f"{files['ratings']}:{i}: user {users[-1]} not in users.dat")

    ukeys, udense = _densify(np.array(users, dtype=np.int64))
    ikeys, idense = _densify(np.array(items, dtype=np.int64))
    genre_names = sorted({genre_of[int(k)] for k in ikeys})
    item_cat = np.array([genre_names.index(genre_of[int(k)]) for k in ikeys], dtype=np.int64)
    out = InteractionLog(udense, idense, np.array(stamps, dtype=np.int64), item_cat, ukeys, ikeys, len(genre_names))
    log.info("parsed MovieLens: %s", out.summary())
    return out, profiles


# ---------------------------------------------------------------- filtering

def _subset(lg: InteractionLog, keep: np.ndarray) -> InteractionLog:
    u = lg.user[keep]
    it = lg.item[keep]
    ukeys_idx, udense = _densify(u)
    ikeys_idx, idense = _densify(it)
    return InteractionLog(udense, idense, lg.ts[keep], lg.item_cat[ikeys_idx],
                          lg.user_keys[ukeys_idx], lg.item_keys[ikeys_idx], lg.n_cats)


def filter_min_interactions(lg: InteractionLog, threshold: int, report: dict | None = None) -> InteractionLog:
    """Drop users and items with fewer than ``threshold`` events, until stable."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    keep = np.ones(len(lg), dtype=bool)
    while True:
        uc = np.bincount(lg.user[keep], minlength=lg.n_users)
        ic = np.bincount(lg.item[keep], minlength=lg.n_items)
        bad = keep & ((uc[lg.user] < threshold) | (ic[lg.item] < threshold))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise DataError(f"no events survive threshold {threshold}; lower it")
    out = _subset(lg, keep)
    if report is not None:
        report.update(removed_users=lg.n_users - out.n_users, removed_items=lg.n_items - out.n_items,
                      removed_events=len(lg) - len(out))
    return out


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitPlan:
    pretrain_frac: float = 0.5
    n_slices: int = 1          # equal-mass chronological slices of the collaborative phase
    min_events: int = 3

    def __post_init__(self):
        if not 0.0 < self.pretrain_frac < 1.0 or self.n_slices < 1:
            raise ValueError(f"invalid split plan {self}")


@dataclass
class EvalSet:
    """Leave-one-out cases: ground truth plus sampled unseen negatives."""

    user: np.ndarray       # (n,)
    truth: np.ndarray      # (n,) ground-truth item
    negatives: np.ndarray  # (n, 100)
    event: np.ndarray      # (n,) global index of the held-out event

    def __len__(self):
        return len(self.user)

    def case(self, i: int) -> "EvalCase":
        return EvalCase(int(self.user[i]), int(self.truth[i]), self.negatives[i].copy(), int(self.event[i]))


@dataclass
class EvalCase:
    user: int
    truth: int
    negatives: np.ndarray
    event: int


@dataclass
class Splits:
    pretrain: np.ndarray          # global event indices of positives
    slices: list                  # per collaborative slice, global event indices
    eval: EvalSet
    excluded_users: list
    boundaries: list              # timestamp cut points between slices

    @property
    def dccl(self) -> np.ndarray:
        return np.concatenate(self.slices) if self.slices else np.zeros(0, dtype=np.int64)

    def rounds(self, interval: int) -> list:
        """Group consecutive slices ``interval`` at a time, one group per round."""
        if interval < 1 or len(self.slices) % interval:
            raise ValueError(f"interval {interval} does not divide {len(self.slices)} slices")
        return [np.concatenate(self.slices[i:i + interval]) for i in range(0, len(self.slices), interval)]


def sample_unseen(lg: InteractionLog, users: np.ndarray, k: int, rng: np.random.Generator,
                  distinct: bool = False, exclude: np.ndarray | None = None) -> np.ndarray:
    """k items per user, uniform over items the user never interacted with."""
    users = np.asarray(users, dtype=np.int64)
    n = len(users)
    out = np.empty((n, k), dtype=np.int64)
    if not distinct:
        todo = np.ones((n, k), dtype=bool)
        while todo.any():
            rows, cols = np.nonzero(todo)
            cand = rng.integers(0, lg.n_items, size=len(rows))
            ok = ~lg.seen(users[rows], cand)
            out[rows[ok], cols[ok]] = cand[ok]
            todo[rows[ok], cols[ok]] = False
        return out
    counts = lg.counts()
    for r, u in enumerate(users):
        if lg.n_items - counts[u] < k:
            raise DataError(f"user {u} has fewer than {k} unseen items")
        picked: list = []
        have = set()
        while len(picked) < k:
            cand = rng.integers(0, lg.n_items, size=2 * (k - len(picked)))
            ok = ~lg.seen(np.full(len(cand), u), cand)
            for c in cand[ok]:
                c = int(c)
                if c not in have and (exclude is None or c != exclude[r]):
                    have.add(c)
                    picked.append(c)
                    if len(picked) == k:
                        break
        out[r] = picked
    return out


def build_splits(lg: InteractionLog, plan: SplitPlan, seed: int) -> Splits:
    counts = lg.counts()
    excluded = [int(u) for u in np.nonzero(counts < plan.min_events)[0]]
    if excluded:
        log.warning("excluding %d users with < %d events", len(excluded), plan.min_events)
    pre, dccl, test_users, test_events = [], [], [], []
    for u in range(lg.n_users):
        if counts[u] < plan.min_events:
            continue
        a, b = int(lg.offsets[u]), int(lg.offsets[u + 1])
        n_pre = b - 1 - a
        cut = a + int(np.floor(n_pre * plan.pretrain_frac))
        pre.append(np.arange(a, cut))
        dccl.append(np.arange(cut, b - 1))
        test_users.append(u)
        test_events.append(b - 1)
    pre = np.concatenate(pre) if pre else np.zeros(0, dtype=np.int64)
    dccl = np.concatenate(dccl) if dccl else np.zeros(0, dtype=np.int64)

    # slice boundaries: timestamp quantiles of the collaborative phase
    if plan.n_slices == 1 or len(dccl) == 0:
        slices, cuts = [dccl], []
    else:
        stamps = np.sort(lg.ts[dccl])
        cuts = [int(stamps[min(len(stamps) - 1, (len(stamps) * i) // plan.n_slices)]) for i in range(1, plan.n_slices)]
        which = np.searchsorted(np.array(cuts), lg.ts[dccl], side="right")
        slices = [dccl[which == s] for s in range(plan.n_slices)]

    users = np.array(test_users, dtype=np.int64)
    events = np.array(test_events, dtype=np.int64)
    truth = lg.item[events]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    negs = sample_unseen(lg, users, N_EVAL_NEGATIVES, rng, distinct=True, exclude=truth)
    return Splits(pre, slices, EvalSet(users, truth, negs, events), excluded, cuts)


# ---------------------------------------------------------------- training rows

@dataclass
class Rows:
    """Flat training rows: candidate item plus the anchor event whose history is used."""

    user: np.ndarray
    item: np.ndarray
    anchor: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.user)

    def take(self, idx) -> "Rows":
        return Rows(self.user[idx], self.item[idx], self.anchor[idx], self.label[idx])


def training_rows(lg: InteractionLog, positives: np.ndarray, n_neg: int, rng: np.random.Generator) -> Rows:
    """Each positive event plus ``n_neg`` unseen-item negatives sharing its history,
    in a shuffled order."""
    positives = np.asarray(positives, dtype=np.int64)
    users = lg.user[positives]
    negs = sample_unseen(lg, users, n_neg, rng) if n_neg else np.zeros((len(positives), 0), dtype=np.int64)
    item = np.concatenate([lg.item[positives][:, None], negs], axis=1).ravel()
    anchor = np.repeat(positives, n_neg + 1)
    label = np.tile(np.r_[1.0, np.zeros(n_neg)], len(positives))
    order = rng.permutation(len(item))
    return Rows(np.repeat(users, n_neg + 1)[order], item[order], anchor[order], label[order])


def make_batch(lg: InteractionLog, user: np.ndarray, item: np.ndarray, anchor: np.ndarray,
               label: np.ndarray | None = None, max_hist: int = 50) -> Batch:
    """History of each row = up to ``max_hist`` most recent events strictly before ``anchor``."""
    user = np.asarray(user, dtype=np.int64)
    end = lg.hist_end[anchor]
    start = np.maximum(lg.offsets[user], end - max_hist)
    length = end - start
    L = max(1, int(length.max(initial=0)))
    pos = start[:, None] + np.arange(L)[None, :]
    mask = np.arange(L)[None, :] < length[:, None]
    idx = np.where(mask, pos, 0)
    hi = np.where(mask, lg.item[idx], 0)
    hc = np.where(mask, lg.item_cat[hi], 0)
    item = np.asarray(item, dtype=np.int64)
    lab = np.zeros(len(user)) if label is None else np.asarray(label, dtype=np.float64)
    return Batch(user, item, lg.item_cat[item], hi, hc, mask, lab)


def rows_batch(lg: InteractionLog, rows: Rows, max_hist: int = 50) -> Batch:
    return make_batch(lg, rows.user, rows.item, rows.anchor, rows.label, max_hist)


def sample_at(lg: InteractionLog, event: int, item: int | None = None, label: float = 1.0,
              max_hist: int = 50) -> Sample:
    """One :class:`Sample` anchored at a global event index."""
    b = make_batch(lg, [lg.user[event]], [lg.item[event] if item is None else item], [event], [label], max_hist)
    m = b.hist_mask[0]
    return Sample(int(b.user[0]), int(b.item[0]), int(b.cat[0]), b.hist_item[0][m].tolist(),
                  b.hist_cat[0][m].tolist(), float(b.label[0]))


# ---------------------------------------------------------------- synthetic long tail

@dataclass(frozen=True)
class SynthSpec:
    clusters: int = 20
    users: int = 2000
    items: int = 5000
    alpha: float = 1.2
    noise: float = 0.1
    drift: float = 0.0         # share of users whose home cluster changes halfway through their timeline
    tail_niche: float = 0.0    # how strongly low-activity users prefer unpopular items in their cluster
    min_events: int = 5
    mean_extra: float = 15.0   # average events above the floor
    rank_offset: float = 10.0
    horizon_days: int = 30
    seed: int = 0


def synth_generate(spec: SynthSpec) -> tuple[InteractionLog, dict[int, UserProfile]]:
    """Clustered long-tail interactions.

    Items are split into ``clusters`` categories with Zipf popularity inside
    each.  User activity follows a rank power law with exponent ``alpha`` on
    top of a floor of ``min_events``, capped at the smallest cluster size.
    Each event comes from the user's home cluster with probability
    ``1 - noise`` (by popularity, without repeats) and uniformly from the
    remaining items otherwise.  A ``drift`` share of users switch to a new
    home cluster for the later half of their events; profiles describe the
    current home.
    """
    if min(spec.clusters, spec.users, spec.items, spec.min_events) < 1 or spec.alpha <= 0:
        raise ValueError(f"degenerate synthetic spec {spec}")
    if spec.clusters > spec.items:
        raise ValueError(f"more clusters ({spec.clusters}) than items ({spec.items})")
    if not all(0.0 <= x <= 1.0 for x in (spec.noise, spec.drift, spec.tail_niche)):
        raise ValueError("noise, drift and tail_niche must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5717]))
    C, M, N = spec.clusters, spec.users, spec.items

    item_cluster = rng.permutation(np.arange(N) % C)
    members = [np.nonzero(item_cluster == c)[0] for c in range(C)]
    pop = [rng.permutation(1.0 / np.arange(1, len(m) + 1) ** 0.8) for m in members]
    pop = [p / p.sum() for p in pop]
    cap = min(len(m) for m in members)
    if spec.min_events > cap:
        raise ValueError(f"min_events {spec.min_events} exceeds the smallest cluster ({cap} items)")

    home = rng.integers(0, C, size=M)
    ranks = rng.permutation(M) + 1
    w = (ranks + spec.rank_offset) ** (-spec.alpha)
    extra = rng.multinomial(int(round(spec.mean_extra * M)), w / w.sum())
    n_events = np.minimum(spec.min_events + extra, cap)
    if (spec.min_events + extra > cap).any():
        log.info("%d users capped at %d events", int((spec.min_events + extra > cap).sum()), cap)
    horizon = spec.horizon_days * 86400
    drift_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD21F]))
    drifts = drift_rng.random(M) < spec.drift
    new_home = (home + drift_rng.integers(1, C, size=M)) % C if C > 1 else home.copy()
    current = np.where(drifts, new_home, home)
    # popularity exponent per user: 1 for the most active, down to 1 - 2 * tail_niche for the least
    quantile = (M - ranks) / max(1, M - 1)
    taste = 1.0 - 2.0 * spec.tail_niche * (1.0 - quantile)

    users, items, stamps = [], [], []
    for u in range(M):
        n = int(n_events[u])
        t = np.sort(rng.integers(0, horizon, size=n))
        switch = n // 2 if drifts[u] else n
        from_home = rng.random(n) < 1.0 - spec.noise
        chosen = np.empty(n, dtype=np.int64)
        for lo, hi, c in ((0, switch, home[u]), (switch, n, new_home[u])):
            idx = np.nonzero(from_home[lo:hi])[0] + lo
            if len(idx):
                p = pop[c] if taste[u] == 1.0 else pop[c] ** taste[u] / (pop[c] ** taste[u]).sum()
                chosen[idx] = rng.choice(members[c], size=len(idx), replace=False, p=p)
        noisy = np.nonzero(~from_home)[0]
        if len(noisy):
            taken = set(chosen[from_home].tolist())
            pool = np.setdiff1d(np.arange(N), np.fromiter(taken, dtype=np.int64, count=len(taken)))
            chosen[noisy] = rng.choice(pool, size=len(noisy), replace=False)
        users.append(np.full(n, u))
        items.append(chosen)
        stamps.append(t)

    lg = InteractionLog(np.concatenate(users), np.concatenate(items), np.concatenate(stamps), item_cluster,
                        np.arange(M, dtype=np.int64), np.arange(N, dtype=np.int64), C)
    counts = lg.counts()
    deciles = np.searchsorted(np.quantile(counts, np.linspace(0.1, 0.9, 9)), counts, side="right")
    cluster_code = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0DE])).normal(0, 1 / np.sqrt(6), (C, 6))
    profiles = {u: UserProfile(u, np.concatenate([cluster_code[current[u]], [deciles[u] / 9 * 2 - 1, 1.0]]))
                for u in range(M)}
    return lg, profiles


def home_clusters(lg: InteractionLog) -> np.ndarray:
    """Most frequent category per user (ties -> lowest id)."""
    out = np.zeros(lg.n_users, dtype=np.int64)
    cats = lg.cat
    for u in range(lg.n_users):
        s = lg.events_of(u)
        if s.stop > s.start:
            out[u] = int(np.bincount(cats[s], minlength=lg.n_cats).argmax())
    return out


# ---------------------------------------------------------------- persistence

def write_dataset(directory, lg: InteractionLog, profiles: dict, manifest_extra: dict | None = None):
    """``interactions.txt`` (fixed width), ``users.txt``, ``items.txt``, ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "interactions.txt", "w") as fh:
        fh.write(f"# DCCL-DATA 1 users={lg.n_users} items={lg.n_items} categories={lg.n_cats} records={len(lg)}\n")
        for u, i, t in zip(lg.user.tolist(), lg.item.tolist(), lg.ts.tolist()):
            fh.write(f"{u:8d} {i:8d} {t:12d}\n")
    with open(d / "users.txt", "w") as fh:
        for u, key in enumerate(lg.user_keys.tolist()):
            p = profiles[key]
            vec = p.features if isinstance(p, UserProfile) else p
            fh.write(f"{u:8d} {key:12d} " + " ".join(f"{x:.17g}" for x in vec) + "\n")
    with open(d / "items.txt", "w") as fh:
        for i, (key, c) in enumerate(zip(lg.item_keys.tolist(), lg.item_cat.tolist())):
            fh.write(f"{i:8d} {key:12d} {c:6d}\n")
    manifest = dict(lg.summary())
    manifest.update(manifest_extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(directory) -> tuple[InteractionLog, dict[int, UserProfile]]:
    d = Path(directory)
    with open(d / "interactions.txt") as fh:
        head = fh.readline().split()
        if head[:3] != ["#", "DCCL-DATA", "1"]:
            raise DataError(f"{d}/interactions.txt: bad header")
        meta = dict(kv.split("=") for kv in head[3:])
        raw = np.loadtxt(fh, dtype=np.int64, ndmin=2)
    if len(raw) != int(meta["records"]):
        raise DataError(f"record count mismatch: header {meta['records']}, found {len(raw)}")
    users = np.loadtxt(d / "users.txt", dtype=str, ndmin=2)
    items = np.loadtxt(d / "items.txt", dtype=np.int64, ndmin=2)
    ukeys = users[:, 1].astype(np.int64)
    profiles = {int(k): UserProfile(int(k), users[r, 2:].astype(np.float64)) for r, k in enumerate(ukeys)}
    lg = InteractionLog(raw[:, 0], raw[:, 1], raw[:, 2], items[:, 2], ukeys, items[:, 1], int(meta["categories"]))
    return lg, profiles
