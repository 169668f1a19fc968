"""Client data allocation: non-iid shards and heterogeneity statistics.

Scheme 1 gives every client roughly the same number of records drawn from
a client-specific number of categories; scheme 2 does the same with
lognormally skewed client volumes.

Allocation runs in three steps:

1. each client gets a target volume and a category count drawn uniformly
   from ``classes_per_client``;
2. category slots are handed out largest-weight-first to the category with
   the most unclaimed supply (so demand per category tracks supply), then
   patched so every category has an owner;
3. records are dealt one at a time to the owning client that is furthest
   below its target, after every ownership edge has received one record.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from flsim.data import DatasetManifest, category_counts
from flsim.errors import ConfigurationError, FormatError


class Scheme(IntEnum):
    UNBALANCED_CLASSES = 1
    UNBALANCED_CLASSES_AND_VOLUMES = 2


@dataclass(frozen=True)
class PartitionPlan:
    scheme: Scheme = Scheme.UNBALANCED_CLASSES
    n_clients: int = 100
    classes_per_client: tuple[int, int] = (1, 3)
    volume_skew: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(int(self.scheme)))
        object.__setattr__(self, "classes_per_client", tuple(int(x) for x in self.classes_per_client))
        lo, hi = self.classes_per_client
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"invalid classes_per_client range {self.classes_per_client}")
        if self.volume_skew < 0:
            raise ConfigurationError("volume_skew must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = int(self.scheme)
        d["classes_per_client"] = list(self.classes_per_client)
        return d


@dataclass
class ClientShard:
    client_id: int
    record_indices: list[int]
    category_histogram: dict[str, int]
    seed: int

    def __len__(self) -> int:
        return len(self.record_indices)

    @property
    def n_categories(self) -> int:
        return sum(1 for v in self.category_histogram.values() if v > 0)


def split_holdout(manifest: DatasetManifest, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Random (holdout, training) index split, both sorted."""
    if not 0 <= fraction < 1:
        raise ConfigurationError(f"holdout fraction must be in [0, 1), got {fraction}")
    n = len(manifest)
    n_hold = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(perm[:n_hold].tolist()), sorted(perm[n_hold:].tolist())


def _target_volumes(rng, plan: PartitionPlan, n_records: int) -> np.ndarray:
    n = plan.n_clients
    if plan.scheme == Scheme.UNBALANCED_CLASSES:
        weights = np.full(n, 1.0 / n)
        base = np.zeros(n, dtype=int)
        rest = n_records
    else:
        w = rng.lognormal(0.0, plan.volume_skew, size=n)
        weights = w / w.sum()
        # room for the minimum number of categories on every client
        floor = plan.classes_per_client[0]
        base = np.full(n, floor, dtype=int)
        rest = n_records - n * floor
    # randomise which clients receive the rounding remainders
    perm = rng.permutation(n)
    extra = np.empty(n, dtype=int)
    extra[perm] = category_counts(rest, weights[perm])
    return base + extra


def _category_counts_per_client(rng, plan, volumes, n_present) -> np.ndarray:
    lo, hi = plan.classes_per_client
    k = rng.integers(lo, hi + 1, size=plan.n_clients)
    k = np.minimum(np.minimum(k, n_present), volumes)
    # every category needs an owner
    cap = min(hi, n_present)
    order = rng.permutation(plan.n_clients)
    for limit in (cap, n_present):
        for c in itertools.cycle(order):
            if k.sum() >= n_present:
                break
            if not any(k[o] < min(limit, volumes[o]) for o in order):
                break
            if k[c] < min(limit, volumes[c]):
                k[c] += 1
        if k.sum() >= n_present:
            break
    if k.sum() < n_present:
        raise ConfigurationError("too few records per client to cover every category")
    return k


def _assign_ownership(rng, k, volumes, supply) -> list[set[int]]:
    n_clients, n_cat = len(k), len(supply)
    tiebreak = rng.permutation(n_cat)
    slots = [(volumes[c] / k[c], c) for c in rng.permutation(n_clients) for _ in range(k[c])]
    slots.sort(key=lambda s: -s[0])  # stable: ties keep the random client order
    remaining = supply.astype(np.float64)
    owners = np.zeros(n_cat, dtype=int)
    owned: list[set[int]] = [set() for _ in range(n_clients)]
    for weight, c in slots:
        best = None
        for j in range(n_cat):
            if j in owned[c] or owners[j] >= supply[j]:
                continue
            key = (remaining[j], -tiebreak[j])
            if best is None or key > best[0]:
                best = (key, j)
        if best is None:
            continue
        j = best[1]
        owned[c].add(j)
        owners[j] += 1
        remaining[j] -= weight

    for j in range(n_cat):
        if owners[j] > 0:
            continue
        # move the slot of the most over-subscribed shared category
        donors = [
            (remaining[j2], c, j2)
            for c in range(n_clients)
            if j not in owned[c]
            for j2 in owned[c]
            if owners[j2] >= 2
        ]
        if not donors:
            raise ConfigurationError("cannot give every category an owner")
        _, c, j2 = min(donors)
        owned[c].remove(j2)
        owners[j2] -= 1
        remaining[j2] += volumes[c] / k[c]
        owned[c].add(j)
        owners[j] += 1
        remaining[j] -= volumes[c] / k[c]
    return owned


def partition(manifest: DatasetManifest, plan: PartitionPlan, indices=None) -> list[ClientShard]:
    """Split ``indices`` (default: every record) into ``plan.n_clients`` disjoint shards."""
    pool = np.arange(len(manifest)) if indices is None else np.array(sorted(indices), dtype=np.int64)
    if len(np.unique(pool)) != len(pool):
        raise ConfigurationError("duplicate record indices")
    n_records = len(pool)
    if plan.classes_per_client[1] > len(manifest.category_set):
        raise ConfigurationError(
            f"classes_per_client max {plan.classes_per_client[1]} exceeds "
            f"{len(manifest.category_set)} categories"
        )
    if plan.n_clients > n_records:
        raise ConfigurationError(f"{plan.n_clients} clients but only {n_records} records")
    if plan.n_clients * plan.classes_per_client[0] > n_records:
        raise ConfigurationError(
            f"{plan.n_clients} clients x {plan.classes_per_client[0]} categories each "
            f"needs more than {n_records} records"
        )

    rng = np.random.default_rng(plan.seed)
    record_cat = manifest.categories()[pool]
    present = np.unique(record_cat)
    local = np.searchsorted(present, record_cat)
    supply = np.bincount(local, minlength=len(present))

    volumes = _target_volumes(rng, plan, n_records)
    k = _category_counts_per_client(rng, plan, volumes, len(present))
    owned = _assign_ownership(rng, k, volumes, supply)

    by_cat = [pool[local == j][rng.permutation(int(supply[j]))] for j in range(len(present))]
    cursor = np.zeros(len(present), dtype=int)
    assigned: list[list[int]] = [[] for _ in range(plan.n_clients)]
    owners_of = [[c for c in range(plan.n_clients) if j in owned[c]] for j in range(len(present))]
    for j, cs in enumerate(owners_of):
        for c in cs:
            assigned[c].append(int(by_cat[j][cursor[j]]))
            cursor[j] += 1

    # interleave categories so they drain at the same relative rate
    queue = sorted(
        (
            ((i + 0.5) / (supply[j] - cursor[j]), j)
            for j in range(len(present))
            for i in range(int(supply[j] - cursor[j]))
        )
    )
    vol = np.array([len(a) for a in assigned], dtype=np.float64)
    edge = np.zeros((plan.n_clients, len(present)))
    for j, cs in enumerate(owners_of):
        edge[cs, j] = 1
    for _, j in queue:
        c = min(owners_of[j], key=lambda c: ((vol[c] + 1) / volumes[c], edge[c, j], c))
        edge[c, j] += 1
        assigned[c].append(int(by_cat[j][cursor[j]]))
        cursor[j] += 1
        vol[c] += 1

    _rebalance(assigned, edge, owners_of, volumes, cat_index={int(i): int(j) for i, j in zip(pool, local)})

    client_seeds = np.random.SeedSequence(plan.seed).spawn(plan.n_clients)
    shards = []
    cat_of = dict(zip(pool.tolist(), record_cat.tolist()))
    for c in range(plan.n_clients):
        idx = sorted(assigned[c])
        hist: dict[str, int] = {}
        for i in idx:
            name = manifest.category_set[cat_of[i]]
            hist[name] = hist.get(name, 0) + 1
        seed = int(client_seeds[c].generate_state(1)[0])
        shards.append(ClientShard(c, idx, dict(sorted(hist.items())), seed))
    return shards


def _rebalance(assigned, edge, owners_of, targets, cat_index) -> None:
    """Shift records along chains of clients sharing a category until every
    volume meets its target or no chain exists. A client never gives away
    its last record of a category, so category counts are preserved."""
    n = len(assigned)
    owned_by = [[j for j in range(edge.shape[1]) if edge[c, j] > 0] for c in range(n)]
    while True:
        vol = np.array([len(a) for a in assigned])
        over = [c for c in range(n) if vol[c] > targets[c]]
        under = {c for c in range(n) if vol[c] < targets[c]}
        if not over or not under:
            return
        path = None
        for src in over:
            prev = {src: None}
            frontier = [src]
            while frontier and path is None:
                nxt = []
                for c in frontier:
                    for j in owned_by[c]:
                        if edge[c, j] < 2:
                            continue
                        for c2 in owners_of[j]:
                            if c2 in prev:
                                continue
                            prev[c2] = (c, j)
                            if c2 in under:
                                path = (c2, prev)
                                break
                            nxt.append(c2)
                        if path:
                            break
                    if path:
                        break
                frontier = nxt
            if path:
                break
        if path is None:
            return
        c2, prev = path
        while prev[c2] is not None:
            c, j = prev[c2]
            rec = max(i for i in assigned[c] if cat_index[i] == j)
            assigned[c].remove(rec)
            assigned[c2].append(rec)
            edge[c, j] -= 1
            edge[c2, j] += 1
            c2 = c


# ---------------------------------------------------------------------------
# heterogeneity statistics


@dataclass
class HeterogeneityReport:
    rows: list[dict]
    summary: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["client_id", "category", "count", "fraction"])
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()


def heterogeneity_report(shards: list[ClientShard], manifest: DatasetManifest) -> HeterogeneityReport:
    cats = manifest.category_set
    rows = []
    dists = []
    entropies = []
    for s in shards:
        counts = np.array([s.category_histogram.get(c, 0) for c in cats], dtype=np.float64)
        total = counts.sum()
        p = counts / total if total else counts
        dists.append(p)
        nz = p[p > 0]
        entropies.append(float(-(nz * np.log(nz)).sum()) + 0.0)
        for c, n, f in zip(cats, counts, p):
            if n:
                rows.append({"client_id": s.client_id, "category": c, "count": int(n), "fraction": float(f)})
    volumes = np.array([len(s) for s in shards], dtype=np.float64)
    tv = [0.5 * np.abs(a - b).sum() for a, b in itertools.combinations(dists, 2)]
    summary = {
        "n_clients": len(shards),
        "volume_mean": float(volumes.mean()),
        "volume_std": float(volumes.std()),
        "volume_cv": float(volumes.std() / volumes.mean()) if volumes.mean() else 0.0,
        "volume_max_min_ratio": float(volumes.max() / volumes.min()) if volumes.min() else float("inf"),
        "mean_category_entropy": float(np.mean(entropies)),
        "mean_pairwise_tv": float(np.mean(tv)) if tv else 0.0,
    }
    return HeterogeneityReport(rows, summary)


# ---------------------------------------------------------------------------
# shard index files


def save_shards(path, shards: list[ClientShard], plan: PartitionPlan, manifest: DatasetManifest,
                holdout: list[int] | None = None) -> None:
    doc = {
        "format": "flsim-shards/1",
        "dataset_sha256": manifest.digest(),
        "n_records": len(manifest),
        "category_set": manifest.category_set,
        "plan": plan.to_dict(),
        "holdout": list(holdout or []),
        "clients": {
            str(s.client_id): {"indices": s.record_indices, "seed": s.seed} for s in shards
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_shards(path, manifest: DatasetManifest | None = None) -> tuple[list[ClientShard], dict]:
    """Shards plus the raw document (plan, holdout, dataset digest)."""
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "flsim-shards/1":
            raise FormatError(f"{path}: not a shard index file")
        if manifest is not None and manifest.digest() != doc["dataset_sha256"]:
            raise FormatError(f"{path}: shard file was built for a different dataset")
        shards = []
        for cid, entry in sorted(doc["clients"].items(), key=lambda kv: int(kv[0])):
            idx = [int(i) for i in entry["indices"]]
            hist: dict[str, int] = {}
            if manifest is not None:
                for i in idx:
                    c = manifest.records[i].category
                    hist[c] = hist.get(c, 0) + 1
            shards.append(ClientShard(int(cid), idx, dict(sorted(hist.items())), int(entry["seed"])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed shard index ({exc})") from exc
    return shards, doc
