"""Multi-behavior interaction logs: loading, rating mapping, splits and synthetic data."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

RATING_BEHAVIORS = ("dislike", "neutral", "like")
MAX_BEHAVIORS = 16


class DataError(ValueError):
    """Malformed or inconsistent interaction data."""


@dataclass(frozen=True)
class BehaviorSchema:
    """Ordered behavior names and which one is the prediction target.

    ``dislike_max`` and ``like_min`` control how ``*`` lines with a rating are
    mapped onto the ``dislike``/``neutral``/``like`` behaviors.
    """

    names: tuple[str, ...]
    target_index: int
    dislike_max: float = 2.0
    like_min: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not 1 <= len(self.names) <= MAX_BEHAVIORS:
            raise ValueError(f"need 1..{MAX_BEHAVIORS} behavior types, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"behavior names must be unique: {self.names}")
        if not 0 <= self.target_index < len(self.names):
            raise ValueError(f"target_index {self.target_index} out of range")
        if not self.dislike_max < self.like_min:
            raise ValueError("dislike_max must be below like_min")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def target(self) -> str:
        return self.names[self.target_index]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown behavior {name!r}; schema has {list(self.names)}") from None

    @classmethod
    def ratings(cls, like_min: float = 4.0, dislike_max: float = 2.0) -> "BehaviorSchema":
        return cls(RATING_BEHAVIORS, RATING_BEHAVIORS.index("like"), dislike_max, like_min)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "target_index": self.target_index,
                "dislike_max": self.dislike_max, "like_min": self.like_min}

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorSchema":
        return cls(tuple(d["names"]), int(d["target_index"]),
                   float(d.get("dislike_max", 2.0)), float(d.get("like_min", 4.0)))


def map_rating_to_behavior(rating: float, dislike_max: float = 2.0, like_min: float = 4.0) -> int:
    """Index into ``RATING_BEHAVIORS`` for an explicit rating.

    ``r <= dislike_max`` is dislike, ``r >= like_min`` is like, anything between
    is neutral.
    """
    r = float(rating)
    if not math.isfinite(r):
        raise DataError(f"non-finite rating {rating!r}")
    if r <= dislike_max:
        return 0
    if r >= like_min:
        return 2
    return 1


@dataclass(frozen=True)
class InteractionTensor:
    """Sparse binary tensor of (user, item, behavior) events.

    ``events`` is an (E, 3) int64 array, sorted and free of duplicates.
    ``timestamps`` is aligned with ``events`` (NaN where unknown) or None.
    """

    n_users: int
    n_items: int
    n_behaviors: int
    events: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((ev[:, 2], ev[:, 1], ev[:, 0]))
        ev = ev[order]
        ts = None
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.float64)[order]
        if len(ev):
            dup = np.all(ev[1:] == ev[:-1], axis=1)
            if dup.any():
                raise DataError("duplicate (user, item, behavior) events")
            for col, bound, label in ((0, self.n_users, "user"), (1, self.n_items, "item"),
                                      (2, self.n_behaviors, "behavior")):
                if ev[:, col].min() < 0 or ev[:, col].max() >= bound:
                    raise DataError(f"{label} index out of range [0, {bound})")
        ev.flags.writeable = False
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_users, self.n_items, self.n_behaviors)

    def behavior_events(self, k: int) -> np.ndarray:
        """(n, 2) array of (user, item) pairs under behavior ``k``."""
        return self.events[self.events[:, 2] == k][:, :2]

    def counts_per_behavior(self) -> np.ndarray:
        return np.bincount(self.events[:, 2], minlength=self.n_behaviors)

    def items_of(self, k: int) -> list[np.ndarray]:
        """Sorted item ids per user under behavior ``k``."""
        pairs = self.behavior_events(k)
        bounds = np.searchsorted(pairs[:, 0], np.arange(self.n_users + 1))
        return [pairs[bounds[u]:bounds[u + 1], 1] for u in range(self.n_users)]

    def dense(self) -> np.ndarray:
        x = np.zeros(self.shape, dtype=np.float64)
        x[self.events[:, 0], self.events[:, 1], self.events[:, 2]] = 1.0
        return x

    def without(self, triples: np.ndarray) -> "InteractionTensor":
        """Copy with the given (user, item, behavior) triples removed."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if not len(triples):
            return self
        key = _triple_keys(self.events, self.shape)
        drop = np.isin(key, _triple_keys(triples, self.shape))
        ts = None if self.timestamps is None else self.timestamps[~drop]
        return InteractionTensor(self.n_users, self.n_items, self.n_behaviors, self.events[~drop], ts)

    def restrict_behaviors(self, keep: Sequence[int]) -> "InteractionTensor":
        """Drop events whose behavior is not in ``keep``; ids and K are unchanged."""
        mask = np.isin(self.events[:, 2], np.asarray(list(keep), dtype=np.int64))
        ts = None if self.timestamps is None else self.timestamps[mask]
        return InteractionTensor(self.n_users, self.n_items, self.n_behaviors, self.events[mask], ts)


def _triple_keys(ev: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    _, J, K = shape
    return (ev[:, 0] * J + ev[:, 1]) * K + ev[:, 2]


@dataclass(frozen=True)
class IdMaps:
    """Raw id strings for each compact user and item index."""

    users: tuple[str, ...]
    items: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"users": list(self.users), "items": list(self.items)}

    @classmethod
    def from_dict(cls, d: dict) -> "IdMaps":
        return cls(tuple(d["users"]), tuple(d["items"]))

    @classmethod
    def identity(cls, n_users: int, n_items: int) -> "IdMaps":
        return cls(tuple(str(u) for u in range(n_users)), tuple(str(i) for i in range(n_items)))


def _id_order(raw: set[str]) -> list[str]:
    if all(r.lstrip("-").isdigit() for r in raw):
        return sorted(raw, key=int)
    return sorted(raw)


def load_events(path, schema: BehaviorSchema) -> tuple[InteractionTensor, IdMaps]:
    """Read a TSV event file: ``user<TAB>item<TAB>behavior[<TAB>timestamp[<TAB>rating]]``.

    ``behavior`` may be ``*``, in which case the rating column is mapped with
    :func:`map_rating_to_behavior` onto the schema's dislike/neutral/like
    names. Lines starting with ``#`` and blank lines are ignored. Duplicate
    events are kept once, with the latest timestamp.
    """
    path = Path(path)
    rows: list[tuple[str, str, int, float]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 3 or len(parts) > 5 or not parts[0] or not parts[1] or not parts[2]:
                raise DataError(f"{path}:{lineno}: expected 3-5 tab-separated fields")
            user, item, behavior = parts[0], parts[1], parts[2]
            ts = math.nan
            if len(parts) >= 4 and parts[3] != "":
                try:
                    ts = float(parts[3])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad timestamp {parts[3]!r}") from None
            if behavior == "*":
                if len(parts) < 5 or parts[4] == "":
                    raise DataError(f"{path}:{lineno}: '*' behavior needs a rating column")
                try:
                    rating = float(parts[4])
                    mapped = map_rating_to_behavior(rating, schema.dislike_max, schema.like_min)
                except (ValueError, DataError) as err:
                    raise DataError(f"{path}:{lineno}: bad rating {parts[4]!r}") from err
                k = schema.index(RATING_BEHAVIORS[mapped])
            else:
                try:
                    k = schema.index(behavior)
                except DataError as err:
                    raise DataError(f"{path}:{lineno}: {err}") from None
            rows.append((user, item, k, ts))
    if not rows:
        raise DataError(f"{path}: no events")

    users = _id_order({r[0] for r in rows})
    items = _id_order({r[1] for r in rows})
    uidx = {u: n for n, u in enumerate(users)}
    iidx = {i: n for n, i in enumerate(items)}
    latest: dict[tuple[int, int, int], float] = {}
    for user, item, k, ts in rows:
        key = (uidx[user], iidx[item], k)
        prev = latest.get(key)
        if prev is None or (not math.isnan(ts) and (math.isnan(prev) or ts > prev)):
            latest[key] = ts
    events = np.array(list(latest.keys()), dtype=np.int64)
    stamps = np.array(list(latest.values()), dtype=np.float64)
    x = InteractionTensor(len(users), len(items), schema.K, events,
                          None if np.isnan(stamps).all() else stamps)
    return x, IdMaps(tuple(users), tuple(items))


def write_events(path, x: InteractionTensor, schema: BehaviorSchema, ids: IdMaps | None = None) -> None:
    """Write ``x`` in canonical form: sorted, deduplicated, behaviors by name."""
    ids = ids or IdMaps.identity(x.n_users, x.n_items)
    lines = []
    for n, (u, i, k) in enumerate(x.events):
        fields = [ids.users[u], ids.items[i], schema.names[k]]
        if x.timestamps is not None and not math.isnan(x.timestamps[n]):
            fields.append(repr(float(x.timestamps[n])))
        lines.append("\t".join(fields))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# -- splitting ---------------------------------------------------------------


@dataclass(frozen=True)
class HeldOut:
    """One held-out target item per user plus its frozen negative candidates."""

    users: np.ndarray
    items: np.ndarray
    negatives: np.ndarray  # (n_users, n_negatives)

    def __len__(self) -> int:
        return len(self.users)

    def to_dict(self) -> dict:
        return {"users": self.users.tolist(), "items": self.items.tolist(),
                "negatives": self.negatives.tolist(), "n_negatives": int(self.negatives.shape[1])}

    @classmethod
    def from_dict(cls, d: dict) -> "HeldOut":
        neg = np.asarray(d["negatives"], dtype=np.int64)
        width = d.get("n_negatives", neg.shape[1] if neg.ndim == 2 else 0)
        return cls(np.asarray(d["users"], dtype=np.int64), np.asarray(d["items"], dtype=np.int64),
                   neg.reshape(len(d["users"]), width))

    @classmethod
    def empty(cls, n_negatives: int = 99) -> "HeldOut":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros((0, n_negatives), dtype=np.int64))


@dataclass(frozen=True)
class Split:
    train: InteractionTensor
    test: HeldOut
    target_index: int
    validation: HeldOut = field(default_factory=HeldOut.empty)
    excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "shape": list(self.train.shape),
            "target_index": self.target_index,
            "train_events": self.train.events.tolist(),
            "test": self.test.to_dict(),
            "validation": self.validation.to_dict(),
            "excluded": self.excluded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        I, J, K = d["shape"]
        train = InteractionTensor(I, J, K, np.asarray(d["train_events"], dtype=np.int64))
        return cls(train, HeldOut.from_dict(d["test"]), int(d["target_index"]),
                   HeldOut.from_dict(d["validation"]), int(d.get("excluded", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Split":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def leave_one_out_split(x: InteractionTensor, seed: int, target_index: int | None = None,
                        n_negatives: int = 99, validation: bool = False,
                        exclude_auxiliary: bool = False) -> Split:
    """Hold out one target-behavior event per eligible user.

    The held-out event is the latest by timestamp when timestamps exist,
    otherwise a seeded-random one. Users need at least two target events
    (three with ``validation``). Negatives are drawn without replacement from
    items the user never touched under the target behavior (under any
    behavior if ``exclude_auxiliary``); users with fewer than ``n_negatives``
    such items are excluded from evaluation and counted.
    """
    kt = x.n_behaviors - 1 if target_index is None else target_index
    rng = np.random.default_rng(seed)
    per_user = x.items_of(kt)
    if exclude_auxiliary:
        touched = [np.unique(np.concatenate([x.items_of(k)[u] for k in range(x.n_behaviors)]))
                   for u in range(x.n_users)]
    else:
        touched = per_user
    need = 3 if validation else 2
    ts_lookup = None
    if x.timestamps is not None:
        mask = x.events[:, 2] == kt
        ts_lookup = {(int(u), int(i)): t for (u, i, _), t in zip(x.events[mask], x.timestamps[mask])}

    test_rows, val_rows, removed = [], [], []
    excluded = 0
    all_items = np.arange(x.n_items)
    for u in range(x.n_users):
        items = per_user[u]
        if len(items) < need:
            continue
        pool = np.setdiff1d(all_items, touched[u], assume_unique=True)
        if len(pool) < n_negatives:
            excluded += 1
            continue
        picks = _pick_held_out(u, items, 2 if validation else 1, rng, ts_lookup)
        for slot, item in enumerate(picks):
            neg = np.sort(rng.choice(pool, size=n_negatives, replace=False))
            (test_rows if slot == 0 else val_rows).append((u, item, neg))
            removed.append((u, item, kt))
    if excluded:
        log.warning("%d user(s) excluded from evaluation: fewer than %d eligible negatives",
                    excluded, n_negatives)

    def pack(rows) -> HeldOut:
        if not rows:
            return HeldOut.empty(n_negatives)
        return HeldOut(np.array([r[0] for r in rows], dtype=np.int64),
                       np.array([r[1] for r in rows], dtype=np.int64),
                       np.stack([r[2] for r in rows]).astype(np.int64))

    return Split(x.without(np.array(removed, dtype=np.int64)), pack(test_rows), kt,
                 pack(val_rows), excluded)


def _pick_held_out(u, items, count, rng, ts_lookup) -> list[int]:
    if ts_lookup is not None:
        stamps = np.array([ts_lookup.get((u, int(i)), math.nan) for i in items])
        if not np.isnan(stamps).all():
            stamps = np.where(np.isnan(stamps), -np.inf, stamps)
            # latest first; ties by larger item id for determinism
            order = np.lexsort((-items, -stamps))
            return [int(items[j]) for j in order[:count]]
    return [int(i) for i in rng.choice(items, size=count, replace=False)]


# -- synthetic data ----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Planted low-rank multi-behavior data.

    Each user gets ``target_per_user`` (Poisson, at least 3) target items: the
    top-ranked items under a noisy low-rank affinity. Every auxiliary behavior
    adds ``aux_per_user`` events; each is drawn from the user's top
    ``pool_factor * n_target`` items with probability ``rho`` (the next-ranked
    unused item once that pool is used up) and uniformly from all items
    otherwise. The last behavior is the target.
    """

    n_users: int
    n_items: int
    n_behaviors: int
    latent_dim: int = 8
    noise: float = 0.5
    rho: float = 0.9
    target_per_user: float = 10.0
    aux_per_user: float = 15.0
    pool_factor: float = 2.0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_behaviors", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.n_behaviors <= MAX_BEHAVIORS:
            raise ValueError(f"n_behaviors must be in 1..{MAX_BEHAVIORS}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.target_per_user < 3 or self.target_per_user > self.n_items:
            raise ValueError(f"infeasible density: target_per_user={self.target_per_user} "
                             f"with {self.n_items} items")
        if self.aux_per_user < 0 or self.aux_per_user > self.n_items:
            raise ValueError(f"infeasible density: aux_per_user={self.aux_per_user} "
                             f"with {self.n_items} items")
        if self.pool_factor < 1:
            raise ValueError("pool_factor must be at least 1")

    def schema(self) -> BehaviorSchema:
        names = tuple(f"aux{k + 1}" for k in range(self.n_behaviors - 1)) + ("target",)
        return BehaviorSchema(names, self.n_behaviors - 1)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def synth_generate(spec: SynthSpec, seed: int) -> InteractionTensor:
    rng = np.random.default_rng(seed)
    I, J, K = spec.n_users, spec.n_items, spec.n_behaviors
    U = rng.standard_normal((I, spec.latent_dim))
    V = rng.standard_normal((J, spec.latent_dim))
    affinity = U @ V.T / math.sqrt(spec.latent_dim) + spec.noise * rng.standard_normal((I, J))
    ranking = np.argsort(-affinity, axis=1, kind="stable")

    events = []
    kt = K - 1
    for u in range(I):
        n_t = int(min(J, 3 + rng.poisson(spec.target_per_user - 3)))
        for j in ranking[u, :n_t]:
            events.append((u, int(j), kt))
        pool = ranking[u, :max(n_t, min(J, int(round(spec.pool_factor * n_t))))]
        for k in range(K - 1):
            n_a = int(min(J, rng.poisson(spec.aux_per_user)))
            chosen: set[int] = set()
            while len(chosen) < n_a:
                if rng.random() < spec.rho:
                    if len(chosen.intersection(pool)) < len(pool):
                        j = int(pool[rng.integers(len(pool))])
                    else:  # pool used up: continue down the planted ranking
                        j = int(next(i for i in ranking[u] if int(i) not in chosen))
                else:
                    j = int(rng.integers(J))
                chosen.add(j)
            events.extend((u, j, k) for j in sorted(chosen))
    return InteractionTensor(I, J, K, np.array(events, dtype=np.int64))


def aux_target_correlation(x: InteractionTensor, target_index: int | None = None) -> float:
    """Point-biserial (phi) correlation between 'any auxiliary event' and 'target event' over all cells."""
    kt = x.n_behaviors - 1 if target_index is None else target_index
    I, J = x.n_users, x.n_items
    target = np.zeros(I * J, dtype=bool)
    aux = np.zeros(I * J, dtype=bool)
    cells = x.events[:, 0] * J + x.events[:, 1]
    is_t = x.events[:, 2] == kt
    target[cells[is_t]] = True
    aux[cells[~is_t]] = True
    if target.all() or not target.any() or aux.all() or not aux.any():
        return 0.0
    return float(np.corrcoef(target.astype(float), aux.astype(float))[0, 1])


def density(x: InteractionTensor) -> float:
    return len(x) / float(x.n_users * x.n_items * x.n_behaviors)
