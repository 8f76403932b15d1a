"""Leave-one-out top-N evaluation: HR@N and NDCG@N over frozen candidate sets."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .graph import MultiBehaviorGraph
from .interactions import HeldOut, Split

CUTOFFS = (1, 3, 5, 7, 9, 10)


class InvariantError(AssertionError):
    """An evaluation report violates HR/NDCG invariants."""


@dataclass(frozen=True)
class RankRecord:
    user: int
    rank: int
    scores: np.ndarray = field(repr=False)


def rank_user(scores, candidates, positive: int, user: int = -1) -> RankRecord:
    """Rank (1-based) of ``positive`` among ``candidates``; ties go to the smaller item id."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.int64)
    hits = np.flatnonzero(candidates == positive)
    if len(hits) == 0:
        raise ValueError(f"positive item {positive} is not among the candidates")
    s = scores[hits[0]]
    rank = 1 + int(np.sum(scores > s) + np.sum((scores == s) & (candidates < positive)))
    return RankRecord(user, rank, scores)


def candidate_matrix(held: HeldOut) -> np.ndarray:
    """(n, 1 + negatives) item ids with the held-out positive in column 0."""
    return np.concatenate([held.items[:, None], held.negatives], axis=1)


def rank_all(scores: np.ndarray, candidates: np.ndarray, pos_col: np.ndarray | None = None) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    candidates = np.ascontiguousarray(candidates, dtype=np.int64)
    if pos_col is None:
        pos_col = np.zeros(len(scores), dtype=np.int64)
    return kernels.rank_of_positive(scores, candidates, np.ascontiguousarray(pos_col, dtype=np.int64))


def metrics(ranks, n: int) -> tuple[float, float]:
    """HR@n and NDCG@n for one relevant item per user."""
    if n < 1:
        raise ValueError("cutoff must be at least 1")
    ranks = np.asarray([r.rank if isinstance(r, RankRecord) else r for r in ranks], dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no rank records")
    hit = ranks <= n
    gain = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(hit.mean()), float(gain.mean())


@dataclass
class EvalReport:
    cutoffs: tuple[int, ...]
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    digest: str = ""
    label: str = "gnmr"

    def check(self) -> None:
        prev_hr = prev_ndcg = 0.0
        for n in sorted(self.cutoffs):
            h, g = self.hr[n], self.ndcg[n]
            if not (0.0 <= g <= h + 1e-12 <= 1.0 + 1e-12):
                raise InvariantError(f"@{n}: need 0 <= NDCG ({g}) <= HR ({h}) <= 1")
            if h < prev_hr or g < prev_ndcg - 1e-15:
                raise InvariantError(f"@{n}: metrics decreased with the cutoff")
            prev_hr, prev_ndcg = h, g

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "users": self.n_users,
            "config_digest": self.digest,
            "cutoffs": list(self.cutoffs),
            "hr": {str(n): self.hr[n] for n in self.cutoffs},
            "ndcg": {str(n): self.ndcg[n] for n in self.cutoffs},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cut = tuple(int(n) for n in d["cutoffs"])
        return cls(cut, {n: float(d["hr"][str(n)]) for n in cut},
                   {n: float(d["ndcg"][str(n)]) for n in cut}, int(d["users"]),
                   d.get("config_digest", ""), d.get("label", "gnmr"))


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: one row per report, HR@n then NDCG@n columns."""
    if not reports:
        return ""
    cut = reports[0].cutoffs
    head = ["model"] + [f"HR@{n}" for n in cut] + [f"NDCG@{n}" for n in cut]
    rows = [[r.label] + [f"{r.hr[n]:.4f}" for n in cut] + [f"{r.ndcg[n]:.4f}" for n in cut]
            for r in reports]
    widths = [max(len(row[c]) for row in [head] + rows) for c in range(len(head))]
    fmt = lambda row: "  ".join(v.ljust(w) if c == 0 else v.rjust(w)  # noqa: E731
                                for c, (v, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def report_from_ranks(ranks: np.ndarray, cutoffs: Sequence[int] = CUTOFFS, digest: str = "",
                      label: str = "gnmr") -> EvalReport:
    cutoffs = tuple(sorted(set(int(n) for n in cutoffs)))
    hr, ndcg = {}, {}
    for n in cutoffs:
        hr[n], ndcg[n] = metrics(ranks, n)
    report = EvalReport(cutoffs, hr, ndcg, len(ranks), digest, label)
    report.check()
    return report


def score_candidates(user_emb: np.ndarray, item_emb: np.ndarray, held: HeldOut) -> np.ndarray:
    cand = candidate_matrix(held)
    return np.einsum("nd,nmd->nm", user_emb[held.users], item_emb[cand])


def evaluate_embeddings(user_emb: np.ndarray, item_emb: np.ndarray, held: HeldOut,
                        cutoffs: Sequence[int] = CUTOFFS, digest: str = "",
                        label: str = "gnmr") -> EvalReport:
    scores = score_candidates(user_emb, item_emb, held)
    return report_from_ranks(rank_all(scores, candidate_matrix(held)), cutoffs, digest, label)


def evaluate(model, split: Split, cutoffs: Sequence[int] = CUTOFFS, held: HeldOut | None = None,
             digest: str = "", label: str = "gnmr") -> EvalReport:
    """Score every held-out user's candidates with one forward pass over the training graph."""
    if (model.n_users, model.n_items) != (split.train.n_users, split.train.n_items):
        raise ValueError(
            f"model id space ({model.n_users} users, {model.n_items} items) does not match the "
            f"split ({split.train.n_users} users, {split.train.n_items} items)")
    if model.hyper.n_behaviors != split.train.n_behaviors:
        raise ValueError("model and split disagree on the number of behaviors")
    graph = MultiBehaviorGraph.build(split.train)
    eu, ev = model.embeddings(graph)
    return evaluate_embeddings(eu, ev, split.test if held is None else held, cutoffs, digest, label)


def popularity_baseline(split: Split, cutoffs: Sequence[int] = CUTOFFS,
                        held: HeldOut | None = None) -> EvalReport:
    """Score items by their target-behavior frequency in the training partition."""
    held = split.test if held is None else held
    counts = np.bincount(split.train.behavior_events(split.target_index)[:, 1],
                         minlength=split.train.n_items).astype(np.float64)
    cand = candidate_matrix(held)
    return report_from_ranks(rank_all(counts[cand], cand), cutoffs, label="popularity")


def write_report(report: EvalReport, out_dir, stem: str = "report",
                 extra: Sequence[EvalReport] = (), config: dict | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / f"{stem}.json"
    txt = out_dir / f"{stem}.txt"
    payload = report.to_dict()
    if extra:
        payload["baselines"] = [r.to_dict() for r in extra]
    if config is not None:
        payload["run_config"] = config
    js.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    txt.write_text(format_table([report, *extra]), encoding="utf-8")
    return js, txt


def expected_random_hr(n: int, candidates: int = 100) -> float:
    return min(1.0, n / candidates)


def random_rank_ndcg(n: int, candidates: int = 100) -> float:
    return sum(1.0 / math.log2(r + 1) for r in range(1, min(n, candidates) + 1)) / candidates
