"""Pairwise hinge-loss training loop with Adam and stepped learning-rate decay."""
from __future__ import annotations

import csv
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .evaluation import evaluate_embeddings
from .graph import MultiBehaviorGraph, sample_batch
from .interactions import Split
from .model import GNMR, forward, score
from .ndgrad import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingAborted(NonFiniteError):
    """Training hit a non-finite value; carries the last finite model and the log so far."""

    def __init__(self, message: str, last_good: GNMR, log: "TrainLog"):
        super().__init__(message)
        self.last_good = last_good
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. The learning rate is multiplied by ``decay``
    once every ``decay_every`` epochs."""

    epochs: int = 500
    batch_size: int = 32
    pairs: int = 4
    lr: float = 1e-3
    decay: float = 0.96
    decay_every: int = 20
    reg: float = 1e-2
    seed: int = 0
    mode: str = "full"
    cap: int | None = 64
    patience: int | None = None
    verbose: bool = False

    def problems(self) -> list[str]:
        out = []
        for name in ("epochs", "batch_size", "pairs", "decay_every"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be at least 1")
        if self.lr <= 0:
            out.append("lr must be positive")
        if not 0 < self.decay <= 1:
            out.append("decay must lie in (0, 1]")
        if self.reg < 0:
            out.append("reg must be nonnegative")
        if self.mode not in ("full", "sampled"):
            out.append(f"mode must be 'full' or 'sampled', got {self.mode!r}")
        if self.cap is not None and self.cap < 1:
            out.append("cap must be at least 1")
        if self.patience is not None and self.patience < 1:
            out.append("patience must be at least 1")
        return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    reg: float
    lr: float
    val_hr10: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be appended in order")
        self.records.append(rec)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "reg", "lr", "val_hr10", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.loss), repr(r.reg), repr(r.lr),
                            "" if r.val_hr10 is None else repr(r.val_hr10), f"{r.seconds:.3f}"])


def hinge_loss(pos, neg):
    """``max(0, 1 - pos + neg)``; works on floats, arrays, or tensors (summed)."""
    if isinstance(pos, Tensor) or isinstance(neg, Tensor):
        return nd.sum(nd.relu(1.0 - pos + neg))
    return np.maximum(0.0, 1.0 - np.asarray(pos, dtype=np.float64) + np.asarray(neg, dtype=np.float64))


def target_items(split_or_train, target_index: int) -> list[np.ndarray]:
    train = split_or_train.train if isinstance(split_or_train, Split) else split_or_train
    return train.items_of(target_index)


def sample_pairs(positives: np.ndarray, n_items: int, S: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray] | None:
    """``S`` (positive, negative) item pairs for one user, or None if the user has no pairs.

    Positives are drawn from ``positives`` (with replacement only when there
    are fewer than ``S``); negatives uniformly from the other items, distinct
    whenever enough exist.
    """
    positives = np.asarray(positives, dtype=np.int64)
    n_neg = n_items - len(positives)
    if len(positives) == 0 or n_neg <= 0:
        return None
    pos = rng.choice(positives, size=S, replace=len(positives) < S)
    if n_neg >= S and n_neg <= 4 * S:
        pool = np.setdiff1d(np.arange(n_items), positives, assume_unique=True)
        return pos, rng.choice(pool, size=S, replace=False)
    if n_neg < S:
        pool = np.setdiff1d(np.arange(n_items), positives, assume_unique=True)
        return pos, rng.choice(pool, size=S, replace=True)
    # rejection sampling; positives are sorted
    neg: list[int] = []
    while len(neg) < S:
        j = int(rng.integers(n_items))
        k = np.searchsorted(positives, j)
        if (k < len(positives) and positives[k] == j) or j in neg:
            continue
        neg.append(j)
    return pos, np.asarray(neg, dtype=np.int64)


def regularization(params, reg: float) -> Tensor:
    return nd.sum_squares(params.values()) * reg


def batch_loss(model: GNMR, graph: MultiBehaviorGraph, params: dict[str, Tensor], users: np.ndarray,
               pos: np.ndarray, neg: np.ndarray, cfg: TrainConfig, step_seed: int) -> tuple[Tensor, Tensor]:
    """Hinge sum and regularizer for one batch of (user, positive, negative) triples."""
    full = dict(model.params)
    full.update(params)
    if cfg.mode == "full":
        layers = forward(graph, full, model.hyper, model.flags, model.target_index)
        lu, lp, ln = users, pos, neg
    else:
        sub = sample_batch(graph, users, model.hyper.layers, cfg.cap, step_seed,
                           seed_items=np.concatenate([pos, neg]))
        local = sub.local_graph()
        h0 = (nd.take_rows(full["H0.user"], sub.users), nd.take_rows(full["H0.item"], sub.items))
        layers = forward(local, full, model.hyper, model.flags, model.target_index, H0=h0)
        lu = np.searchsorted(sub.users, users)
        lp = np.searchsorted(sub.items, pos)
        ln = np.searchsorted(sub.items, neg)
    mode = model.hyper.score
    s_pos = score(layers, lu, lp, mode)
    s_neg = score(layers, lu, ln, mode)
    return hinge_loss(s_pos, s_neg), regularization(params, cfg.reg)


def _emit_progress(cfg: TrainConfig, rec: EpochRecord) -> None:
    if cfg.verbose:
        val = "" if rec.val_hr10 is None else f" val_hr10={rec.val_hr10:.4f}"
        print(f"epoch {rec.epoch:4d} loss={rec.loss:.4f} reg={rec.reg:.4f} lr={rec.lr:.3g}{val}",
              file=sys.stderr)


def train(split: Split, model: GNMR, cfg: TrainConfig,
          graph: MultiBehaviorGraph | None = None) -> tuple[GNMR, TrainLog]:
    """Optimize ``model`` on the split's training partition.

    Returns the model with the best validation HR@10 when the split carries a
    validation set, else the final model, together with the per-epoch log.
    ``loss`` in the log is the mean hinge loss per sampled pair.
    """
    errs = cfg.problems()
    if errs:
        raise ValueError("; ".join(errs))
    if len(split.train) == 0:
        raise ValueError("empty training set")
    graph = graph or MultiBehaviorGraph.build(split.train)
    rng = np.random.default_rng(cfg.seed)
    positives = target_items(split, split.target_index)
    n_items = split.train.n_items
    state = nd.AdamState(lr=cfg.lr, decay_rate=cfg.decay)
    params = model.used_params()
    tlog = TrainLog()
    has_val = len(split.validation) > 0
    best = (-1.0, model)
    stale = 0
    last_good = model

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(split.train.n_users)
        hinge_total, n_pairs = 0.0, 0
        reg_value = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            us, ps, ns = [], [], []
            for u in batch:
                pairs = sample_pairs(positives[u], n_items, cfg.pairs, rng)
                if pairs is None:
                    continue
                us.append(np.full(cfg.pairs, u))
                ps.append(pairs[0])
                ns.append(pairs[1])
            if not us:
                continue
            users, pos, neg = np.concatenate(us), np.concatenate(ps), np.concatenate(ns)
            step_seed = int(rng.integers(2**63))
            try:
                with nd.Tape() as tape:
                    hinge, reg = batch_loss(model, graph, params, users, pos, neg, cfg, step_seed)
                    loss = hinge + reg
                grads = tape.backward(loss)
                params = nd.adam_step(
                    params, {n: grads.get(p, np.zeros(p.shape)) for n, p in params.items()}, state)
            except NonFiniteError as err:
                log.error("numerical failure in epoch %d: %s", epoch, err)
                raise TrainingAborted(f"epoch {epoch}: {err}", last_good, tlog) from err
            hinge_total += hinge.item()
            n_pairs += len(users)
            reg_value = reg.item()
        if n_pairs == 0:
            raise ValueError("no user has both positive and negative training items")
        model = model.with_params(params)
        last_good = model
        val = None
        if has_val:
            eu, ev = model.embeddings(graph)
            val = evaluate_embeddings(eu, ev, split.validation, (10,)).hr[10]
        rec = EpochRecord(epoch, hinge_total / n_pairs, reg_value, state.effective_lr, val,
                          time.perf_counter() - t0)
        tlog.append(rec)
        _emit_progress(cfg, rec)
        if epoch % cfg.decay_every == 0:
            state.end_epoch()
        if has_val:
            if val > best[0]:
                best, stale = (val, model), 0
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    break
    return (best[1] if has_val else model), tlog


def save_log(tlog: TrainLog, out_dir) -> Path:
    path = Path(out_dir) / "train_log.csv"
    tlog.write_csv(path)
    return path


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
