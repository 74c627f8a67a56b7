"""Losses, hard mining, and the descriptor training loop.

Each training step takes one tuple (query scan, its positives, its
negatives), pushes every member through the full model in a single batch,
and updates all parameters with Adam.  Two losses are provided: a paired
hinge over (positive, negative) couples, and a hard-mining variant that
weights the worst positive and the best negative, which converges in fewer
epochs on the same data.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import pipeline as pl
from . import tensor as tt
from .errors import ConfigError, ContractError, DegenerateInputError
from .optim import Adam

LOSS_KINDS = ("triplet", "imtrihard")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25  # hinge margin
    lam: float = 1e-4  # weight of the mean-positive-distance term
    kind: str = "imtrihard"
    clamp_at_zero: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"margin must be positive, got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"compression weight must be >= 0, got {self.lam}")
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}, expected {LOSS_KINDS}")


def sq_dist(g_a, g_b) -> tt.Tensor:
    """Squared Euclidean distance between two descriptors (differentiable)."""
    g_a, g_b = tt.as_tensor(g_a), tt.as_tensor(g_b)
    if g_a.shape != g_b.shape:
        raise ContractError(f"descriptor dims differ: {g_a.shape} vs {g_b.shape}")
    diff = tt.sub(g_a, g_b)
    return tt.tsum(tt.mul(diff, diff))


def _distances(g_q, group) -> tt.Tensor:
    return tt.stack([sq_dist(g_q, g) for g in group], axis=0)


def triplet_loss(g_q, positives, negatives, cfg: LossConfig,
                 rng: np.random.Generator) -> tt.Tensor:
    """Paired hinge: sum over (p, n) couples of max(d(q,p) - d(q,n) + alpha, 0).

    Couples are formed positionwise over min(|P|, |N|) members after an
    rng-driven shuffle of each side, so no fixed positive always meets the
    same negative.
    """
    if not positives or not negatives:
        raise ContractError("triplet loss requires at least one positive and one negative")
    p_order = rng.permutation(len(positives))
    n_order = rng.permutation(len(negatives))
    pairs = min(len(positives), len(negatives))
    terms = []
    for i in range(pairs):
        d_p = sq_dist(g_q, positives[int(p_order[i])])
        d_n = sq_dist(g_q, negatives[int(n_order[i])])
        terms.append(tt.relu(tt.add(tt.sub(d_p, d_n), cfg.alpha)))
    return tt.tsum(tt.stack(terms, axis=0))


def mine_hardest(g_q, positives, negatives):
    """(index of farthest positive, index of closest negative); ties to the
    lowest index."""
    if not positives or not negatives:
        raise ContractError("mining requires at least one positive and one negative")
    q = tt.as_tensor(g_q).data
    d_p = [float(np.sum((q - tt.as_tensor(g).data) ** 2)) for g in positives]
    d_n = [float(np.sum((q - tt.as_tensor(g).data) ** 2)) for g in negatives]
    return int(np.argmax(d_p)), int(np.argmin(d_n))


def imtrihard_loss(g_q, positives, negatives, cfg: LossConfig) -> tt.Tensor:
    """Hard-mining loss: lam * mean_p d(q,p) + k_p*(alpha + max_p d(q,p))
    - k_n * min_n d(q,n), clamped at zero when configured.

    Gradients flow through every positive via the mean term and through the
    selected hardest positive / hardest negative via the max/min subgradient.
    """
    if not positives or not negatives:
        raise ContractError("loss requires at least one positive and one negative")
    k_p, k_n = len(positives), len(negatives)
    d_p = _distances(g_q, positives)
    d_n = _distances(g_q, negatives)
    loss = tt.add(
        tt.mul(tt.tmean(d_p), cfg.lam),
        tt.sub(
            tt.mul(tt.add(tt.tmax(d_p), cfg.alpha), float(k_p)),
            tt.mul(tt.tmin(d_n), float(k_n)),
        ),
    )
    if cfg.clamp_at_zero:
        loss = tt.relu(loss)
    return loss


def tuple_loss(g_q, positives, negatives, cfg: LossConfig,
               rng: np.random.Generator) -> tt.Tensor:
    if cfg.kind == "triplet":
        return triplet_loss(g_q, positives, negatives, cfg, rng)
    return imtrihard_loss(g_q, positives, negatives, cfg)


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "imtrihard"
    alpha: float = 0.25
    lam: float = 1e-4
    lr: float = 5e-6
    epochs: int = 20
    k_p: int = 6
    k_n: int = 6
    seed: int = 42
    overlap_threshold: float = 0.3

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.k_p < 1 or self.k_n < 1:
            raise ConfigError("k_p and k_n must be >= 1")
        if not 0.0 < self.overlap_threshold < 1.0:
            raise ConfigError(
                f"overlap threshold must lie in (0, 1), got {self.overlap_threshold}"
            )

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, lam=self.lam, kind=self.loss)


TRAIN_KEYS = {
    "loss": str, "alpha": float, "lambda": float, "lr": float, "epochs": int,
    "k_p": int, "k_n": int, "seed": int, "overlap_threshold": float,
}


def train_config_from_kv(entries: dict) -> TrainConfig:
    fields = {}
    for key, val in entries.items():
        if key not in TRAIN_KEYS:
            raise ContractError(f"unknown training config key {key!r}")
        try:
            parsed = TRAIN_KEYS[key](val)
        except ValueError:
            raise ContractError(f"bad value for {key}: {val!r}")
        fields["lam" if key == "lambda" else key] = parsed
    return TrainConfig(**fields)


def train_config_pairs(cfg: TrainConfig):
    return [
        ("loss", cfg.loss), ("alpha", cfg.alpha), ("lambda", cfg.lam),
        ("lr", cfg.lr), ("epochs", cfg.epochs), ("k_p", cfg.k_p),
        ("k_n", cfg.k_n), ("seed", cfg.seed),
        ("overlap_threshold", cfg.overlap_threshold),
    ]


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    mean_loss: float
    val_f1max: float  # nan when there is no validation split


def split_validation(tuples):
    """Last 10% of tuples held out; they are never trained on."""
    n_val = len(tuples) // 10
    if n_val == 0:
        return list(tuples), []
    return list(tuples[:-n_val]), list(tuples[-n_val:])


def _descriptor_rows(out: tt.Tensor):
    dim = out.shape[1]
    return [tt.reshape(tt.narrow(out, 0, i, 1), (dim,)) for i in range(out.shape[0])]


def _forward_tuple(tup, images, params, cfg: pl.ModelConfig,
                   rng: np.random.Generator, train: bool):
    ids = [tup.query, *tup.positives, *tup.negatives]
    batch = pl.prepare_batch([images[i] for i in ids])
    out = pl.model_forward(batch, params, cfg, rng=rng, train=train)
    rows = _descriptor_rows(out)
    n_p = len(tup.positives)
    return rows[0], rows[1:1 + n_p], rows[1 + n_p:]


def validation_f1max(val_tuples, images, params, cfg: pl.ModelConfig):
    """Rank the query against its own candidates: each (query, positive)
    scores as a true pair and each (query, negative) as a false pair at
    similarity -distance; F1 is maximized over thresholds."""
    from .retrieval import pr_metrics

    scores = []
    for tup in val_tuples:
        g_q, g_ps, g_ns = _forward_tuple(tup, images, params, cfg,
                                         rng=None, train=False)
        q = g_q.data
        for g in g_ps:
            scores.append((-float(np.sum((q - g.data) ** 2)), True))
        for g in g_ns:
            scores.append((-float(np.sum((q - g.data) ** 2)), False))
    _, f1max = pr_metrics(scores)
    return f1max


def train(tuples, images, params: pl.ModelParams, model_cfg: pl.ModelConfig,
          cfg: TrainConfig, out_dir, max_steps: int = 0, log=None):
    """Run the optimization and checkpoint every epoch.

    tuples: TrainingTuple list; images: scan id -> RangeImage.  max_steps
    caps the total number of optimizer steps (0 means no cap).  Returns the
    per-epoch reports and writes report.csv plus epoch checkpoints under
    out_dir.
    """
    if not tuples:
        raise ContractError("training requires at least one tuple")
    os.makedirs(out_dir, exist_ok=True)
    train_tuples, val_tuples = split_validation(tuples)
    loss_cfg = cfg.loss_config()
    adam = Adam(params.named(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    reports = []
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_tuples))
        losses = []
        for pos, idx in enumerate(order):
            tup = train_tuples[int(idx)]
            try:
                with tt.Tape() as tape:
                    g_q, g_ps, g_ns = _forward_tuple(tup, images, params,
                                                     model_cfg, rng, train=True)
                    loss = tuple_loss(g_q, g_ps, g_ns, loss_cfg, rng)
            except (DegenerateInputError, ContractError) as exc:
                # A value contract tripped by an optimizer update (for
                # example step sizes driven out of their domain) is a
                # divergence, not a usage error.
                raise DegenerateInputError(
                    f"training diverged at epoch {epoch}, tuple {pos} "
                    f"(query {tup.query}): {exc}"
                ) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise DegenerateInputError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"tuple {pos} (query {tup.query})"
                )
            tt.backward(loss, tape)
            adam.step()
            losses.append(value)
            steps += 1
            if max_steps and steps >= max_steps:
                break
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        f1 = (validation_f1max(val_tuples, images, params, model_cfg)
              if val_tuples else float("nan"))
        reports.append(EpochReport(epoch=epoch, mean_loss=mean_loss, val_f1max=f1))
        pl.save_model(os.path.join(out_dir, f"epoch_{epoch:03d}.omck"), params)
        if log:
            log(f"epoch {epoch}: mean_loss={mean_loss:.6f} val_f1max={f1:.4f}")
        if max_steps and steps >= max_steps:
            break
    pl.save_model(os.path.join(out_dir, "final.omck"), params)
    write_report(os.path.join(out_dir, "report.csv"), reports)
    return reports


def write_report(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "val_f1max"])
        for r in reports:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.val_f1max)])
