"""UIB loss, analytic gradients of the full model, negative sampling and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import hypergraph as hgmod
from .dataset import Split
from .evaluation import evaluate
from .hypergraph import CompleteHypergraph
from .model import GraphOperators, LayerTrace, ModelParams, combine_layers, forward, init_embeddings
from .optim import OptimizerState, adamw_step
from .sparse import SparseBinaryMatrix

__all__ = [
    "TrainConfig",
    "AblationFlags",
    "ABLATIONS",
    "Batch",
    "Gradients",
    "TrainingDiverged",
    "History",
    "softplus",
    "uib_loss",
    "sample_negatives",
    "NegativeSampler",
    "score_gradients",
    "backward",
    "loss_and_gradients",
    "build_operators",
    "rng_streams",
    "train",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    weight_decay: float = 0.1
    epochs: int = 300
    batch_size: int = 1024
    negatives_per_positive: int = 1
    hypergraph_dropout: float = 0.2
    ub_dropout: float = 0.01
    seed: int = 0
    layer_scheme: str = "literal"
    dim: int = 64
    alpha: float = 0.5
    beta: float = 0.01
    n_layers: int = 2
    init_std: float = 0.01
    eval_every: int = 1
    eval_k: int = 20

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("hypergraph_dropout", "ub_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        if self.layer_scheme not in ("literal", "depth_L"):
            raise ValueError(f"unknown layer_scheme {self.layer_scheme!r}")
        if self.batch_size < 1 or self.negatives_per_positive < 1 or self.epochs < 0:
            raise ValueError("batch_size and negatives_per_positive must be >= 1, epochs >= 0")


@dataclass(frozen=True)
class AblationFlags:
    disable_ub_conv: bool = False
    zero_h_uu: bool = False
    zero_h_bb: bool = False
    ii_identity: bool = False


ABLATIONS = {
    "hed": AblationFlags(),
    "hed-c": AblationFlags(disable_ub_conv=True),
    "hed-cu": AblationFlags(disable_ub_conv=True, zero_h_uu=True),
    "hed-cb": AblationFlags(disable_ub_conv=True, zero_h_bb=True),
    "hed-cbu": AblationFlags(disable_ub_conv=True, zero_h_uu=True, zero_h_bb=True),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Batch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray  # (n, negatives_per_positive)


@dataclass
class Gradients:
    e_u: np.ndarray
    e_i: np.ndarray
    e_b: np.ndarray
    w: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"e_u": self.e_u, "e_i": self.e_i, "e_b": self.e_b, "w": self.w}


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def uib_loss(pos_scores, neg_scores, boundaries_pos, boundaries_neg) -> float:
    """Positives are penalised below their user's boundary, negatives above it."""
    return float(
        softplus(np.asarray(boundaries_pos) - pos_scores).sum()
        + softplus(np.asarray(neg_scores) - boundaries_neg).sum()
    )


# --- negative sampling ------------------------------------------------------


def sample_negatives(
    train: SparseBinaryMatrix, user: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    """``k`` distinct bundles the user has not interacted with, uniformly."""
    seen, _ = train.row(user)
    candidates = np.setdiff1d(np.arange(train.n_cols), seen, assume_unique=True)
    if len(candidates) == 0:
        raise ValueError(f"user {user} has interacted with every bundle")
    if k > len(candidates):
        raise ValueError(f"user {user} has only {len(candidates)} unseen bundles, asked for {k}")
    return rng.choice(candidates, size=k, replace=False)


class NegativeSampler:
    """Vectorised rejection sampler equivalent to :func:`sample_negatives` per row."""

    def __init__(self, train: SparseBinaryMatrix):
        self.n_bundles = train.n_cols
        self.keys = train.row_indices * train.n_cols + train.col_indices
        self.free = train.n_cols - np.diff(train.row_offsets)

    def _seen(self, users, cand):
        keys = users[:, None] * self.n_bundles + cand
        pos = np.minimum(np.searchsorted(self.keys, keys), max(len(self.keys) - 1, 0))
        return self.keys[pos] == keys if len(self.keys) else np.zeros(keys.shape, bool)

    def sample(self, users: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        short = self.free[users] < k
        if short.any():
            u = int(users[np.flatnonzero(short)[0]])
            raise ValueError(f"user {u} has only {self.free[u]} unseen bundles, asked for {k}")
        cand = rng.integers(0, self.n_bundles, size=(len(users), k))
        while True:
            bad = self._seen(users, cand)
            for j in range(1, k):
                bad[:, j] |= (cand[:, :j] == cand[:, j : j + 1]).any(axis=1)
            n_bad = int(bad.sum())
            if n_bad == 0:
                return cand
            cand[bad] = rng.integers(0, self.n_bundles, size=n_bad)


# --- gradients --------------------------------------------------------------


def score_gradients(final_u, final_b, w, batch: Batch):
    """Batch loss and its gradients w.r.t. the final embeddings and ``w``."""
    fu = final_u[batch.users]
    y_pos = np.einsum("nd,nd->n", fu, final_b[batch.pos])
    y_neg = np.einsum("nd,nkd->nk", fu, final_b[batch.neg])
    b_u = fu @ w
    loss = uib_loss(y_pos, y_neg, b_u, b_u[:, None])

    g_pos = _sigmoid(b_u - y_pos)
    g_neg = _sigmoid(y_neg - b_u[:, None])
    d_ypos = -g_pos
    d_yneg = g_neg
    d_b = g_pos - g_neg.sum(axis=1)

    d_fu_rows = (
        d_ypos[:, None] * final_b[batch.pos]
        + np.einsum("nk,nkd->nd", d_yneg, final_b[batch.neg])
        + d_b[:, None] * w
    )
    d_final_u = np.zeros_like(final_u)
    np.add.at(d_final_u, batch.users, d_fu_rows)
    d_final_b = np.zeros_like(final_b)
    np.add.at(d_final_b, batch.pos, d_ypos[:, None] * fu)
    np.add.at(d_final_b, batch.neg, d_yneg[:, :, None] * fu[:, None, :])
    d_w = d_b @ fu
    return loss, d_final_u, d_final_b, d_w


def backward(
    batch: Batch, trace: LayerTrace, params: ModelParams, ops: GraphOperators
) -> tuple[float, Gradients]:
    """Exact gradients of the batch loss for all parameters, via the adjoint operator chains."""
    U, I, _ = params.sizes
    if len(trace.layers) != params.n_passes + 1 or trace.layers[0].shape != (
        sum(params.sizes),
        params.dim,
    ):
        raise ValueError("trace does not belong to these parameters")
    final_u, final_b = combine_layers(trace, U, I)
    loss, d_fu, d_fb, d_w = score_gradients(final_u, final_b, params.w, batch)

    weights = 1.0 / (np.arange(1, len(trace.layers) + 1) + 1.0)
    seed = np.zeros_like(trace.layers[0])
    seed[:U] = d_fu
    seed[U + I :] = d_fb
    g = weights[-1] * seed
    a, b = params.alpha, params.beta
    for layer in range(len(trace.passes) - 1, -1, -1):
        rec = trace.passes[layer]
        g_bar = g.copy()
        g_bar[:U] *= a
        g_bar[U + I :] *= a
        if rec.user_op is not None:
            g_bar[:U] += b * rec.user_op.apply_transpose(g[:U])
            g_bar[U + I :] += b * rec.bundle_op.apply_transpose(g[U + I :])
        g = rec.h_op.apply_transpose(g_bar) + weights[layer] * seed
    return loss, Gradients(g[:U].copy(), g[U : U + I].copy(), g[U + I :].copy(), d_w)


def loss_and_gradients(
    params: ModelParams, ops: GraphOperators, batch: Batch, **forward_kw
) -> tuple[float, Gradients]:
    _, _, trace = forward(params, ops, **forward_kw)
    return backward(batch, trace, params, ops)


# --- training loop ----------------------------------------------------------

_STREAMS = {"split": 0, "init": 1, "sampling": 2, "dropout_h": 3, "dropout_ub": 4}


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed."""
    return {name: np.random.default_rng([seed, tag]) for name, tag in _STREAMS.items()}


def build_operators(
    hg: CompleteHypergraph, a_ub_train: SparseBinaryMatrix, flags: AblationFlags = AblationFlags()
) -> GraphOperators:
    """Apply the ablation flags to ``hg`` and normalise everything."""
    if flags.zero_h_uu or flags.zero_h_bb:
        hg = hgmod.with_blocks_zeroed(hg, uu=flags.zero_h_uu, bb=flags.zero_h_bb)
    if flags.ii_identity:
        hg = hgmod.with_ii_mode(hg, "identity")
    h_op = hgmod.normalize_hypergraph(hg)
    if flags.disable_ub_conv:
        u_op = b_op = None
    else:
        u_op, b_op = hgmod.normalize_ub(a_ub_train)
    return GraphOperators(h_op, u_op, b_op, hg.n_users, hg.n_items, hg.n_bundles)


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [row["loss"] for row in self.epochs]


def train(
    split: Split,
    hg: CompleteHypergraph,
    cfg: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    *,
    params: ModelParams | None = None,
    on_epoch=None,
) -> tuple[ModelParams, History, GraphOperators]:
    """Train from scratch (or from ``params``) and return the final parameters.

    The returned operators are the ablated, undropped ones used for evaluation.
    """
    streams = rng_streams(cfg.seed)
    ops = build_operators(hg, split.train, flags)
    U, I, B = hg.n_users, hg.n_items, hg.n_bundles
    if split.train.shape != (U, B):
        raise ValueError(f"split has shape {split.train.shape}, hypergraph expects {(U, B)}")
    if params is None:
        params = init_embeddings(
            U, I, B, cfg.dim, streams["init"], std=cfg.init_std,
            alpha=cfg.alpha, beta=cfg.beta, n_layers=cfg.n_layers, layer_scheme=cfg.layer_scheme,
        )
    state = OptimizerState()
    sampler = NegativeSampler(split.train)
    pos_u, pos_b = split.train.row_indices, split.train.col_indices
    n_pos = len(pos_u)
    history = History()
    tables = {"e_u": params.e_u, "e_i": params.e_i, "e_b": params.e_b, "w": params.w}

    for epoch in range(1, cfg.epochs + 1):
        perm = streams["sampling"].permutation(n_pos)
        total = 0.0
        for start in range(0, n_pos, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            users = pos_u[idx]
            neg = sampler.sample(users, cfg.negatives_per_positive, streams["sampling"])
            batch = Batch(users, pos_b[idx], neg)
            loss, grads = loss_and_gradients(
                params, ops, batch,
                train_mode=True, h_dropout=cfg.hypergraph_dropout, ub_dropout=cfg.ub_dropout,
                rng_h=streams["dropout_h"], rng_ub=streams["dropout_ub"],
            )
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.as_dict().values()):
                raise TrainingDiverged(
                    f"non-finite loss/gradient at epoch {epoch}, batch starting {start} "
                    f"(loss={loss}, lr={cfg.learning_rate})"
                )
            adamw_step(
                tables, grads.as_dict(), state, cfg.learning_rate, cfg.weight_decay,
                no_decay=("w",),
            )
            total += loss
        row = {"epoch": epoch, "loss": total / max(n_pos, 1)}
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            if split.test.nnz and cfg.eval_k <= B:
                fu, fb, _ = forward(params, ops)
                rep = evaluate(fu, fb, split.train, split.test, (cfg.eval_k,))
                row["recall"] = rep.recall[cfg.eval_k]
                row["ndcg"] = rep.ndcg[cfg.eval_k]
        history.epochs.append(row)
        log.debug("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
    return params, history, ops
