"""HED forward pass: stacked embeddings, dual convolution, layer combination, scoring."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .hypergraph import NormalizedOperator, _atomic_write
from .sparse import dropout_nonzeros

__all__ = [
    "ModelParams",
    "GraphOperators",
    "PassRecord",
    "LayerTrace",
    "init_embeddings",
    "dual_conv_pass",
    "forward",
    "combine_layers",
    "layer_weights",
    "score",
    "score_all",
    "boundary",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

LayerScheme = Literal["literal", "depth_L"]


@dataclass
class ModelParams:
    e_u: np.ndarray
    e_i: np.ndarray
    e_b: np.ndarray
    w: np.ndarray
    alpha: float = 0.5
    beta: float = 0.01
    n_layers: int = 2
    layer_scheme: LayerScheme = "literal"

    def __post_init__(self):
        d = self.e_u.shape[1]
        if self.e_i.shape[1] != d or self.e_b.shape[1] != d or self.w.shape != (d,):
            raise ValueError("embedding tables and w must share the dimension")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.layer_scheme not in ("literal", "depth_L"):
            raise ValueError(f"unknown layer_scheme {self.layer_scheme!r}")

    @property
    def dim(self) -> int:
        return self.e_u.shape[1]

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.e_u), len(self.e_i), len(self.e_b)

    def stacked(self) -> np.ndarray:
        return np.vstack([self.e_u, self.e_i, self.e_b])

    @property
    def n_passes(self) -> int:
        """Dual-convolution passes per forward: ``L-1`` literally, ``L`` under ``depth_L``."""
        return self.n_layers - 1 if self.layer_scheme == "literal" else self.n_layers

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.e_u.copy(), self.e_i.copy(), self.e_b.copy(), self.w.copy(),
            self.alpha, self.beta, self.n_layers, self.layer_scheme,
        )


def init_embeddings(
    n_users: int,
    n_items: int,
    n_bundles: int,
    dim: int,
    seed: int | np.random.Generator,
    *,
    std: float = 0.01,
    **hyper,
) -> ModelParams:
    """Draw all three tables i.i.d. from N(0, std^2); the boundary weights start at 0."""
    if min(n_users, n_items, n_bundles, dim) <= 0:
        raise ValueError("all counts must be positive")
    rng = np.random.default_rng(seed)
    e_u = rng.normal(0.0, std, size=(n_users, dim))
    e_i = rng.normal(0.0, std, size=(n_items, dim))
    e_b = rng.normal(0.0, std, size=(n_bundles, dim))
    return ModelParams(e_u, e_i, e_b, np.zeros(dim), **hyper)


@dataclass(frozen=True)
class GraphOperators:
    """Everything a forward pass needs from the graphs.

    ``user_op``/``bundle_op`` are ``None`` when the user-bundle convolution is
    switched off (the HED-c family of ablations).
    """

    h_op: NormalizedOperator
    user_op: NormalizedOperator | None
    bundle_op: NormalizedOperator | None
    n_users: int
    n_items: int
    n_bundles: int

    @property
    def has_ub(self) -> bool:
        return self.user_op is not None


@dataclass
class PassRecord:
    """Operators actually used in one pass (after dropout) plus intermediates."""

    h_op: NormalizedOperator
    user_op: NormalizedOperator | None
    bundle_op: NormalizedOperator | None
    e_bar: np.ndarray
    e_tilde_u: np.ndarray | None
    e_tilde_b: np.ndarray | None


@dataclass
class LayerTrace:
    layers: list[np.ndarray]
    passes: list[PassRecord] = field(default_factory=list)


def dual_conv_pass(
    e: np.ndarray,
    ops: GraphOperators,
    alpha: float,
    beta: float,
    *,
    train_mode: bool = False,
    h_dropout: float = 0.0,
    ub_dropout: float = 0.0,
    rng_h: np.random.Generator | None = None,
    rng_ub: np.random.Generator | None = None,
) -> tuple[np.ndarray, PassRecord]:
    """One HED layer: hypergraph propagation, then user/bundle refinement on the U-B graph."""
    U, I = ops.n_users, ops.n_items
    h_op, u_op, b_op = ops.h_op, ops.user_op, ops.bundle_op
    if train_mode and h_dropout > 0:
        h_op = h_op.with_matrix(dropout_nonzeros(h_op.matrix, h_dropout, rng_h))
    if train_mode and ub_dropout > 0 and u_op is not None:
        dropped = dropout_nonzeros(u_op.matrix, ub_dropout, rng_ub)
        u_op, b_op = u_op.with_matrix(dropped), b_op.with_matrix(dropped)

    e_bar = h_op.apply(e)
    out = e_bar.copy()
    out[:U] *= alpha
    out[U + I :] *= alpha
    t_u = t_b = None
    if u_op is not None:
        t_u = u_op.apply(e_bar[:U])
        t_b = b_op.apply(e_bar[U + I :])
        out[:U] += beta * t_u
        out[U + I :] += beta * t_b
    return out, PassRecord(h_op, u_op, b_op, e_bar, t_u, t_b)


def layer_weights(n_stack: int) -> np.ndarray:
    """Combination weights ``1/(l+1)`` for ``l = 1..n_stack``."""
    return 1.0 / (np.arange(1, n_stack + 1) + 1.0)


def combine_layers(trace: LayerTrace | list, n_users: int, n_items: int):
    """Weighted sum of the user and bundle blocks over all stacked layers."""
    layers = trace.layers if isinstance(trace, LayerTrace) else trace
    weights = layer_weights(len(layers))
    final_u = sum(c * e[:n_users] for c, e in zip(weights, layers))
    final_b = sum(c * e[n_users + n_items :] for c, e in zip(weights, layers))
    return final_u, final_b


def forward(
    params: ModelParams,
    ops: GraphOperators,
    *,
    train_mode: bool = False,
    h_dropout: float = 0.0,
    ub_dropout: float = 0.0,
    rng_h: np.random.Generator | None = None,
    rng_ub: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, LayerTrace]:
    """Run all passes; returns final user and bundle embeddings and the trace."""
    e = params.stacked()
    trace = LayerTrace([e])
    for _ in range(params.n_passes):
        e, rec = dual_conv_pass(
            e, ops, params.alpha, params.beta,
            train_mode=train_mode, h_dropout=h_dropout, ub_dropout=ub_dropout,
            rng_h=rng_h, rng_ub=rng_ub,
        )
        trace.layers.append(e)
        trace.passes.append(rec)
    final_u, final_b = combine_layers(trace, ops.n_users, ops.n_items)
    return final_u, final_b, trace


def score(final_u: np.ndarray, final_b: np.ndarray, user: int, bundle: int) -> float:
    if not (0 <= user < len(final_u)):
        raise IndexError(f"user {user} out of range [0, {len(final_u)})")
    if not (0 <= bundle < len(final_b)):
        raise IndexError(f"bundle {bundle} out of range [0, {len(final_b)})")
    return float(final_u[user] @ final_b[bundle])


def score_all(final_u: np.ndarray, final_b: np.ndarray) -> np.ndarray:
    return final_u @ final_b.T


def boundary(final_u: np.ndarray, w: np.ndarray) -> np.ndarray:
    if w.shape != (final_u.shape[1],):
        raise ValueError(f"w has shape {w.shape}, expected ({final_u.shape[1]},)")
    return final_u @ w


# --- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"HEDC"
CKPT_VERSION = 1
# magic, version, U, I, B, d, L, alpha, beta, layer_scheme
_CKPT_HEADER = struct.Struct("<4sI5Q2dB")
_SCHEMES = ("literal", "depth_L")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    """Header, row-major tables, ``w``, then a CRC32 of everything before it."""
    U, I, B = params.sizes
    body = b"".join(
        [
            _CKPT_HEADER.pack(
                CKPT_MAGIC, CKPT_VERSION, U, I, B, params.dim, params.n_layers,
                params.alpha, params.beta, _SCHEMES.index(params.layer_scheme),
            ),
            np.ascontiguousarray(params.e_u, dtype="<f8").tobytes(),
            np.ascontiguousarray(params.e_i, dtype="<f8").tobytes(),
            np.ascontiguousarray(params.e_b, dtype="<f8").tobytes(),
            np.ascontiguousarray(params.w, dtype="<f8").tobytes(),
        ]
    )
    _atomic_write(Path(path), [body, struct.pack("<I", zlib.crc32(body))])


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    magic, version, U, I, B, d, L, alpha, beta, scheme = _CKPT_HEADER.unpack_from(body)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(body) != _CKPT_HEADER.size + 8 * ((U + I + B) * d + d):
        raise CheckpointError(f"{path}: size does not match header")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    if scheme >= len(_SCHEMES):
        raise CheckpointError(f"{path}: unknown layer scheme {scheme}")
    flat = np.frombuffer(body, dtype="<f8", offset=_CKPT_HEADER.size).astype(np.float64)
    e_u = flat[: U * d].reshape(U, d)
    e_i = flat[U * d : (U + I) * d].reshape(I, d)
    e_b = flat[(U + I) * d : (U + I + B) * d].reshape(B, d)
    w = flat[(U + I + B) * d :]
    return ModelParams(e_u, e_i, e_b, w, alpha, beta, int(L), _SCHEMES[scheme])
