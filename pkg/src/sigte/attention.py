"""Scaled dot-product attention with a signature read-out.

The attention sub-layer here performs, per head: (1) scaled dot-product
attention over projected queries/keys/values, (2) a position-wise linear map
down to a small channel count so the signature stays tractable, (3) the
truncated signature transform of the resulting path. Each head adds the
signature of the (reduced) input sequence itself to the signature of the
attended sequence, and head outputs are concatenated along the feature axis.

Two read-out modes exist. `stream` emits the signature of every prefix, so
sequence length is preserved and layers stack. `pooled` emits one signature
vector for the whole sequence per head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_last,
    matmul,
    mean_rows,
    scale,
    softmax_rows,
    transpose,
)
from .errors import ConfigError, ShapeError
from .signature import path_signature, sig_dim

__all__ = [
    "SigAttentionConfig",
    "HeadParams",
    "init_head_params",
    "scaled_dot_attention",
    "reduced_sig",
    "sig_attention",
    "additive_multi_head",
    "glorot",
]

MODES = ("stream", "pooled")


@dataclass(frozen=True)
class SigAttentionConfig:
    """Widths of the signature-attention sub-layer.

    d_k is d_model / h. Both the input branch and the attention branch reduce
    to d_presig channels before the signature so their outputs are addable.
    """

    d_model: int = 768
    h: int = 8
    d_presig: int = 32
    sig_order: int = 2
    mode: str = "stream"

    def __post_init__(self):
        if self.d_model % self.h != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by h={self.h}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        sig_dim(self.d_presig, self.sig_order)  # validates and guards overflow

    @property
    def d_k(self) -> int:
        return self.d_model // self.h

    @property
    def sig_width(self) -> int:
        """Feature width of one head's signature vector."""
        return sig_dim(self.d_presig, self.sig_order)

    @property
    def stream(self) -> bool:
        return self.mode == "stream"


@dataclass
class HeadParams:
    """Per-head projections: Wq/Wk/Wv into d_k, Wx reducing the raw input to
    d_presig, and (Wr, br) reducing the attended sequence to d_presig."""

    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wx: Tensor
    Wr: Tensor
    br: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.Wq", self.Wq),
            (f"{prefix}.Wk", self.Wk),
            (f"{prefix}.Wv", self.Wv),
            (f"{prefix}.Wx", self.Wx),
            (f"{prefix}.Wr", self.Wr),
            (f"{prefix}.br", self.br),
        ]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def init_head_params(cfg: SigAttentionConfig, rng: np.random.Generator) -> HeadParams:
    return HeadParams(
        Wq=glorot(rng, cfg.d_model, cfg.d_k),
        Wk=glorot(rng, cfg.d_model, cfg.d_k),
        Wv=glorot(rng, cfg.d_model, cfg.d_k),
        Wx=glorot(rng, cfg.d_model, cfg.d_presig),
        Wr=glorot(rng, cfg.d_k, cfg.d_presig),
        br=Tensor(np.zeros(cfg.d_presig), requires_grad=True),
    )


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over a shared sequence length."""
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError(
            f"attention expects matrices, got {Q.shape}, {K.shape}, {V.shape}"
        )
    if Q.shape != K.shape or Q.shape[0] != V.shape[0]:
        raise ShapeError(
            f"attention shapes do not agree: Q {Q.shape}, K {K.shape}, V {V.shape}"
        )
    d_k = Q.shape[1]
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(scores), V)


def _sig_or_identity(y: Tensor, order: int, stream: bool, use_signature: bool) -> Tensor:
    """Signature of the path y, or the ablation that skips the transform.

    The ablation keeps parameter shapes unchanged by zero-padding the reduced
    path (its per-position rows in stream mode, its mean over positions in
    pooled mode) out to the signature width.
    """
    if use_signature:
        return path_signature(y, order, stream=stream)
    d = y.shape[1]
    width = sig_dim(d, order)
    flat = y if stream else mean_rows(y)
    if width == d:
        return flat
    pad_shape = (y.shape[0], width - d) if stream else (width - d,)
    return concat_last([flat, Tensor(np.zeros(pad_shape))])


def reduced_sig(
    x: Tensor,
    Wr: Tensor,
    br: Tensor,
    order: int,
    mode: str = "stream",
    use_signature: bool = True,
) -> Tensor:
    """Position-wise linear reduction followed by the signature transform.

    Returns [L x sig_dim] in stream mode or [sig_dim] in pooled mode. A
    single-position input yields the zero signature (a one-point path).
    """
    y = add(matmul(x, Wr), br)
    return _sig_or_identity(y, order, mode == "stream", use_signature)


def sig_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    head: HeadParams,
    cfg: SigAttentionConfig,
    use_signature: bool = True,
) -> Tensor:
    """Attention, then the reduction + signature read-out of the attended sequence."""
    return reduced_sig(
        scaled_dot_attention(Q, K, V), head.Wr, head.br, cfg.sig_order, cfg.mode, use_signature
    )


def additive_multi_head(
    X: Tensor,
    heads: list[HeadParams],
    cfg: SigAttentionConfig,
    use_signature: bool = True,
) -> Tensor:
    """Self-attention over X with per-head additive signature branches.

    head_i = signature(X Wx_i) + sig_attention(X Wq_i, X Wk_i, X Wv_i);
    heads are concatenated along the feature axis, giving width h * sig_dim.
    """
    if X.ndim != 2 or X.shape[1] != cfg.d_model:
        raise ShapeError(f"input must be [L x {cfg.d_model}], got {X.shape}")
    outputs = []
    for head in heads:
        x_branch = _sig_or_identity(
            matmul(X, head.Wx), cfg.sig_order, cfg.stream, use_signature
        )
        att_branch = sig_attention(
            matmul(X, head.Wq),
            matmul(X, head.Wk),
            matmul(X, head.Wv),
            head,
            cfg,
            use_signature,
        )
        outputs.append(add(x_branch, att_branch))
    return concat_last(outputs)
