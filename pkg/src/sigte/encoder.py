"""The full encoder stack: positional encoding, the three-sub-layer layer,
and checkpoint serialization.

Each layer runs (1) additive multi-head signature attention, (2) a
position-wise linear map bringing the concatenated signature width back to
d_model, and (3) a position-wise feed-forward block (linear, ReLU, linear).
Dropout follows each sub-layer output and the ReLU; the residual connection
and layer normalization wrap only the third sub-layer, whose input and
output widths match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    HeadParams,
    SigAttentionConfig,
    additive_multi_head,
    glorot,
    init_head_params,
)
from .autodiff import (
    Tensor,
    add,
    dropout,
    layer_norm,
    matmul,
    mean_rows,
    relu,
    reshape,
    take_row,
)
from .errors import ConfigError, ShapeError

__all__ = [
    "STEConfig",
    "STELayerParams",
    "positional_encoding",
    "init_layer_params",
    "init_encoder_params",
    "ste_layer_forward",
    "encoder_forward",
    "pool_output",
    "save_checkpoint",
    "load_checkpoint",
]

POOLINGS = ("mean", "last")


@dataclass(frozen=True)
class STEConfig:
    """Architecture hyperparameters of the encoder stack.

    use_positional_encoding / use_signature are the two ablation toggles; the
    latter swaps every signature transform for a zero-padded identity on the
    reduced path, leaving all parameter shapes unchanged. `pooling` selects
    how the stream-mode output sequence collapses to one prediction input.
    """

    attention: SigAttentionConfig = field(default_factory=SigAttentionConfig)
    n_layers: int = 1
    d_ff_hidden: int | None = None
    p_drop: float = 0.1
    use_positional_encoding: bool = True
    use_signature: bool = True
    pooling: str = "mean"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if self.attention.mode == "pooled" and self.n_layers != 1:
            raise ConfigError("pooled mode collapses the sequence; it requires n_layers=1")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def ff_hidden(self) -> int:
        return self.d_ff_hidden if self.d_ff_hidden is not None else self.d_model

    def to_dict(self) -> dict:
        a = self.attention
        return {
            "d_model": a.d_model,
            "h": a.h,
            "d_presig": a.d_presig,
            "sig_order": a.sig_order,
            "mode": a.mode,
            "n_layers": self.n_layers,
            "d_ff_hidden": self.d_ff_hidden,
            "p_drop": self.p_drop,
            "use_positional_encoding": self.use_positional_encoding,
            "use_signature": self.use_signature,
            "pooling": self.pooling,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "STEConfig":
        known = {
            "d_model", "h", "d_presig", "sig_order", "mode", "n_layers",
            "d_ff_hidden", "p_drop", "use_positional_encoding", "use_signature",
            "pooling",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        att = SigAttentionConfig(
            d_model=d.get("d_model", 768),
            h=d.get("h", 8),
            d_presig=d.get("d_presig", 32),
            sig_order=d.get("sig_order", 2),
            mode=d.get("mode", "stream"),
        )
        return cls(
            attention=att,
            n_layers=d.get("n_layers", 1),
            d_ff_hidden=d.get("d_ff_hidden"),
            p_drop=d.get("p_drop", 0.1),
            use_positional_encoding=d.get("use_positional_encoding", True),
            use_signature=d.get("use_signature", True),
            pooling=d.get("pooling", "mean"),
        )


@dataclass
class STELayerParams:
    """One layer's parameters: attention heads, the width-restoring map of
    sub-layer 2, the feed-forward pair of sub-layer 3, and the layer norm."""

    heads: list[HeadParams]
    W_ff1: Tensor
    W_ff2a: Tensor
    b_ff2a: Tensor
    W_ff2b: Tensor
    b_ff2b: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, head in enumerate(self.heads):
            out.extend(head.named(f"{prefix}.head{i}"))
        out.extend(
            [
                (f"{prefix}.W_ff1", self.W_ff1),
                (f"{prefix}.W_ff2a", self.W_ff2a),
                (f"{prefix}.b_ff2a", self.b_ff2a),
                (f"{prefix}.W_ff2b", self.W_ff2b),
                (f"{prefix}.b_ff2b", self.b_ff2b),
                (f"{prefix}.ln_gain", self.ln_gain),
                (f"{prefix}.ln_bias", self.ln_bias),
            ]
        )
        return out


def positional_encoding(L: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table: PE[t, 2i] = sin(t / 10000^(2i/d)), cos on odd columns."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    if L < 1:
        raise ConfigError(f"positional encoding needs L >= 1, got {L}")
    t = np.arange(L)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2) / d_model)
    pe = np.empty((L, d_model))
    pe[:, 0::2] = np.sin(t * freq)
    pe[:, 1::2] = np.cos(t * freq)
    return pe


def init_layer_params(cfg: STEConfig, rng: np.random.Generator) -> STELayerParams:
    a = cfg.attention
    concat_width = a.h * a.sig_width
    return STELayerParams(
        heads=[init_head_params(a, rng) for _ in range(a.h)],
        W_ff1=glorot(rng, concat_width, cfg.d_model),
        W_ff2a=glorot(rng, cfg.d_model, cfg.ff_hidden),
        b_ff2a=Tensor(np.zeros(cfg.ff_hidden), requires_grad=True),
        W_ff2b=glorot(rng, cfg.ff_hidden, cfg.d_model),
        b_ff2b=Tensor(np.zeros(cfg.d_model), requires_grad=True),
        ln_gain=Tensor(np.ones(cfg.d_model), requires_grad=True),
        ln_bias=Tensor(np.zeros(cfg.d_model), requires_grad=True),
    )


def init_encoder_params(cfg: STEConfig, rng: np.random.Generator) -> list[STELayerParams]:
    return [init_layer_params(cfg, rng) for _ in range(cfg.n_layers)]


def ste_layer_forward(
    x: Tensor,
    params: STELayerParams,
    cfg: STEConfig,
    training: bool,
    rng: np.random.Generator,
) -> Tensor:
    """One encoder layer. Stream mode maps [L x d_model] -> [L x d_model];
    pooled mode collapses the sequence to a 1-row output."""
    p = cfg.p_drop
    s1 = dropout(
        additive_multi_head(x, params.heads, cfg.attention, cfg.use_signature),
        p, training, rng,
    )
    if s1.ndim == 1:  # pooled: one signature vector per head, concatenated
        s1 = reshape(s1, (1, s1.shape[0]))
    s2 = dropout(matmul(s1, params.W_ff1), p, training, rng)
    inner = dropout(relu(add(matmul(s2, params.W_ff2a), params.b_ff2a)), p, training, rng)
    ff = dropout(add(matmul(inner, params.W_ff2b), params.b_ff2b), p, training, rng)
    return layer_norm(add(s2, ff), params.ln_gain, params.ln_bias)


def encoder_forward(
    embeddings: Tensor,
    layers: list[STELayerParams],
    cfg: STEConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Positional encoding (when enabled) plus the layer stack.

    Returns [L x d_model] in stream mode, or the flat [d_model] vector in
    pooled mode (n_layers must then be 1).
    """
    if len(layers) != cfg.n_layers:
        raise ConfigError(f"got {len(layers)} layer params for n_layers={cfg.n_layers}")
    if embeddings.ndim != 2 or embeddings.shape[1] != cfg.d_model:
        raise ShapeError(
            f"embeddings must be [L x {cfg.d_model}], got {embeddings.shape}"
        )
    if training and rng is None:
        raise ConfigError("training mode needs a dropout rng")
    if rng is None:
        rng = np.random.default_rng(0)  # never consumed when training=False
    x = embeddings
    if cfg.use_positional_encoding:
        x = add(x, Tensor(positional_encoding(x.shape[0], cfg.d_model)))
    for params in layers:
        x = ste_layer_forward(x, params, cfg, training, rng)
    if cfg.attention.mode == "pooled":
        return reshape(x, (cfg.d_model,))
    return x


def pool_output(y: Tensor, cfg: STEConfig) -> Tensor:
    """Collapse encoder output to the [d_model] prediction input."""
    if cfg.attention.mode == "pooled":
        return y
    if cfg.pooling == "mean":
        return mean_rows(y)
    return take_row(y, y.shape[0] - 1)


# ---------------------------------------------------------------------------
# checkpoint format: one line of JSON (config + per-tensor shapes/offsets),
# then the concatenated little-endian float64 buffers.


def save_checkpoint(path: str, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write a binary checkpoint. `header` must be JSON-serializable; the
    tensor index (name, shape, offset in float64 elements) is added to it."""
    index = []
    offset = 0
    buffers = []
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        buffers.append(arr.ravel().astype("<f8"))
    full = dict(header)
    full["tensors"] = index
    with open(path, "wb") as f:
        f.write(json.dumps(full).encode("utf-8"))
        f.write(b"\n")
        for buf in buffers:
            f.write(buf.tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint: (header without the tensor index, name -> array)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        raw = f.read()
    header = json.loads(header_line.decode("utf-8"))
    index = header.pop("tensors")
    flat = np.frombuffer(raw, dtype="<f8")
    tensors = {}
    for entry in index:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"] : entry["offset"] + size]
        tensors[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return header, tensors
