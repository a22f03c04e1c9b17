"""Differentiable truncated signatures of piecewise-linear paths.

A path is an [L x d] array of sample points, interpreted as the continuous
path that linearly interpolates consecutive points with implicit unit time
steps. Its truncated signature collects the iterated integrals up to a given
order, grouped by level; the constant level-0 term (always 1) is dropped
from stored output.

Coefficients are laid out level-major and lexicographically within a level:
level 1 block, then level 2 (index (1,1), (1,2), ..., (d,d)), and so on.
This matches the row-major ravel of the level-k tensors, so flat outer
products implement the tensor products directly.

The whole-path signature is computed by folding the closed-form signature of
each linear segment (level k equals the k-fold outer power of the increment
divided by k!) through the tensor-algebra concatenation product, which is
O(L) products and makes the backward pass a pair of linear contractions per
step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "sig_dim",
    "level_sizes",
    "level_multi_indices",
    "TruncatedSignature",
    "segment_signature",
    "chen_product",
    "signature",
    "stream_signature",
    "signature_backward",
    "path_signature",
    "REFERENCE_DIM_ROWS",
    "QUOTED_WITH_LEVEL0",
]

_INT64_MAX = 2**63 - 1

# Commonly tabulated (channels, order) pairs for the size of the truncated
# signature. Two of the pairs circulate with the constant level-0 term
# counted in (1057 and 1365); this package always drops that term, so the
# computed sizes for those rows are one smaller.
REFERENCE_DIM_ROWS: tuple[tuple[int, int], ...] = (
    (512, 1), (512, 2), (256, 2), (128, 2), (128, 3),
    (64, 2), (64, 3), (32, 2), (32, 3), (16, 2),
    (16, 3), (8, 2), (8, 3), (8, 4), (4, 4),
    (4, 5), (4, 6), (2, 9), (2, 10), (2, 12),
)
QUOTED_WITH_LEVEL0: dict[tuple[int, int], int] = {(32, 2): 1057, (4, 5): 1365}


def sig_dim(d: int, order: int) -> int:
    """Number of coefficients of an order-`order` signature of a d-channel path.

    Equals sum of d**k for k = 1..order; the level-0 constant is dropped.
    Raises NumericError when the count exceeds the int64 range, since such a
    signature could not be materialized as an array anyway.
    """
    if d < 1 or order < 1:
        raise ConfigError(f"sig_dim needs d >= 1 and order >= 1, got d={d}, order={order}")
    total = 0
    for k in range(1, order + 1):
        total += d**k
        if total > _INT64_MAX:
            raise NumericError(
                f"signature dimension overflows int64 for d={d}, order={order}"
            )
    return total


def level_sizes(d: int, order: int) -> tuple[int, ...]:
    return tuple(d**k for k in range(1, order + 1))


def level_multi_indices(d: int, order: int) -> Iterator[tuple[int, ...]]:
    """Multi-indices (1-based channels) in coefficient layout order."""
    for k in range(1, order + 1):
        yield from itertools.product(range(1, d + 1), repeat=k)


# Levels are held internally as flat 1-D arrays: levels[k-1] has d**k entries
# in lexicographic order. np.outer(a, b).ravel() is then the tensor product.


def _zero_levels(d: int, order: int) -> list[np.ndarray]:
    return [np.zeros(d**k) for k in range(1, order + 1)]


def _segment_levels(delta: np.ndarray, order: int) -> list[np.ndarray]:
    """Closed-form signature of one linear segment: level k = delta^(x)k / k!."""
    levels = [np.asarray(delta, dtype=np.float64).ravel()]
    for k in range(2, order + 1):
        levels.append(np.outer(levels[-1], levels[0]).ravel() / k)
    return levels[:order]


def _chen_levels(a: Sequence[np.ndarray], b: Sequence[np.ndarray], d: int) -> list[np.ndarray]:
    """Concatenation product: level k = sum over i+j=k of a_i (x) b_j, level 0 = 1."""
    order = len(a)
    out = []
    for k in range(1, order + 1):
        c = a[k - 1] + b[k - 1]
        for i in range(1, k):
            c = c + np.outer(a[i - 1], b[k - i - 1]).ravel()
        out.append(c)
    return out


def _chen_backward(
    dc: Sequence[np.ndarray],
    a: Sequence[np.ndarray],
    b: Sequence[np.ndarray],
    d: int,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of the concatenation product with respect to both factors."""
    order = len(dc)
    da = [np.array(g, copy=True) for g in dc]
    db = [np.array(g, copy=True) for g in dc]
    for k in range(2, order + 1):
        for i in range(1, k):
            j = k - i
            m = dc[k - 1].reshape(d**i, d**j)
            da[i - 1] += m @ b[j - 1]
            db[j - 1] += a[i - 1] @ m
    return da, db


def _segment_backward(
    de: Sequence[np.ndarray], levels: Sequence[np.ndarray], d: int
) -> np.ndarray:
    """Gradient of the segment signature with respect to its increment."""
    order = len(de)
    de = [np.array(g, copy=True) for g in de]
    delta = levels[0]
    ddelta = np.zeros(d)
    for k in range(order, 1, -1):
        # level k was built as levels[k-2] (x) delta / k
        m = de[k - 1].reshape(d ** (k - 1), d)
        de[k - 2] += (m @ delta) / k
        ddelta += (levels[k - 2] @ m) / k
    ddelta += de[0]
    return ddelta


def _flatten(levels: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(levels) if levels else np.zeros(0)


def _split(flat: np.ndarray, d: int, order: int) -> list[np.ndarray]:
    sizes = level_sizes(d, order)
    return list(np.split(np.asarray(flat, dtype=np.float64), np.cumsum(sizes[:-1])))


@dataclass(frozen=True)
class TruncatedSignature:
    """Signature coefficients grouped by level 1..order, laid out flat."""

    order: int
    channels: int
    coeffs: np.ndarray

    def __post_init__(self):
        expected = sig_dim(self.channels, self.order)
        if self.coeffs.shape != (expected,):
            raise ShapeError(
                f"signature of d={self.channels}, order={self.order} needs "
                f"{expected} coefficients, got shape {self.coeffs.shape}"
            )

    def level(self, k: int) -> np.ndarray:
        """Flat level-k block (d**k entries, lexicographic multi-index order)."""
        if not 1 <= k <= self.order:
            raise ValueError(f"level {k} outside 1..{self.order}")
        start = sum(self.channels**i for i in range(1, k))
        return self.coeffs[start : start + self.channels**k]

    def levels(self) -> list[np.ndarray]:
        return _split(self.coeffs, self.channels, self.order)

    @classmethod
    def from_levels(cls, levels: Sequence[np.ndarray], channels: int) -> "TruncatedSignature":
        return cls(order=len(levels), channels=channels, coeffs=_flatten(levels))


def segment_signature(delta: np.ndarray, order: int) -> TruncatedSignature:
    """Signature of a single linear segment with increment `delta`."""
    delta = np.asarray(delta, dtype=np.float64).ravel()
    sig_dim(delta.size, order)
    return TruncatedSignature.from_levels(_segment_levels(delta, order), delta.size)


def chen_product(a: TruncatedSignature, b: TruncatedSignature) -> TruncatedSignature:
    """Signature of the concatenation of two paths from their signatures."""
    if a.channels != b.channels or a.order != b.order:
        raise ShapeError(
            f"chen_product needs matching (channels, order): "
            f"({a.channels}, {a.order}) vs ({b.channels}, {b.order})"
        )
    return TruncatedSignature.from_levels(
        _chen_levels(a.levels(), b.levels(), a.channels), a.channels
    )


def _as_path(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
        raise ShapeError(f"a path must be an [L x d] array with L, d >= 1, got {pts.shape}")
    return pts


def _forward_prefixes(
    pts: np.ndarray, order: int
) -> tuple[list[list[np.ndarray]], list[list[np.ndarray]]]:
    """Prefix signatures S_0..S_{L-1} and per-segment signatures, as level lists."""
    L, d = pts.shape
    prefixes = [_zero_levels(d, order)]
    segments = []
    for t in range(L - 1):
        seg = _segment_levels(pts[t + 1] - pts[t], order)
        segments.append(seg)
        prefixes.append(_chen_levels(prefixes[-1], seg, d))
    return prefixes, segments


def signature(points: np.ndarray, order: int) -> TruncatedSignature:
    """Truncated signature of the whole path; a single point yields all zeros."""
    pts = _as_path(points)
    sig_dim(pts.shape[1], order)
    prefixes, _ = _forward_prefixes(pts, order)
    return TruncatedSignature.from_levels(prefixes[-1], pts.shape[1])


def stream_signature(points: np.ndarray, order: int) -> np.ndarray:
    """Per-prefix signatures as an [L x sig_dim] array; row 0 is the zero vector.

    Row t is the signature of points[0..t], computed incrementally in O(L)
    concatenation products. The last row equals signature(points, order).
    """
    pts = _as_path(points)
    prefixes, _ = _forward_prefixes(pts, order)
    return np.stack([_flatten(lv) for lv in prefixes])


def _backward_through_prefixes(
    pts: np.ndarray,
    order: int,
    prefixes: list[list[np.ndarray]],
    segments: list[list[np.ndarray]],
    upstream_levels: list[list[np.ndarray] | None],
) -> np.ndarray:
    """Reverse sweep over the prefix fold; upstream_levels[t] feeds prefix t."""
    L, d = pts.shape
    dpts = np.zeros((L, d))
    last = upstream_levels[L - 1]
    ds = last if last is not None else _zero_levels(d, order)
    for t in range(L - 2, -1, -1):
        ds_prev, de = _chen_backward(ds, prefixes[t], segments[t], d)
        ddelta = _segment_backward(de, segments[t], d)
        dpts[t] -= ddelta
        dpts[t + 1] += ddelta
        ds = ds_prev
        if upstream_levels[t] is not None:
            ds = [a + b for a, b in zip(ds, upstream_levels[t])]
    return dpts


def signature_backward(
    points: np.ndarray, order: int, upstream: np.ndarray, stream: bool = False
) -> np.ndarray:
    """Gradient of <upstream, signature output> with respect to every path point.

    `upstream` must match the forward output: [sig_dim] for the whole-path
    signature, [L x sig_dim] for the stream of prefix signatures.
    """
    pts = _as_path(points)
    L, d = pts.shape
    width = sig_dim(d, order)
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (L, width) if stream else (width,)
    if upstream.shape != expected:
        raise ShapeError(f"upstream grad must have shape {expected}, got {upstream.shape}")
    prefixes, segments = _forward_prefixes(pts, order)
    if stream:
        ups: list[list[np.ndarray] | None] = [_split(row, d, order) for row in upstream]
        ups[0] = None  # row 0 of the stream output is constantly zero
    else:
        ups = [None] * L
        ups[L - 1] = _split(upstream, d, order)
    return _backward_through_prefixes(pts, order, prefixes, segments, ups)


# ---------------------------------------------------------------------------
# autodiff integration


def path_signature(x: Tensor, order: int, stream: bool = True) -> Tensor:
    """Signature transform as a tape-recorded op.

    stream=True emits one row per prefix ([L x sig_dim]); stream=False emits
    the whole-path signature as a flat [sig_dim] vector. Composes with every
    other primitive via the saved-intermediate backward sweep.
    """
    pts = _as_path(x.data)
    prefixes, segments = _forward_prefixes(pts, order)
    if stream:
        out = np.stack([_flatten(lv) for lv in prefixes])
    else:
        out = _flatten(prefixes[-1])
    return autodiff._record("path_signature", (x,), out, (order, stream, prefixes, segments))


def _path_signature_bwd(inp, out, ctx, g):
    order, stream, prefixes, segments = ctx
    pts = inp[0].data
    L, d = pts.shape
    if stream:
        ups: list[list[np.ndarray] | None] = [_split(row, d, order) for row in g]
        ups[0] = None
    else:
        ups = [None] * L
        ups[L - 1] = _split(g, d, order)
    return (_backward_through_prefixes(pts, order, prefixes, segments, ups),)


autodiff.register_op("path_signature", _path_signature_bwd)
