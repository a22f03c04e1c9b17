"""Finite-difference verification of every backward rule.

Central differences with step h=1e-5 against the analytic gradients from the
tape, compared by max absolute difference relative to the larger of 1 and
the gradient magnitudes. The suite covers three components: the tensor
primitives, the signature transform, and the full encoder + heads graph.

`corrupted_backward` deliberately breaks one op's registered rule; the CLI
exposes it as a fault-injection hook to prove the suite actually detects
wrong gradients.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff
from .attention import SigAttentionConfig
from .autodiff import Tape, Tensor, backward_pass, zero_grads
from .encoder import STEConfig, encoder_forward, init_encoder_params, pool_output
from .heads import TaskWeights, heads_forward, init_heads_params, multitask_loss
from .rng import named_rng
from .signature import path_signature

__all__ = [
    "GRAD_TOL",
    "FD_STEP",
    "relative_error",
    "check_gradients",
    "corrupted_backward",
    "ComponentResult",
    "run_suite",
    "toy_encoder_config",
]

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference, relative to the larger of 1 and either magnitude."""
    denom = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def check_gradients(
    f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = FD_STEP
) -> float:
    """Worst relative error between tape gradients and central differences.

    `f` must rebuild the scalar loss from the leaves' current data on every
    call (re-seeding any internal randomness), so that perturbing one leaf
    entry and re-evaluating is a pure function of the leaf values.
    """
    zero_grads(leaves)
    with Tape() as tape:
        loss = f()
    backward_pass(loss, tape)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@contextmanager
def corrupted_backward(op: str, factor: float = 1.5):
    """Scale one op's backward rule by `factor` for the duration of the block."""
    if op not in autodiff._BACKWARDS:
        raise KeyError(f"no registered backward rule named {op!r}")
    original = autodiff._BACKWARDS[op]

    def bad(inputs, output, ctx, g):
        grads = original(inputs, output, ctx, g)
        return tuple(None if gi is None else gi * factor for gi in grads)

    autodiff._BACKWARDS[op] = bad
    try:
        yield
    finally:
        autodiff._BACKWARDS[op] = original


@dataclass(frozen=True)
class ComponentResult:
    component: str
    worst_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_error <= self.tol


def _readout(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear readout so every output entry influences the loss."""
    w = Tensor(rng.normal(size=y.shape))
    return autodiff.sum_all(autodiff.mul(y, w))


def _check_core(seed: int) -> float:
    rng = named_rng(seed, "gradcheck-core")
    worst = 0.0

    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    a, b = leaf(3, 4), leaf(3, 4)
    bias = leaf(4)
    m1, m2 = leaf(3, 4), leaf(4, 2)
    x = leaf(3, 4)
    gain, ln_bias = leaf(4), leaf(4)
    v = leaf(5)

    cases: list[tuple[Callable[[], Tensor], list[Tensor]]] = [
        (lambda: _readout(autodiff.add(a, b), named_rng(seed, "r0")), [a, b]),
        (lambda: _readout(autodiff.add(a, bias), named_rng(seed, "r1")), [a, bias]),
        (lambda: _readout(autodiff.sub(a, b), named_rng(seed, "r2")), [a, b]),
        (lambda: _readout(autodiff.mul(a, b), named_rng(seed, "r3")), [a, b]),
        (lambda: _readout(autodiff.neg(a), named_rng(seed, "r4")), [a]),
        (lambda: _readout(autodiff.scale(a, 1.7), named_rng(seed, "r5")), [a]),
        (lambda: _readout(autodiff.matmul(m1, m2), named_rng(seed, "r6")), [m1, m2]),
        (lambda: _readout(autodiff.transpose(a), named_rng(seed, "r7")), [a]),
        (lambda: _readout(autodiff.relu(a), named_rng(seed, "r8")), [a]),
        (lambda: _readout(autodiff.softmax_rows(x), named_rng(seed, "r9")), [x]),
        (lambda: _readout(autodiff.log_softmax_rows(x), named_rng(seed, "r10")), [x]),
        (
            lambda: _readout(autodiff.layer_norm(a, gain, ln_bias), named_rng(seed, "r11")),
            [a, gain, ln_bias],
        ),
        (
            lambda: _readout(
                autodiff.dropout(a, 0.4, True, named_rng(seed, "mask")),
                named_rng(seed, "r12"),
            ),
            [a],
        ),
        (lambda: autodiff.sum_all(a), [a]),
        (lambda: _readout(autodiff.mean_rows(a), named_rng(seed, "r13")), [a]),
        (lambda: _readout(autodiff.take_row(a, 1), named_rng(seed, "r14")), [a]),
        (lambda: _readout(autodiff.concat_last([a, b]), named_rng(seed, "r15")), [a, b]),
        (lambda: _readout(autodiff.reshape(a, (4, 3)), named_rng(seed, "r16")), [a]),
        (lambda: _readout(autodiff.reshape(v, (5, 1)), named_rng(seed, "r17")), [v]),
    ]
    for f, leaves in cases:
        worst = max(worst, check_gradients(f, leaves))
    return worst


def _check_signature(seed: int) -> float:
    rng = named_rng(seed, "gradcheck-sig")
    worst = 0.0
    for d, order, L in ((1, 3, 4), (2, 2, 5), (2, 3, 4), (3, 3, 3)):
        pts = Tensor(rng.normal(size=(L, d)), requires_grad=True)
        for stream in (False, True):
            tag = f"sig-readout-{d}-{order}-{L}-{stream}"
            f = lambda pts=pts, order=order, stream=stream, tag=tag: _readout(
                path_signature(pts, order, stream=stream), named_rng(seed, tag)
            )
            worst = max(worst, check_gradients(f, [pts]))
    return worst


def toy_encoder_config() -> STEConfig:
    """Small encoder used by the verification suite and the trainability tests."""
    return STEConfig(
        attention=SigAttentionConfig(d_model=8, h=2, d_presig=2, sig_order=2, mode="stream"),
        n_layers=1,
        p_drop=0.1,
    )


def _check_encoder(seed: int) -> float:
    cfg = toy_encoder_config()
    rng = named_rng(seed, "gradcheck-enc")
    layers = init_encoder_params(cfg, rng)
    heads = init_heads_params(cfg.d_model, rng)
    X = Tensor(named_rng(seed, "gradcheck-enc-x").normal(size=(3, cfg.d_model)),
               requires_grad=True)
    leaves = [X]
    for layer in layers:
        leaves.extend(t for _, t in layer.named("l"))
    leaves.extend(t for _, t in heads.named())
    # Jitter every leaf off its initial value: zero-initialized biases would
    # otherwise park the sub-layer-3 ReLU exactly on its kink (the stream
    # signature's prefix row 0 is structurally zero), where central
    # differences and the subgradient convention legitimately disagree.
    jitter = named_rng(seed, "gradcheck-enc-jitter")
    for leaf in leaves:
        leaf.data += 0.05 * jitter.normal(size=leaf.shape)
    w = TaskWeights(0.4, 0.35, 0.25)

    def f() -> Tensor:
        y = encoder_forward(X, layers, cfg, training=False)
        rep = pool_output(y, cfg)
        q, tag_logits, ind_logits = heads_forward(rep, heads, training=False)
        return multitask_loss(q, 1.5, tag_logits, 0, ind_logits, 4, w)

    return check_gradients(f, leaves)


def run_suite(seed: int = 0, corrupt: str | None = None) -> list[ComponentResult]:
    """Finite-difference checks for all three components, worst error per component."""
    checks = [
        ("core", _check_core),
        ("signature", _check_signature),
        ("encoder", _check_encoder),
    ]
    results = []
    for name, fn in checks:
        if corrupt is not None:
            with corrupted_backward(corrupt):
                err = fn(seed)
        else:
            err = fn(seed)
        results.append(ComponentResult(name, err, GRAD_TOL))
    return results
