"""Task-specific prediction heads, the weighted multi-task loss, and metrics.

Three heads share one representation vector: a two-layer regressor for the
prescribed quantity (hidden width 10), a single linear classifier for the
quantity tag (5 classes), and a two-layer classifier for the indication
(hidden width 50, 5 classes). ReLU and dropout 0.1 sit between the two
layers of each two-layer head.

The combined loss is a convex combination alpha * MSE + beta1 * CE_tag +
beta2 * CE_ind with the three weights summing to 1. Cross-entropy is
computed from logits through a numerically stable log-softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import glorot
from .autodiff import (
    Tensor,
    add,
    dropout,
    log_softmax_rows,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sub,
    sum_all,
)
from .errors import ConfigError, DataError

__all__ = [
    "HEAD_DROPOUT",
    "N_CLASSES",
    "HeadsParams",
    "init_heads_params",
    "heads_forward",
    "TaskWeights",
    "cross_entropy_from_logits",
    "multitask_loss",
    "RunMetrics",
    "per_class_f1",
    "macro_f1",
    "evaluate_metrics",
]

HEAD_DROPOUT = 0.1
N_CLASSES = 5
QUANTITY_HIDDEN = 10
INDICATION_HIDDEN = 50


@dataclass
class HeadsParams:
    """Parameters of the three predictors."""

    Wq1: Tensor
    bq1: Tensor
    Wq2: Tensor
    bq2: Tensor
    Wt: Tensor
    bt: Tensor
    Wi1: Tensor
    bi1: Tensor
    Wi2: Tensor
    bi2: Tensor

    def named(self, prefix: str = "heads") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{k}", getattr(self, k)) for k in
                ("Wq1", "bq1", "Wq2", "bq2", "Wt", "bt", "Wi1", "bi1", "Wi2", "bi2")]


def init_heads_params(d_model: int, rng: np.random.Generator) -> HeadsParams:
    zeros = lambda n: Tensor(np.zeros(n), requires_grad=True)
    return HeadsParams(
        Wq1=glorot(rng, d_model, QUANTITY_HIDDEN),
        bq1=zeros(QUANTITY_HIDDEN),
        Wq2=glorot(rng, QUANTITY_HIDDEN, 1),
        bq2=zeros(1),
        Wt=glorot(rng, d_model, N_CLASSES),
        bt=zeros(N_CLASSES),
        Wi1=glorot(rng, d_model, INDICATION_HIDDEN),
        bi1=zeros(INDICATION_HIDDEN),
        Wi2=glorot(rng, INDICATION_HIDDEN, N_CLASSES),
        bi2=zeros(N_CLASSES),
    )


def heads_forward(
    rep: Tensor,
    params: HeadsParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Map a [d_model] representation to (quantity scalar, tag logits, indication logits).

    The three heads are independent: perturbing one head's parameters leaves
    the other outputs unchanged.
    """
    if rng is None:
        rng = np.random.default_rng(0)  # never consumed when training=False
    x = reshape(rep, (1, rep.shape[0]))

    hq = relu(add(matmul(x, params.Wq1), params.bq1))
    hq = dropout(hq, HEAD_DROPOUT, training, rng)
    q_pred = reshape(add(matmul(hq, params.Wq2), params.bq2), ())

    tag_logits = reshape(add(matmul(x, params.Wt), params.bt), (N_CLASSES,))

    hi = relu(add(matmul(x, params.Wi1), params.bi1))
    hi = dropout(hi, HEAD_DROPOUT, training, rng)
    ind_logits = reshape(add(matmul(hi, params.Wi2), params.bi2), (N_CLASSES,))

    return q_pred, tag_logits, ind_logits


@dataclass(frozen=True)
class TaskWeights:
    """Convex weights of the three task losses (quantity, tag, indication)."""

    alpha_qnt: float
    beta_qntt: float
    beta_ind: float

    def __post_init__(self):
        for name, v in (("alpha_qnt", self.alpha_qnt), ("beta_qntt", self.beta_qntt),
                        ("beta_ind", self.beta_ind)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"task weight {name}={v} outside [0, 1]")
        total = self.alpha_qnt + self.beta_qntt + self.beta_ind
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"task weights must sum to 1, got {total!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha_qnt, self.beta_qntt, self.beta_ind)


def cross_entropy_from_logits(
    logits: Tensor, label: int, class_weights: np.ndarray | None = None
) -> Tensor:
    """-log softmax(logits)[label], optionally scaled by a per-class weight."""
    n = logits.shape[0]
    if not 0 <= label < n:
        raise DataError(f"class label {label} outside [0, {n})")
    lsm = log_softmax_rows(reshape(logits, (1, n)))
    onehot = np.zeros((1, n))
    onehot[0, label] = 1.0
    ce = neg(sum_all(mul(lsm, Tensor(onehot))))
    if class_weights is not None:
        ce = scale(ce, float(class_weights[label]))
    return ce


def multitask_loss(
    q_pred: Tensor,
    q_true: float,
    tag_logits: Tensor,
    tag_true: int,
    ind_logits: Tensor,
    ind_true: int,
    w: TaskWeights,
    tag_class_weights: np.ndarray | None = None,
    ind_class_weights: np.ndarray | None = None,
) -> Tensor:
    """alpha * MSE(quantity) + beta1 * CE(tag) + beta2 * CE(indication)."""
    diff = sub(q_pred, Tensor(np.asarray(float(q_true))))
    mse = mul(diff, diff)
    ce_tag = cross_entropy_from_logits(tag_logits, tag_true, tag_class_weights)
    ce_ind = cross_entropy_from_logits(ind_logits, ind_true, ind_class_weights)
    alpha, beta1, beta2 = w.as_tuple()
    return add(scale(mse, alpha), add(scale(ce_tag, beta1), scale(ce_ind, beta2)))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class RunMetrics:
    """Per-run scores: quantity MSE plus macro-F1 (and per-class F1) for the
    two classification tasks."""

    quantity_mse: float
    tag_macro_f1: float
    ind_macro_f1: float
    tag_per_class: tuple[float, ...]
    ind_per_class: tuple[float, ...]
    n_examples: int

    def to_dict(self) -> dict:
        return {
            "quantity_mse": self.quantity_mse,
            "quantity_tag_macro_f1": self.tag_macro_f1,
            "indication_macro_f1": self.ind_macro_f1,
            "quantity_tag_per_class_f1": list(self.tag_per_class),
            "indication_per_class_f1": list(self.ind_per_class),
            "n_examples": self.n_examples,
        }


def per_class_f1(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    """F1 per class from confusion counts; a class absent from both pred and
    true has no true/false positives and contributes F1 = 0."""
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        denom = 2 * tp + fp + fn
        f1[c] = 2.0 * tp / denom if denom > 0 else 0.0
    return f1


def macro_f1(pred: np.ndarray, true: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all n_classes."""
    return float(per_class_f1(pred, true, n_classes).mean())


def evaluate_metrics(
    preds,
    labels,
    n_tag_classes: int | None = None,
    n_ind_classes: int | None = None,
) -> RunMetrics:
    """Score aligned prediction/label lists of (quantity, tag, indication) triples.

    Class counts default to the largest index seen plus one; pass the task's
    fixed class count to score absent classes as zero-F1 contributors.
    """
    preds = list(preds)
    labels = list(labels)
    if not preds or len(preds) != len(labels):
        raise DataError(
            f"need aligned non-empty predictions and labels, got {len(preds)} and {len(labels)}"
        )
    q_pred = np.array([p[0] for p in preds], dtype=np.float64)
    q_true = np.array([l[0] for l in labels], dtype=np.float64)
    tag_pred = np.array([p[1] for p in preds], dtype=np.int64)
    tag_true = np.array([l[1] for l in labels], dtype=np.int64)
    ind_pred = np.array([p[2] for p in preds], dtype=np.int64)
    ind_true = np.array([l[2] for l in labels], dtype=np.int64)
    if n_tag_classes is None:
        n_tag_classes = int(max(tag_pred.max(), tag_true.max())) + 1
    if n_ind_classes is None:
        n_ind_classes = int(max(ind_pred.max(), ind_true.max())) + 1
    tag_f1 = per_class_f1(tag_pred, tag_true, n_tag_classes)
    ind_f1 = per_class_f1(ind_pred, ind_true, n_ind_classes)
    return RunMetrics(
        quantity_mse=float(np.mean((q_pred - q_true) ** 2)),
        tag_macro_f1=float(tag_f1.mean()),
        ind_macro_f1=float(ind_f1.mean()),
        tag_per_class=tuple(tag_f1),
        ind_per_class=tuple(ind_f1),
        n_examples=len(preds),
    )
