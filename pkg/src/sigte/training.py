"""Model variants, the optimization loop, grid search, and the CV protocol.

Two architectures are trained and compared. The baseline feeds one pooled
embedding per record (the first position standing in for a classification
token, or the sequence mean) straight into the three prediction heads. The
encoder variant runs the token embeddings through the signature-attention
encoder stack first; its positional-encoding and signature ablations reuse
the same parameter shapes so results stay comparable.

The experiment protocol: for every variant and seed, each grid point
(learning rate x task-weight triplet) is scored by 5-fold cross validation
with disjoint train/validation/test roles; the grid point with the lowest
mean validation loss contributes its test metrics, and scores are averaged
over seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, backward_pass, scale, zero_grads
from .data import (
    FoldPlan,
    PrescriptionRecord,
    make_folds,
)
from .encoder import (
    STEConfig,
    STELayerParams,
    encoder_forward,
    init_encoder_params,
    pool_output,
)
from .errors import ConfigError, DataError, TrainingDivergedError
from .heads import (
    HeadsParams,
    RunMetrics,
    TaskWeights,
    evaluate_metrics,
    heads_forward,
    init_heads_params,
    multitask_loss,
    N_CLASSES,
)
from .rng import named_rng

__all__ = [
    "GridPoint",
    "GridSpec",
    "TrainConfig",
    "RunConfig",
    "VARIANTS",
    "BaselineModel",
    "STEModel",
    "build_model",
    "baseline_forward",
    "predict_record",
    "TrainResult",
    "train_model",
    "VariantResult",
    "ExperimentReport",
    "run_experiment",
    "mean_metrics",
]


class GridPoint(NamedTuple):
    lr: float
    weights: TaskWeights


@dataclass(frozen=True)
class GridSpec:
    """Hyperparameter grid: learning rates x task-weight triplets, repeated
    over a list of run seeds."""

    learning_rates: tuple[float, ...] = (3e-5, 5e-5)
    weight_triplets: tuple[TaskWeights, ...] = ()
    seeds: tuple[int, ...] = tuple(range(10))

    def points(self) -> list[GridPoint]:
        return [
            GridPoint(lr, w) for lr in self.learning_rates for w in self.weight_triplets
        ]

    @classmethod
    def sample(
        cls,
        seed: int,
        n_triplets: int = 10,
        learning_rates: Iterable[float] = (3e-5, 5e-5),
        seeds: Iterable[int] = range(10),
    ) -> "GridSpec":
        """Draw task-weight triplets uniformly from the probability simplex."""
        rng = named_rng(seed, "grid")
        triplets = []
        for _ in range(n_triplets):
            t = rng.dirichlet((1.0, 1.0, 1.0))
            t = t / t.sum()
            triplets.append(TaskWeights(float(t[0]), float(t[1]), float(t[2])))
        return cls(
            learning_rates=tuple(learning_rates),
            weight_triplets=tuple(triplets),
            seeds=tuple(seeds),
        )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs, patience must all be >= 1")


VARIANTS = ("baseline", "ste", "ste_no_pe", "ste_no_st")
VARIANT_LABELS = {
    "baseline": "baseline",
    "ste": "ste",
    "ste_no_pe": "ste w/o PE",
    "ste_no_st": "ste w/o ST",
}


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs besides the grid point and seed."""

    model: STEConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline_pooling: str = "first"

    def __post_init__(self):
        if self.baseline_pooling not in ("first", "mean"):
            raise ConfigError(
                f"baseline_pooling must be 'first' or 'mean', got {self.baseline_pooling!r}"
            )


def variant_model_config(variant: str, base: STEConfig) -> STEConfig:
    if variant == "ste":
        return base
    if variant == "ste_no_pe":
        return replace(base, use_positional_encoding=False)
    if variant == "ste_no_st":
        return replace(base, use_signature=False)
    raise ConfigError(f"unknown encoder variant {variant!r}")


def baseline_forward(
    embeddings: np.ndarray,
    heads: HeadsParams,
    pooling: str = "first",
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """The no-encoder path: one pooled embedding straight into the three heads."""
    if pooling == "first":
        rep = Tensor(embeddings[0])
    elif pooling == "mean":
        rep = Tensor(embeddings.mean(axis=0))
    else:
        raise ConfigError(f"pooling must be 'first' or 'mean', got {pooling!r}")
    return heads_forward(rep, heads, training, rng)


class BaselineModel:
    """Pooled-embedding multi-task model (no encoder parameters at all)."""

    kind = "baseline"

    def __init__(self, d_model: int, heads: HeadsParams, pooling: str = "first"):
        self.d_model = d_model
        self.heads = heads
        self.pooling = pooling

    @classmethod
    def init(cls, d_model: int, seed: int, pooling: str = "first") -> "BaselineModel":
        return cls(d_model, init_heads_params(d_model, named_rng(seed, "init")), pooling)

    def forward(self, embeddings, training=False, rng=None):
        return baseline_forward(embeddings, self.heads, self.pooling, training, rng)

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.heads.named()

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def header(self) -> dict:
        return {"kind": self.kind, "d_model": self.d_model, "pooling": self.pooling}


class STEModel:
    """Encoder stack plus the three prediction heads, trained jointly."""

    kind = "ste"

    def __init__(self, cfg: STEConfig, layers: list[STELayerParams], heads: HeadsParams):
        self.cfg = cfg
        self.layers = layers
        self.heads = heads

    @classmethod
    def init(cls, cfg: STEConfig, seed: int) -> "STEModel":
        rng = named_rng(seed, "init")
        return cls(cfg, init_encoder_params(cfg, rng), init_heads_params(cfg.d_model, rng))

    def forward(self, embeddings, training=False, rng=None):
        y = encoder_forward(Tensor(embeddings), self.layers, self.cfg, training, rng)
        rep = pool_output(y, self.cfg)
        return heads_forward(rep, self.heads, training, rng)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"layer{i}"))
        out.extend(self.heads.named())
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def header(self) -> dict:
        return {"kind": self.kind, "model": self.cfg.to_dict()}


def build_model(variant: str, run_cfg: RunConfig, seed: int):
    """Construct the model for a named variant, seeded via the init stream."""
    if variant == "baseline":
        return BaselineModel.init(run_cfg.model.d_model, seed, run_cfg.baseline_pooling)
    return STEModel.init(variant_model_config(variant, run_cfg.model), seed)


def model_from_header(header: dict, pooling_default: str = "first"):
    if header["kind"] == "baseline":
        return BaselineModel.init(
            header["d_model"], 0, header.get("pooling", pooling_default)
        )
    if header["kind"] == "ste":
        return STEModel.init(STEConfig.from_dict(header["model"]), 0)
    raise ConfigError(f"unknown model kind {header['kind']!r}")


def load_params(model, tensors: dict[str, np.ndarray]) -> None:
    """Overwrite a model's parameters by name; names must match exactly."""
    named = dict(model.named_params())
    if set(named) != set(tensors):
        missing = sorted(set(named) - set(tensors))
        extra = sorted(set(tensors) - set(named))
        raise ConfigError(
            f"checkpoint does not match the model: missing {missing}, unexpected {extra}"
        )
    for name, t in named.items():
        if tensors[name].shape != t.data.shape:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                f"model expects {t.data.shape}"
            )
        t.data = np.array(tensors[name], dtype=np.float64)


def predict_record(model, record: PrescriptionRecord) -> tuple[float, int, int]:
    """Deterministic inference: (quantity, argmax tag, argmax indication)."""
    q, tag_logits, ind_logits = model.forward(record.embeddings, training=False)
    return (
        float(q.data),
        int(np.argmax(tag_logits.data)),
        int(np.argmax(ind_logits.data)),
    )


def _record_loss(model, record, weights, training, rng) -> Tensor:
    q, tag_logits, ind_logits = model.forward(record.embeddings, training, rng)
    return multitask_loss(
        q, record.quantity, tag_logits, record.tag_index, ind_logits, record.ind_index, weights
    )


def dataset_loss(model, records, weights: TaskWeights) -> float:
    """Mean multitask loss at inference settings."""
    if not records:
        raise DataError("cannot evaluate on an empty record set")
    total = 0.0
    for r in records:
        total += float(_record_loss(model, r, weights, False, None).data)
    return total / len(records)


def evaluate_model(model, records) -> RunMetrics:
    preds = [predict_record(model, r) for r in records]
    labels = [r.labels() for r in records]
    return evaluate_metrics(preds, labels, N_CLASSES, N_CLASSES)


class TrainResult(NamedTuple):
    model: object
    best_epoch: int
    best_val_loss: float
    history: list[tuple[float, float]]  # (train loss, val loss) per epoch


def train_model(
    train_set: list[PrescriptionRecord],
    val_set: list[PrescriptionRecord],
    config: RunConfig,
    grid_point: GridPoint,
    seed: int,
    variant: str = "ste",
) -> TrainResult:
    """Adam on the summed multitask loss with validation early stopping.

    Returns the parameters of the epoch with the lowest validation loss.
    Dropout draws from its own named stream so ablations share weight
    initializations.
    """
    if not train_set or not val_set:
        raise DataError("training needs non-empty train and validation sets")
    model = build_model(variant, config, seed)
    params = model.params()
    state = AdamState(params)
    drop_rng = named_rng(seed, "dropout")
    batch_rng = named_rng(seed, "batches")
    weights = grid_point.weights

    best_val = math.inf
    best_epoch = 0
    best_snapshot = [p.data.copy() for p in params]
    history: list[tuple[float, float]] = []
    step = 0
    for epoch in range(1, config.train.max_epochs + 1):
        order = batch_rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), config.train.batch_size):
            batch = [train_set[i] for i in order[start : start + config.train.batch_size]]
            step += 1
            with Tape() as tape:
                total = _record_loss(model, batch[0], weights, True, drop_rng)
                for r in batch[1:]:
                    total = _add_scalar(total, _record_loss(model, r, weights, True, drop_rng))
                total = scale(total, 1.0 / len(batch))
            if not np.isfinite(total.data):
                raise TrainingDivergedError(f"loss is not finite at step {step}")
            zero_grads(params)
            backward_pass(total, tape)
            adam_step(params, [p.grad for p in params], state, grid_point.lr)
            epoch_loss += float(total.data) * len(batch)
        val_loss = dataset_loss(model, val_set, weights)
        history.append((epoch_loss / len(train_set), val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = [p.data.copy() for p in params]
        elif epoch - best_epoch >= config.train.patience:
            break
    for p, snap in zip(params, best_snapshot):
        p.data = snap
    return TrainResult(model, best_epoch, best_val, history)


def _add_scalar(a: Tensor, b: Tensor) -> Tensor:
    from .autodiff import add

    return add(a, b)


@dataclass(frozen=True)
class ChampionRecord:
    """The single best-validation run of a variant, kept for checkpointing."""

    variant: str
    seed: int
    grid_point: GridPoint
    fold: int
    val_loss: float
    test_ids: tuple[str, ...]
    test_metrics: RunMetrics
    model: object


@dataclass
class VariantResult:
    variant: str
    metrics: RunMetrics
    per_seed: list[RunMetrics]
    selected_points: list[GridPoint]


@dataclass
class ExperimentReport:
    variants: dict[str, VariantResult]
    champions: dict[str, ChampionRecord]
    grid: GridSpec
    n_folds: int

    def to_dict(self) -> dict:
        return {
            "protocol": {
                "n_folds": self.n_folds,
                "seeds": list(self.grid.seeds),
                "learning_rates": list(self.grid.learning_rates),
                "n_weight_triplets": len(self.grid.weight_triplets),
            },
            "variants": {
                name: {
                    **vr.metrics.to_dict(),
                    "per_seed": [m.to_dict() for m in vr.per_seed],
                    "selected_grid_points": [
                        {"lr": gp.lr, "weights": list(gp.weights.as_tuple())}
                        for gp in vr.selected_points
                    ],
                }
                for name, vr in self.variants.items()
            },
        }


def mean_metrics(metrics: list[RunMetrics]) -> RunMetrics:
    """Field-wise mean of per-run metrics (per-class tuples included)."""
    if not metrics:
        raise DataError("cannot average an empty metrics list")
    return RunMetrics(
        quantity_mse=float(np.mean([m.quantity_mse for m in metrics])),
        tag_macro_f1=float(np.mean([m.tag_macro_f1 for m in metrics])),
        ind_macro_f1=float(np.mean([m.ind_macro_f1 for m in metrics])),
        tag_per_class=tuple(np.mean([m.tag_per_class for m in metrics], axis=0)),
        ind_per_class=tuple(np.mean([m.ind_per_class for m in metrics], axis=0)),
        n_examples=int(sum(m.n_examples for m in metrics)),
    )


def _check_disjoint(train_ids, val_ids, test_ids) -> None:
    train, val, test = set(train_ids), set(val_ids), set(test_ids)
    if train & val or train & test or val & test:
        raise RuntimeError(
            "fold leakage: train/validation/test id sets are not pairwise disjoint"
        )


def run_experiment(
    records: list[PrescriptionRecord],
    grid: GridSpec,
    variants: Iterable[str],
    config: RunConfig,
    n_folds: int = 5,
) -> ExperimentReport:
    """Cross-validated grid search per variant and seed, averaged over seeds.

    Fold roles are disjoint by construction and re-checked at every
    iteration. Also tracks each variant's overall best-validation model as
    its champion for checkpointing.
    """
    if not grid.weight_triplets:
        raise ConfigError("the grid needs at least one task-weight triplet")
    by_id = {r.id: r for r in records}
    results: dict[str, VariantResult] = {}
    champions: dict[str, ChampionRecord] = {}
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        per_seed: list[RunMetrics] = []
        selected: list[GridPoint] = []
        champ: ChampionRecord | None = None
        for seed in grid.seeds:
            folds = make_folds(records, n_folds, seed)
            best_point = None
            best_val = math.inf
            best_test: RunMetrics | None = None
            for gp in grid.points():
                val_losses = []
                test_metrics = []
                for fold_idx, (train_ids, val_ids, test_ids) in enumerate(folds.iterations()):
                    _check_disjoint(train_ids, val_ids, test_ids)
                    train_set = [by_id[i] for i in train_ids]
                    val_set = [by_id[i] for i in val_ids]
                    test_set = [by_id[i] for i in test_ids]
                    result = train_model(train_set, val_set, config, gp, seed, variant)
                    metrics = evaluate_model(result.model, test_set)
                    val_losses.append(result.best_val_loss)
                    test_metrics.append(metrics)
                    if champ is None or result.best_val_loss < champ.val_loss:
                        champ = ChampionRecord(
                            variant, seed, gp, fold_idx, result.best_val_loss,
                            tuple(test_ids), metrics, result.model,
                        )
                mean_val = float(np.mean(val_losses))
                if mean_val < best_val:
                    best_val = mean_val
                    best_point = gp
                    best_test = mean_metrics(test_metrics)
            per_seed.append(best_test)
            selected.append(best_point)
        results[variant] = VariantResult(
            variant, mean_metrics(per_seed), per_seed, selected
        )
        champions[variant] = champ
    return ExperimentReport(results, champions, grid, n_folds)
