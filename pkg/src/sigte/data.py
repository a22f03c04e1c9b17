"""Prescription records, dataset IO, synthetic data, and fold planning.

Records carry either raw token lists, precomputed embeddings, or both.
Tokens are embedded deterministically: each distinct token maps to a fixed
unit-norm vector drawn from a seeded hash of the token string, so the same
token always receives the same vector across the corpus and across runs.

The synthetic generator plants labels as exact functions of the token
sequence. In `tokens` mode each label is spelled out by a dedicated token
(class imbalance configurable, defaulting to the heavy skew typical of
prescription data). In `order` mode every record carries the same marker
tokens and only their relative ORDER determines the labels, which makes the
task unsolvable for order-blind pooled models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .rng import named_rng, token_rng

__all__ = [
    "QUANTITY_TAGS",
    "INDICATIONS",
    "PrescriptionRecord",
    "load_dataset",
    "save_dataset",
    "toy_embed",
    "ensure_embeddings",
    "SynthSpec",
    "synth_dataset",
    "planted_labels",
    "FoldPlan",
    "make_folds",
]

QUANTITY_TAGS = ("Standard", "PRN", "APPP", "Complex", "NotSpecified")
INDICATIONS = ("Cardiac", "Tremors", "Migraine", "Other", "NA")

_TAG_INDEX = {name: i for i, name in enumerate(QUANTITY_TAGS)}
_IND_INDEX = {name: i for i, name in enumerate(INDICATIONS)}

# Class proportions mimicking a heavily skewed prescription corpus.
DEFAULT_TAG_PROPORTIONS = (0.906, 0.023, 0.010, 0.008, 0.053)
DEFAULT_IND_PROPORTIONS = (0.774, 0.021, 0.018, 0.004, 0.184)

_RECORD_KEYS = {"id", "tokens", "embeddings", "quantity", "quantity_tag", "indication"}


@dataclass
class PrescriptionRecord:
    """One annotated example: a token/embedding sequence plus three labels."""

    id: str
    quantity: float
    quantity_tag: str
    indication: str
    tokens: list[str] | None = None
    embeddings: np.ndarray | None = None

    @property
    def tag_index(self) -> int:
        return _TAG_INDEX[self.quantity_tag]

    @property
    def ind_index(self) -> int:
        return _IND_INDEX[self.indication]

    @property
    def length(self) -> int:
        if self.embeddings is not None:
            return self.embeddings.shape[0]
        return len(self.tokens)

    def labels(self) -> tuple[float, int, int]:
        return (self.quantity, self.tag_index, self.ind_index)

    def validate(self) -> None:
        if self.tokens is None and self.embeddings is None:
            raise DataError(f"record {self.id!r} has neither tokens nor embeddings")
        if self.tokens is not None and len(self.tokens) < 1:
            raise DataError(f"record {self.id!r} has an empty token sequence")
        if self.embeddings is not None and (
            self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1
        ):
            raise DataError(f"record {self.id!r} has malformed embeddings")
        if self.quantity < 0:
            raise DataError(f"record {self.id!r}: quantity {self.quantity} is negative")
        if abs(self.quantity * 2 - round(self.quantity * 2)) > 1e-9:
            raise DataError(
                f"record {self.id!r}: quantity {self.quantity} is not a multiple of 0.5"
            )
        if self.quantity_tag not in _TAG_INDEX:
            raise DataError(
                f"record {self.id!r}: quantity_tag {self.quantity_tag!r} "
                f"not one of {QUANTITY_TAGS}"
            )
        if self.indication not in _IND_INDEX:
            raise DataError(
                f"record {self.id!r}: indication {self.indication!r} "
                f"not one of {INDICATIONS}"
            )


def load_dataset(path: str) -> list[PrescriptionRecord]:
    """Read a JSONL dataset; every row is validated and ids must be unique."""
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: not valid JSON ({e.msg})") from e
            if not isinstance(row, dict):
                raise DataError(f"{path}:{lineno}: row is not an object")
            unknown = set(row) - _RECORD_KEYS
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            missing = {"id", "quantity", "quantity_tag", "indication"} - set(row)
            if missing:
                raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            emb = row.get("embeddings")
            record = PrescriptionRecord(
                id=str(row["id"]),
                quantity=float(row["quantity"]),
                quantity_tag=row["quantity_tag"],
                indication=row["indication"],
                tokens=list(row["tokens"]) if row.get("tokens") is not None else None,
                embeddings=np.asarray(emb, dtype=np.float64) if emb is not None else None,
            )
            try:
                record.validate()
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            if record.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


def save_dataset(path: str, records: list[PrescriptionRecord]) -> None:
    """Write records as JSONL (tokens preferred over embeddings when present)."""
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            row: dict = {
                "id": r.id,
                "quantity": r.quantity,
                "quantity_tag": r.quantity_tag,
                "indication": r.indication,
            }
            if r.tokens is not None:
                row["tokens"] = r.tokens
            elif r.embeddings is not None:
                row["embeddings"] = r.embeddings.tolist()
            f.write(json.dumps(row) + "\n")


def toy_embed(tokens: list[str], d_model: int, seed: int) -> np.ndarray:
    """Deterministic hash embeddings: one fixed unit-norm vector per token."""
    if len(tokens) < 1:
        raise DataError("toy_embed needs at least one token")
    out = np.empty((len(tokens), d_model))
    cache: dict[str, np.ndarray] = {}
    for i, tok in enumerate(tokens):
        v = cache.get(tok)
        if v is None:
            v = token_rng(seed, tok).normal(size=d_model)
            v /= np.linalg.norm(v)
            cache[tok] = v
        out[i] = v
    return out


def ensure_embeddings(
    records: list[PrescriptionRecord], d_model: int, seed: int
) -> list[PrescriptionRecord]:
    """Fill missing embeddings from tokens; verify the width of existing ones."""
    out = []
    for r in records:
        if r.embeddings is None:
            out.append(replace(r, embeddings=toy_embed(r.tokens, d_model, seed)))
        elif r.embeddings.shape[1] != d_model:
            raise DataError(
                f"record {r.id!r}: embeddings have width {r.embeddings.shape[1]}, "
                f"expected {d_model}"
            )
        else:
            out.append(r)
    return out


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic dataset.

    mode "tokens": labels are spelled out by planted tokens, class imbalance
    per the proportion tuples. mode "order": labels depend only on the
    relative order of fixed marker tokens, so any order-insensitive model is
    reduced to guessing.
    """

    mode: str = "tokens"
    tag_proportions: tuple[float, ...] = DEFAULT_TAG_PROPORTIONS
    ind_proportions: tuple[float, ...] = DEFAULT_IND_PROPORTIONS
    min_fillers: int = 3
    max_fillers: int = 8
    filler_vocab: int = 50

    def __post_init__(self):
        if self.mode not in ("tokens", "order"):
            raise DataError(f"synth mode must be 'tokens' or 'order', got {self.mode!r}")
        if len(self.tag_proportions) != len(QUANTITY_TAGS):
            raise DataError("tag_proportions must have one entry per quantity tag")
        if len(self.ind_proportions) != len(INDICATIONS):
            raise DataError("ind_proportions must have one entry per indication")
        if not 0 <= self.min_fillers <= self.max_fillers:
            raise DataError("need 0 <= min_fillers <= max_fillers")


_QUANTITY_CHOICES = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0)

# Marker pairs of the order task: relative order of (alpha, beta) sets the
# quantity tag and quantity, order of (gamma, delta) sets the indication.
ORDER_TAGS = ("Standard", "PRN")
ORDER_INDICATIONS = ("Cardiac", "NA")


def synth_dataset(n: int, seed: int, spec: SynthSpec | None = None) -> list[PrescriptionRecord]:
    """Deterministic synthetic records with labels planted in the token sequence."""
    if n < 10:
        raise DataError(f"synthetic datasets need n >= 10, got n={n}")
    spec = spec or SynthSpec()
    rng = named_rng(seed, f"synth:{spec.mode}")
    tag_p = np.asarray(spec.tag_proportions) / np.sum(spec.tag_proportions)
    ind_p = np.asarray(spec.ind_proportions) / np.sum(spec.ind_proportions)
    records = []
    for i in range(n):
        fillers = [
            f"w{rng.integers(spec.filler_vocab)}"
            for _ in range(rng.integers(spec.min_fillers, spec.max_fillers + 1))
        ]
        if spec.mode == "tokens":
            quantity = float(rng.choice(_QUANTITY_CHOICES))
            tag = QUANTITY_TAGS[rng.choice(len(QUANTITY_TAGS), p=tag_p)]
            ind = INDICATIONS[rng.choice(len(INDICATIONS), p=ind_p)]
            body = fillers + [f"qty={quantity}", f"tag={tag}", f"ind={ind}"]
            rng.shuffle(body)
        else:
            tag_first = bool(rng.integers(2))
            ind_first = bool(rng.integers(2))
            tag = ORDER_TAGS[0] if tag_first else ORDER_TAGS[1]
            ind = ORDER_INDICATIONS[0] if ind_first else ORDER_INDICATIONS[1]
            quantity = 1.0 if tag_first else 2.0
            body = fillers + ["alpha", "beta", "gamma", "delta"]
            rng.shuffle(body)
            if (body.index("alpha") < body.index("beta")) != tag_first:
                a, b = body.index("alpha"), body.index("beta")
                body[a], body[b] = body[b], body[a]
            if (body.index("gamma") < body.index("delta")) != ind_first:
                a, b = body.index("gamma"), body.index("delta")
                body[a], body[b] = body[b], body[a]
        records.append(
            PrescriptionRecord(
                id=f"synth-{seed}-{i}",
                quantity=quantity,
                quantity_tag=tag,
                indication=ind,
                tokens=["bos"] + body,
            )
        )
    return records


def planted_labels(record: PrescriptionRecord) -> tuple[float, str, str]:
    """Recover the planted labels of a synthetic record from its tokens alone."""
    tokens = record.tokens
    if tokens is None:
        raise DataError(f"record {record.id!r} has no tokens to read labels from")
    if any(t.startswith("qty=") for t in tokens):
        quantity = next(float(t[4:]) for t in tokens if t.startswith("qty="))
        tag = next(t[4:] for t in tokens if t.startswith("tag="))
        ind = next(t[4:] for t in tokens if t.startswith("ind="))
        return (quantity, tag, ind)
    tag_first = tokens.index("alpha") < tokens.index("beta")
    ind_first = tokens.index("gamma") < tokens.index("delta")
    return (
        1.0 if tag_first else 2.0,
        ORDER_TAGS[0] if tag_first else ORDER_TAGS[1],
        ORDER_INDICATIONS[0] if ind_first else ORDER_INDICATIONS[1],
    )


@dataclass(frozen=True)
class FoldPlan:
    """Disjoint fold assignment; each fold serves as the test set exactly once,
    with the next fold (cyclically) as validation and the rest as training."""

    fold_ids: tuple[tuple[str, ...], ...]

    @property
    def k(self) -> int:
        return len(self.fold_ids)

    def iterations(self) -> list[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]]:
        out = []
        for test in range(self.k):
            val = (test + 1) % self.k
            train: list[str] = []
            for f in range(self.k):
                if f not in (test, val):
                    train.extend(self.fold_ids[f])
            out.append((tuple(train), self.fold_ids[val], self.fold_ids[test]))
        return out


def make_folds(records: list[PrescriptionRecord], k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle then round-robin assignment; fold sizes differ by at most 1."""
    if len(records) < k:
        raise DataError(f"need at least {k} records for {k}-fold CV, got {len(records)}")
    ids = [r.id for r in records]
    order = named_rng(seed, "folds").permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    return FoldPlan(tuple(tuple(f) for f in folds))
