"""Dataset loading, dictionaries, splits and the synthetic generator.

The on-disk format is label-first TSV: one label column (0/1), then the
continuous columns, then the categorical token columns.  Continuous values
get log(1 + max(x, 0)); empty cells mean 0.  Categorical tokens map
through per-field dictionaries where index 0 is reserved for unseen or
rare tokens and everything at or above the frequency threshold gets a
stable nonzero index in first-appearance order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .nn import FeatureBatch


@dataclass
class FieldDictionary:
    """Token-to-index map for one categorical field (0 = out of vocabulary)."""

    field_id: int
    mapping: dict = field(default_factory=dict)

    @property
    def vocab(self) -> int:
        return len(self.mapping) + 1

    def index_of(self, token: str) -> int:
        return self.mapping.get(token, 0)

    def tokens_by_index(self) -> list:
        """Canonical token per index; index 0 renders as the empty cell."""
        out = [""] * self.vocab
        for token, idx in self.mapping.items():
            if not out[idx]:
                out[idx] = token
        return out

    @classmethod
    def identity(cls, field_id: int, vocab: int) -> "FieldDictionary":
        """str(i) -> i for datasets that already carry integer indices."""
        return cls(field_id, {str(i): i for i in range(1, vocab)})


@dataclass
class ClickDataset:
    labels: np.ndarray  # (n,) uint8
    indices: np.ndarray  # (n, fields) int64
    continuous: np.ndarray  # (n, n_continuous) float32
    vocab_sizes: list

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_fields(self) -> int:
        return self.indices.shape[1]

    @property
    def n_continuous(self) -> int:
        return self.continuous.shape[1]

    def batch(self, sel) -> FeatureBatch:
        return FeatureBatch(self.indices[sel], self.continuous[sel])

    def subset(self, sel) -> "ClickDataset":
        return ClickDataset(
            self.labels[sel],
            self.indices[sel],
            self.continuous[sel],
            list(self.vocab_sizes),
        )


def transform_continuous(raw: np.ndarray) -> np.ndarray:
    """log(1 + max(x, 0)); the loader already turned blanks into 0."""
    return np.log1p(np.maximum(raw, 0.0))


def _parse_rows(path, n_continuous: int, n_categorical: int):
    expected = 1 + n_continuous + n_categorical
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != expected:
                raise DataError(
                    f"{path}:{lineno}: expected {expected} columns, "
                    f"got {len(parts)}"
                )
            if parts[0] not in ("0", "1"):
                raise DataError(
                    f"{path}:{lineno}: label must be 0 or 1, got {parts[0]!r}"
                )
            yield lineno, parts


def build_dictionaries(
    path, n_continuous: int, n_categorical: int, min_count: int = 10
) -> list:
    """First pass over a TSV: frequency-thresholded per-field dictionaries.

    Tokens appearing at least ``min_count`` times get indices in order of
    first appearance; everything else folds into index 0.
    """
    counts = [dict() for _ in range(n_categorical)]
    first_seen = [dict() for _ in range(n_categorical)]
    for _, parts in _parse_rows(path, n_continuous, n_categorical):
        cats = parts[1 + n_continuous :]
        for i, token in enumerate(cats):
            if not token:
                continue
            counts[i][token] = counts[i].get(token, 0) + 1
            if token not in first_seen[i]:
                first_seen[i][token] = len(first_seen[i])
    dictionaries = []
    for i in range(n_categorical):
        kept = [t for t in first_seen[i] if counts[i][t] >= min_count]
        kept.sort(key=first_seen[i].__getitem__)
        dictionaries.append(
            FieldDictionary(i, {t: j + 1 for j, t in enumerate(kept)})
        )
    return dictionaries


def load_tsv(
    path,
    n_continuous: int,
    n_categorical: int,
    dictionaries: list | None = None,
    min_count: int = 10,
) -> tuple:
    """Load a TSV into a ClickDataset.

    Without ``dictionaries`` this makes two passes (count, then map).
    Returns (dataset, dictionaries).
    """
    if dictionaries is None:
        dictionaries = build_dictionaries(
            path, n_continuous, n_categorical, min_count
        )
    if len(dictionaries) != n_categorical:
        raise DataError(
            f"got {len(dictionaries)} dictionaries for {n_categorical} fields"
        )
    labels = []
    cont_rows = []
    cat_rows = []
    for lineno, parts in _parse_rows(path, n_continuous, n_categorical):
        labels.append(int(parts[0]))
        cont = np.zeros(n_continuous, dtype=np.float64)
        for i, cell in enumerate(parts[1 : 1 + n_continuous]):
            if cell:
                try:
                    cont[i] = float(cell)
                except ValueError as exc:
                    raise DataError(
                        f"{path}:{lineno}: bad continuous value {cell!r}"
                    ) from exc
        cont_rows.append(cont)
        cats = parts[1 + n_continuous :]
        cat_rows.append(
            [dictionaries[i].index_of(tok) for i, tok in enumerate(cats)]
        )
    n = len(labels)
    raw_cont = np.asarray(cont_rows, dtype=np.float64).reshape(n, n_continuous)
    dataset = ClickDataset(
        labels=np.asarray(labels, dtype=np.uint8),
        indices=np.asarray(cat_rows, dtype=np.int64).reshape(n, n_categorical),
        continuous=transform_continuous(raw_cont).astype(np.float32),
        vocab_sizes=[d.vocab for d in dictionaries],
    )
    return dataset, dictionaries


def write_tsv(dataset: ClickDataset, path, dictionaries: list | None = None) -> None:
    """Inverse of ``load_tsv`` up to the continuous transform.

    Categorical indices render as their canonical tokens (index 0 as the
    empty cell); continuous values are inverted through expm1 so a reload
    reproduces the same transformed values and identical index tensors.
    """
    if dictionaries is None:
        dictionaries = [
            FieldDictionary.identity(i, v)
            for i, v in enumerate(dataset.vocab_sizes)
        ]
    token_maps = [d.tokens_by_index() for d in dictionaries]
    raw_cont = np.expm1(dataset.continuous.astype(np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        for r in range(len(dataset)):
            cells = [str(int(dataset.labels[r]))]
            for c in range(dataset.n_continuous):
                v = raw_cont[r, c]
                cells.append("" if v == 0.0 else repr(float(v)))
            for i in range(dataset.n_fields):
                cells.append(token_maps[i][int(dataset.indices[r, i])])
            fh.write("\t".join(cells) + "\n")


def split(dataset: ClickDataset, test_fraction: float, seed: int) -> tuple:
    """Deterministic shuffled train/test split."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test fraction {test_fraction} outside (0, 1)")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n - n_test < 1:
        raise DataError(
            f"split of {n} rows at {test_fraction} leaves an empty side"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[n_test:]), dataset.subset(perm[:n_test])


@dataclass
class SynthSpec:
    """Synthetic click dataset: skewed item popularity, labels drawn from a
    low-rank pairwise preference score plus optional label noise."""

    n_samples: int
    vocab_sizes: list
    latent_rank: int = 4
    noise: float = 0.1
    skew: float = 1.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 2:
            raise DataError("need at least two samples")
        if not self.vocab_sizes or any(v < 2 for v in self.vocab_sizes):
            raise DataError("every field needs a vocabulary of at least 2")
        if self.latent_rank < 1:
            raise DataError("latent rank must be positive")
        if not 0.0 <= self.noise < 0.5:
            raise DataError(f"noise rate {self.noise} outside [0, 0.5)")
        if self.skew < 0.0:
            raise DataError("skew must be non-negative")


def synth_generate(spec: SynthSpec) -> ClickDataset:
    """Generate a dataset whose optimal predictor is low-rank.

    Items per field follow a Zipf-like popularity curve with the given
    skew.  Each item carries a latent vector; a row's score is the
    pairwise interaction 0.5 (||sum z||^2 - sum ||z||^2) of its items'
    vectors, standardized over the sample and scaled so the Bernoulli
    labels have large margins.  ``noise`` flips that fraction of labels.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    d = len(spec.vocab_sizes)
    indices = np.empty((n, d), dtype=np.int64)
    z_sum = np.zeros((n, spec.latent_rank))
    sq_sum = np.zeros(n)
    for i, vocab in enumerate(spec.vocab_sizes):
        probs = 1.0 / np.power(np.arange(1, vocab + 1, dtype=np.float64), spec.skew)
        probs /= probs.sum()
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        draws = np.searchsorted(cdf, rng.random(n), side="right")
        indices[:, i] = np.minimum(draws, vocab - 1)
        latent = rng.normal(size=(vocab, spec.latent_rank)) / np.sqrt(
            spec.latent_rank
        )
        z = latent[indices[:, i]]
        z_sum += z
        sq_sum += (z * z).sum(axis=1)
    score = 0.5 * ((z_sum * z_sum).sum(axis=1) - sq_sum)
    sd = float(score.std())
    if sd > 0:
        score = (score - float(score.mean())) / sd
    p = 1.0 / (1.0 + np.exp(-6.0 * score))
    labels = (rng.random(n) < p).astype(np.uint8)
    if spec.noise > 0:
        flips = rng.random(n) < spec.noise
        labels[flips] = 1 - labels[flips]
    return ClickDataset(
        labels=labels,
        indices=indices,
        continuous=np.zeros((n, 0), dtype=np.float32),
        vocab_sizes=list(spec.vocab_sizes),
    )
