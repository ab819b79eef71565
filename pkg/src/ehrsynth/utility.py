"""Downstream utility: next-visit event prediction trained on generated,
real, or mixed corpora, scored by recall@k on a held-out real test set.

The predictor is a small bidirectional recurrent classifier over multi-hot
visit vectors; each visit-history prefix is one training example and the
label is the multi-hot of one target modality in the following visit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, SchemaMismatchError
from .generate import GenerationConfig, generate_corpus, sample_baselines
from .records import BaselineFeatures, Corpus, CorpusSchema, PatientRecord, Visit
from .seeding import derive_seed, numpy_rng

_SEED_MASK = (1 << 63) - 1


@dataclass
class PredictorConfig:
    target_modality: Optional[str] = None  # None: first modality in the schema
    hidden_size: int = 32
    num_layers: int = 1
    bidirectional: bool = True
    mlp_hidden: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_size < 1 or self.num_layers < 1 or self.mlp_hidden < 1:
            raise ConfigError("hidden_size, num_layers, and mlp_hidden must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


@dataclass
class RecallReport:
    k: int
    recall: float
    ci95: float
    n_transitions: int

    def to_dict(self) -> dict:
        return {
            "k": int(self.k),
            "recall": float(self.recall),
            "ci95": float(self.ci95),
            "n_transitions": int(self.n_transitions),
        }


@dataclass
class UtilityResult:
    arm: str
    n_train: int
    recalls: list[RecallReport]

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "n_train": int(self.n_train),
            "recalls": [r.to_dict() for r in self.recalls],
        }


# ---------------------------------------------------------------------------
# featurization and transitions
# ---------------------------------------------------------------------------


def _resolve_target(schema: CorpusSchema, config: PredictorConfig) -> str:
    mod = config.target_modality or schema.modalities[0]
    if mod not in schema.modalities:
        raise SchemaMismatchError(f"unknown target modality {mod!r}")
    return mod


def _code_index(schema: CorpusSchema) -> dict[tuple[str, str], int]:
    index = {}
    for mod in schema.modalities:
        for code in schema.vocabularies[mod]:
            index[(mod, code)] = len(index)
    return index


def _visit_vector(
    visit: Visit, baseline: BaselineFeatures, schema: CorpusSchema,
    index: dict[tuple[str, str], int],
) -> np.ndarray:
    d_codes = len(index)
    vec = np.zeros(d_codes + schema.m_c + schema.m_u, dtype=np.float64)
    for mod, codes in visit.events.items():
        for code in codes:
            vec[index[(mod, code)]] = 1.0
    vec[d_codes : d_codes + schema.m_c] = baseline.categorical
    vec[d_codes + schema.m_c :] = baseline.numerical
    return vec


def transitions(corpus: Corpus, target_modality: str) -> list[tuple[PatientRecord, int]]:
    """(record, t) pairs where visits[:t] is the history and visit t holds
    at least one target-modality event; transitions whose next visit lacks
    the target modality are skipped for training and scoring alike."""
    out = []
    for record in corpus.records:
        for t in range(1, len(record.visits)):
            if record.visits[t].events.get(target_modality):
                out.append((record, t))
    return out


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------


class NextVisitPredictor(nn.Module):
    """Bidirectional recurrent encoder over visit vectors with a two-layer
    head; one independent probability per target-modality code."""

    def __init__(self, schema: CorpusSchema, config: PredictorConfig) -> None:
        super().__init__()
        self.schema = schema
        self.config = config
        self.target_modality = _resolve_target(schema, config)
        self.code_index = _code_index(schema)
        self.target_codes = list(schema.vocabularies[self.target_modality])
        d_in = len(self.code_index) + schema.m_c + schema.m_u
        self.lstm = nn.LSTM(
            d_in,
            config.hidden_size,
            num_layers=config.num_layers,
            batch_first=True,
            bidirectional=config.bidirectional,
            dtype=torch.float64,
        )
        d_rnn = config.hidden_size * (2 if config.bidirectional else 1)
        self.head = nn.Sequential(
            nn.Linear(d_rnn, config.mlp_hidden, dtype=torch.float64),
            nn.ReLU(),
            nn.Linear(config.mlp_hidden, len(self.target_codes), dtype=torch.float64),
        )
        self.train_log: list[float] = []

    def forward(self, padded: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        out, _ = self.lstm(padded)
        h = self.config.hidden_size
        rows = torch.arange(padded.shape[0])
        forward_last = out[rows, lengths - 1, :h]
        if self.config.bidirectional:
            backward_first = out[rows, 0, h:]
            summary = torch.cat([forward_last, backward_first], dim=-1)
        else:
            summary = forward_last
        return self.head(summary)

    def _history_tensor(
        self, histories: Sequence[tuple[BaselineFeatures, Sequence[Visit]]]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        max_len = max(len(v) for _, v in histories)
        d_in = len(self.code_index) + self.schema.m_c + self.schema.m_u
        padded = np.zeros((len(histories), max_len, d_in), dtype=np.float64)
        lengths = np.zeros(len(histories), dtype=np.int64)
        for i, (baseline, visits) in enumerate(histories):
            if len(visits) == 0:
                raise DataError("prediction needs at least one history visit")
            for j, visit in enumerate(visits):
                padded[i, j] = _visit_vector(visit, baseline, self.schema, self.code_index)
            lengths[i] = len(visits)
        return torch.tensor(padded), torch.tensor(lengths)

    def predict_logits(self, baseline: BaselineFeatures, visits: Sequence[Visit]) -> np.ndarray:
        """Scores for each target-modality code given one visit history."""
        with torch.no_grad():
            padded, lengths = self._history_tensor([(baseline, visits)])
            return self(padded, lengths)[0].numpy()


def train_predictor(corpus: Corpus, config: Optional[PredictorConfig] = None) -> NextVisitPredictor:
    """Fit the next-visit classifier with multilabel cross-entropy; the
    per-epoch mean loss ends up in predictor.train_log."""
    if config is None:
        config = PredictorConfig()
    target = _resolve_target(corpus.schema, config)
    pairs = transitions(corpus, target)
    if not pairs:
        raise DataError(
            f"corpus has no transition with next-visit {target!r} events to train on"
        )

    torch.manual_seed(derive_seed(config.seed, "predictor-init") & _SEED_MASK)
    predictor = NextVisitPredictor(corpus.schema, config)
    code_pos = {c: i for i, c in enumerate(predictor.target_codes)}

    histories = [(rec.baseline, rec.visits[:t]) for rec, t in pairs]
    labels = np.zeros((len(pairs), len(predictor.target_codes)), dtype=np.float64)
    for row, (rec, t) in enumerate(pairs):
        for code in rec.visits[t].events[target]:
            labels[row, code_pos[code]] = 1.0

    x, lengths = predictor._history_tensor(histories)
    y = torch.tensor(labels)
    opt = torch.optim.Adam(
        predictor.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    loss_fn = nn.BCEWithLogitsLoss()
    rng = numpy_rng(config.seed, "predictor-batches")
    n = len(pairs)
    predictor.train()
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.tensor(order[start : start + config.batch_size])
            opt.zero_grad()
            loss = loss_fn(predictor(x[idx], lengths[idx]), y[idx])
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        predictor.train_log.append(sum(epoch_losses) / len(epoch_losses))
    predictor.eval()
    return predictor


# ---------------------------------------------------------------------------
# recall
# ---------------------------------------------------------------------------


def recall_at_k(
    predictor,
    test: Corpus,
    k: int,
    seed: int = 0,
    n_resamples: int = 1000,
) -> RecallReport:
    """Mean over test transitions of |top-k scores ∩ true next-visit codes|
    divided by the full true-code count (no min(k, ·) cap), with a
    bootstrap 95% CI half-width.

    The predictor only needs `target_modality`, `target_codes`, and
    `predict_logits(baseline, visits)`.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    target = predictor.target_modality
    code_pos = {c: i for i, c in enumerate(predictor.target_codes)}
    pairs = transitions(test, target)
    if not pairs:
        raise DataError(f"test corpus has no transition with next-visit {target!r} events")

    per_transition = np.zeros(len(pairs), dtype=np.float64)
    for row, (rec, t) in enumerate(pairs):
        logits = np.asarray(predictor.predict_logits(rec.baseline, rec.visits[:t]))
        top = set(np.argsort(-logits, kind="stable")[:k].tolist())
        true = {code_pos[c] for c in rec.visits[t].events[target]}
        per_transition[row] = len(top & true) / len(true)

    rng = numpy_rng(seed, f"recall-bootstrap-{k}")
    idx = rng.integers(0, len(per_transition), size=(n_resamples, len(per_transition)))
    means = per_transition[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return RecallReport(
        k=k,
        recall=float(per_transition.mean()),
        ci95=float((hi - lo) / 2.0),
        n_transitions=len(pairs),
    )


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise DataError("spearman_rho needs two equal-length vectors of >= 2 points")

    def ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v), dtype=np.float64)
        i = 0
        while i < len(v):
            j = i
            while j < len(v) and v[order[j]] == v[order[i]]:
                j += 1
            r[order[i:j]] = (i + 1 + j) / 2.0
            i = j
        return r

    rx, ry = ranks(x), ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        raise DataError("spearman_rho is undefined for constant inputs")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


# ---------------------------------------------------------------------------
# arms
# ---------------------------------------------------------------------------


@dataclass
class UtilityArm:
    n_syn: int = 0
    n_real: int = 0

    def __post_init__(self) -> None:
        if self.n_syn < 0 or self.n_real < 0:
            raise ConfigError("arm sizes must be nonnegative")
        if self.n_syn == 0 and self.n_real == 0:
            raise ConfigError("an arm needs at least one training record")

    @property
    def label(self) -> str:
        if self.n_real == 0:
            return f"syn-{self.n_syn}"
        if self.n_syn == 0:
            return f"real-{self.n_real}"
        return f"syn-{self.n_syn}+real-{self.n_real}"


@dataclass
class UtilityConfig:
    ks: tuple[int, ...] = (10, 20)
    seed: int = 0
    n_resamples: int = 1000
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    def __post_init__(self) -> None:
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be a nonempty tuple of integers >= 1")
        if self.n_resamples < 1:
            raise ConfigError("n_resamples must be >= 1")


def _arm_training_corpus(
    model, real_train: Corpus, arm: UtilityArm, config: UtilityConfig
) -> Corpus:
    records: list[PatientRecord] = []
    if arm.n_syn > 0:
        gen_seed = derive_seed(config.seed, f"syn-{arm.label}")
        baselines = sample_baselines(real_train, arm.n_syn, gen_seed)
        gen_config = dataclasses.replace(config.generation, seed=gen_seed)
        synthetic = generate_corpus(model, baselines, gen_config, id_prefix=f"syn-{arm.label}")
        records.extend(synthetic.records)
    if arm.n_real > 0:
        if arm.n_real > len(real_train.records):
            raise DataError(
                f"arm asks for {arm.n_real} real records, corpus has {len(real_train.records)}"
            )
        records.extend(real_train.records[: arm.n_real])
    return Corpus(schema=real_train.schema, records=records)


def run_utility_suite(
    model,
    real_train: Corpus,
    real_test: Corpus,
    arms: Sequence[UtilityArm],
    config: Optional[UtilityConfig] = None,
) -> list[UtilityResult]:
    """One result per arm: build the arm's training corpus (generated
    records use baselines resampled from the real training demographics),
    fit a fresh predictor on a fresh seed, and score recall@k on the real
    test set."""
    if config is None:
        config = UtilityConfig()
    if not arms:
        raise ConfigError("at least one arm is required")
    if real_train.schema != real_test.schema:
        raise SchemaMismatchError("train and test corpora have different schemas")

    test_ids = {r.id for r in real_test.records}
    results = []
    for arm in arms:
        training = _arm_training_corpus(model, real_train, arm, config)
        overlap = {r.id for r in training.records} & test_ids
        if overlap:
            raise DataError(f"test records leaked into the {arm.label} arm: {sorted(overlap)[:3]}")
        predictor_config = dataclasses.replace(
            config.predictor, seed=derive_seed(config.seed, f"predictor-{arm.label}")
        )
        predictor = train_predictor(training, predictor_config)
        recalls = [
            recall_at_k(
                predictor,
                real_test,
                k,
                seed=derive_seed(config.seed, f"recall-{arm.label}"),
                n_resamples=config.n_resamples,
            )
            for k in config.ks
        ]
        results.append(
            UtilityResult(arm=arm.label, n_train=len(training.records), recalls=recalls)
        )
    return results
