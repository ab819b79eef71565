"""Membership- and attribute-inference adversaries against a trained model.

Membership inference: a shadow model is fit on synthetic output, records
are summarized by the shadow's perplexity statistics, and a small
classifier tries to tell training members from held-out records.

Attribute inference: an imputation model fit on synthetic output is
compared against a prior model fit on the real training set; a code is
predicted present when the log-odds clears a threshold.  A control arm
swaps in an imputer fit directly on the held-out records.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, SchemaMismatchError
from .grammar import (
    Vocabulary,
    build_crossmodal_prompt,
    build_longitudinal_prompt,
    visit_body_ids,
)
from .metrics import lpl, mpl
from .model import EncDecModel, ModelConfig, TrainConfig, train
from .records import Corpus, PatientRecord, Visit
from .seeding import derive_seed, numpy_rng

# floor for imputation probabilities before taking logs, so the log-odds
# stay finite and the sentinel thresholds behave exactly
PROB_FLOOR = 1e-12

_SEED_MASK = (1 << 63) - 1


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class MembershipAttackResult:
    """Scores and ROC of the membership classifier on members ∪ nonmembers."""

    record_ids: list[str]
    scores: list[float]
    labels: list[int]  # 1 = training member
    roc: list[tuple[float, float]]  # (FPR, TPR) per threshold, (0,0) to (1,1)
    auc: float

    def to_dict(self) -> dict:
        return {
            "record_ids": list(self.record_ids),
            "scores": [float(s) for s in self.scores],
            "labels": [int(l) for l in self.labels],
            "roc": [[float(f), float(t)] for f, t in self.roc],
            "auc": float(self.auc),
        }


@dataclass
class AttributeAttackResult:
    """TPR/FPR sweep over the decision threshold, for both imputer arms."""

    delta_grid: list[float]
    treatment: list[tuple[float, float]]  # (TPR, FPR) per delta
    control: list[tuple[float, float]]
    n_positives: int
    n_negatives: int

    def to_dict(self) -> dict:
        return {
            "delta_grid": [float(d) for d in self.delta_grid],
            "treatment": [[float(t), float(f)] for t, f in self.treatment],
            "control": [[float(t), float(f)] for t, f in self.control],
            "n_positives": int(self.n_positives),
            "n_negatives": int(self.n_negatives),
        }


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


def roc_points(labels: Sequence[int], scores: Sequence[float]) -> list[tuple[float, float]]:
    """Step ROC curve from (0,0) to (1,1), one point per distinct score.

    Tied scores advance both rates in a single step, so the curve's
    trapezoid area matches the rank-statistic AUC (ties at half credit).
    """
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise DataError("labels and scores must be equal-length vectors")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one member and one nonmember")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            tp += int(y[j] == 1)
            fp += int(y[j] == 0)
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def auc_trapezoid(points: Sequence[tuple[float, float]]) -> float:
    """Area under a (FPR, TPR) polyline by the trapezoid rule."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def auc_rank(labels: Sequence[int], scores: Sequence[float]) -> float:
    """AUC as the Mann-Whitney rank statistic, ties counted at half."""
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one member and one nonmember")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and sorted_s[j] == sorted_s[i]:
            j += 1
        # 1-based ranks, tied values share the group mean
        ranks[order[i:j]] = (i + 1 + j) / 2.0
        i = j
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# shadow model and features
# ---------------------------------------------------------------------------


def train_shadow(
    synthetic: Corpus,
    train_config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
) -> EncDecModel:
    """Fit an independently initialized sequence model on the synthetic
    corpus, on the longitudinal next-visit task only.

    The synthetic corpus doubles as the validation split: the shadow is
    meant to mimic (and overfit) its training distribution, so no held-out
    selection is wanted.
    """
    if train_config is None:
        train_config = TrainConfig()
    train_config = dataclasses.replace(train_config, long_task_fraction=1.0)
    shadow, _ = train(synthetic, synthetic, train_config, model_config=model_config)
    return shadow


def feature_names(vocab: Vocabulary) -> list[str]:
    names = [f"log_lpl_{m}" for m in vocab.modalities]
    names += [f"log_mpl_{m}" for m in vocab.modalities]
    names += ["log_ppl", "n_events"]
    return names


def _record_log_ppl(shadow: EncDecModel, record: PatientRecord) -> float:
    """Mean NLL (= log perplexity) over the record's longitudinal targets:
    every visit-body token plus the visit/record continuation token."""
    vocab = shadow.vocab
    total = 0.0
    count = 0
    last = len(record.visits) - 1
    for t, visit in enumerate(record.visits):
        layout = build_longitudinal_prompt(record.visits[:t], vocab)
        target = visit_body_ids(visit, vocab)
        target.append(vocab.visit_open_id if t < last else vocab.eos_id)
        logprobs = shadow.token_logprobs(layout, record.baseline, target)
        total -= sum(logprobs)
        count += len(logprobs)
    if count == 0:
        raise DataError(f"record {record.id!r} has no visits")
    return total / count


def membership_features(shadow: EncDecModel, corpus: Corpus) -> np.ndarray:
    """Per-record feature rows: log lpl and log mpl per modality, overall
    log perplexity, and the event count.

    A record with no events of some modality gets log(vocab size) for that
    modality's two entries: the random-guess level, carrying no membership
    signal either way.
    """
    vocab = shadow.vocab
    rows = []
    for record in corpus.records:
        row = []
        for metric in (lpl, mpl):
            for mod in vocab.modalities:
                if any(v.events.get(mod) for v in record.visits):
                    row.append(math.log(metric(shadow, record, mod)))
                else:
                    row.append(math.log(len(vocab.code_ids(mod))))
        row.append(_record_log_ppl(shadow, record))
        row.append(float(sum(len(c) for v in record.visits for c in v.events.values())))
        rows.append(row)
    return np.asarray(rows, dtype=np.float64)


@dataclass
class MiDataset:
    """Feature/label table for the membership classifier.

    Features are raw (unstandardized) log-scale statistics; the classifier
    standardizes with statistics of this table at fit time.  The shadow
    rides along so evaluation corpora can be featurized identically.
    """

    features: np.ndarray
    labels: np.ndarray  # 1 = synthetic in-set
    feature_names: list[str]
    record_ids: list[str]
    shadow: EncDecModel


def subsample_corpus(corpus: Corpus, size: int, seed: int) -> Corpus:
    """Uniform subset without replacement, deterministic in the seed."""
    if size > len(corpus.records):
        raise DataError(f"cannot draw {size} records from {len(corpus.records)}")
    rng = numpy_rng(seed, "corpus-subsample")
    idx = sorted(rng.choice(len(corpus.records), size=size, replace=False).tolist())
    return corpus.subset([corpus.records[i] for i in idx])


def build_mi_dataset(shadow: EncDecModel, in_set: Corpus, out_set: Corpus) -> MiDataset:
    """Balanced table of shadow-perplexity features, label 1 for in_set."""
    if len(in_set.records) != len(out_set.records):
        raise DataError(
            "membership table must be balanced: "
            f"{len(in_set.records)} in-set vs {len(out_set.records)} out-set records"
        )
    if in_set.schema != out_set.schema:
        raise SchemaMismatchError("in-set and out-set corpora have different schemas")
    feats = np.concatenate(
        [membership_features(shadow, in_set), membership_features(shadow, out_set)]
    )
    labels = np.concatenate(
        [np.ones(len(in_set.records), dtype=np.int64), np.zeros(len(out_set.records), dtype=np.int64)]
    )
    ids = [r.id for r in in_set.records] + [r.id for r in out_set.records]
    return MiDataset(
        features=feats,
        labels=labels,
        feature_names=feature_names(shadow.vocab),
        record_ids=ids,
        shadow=shadow,
    )


# ---------------------------------------------------------------------------
# membership classifier
# ---------------------------------------------------------------------------


class _MembershipNet(nn.Module):
    """Three affine layers with ReLU between; one logit out."""

    def __init__(self, d_in: int, hidden: int) -> None:
        super().__init__()
        self.stack = nn.Sequential(
            nn.Linear(d_in, hidden, dtype=torch.float64),
            nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=torch.float64),
            nn.ReLU(),
            nn.Linear(hidden, 1, dtype=torch.float64),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x).squeeze(-1)


def _standardizer(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)  # constant columns carry nothing
    return mean, std


def run_membership_attack(
    mi_dataset: MiDataset,
    eval_members: Corpus,
    eval_nonmembers: Corpus,
    seed: int = 0,
    epochs: int = 300,
    hidden: int = 32,
    learning_rate: float = 1e-2,
) -> MembershipAttackResult:
    """Fit the membership classifier on the table, score the real training
    members against the held-out records, and report the full ROC + AUC."""
    labels = np.asarray(mi_dataset.labels, dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise DataError("membership table has only one label value")
    if epochs < 1 or hidden < 1 or learning_rate <= 0:
        raise ConfigError("epochs and hidden must be >= 1, learning_rate positive")

    mean, std = _standardizer(mi_dataset.features)
    x = torch.tensor((mi_dataset.features - mean) / std, dtype=torch.float64)
    y = torch.tensor(labels, dtype=torch.float64)

    torch.manual_seed(derive_seed(seed, "mi-classifier") & _SEED_MASK)
    net = _MembershipNet(x.shape[1], hidden)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    loss_fn = nn.BCEWithLogitsLoss()
    net.train()
    for _ in range(epochs):
        opt.zero_grad()
        loss = loss_fn(net(x), y)
        loss.backward()
        opt.step()
    net.eval()

    shadow = mi_dataset.shadow
    eval_feats = np.concatenate(
        [
            membership_features(shadow, eval_members),
            membership_features(shadow, eval_nonmembers),
        ]
    )
    eval_labels = [1] * len(eval_members.records) + [0] * len(eval_nonmembers.records)
    with torch.no_grad():
        logits = net(torch.tensor((eval_feats - mean) / std, dtype=torch.float64))
        scores = torch.sigmoid(logits).numpy().tolist()
    ids = [r.id for r in eval_members.records] + [r.id for r in eval_nonmembers.records]
    points = roc_points(eval_labels, scores)
    return MembershipAttackResult(
        record_ids=ids,
        scores=scores,
        labels=eval_labels,
        roc=points,
        auc=auc_rank(eval_labels, scores),
    )


# ---------------------------------------------------------------------------
# attribute inference
# ---------------------------------------------------------------------------


def _hide_codes(
    record: PatientRecord, hide_fraction: float, rng: np.random.Generator
) -> tuple[list[Visit], list[tuple[int, str, str]]]:
    """Drop each code independently with probability hide_fraction.

    Returns the visible visits and the hidden (visit, modality, code)
    triples; downstream predictors only ever see the visible part.
    """
    visible = []
    hidden = []
    for t, visit in enumerate(record.visits):
        events: dict[str, list[str]] = {}
        for mod in sorted(visit.events):
            kept = []
            for code in visit.events[mod]:
                if rng.random() < hide_fraction:
                    hidden.append((t, mod, code))
                else:
                    kept.append(code)
            if kept:
                events[mod] = kept
        visible.append(Visit(events=events))
    return visible, hidden


def _candidate_log_odds(
    imputer: EncDecModel,
    prior: EncDecModel,
    visible: Sequence[Visit],
    baseline,
    t: int,
    mod: str,
    code: str,
) -> float:
    """log P_imputer(code) − log P_prior(code), both conditioned on the
    visible record with the target modality slot masked and the slot's
    visible codes teacher-forced."""
    floor = math.log(PROB_FLOOR)
    lps = []
    for model in (imputer, prior):
        vocab = model.vocab
        layout = build_crossmodal_prompt(list(visible[:t]), visible[t], mod, vocab)
        prefix = list(layout.decoder_prefix.ids)
        prefix.extend(vocab.code_id(mod, c) for c in visible[t].events.get(mod, []))
        logprobs = model.next_logprobs(layout.encoder_tokens.ids, prefix, baseline)
        lps.append(max(float(logprobs[vocab.code_id(mod, code)]), floor))
    return lps[0] - lps[1]


def attribute_sweep(
    imputer: EncDecModel,
    prior: EncDecModel,
    held_out: Corpus,
    delta_grid: Sequence[float],
    hide_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[list[tuple[float, float]], int, int]:
    """TPR/FPR at each threshold for one imputer arm.

    Each held-out record loses hide_fraction of its codes; the hidden codes
    are the positives.  Each positive is paired with one code of the same
    modality absent from the original visit (skipped when the modality's
    vocabulary is exhausted by the visit).  A candidate is predicted
    present when its log-odds is >= the threshold, so TPR and FPR are
    nonincreasing along an ascending grid by construction.
    """
    if len(delta_grid) == 0:
        raise ConfigError("delta_grid must not be empty")
    if list(delta_grid) != sorted(delta_grid):
        raise ConfigError("delta_grid must be sorted ascending")
    if not 0.0 <= hide_fraction <= 1.0:
        raise ConfigError("hide_fraction must lie in [0, 1]")
    if imputer.schema != held_out.schema or prior.schema != held_out.schema:
        raise SchemaMismatchError("imputer, prior, and corpus must share one schema")

    schema = held_out.schema
    rng = numpy_rng(seed, "attribute-mask")
    odds_pos: list[float] = []
    odds_neg: list[float] = []
    for record in held_out.records:
        visible, hidden = _hide_codes(record, hide_fraction, rng)
        for t, mod, code in hidden:
            odds_pos.append(
                _candidate_log_odds(imputer, prior, visible, record.baseline, t, mod, code)
            )
            absent = sorted(set(schema.vocabularies[mod]) - set(record.visits[t].events.get(mod, [])))
            if not absent:
                continue
            decoy = absent[int(rng.integers(len(absent)))]
            odds_neg.append(
                _candidate_log_odds(imputer, prior, visible, record.baseline, t, mod, decoy)
            )
    if not odds_pos or not odds_neg:
        raise DataError("attribute sweep produced no positives or no negatives")

    pos = np.asarray(odds_pos, dtype=np.float64)
    neg = np.asarray(odds_neg, dtype=np.float64)
    sweep = [
        (float((pos >= delta).mean()), float((neg >= delta).mean())) for delta in delta_grid
    ]
    return sweep, len(odds_pos), len(odds_neg)


def run_attribute_attack(
    synthetic: Corpus,
    train_real: Corpus,
    test_real: Corpus,
    delta_grid: Sequence[float],
    hide_fraction: float = 0.2,
    seed: int = 0,
    train_config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
) -> AttributeAttackResult:
    """Full attribute-inference experiment with treatment and control arms.

    The treatment imputer is fit on the synthetic corpus, the prior on the
    real training corpus, and the control imputer on the held-out corpus
    itself (an upper bound on leakage).  Both arms score the same masked
    held-out records with the same hidden codes and decoys.
    """
    if len(delta_grid) == 0:
        raise ConfigError("delta_grid must not be empty")
    if synthetic.schema != train_real.schema or train_real.schema != test_real.schema:
        raise SchemaMismatchError("all three corpora must share one schema")
    if train_config is None:
        train_config = TrainConfig()
    # imputers only ever answer cloze queries
    imputer_config = dataclasses.replace(train_config, long_task_fraction=0.0)

    treatment_model, _ = train(synthetic, synthetic, imputer_config, model_config=model_config)
    prior_model, _ = train(train_real, train_real, imputer_config, model_config=model_config)
    control_model, _ = train(test_real, test_real, imputer_config, model_config=model_config)

    treatment, n_pos, n_neg = attribute_sweep(
        treatment_model, prior_model, test_real, delta_grid, hide_fraction, seed
    )
    control, n_pos_c, n_neg_c = attribute_sweep(
        control_model, prior_model, test_real, delta_grid, hide_fraction, seed
    )
    assert (n_pos, n_neg) == (n_pos_c, n_neg_c)  # same seed, same masking
    return AttributeAttackResult(
        delta_grid=[float(d) for d in delta_grid],
        treatment=treatment,
        control=control,
        n_positives=n_pos,
        n_negatives=n_neg,
    )
