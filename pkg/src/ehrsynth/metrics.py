"""Structure-aware perplexity metrics and corpus-level aggregation.

Three measures, all exponentials of mean negative log-likelihoods:

- ``ppl``: generic sequential perplexity of a token sequence, each token
  teacher-forced on all earlier ones.
- ``lpl``: longitudinal imputation perplexity of one modality. Events
  inside a visit are scored independently given the serialized history
  alone; the visit is never part of its own context. A uniform predictor
  scores exactly the modality's vocabulary size.
- ``mpl``: cross-modality imputation perplexity. Same independent
  per-event scoring, but through the cloze prompt, so the current visit's
  other modalities join the context.

lpl and mpl share one scoring helper (``_slot_code_nlls``): the prompt
layout is the only thing that differs between them.

Aggregation follows a median-of-patients protocol with a bootstrap 95%
confidence interval on the median.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError
from .grammar import PromptLayout, build_crossmodal_prompt, build_longitudinal_prompt
from .records import BaselineFeatures, Corpus, PatientRecord
from .seeding import numpy_rng

BOOTSTRAP_RESAMPLES = 1000


def ppl(
    model,
    sequence: Sequence[int],
    layout: PromptLayout,
    baseline: BaselineFeatures,
) -> float:
    """Sequential perplexity: exp of the mean NLL of `sequence`, each token
    conditioned on the layout's context plus all earlier sequence tokens."""
    if len(sequence) == 0:
        raise DataError("perplexity of an empty sequence is undefined")
    logprobs = model.token_logprobs(layout, baseline, list(sequence))
    return math.exp(-sum(logprobs) / len(logprobs))


def _slot_code_nlls(
    model,
    layout: PromptLayout,
    baseline: BaselineFeatures,
    mod: str,
    codes: Sequence[str],
) -> list[float]:
    """-log p(code | context) for each code of one (visit, modality) slot.

    Concurrent events are treated as independently generated: every code
    is scored at the same position, right after the modality opener, so no
    sibling event leaks into the conditioning.
    """
    vocab = model.vocab
    prefix = list(layout.decoder_prefix.ids)
    opener = vocab.modality_open_id(mod)
    if prefix[-1] != opener:
        prefix.append(opener)
    logprobs = np.asarray(
        model.next_logprobs(layout.encoder_tokens.ids, prefix, baseline), dtype=np.float64
    )
    out = []
    for code in codes:
        lp = float(logprobs[vocab.code_id(mod, code)])
        if not math.isfinite(lp):
            raise NumericError(f"non-finite log-probability for {mod}:{code}")
        out.append(-lp)
    return out


def lpl(model, record: PatientRecord, modality: str) -> float:
    """Longitudinal imputation perplexity of `modality` for one patient:
    exp of the total NLL over all of the modality's codes divided by their
    count, each visit conditioned on the uncorrupted serialized history."""
    vocab = model.vocab
    total = 0.0
    count = 0
    for t, visit in enumerate(record.visits):
        codes = visit.events.get(modality, [])
        if not codes:
            continue
        layout = build_longitudinal_prompt(record.visits[:t], vocab)
        nlls = _slot_code_nlls(model, layout, record.baseline, modality, codes)
        total += sum(nlls)
        count += len(nlls)
    if count == 0:
        raise DataError(f"record {record.id!r} has no {modality!r} events")
    return math.exp(total / count)


def mpl(model, record: PatientRecord, modality: str) -> float:
    """Cross-modality imputation perplexity of `modality` for one patient:
    per visit, the mean NLL of the modality's codes given the history and
    the visit's other modalities (cloze prompt); exp of the mean over the
    visits where the modality is present."""
    vocab = model.vocab
    visit_means = []
    for t, visit in enumerate(record.visits):
        codes = visit.events.get(modality, [])
        if not codes:
            continue
        layout = build_crossmodal_prompt(record.visits[:t], visit, modality, vocab)
        nlls = _slot_code_nlls(model, layout, record.baseline, modality, codes)
        visit_means.append(sum(nlls) / len(nlls))
    if not visit_means:
        raise DataError(f"record {record.id!r} has no {modality!r} events")
    return math.exp(sum(visit_means) / len(visit_means))


def mpl_combined(model, record: PatientRecord) -> float:
    """Single-number variant: per visit, average the per-modality mean
    NLLs over the modalities present, then exp the mean over visits."""
    vocab = model.vocab
    visit_means = []
    for t, visit in enumerate(record.visits):
        mod_means = []
        for mod in vocab.modalities:
            codes = visit.events.get(mod, [])
            if not codes:
                continue
            layout = build_crossmodal_prompt(record.visits[:t], visit, mod, vocab)
            nlls = _slot_code_nlls(model, layout, record.baseline, mod, codes)
            mod_means.append(sum(nlls) / len(nlls))
        if mod_means:
            visit_means.append(sum(mod_means) / len(mod_means))
    if not visit_means:
        raise DataError(f"record {record.id!r} has no events")
    return math.exp(sum(visit_means) / len(visit_means))


@dataclass
class PerplexityReport:
    """Per-patient values plus median aggregates and bootstrap CI95
    half-widths, keyed modality -> metric."""

    per_patient: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)
    ci95: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_patient": self.per_patient,
            "aggregate": self.aggregate,
            "ci95": self.ci95,
        }


def bootstrap_median_ci(
    values: Sequence[float],
    rng: np.random.Generator,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
) -> float:
    """Half-width of the 95% bootstrap interval of the median."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DataError("bootstrap over an empty sample")
    idx = rng.integers(0, arr.size, size=(n_resamples, arr.size))
    medians = np.median(arr[idx], axis=1)
    lo, hi = np.percentile(medians, [2.5, 97.5])
    return float((hi - lo) / 2.0)


def evaluate_corpus(
    model,
    corpus: Corpus,
    seed: int = 0,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
) -> PerplexityReport:
    """lpl and mpl per patient per modality, aggregated by the median over
    patients; patients lacking a modality entirely are skipped for it."""
    if not corpus.records:
        raise DataError("cannot evaluate an empty corpus")
    vocab = model.vocab
    report = PerplexityReport()
    values: dict[str, dict[str, list[float]]] = {
        mod: {"lpl": [], "mpl": []} for mod in vocab.modalities
    }
    for record in corpus.records:
        entry: dict[str, dict[str, float]] = {}
        for mod in vocab.modalities:
            if all(not v.events.get(mod) for v in record.visits):
                continue
            metrics = {
                "lpl": lpl(model, record, mod),
                "mpl": mpl(model, record, mod),
            }
            entry[mod] = metrics
            values[mod]["lpl"].append(metrics["lpl"])
            values[mod]["mpl"].append(metrics["mpl"])
        report.per_patient[record.id] = entry
    for mod in vocab.modalities:
        agg: dict[str, float] = {}
        ci: dict[str, float] = {}
        for name in ("lpl", "mpl"):
            sample = values[mod][name]
            if not sample:
                continue
            agg[name] = float(np.median(sample))
            rng = numpy_rng(seed, f"bootstrap-{mod}-{name}")
            ci[name] = bootstrap_median_ci(sample, rng, n_resamples)
        if agg:
            report.aggregate[mod] = agg
            report.ci95[mod] = ci
    return report
