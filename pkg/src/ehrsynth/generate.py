"""Inference-time synthesis: visit imputation, modality imputation,
whole-record generation, and policy-driven record completion.

Decoding is constrained: at every step only grammar-legal tokens keep
probability mass, so every generated stream parses. Duplicate codes within
a modality are suppressed by resampling (bound 10), after which the
modality is closed. Sampling strategies (greedy, top-k, nucleus, beam)
share one filtering pipeline: temperature rescales log-probabilities by
1/τ first, then the strategy filter truncates and renormalizes.

Any model exposing `vocab` and
`next_distribution(enc_ids, dec_ids, baseline) -> np.ndarray`
can drive these functions; tests use hand-built stubs with known
conditionals.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, SchemaMismatchError
from .grammar import (
    K_CODE,
    K_MCLOSE,
    K_MOPEN,
    K_VCLOSE,
    Vocabulary,
    build_crossmodal_prompt,
    build_longitudinal_prompt,
    serialize_visits,
)
from .records import BaselineFeatures, Corpus, EventCode, PatientRecord, Visit
from .seeding import numpy_rng

_DUPLICATE_RETRIES = 10


class DecodeOverflowWarning(UserWarning):
    """Generation hit a length bound and the output was truncated."""


@dataclass
class GenerationConfig:
    strategy: str = "greedy"
    temperature: float = 1.0
    k: int = 50
    p: float = 0.9
    beam_width: int = 4
    max_codes_per_modality: int = 10
    max_visits: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in ("greedy", "top_k", "nucleus", "beam"):
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("p must lie in (0, 1]")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.max_codes_per_modality < 1 or self.max_visits < 1:
            raise ConfigError("generation bounds must be >= 1")


# ---------------------------------------------------------------------------
# token-level sampling
# ---------------------------------------------------------------------------


def filtered_distribution(dist: np.ndarray, config: GenerationConfig) -> np.ndarray:
    """Temperature then strategy filter, renormalized.

    τ=1, top-k with k covering the support, and nucleus p=1 are exact
    identities (no transform is applied at all), which the degeneracy
    contracts rely on.
    """
    p = np.asarray(dist, dtype=np.float64)
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise NumericError(f"distribution sums to {float(p.sum())}, not 1")
    if config.temperature != 1.0:
        out = np.zeros_like(p)
        pos = p > 0
        with np.errstate(divide="ignore"):
            scaled = np.log(p[pos]) / config.temperature
        scaled -= scaled.max()
        out[pos] = np.exp(scaled)
        p = out / out.sum()

    if config.strategy in ("greedy", "beam"):
        out = np.zeros_like(p)
        out[int(np.argmax(p))] = 1.0
        return out
    if config.strategy == "top_k":
        support = int(np.count_nonzero(p))
        if config.k >= support:
            return p
        keep = np.argsort(-p, kind="stable")[: config.k]
        out = np.zeros_like(p)
        out[keep] = p[keep]
        total = out.sum()
        if total <= 0:
            raise NumericError("top-k filter removed all probability mass")
        return out / total
    # nucleus
    if config.p == 1.0:
        return p
    order = np.argsort(-p, kind="stable")
    csum = np.cumsum(p[order])
    cutoff = int(np.searchsorted(csum, config.p)) + 1
    keep = order[:cutoff]
    out = np.zeros_like(p)
    out[keep] = p[keep]
    total = out.sum()
    if total <= 0:
        raise NumericError("nucleus filter removed all probability mass")
    return out / total


def sample_next(dist: np.ndarray, config: GenerationConfig, rng: np.random.Generator) -> int:
    """One token id drawn from the filtered distribution."""
    filtered = filtered_distribution(dist, config)
    if config.strategy in ("greedy", "beam"):
        return int(np.argmax(filtered))
    return int(rng.choice(len(filtered), p=filtered))


# ---------------------------------------------------------------------------
# constrained decoding
# ---------------------------------------------------------------------------


class GrammarCursor:
    """Tracks the answer-region grammar state during decoding.

    Legal tokens are grammar-legal continuations; duplicates of codes
    already emitted in the open modality are legal by grammar but get
    suppressed by the resampling loop above this cursor.
    """

    def __init__(self, vocab: Vocabulary, mode: str, max_codes: int, open_modality: Optional[str] = None):
        self.vocab = vocab
        self.mode = mode
        self.max_codes = max_codes
        if mode == "visit":
            self.state = "in_visit"
            self.modality: Optional[str] = None
        elif mode == "modality":
            if open_modality is None:
                raise ConfigError("modality mode needs an open modality")
            self.state = "in_mod"
            self.modality = open_modality
        else:
            raise ConfigError(f"unknown cursor mode {mode!r}")
        self.used_modalities: set[str] = set()
        self.used_codes: set[int] = set()
        self.done = False

    def legal_ids(self) -> list[int]:
        vocab = self.vocab
        if self.done:
            return []
        if self.state == "in_visit":
            ids = [
                vocab.modality_open_id(m)
                for m in vocab.modalities
                if m not in self.used_modalities
            ]
            ids.append(vocab.visit_close_id)
            return ids
        # inside a modality block
        assert self.modality is not None
        if len(self.used_codes) >= self.max_codes:
            return [vocab.modality_close_id(self.modality)]
        ids = list(vocab.code_ids(self.modality))
        ids.append(vocab.modality_close_id(self.modality))
        return ids

    def fresh_ids(self) -> list[int]:
        """Legal ids minus already-emitted codes (used by beam expansion)."""
        return [t for t in self.legal_ids() if t not in self.used_codes]

    def is_duplicate(self, token_id: int) -> bool:
        return self.vocab.kind(token_id) == K_CODE and token_id in self.used_codes

    def feed(self, token_id: int) -> None:
        kind = self.vocab.kind(token_id)
        if kind == K_MOPEN:
            self.modality = self.vocab.modality_of(token_id)
            self.used_modalities.add(self.modality)
            self.used_codes = set()
            self.state = "in_mod"
        elif kind == K_CODE:
            self.used_codes.add(token_id)
        elif kind == K_MCLOSE:
            if self.modality is not None:
                self.used_modalities.add(self.modality)
            self.modality = None
            self.used_codes = set()
            if self.mode == "modality":
                # a cursor opened inside a modality ends its answer at </k>
                self.done = True
            else:
                self.state = "in_visit"
        elif kind == K_VCLOSE:
            self.done = True


def _model_max_rows(model) -> int:
    config = getattr(model, "config", None)
    if config is not None and hasattr(config, "max_len"):
        prompt = getattr(model, "n_prompt", 0)
        return int(config.max_len) - int(prompt)
    return 1 << 30


def _force_close(cursor: GrammarCursor, out: list[int]) -> None:
    vocab = cursor.vocab
    if cursor.state == "in_mod" and cursor.modality is not None:
        tid = vocab.modality_close_id(cursor.modality)
        out.append(tid)
        cursor.feed(tid)
    if not cursor.done and cursor.state == "in_visit":
        out.append(vocab.visit_close_id)
        cursor.feed(vocab.visit_close_id)
    cursor.done = True


def _sample_decode(
    model,
    enc_ids: list[int],
    prefix_ids: list[int],
    cursor: GrammarCursor,
    baseline: BaselineFeatures,
    config: GenerationConfig,
    rng: np.random.Generator,
    forced: Sequence[int] = (),
) -> list[int]:
    """Autoregressive constrained decode of one answer region.

    Returns the emitted answer tokens (closing token included). Forced
    tokens are teacher-fed through the cursor before sampling starts.
    """
    vocab = model.vocab
    dec = list(prefix_ids)
    out: list[int] = []
    for tid in forced:
        cursor.feed(tid)
        dec.append(tid)
        out.append(tid)
    max_rows = _model_max_rows(model)
    while not cursor.done:
        if len(dec) + 2 > max_rows:
            warnings.warn("decode truncated at the model length bound", DecodeOverflowWarning)
            _force_close(cursor, out)
            break
        legal = cursor.legal_ids()
        if len(legal) == 1:
            # the grammar forces the token (e.g. max codes reached); the
            # constrained distribution is a point mass, no query needed
            tid = legal[0]
            cursor.feed(tid)
            dec.append(tid)
            out.append(tid)
            continue
        dist = np.asarray(model.next_distribution(enc_ids, dec, baseline), dtype=np.float64)
        constrained = np.zeros_like(dist)
        constrained[legal] = dist[legal]
        total = constrained.sum()
        if total <= 0:
            raise NumericError("model assigns zero mass to every legal token")
        constrained /= total

        tid = sample_next(constrained, config, rng)
        if cursor.is_duplicate(tid):
            for _ in range(_DUPLICATE_RETRIES):
                tid = sample_next(constrained, config, rng)
                if not cursor.is_duplicate(tid):
                    break
            else:
                # persistent duplicates: stop this modality
                tid = vocab.modality_close_id(cursor.modality)
        cursor.feed(tid)
        dec.append(tid)
        out.append(tid)
    return out


def _beam_decode(
    model,
    enc_ids: list[int],
    prefix_ids: list[int],
    cursor_factory,
    baseline: BaselineFeatures,
    config: GenerationConfig,
) -> list[int]:
    """Whole-sequence beam search over grammar-legal, duplicate-free
    continuations, ranked by summed log-probability.

    Callers route beam_width == 1 through the greedy decode path instead,
    which keeps the width-1 ≡ greedy equality exact even where greedy's
    duplicate rule (retry then close) differs from duplicate-free
    expansion.
    """
    max_rows = _model_max_rows(model)
    beams = [(0.0, list(prefix_ids), cursor_factory())]
    finished: list[tuple[float, list[int]]] = []
    # generous step bound; every expansion either adds a code or closes
    for _ in range(4 * config.max_codes_per_modality * len(model.vocab.modalities) + 8):
        if not beams:
            break
        candidates = []
        for score, dec, cursor in beams:
            if len(dec) + 2 > max_rows:
                warnings.warn(
                    "beam decode truncated at the model length bound", DecodeOverflowWarning
                )
                out = list(dec[len(prefix_ids) :])
                _force_close(cursor, out)
                finished.append((score, list(prefix_ids) + out))
                continue
            fresh = cursor.fresh_ids()
            if len(fresh) == 1:
                # grammar-forced step: constrained probability one, score unchanged
                candidates.append((score, dec + [fresh[0]], cursor, fresh[0]))
                continue
            dist = np.asarray(model.next_distribution(enc_ids, dec, baseline), dtype=np.float64)
            if config.temperature != 1.0:
                adjusted = np.zeros_like(dist)
                pos = dist > 0
                with np.errstate(divide="ignore"):
                    scaled = np.log(dist[pos]) / config.temperature
                scaled -= scaled.max()
                adjusted[pos] = np.exp(scaled)
                dist = adjusted / adjusted.sum()
            expanded = False
            for tid in fresh:
                if dist[tid] <= 0:
                    continue
                candidates.append((score + float(np.log(dist[tid])), dec + [tid], cursor, tid))
                expanded = True
            if not expanded:
                # dead end: every legal continuation has zero mass
                out = list(dec[len(prefix_ids) :])
                close_cursor = copy.deepcopy(cursor)
                _force_close(close_cursor, out)
                finished.append((score, list(prefix_ids) + out))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for score, dec, cursor, tid in candidates[: config.beam_width]:
            new_cursor = copy.deepcopy(cursor)
            new_cursor.feed(tid)
            if new_cursor.done:
                finished.append((score, dec))
            else:
                beams.append((score, dec, new_cursor))
        if len(finished) >= config.beam_width:
            break
    if not finished:
        # nothing closed within the step bound: force-close the best beam
        score, dec, cursor = max(beams, key=lambda b: b[0])
        out = list(dec[len(prefix_ids) :])
        _force_close(cursor, out)
        finished.append((score, list(prefix_ids) + out))
    finished.sort(key=lambda c: (-c[0], c[1]))
    return finished[0][1][len(prefix_ids) :]


def _visit_from_tokens(answer: list[int], vocab: Vocabulary) -> Visit:
    events: dict[str, list[str]] = {m: [] for m in vocab.modalities}
    current: Optional[str] = None
    for tid in answer:
        kind = vocab.kind(tid)
        if kind == K_MOPEN:
            current = vocab.modality_of(tid)
        elif kind == K_CODE and current is not None:
            events[current].append(vocab.code_string(tid))
        elif kind in (K_MCLOSE, K_VCLOSE):
            if kind == K_MCLOSE:
                current = None
    return Visit(events)


# ---------------------------------------------------------------------------
# imputation and generation
# ---------------------------------------------------------------------------


def _decode_visit(
    model,
    history: Sequence[Visit],
    baseline: BaselineFeatures,
    config: GenerationConfig,
    rng: np.random.Generator,
) -> tuple[Visit, list[int], list[int]]:
    """Decode one visit; also return the encoder ids and the final decoder
    stream so the caller can query the continue/stop token that follows."""
    vocab = model.vocab
    layout = build_longitudinal_prompt(list(history), vocab)
    enc_ids = list(layout.encoder_tokens.ids)
    prefix = list(layout.decoder_prefix.ids)
    if config.strategy == "beam" and config.beam_width > 1:
        answer = _beam_decode(
            model, enc_ids, prefix,
            lambda: GrammarCursor(vocab, "visit", config.max_codes_per_modality),
            baseline, config,
        )
    else:
        cursor = GrammarCursor(vocab, "visit", config.max_codes_per_modality)
        answer = _sample_decode(model, enc_ids, prefix, cursor, baseline, config, rng)
    return _visit_from_tokens(answer, vocab), enc_ids, prefix + answer


def impute_next_visit(
    model,
    history: Sequence[Visit],
    baseline: BaselineFeatures,
    config: GenerationConfig,
    rng: Optional[np.random.Generator] = None,
) -> Visit:
    """Decode the visit following the given history."""
    if rng is None:
        rng = numpy_rng(config.seed, "impute-next-visit")
    visit, _, _ = _decode_visit(model, history, baseline, config, rng)
    return visit


def impute_modality(
    model,
    history: Sequence[Visit],
    current: Visit,
    mod: str,
    baseline: BaselineFeatures,
    config: GenerationConfig,
    rng: Optional[np.random.Generator] = None,
    forced_codes: Sequence[str] = (),
) -> list[EventCode]:
    """Fill one modality of the current visit from its cloze prompt.

    forced_codes are kept events that the decode is conditioned on; they
    are teacher-fed before sampling and appear first in the result.
    """
    if rng is None:
        rng = numpy_rng(config.seed, "impute-modality")
    vocab = model.vocab
    if mod not in vocab.modalities:
        raise SchemaMismatchError(f"unknown modality {mod!r}")
    layout = build_crossmodal_prompt(list(history), current, mod, vocab)
    forced = [vocab.code_id(mod, c) for c in forced_codes]
    if config.strategy == "beam" and config.beam_width > 1:
        # beam decoding cannot teacher-force mid-sequence; prepend to prefix
        prefix = list(layout.decoder_prefix.ids) + forced
        base_cursor = GrammarCursor(vocab, "modality", config.max_codes_per_modality, mod)
        for tid in forced:
            base_cursor.feed(tid)
        answer = _beam_decode(
            model, layout.encoder_tokens.ids, prefix,
            lambda: copy.deepcopy(base_cursor), baseline, config,
        )
        answer = forced + answer
    else:
        cursor = GrammarCursor(vocab, "modality", config.max_codes_per_modality, mod)
        answer = _sample_decode(
            model, layout.encoder_tokens.ids, layout.decoder_prefix.ids,
            cursor, baseline, config, rng, forced=forced,
        )
    return [
        EventCode(mod, vocab.code_string(t)) for t in answer if vocab.kind(t) == K_CODE
    ]


def _continue_after(
    model,
    enc_ids: list[int],
    dec_ids: list[int],
    baseline: BaselineFeatures,
    config: GenerationConfig,
    rng: np.random.Generator,
) -> bool:
    """One constrained step over {<v>, </s>} at the end of a visit decode.

    This is the position the training loss covers: the token after a
    closed visit is either another visit opener or the record end.
    """
    vocab = model.vocab
    dist = np.asarray(model.next_distribution(enc_ids, dec_ids, baseline), dtype=np.float64)
    legal = [vocab.visit_open_id, vocab.eos_id]
    constrained = np.zeros_like(dist)
    constrained[legal] = dist[legal]
    total = constrained.sum()
    if total <= 0:
        raise NumericError("model assigns zero mass to both continue and stop")
    tid = sample_next(constrained / total, config, rng)
    return tid == vocab.visit_open_id


def generate_record(
    model,
    baseline: BaselineFeatures,
    config: GenerationConfig,
    rng: Optional[np.random.Generator] = None,
    record_id: str = "generated",
) -> PatientRecord:
    """Generate a whole record from scratch by iterating next-visit
    imputation until the model emits the record-end token or max_visits."""
    if rng is None:
        rng = numpy_rng(config.seed, "generate-record")
    max_rows = _model_max_rows(model)
    visits: list[Visit] = []
    while True:
        if len(serialize_visits(visits, model.vocab)) > max_rows:
            warnings.warn(
                "record generation stopped: history exceeds the model length bound",
                DecodeOverflowWarning,
            )
            break
        visit, enc_ids, dec_final = _decode_visit(model, visits, baseline, config, rng)
        visits.append(visit)
        if len(visits) >= config.max_visits:
            break
        if len(dec_final) > max_rows:
            # no room left to score the continue/stop token
            break
        if not _continue_after(model, enc_ids, dec_final, baseline, config, rng):
            break
    return PatientRecord(id=record_id, baseline=baseline, visits=visits)


def sample_baselines(corpus: Corpus, n: int, seed: int) -> list[BaselineFeatures]:
    """Empirical baseline draws: bootstrap from the corpus demographics."""
    rng = numpy_rng(seed, "sample-baselines")
    picks = rng.integers(0, len(corpus.records), size=n)
    return [
        BaselineFeatures(
            categorical=list(corpus.records[int(i)].baseline.categorical),
            numerical=list(corpus.records[int(i)].baseline.numerical),
        )
        for i in picks
    ]


def generate_corpus(
    model,
    baselines: Sequence[BaselineFeatures],
    config: GenerationConfig,
    id_prefix: str = "synth",
) -> Corpus:
    """One generated record per baseline; record i uses an independent
    seed substream so corpus size never shifts earlier records."""
    records = []
    for i, baseline in enumerate(baselines):
        rng = numpy_rng(config.seed, f"generate-record-{i}")
        records.append(
            generate_record(model, baseline, config, rng, record_id=f"{id_prefix}-{i:06d}")
        )
    return Corpus(schema=model.schema, records=records)


# ---------------------------------------------------------------------------
# record completion
# ---------------------------------------------------------------------------


@dataclass
class CompletionAction:
    kind: str  # keep_all | remove_all | remove_random
    fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("keep_all", "remove_all", "remove_random"):
            raise ConfigError(f"unknown completion action {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("fraction must lie in [0, 1]")


@dataclass
class CompletionPolicy:
    """Which events each (visit, modality) slot keeps during completion.

    overrides maps (visit index, modality) to an action; slots without an
    override use the default. remove_random drops each code independently
    with probability `fraction`.
    """

    default: CompletionAction = field(default_factory=lambda: CompletionAction("keep_all"))
    overrides: dict[tuple[int, str], CompletionAction] = field(default_factory=dict)
    seed: int = 0

    def action_for(self, visit_index: int, mod: str) -> CompletionAction:
        return self.overrides.get((visit_index, mod), self.default)


def complete_record(
    model,
    real: PatientRecord,
    policy: CompletionPolicy,
    config: GenerationConfig,
) -> tuple[PatientRecord, dict]:
    """Scan the record in time order, keep/remove events per policy, and
    re-impute removed portions conditioned on everything already settled:
    earlier completed visits, the current visit's other modalities as
    processed so far, and the kept events of the slot itself.

    Returns the completed record plus a provenance report listing, per
    touched slot, the kept, removed, and imputed events.
    """
    vocab = model.vocab
    completed: list[Visit] = []
    slots: list[dict] = []
    for t, visit in enumerate(real.visits):
        events = {m: list(codes) for m, codes in visit.events.items()}
        for mod in vocab.modalities:
            action = policy.action_for(t, mod)
            codes = events.get(mod, [])
            if action.kind == "keep_all":
                continue
            if action.kind == "remove_all":
                kept, removed = [], list(codes)
            else:
                rng = numpy_rng(policy.seed, f"policy-{t}-{mod}")
                kept, removed = [], []
                for code in codes:
                    (removed if rng.random() < action.fraction else kept).append(code)
            if not removed:
                events[mod] = kept
                continue
            rng = numpy_rng(config.seed, f"complete-{real.id}-{t}-{mod}")
            result = impute_modality(
                model,
                completed,
                Visit({m: c for m, c in events.items() if m != mod}),
                mod,
                real.baseline,
                config,
                rng,
                forced_codes=kept,
            )
            new_codes = [ev.code for ev in result]
            events[mod] = new_codes
            slots.append(
                {
                    "visit": t,
                    "modality": mod,
                    "kept": kept,
                    "removed": removed,
                    "imputed": [c for c in new_codes if c not in kept],
                }
            )
        completed.append(Visit(events))
    record = PatientRecord(id=real.id, baseline=real.baseline, visits=completed)
    return record, {"record_id": real.id, "slots": slots}
