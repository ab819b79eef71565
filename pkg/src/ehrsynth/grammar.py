"""Record ↔ token-sequence mapping and prompt layout builders.

Records are flattened with structural special tokens:

    <s> ( <v> ( <mod> code* </mod> )* </v> )* </s>

Empty modalities are omitted. Modalities appear in schema order and codes
in stored order, so serialization is canonical and injective. Two prompt
layouts are built on top of the grammar:

* longitudinal (prefix) prompts: the encoder sees the serialized history
  and the decoder continues with the next visit after an opening ``<v>``;
* cross-modal (cloze) prompts: the encoder sees history plus the current
  visit with the target modality's block reduced to a masked slot
  ``<k><mask></k>``, and the decoder fills the modality after ``<k>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import (
    DataError,
    GrammarViolationError,
    SchemaMismatchError,
    UnknownCodeError,
)
from .records import BaselineFeatures, CorpusSchema, PatientRecord, Visit

PAD, BOS, EOS, MASK = "<pad>", "<s>", "</s>", "<mask>"
VISIT_OPEN, VISIT_CLOSE = "<v>", "</v>"

# token kind labels used by span annotation and constrained decoding
K_PAD, K_BOS, K_EOS, K_MASK = "pad", "bos", "eos", "mask"
K_VOPEN, K_VCLOSE, K_MOPEN, K_MCLOSE, K_CODE = "v_open", "v_close", "m_open", "m_close", "code"


@dataclass
class Vocabulary:
    """Dense token-id table: specials, per-modality markers, code tokens.

    Ids are contiguous: the shared specials first, then for each modality
    (schema order) its open/close markers, then all code blocks. The code
    token string is "modality:code" so codes stay unique across modalities.
    """

    tokens: list[str]
    modalities: list[str]
    _kinds: list[str] = field(repr=False, default_factory=list)
    _mods: list[Optional[str]] = field(repr=False, default_factory=list)
    _ids: dict[str, int] = field(repr=False, default_factory=dict)
    _code_ranges: dict[str, tuple[int, int]] = field(repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary token strings must be unique")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        self._kinds = []
        self._mods = []
        opens = {f"<{m}>": m for m in self.modalities}
        closes = {f"</{m}>": m for m in self.modalities}
        for tok in self.tokens:
            if tok == PAD:
                kind, mod = K_PAD, None
            elif tok == BOS:
                kind, mod = K_BOS, None
            elif tok == EOS:
                kind, mod = K_EOS, None
            elif tok == MASK:
                kind, mod = K_MASK, None
            elif tok == VISIT_OPEN:
                kind, mod = K_VOPEN, None
            elif tok == VISIT_CLOSE:
                kind, mod = K_VCLOSE, None
            elif tok in opens:
                kind, mod = K_MOPEN, opens[tok]
            elif tok in closes:
                kind, mod = K_MCLOSE, closes[tok]
            else:
                mod, _, code = tok.partition(":")
                if not code or mod not in self.modalities:
                    raise DataError(f"unclassifiable token string {tok!r}")
                kind = K_CODE
            self._kinds.append(kind)
            self._mods.append(mod)
        for mod in self.modalities:
            ids = [i for i, (k, m) in enumerate(zip(self._kinds, self._mods)) if k == K_CODE and m == mod]
            if ids:
                lo, hi = min(ids), max(ids) + 1
                if ids != list(range(lo, hi)):
                    raise DataError(f"code ids for modality {mod!r} are not contiguous")
                self._code_ranges[mod] = (lo, hi)
            else:
                self._code_ranges[mod] = (0, 0)

    @classmethod
    def from_schema(cls, schema: CorpusSchema) -> "Vocabulary":
        tokens = [PAD, BOS, EOS, MASK, VISIT_OPEN, VISIT_CLOSE]
        for mod in schema.modalities:
            tokens.append(f"<{mod}>")
            tokens.append(f"</{mod}>")
        for mod in schema.modalities:
            tokens.extend(f"{mod}:{code}" for code in schema.vocabularies[mod])
        return cls(tokens=tokens, modalities=list(schema.modalities))

    def __len__(self) -> int:
        return len(self.tokens)

    # -- id lookups ---------------------------------------------------------

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def mask_id(self) -> int:
        return self._ids[MASK]

    @property
    def visit_open_id(self) -> int:
        return self._ids[VISIT_OPEN]

    @property
    def visit_close_id(self) -> int:
        return self._ids[VISIT_CLOSE]

    def modality_open_id(self, mod: str) -> int:
        try:
            return self._ids[f"<{mod}>"]
        except KeyError:
            raise SchemaMismatchError(f"unknown modality {mod!r}") from None

    def modality_close_id(self, mod: str) -> int:
        try:
            return self._ids[f"</{mod}>"]
        except KeyError:
            raise SchemaMismatchError(f"unknown modality {mod!r}") from None

    def code_id(self, mod: str, code: str) -> int:
        tok = f"{mod}:{code}"
        if tok not in self._ids:
            raise UnknownCodeError(mod, code)
        return self._ids[tok]

    def code_ids(self, mod: str) -> range:
        lo, hi = self._code_ranges[mod]
        return range(lo, hi)

    def kind(self, token_id: int) -> str:
        return self._kinds[token_id]

    def modality_of(self, token_id: int) -> Optional[str]:
        return self._mods[token_id]

    def code_string(self, token_id: int) -> str:
        if self._kinds[token_id] != K_CODE:
            raise DataError(f"token id {token_id} is not a code token")
        return self.tokens[token_id].partition(":")[2]

    # -- persistence --------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.tokens, "modalities": self.modalities}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(tokens=list(data["tokens"]), modalities=list(data["modalities"]))


@dataclass(frozen=True)
class SpanInfo:
    """Per-position annotation: which visit, which modality, structural?"""

    visit_index: Optional[int]
    modality: Optional[str]
    is_special: bool


def compute_spans(ids: Sequence[int], vocab: Vocabulary) -> list[SpanInfo]:
    """Annotate each position from the ids alone.

    Lenient: never raises on malformed structure (prompt prefixes and
    corrupted sequences are legal inputs); parse() is the strict path.
    """
    spans: list[SpanInfo] = []
    visit = -1
    in_visit = False
    mod: Optional[str] = None
    for tid in ids:
        kind = vocab.kind(tid)
        if kind == K_VOPEN:
            visit += 1
            in_visit = True
            mod = None
            spans.append(SpanInfo(visit, None, True))
        elif kind == K_VCLOSE:
            spans.append(SpanInfo(visit if in_visit else None, None, True))
            in_visit = False
            mod = None
        elif kind == K_MOPEN:
            mod = vocab.modality_of(tid)
            spans.append(SpanInfo(visit if in_visit else None, mod, True))
        elif kind == K_MCLOSE:
            spans.append(SpanInfo(visit if in_visit else None, vocab.modality_of(tid), True))
            mod = None
        elif kind == K_CODE:
            spans.append(SpanInfo(visit if in_visit else None, mod, False))
        else:  # pad, bos, eos, mask
            spans.append(SpanInfo(visit if in_visit else None, mod, True))
    return spans


@dataclass
class TokenSequence:
    ids: list[int]
    vocab: Vocabulary

    def __post_init__(self) -> None:
        for tid in self.ids:
            if not 0 <= tid < len(self.vocab):
                raise DataError(f"token id {tid} outside vocabulary")

    @property
    def spans(self) -> list[SpanInfo]:
        return compute_spans(self.ids, self.vocab)

    def token_strings(self) -> list[str]:
        return [self.vocab.tokens[t] for t in self.ids]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TokenSequence) and self.ids == other.ids


@dataclass
class TargetSpec:
    """What the answer slot denotes."""

    kind: str  # "next_visit" | "modality"
    visit_index: int
    modality: Optional[str] = None


@dataclass
class PromptLayout:
    encoder_tokens: TokenSequence
    target_spec: TargetSpec
    decoder_prefix: TokenSequence


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def visit_block_ids(visit: Visit, vocab: Vocabulary) -> list[int]:
    """<v> (modality blocks for nonempty modalities, schema order) </v>"""
    ids = [vocab.visit_open_id]
    ids.extend(visit_body_ids(visit, vocab))
    return ids


def visit_body_ids(visit: Visit, vocab: Vocabulary) -> list[int]:
    """Everything after <v>: modality blocks then </v>. Used as the
    longitudinal answer target."""
    ids: list[int] = []
    for mod in vocab.modalities:
        codes = visit.events.get(mod, [])
        if not codes:
            continue
        ids.append(vocab.modality_open_id(mod))
        ids.extend(vocab.code_id(mod, c) for c in codes)
        ids.append(vocab.modality_close_id(mod))
    ids.append(vocab.visit_close_id)
    return ids


def modality_answer_ids(visit: Visit, mod: str, vocab: Vocabulary) -> list[int]:
    """Codes of one modality then its closing marker. The cross-modal
    answer target (the decoder prefix already opened the modality)."""
    codes = visit.events.get(vocab_modality(vocab, mod), [])
    ids = [vocab.code_id(mod, c) for c in codes]
    ids.append(vocab.modality_close_id(mod))
    return ids


def vocab_modality(vocab: Vocabulary, mod: str) -> str:
    if mod not in vocab.modalities:
        raise SchemaMismatchError(f"unknown modality {mod!r}")
    return mod


def serialize(record: PatientRecord, vocab: Vocabulary) -> TokenSequence:
    ids = [vocab.bos_id]
    for visit in record.visits:
        ids.extend(visit_block_ids(visit, vocab))
    ids.append(vocab.eos_id)
    return TokenSequence(ids=ids, vocab=vocab)


def serialize_visits(visits: Sequence[Visit], vocab: Vocabulary) -> TokenSequence:
    ids = [vocab.bos_id]
    for visit in visits:
        ids.extend(visit_block_ids(visit, vocab))
    ids.append(vocab.eos_id)
    return TokenSequence(ids=ids, vocab=vocab)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOP, _IN_VISIT, _IN_MOD, _DONE = "top", "in_visit", "in_mod", "done"


def parse(tokens: TokenSequence) -> PatientRecord:
    """Strict inverse of serialize; baseline features are not representable
    in tokens, so the result carries empty baseline vectors.

    <mask> tokens inside a modality span are skipped (corrupted sequences
    stay parseable); every structural fault raises with the position of
    the first offending token.
    """
    vocab = tokens.vocab
    visits: list[Visit] = []
    state = None
    cur_events: dict[str, list[str]] = {}
    cur_mod: Optional[str] = None
    seen_mods: set[str] = set()

    for pos, tid in enumerate(tokens.ids):
        kind = vocab.kind(tid)
        if state is None:
            if kind != K_BOS:
                raise GrammarViolationError(pos, "sequence must start with <s>")
            state = _TOP
            continue
        if state == _DONE:
            raise GrammarViolationError(pos, "tokens after </s>")
        if state == _TOP:
            if kind == K_VOPEN:
                state = _IN_VISIT
                cur_events = {}
                seen_mods = set()
            elif kind == K_EOS:
                state = _DONE
            else:
                raise GrammarViolationError(pos, f"expected <v> or </s>, got {vocab.tokens[tid]!r}")
        elif state == _IN_VISIT:
            if kind == K_MOPEN:
                cur_mod = vocab.modality_of(tid)
                if cur_mod in seen_mods:
                    raise GrammarViolationError(pos, f"modality {cur_mod!r} opened twice in one visit")
                seen_mods.add(cur_mod)
                cur_events[cur_mod] = []
                state = _IN_MOD
            elif kind == K_VCLOSE:
                # normalize like the corpus loader: every modality keyed
                visits.append(Visit({m: cur_events.get(m, []) for m in vocab.modalities}))
                state = _TOP
            else:
                raise GrammarViolationError(
                    pos, f"expected modality opener or </v>, got {vocab.tokens[tid]!r}"
                )
        elif state == _IN_MOD:
            if kind == K_CODE and vocab.modality_of(tid) == cur_mod:
                code = vocab.code_string(tid)
                if code in cur_events[cur_mod]:
                    raise GrammarViolationError(pos, f"duplicate code {code!r} in modality span")
                cur_events[cur_mod].append(code)
            elif kind == K_MASK:
                pass  # masked-out content, not an event
            elif kind == K_MCLOSE and vocab.modality_of(tid) == cur_mod:
                cur_mod = None
                state = _IN_VISIT
            else:
                raise GrammarViolationError(
                    pos,
                    f"expected {cur_mod!r} code or closer, got {vocab.tokens[tid]!r}",
                )
    if state != _DONE:
        raise GrammarViolationError(len(tokens.ids), "sequence ended before </s>")
    return PatientRecord(
        id="", baseline=BaselineFeatures(categorical=[], numerical=[]), visits=visits
    )


# ---------------------------------------------------------------------------
# prompt layouts
# ---------------------------------------------------------------------------


def build_longitudinal_prompt(history: Sequence[Visit], vocab: Vocabulary) -> PromptLayout:
    """Prefix prompt: encoder holds the serialized history, the decoder
    continues with the next visit. Empty history generates from scratch."""
    encoder = serialize_visits(history, vocab)
    prefix = TokenSequence(ids=[vocab.bos_id, vocab.visit_open_id], vocab=vocab)
    return PromptLayout(
        encoder_tokens=encoder,
        target_spec=TargetSpec(kind="next_visit", visit_index=len(history)),
        decoder_prefix=prefix,
    )


def build_crossmodal_prompt(
    history: Sequence[Visit], current: Visit, mod: str, vocab: Vocabulary
) -> PromptLayout:
    """Cloze prompt: the current visit appears with modality ``mod``
    reduced to a masked slot; the decoder fills that modality.

    The slot sits at the modality's schema-order position and is emitted
    even when the current visit has no events of any other modality.
    """
    vocab_modality(vocab, mod)
    ids = [vocab.bos_id]
    for visit in history:
        ids.extend(visit_block_ids(visit, vocab))
    ids.append(vocab.visit_open_id)
    for m in vocab.modalities:
        if m == mod:
            ids.append(vocab.modality_open_id(m))
            ids.append(vocab.mask_id)
            ids.append(vocab.modality_close_id(m))
            continue
        codes = current.events.get(m, [])
        if not codes:
            continue
        ids.append(vocab.modality_open_id(m))
        ids.extend(vocab.code_id(m, c) for c in codes)
        ids.append(vocab.modality_close_id(m))
    ids.append(vocab.visit_close_id)
    ids.append(vocab.eos_id)
    encoder = TokenSequence(ids=ids, vocab=vocab)
    prefix = TokenSequence(ids=[vocab.bos_id, vocab.modality_open_id(mod)], vocab=vocab)
    return PromptLayout(
        encoder_tokens=encoder,
        target_spec=TargetSpec(kind="modality", visit_index=len(history), modality=mod),
        decoder_prefix=prefix,
    )
