"""Data model for multimodal longitudinal patient records.

Covers corpus ingestion and validation, deterministic splitting, summary
statistics, and a synthetic oracle corpus generator whose exact conditional
probabilities are retrievable for testing.

A record is one patient: baseline features (a binary categorical vector and
a real-valued numeric vector) plus a temporally ordered list of visits.
Each visit holds, per modality, a duplicate-free list of code strings.

Corpus files are UTF-8 JSON lines, one record per line:

    {"id": "p0", "baseline": {"categorical": [0,1], "numerical": [0.3]},
     "visits": [{"dx": ["D1","D2"], "lab": ["L5"]}]}

Schema files are a single JSON object with ``modalities``, a per-modality
``vocabularies`` map, ``m_c``, ``m_u``, and optional ``categorical_fields``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    MalformedLineError,
    SchemaMismatchError,
    UnknownCodeError,
)
from .seeding import numpy_rng


class EventCode(NamedTuple):
    """A single clinical event: a code within a named modality."""

    modality: str
    code: str


@dataclass
class CategoricalField:
    """A named block of the multi-hot categorical baseline vector."""

    name: str
    cardinality: int


@dataclass
class CorpusSchema:
    """Shared shape of a corpus: modalities, vocabularies, feature dims.

    Modality order is significant (it defines the modality index used by
    the grammar and the model). Vocabulary order is significant too: token
    ids are assigned in vocabulary order.
    """

    modalities: list[str]
    vocabularies: dict[str, list[str]]
    m_c: int
    m_u: int
    categorical_fields: list[CategoricalField] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.modalities:
            raise ConfigError("schema must declare at least one modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("modality names must be unique")
        for mod in self.modalities:
            vocab = self.vocabularies.get(mod)
            if not vocab:
                raise ConfigError(f"modality {mod!r} has no vocabulary")
            if len(set(vocab)) != len(vocab):
                raise ConfigError(f"modality {mod!r} vocabulary has duplicates")
        extra = set(self.vocabularies) - set(self.modalities)
        if extra:
            raise ConfigError(f"vocabularies for undeclared modalities: {sorted(extra)}")
        if self.m_c < 0 or self.m_u < 0:
            raise ConfigError("feature dimensions must be nonnegative")
        if self.categorical_fields:
            total = sum(f.cardinality for f in self.categorical_fields)
            if total != self.m_c:
                raise ConfigError(
                    f"categorical field cardinalities sum to {total}, expected m_c={self.m_c}"
                )

    def modality_index(self, name: str) -> int:
        try:
            return self.modalities.index(name)
        except ValueError:
            raise SchemaMismatchError(f"unknown modality {name!r}") from None

    def vocab_size(self, name: str) -> int:
        return len(self.vocabularies[self.require_modality(name)])

    def require_modality(self, name: str) -> str:
        if name not in self.vocabularies:
            raise SchemaMismatchError(f"unknown modality {name!r}")
        return name

    def to_dict(self) -> dict:
        out = {
            "modalities": list(self.modalities),
            "vocabularies": {m: list(v) for m, v in self.vocabularies.items()},
            "m_c": self.m_c,
            "m_u": self.m_u,
        }
        if self.categorical_fields:
            out["categorical_fields"] = [
                {"name": f.name, "cardinality": f.cardinality} for f in self.categorical_fields
            ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSchema":
        try:
            fields = [
                CategoricalField(f["name"], int(f["cardinality"]))
                for f in data.get("categorical_fields", [])
            ]
            return cls(
                modalities=list(data["modalities"]),
                vocabularies={m: list(v) for m, v in data["vocabularies"].items()},
                m_c=int(data["m_c"]),
                m_u=int(data["m_u"]),
                categorical_fields=fields,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid schema object: {exc}") from exc

    def digest(self) -> str:
        """Stable content hash used to detect checkpoint/corpus mismatches."""
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def load_schema(path: str) -> CorpusSchema:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from exc
    return CorpusSchema.from_dict(data)


def save_schema(schema: CorpusSchema, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


@dataclass
class BaselineFeatures:
    """Static per-patient conditioning features."""

    categorical: list[int]
    numerical: list[float]

    def validate(self, schema: CorpusSchema) -> None:
        if len(self.categorical) != schema.m_c:
            raise SchemaMismatchError(
                f"categorical length {len(self.categorical)} != m_c {schema.m_c}"
            )
        if len(self.numerical) != schema.m_u:
            raise SchemaMismatchError(
                f"numerical length {len(self.numerical)} != m_u {schema.m_u}"
            )
        if any(v not in (0, 1) for v in self.categorical):
            raise DataError("categorical baseline entries must be 0 or 1")
        if any(not math.isfinite(v) for v in self.numerical):
            raise DataError("numerical baseline entries must be finite")


@dataclass
class Visit:
    """One visit: per-modality lists of event codes.

    ``events`` always carries a key for every schema modality (possibly an
    empty list); normalization happens in ``normalized``. Within a modality
    codes are ordered but duplicate-free.
    """

    events: dict[str, list[str]]

    def normalized(self, schema: CorpusSchema) -> "Visit":
        out: dict[str, list[str]] = {}
        for mod in schema.modalities:
            out[mod] = list(self.events.get(mod, []))
        extra = set(self.events) - set(schema.modalities)
        if extra:
            raise SchemaMismatchError(f"visit references undeclared modalities: {sorted(extra)}")
        return Visit(out)

    def validate(self, schema: CorpusSchema) -> None:
        for mod, codes in self.events.items():
            vocab = set(schema.vocabularies[schema.require_modality(mod)])
            seen: set[str] = set()
            for code in codes:
                if code not in vocab:
                    raise UnknownCodeError(mod, code)
                if code in seen:
                    raise DataError(f"duplicate code {code!r} in modality {mod!r} within one visit")
                seen.add(code)

    def event_codes(self) -> Iterator[EventCode]:
        for mod, codes in self.events.items():
            for code in codes:
                yield EventCode(mod, code)

    def n_events(self) -> int:
        return sum(len(codes) for codes in self.events.values())

    def present_modalities(self) -> list[str]:
        return [mod for mod, codes in self.events.items() if codes]


@dataclass
class PatientRecord:
    id: str
    baseline: BaselineFeatures
    visits: list[Visit]

    def validate(self, schema: CorpusSchema) -> None:
        if not self.visits:
            raise DataError(f"record {self.id!r} has no visits")
        self.baseline.validate(schema)
        for visit in self.visits:
            visit.validate(schema)

    def normalized(self, schema: CorpusSchema) -> "PatientRecord":
        return PatientRecord(
            id=self.id,
            baseline=self.baseline,
            visits=[v.normalized(schema) for v in self.visits],
        )


@dataclass
class Corpus:
    """An immutable-by-convention collection of validated records."""

    schema: CorpusSchema
    records: list[PatientRecord]

    def __post_init__(self) -> None:
        seen_ids: set[str] = set()
        normalized = []
        for rec in self.records:
            if rec.id in seen_ids:
                raise DataError(f"duplicate record id {rec.id!r}")
            seen_ids.add(rec.id)
            rec = rec.normalized(self.schema)
            rec.validate(self.schema)
            normalized.append(rec)
        self.records = normalized

    def __len__(self) -> int:
        return len(self.records)

    def numeric_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension mean and std of numerical baseline features.

        Std is floored at 1e-6 so constant features normalize to zero
        instead of dividing by zero.
        """
        if self.schema.m_u == 0:
            return np.zeros(0), np.ones(0)
        mat = np.array([rec.baseline.numerical for rec in self.records], dtype=np.float64)
        mean = mat.mean(axis=0)
        std = np.maximum(mat.std(axis=0), 1e-6)
        return mean, std

    def subset(self, records: Sequence[PatientRecord]) -> "Corpus":
        return Corpus(schema=self.schema, records=list(records))


def _record_from_obj(obj: dict, line_no: int, path: str) -> PatientRecord:
    try:
        baseline = BaselineFeatures(
            categorical=[int(v) for v in obj["baseline"]["categorical"]],
            numerical=[float(v) for v in obj["baseline"]["numerical"]],
        )
        visits = [Visit({m: list(codes) for m, codes in v.items()}) for v in obj["visits"]]
        return PatientRecord(id=str(obj["id"]), baseline=baseline, visits=visits)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedLineError(path, line_no, f"bad record structure: {exc}") from exc


def _record_to_obj(rec: PatientRecord) -> dict:
    visits = []
    for visit in rec.visits:
        visits.append({m: codes for m, codes in visit.events.items() if codes})
    return {
        "id": rec.id,
        "baseline": {
            "categorical": rec.baseline.categorical,
            "numerical": rec.baseline.numerical,
        },
        "visits": visits,
    }


def infer_schema(records: list[PatientRecord]) -> CorpusSchema:
    """Schema inferred from raw records: observed modalities and codes.

    Modalities and vocabularies are sorted for determinism. Only used when
    load_corpus is called without an explicit schema.
    """
    if not records:
        raise DataError("cannot infer a schema from an empty corpus")
    modalities: set[str] = set()
    vocab: dict[str, set[str]] = {}
    for rec in records:
        for visit in rec.visits:
            for mod, codes in visit.events.items():
                modalities.add(mod)
                vocab.setdefault(mod, set()).update(codes)
    m_c = len(records[0].baseline.categorical)
    m_u = len(records[0].baseline.numerical)
    return CorpusSchema(
        modalities=sorted(modalities),
        vocabularies={m: sorted(v) for m, v in vocab.items()},
        m_c=m_c,
        m_u=m_u,
    )


def load_corpus(path: str, schema: Optional[CorpusSchema] = None) -> Corpus:
    """Load and validate a JSONL corpus file.

    Malformed lines are rejected with their line number; records are never
    silently repaired.
    """
    records: list[PatientRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise MalformedLineError(path, line_no, "record is not an object")
            records.append(_record_from_obj(obj, line_no, path))
    if schema is None:
        schema = infer_schema(records)
    return Corpus(schema=schema, records=records)


def write_corpus(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            fh.write(json.dumps(_record_to_obj(rec), sort_keys=True))
            fh.write("\n")


def split_corpus(
    corpus: Corpus, fractions: tuple[float, float, float], seed: int
) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministic disjoint exhaustive train/val/test split.

    Sizes are floor(N * fraction) per split; any leftover records go to
    train. Fractions must be positive and sum to 1 within 2e-3.
    """
    if len(fractions) != 3:
        raise ConfigError("fractions must be a (train, val, test) triple")
    if any(f <= 0 for f in fractions):
        raise ConfigError("fractions must be positive")
    total = sum(fractions)
    if abs(total - 1.0) > 2e-3:
        raise ConfigError(f"fractions sum to {total}, expected 1")
    if not corpus.records:
        raise DataError("cannot split an empty corpus")

    n = len(corpus.records)
    sizes = [math.floor(n * f + 1e-9) for f in fractions]
    sizes[0] += n - sum(sizes)
    if any(s < 1 for s in sizes):
        raise ConfigError(f"degenerate fractions: split sizes {tuple(sizes)} for {n} records")

    perm = numpy_rng(seed, "split").permutation(n)
    bounds = (sizes[0], sizes[0] + sizes[1])
    picks = (perm[: bounds[0]], perm[bounds[0] : bounds[1]], perm[bounds[1] :])
    parts = tuple(
        corpus.subset([corpus.records[i] for i in sorted(int(j) for j in idx)]) for idx in picks
    )
    return parts  # type: ignore[return-value]


def corpus_stats(corpus: Corpus) -> dict:
    """Exact corpus totals plus per-modality distinct code usage."""
    n_visits = 0
    n_events = 0
    usage: dict[str, set[str]] = {m: set() for m in corpus.schema.modalities}
    for rec in corpus.records:
        n_visits += len(rec.visits)
        for visit in rec.visits:
            for mod, codes in visit.events.items():
                n_events += len(codes)
                usage[mod].update(codes)
    n_patients = len(corpus.records)
    return {
        "patients": n_patients,
        "visits": n_visits,
        "events": n_events,
        "events_per_patient": round(n_events / n_patients) if n_patients else 0,
        "vocab_usage": {m: len(codes) for m, codes in usage.items()},
    }


# ---------------------------------------------------------------------------
# Oracle corpus: a synthetic process with analytically known conditionals.
# ---------------------------------------------------------------------------


@dataclass
class CouplingRule:
    """Within-visit cross-modality implication: trigger ⇒ target w.p. prob."""

    trigger_modality: str
    trigger_code: str
    target_modality: str
    target_code: str
    prob: float


@dataclass
class BaselineEffect:
    """When categorical baseline feature ``feature_index`` is 1, the anchor
    modality's first-visit distribution is replaced by ``init_dist``."""

    feature_index: int
    init_dist: list[float]


@dataclass
class OracleSpec:
    """Parameters of the synthetic record process.

    The first modality is the anchor: exactly one anchor event per visit,
    drawn from ``init_dist`` at the first visit and from the ``transition``
    row of the previous visit's anchor event afterwards. Other modalities
    are filled by coupling rules and per-modality Poisson background noise.
    """

    modalities: list[str]
    vocab_sizes: dict[str, int]
    init_dist: list[float]
    transition: list[list[float]]
    visit_count_dist: list[float]
    couplings: list[CouplingRule] = field(default_factory=list)
    baseline_effects: list[BaselineEffect] = field(default_factory=list)
    noise_rates: dict[str, float] = field(default_factory=dict)
    m_c: int = 1
    m_u: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.modalities:
            raise ConfigError("oracle spec needs at least one modality")
        anchor_v = self.vocab_sizes[self.modalities[0]]
        _check_dist(self.init_dist, anchor_v, "init_dist")
        if len(self.transition) != anchor_v:
            raise ConfigError("transition kernel must have one row per anchor code")
        for i, row in enumerate(self.transition):
            _check_dist(row, anchor_v, f"transition[{i}]")
        _check_dist(self.visit_count_dist, len(self.visit_count_dist), "visit_count_dist")
        for eff in self.baseline_effects:
            if not 0 <= eff.feature_index < self.m_c:
                raise ConfigError("baseline effect feature index out of range")
            _check_dist(eff.init_dist, anchor_v, "baseline effect init_dist")
        for rule in self.couplings:
            if not 0.0 <= rule.prob <= 1.0:
                raise ConfigError("coupling prob must lie in [0, 1]")

    @property
    def anchor(self) -> str:
        return self.modalities[0]

    def code(self, modality: str, index: int) -> str:
        return f"{modality}_{index}"

    def schema(self) -> CorpusSchema:
        return CorpusSchema(
            modalities=list(self.modalities),
            vocabularies={
                m: [self.code(m, i) for i in range(self.vocab_sizes[m])] for m in self.modalities
            },
            m_c=self.m_c,
            m_u=self.m_u,
        )


def _check_dist(dist: Sequence[float], size: int, name: str) -> None:
    if len(dist) != size:
        raise ConfigError(f"{name} has length {len(dist)}, expected {size}")
    if any(p < 0 for p in dist):
        raise ConfigError(f"{name} has negative entries")
    if abs(sum(dist) - 1.0) > 1e-9:
        raise ConfigError(f"{name} rows must sum to 1 ± 1e-9, got {sum(dist)}")


def oracle_init_dist(spec: OracleSpec, categorical: Sequence[int]) -> np.ndarray:
    """First-visit anchor distribution given the categorical baseline.

    The first active baseline effect (list order) wins; no active effect
    means the unconditional init distribution.
    """
    for eff in spec.baseline_effects:
        if categorical[eff.feature_index] == 1:
            return np.asarray(eff.init_dist, dtype=np.float64)
    return np.asarray(spec.init_dist, dtype=np.float64)


def oracle_prob(
    spec: OracleSpec, categorical: Sequence[int], prev_anchor: Optional[str]
) -> dict[str, float]:
    """Exact next-visit anchor-event conditional of the oracle process.

    prev_anchor None queries the first visit. Returns {code: probability}.
    """
    if prev_anchor is None:
        dist = oracle_init_dist(spec, categorical)
    else:
        prefix = f"{spec.anchor}_"
        if not prev_anchor.startswith(prefix):
            raise DataError(f"{prev_anchor!r} is not an anchor-modality code")
        idx = int(prev_anchor[len(prefix) :])
        dist = np.asarray(spec.transition[idx], dtype=np.float64)
    return {spec.code(spec.anchor, i): float(p) for i, p in enumerate(dist)}


def generate_oracle_corpus(spec: OracleSpec, n_patients: int) -> Corpus:
    """Draw i.i.d. patient records from the oracle process."""
    if n_patients < 1:
        raise ConfigError("n_patients must be >= 1")
    schema = spec.schema()
    rng = numpy_rng(spec.seed, "oracle-corpus")
    anchor = spec.anchor
    anchor_v = spec.vocab_sizes[anchor]
    visit_counts = np.arange(1, len(spec.visit_count_dist) + 1)

    records = []
    for n in range(n_patients):
        categorical = [int(b) for b in rng.integers(0, 2, size=spec.m_c)]
        numerical = [float(x) for x in rng.random(spec.m_u)]
        t_n = int(rng.choice(visit_counts, p=spec.visit_count_dist))

        visits = []
        prev = None
        for _ in range(t_n):
            if prev is None:
                dist = oracle_init_dist(spec, categorical)
            else:
                dist = np.asarray(spec.transition[prev], dtype=np.float64)
            anchor_idx = int(rng.choice(anchor_v, p=dist))
            prev = anchor_idx

            events: dict[str, list[str]] = {m: [] for m in spec.modalities}
            events[anchor].append(spec.code(anchor, anchor_idx))
            for rule in spec.couplings:
                if rule.trigger_code in events[rule.trigger_modality]:
                    if rng.random() < rule.prob:
                        if rule.target_code not in events[rule.target_modality]:
                            events[rule.target_modality].append(rule.target_code)
            for mod in spec.modalities:
                lam = spec.noise_rates.get(mod, 0.0)
                if lam > 0:
                    extra = rng.poisson(lam)
                    for idx in rng.integers(0, spec.vocab_sizes[mod], size=extra):
                        code = spec.code(mod, int(idx))
                        if code not in events[mod]:
                            events[mod].append(code)
            visits.append(Visit(events))

        records.append(
            PatientRecord(
                id=f"oracle-{n:06d}",
                baseline=BaselineFeatures(categorical=categorical, numerical=numerical),
                visits=visits,
            )
        )
    return Corpus(schema=schema, records=records)
