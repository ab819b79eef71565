"""Attack-pipeline tests.

Oracles: an O(n^2) pairwise count for the AUC rank statistic, exact
sentinel thresholds and a self-attack null for the attribute sweep, and
an overfit-separation check for the shadow model.
"""

import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrsynth.corruption import CorruptionConfig
from ehrsynth.errors import ConfigError, DataError, SchemaMismatchError
from ehrsynth.grammar import Vocabulary
from ehrsynth.metrics import lpl, mpl
from ehrsynth.model import ModelConfig, TrainConfig
from ehrsynth.privacy import (
    MiDataset,
    attribute_sweep,
    auc_rank,
    auc_trapezoid,
    build_mi_dataset,
    feature_names,
    membership_features,
    roc_points,
    run_attribute_attack,
    run_membership_attack,
    subsample_corpus,
    train_shadow,
)
from ehrsynth.records import (
    BaselineFeatures,
    Corpus,
    CorpusSchema,
    CouplingRule,
    OracleSpec,
    PatientRecord,
    Visit,
    generate_oracle_corpus,
)
from ehrsynth.seeding import numpy_rng

SCHEMA = CorpusSchema(
    modalities=["dx", "lab"],
    vocabularies={"dx": ["D0", "D1", "D2", "D3"], "lab": ["L0", "L1", "L2"]},
    m_c=2,
    m_u=1,
)
VOCAB = Vocabulary.from_schema(SCHEMA)
BASE = BaselineFeatures(categorical=[0, 1], numerical=[0.3])

IDENTITY_CORRUPTION = CorruptionConfig(
    p_mask=0.0, p_delete=0.0, p_infill=0.0,
    enable_span_shuffle=False, enable_modality_permute=False,
)

TINY_MODEL = ModelConfig(
    d_model=8, n_encoder_layers=1, n_decoder_layers=1, n_heads=2,
    d_ff=16, featurizer_hidden=4, max_len=96,
)


def record_of(visit_events, rid="r"):
    return PatientRecord(id=rid, baseline=BASE, visits=[Visit(e) for e in visit_events])


def corpus_of(records):
    return Corpus(schema=SCHEMA, records=list(records))


class ScoreStub:
    """Model stand-in: fixed log-probability per token id, a constant
    elsewhere. Serves as shadow or imputer; records every query."""

    def __init__(self, code_lp=None, default=-2.0, schema=SCHEMA):
        self.vocab = VOCAB
        self.schema = schema
        self.code_lp = dict(code_lp or {})
        self.default = default
        self.queries = []

    def _dist(self):
        v = np.full(len(VOCAB.tokens), self.default, dtype=np.float64)
        for tid, lp in self.code_lp.items():
            v[tid] = lp
        return v

    def next_logprobs(self, enc_ids, dec_ids, baseline):
        self.queries.append((list(enc_ids), list(dec_ids)))
        return self._dist()

    def token_logprobs(self, layout, baseline, target):
        self.queries.append((list(layout.encoder_tokens.ids), list(layout.decoder_prefix.ids)))
        d = self._dist()
        return [float(d[t]) for t in target]


def code_lp_map(lp_by_code):
    """{("dx","D0"): -0.1, ...} -> {token_id: logprob}."""
    return {VOCAB.code_id(m, c): lp for (m, c), lp in lp_by_code.items()}


def auc_pairwise(labels, scores):
    """Brute-force concordant-pair count, ties at half credit."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            total += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# ROC / AUC machinery
# ---------------------------------------------------------------------------


class TestRocAuc:
    def test_perfectly_separable_scores(self):
        labels = [1] * 5 + [0] * 5
        scores = [0.9] * 5 + [0.1] * 5
        assert auc_rank(labels, scores) == 1.0
        points = roc_points(labels, scores)
        assert points == [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        assert auc_trapezoid(points) == 1.0

    def test_reversed_scores_give_zero(self):
        labels = [1, 1, 0, 0]
        scores = [0.1, 0.2, 0.8, 0.9]
        assert auc_rank(labels, scores) == 0.0

    def test_null_scores_near_half(self):
        rng = numpy_rng(7, "auc-null")
        scores = rng.random(1000).tolist()
        labels = ([1] * 500) + ([0] * 500)
        assert abs(auc_rank(labels, scores) - 0.5) <= 0.05

    def test_all_tied_scores(self):
        labels = [1, 0, 1, 0]
        scores = [0.5] * 4
        assert auc_rank(labels, scores) == 0.5
        assert roc_points(labels, scores) == [(0.0, 0.0), (1.0, 1.0)]

    def test_rank_statistic_matches_pairwise_oracle(self):
        for seed in range(20):
            rng = numpy_rng(seed, "auc-oracle")
            n = int(rng.integers(10, 100))
            # quantized scores force ties
            scores = (rng.integers(0, 12, size=n) / 11.0).tolist()
            labels = rng.integers(0, 2, size=n).tolist()
            if len(set(labels)) < 2:
                labels[0], labels[1] = 0, 1
            rank = auc_rank(labels, scores)
            assert abs(rank - auc_pairwise(labels, scores)) <= 1e-12
            assert abs(auc_trapezoid(roc_points(labels, scores)) - rank) <= 1e-9

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(0, 1), st.sampled_from([0.0, 0.25, 0.5, 0.5, 1.0])),
            min_size=2,
            max_size=40,
        ).filter(lambda rows: len({l for l, _ in rows}) == 2)
    )
    def test_roc_is_a_monotone_step_curve(self, rows):
        labels = [l for l, _ in rows]
        scores = [s for _, s in rows]
        points = roc_points(labels, scores)
        assert points[0] == (0.0, 0.0)
        assert points[-1] == (1.0, 1.0)
        for (x0, y0), (x1, y1) in zip(points, points[1:]):
            assert x1 >= x0 and y1 >= y0
        assert 0.0 <= auc_rank(labels, scores) <= 1.0

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            roc_points([1, 1], [0.1, 0.2])
        with pytest.raises(DataError):
            auc_rank([0, 0], [0.1, 0.2])


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


class TestFeatures:
    def test_feature_names_layout(self):
        assert feature_names(VOCAB) == [
            "log_lpl_dx", "log_lpl_lab", "log_mpl_dx", "log_mpl_lab",
            "log_ppl", "n_events",
        ]

    def test_matches_metrics_module_exactly(self):
        shadow = ScoreStub(code_lp_map({("dx", "D1"): -0.4, ("lab", "L2"): -1.3}))
        rec = record_of([
            {"dx": ["D1", "D2"], "lab": ["L0"]},
            {"dx": ["D0"], "lab": ["L2", "L1"]},
        ])
        row = membership_features(shadow, corpus_of([rec]))[0]
        assert row[0] == math.log(lpl(shadow, rec, "dx"))
        assert row[1] == math.log(lpl(shadow, rec, "lab"))
        assert row[2] == math.log(mpl(shadow, rec, "dx"))
        assert row[3] == math.log(mpl(shadow, rec, "lab"))
        assert row[5] == 6.0

    def test_log_ppl_matches_incremental_oracle(self):
        from ehrsynth.grammar import build_longitudinal_prompt, visit_body_ids
        from ehrsynth.model import build_model

        model = build_model(TINY_MODEL, VOCAB, SCHEMA, seed=3)
        rec = record_of([
            {"dx": ["D0"], "lab": ["L1"]},
            {"dx": ["D2", "D3"]},
        ])
        row = membership_features(model, corpus_of([rec]))[0]
        total, count = 0.0, 0
        for t, visit in enumerate(rec.visits):
            layout = build_longitudinal_prompt(rec.visits[:t], VOCAB)
            target = visit_body_ids(visit, VOCAB)
            target.append(VOCAB.visit_open_id if t < 1 else VOCAB.eos_id)
            dec = list(layout.decoder_prefix.ids)
            for tid in target:
                total -= float(model.next_logprobs(layout.encoder_tokens.ids, dec, BASE)[tid])
                dec.append(tid)
                count += 1
        assert abs(row[4] - total / count) <= 1e-9

    def test_absent_modality_gets_neutral_value(self):
        shadow = ScoreStub()
        rec = record_of([{"dx": ["D0"]}])
        row = membership_features(shadow, corpus_of([rec]))[0]
        assert row[1] == math.log(3)  # lab lpl slot
        assert row[3] == math.log(3)  # lab mpl slot


class TestMiDataset:
    def in_out(self, n=4):
        ins = corpus_of([record_of([{"dx": ["D0"]}], rid=f"in-{i}") for i in range(n)])
        outs = corpus_of([record_of([{"dx": ["D3"]}], rid=f"out-{i}") for i in range(n)])
        return ins, outs

    def test_balanced_table(self):
        ins, outs = self.in_out(4)
        table = build_mi_dataset(ScoreStub(), ins, outs)
        assert table.features.shape == (8, 6)
        assert table.labels.tolist() == [1, 1, 1, 1, 0, 0, 0, 0]
        assert table.record_ids[:4] == [f"in-{i}" for i in range(4)]

    def test_size_mismatch_rejected(self):
        ins, outs = self.in_out(4)
        with pytest.raises(DataError):
            build_mi_dataset(ScoreStub(), ins, corpus_of(outs.records[:3]))

    def test_identical_corpora_give_symmetric_features(self):
        ins = corpus_of([record_of([{"dx": ["D0"], "lab": ["L1"]}], rid=f"r{i}") for i in range(3)])
        table = build_mi_dataset(ScoreStub(), ins, ins)
        assert np.array_equal(table.features[:3], table.features[3:])

    def test_schema_mismatch_rejected(self):
        other_schema = CorpusSchema(
            modalities=["dx"], vocabularies={"dx": ["D0"]}, m_c=2, m_u=1,
        )
        ins, _ = self.in_out(2)
        bad = Corpus(schema=other_schema, records=[])
        with pytest.raises((SchemaMismatchError, DataError)):
            build_mi_dataset(ScoreStub(), ins, bad)


class TestSubsample:
    def corpus(self, n=10):
        return corpus_of([record_of([{"dx": ["D0"]}], rid=f"r{i}") for i in range(n)])

    def test_size_and_uniqueness(self):
        sub = subsample_corpus(self.corpus(), 4, seed=1)
        ids = [r.id for r in sub.records]
        assert len(ids) == 4 and len(set(ids)) == 4

    def test_deterministic_in_seed(self):
        a = subsample_corpus(self.corpus(), 5, seed=9)
        b = subsample_corpus(self.corpus(), 5, seed=9)
        assert [r.id for r in a.records] == [r.id for r in b.records]

    def test_oversized_request_rejected(self):
        with pytest.raises(DataError):
            subsample_corpus(self.corpus(3), 4, seed=0)


# ---------------------------------------------------------------------------
# membership attack (classifier level, stub shadow)
# ---------------------------------------------------------------------------


EASY = code_lp_map({("dx", c): -0.1 for c in ["D0", "D1"]} | {("lab", "L0"): -0.1})
HARD_DEFAULT = -5.0


def separable_shadow():
    # easy codes score -0.1, everything else -5: members built from easy
    # codes look memorized, nonmembers look novel
    return ScoreStub(EASY, default=HARD_DEFAULT)


def members_corpus(n=6):
    return corpus_of(
        [record_of([{"dx": ["D0", "D1"], "lab": ["L0"]}], rid=f"m{i}") for i in range(n)]
    )


def nonmembers_corpus(n=6):
    return corpus_of(
        [record_of([{"dx": ["D2", "D3"], "lab": ["L2"]}], rid=f"n{i}") for i in range(n)]
    )


class TestMembershipAttack:
    def test_separable_features_give_auc_one(self):
        shadow = separable_shadow()
        table = build_mi_dataset(shadow, members_corpus(), nonmembers_corpus())
        result = run_membership_attack(table, members_corpus(), nonmembers_corpus(), seed=0)
        assert result.auc == 1.0
        assert result.labels == [1] * 6 + [0] * 6
        assert result.roc[0] == (0.0, 0.0) and result.roc[-1] == (1.0, 1.0)

    def test_indistinguishable_features_give_exactly_half(self):
        # constant shadow: every record featurizes identically, so every
        # score ties and the rank statistic sits at its tie credit
        shadow = ScoreStub()
        ins = members_corpus(4)
        table = build_mi_dataset(shadow, ins, corpus_of(
            [record_of([{"dx": ["D0", "D1"], "lab": ["L0"]}], rid=f"o{i}") for i in range(4)]
        ))
        result = run_membership_attack(table, ins, corpus_of(
            [record_of([{"dx": ["D0", "D1"], "lab": ["L0"]}], rid=f"e{i}") for i in range(4)]
        ), seed=0)
        assert result.auc == 0.5
        assert len(set(result.scores)) == 1

    def test_degenerate_labels_rejected(self):
        shadow = ScoreStub()
        table = build_mi_dataset(shadow, members_corpus(3), nonmembers_corpus(3))
        table = MiDataset(
            features=table.features,
            labels=np.ones_like(table.labels),
            feature_names=table.feature_names,
            record_ids=table.record_ids,
            shadow=shadow,
        )
        with pytest.raises(DataError):
            run_membership_attack(table, members_corpus(3), nonmembers_corpus(3))

    def test_deterministic_in_seed(self):
        shadow = separable_shadow()
        table = build_mi_dataset(shadow, members_corpus(3), nonmembers_corpus(3))
        r1 = run_membership_attack(table, members_corpus(3), nonmembers_corpus(3), seed=5)
        r2 = run_membership_attack(table, members_corpus(3), nonmembers_corpus(3), seed=5)
        assert r1.scores == r2.scores and r1.auc == r2.auc

    def test_result_serializes(self):
        import json

        shadow = separable_shadow()
        table = build_mi_dataset(shadow, members_corpus(3), nonmembers_corpus(3))
        result = run_membership_attack(table, members_corpus(3), nonmembers_corpus(3))
        json.dumps(result.to_dict())

    def test_bad_classifier_config_rejected(self):
        shadow = ScoreStub()
        table = build_mi_dataset(shadow, members_corpus(3), nonmembers_corpus(3))
        with pytest.raises(ConfigError):
            run_membership_attack(table, members_corpus(3), nonmembers_corpus(3), epochs=0)


# ---------------------------------------------------------------------------
# shadow training on a real model
# ---------------------------------------------------------------------------


def _record_with_baseline(visits, rid, i):
    # distinct baselines make even the first visit identifiable, so a
    # memorizing shadow can separate records from the start
    base = BaselineFeatures(categorical=[i % 2, (i // 2) % 2], numerical=[i / 4.0])
    return PatientRecord(id=rid, baseline=base, visits=[Visit(e) for e in visits])


def memorizable_members():
    # some visits lack a modality, so visit bodies opening with a lab
    # block are part of the training distribution
    visits = [
        [{"dx": ["D0", "D1"], "lab": ["L0"]}, {"lab": ["L1"]}],
        [{"dx": ["D0"]}, {"dx": ["D1", "D3"], "lab": ["L0"]}],
        [{"lab": ["L1"]}, {"dx": ["D0", "D2"], "lab": ["L2"]}],
        [{"dx": ["D2", "D3"], "lab": ["L0"]}, {"dx": ["D1"]}],
        [{"dx": ["D1", "D2"], "lab": ["L2"]}, {"dx": ["D3"], "lab": ["L0"]}],
    ]
    return corpus_of([_record_with_baseline(v, f"mem{i}", i) for i, v in enumerate(visits)])


def disjoint_records():
    visits = [
        [{"dx": ["D3", "D0"], "lab": ["L1"]}, {"dx": ["D1", "D2"], "lab": ["L2"]}],
        [{"dx": ["D2"], "lab": ["L0"]}, {"lab": ["L1"]}],
        [{"lab": ["L2"]}, {"dx": ["D2", "D0"], "lab": ["L0"]}],
        [{"dx": ["D0", "D2"], "lab": ["L1"]}, {"dx": ["D3", "D1"]}],
        [{"dx": ["D3", "D2", "D1"], "lab": ["L2"]}, {"dx": ["D0"], "lab": ["L1"]}],
    ]
    return corpus_of([_record_with_baseline(v, f"dis{i}", i) for i, v in enumerate(visits)])


SHADOW_TRAIN = TrainConfig(
    learning_rate=4e-3,
    weight_decay=0.0,
    batch_size=5,
    epochs=60,
    warmup_epochs=2,
    corruption=IDENTITY_CORRUPTION,
    seed=11,
    steps_per_epoch=8,
)


@functools.lru_cache(maxsize=1)
def overfit_shadow():
    return train_shadow(memorizable_members(), SHADOW_TRAIN, TINY_MODEL)


ORACLE = OracleSpec(
    modalities=["dx", "lab"],
    vocab_sizes={"dx": 4, "lab": 3},
    init_dist=[0.55, 0.25, 0.15, 0.05],
    transition=[
        [0.85, 0.05, 0.05, 0.05],
        [0.05, 0.85, 0.05, 0.05],
        [0.05, 0.05, 0.85, 0.05],
        [0.05, 0.05, 0.05, 0.85],
    ],
    visit_count_dist=[0.2, 0.5, 0.3],
    couplings=[
        CouplingRule("dx", "dx_0", "lab", "lab_0", 0.9),
        CouplingRule("dx", "dx_1", "lab", "lab_1", 0.9),
        CouplingRule("dx", "dx_2", "lab", "lab_2", 0.9),
    ],
    noise_rates={"lab": 0.4},
    m_c=2,
    m_u=1,
    seed=5,
)


@functools.lru_cache(maxsize=1)
def oracle_shadow():
    corpus = generate_oracle_corpus(ORACLE, 60)
    shadow = train_shadow(
        corpus,
        TrainConfig(learning_rate=2e-3, batch_size=8, epochs=15, warmup_epochs=1,
                    corruption=IDENTITY_CORRUPTION, seed=3, steps_per_epoch=12),
        TINY_MODEL,
    )
    return shadow, corpus


class TestTrainShadow:
    def test_overfit_separates_members_from_disjoint_records(self):
        shadow = overfit_shadow()
        member_ppl = membership_features(shadow, memorizable_members())[:, 4]
        other_ppl = membership_features(shadow, disjoint_records())[:, 4]
        assert member_ppl.mean() < other_ppl.mean()

    def test_shadow_on_oracle_corpus_beats_random_guessing(self):
        # longitudinal training covers the anchor's opener position, so
        # the anchor lpl is the calibrated better-than-random check; later
        # modalities open a visit body only when the anchor is absent and
        # stay uncalibrated under the independence-decomposed prefix
        shadow, corpus = oracle_shadow()
        values = [
            lpl(shadow, rec, "dx")
            for rec in corpus.records[:20]
            if any(v.events.get("dx") for v in rec.visits)
        ]
        assert all(math.isfinite(v) for v in values)
        assert float(np.median(values)) < 4.0
        log_ppl = membership_features(shadow, corpus.subset(corpus.records[:20]))[:, 4]
        assert math.exp(float(log_ppl.mean())) < len(shadow.vocab.tokens)

    def test_same_seed_identical_weights(self):
        a = train_shadow(
            memorizable_members(),
            TrainConfig(epochs=2, batch_size=5, corruption=IDENTITY_CORRUPTION,
                        seed=4, steps_per_epoch=2, learning_rate=1e-3),
            TINY_MODEL,
        )
        b = train_shadow(
            memorizable_members(),
            TrainConfig(epochs=2, batch_size=5, corruption=IDENTITY_CORRUPTION,
                        seed=4, steps_per_epoch=2, learning_rate=1e-3),
            TINY_MODEL,
        )
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.detach().numpy().tolist() == pb.detach().numpy().tolist()

    def test_longitudinal_only_regardless_of_requested_mix(self):
        # the shadow trainer pins the task mix, so configs differing only
        # in long_task_fraction produce identical weights
        base = dict(epochs=2, batch_size=5, corruption=IDENTITY_CORRUPTION,
                    seed=4, steps_per_epoch=2, learning_rate=1e-3)
        a = train_shadow(memorizable_members(), TrainConfig(long_task_fraction=0.1, **base), TINY_MODEL)
        b = train_shadow(memorizable_members(), TrainConfig(long_task_fraction=0.9, **base), TINY_MODEL)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.detach().numpy().tolist() == pb.detach().numpy().tolist()

    def test_end_to_end_attack_on_overfit_shadow(self):
        shadow = overfit_shadow()
        table = build_mi_dataset(shadow, memorizable_members(), disjoint_records())
        result = run_membership_attack(
            table, memorizable_members(), disjoint_records(), seed=2
        )
        assert result.auc > 0.5
        assert abs(auc_trapezoid(result.roc) - result.auc) <= 1e-9


# ---------------------------------------------------------------------------
# attribute attack
# ---------------------------------------------------------------------------


def held_out_corpus():
    return corpus_of([
        record_of([{"dx": ["D0", "D1"], "lab": ["L0"]}], rid="h0"),
        record_of([{"dx": ["D2"], "lab": ["L1", "L2"]}, {"dx": ["D3"]}], rid="h1"),
    ])


class TestAttributeSweep:
    def test_sentinel_thresholds(self):
        imputer = ScoreStub(default=-0.5)
        prior = ScoreStub(default=-1.0)
        grid = [-math.inf, 0.0, math.inf]
        sweep, n_pos, n_neg = attribute_sweep(
            imputer, prior, held_out_corpus(), grid, hide_fraction=1.0, seed=0
        )
        assert sweep[0] == (1.0, 1.0)
        assert sweep[1] == (1.0, 1.0)  # every odds is exactly 0.5
        assert sweep[2] == (0.0, 0.0)
        assert n_pos == 7 and n_neg > 0

    def test_tie_at_threshold_counts_as_present(self):
        imputer = ScoreStub(default=-0.25)
        prior = ScoreStub(default=-0.75)
        # all log-odds are exactly 0.5
        at = attribute_sweep(imputer, prior, held_out_corpus(), [0.5], 1.0, seed=0)[0]
        above = attribute_sweep(
            imputer, prior, held_out_corpus(), [np.nextafter(0.5, 1.0)], 1.0, seed=0
        )[0]
        assert at == [(1.0, 1.0)]
        assert above == [(0.0, 0.0)]

    def test_self_attack_null(self):
        model = ScoreStub(code_lp_map({("dx", "D1"): -0.3, ("lab", "L2"): -2.5}))
        grid = [-1.0, 0.0, 1e-12, 1.0]
        sweep, _, _ = attribute_sweep(model, model, held_out_corpus(), grid, 0.5, seed=3)
        for tpr, fpr in sweep:
            assert tpr == fpr
        assert sweep[0] == (1.0, 1.0)  # odds exactly 0 >= -1
        assert sweep[1] == (1.0, 1.0)  # ties resolve to present
        assert sweep[2] == (0.0, 0.0)

    def test_monotone_in_threshold(self):
        for seed in range(5):
            rng = numpy_rng(seed, "ai-mono")
            lp = {tid: float(-rng.random() * 4) for mod in VOCAB.modalities
                  for tid in VOCAB.code_ids(mod)}
            imputer = ScoreStub(lp)
            prior = ScoreStub(default=-1.5)
            grid = sorted(float(g) for g in rng.normal(0, 1.5, size=9))
            sweep, _, _ = attribute_sweep(imputer, prior, held_out_corpus(), grid, 0.6, seed=seed)
            for (t0, f0), (t1, f1) in zip(sweep, sweep[1:]):
                assert t1 <= t0 and f1 <= f0

    def test_predictors_see_only_masked_records(self):
        imputer = ScoreStub(default=-0.5)
        prior = ScoreStub(default=-1.0)
        attribute_sweep(imputer, prior, held_out_corpus(), [0.0], hide_fraction=1.0, seed=1)
        code_ids = {tid for mod in VOCAB.modalities for tid in VOCAB.code_ids(mod)}
        for model in (imputer, prior):
            assert model.queries
            for enc, dec in model.queries:
                assert not (set(enc) | set(dec)) & code_ids

    def test_no_positives_rejected(self):
        with pytest.raises(DataError):
            attribute_sweep(ScoreStub(), ScoreStub(), held_out_corpus(), [0.0],
                            hide_fraction=0.0, seed=0)

    def test_no_negatives_rejected(self):
        # every modality vocabulary is exhausted by the visit: no decoys
        saturated = corpus_of([
            record_of([{"dx": ["D0", "D1", "D2", "D3"], "lab": ["L0", "L1", "L2"]}])
        ])
        with pytest.raises(DataError):
            attribute_sweep(ScoreStub(), ScoreStub(), saturated, [0.0], 1.0, seed=0)

    def test_bad_arguments_rejected(self):
        stub = ScoreStub()
        with pytest.raises(ConfigError):
            attribute_sweep(stub, stub, held_out_corpus(), [], 0.5, seed=0)
        with pytest.raises(ConfigError):
            attribute_sweep(stub, stub, held_out_corpus(), [1.0, -1.0], 0.5, seed=0)
        with pytest.raises(ConfigError):
            attribute_sweep(stub, stub, held_out_corpus(), [0.0], 1.5, seed=0)
        other = CorpusSchema(modalities=["dx"], vocabularies={"dx": ["D0"]}, m_c=2, m_u=1)
        with pytest.raises(SchemaMismatchError):
            attribute_sweep(ScoreStub(schema=other), stub, held_out_corpus(), [0.0], 0.5, seed=0)

    def test_deterministic_in_seed(self):
        imputer = ScoreStub(code_lp_map({("dx", "D0"): -0.2}))
        prior = ScoreStub(default=-1.0)
        s1 = attribute_sweep(imputer, prior, held_out_corpus(), [-1.0, 0.0, 1.0], 0.5, seed=4)
        s2 = attribute_sweep(imputer, prior, held_out_corpus(), [-1.0, 0.0, 1.0], 0.5, seed=4)
        assert s1 == s2


def tiny_corpus(prefix, codes_by_record):
    records = []
    for i, (dx, lab) in enumerate(codes_by_record):
        records.append(record_of([{"dx": dx, "lab": lab}], rid=f"{prefix}{i}"))
    return corpus_of(records)


class TestRunAttributeAttack:
    ATTACK_TRAIN = TrainConfig(
        learning_rate=1e-3, batch_size=4, epochs=2, warmup_epochs=0,
        corruption=IDENTITY_CORRUPTION, seed=7, steps_per_epoch=3,
    )

    def corpora(self):
        synthetic = tiny_corpus("s", [(["D0"], ["L0"]), (["D1"], ["L1"]), (["D2"], ["L2"]), (["D3"], ["L0"])])
        train_real = tiny_corpus("t", [(["D0", "D1"], ["L0"]), (["D2"], ["L1"]), (["D3"], ["L2"]), (["D1"], ["L0"])])
        test_real = tiny_corpus("e", [(["D0", "D2"], ["L1"]), (["D1", "D3"], ["L2"]), (["D2"], ["L0"]), (["D0"], ["L2"])])
        return synthetic, train_real, test_real

    def test_end_to_end_structure_and_monotonicity(self):
        synthetic, train_real, test_real = self.corpora()
        grid = [-2.0, 0.0, 2.0]
        result = run_attribute_attack(
            synthetic, train_real, test_real, grid,
            hide_fraction=0.5, seed=1,
            train_config=self.ATTACK_TRAIN, model_config=TINY_MODEL,
        )
        assert result.delta_grid == grid
        assert len(result.treatment) == 3 and len(result.control) == 3
        assert result.n_positives > 0 and result.n_negatives > 0
        for arm in (result.treatment, result.control):
            for (t0, f0), (t1, f1) in zip(arm, arm[1:]):
                assert t1 <= t0 and f1 <= f0
            for tpr, fpr in arm:
                assert 0.0 <= tpr <= 1.0 and 0.0 <= fpr <= 1.0
        import json

        json.dumps(result.to_dict())

    def test_empty_grid_rejected(self):
        synthetic, train_real, test_real = self.corpora()
        with pytest.raises(ConfigError):
            run_attribute_attack(synthetic, train_real, test_real, [],
                                 train_config=self.ATTACK_TRAIN, model_config=TINY_MODEL)

    def test_schema_mismatch_rejected(self):
        synthetic, train_real, test_real = self.corpora()
        other = Corpus(
            schema=CorpusSchema(modalities=["dx"], vocabularies={"dx": ["D0"]}, m_c=2, m_u=1),
            records=[],
        )
        with pytest.raises(SchemaMismatchError):
            run_attribute_attack(synthetic, train_real, other, [0.0],
                                 train_config=self.ATTACK_TRAIN, model_config=TINY_MODEL)
