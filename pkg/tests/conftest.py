"""Shared expensive fixtures: three small trained generators, each on a
corpus drawn from a known process so tests can compare model behavior
against exact conditionals.

All three train in seconds at reduced width; session scope means each is
fitted at most once per run.
"""

import time
from dataclasses import dataclass

import pytest

from ehrsynth.corruption import CorruptionConfig
from ehrsynth.model import EncDecModel, ModelConfig, TrainConfig, train
from ehrsynth.records import (
    BaselineEffect,
    Corpus,
    CouplingRule,
    OracleSpec,
    generate_oracle_corpus,
)

IDENTITY_CORRUPTION = CorruptionConfig(
    p_mask=0.0, p_delete=0.0, p_infill=0.0,
    enable_span_shuffle=False, enable_modality_permute=False,
)

SMALL_MODEL = dict(
    d_model=32, n_encoder_layers=1, n_decoder_layers=1, n_heads=2,
    d_ff=64, featurizer_hidden=8,
)

CHAIN_VOCAB = 50


@dataclass(frozen=True)
class TrainedOracle:
    spec: OracleSpec
    train_corpus: Corpus
    held_out: Corpus
    model: EncDecModel
    model_config: ModelConfig
    train_config: TrainConfig
    train_seconds: float


def _fit(spec, n_records, n_train, model_config, train_config) -> TrainedOracle:
    corpus = generate_oracle_corpus(spec, n_records)
    train_corpus = corpus.subset(corpus.records[:n_train])
    held_out = corpus.subset(corpus.records[n_train:])
    t0 = time.monotonic()
    model, _ = train(train_corpus, held_out, train_config, model_config=model_config)
    elapsed = time.monotonic() - t0
    model.eval()
    return TrainedOracle(
        spec, train_corpus, held_out, model, model_config, train_config, elapsed
    )


@pytest.fixture(scope="session")
def chain_oracle() -> TrainedOracle:
    """Deterministic successor process: visit t+1's single code is fixed by
    visit t's. Uniform start, always four visits."""
    v = CHAIN_VOCAB
    spec = OracleSpec(
        modalities=["dx"],
        vocab_sizes={"dx": v},
        init_dist=[1.0 / v] * v,
        transition=[[1.0 if j == (i + 1) % v else 0.0 for j in range(v)] for i in range(v)],
        visit_count_dist=[0.0, 0.0, 0.0, 1.0],
        m_c=1,
        m_u=1,
        seed=101,
    )
    return _fit(
        spec,
        n_records=200,
        n_train=160,
        model_config=ModelConfig(max_len=48, **SMALL_MODEL),
        train_config=TrainConfig(
            learning_rate=3e-3, weight_decay=0.0, batch_size=16, epochs=45,
            warmup_epochs=1, corruption=IDENTITY_CORRUPTION, seed=7,
            long_task_fraction=0.8, steps_per_epoch=40,
        ),
    )


@pytest.fixture(scope="session")
def coupled_oracle() -> TrainedOracle:
    """Memoryless anchor with a strong within-visit implication: dx_i
    triggers lab_i with probability 0.9, so the lab slot is near-readable
    from visit context but not from history."""
    k = 6
    spec = OracleSpec(
        modalities=["dx", "lab"],
        vocab_sizes={"dx": k, "lab": k},
        init_dist=[1.0 / k] * k,
        transition=[[1.0 / k] * k for _ in range(k)],
        visit_count_dist=[0.0, 0.3, 0.4, 0.3],
        couplings=[CouplingRule("dx", f"dx_{i}", "lab", f"lab_{i}", 0.9) for i in range(k)],
        noise_rates={"lab": 0.25},
        m_c=1,
        m_u=1,
        seed=202,
    )
    return _fit(
        spec,
        n_records=210,
        n_train=150,
        model_config=ModelConfig(max_len=64, **SMALL_MODEL),
        train_config=TrainConfig(
            learning_rate=3e-3, weight_decay=0.0, batch_size=16, epochs=30,
            warmup_epochs=1, corruption=IDENTITY_CORRUPTION, seed=17,
            long_task_fraction=0.5, steps_per_epoch=40,
        ),
    )


@pytest.fixture(scope="session")
def flagged_oracle() -> TrainedOracle:
    """One binary baseline feature flips the dominant code of the event
    distribution; visits are otherwise i.i.d. within a record."""
    spec = OracleSpec(
        modalities=["dx"],
        vocab_sizes={"dx": 5},
        init_dist=[0.6, 0.1, 0.1, 0.1, 0.1],
        transition=[[0.6, 0.1, 0.1, 0.1, 0.1]] * 5,
        visit_count_dist=[0.5, 0.5],
        baseline_effects=[BaselineEffect(feature_index=0, init_dist=[0.1, 0.6, 0.1, 0.1, 0.1])],
        m_c=1,
        m_u=1,
        seed=303,
    )
    return _fit(
        spec,
        n_records=540,
        n_train=500,
        model_config=ModelConfig(max_len=32, **SMALL_MODEL),
        train_config=TrainConfig(
            learning_rate=2e-3, weight_decay=3e-4, batch_size=16, epochs=12,
            warmup_epochs=1, corruption=IDENTITY_CORRUPTION, seed=29,
            long_task_fraction=0.8, steps_per_epoch=60,
        ),
    )
