"""Prompt-conditioned encoder-decoder sequence model.

Baseline features enter through four small featurizers (categorical and
numeric, one pair per side). Each featurizer maps its feature vector
through two linear layers, (x·W0 + b)·W1, and the result is reshaped to a
block of prompt rows that is prepended to the shared token embeddings:

    input = [cat prompt rows ; num prompt rows ; token embeddings]

The encoder is bidirectional, the decoder causally masked with
cross-attention into the encoder output, and the output projection is
tied to the token embedding table. Everything runs in float64 on CPU:
the evaluation suite checks model likelihoods against independent oracles
at 1e-9 and gradients against central finite differences at 1e-4, which
float32 cannot reliably satisfy.

Training draws (record, task) pairs per step: continuing the visit
sequence from a corrupted history, or filling one modality of a visit
from its corrupted surroundings, and minimizes NLL over answer-slot
tokens only. The checkpoint with the lowest validation perplexity wins.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .corruption import CorruptionConfig, corrupt
from .errors import ConfigError, DataError, NumericError, SchemaMismatchError
from .grammar import (
    PromptLayout,
    TokenSequence,
    Vocabulary,
    build_crossmodal_prompt,
    build_longitudinal_prompt,
    modality_answer_ids,
    visit_body_ids,
)
from .records import BaselineFeatures, Corpus, CorpusSchema, PatientRecord
from .seeding import derive_seed, numpy_rng

DTYPE = torch.float64

# attention must follow one code path regardless of train/eval mode, or
# results drift by an ulp between them and exact-equality contracts break
torch.backends.mha.set_fastpath_enabled(False)


@dataclass
class ModelConfig:
    d_model: int = 128
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    featurizer_hidden: int = 64
    n_prompt_tokens_cat: int = 1
    n_prompt_tokens_num: int = 1
    max_len: int = 512

    def __post_init__(self) -> None:
        for name in (
            "d_model",
            "n_encoder_layers",
            "n_decoder_layers",
            "n_heads",
            "d_ff",
            "featurizer_hidden",
            "n_prompt_tokens_cat",
            "n_prompt_tokens_num",
            "max_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    warmup_epochs: int = 3
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    seed: int = 0
    checkpoint_metric: str = "val_ppl"
    long_task_fraction: float = 0.5
    steps_per_epoch: Optional[int] = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not 0.0 <= self.long_task_fraction <= 1.0:
            raise ConfigError("long_task_fraction must lie in [0, 1]")
        if self.checkpoint_metric != "val_ppl":
            raise ConfigError(f"unknown checkpoint metric {self.checkpoint_metric!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")


class PromptFeaturizer(nn.Module):
    """(x·W0 + b)·W1 reshaped to n_tokens rows of width d_model."""

    def __init__(self, m: int, hidden: int, n_tokens: int, d_model: int):
        super().__init__()
        self.n_tokens = n_tokens
        self.d_model = d_model
        self.lin0 = nn.Linear(m, hidden, bias=True)
        self.lin1 = nn.Linear(hidden, n_tokens * d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2:
            raise DataError("featurizer input must be a (batch, features) matrix")
        flat = self.lin1(self.lin0(x))
        return flat.view(x.shape[0], self.n_tokens, self.d_model)


class _EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x: torch.Tensor, key_padding_mask: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + a
        return x + self.ff(self.norm2(x))


class _DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        causal_mask: torch.Tensor,
        self_padding_mask: Optional[torch.Tensor],
        memory_padding_mask: Optional[torch.Tensor],
    ) -> torch.Tensor:
        h = self.norm1(x)
        a, _ = self.self_attn(
            h, h, h, attn_mask=causal_mask, key_padding_mask=self_padding_mask, need_weights=False
        )
        x = x + a
        h = self.norm2(x)
        c, _ = self.cross_attn(
            h, memory, memory, key_padding_mask=memory_padding_mask, need_weights=False
        )
        x = x + c
        return x + self.ff(self.norm3(x))


class EncDecModel(nn.Module):
    """The full model: featurizers, encoder, decoder, tied output head."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, schema: CorpusSchema):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.schema = schema
        d = config.d_model
        self.token_emb = nn.Embedding(len(vocab), d)
        self.pos_enc = nn.Embedding(config.max_len, d)
        self.pos_dec = nn.Embedding(config.max_len, d)
        self.enc_cat = PromptFeaturizer(schema.m_c, config.featurizer_hidden, config.n_prompt_tokens_cat, d)
        self.enc_num = PromptFeaturizer(schema.m_u, config.featurizer_hidden, config.n_prompt_tokens_num, d)
        self.dec_cat = PromptFeaturizer(schema.m_c, config.featurizer_hidden, config.n_prompt_tokens_cat, d)
        self.dec_num = PromptFeaturizer(schema.m_u, config.featurizer_hidden, config.n_prompt_tokens_num, d)
        self.encoder_layers = nn.ModuleList(
            _EncoderLayer(d, config.n_heads, config.d_ff) for _ in range(config.n_encoder_layers)
        )
        self.decoder_layers = nn.ModuleList(
            _DecoderLayer(d, config.n_heads, config.d_ff) for _ in range(config.n_decoder_layers)
        )
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.register_buffer("num_mean", torch.zeros(schema.m_u, dtype=DTYPE))
        self.register_buffer("num_std", torch.ones(schema.m_u, dtype=DTYPE))
        self.to(DTYPE)

    @property
    def n_prompt(self) -> int:
        return self.config.n_prompt_tokens_cat + self.config.n_prompt_tokens_num

    def set_numeric_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        if mean.shape != (self.schema.m_u,) or std.shape != (self.schema.m_u,):
            raise DataError("numeric stats shape does not match m_u")
        self.num_mean.copy_(torch.as_tensor(mean, dtype=DTYPE))
        self.num_std.copy_(torch.as_tensor(std, dtype=DTYPE))

    def zero_featurizers(self) -> None:
        """Remove all prompt influence: every featurizer weight and bias
        becomes zero so the prompt block is zero for any baseline."""
        with torch.no_grad():
            for feat in (self.enc_cat, self.enc_num, self.dec_cat, self.dec_num):
                feat.lin0.weight.zero_()
                feat.lin0.bias.zero_()
                feat.lin1.weight.zero_()

    # -- embedding ----------------------------------------------------------

    def baseline_tensors(self, baselines: Sequence[BaselineFeatures]) -> tuple[torch.Tensor, torch.Tensor]:
        cat = torch.tensor([b.categorical for b in baselines], dtype=DTYPE).reshape(
            len(baselines), self.schema.m_c
        )
        num = torch.tensor([b.numerical for b in baselines], dtype=DTYPE).reshape(
            len(baselines), self.schema.m_u
        )
        return cat, num

    def featurize_prompt(self, cat: torch.Tensor, num: torch.Tensor, side: str) -> torch.Tensor:
        """Prompt block [E_cat; E_num], shape (batch, n_prompt, d_model)."""
        if side == "encoder":
            f_cat, f_num = self.enc_cat, self.enc_num
        elif side == "decoder":
            f_cat, f_num = self.dec_cat, self.dec_num
        else:
            raise ConfigError(f"side must be encoder or decoder, got {side!r}")
        if cat.shape[1] != self.schema.m_c or num.shape[1] != self.schema.m_u:
            raise DataError("baseline feature dimensions do not match the schema")
        normalized = (num - self.num_mean) / self.num_std
        return torch.cat([f_cat(cat), f_num(normalized)], dim=1)

    def embed_inputs(
        self, token_ids: torch.Tensor, cat: torch.Tensor, num: torch.Tensor, side: str
    ) -> torch.Tensor:
        """[prompt rows ; token embeddings], no positional terms yet."""
        prompt = self.featurize_prompt(cat, num, side)
        tokens = self.token_emb(token_ids)
        return torch.cat([prompt, tokens], dim=1)

    # -- transformer stacks -------------------------------------------------

    def _check_len(self, n: int) -> None:
        if n > self.config.max_len:
            raise DataError(f"sequence of {n} rows exceeds max_len={self.config.max_len}")

    def encode(self, embedded: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        self._check_len(embedded.shape[1])
        pos = self.pos_enc(torch.arange(embedded.shape[1]))
        x = embedded + pos
        for layer in self.encoder_layers:
            x = layer(x, padding_mask)
        return self.enc_norm(x)

    def decode(
        self,
        embedded: torch.Tensor,
        memory: torch.Tensor,
        self_padding_mask: Optional[torch.Tensor] = None,
        memory_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        self._check_len(embedded.shape[1])
        n = embedded.shape[1]
        pos = self.pos_dec(torch.arange(n))
        x = embedded + pos
        causal = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        for layer in self.decoder_layers:
            x = layer(x, memory, causal, self_padding_mask, memory_padding_mask)
        return self.dec_norm(x)

    def project(self, hidden: torch.Tensor) -> torch.Tensor:
        """Logits through the tied embedding table."""
        return hidden @ self.token_emb.weight.T

    def forward(
        self,
        encoder_input: torch.Tensor,
        decoder_input: torch.Tensor,
        encoder_padding_mask: Optional[torch.Tensor] = None,
        decoder_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Per-position next-token distributions (softmax rows)."""
        unbatched = encoder_input.dim() == 2
        if unbatched:
            encoder_input = encoder_input.unsqueeze(0)
            decoder_input = decoder_input.unsqueeze(0)
        memory = self.encode(encoder_input, encoder_padding_mask)
        hidden = self.decode(decoder_input, memory, decoder_padding_mask, encoder_padding_mask)
        logits = self.project(hidden)
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite logits in forward pass")
        dist = torch.softmax(logits, dim=-1)
        return dist.squeeze(0) if unbatched else dist

    # -- token-level helpers --------------------------------------------------

    def _pad_batch(self, seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), width), self.vocab.pad_id, dtype=torch.long)
        pad = torch.ones(len(seqs), width, dtype=torch.bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
            pad[i, : len(s)] = False
        return ids, pad

    def _full_padding_mask(self, token_pad: torch.Tensor) -> torch.Tensor:
        # prompt rows are never padding
        prompt = torch.zeros(token_pad.shape[0], self.n_prompt, dtype=torch.bool)
        return torch.cat([prompt, token_pad], dim=1)

    def token_logits(
        self,
        enc_ids: list[list[int]],
        dec_ids: list[list[int]],
        baselines: Sequence[BaselineFeatures],
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Batched forward from raw token ids.

        Returns (logits, decoder token ids tensor, decoder token padding
        mask). Logits row n_prompt - 1 + j predicts decoder token j.
        """
        cat, num = self.baseline_tensors(baselines)
        e_ids, e_pad = self._pad_batch(enc_ids)
        d_ids, d_pad = self._pad_batch(dec_ids)
        enc_emb = self.embed_inputs(e_ids, cat, num, "encoder")
        dec_emb = self.embed_inputs(d_ids, cat, num, "decoder")
        e_mask = self._full_padding_mask(e_pad)
        d_mask = self._full_padding_mask(d_pad)
        memory = self.encode(enc_emb, e_mask)
        hidden = self.decode(dec_emb, memory, d_mask, e_mask)
        logits = self.project(hidden)
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite logits in forward pass")
        return logits, d_ids, d_pad

    def next_distribution(
        self, enc_ids: Sequence[int], dec_ids: Sequence[int], baseline: BaselineFeatures
    ) -> np.ndarray:
        """Distribution of the token following dec_ids, as a numpy vector."""
        with torch.no_grad():
            logits, _, _ = self.token_logits([list(enc_ids)], [list(dec_ids)], [baseline])
        return torch.softmax(logits[0, -1], dim=-1).numpy()

    def next_logprobs(
        self, enc_ids: Sequence[int], dec_ids: Sequence[int], baseline: BaselineFeatures
    ) -> np.ndarray:
        """log_softmax counterpart of next_distribution (better conditioned
        than log of the softmax for very unlikely tokens)."""
        with torch.no_grad():
            logits, _, _ = self.token_logits([list(enc_ids)], [list(dec_ids)], [baseline])
        return torch.log_softmax(logits[0, -1], dim=-1).numpy()

    def token_logprobs(
        self, layout: PromptLayout, baseline: BaselineFeatures, target: Sequence[int]
    ) -> list[float]:
        """Teacher-forced log p(target_j | prompt, prefix, target_<j)."""
        for tid in target:
            if not 0 <= tid < len(self.vocab):
                raise DataError(f"target token id {tid} outside vocabulary")
        dec = list(layout.decoder_prefix.ids) + list(target)
        with torch.no_grad():
            logits, _, _ = self.token_logits([layout.encoder_tokens.ids], [dec], [baseline])
        logprobs = torch.log_softmax(logits[0], dim=-1)
        p = self.n_prompt
        start = len(layout.decoder_prefix.ids)
        out = []
        for j, tid in enumerate(target):
            row = p + start + j - 1
            out.append(float(logprobs[row, tid]))
        return out


def answer_nll_from_logits(
    logits: torch.Tensor,
    dec_ids: torch.Tensor,
    answer_mask: torch.Tensor,
    n_prompt: int,
) -> tuple[torch.Tensor, int]:
    """Mean NLL over answer-slot tokens only.

    logits: (B, P+M, V); dec_ids: (B, M); answer_mask: (B, M) marking
    target tokens. Position j is scored from logits row P + j - 1, so
    answer masks must never mark position 0.
    """
    logprobs = torch.log_softmax(logits, dim=-1)
    # row n_prompt + j - 1 predicts token j; slice rows for tokens 1..M-1
    pred = logprobs[:, n_prompt : n_prompt + dec_ids.shape[1] - 1, :]
    tgt = dec_ids[:, 1:]
    mask = answer_mask[:, 1:]
    nll = -pred.gather(2, tgt.unsqueeze(-1)).squeeze(-1)
    count = int(mask.sum())
    if count == 0:
        raise DataError("batch contains no answer tokens")
    loss = (nll * mask).sum() / count
    return loss, count


@dataclass
class _Example:
    enc_ids: list[int]
    dec_ids: list[int]
    answer_start: int
    baseline: BaselineFeatures


def _longitudinal_example(
    record: PatientRecord, t: int, vocab: Vocabulary, corruption: Optional[CorruptionConfig], rng
) -> _Example:
    layout = build_longitudinal_prompt(record.visits[:t], vocab)
    enc = layout.encoder_tokens
    if corruption is not None:
        enc = corrupt(enc, corruption, rng)
    body = visit_body_ids(record.visits[t], vocab)
    cont = vocab.visit_open_id if t < len(record.visits) - 1 else vocab.eos_id
    dec = list(layout.decoder_prefix.ids) + body + [cont]
    return _Example(enc.ids, dec, len(layout.decoder_prefix.ids), record.baseline)


def _crossmodal_example(
    record: PatientRecord,
    t: int,
    mod: str,
    vocab: Vocabulary,
    corruption: Optional[CorruptionConfig],
    rng,
) -> _Example:
    layout = build_crossmodal_prompt(record.visits[:t], record.visits[t], mod, vocab)
    enc = layout.encoder_tokens
    if corruption is not None:
        enc = corrupt(enc, corruption, rng)
    answer = modality_answer_ids(record.visits[t], mod, vocab)
    dec = list(layout.decoder_prefix.ids) + answer
    return _Example(enc.ids, dec, len(layout.decoder_prefix.ids), record.baseline)


def _batch_loss(model: EncDecModel, batch: list[_Example]) -> tuple[torch.Tensor, int]:
    logits, d_ids, _ = model.token_logits(
        [ex.enc_ids for ex in batch], [ex.dec_ids for ex in batch], [ex.baseline for ex in batch]
    )
    mask = torch.zeros_like(d_ids, dtype=DTYPE)
    for i, ex in enumerate(batch):
        mask[i, ex.answer_start : len(ex.dec_ids)] = 1.0
    return answer_nll_from_logits(logits, d_ids, mask, model.n_prompt)


def validation_perplexity(model: EncDecModel, corpus: Corpus, batch_size: int = 32) -> float:
    """exp(mean answer-token NLL) over every longitudinal target and every
    (visit, modality) cloze target, uncorrupted context."""
    vocab = model.vocab
    examples: list[_Example] = []
    for record in corpus.records:
        for t in range(len(record.visits)):
            examples.append(_longitudinal_example(record, t, vocab, None, None))
            for mod in corpus.schema.modalities:
                examples.append(_crossmodal_example(record, t, mod, vocab, None, None))
    total_nll = 0.0
    total_count = 0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            loss, count = _batch_loss(model, chunk)
            total_nll += float(loss) * count
            total_count += count
    mean_nll = total_nll / total_count
    try:
        return math.exp(mean_nll)
    except OverflowError:
        raise NumericError(f"validation perplexity overflow: mean NLL {mean_nll}") from None


def build_model(
    config: ModelConfig, vocab: Vocabulary, schema: CorpusSchema, seed: int
) -> EncDecModel:
    """Construct a randomly initialized model, deterministically in seed."""
    torch.manual_seed(derive_seed(seed, "model-init") & ((1 << 63) - 1))
    return EncDecModel(config, vocab, schema)


def train(
    train_corpus: Corpus,
    val_corpus: Corpus,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    vocab: Optional[Vocabulary] = None,
) -> tuple[EncDecModel, list[dict]]:
    """Train from random initialization; keep the best-validation weights.

    The log holds one entry per epoch: mean train loss, validation
    perplexity, learning rate. Entirely deterministic for a fixed config.
    """
    if train_corpus.schema != val_corpus.schema:
        raise SchemaMismatchError("train and val corpora have different schemas")
    schema = train_corpus.schema
    if vocab is None:
        vocab = Vocabulary.from_schema(schema)
    model = build_model(model_config or ModelConfig(), vocab, schema, config.seed)
    mean, std = train_corpus.numeric_stats()
    model.set_numeric_stats(mean, std)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    sampler = numpy_rng(config.seed, "train-sampler")
    corrupt_rng = numpy_rng(config.seed, "train-corruption")
    records = train_corpus.records
    modalities = schema.modalities
    steps_per_epoch = config.steps_per_epoch or max(1, math.ceil(len(records) / config.batch_size))
    warmup_steps = config.warmup_epochs * steps_per_epoch

    best_ppl = math.inf
    best_state = None
    log: list[dict] = []
    global_step = 0
    for epoch in range(config.epochs):
        model.train()
        epoch_losses = []
        for _ in range(steps_per_epoch):
            if warmup_steps > 0:
                scale = min(1.0, (global_step + 1) / warmup_steps)
            else:
                scale = 1.0
            for group in optimizer.param_groups:
                group["lr"] = config.learning_rate * scale

            batch = []
            for _ in range(config.batch_size):
                record = records[int(sampler.integers(0, len(records)))]
                t = int(sampler.integers(0, len(record.visits)))
                if sampler.random() < config.long_task_fraction:
                    batch.append(
                        _longitudinal_example(record, t, vocab, config.corruption, corrupt_rng)
                    )
                else:
                    mod = modalities[int(sampler.integers(0, len(modalities)))]
                    batch.append(
                        _crossmodal_example(record, t, mod, vocab, config.corruption, corrupt_rng)
                    )
            loss, _ = _batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch} step {global_step}: {float(loss)}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            global_step += 1

        model.eval()
        val_ppl = validation_perplexity(model, val_corpus)
        log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_ppl": val_ppl,
                "lr": config.learning_rate * (min(1.0, global_step / warmup_steps) if warmup_steps else 1.0),
            }
        )
        if val_ppl < best_ppl:
            best_ppl = val_ppl
            best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: EncDecModel, path: str) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "schema": model.schema.to_dict(),
        "schema_digest": model.schema.digest(),
        "vocab_tokens": model.vocab.tokens,
        "vocab_modalities": model.vocab.modalities,
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> EncDecModel:
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint format {payload.get('format_version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    schema = CorpusSchema.from_dict(payload["schema"])
    if schema.digest() != payload["schema_digest"]:
        raise DataError("checkpoint schema digest mismatch")
    vocab = Vocabulary(tokens=list(payload["vocab_tokens"]), modalities=list(payload["vocab_modalities"]))
    model = EncDecModel(ModelConfig.from_dict(payload["model_config"]), vocab, schema)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
