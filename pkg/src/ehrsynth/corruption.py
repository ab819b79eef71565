"""Grammar-preserving training-time corruption of token sequences.

Five operations, all restricted to code tokens (structural specials are
never touched, so corrupted output always parses):

* modality permute: reorder modality blocks within each visit
* span shuffle: permute code order inside each modality block
* infill: replace one contiguous run of codes in a block with a single
  <mask>; run length is Poisson(infill_lambda) truncated to the run, and
  zero-length draws are no-ops
* token mask: replace individual codes with <mask>
* token delete: drop individual codes

Operations are applied in the order listed. Each modality block receives
at most one infill run, gated by p_infill.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .grammar import K_CODE, K_MASK, K_MCLOSE, K_MOPEN, K_VCLOSE, K_VOPEN, TokenSequence, Vocabulary
from .seeding import numpy_rng


@dataclass
class CorruptionConfig:
    p_mask: float = 0.15
    p_delete: float = 0.10
    p_infill: float = 0.20
    infill_lambda: float = 3.0
    enable_span_shuffle: bool = True
    enable_modality_permute: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_mask", "p_delete", "p_infill"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.infill_lambda <= 0:
            raise ConfigError("infill_lambda must be positive")


@dataclass
class _Block:
    modality: str
    items: list[int]  # code ids and possibly pre-existing mask ids


def _split_structure(tokens: TokenSequence) -> list[list[_Block]]:
    """Token ids → per-visit lists of modality blocks. Lenient: assumes
    well-formed input (the corrupt() precondition)."""
    vocab = tokens.vocab
    visits: list[list[_Block]] = []
    block: Optional[_Block] = None
    for tid in tokens.ids:
        kind = vocab.kind(tid)
        if kind == K_VOPEN:
            visits.append([])
        elif kind == K_MOPEN:
            block = _Block(vocab.modality_of(tid), [])
            visits[-1].append(block)
        elif kind in (K_CODE, K_MASK) and block is not None:
            block.items.append(tid)
        elif kind == K_MCLOSE:
            block = None
        elif kind == K_VCLOSE:
            block = None
    return visits


def _assemble(visits: list[list[_Block]], vocab: Vocabulary) -> TokenSequence:
    ids = [vocab.bos_id]
    for blocks in visits:
        ids.append(vocab.visit_open_id)
        for block in blocks:
            ids.append(vocab.modality_open_id(block.modality))
            ids.extend(block.items)
            ids.append(vocab.modality_close_id(block.modality))
        ids.append(vocab.visit_close_id)
    ids.append(vocab.eos_id)
    return TokenSequence(ids=ids, vocab=vocab)


def _code_runs(items: list[int], vocab: Vocabulary) -> list[tuple[int, int]]:
    """Maximal [start, end) runs of code tokens (excludes masks)."""
    runs = []
    start = None
    for i, tid in enumerate(items):
        if vocab.kind(tid) == K_CODE:
            if start is None:
                start = i
        else:
            if start is not None:
                runs.append((start, i))
                start = None
    if start is not None:
        runs.append((start, len(items)))
    return runs


def corrupt(
    tokens: TokenSequence, config: CorruptionConfig, rng: Optional[np.random.Generator] = None
) -> TokenSequence:
    """Apply the configured corruption ops. Deterministic given (tokens,
    config, rng state); with rng omitted a generator is derived from
    config.seed."""
    if rng is None:
        rng = numpy_rng(config.seed, "corrupt")
    vocab = tokens.vocab
    visits = _split_structure(tokens)

    for blocks in visits:
        if config.enable_modality_permute and len(blocks) > 1:
            order = rng.permutation(len(blocks))
            blocks[:] = [blocks[i] for i in order]
        for block in blocks:
            if config.enable_span_shuffle and len(block.items) > 1:
                order = rng.permutation(len(block.items))
                block.items = [block.items[i] for i in order]
            if config.p_infill > 0 and rng.random() < config.p_infill:
                runs = _code_runs(block.items, vocab)
                if runs:
                    length = int(rng.poisson(config.infill_lambda))
                    if length > 0:
                        run = runs[int(rng.integers(0, len(runs)))]
                        length = min(length, run[1] - run[0])
                        start = run[0] + int(rng.integers(0, run[1] - run[0] - length + 1))
                        block.items[start : start + length] = [vocab.mask_id]
            if config.p_mask > 0:
                block.items = [
                    vocab.mask_id
                    if vocab.kind(t) == K_CODE and rng.random() < config.p_mask
                    else t
                    for t in block.items
                ]
            if config.p_delete > 0:
                block.items = [
                    t
                    for t in block.items
                    if vocab.kind(t) != K_CODE or rng.random() >= config.p_delete
                ]
    return _assemble(visits, vocab)


def _block_summary(tokens: TokenSequence) -> dict[tuple[int, str], tuple[Counter, int]]:
    """(visit index, modality) → (code-id multiset, mask count)."""
    vocab = tokens.vocab
    out: dict[tuple[int, str], tuple[Counter, int]] = {}
    for vi, blocks in enumerate(_split_structure(tokens)):
        for block in blocks:
            codes = Counter(t for t in block.items if vocab.kind(t) == K_CODE)
            masks = sum(1 for t in block.items if vocab.kind(t) == K_MASK)
            out[(vi, block.modality)] = (codes, masks)
    return out


def corruption_stats(before: TokenSequence, after: TokenSequence) -> dict:
    """Counts recovered by aligning blocks on (visit index, modality).

    Exact when operations are used in isolation. A length-1 infill is
    indistinguishable from a token mask after the fact and is counted under
    n_masked; when deletion and infill are both enabled, codes removed by
    an infill run beyond its single mask are counted under n_deleted.
    """
    b = _block_summary(before)
    a = _block_summary(after)
    n_masked = 0
    n_deleted = 0
    n_infilled = 0
    for key, (b_codes, b_masks) in b.items():
        a_codes, a_masks = a.get(key, (Counter(), 0))
        new_masks = max(0, a_masks - b_masks)
        missing = sum((b_codes - a_codes).values())
        n_masked += new_masks
        n_deleted += max(0, missing - new_masks)
        if new_masks > 0 and missing > new_masks:
            n_infilled += 1
    return {"n_masked": n_masked, "n_deleted": n_deleted, "n_infilled_spans": n_infilled}
