"""Heterogeneous-vocabulary support.

Models with different vocabularies cannot have their distributions combined
directly, so every per-model distribution is mapped onto a unified vocabulary
(the ordered union of all model vocabularies) before it is averaged or
sampled. The map optionally truncates to the top-k entries first, then
renormalizes, then scatters through the model's index map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Distribution, MixdecodeError, Vocabulary, VocabMismatch


class UnalignableToken(MixdecodeError):
    """A unified-vocabulary token has no counterpart in a model's vocabulary."""


@dataclass(frozen=True)
class AlignmentConfig:
    """Per-model truncation applied before mapping onto the union.

    ``top_k`` is a positive count or the string ``"all"`` (no truncation).
    Outputs are always renormalized.
    """

    top_k: int | str = "all"

    def __post_init__(self):
        if self.top_k == "all":
            return
        if not isinstance(self.top_k, int) or isinstance(self.top_k, bool) or self.top_k < 1:
            raise ValueError(f"top_k must be a positive integer or 'all', got {self.top_k!r}")


class UnifiedVocabulary:
    """Union of model vocabularies with per-model index maps.

    ``to_unified`` maps a model-local token index to its union index;
    ``to_model`` maps back (None when the model lacks the token).
    """

    def __init__(self, vocab: Vocabulary, source_vocabs: Sequence[Vocabulary]):
        self.vocab = vocab
        self.source_vocabs = tuple(source_vocabs)
        maps = []
        reverse = []
        for sv in self.source_vocabs:
            fwd = np.array([vocab.index_of(tok) for tok in sv.tokens], dtype=np.int64)
            fwd.setflags(write=False)
            maps.append(fwd)
            reverse.append({int(u): local for local, u in enumerate(fwd)})
        self.maps = tuple(maps)
        self._reverse = tuple(reverse)

    @property
    def n_models(self) -> int:
        return len(self.source_vocabs)

    def to_unified(self, model_index: int, local_token: int) -> int:
        return int(self.maps[model_index][local_token])

    def to_model(self, model_index: int, unified_token: int) -> int | None:
        return self._reverse[model_index].get(int(unified_token))

    def require_model_token(self, model_index: int, unified_token: int) -> int:
        local = self.to_model(model_index, unified_token)
        if local is None:
            raise UnalignableToken(
                f"token {self.vocab.token(unified_token)!r} is not in model {model_index}'s vocabulary"
            )
        return local


def build_unified(vocabs: Sequence[Vocabulary]) -> UnifiedVocabulary:
    """Union of vocabularies, ordered by first appearance across the list."""
    if not vocabs:
        raise ValueError("need at least one vocabulary")
    seen: dict[str, None] = {}
    for v in vocabs:
        for tok in v.tokens:
            seen.setdefault(tok, None)
    return UnifiedVocabulary(Vocabulary(seen.keys()), vocabs)


def align(
    dist: Distribution,
    unified: UnifiedVocabulary,
    model_index: int,
    cfg: AlignmentConfig = AlignmentConfig(),
) -> Distribution:
    """Map a model's distribution onto the unified vocabulary.

    Steps: keep the top-k entries by probability (ties broken toward lower
    token index), renormalize the survivors, scatter through the model's
    index map; everything off-support is zero.
    """
    source = unified.source_vocabs[model_index]
    if dist.vocab != source:
        raise VocabMismatch(f"distribution is not over model {model_index}'s vocabulary")
    probs = dist.probs
    if cfg.top_k != "all" and cfg.top_k < probs.size:
        # Stable sort on the negated vector keeps ties in index order.
        keep = np.argsort(-probs, kind="stable")[: cfg.top_k]
        kept = np.zeros_like(probs)
        kept[keep] = probs[keep]
        probs = kept
    total = float(probs.sum())
    if total != 1.0:
        probs = probs / total
    out = np.zeros(len(unified.vocab))
    out[unified.maps[model_index]] = probs
    return Distribution(unified.vocab, out)
