"""Next-token predictors: lookup tables, n-gram models, and a remote client.

Every predictor owns a per-session cache of consumed tokens plus a cumulative
work receipt (decode forwards, prefill tokens). The cache is bookkeeping
only: ``predict`` is a pure function of the full prefix it is handed, so a
synced cache can never change a prediction, only what the accounting says the
prediction cost.
"""

from __future__ import annotations

import json
import math
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import httpx
import numpy as np

from .core import Distribution, MixdecodeError, Vocabulary, normalize

#: Separator used for context keys in serialized n-gram models. Neither
#: char nor whitespace tokenization can produce it inside a token.
CTX_SEP = ""


class CacheDesync(MixdecodeError):
    """The supplied prefix contradicts the tokens already in the cache."""


class GapError(MixdecodeError):
    """A cache extension did not start at the current cached length."""


class EmptyCorpus(MixdecodeError):
    """The training corpus contained no tokens."""


class OrderTooLargeForCorpus(MixdecodeError):
    """The corpus is shorter than one n-gram window."""


class RemoteError(MixdecodeError):
    """The remote endpoint failed, timed out, or answered with an error."""


@dataclass(frozen=True)
class WorkReceipt:
    """Work performed: full next-token computations and prefilled tokens."""

    decode_forwards: int = 0
    prefill_tokens: int = 0

    def __add__(self, other: "WorkReceipt") -> "WorkReceipt":
        return WorkReceipt(
            self.decode_forwards + other.decode_forwards,
            self.prefill_tokens + other.prefill_tokens,
        )

    def __sub__(self, other: "WorkReceipt") -> "WorkReceipt":
        return WorkReceipt(
            self.decode_forwards - other.decode_forwards,
            self.prefill_tokens - other.prefill_tokens,
        )


class TokenPredictor(ABC):
    """Interface every decoding strategy consumes.

    ``predict`` returns the next-token distribution for a full prefix and
    charges one decode forward. ``extend_cache`` ingests already-known tokens
    (the prefill path) and charges their count. ``commit_token`` records the
    token that the preceding decode forward ultimately produced; it carries
    no prefill charge because incremental decoding feeds exactly that token
    as the input of the next decode forward, whose cost is billed separately.
    """

    def __init__(self, vocab: Vocabulary):
        self._vocab = vocab
        self._cache: list[int] = []
        self._receipt = WorkReceipt()

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def cached_length(self) -> int:
        return len(self._cache)

    @property
    def cached_tokens(self) -> tuple[int, ...]:
        return tuple(self._cache)

    @property
    def session_receipt(self) -> WorkReceipt:
        return self._receipt

    def predict(self, prefix: Sequence[int]) -> Distribution:
        """Next-token distribution given the full prefix content.

        Raises CacheDesync when the prefix does not extend what the cache
        already holds; the caller must resynchronize first.
        """
        toks = list(prefix)
        if toks[: len(self._cache)] != self._cache:
            raise CacheDesync(
                f"prefix of length {len(toks)} does not extend the {len(self._cache)} cached tokens"
            )
        probs = self._next_probs(toks)
        self._receipt += WorkReceipt(decode_forwards=1)
        return Distribution(self._vocab, probs)

    def extend_cache(self, segment: Sequence[int], start: int) -> WorkReceipt:
        """Ingest ``segment`` beginning at absolute position ``start``."""
        if start != len(self._cache):
            raise GapError(f"segment starts at {start} but cache holds {len(self._cache)} tokens")
        seg = [int(t) for t in segment]
        for tok in seg:
            if not 0 <= tok < len(self._vocab):
                raise ValueError(f"token index {tok} outside vocabulary of size {len(self._vocab)}")
        self._cache.extend(seg)
        receipt = WorkReceipt(prefill_tokens=len(seg))
        self._receipt += receipt
        return receipt

    def commit_token(self, token: int) -> None:
        """Record the token emitted from the last decode forward (no charge)."""
        if not 0 <= token < len(self._vocab):
            raise ValueError(f"token index {token} outside vocabulary of size {len(self._vocab)}")
        self._cache.append(int(token))

    @abstractmethod
    def _next_probs(self, prefix: list[int]) -> np.ndarray:
        """Probability vector over the vocabulary for the given prefix."""

    @abstractmethod
    def fresh(self) -> "TokenPredictor":
        """New session over the same parameters, with an empty cache."""


class TableModel(TokenPredictor):
    """Exact lookup-table predictor, the analytic oracle for tests.

    The table maps a fixed-order suffix of the prefix to a distribution;
    order 0 ignores the prefix entirely. Lookups use the exact suffix and
    fall back to ``default`` when the suffix is absent or the prefix is
    shorter than the order.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        default: Sequence[float],
        table: Mapping[tuple[int, ...], Sequence[float]] | None = None,
        order: int = 0,
    ):
        super().__init__(vocab)
        if order < 0:
            raise ValueError("order must be >= 0")
        self.order = order
        self._default = Distribution(vocab, default).probs
        rows: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, probs in (table or {}).items():
            key = tuple(int(t) for t in ctx)
            if len(key) != order:
                raise ValueError(f"context {key} does not match table order {order}")
            rows[key] = Distribution(vocab, probs).probs
        self._rows = rows

    def _next_probs(self, prefix: list[int]) -> np.ndarray:
        if self.order == 0:
            return self._rows.get((), self._default)
        if len(prefix) < self.order:
            return self._default
        return self._rows.get(tuple(prefix[-self.order :]), self._default)

    def fresh(self) -> "TableModel":
        clone = TableModel.__new__(TableModel)
        TokenPredictor.__init__(clone, self._vocab)
        clone.order = self.order
        clone._default = self._default
        clone._rows = self._rows
        return clone


class NGramModel(TokenPredictor):
    """Count-based n-gram language model with additive smoothing.

    P(y | ctx) = (count(ctx, y) + alpha) / (total(ctx) + alpha * |V|).
    Unseen contexts (including prefixes shorter than the context length)
    yield the uniform distribution; with alpha > 0 that is the smoothing
    formula itself, with alpha = 0 it is a deliberate zero-mass guard.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        alpha: float,
        counts: Mapping[tuple[int, ...], Mapping[int, int]],
    ):
        super().__init__(vocab)
        if order < 1:
            raise ValueError("order must be >= 1")
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        self.order = order
        self.alpha = float(alpha)
        self._counts = {tuple(ctx): dict(row) for ctx, row in counts.items()}
        self._uniform = np.full(len(vocab), 1.0 / len(vocab))

    @property
    def counts(self) -> dict[tuple[int, ...], dict[int, int]]:
        return self._counts

    def _next_probs(self, prefix: list[int]) -> np.ndarray:
        ctx_len = self.order - 1
        if len(prefix) < ctx_len:
            return self._uniform
        row = self._counts.get(tuple(prefix[len(prefix) - ctx_len :]))
        if row is None:
            return self._uniform
        vec = np.zeros(len(self._vocab))
        for tok, count in row.items():
            vec[tok] = count
        total = vec.sum()
        if self.alpha == 0.0:
            return vec / total
        return (vec + self.alpha) / (total + self.alpha * len(self._vocab))

    def fresh(self) -> "NGramModel":
        clone = NGramModel.__new__(NGramModel)
        TokenPredictor.__init__(clone, self._vocab)
        clone.order = self.order
        clone.alpha = self.alpha
        clone._counts = self._counts
        clone._uniform = self._uniform
        return clone


def train_ngram(
    corpus: Sequence[str],
    order: int,
    alpha: float,
    vocab: Vocabulary,
) -> NGramModel:
    """Count every length-``order`` window of the corpus into a model."""
    if order < 1:
        raise ValueError("order must be >= 1")
    tokens = [vocab.index_of(t) for t in corpus]
    if not tokens:
        raise EmptyCorpus("corpus contains no tokens")
    if len(tokens) < order:
        raise OrderTooLargeForCorpus(f"corpus has {len(tokens)} tokens, need at least {order}")
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    for i in range(len(tokens) - order + 1):
        ctx = tuple(tokens[i : i + order - 1])
        y = tokens[i + order - 1]
        row = counts.setdefault(ctx, {})
        row[y] = row.get(y, 0) + 1
    return NGramModel(vocab, order, alpha, counts)


def tokenize(text: str, mode: str) -> list[str]:
    """Split raw text into tokens: ``char`` per character, ``word`` on whitespace."""
    if mode == "char":
        return list(text)
    if mode == "word":
        return text.split()
    raise ValueError(f"unknown tokenization mode {mode!r} (expected 'char' or 'word')")


def read_corpus(path: str | Path, mode: str) -> list[str]:
    """Read a UTF-8 text file and tokenize it."""
    text = Path(path).read_text(encoding="utf-8")
    tokens = tokenize(text, mode)
    if not tokens:
        raise EmptyCorpus(f"{path} tokenized to nothing")
    return tokens


def vocab_from_tokens(tokens: Iterable[str]) -> Vocabulary:
    """Vocabulary of unique tokens, ordered by first appearance."""
    seen: dict[str, None] = {}
    for tok in tokens:
        seen.setdefault(tok, None)
    return Vocabulary(seen.keys())


def ngram_to_dict(model: NGramModel) -> dict:
    """JSON-ready representation; round-trips exactly through ``ngram_from_dict``."""
    vocab = model.vocab
    counts_json: dict[str, dict[str, int]] = {}
    for ctx, row in sorted(model.counts.items()):
        key = CTX_SEP.join(vocab.token(t) for t in ctx)
        counts_json[key] = {vocab.token(tok): int(c) for tok, c in sorted(row.items())}
    return {
        "order": model.order,
        "alpha": model.alpha,
        "vocab": list(vocab.tokens),
        "counts": counts_json,
    }


def ngram_from_dict(payload: Mapping) -> NGramModel:
    vocab = Vocabulary(payload["vocab"])
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    for key, row in payload["counts"].items():
        ctx_tokens = key.split(CTX_SEP) if key else []
        ctx = tuple(vocab.index_of(t) for t in ctx_tokens)
        counts[ctx] = {vocab.index_of(tok): int(c) for tok, c in row.items()}
    return NGramModel(vocab, int(payload["order"]), float(payload["alpha"]), counts)


def save_ngram(model: NGramModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ngram_to_dict(model), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_ngram(path: str | Path) -> NGramModel:
    return ngram_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class RemotePredictor(TokenPredictor):
    """Client for a completions-style endpoint serving per-token logprobs.

    Each predict issues one blocking POST asking for a single token at
    temperature 1 with the top ``top_logprobs`` alternatives. The returned
    logprobs are exponentiated, clamped at zero, mass-completed (leftover
    probability spread uniformly over tokens the endpoint did not return),
    and normalized into a valid distribution over ``vocab``. One retry on
    timeout, then RemoteError.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        endpoint: str,
        model: str,
        *,
        timeout_ms: int = 10_000,
        top_logprobs: int = 5,
        auth_env: str | None = None,
        joiner: str = "",
    ):
        super().__init__(vocab)
        self.endpoint = endpoint
        self.model = model
        self.timeout_ms = int(timeout_ms)
        self.top_logprobs = int(top_logprobs)
        self.auth_env = auth_env
        self.joiner = joiner

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _request(self, payload: dict) -> dict:
        timeout = self.timeout_ms / 1000.0
        last_timeout: Exception | None = None
        for _ in range(2):  # one retry on timeout, then fail fast
            try:
                response = httpx.post(self.endpoint, json=payload, headers=self._headers(), timeout=timeout)
            except httpx.TimeoutException as exc:
                last_timeout = exc
                continue
            if response.status_code != 200:
                raise RemoteError(f"endpoint answered HTTP {response.status_code}")
            return response.json()
        raise RemoteError(f"request timed out twice ({self.timeout_ms} ms)") from last_timeout

    def _next_probs(self, prefix: list[int]) -> np.ndarray:
        prompt = self.joiner.join(self._vocab.token(t) for t in prefix)
        payload = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": self.top_logprobs,
            "temperature": 1.0,
        }
        data = self._request(payload)
        try:
            top = data["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise RemoteError(f"malformed response: {exc!r}") from exc

        probs = np.zeros(len(self._vocab))
        assigned = np.zeros(len(self._vocab), dtype=bool)
        for token, logprob in top.items():
            if token not in self._vocab:
                continue
            idx = self._vocab.index_of(token)
            probs[idx] = max(math.exp(float(logprob)), 0.0)
            assigned[idx] = True
        remainder = 1.0 - float(probs.sum())
        open_slots = int((~assigned).sum())
        if remainder > 0.0 and open_slots > 0:
            probs[~assigned] = remainder / open_slots
        return normalize(probs)

    def fresh(self) -> "RemotePredictor":
        return RemotePredictor(
            self._vocab,
            self.endpoint,
            self.model,
            timeout_ms=self.timeout_ms,
            top_logprobs=self.top_logprobs,
            auth_env=self.auth_env,
            joiner=self.joiner,
        )
