"""Foundational types for categorical token prediction and sampling.

Everything downstream (predictors, vocabulary alignment, the decoding
strategies, the statistical harness) is built from the pieces here:
vocabularies, append-only token sequences, simplex-validated distributions,
ensemble weights, and a seeded RNG. All sampling is inverse-CDF with a single
uniform draw per decision, so a run is fully determined by one 64-bit seed.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

#: Absolute tolerance for simplex validation (unit mass within this drift).
SIMPLEX_TOL = 1e-9


class MixdecodeError(Exception):
    """Base class for every error raised by this package."""


class ZeroMass(MixdecodeError):
    """A weight vector with zero total mass cannot be normalized."""


class NegativeEntry(MixdecodeError):
    """Probabilities and weights must be non-negative."""


class NotASimplex(MixdecodeError):
    """Vector is too far from unit mass to be accepted as a distribution."""


class VocabMismatch(MixdecodeError):
    """Two distributions were combined across different vocabularies."""


class Vocabulary:
    """Ordered, duplicate-free token inventory with bijective index lookup."""

    __slots__ = ("tokens", "_index")

    def __init__(self, tokens: Iterable[str]):
        toks = tuple(tokens)
        if not toks:
            raise ValueError("vocabulary must contain at least one token")
        index: dict[str, int] = {}
        for i, tok in enumerate(toks):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} at index {i}")
            index[tok] = i
        self.tokens = toks
        self._index = index

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index_of(self, token: str) -> int:
        return self._index[token]

    def token(self, index: int) -> str:
        return self.tokens[index]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"


class TokenSequence:
    """Append-only run of token indices over one vocabulary."""

    __slots__ = ("vocab", "_tokens")

    def __init__(self, vocab: Vocabulary, tokens: Iterable[int] = ()):
        self.vocab = vocab
        self._tokens: list[int] = []
        self.extend(tokens)

    def append(self, token: int) -> None:
        if not 0 <= token < len(self.vocab):
            raise ValueError(f"token index {token} outside vocabulary of size {len(self.vocab)}")
        self._tokens.append(int(token))

    def extend(self, tokens: Iterable[int]) -> None:
        for tok in tokens:
            self.append(tok)

    def as_list(self) -> list[int]:
        return list(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __iter__(self):
        return iter(self._tokens)

    def __getitem__(self, item):
        return self._tokens[item]

    def __repr__(self) -> str:
        return f"TokenSequence(len={len(self._tokens)})"


def normalize(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Scale a non-negative vector to unit mass, preserving proportions."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError("expected a non-empty 1-d vector")
    if (vec < 0).any():
        bad = int(np.argmin(vec))
        raise NegativeEntry(f"entry {bad} is negative ({vec[bad]!r})")
    total = float(vec.sum())
    if total == 0.0:
        raise ZeroMass("cannot normalize a vector with zero total mass")
    return vec / total


def _check_simplex(vec: np.ndarray, what: str) -> None:
    if (vec < 0).any():
        bad = int(np.argmin(vec))
        raise NegativeEntry(f"{what} entry {bad} is negative ({vec[bad]!r})")
    drift = abs(float(vec.sum()) - 1.0)
    if drift > SIMPLEX_TOL:
        raise NotASimplex(f"{what} sums to {float(vec.sum())!r}, drift {drift:.3e} exceeds {SIMPLEX_TOL}")


class Distribution:
    """Probability vector over a vocabulary, validated against the simplex.

    Values are accepted as-is when the total mass is within ``SIMPLEX_TOL``
    of one (construction is idempotent: wrapping a distribution's own probs
    reproduces them bit-for-bit). Sampling clamps the inverse-CDF tail, so
    sub-tolerance drift never changes behavior.
    """

    __slots__ = ("vocab", "probs")

    def __init__(self, vocab: Vocabulary, probs: Sequence[float] | np.ndarray):
        p = np.array(probs, dtype=np.float64)
        if p.shape != (len(vocab),):
            raise VocabMismatch(f"got {p.shape[0] if p.ndim == 1 else p.shape} probabilities for vocabulary of size {len(vocab)}")
        _check_simplex(p, "distribution")
        p.setflags(write=False)
        self.vocab = vocab
        self.probs = p

    def __repr__(self) -> str:
        return f"Distribution(vocab_size={len(self.vocab)})"


class EnsembleWeights:
    """Simplex weights assigning each base model its mixture proportion."""

    __slots__ = ("lambdas",)

    def __init__(self, lambdas: Sequence[float] | np.ndarray):
        lam = np.array(lambdas, dtype=np.float64)
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("need at least one weight")
        _check_simplex(lam, "weights")
        lam.setflags(write=False)
        self.lambdas = lam

    @property
    def n(self) -> int:
        return int(self.lambdas.size)

    @classmethod
    def one_hot(cls, index: int, n: int) -> "EnsembleWeights":
        lam = np.zeros(n)
        lam[index] = 1.0
        return cls(lam)

    def __repr__(self) -> str:
        return f"EnsembleWeights({self.lambdas.tolist()})"


class SeededRng:
    """PCG64 generator with explicit 64-bit seeding and derivable substreams.

    The same seed (and derivation path) yields the same draw sequence on any
    platform. ``derive`` produces an independent stream keyed by integers,
    used to hand each worker session its own reproducible randomness.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = seed
        self.path = tuple(int(k) for k in path)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *self.path])))

    def uniform(self) -> float:
        """One draw from U[0, 1)."""
        return float(self._gen.random())

    def derive(self, *keys: int) -> "SeededRng":
        """Independent substream for (seed, *path, *keys)."""
        return SeededRng(self.seed, self.path + tuple(int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        """Underlying numpy generator, for vectorized bulk draws."""
        return self._gen


def _inverse_cdf_sample(probs: np.ndarray, rng: SeededRng) -> int:
    # Single uniform draw against the cumulative vector; the clamp absorbs
    # sub-tolerance mass drift at the tail.
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.uniform(), side="right"))
    return min(idx, probs.size - 1)


def sample_token(dist: Distribution, rng: SeededRng) -> int:
    """Draw one token index from a distribution (inverse-CDF, one uniform)."""
    return _inverse_cdf_sample(dist.probs, rng)


def sample_index(weights: EnsembleWeights, rng: SeededRng) -> int:
    """Draw one model index from the ensemble weights.

    This is exactly ``sample_token`` applied to the weights viewed as a
    distribution over model indices; both share the inverse-CDF kernel.
    """
    return _inverse_cdf_sample(weights.lambdas, rng)


def tv_distance(a: Distribution, b: Distribution) -> float:
    """Total variation distance: half the L1 distance between prob vectors."""
    if a.vocab != b.vocab:
        raise VocabMismatch("total variation requires a shared vocabulary")
    return 0.5 * float(np.abs(a.probs - b.probs).sum())
