"""Statistical harness checking that the two strategies emit the same tokens.

The averaged and mixture-selection strategies are claimed to produce
identically distributed tokens. For each test prefix the harness computes
the averaged strategy's distribution analytically, draws N first tokens from
fresh mixture-selection sessions, and compares the empirical frequencies
against the analytic distribution with a total-variation threshold and a
chi-square goodness-of-fit test.

Draws are split across worker sessions with seeds derived from
(base seed, worker id) and merged by summation, so the result does not
depend on scheduling. Within a worker the two-stage draw (model index, then
token) is vectorized but consumes uniforms exactly as the stepwise engine
does: with a single draw, the sampler and ``mixture_step`` emit the same
token from the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .alignment import align
from .core import Distribution, SeededRng, TokenSequence, tv_distance
from .decoding import EnsembleSpec, KvLedger, averaged_step

DEFAULT_TV_THRESHOLD = 0.01
DEFAULT_P_VALUE_FLOOR = 0.001
MIN_EXPECTED_CELL = 5.0


@dataclass(frozen=True)
class PrefixEquivalence:
    """Verdict for one prefix: empirical mixture draws vs analytic average."""

    prefix: list[int]
    lambdas: list[float]
    n_samples: int
    tv: float
    chi2_stat: float
    dof: int
    p_value: float
    tv_threshold: float
    p_value_floor: float

    @property
    def passed(self) -> bool:
        return self.tv < self.tv_threshold and self.p_value > self.p_value_floor


@dataclass(frozen=True)
class EquivalenceReport:
    """All per-prefix verdicts for one weight configuration."""

    results: tuple[PrefixEquivalence, ...]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)


def _local_prefix(spec: EnsembleSpec, model_index: int, prefix: list[int]) -> list[int]:
    return [spec.unified.require_model_token(model_index, u) for u in prefix]


def aligned_distributions(spec: EnsembleSpec, prefix: list[int]) -> list[Distribution]:
    """Each model's aligned next-token distribution for a prefix.

    Uses a fresh session so caches cannot leak between prefixes.
    """
    session = spec.fresh_session()
    out = []
    for i, model in enumerate(session.models):
        raw = model.predict(_local_prefix(session, i, prefix))
        out.append(align(raw, session.unified, i, session.alignment))
    return out


def analytic_average(spec: EnsembleSpec, prefix: list[int]) -> Distribution:
    """The averaged strategy's exact distribution at a prefix."""
    session = spec.fresh_session()
    seq = TokenSequence(session.unified.vocab, prefix)
    return averaged_step(session, seq, KvLedger(session.n))


def draw_mixture_first_tokens(
    spec: EnsembleSpec,
    prefix: list[int],
    n_samples: int,
    rng: SeededRng,
) -> np.ndarray:
    """Counts over the unified vocabulary of n first-token mixture draws.

    Each draw is an independent session started at the same prefix: sample a
    model index from the weights, then sample a token from that model's
    aligned distribution. The index uniforms are drawn first, then the token
    uniforms, one of each per session.
    """
    tilde = aligned_distributions(spec, prefix)
    cum_weights = np.cumsum(spec.weights.lambdas)
    gen = rng.generator
    n_models = spec.n
    idx = np.searchsorted(cum_weights, gen.random(n_samples), side="right")
    idx = np.minimum(idx, n_models - 1)
    u = gen.random(n_samples)
    tokens = np.empty(n_samples, dtype=np.int64)
    vocab_size = len(spec.unified.vocab)
    for i in range(n_models):
        mask = idx == i
        if not mask.any():
            continue
        cdf = np.cumsum(tilde[i].probs)
        tokens[mask] = np.minimum(
            np.searchsorted(cdf, u[mask], side="right"), vocab_size - 1
        )
    return np.bincount(tokens, minlength=vocab_size)


def mixture_first_token_counts(
    spec: EnsembleSpec,
    prefix: list[int],
    n_samples: int,
    rng: SeededRng,
    workers: int = 4,
) -> np.ndarray:
    """Fan the draws out over derived-seed worker sessions and sum the counts."""
    if workers < 1:
        raise ValueError("need at least one worker")
    per_worker = n_samples // workers
    counts = np.zeros(len(spec.unified.vocab), dtype=np.int64)
    for w in range(workers):
        quota = per_worker + (n_samples % workers if w == 0 else 0)
        if quota == 0:
            continue
        counts += draw_mixture_first_tokens(spec, prefix, quota, rng.derive(w))
    return counts


def chi_square_goodness(counts: np.ndarray, expected_probs: np.ndarray) -> tuple[float, int, float]:
    """Chi-square statistic, degrees of freedom, and p-value with pooling.

    Cells with expected count below MIN_EXPECTED_CELL are pooled together;
    an undersized pool is merged into the smallest regular cell. With fewer
    than two cells the test is vacuous (stat 0, dof 0, p 1).
    """
    n = int(counts.sum())
    expected = expected_probs * n
    big = expected >= MIN_EXPECTED_CELL
    obs_cells = list(counts[big].astype(float))
    exp_cells = list(expected[big])
    pool_obs = float(counts[~big].sum())
    pool_exp = float(expected[~big].sum())
    if pool_exp > 0 or pool_obs > 0:
        if pool_exp >= MIN_EXPECTED_CELL or not exp_cells:
            obs_cells.append(pool_obs)
            exp_cells.append(pool_exp)
        else:
            smallest = int(np.argmin(exp_cells))
            obs_cells[smallest] += pool_obs
            exp_cells[smallest] += pool_exp
    if len(exp_cells) < 2:
        return 0.0, 0, 1.0
    obs = np.asarray(obs_cells)
    exp = np.asarray(exp_cells)
    stat = float(((obs - exp) ** 2 / exp).sum())
    dof = len(exp_cells) - 1
    p_value = float(stats.chi2.sf(stat, dof))
    return stat, dof, p_value


def evaluate_prefix(
    spec: EnsembleSpec,
    prefix: list[int],
    n_samples: int,
    rng: SeededRng,
    *,
    workers: int = 4,
    tv_threshold: float = DEFAULT_TV_THRESHOLD,
    p_value_floor: float = DEFAULT_P_VALUE_FLOOR,
) -> PrefixEquivalence:
    """Compare empirical mixture draws against the analytic average at one prefix."""
    reference = analytic_average(spec, prefix)
    counts = mixture_first_token_counts(spec, prefix, n_samples, rng, workers)
    empirical = Distribution(spec.unified.vocab, counts / n_samples)
    tv = tv_distance(empirical, reference)
    stat, dof, p_value = chi_square_goodness(counts, reference.probs)
    return PrefixEquivalence(
        prefix=list(prefix),
        lambdas=[float(x) for x in spec.weights.lambdas],
        n_samples=n_samples,
        tv=tv,
        chi2_stat=stat,
        dof=dof,
        p_value=p_value,
        tv_threshold=tv_threshold,
        p_value_floor=p_value_floor,
    )


def run_equivalence(
    spec: EnsembleSpec,
    prefixes: list[list[int]],
    n_samples: int,
    seed: int,
    *,
    workers: int = 4,
    tv_threshold: float = DEFAULT_TV_THRESHOLD,
    p_value_floor: float = DEFAULT_P_VALUE_FLOOR,
) -> EquivalenceReport:
    """Evaluate every prefix; each gets its own substream of the base seed."""
    base = SeededRng(seed)
    results = []
    for k, prefix in enumerate(prefixes):
        results.append(
            evaluate_prefix(
                spec,
                prefix,
                n_samples,
                base.derive(k),
                workers=workers,
                tv_threshold=tv_threshold,
                p_value_floor=p_value_floor,
            )
        )
    return EquivalenceReport(tuple(results))
