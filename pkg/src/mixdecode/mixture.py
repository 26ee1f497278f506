"""Decomposing a combined distribution into a cheap/expensive mixture.

When a combined distribution C dominates lam * p pointwise for some base
distribution p and mixing weight lam in (0, 1), it can be rewritten as
(1 - lam) * C' + lam * p with C' = (C - lam * p) / (1 - lam), which is itself
a valid distribution. Sampling then takes the cheap branch (p alone) with
probability lam and only pays for the full combination otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Distribution, MixdecodeError, SeededRng, VocabMismatch, sample_token

#: Absolute per-entry tolerance for the containment check and reconstruction.
CONTAINMENT_TOL = 1e-12


class LambdaOutOfRange(MixdecodeError):
    """The mixing weight must lie strictly inside (0, 1)."""


class ContainmentViolated(MixdecodeError):
    """C does not dominate lam * p; carries a witness entry."""

    def __init__(self, index: int, combined_prob: float, required: float):
        super().__init__(
            f"entry {index}: combined probability {combined_prob!r} is below "
            f"the required lam*p mass {required!r}"
        )
        self.index = index
        self.combined_prob = combined_prob
        self.required = required


@dataclass(frozen=True)
class MixtureDecomposition:
    """C rewritten as (1 - lam) * residual + lam * base."""

    lam: float
    base: Distribution
    residual: Distribution
    combined: Distribution


def max_lambda(combined: Distribution, base: Distribution) -> float:
    """Largest mixing weight for which ``combined >= lam * base`` pointwise.

    The binding constraint is min over the base's support of C(x) / p(x),
    clamped into [0, 1].
    """
    if combined.vocab != base.vocab:
        raise VocabMismatch("decomposition requires a shared vocabulary")
    support = base.probs > 0
    if not support.any():
        return 1.0
    ratio = float(np.min(combined.probs[support] / base.probs[support]))
    return min(max(ratio, 0.0), 1.0)


def decompose(combined: Distribution, base: Distribution, lam: float) -> MixtureDecomposition:
    """Split ``combined`` into ``(1 - lam) * residual + lam * base``.

    Raises LambdaOutOfRange unless 0 < lam < 1 and ContainmentViolated (with
    a witness entry) when the domination condition fails anywhere beyond the
    tolerance. Residual entries that go negative within tolerance are clamped
    to zero and the residual renormalized.
    """
    if combined.vocab != base.vocab:
        raise VocabMismatch("decomposition requires a shared vocabulary")
    if not 0.0 < lam < 1.0:
        raise LambdaOutOfRange(f"lam must be in (0, 1), got {lam!r}")
    required = lam * base.probs
    deficit = required - combined.probs
    worst = int(np.argmax(deficit))
    if deficit[worst] > CONTAINMENT_TOL:
        raise ContainmentViolated(worst, float(combined.probs[worst]), float(required[worst]))
    residual = (combined.probs - required) / (1.0 - lam)
    residual = np.maximum(residual, 0.0)
    total = float(residual.sum())
    if total != 1.0:
        residual = residual / total
    decomposition = MixtureDecomposition(
        lam=float(lam),
        base=base,
        residual=Distribution(combined.vocab, residual),
        combined=combined,
    )
    recon_error = float(np.max(np.abs(reconstruct(decomposition).probs - combined.probs)))
    if recon_error > CONTAINMENT_TOL:
        raise ArithmeticError(f"reconstruction error {recon_error:.3e} exceeds {CONTAINMENT_TOL}")
    return decomposition


def reconstruct(decomposition: MixtureDecomposition) -> Distribution:
    """Reassemble the combined distribution from its two components."""
    probs = (
        (1.0 - decomposition.lam) * decomposition.residual.probs
        + decomposition.lam * decomposition.base.probs
    )
    return Distribution(decomposition.combined.vocab, probs)


def decomposed_sample(
    decomposition: MixtureDecomposition,
    rng: SeededRng,
    cheap: Callable[[SeededRng], int] | None = None,
    expensive: Callable[[SeededRng], int] | None = None,
) -> int:
    """Sample from the combined distribution via its mixture form.

    With probability lam the cheap sampler (the base distribution, i.e. one
    model's own output) is used; otherwise the expensive residual sampler
    runs. Emitted tokens are distributed as the combined distribution.
    """
    if cheap is None:
        cheap = lambda r: sample_token(decomposition.base, r)
    if expensive is None:
        expensive = lambda r: sample_token(decomposition.residual, r)
    if rng.uniform() < decomposition.lam:
        return cheap(rng)
    return expensive(rng)
