"""The two ensemble decoding strategies and their work accounting.

The averaged strategy ("ce") runs every model each step and samples from the
weighted average of their aligned distributions. The mixture-selection
strategy ("me") first samples one model index from the ensemble weights, then
samples a token from that single model's aligned distribution; the emitted
tokens are identically distributed but each step costs one decode forward
instead of n.

Switching models leaves the idle models' caches stale, so each model's cache
is brought up to date lazily: only when a model is actually about to decode
does it prefill the tokens that arrived since its last turn. The per-model
synchronized lengths live in a ledger, and every step's prefill and decode
work is recorded in the trace, which a simulated latency model converts into
wall-clock estimates and speedup ratios.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import AlignmentConfig, UnifiedVocabulary, align, build_unified
from .core import (
    Distribution,
    EnsembleWeights,
    MixdecodeError,
    SeededRng,
    TokenSequence,
    sample_index,
    sample_token,
)
from .predictors import TokenPredictor, WorkReceipt


class GreedyUnderMixture(MixdecodeError):
    """Greedy decoding was requested for the mixture-selection strategy.

    Argmax of a single stochastically chosen model is not argmax of the
    weighted average, so the selection strategy only matches the averaged
    ensemble when tokens are sampled. Use the averaged strategy for greedy
    comparisons.
    """


class UnrepresentablePrompt(MixdecodeError):
    """A prompt token is missing from at least one model's vocabulary."""


class GenerationError(MixdecodeError):
    """A predictor failed mid-generation; carries the partial trace."""

    def __init__(self, message: str, trace: "GenerationTrace"):
        super().__init__(message)
        self.trace = trace


STRATEGIES = ("single", "ce", "me")


@dataclass(frozen=True)
class EnsembleSpec:
    """Base models, their weights, and the shared alignment machinery."""

    models: tuple[TokenPredictor, ...]
    weights: EnsembleWeights
    unified: UnifiedVocabulary
    alignment: AlignmentConfig = AlignmentConfig()

    def __post_init__(self):
        if len(self.models) != self.weights.n:
            raise ValueError(f"{len(self.models)} models but {self.weights.n} weights")
        if self.unified.n_models != len(self.models):
            raise ValueError("unified vocabulary was built for a different model count")
        for i, model in enumerate(self.models):
            if model.vocab != self.unified.source_vocabs[i]:
                raise ValueError(f"model {i}'s vocabulary is not the one registered in the union")

    @classmethod
    def from_models(
        cls,
        models: Sequence[TokenPredictor],
        weights: Sequence[float] | EnsembleWeights,
        top_k: int | str = "all",
    ) -> "EnsembleSpec":
        if not isinstance(weights, EnsembleWeights):
            weights = EnsembleWeights(weights)
        unified = build_unified([m.vocab for m in models])
        return cls(tuple(models), weights, unified, AlignmentConfig(top_k))

    @property
    def n(self) -> int:
        return len(self.models)

    def fresh_session(self) -> "EnsembleSpec":
        """Same parameters, fresh model caches."""
        return EnsembleSpec(
            tuple(m.fresh() for m in self.models), self.weights, self.unified, self.alignment
        )

    def with_weights(self, weights: EnsembleWeights) -> "EnsembleSpec":
        return EnsembleSpec(self.models, weights, self.unified, self.alignment)


class KvLedger:
    """Per-model record of how much of the sequence each cache has consumed.

    Besides the synchronized lengths it keeps each model's local-index mirror
    of the consumed tokens, so predictions and cache extensions can be made
    in each model's own vocabulary without rescanning the whole sequence.
    """

    def __init__(self, n_models: int):
        self._local: list[list[int]] = [[] for _ in range(n_models)]

    @property
    def synced_lengths(self) -> list[int]:
        return [len(toks) for toks in self._local]

    def synced_length(self, model_index: int) -> int:
        return len(self._local[model_index])

    def local_prefix(self, model_index: int) -> list[int]:
        return self._local[model_index]

    def record_synced(self, model_index: int, local_tokens: Sequence[int]) -> None:
        self._local[model_index].extend(local_tokens)


def lazy_sync(
    model_index: int, spec: EnsembleSpec, seq: TokenSequence, ledger: KvLedger
) -> WorkReceipt:
    """Prefill one model's cache with every token it has not yet consumed."""
    model = spec.models[model_index]
    start = ledger.synced_length(model_index)
    gap = seq[start:]
    local = [spec.unified.require_model_token(model_index, u) for u in gap]
    receipt = model.extend_cache(local, start=start)
    ledger.record_synced(model_index, local)
    return receipt


def _commit_emitted(
    model_index: int, spec: EnsembleSpec, token_u: int, ledger: KvLedger
) -> None:
    # The emitted token enters the cache of every model that decoded this
    # step at no prefill charge: the decode forward's cost covers feeding it.
    local = spec.unified.require_model_token(model_index, token_u)
    spec.models[model_index].commit_token(local)
    ledger.record_synced(model_index, [local])


def _aligned_prediction(
    model_index: int, spec: EnsembleSpec, ledger: KvLedger
) -> Distribution:
    raw = spec.models[model_index].predict(ledger.local_prefix(model_index))
    return align(raw, spec.unified, model_index, spec.alignment)


def averaged_step(
    spec: EnsembleSpec, seq: TokenSequence, ledger: KvLedger
) -> Distribution:
    """One step of the averaged ("ce") strategy: sync and evaluate every
    model, return the weighted average of the aligned distributions. Charges
    n decode forwards."""
    acc = np.zeros(len(spec.unified.vocab))
    for i in range(spec.n):
        lazy_sync(i, spec, seq, ledger)
        acc += spec.weights.lambdas[i] * _aligned_prediction(i, spec, ledger).probs
    return Distribution(spec.unified.vocab, acc)


def mixture_step(
    spec: EnsembleSpec, seq: TokenSequence, ledger: KvLedger, rng: SeededRng
) -> tuple[int, int]:
    """One step of the mixture-selection ("me") strategy.

    Samples a model index from the weights, syncs and evaluates only that
    model, and samples the next token from its aligned distribution. Exactly
    one decode forward is charged regardless of ensemble size. Returns
    (unified token index, selected model index).
    """
    token, selected = _selection_step(spec, seq, ledger, rng, greedy=False)
    return token, selected


def _selection_step(
    spec: EnsembleSpec, seq: TokenSequence, ledger: KvLedger, rng: SeededRng, greedy: bool
) -> tuple[int, int]:
    selected = sample_index(spec.weights, rng)
    lazy_sync(selected, spec, seq, ledger)
    aligned = _aligned_prediction(selected, spec, ledger)
    if greedy:
        token = int(np.argmax(aligned.probs))
    else:
        token = sample_token(aligned, rng)
    return token, selected


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for one generation session."""

    max_new_tokens: int
    seed: int
    strategy: str = "me"
    single_index: int = 0
    stop_tokens: frozenset[int] = frozenset()
    greedy: bool = False

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "me" and self.greedy:
            raise GreedyUnderMixture(
                "the mixture-selection strategy matches the averaged ensemble only "
                "under sampling; greedy decoding requires the averaged strategy"
            )


@dataclass(frozen=True)
class StepRecord:
    """One emitted token and the work done to produce it."""

    step: int
    strategy: str
    selected_model: int | str  # model index, or "all" for the averaged strategy
    token: int
    token_text: str
    decode_forwards: int
    prefill_tokens: int
    per_model: tuple[WorkReceipt, ...]


@dataclass
class GenerationTrace:
    """Everything a run emitted plus full per-step work accounting."""

    strategy: str
    n_models: int
    prompt_tokens: list[int]
    seed: int
    tokens: list[int] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    stop_reason: str = "incomplete"
    error: str | None = None

    @property
    def per_model_totals(self) -> list[WorkReceipt]:
        totals = [WorkReceipt() for _ in range(self.n_models)]
        for record in self.steps:
            totals = [t + r for t, r in zip(totals, record.per_model)]
        return totals

    @property
    def total_decode_forwards(self) -> int:
        return sum(r.decode_forwards for r in self.steps)

    @property
    def total_prefill_tokens(self) -> int:
        return sum(r.prefill_tokens for r in self.steps)

    def selections(self) -> list[int]:
        """Steps on which each model was the chosen emitter (0 for "all")."""
        counts = [0] * self.n_models
        for record in self.steps:
            if isinstance(record.selected_model, int):
                counts[record.selected_model] += 1
        return counts

    def jsonl_records(self) -> list[dict]:
        return [
            {
                "step": r.step,
                "strategy": r.strategy,
                "selected_model": r.selected_model,
                "token": r.token,
                "token_text": r.token_text,
                "decode_forwards": r.decode_forwards,
                "prefill_tokens": r.prefill_tokens,
            }
            for r in self.steps
        ]


def generate(
    spec: EnsembleSpec, prompt: Sequence[int], cfg: GenerationConfig
) -> GenerationTrace:
    """Run one generation session and return its trace.

    ``prompt`` is given as unified-vocabulary token indices and must be
    representable in every model's vocabulary (caches consume model-local
    tokens). The session is deterministic given the seed. On a predictor
    failure the partial trace is attached to the raised GenerationError.
    """
    for u in prompt:
        missing = [i for i in range(spec.n) if spec.unified.to_model(i, u) is None]
        if missing:
            raise UnrepresentablePrompt(
                f"prompt token {spec.unified.vocab.token(u)!r} is missing from model(s) {missing}"
            )

    run_spec = spec
    if cfg.strategy == "single":
        if not 0 <= cfg.single_index < spec.n:
            raise ValueError(f"single_index {cfg.single_index} out of range for {spec.n} models")
        # The single strategy is the mixture path under one-hot weights, so
        # its traces coincide with degenerate-weight mixture runs seed-for-seed.
        run_spec = spec.with_weights(EnsembleWeights.one_hot(cfg.single_index, spec.n))

    seq = TokenSequence(spec.unified.vocab, prompt)
    ledger = KvLedger(spec.n)
    rng = SeededRng(cfg.seed)
    trace = GenerationTrace(
        strategy=cfg.strategy, n_models=spec.n, prompt_tokens=list(prompt), seed=cfg.seed
    )

    for step in range(cfg.max_new_tokens):
        before = [m.session_receipt for m in run_spec.models]
        try:
            if cfg.strategy == "ce":
                dist = averaged_step(run_spec, seq, ledger)
                if cfg.greedy:
                    token = int(np.argmax(dist.probs))
                else:
                    token = sample_token(dist, rng)
                decoded = range(run_spec.n)
                selected: int | str = "all"
            else:
                token, chosen = _selection_step(run_spec, seq, ledger, rng, greedy=cfg.greedy)
                decoded = (chosen,)
                selected = chosen
            seq.append(token)
            for i in decoded:
                _commit_emitted(i, run_spec, token, ledger)
        except MixdecodeError as exc:
            trace.stop_reason = "error"
            trace.error = str(exc)
            raise GenerationError(str(exc), trace) from exc

        per_model = tuple(m.session_receipt - b for m, b in zip(run_spec.models, before))
        trace.tokens.append(token)
        trace.steps.append(
            StepRecord(
                step=step,
                strategy=cfg.strategy,
                selected_model=selected,
                token=token,
                token_text=spec.unified.vocab.token(token),
                decode_forwards=sum(r.decode_forwards for r in per_model),
                prefill_tokens=sum(r.prefill_tokens for r in per_model),
                per_model=per_model,
            )
        )
        if token in cfg.stop_tokens:
            trace.stop_reason = "stop_token"
            break
    else:
        trace.stop_reason = "max_new_tokens"
    return trace


@dataclass(frozen=True)
class LatencyModel:
    """Cost model for simulated wall-clock accounting.

    A decode forward costs ``decode_ms``. A prefill of m tokens costs
    ``prefill_chunk_ms`` per chunk of up to ``max_chunk`` tokens: consuming a
    backlog in one pass is memory-bandwidth bound and costs about one decode
    step per chunk, which is the whole efficiency argument for syncing caches
    lazily.
    """

    decode_ms: float = 10.0
    prefill_chunk_ms: float = 10.0
    max_chunk: int = 512

    def __post_init__(self):
        if self.decode_ms <= 0 or self.prefill_chunk_ms <= 0 or self.max_chunk < 1:
            raise ValueError("latency parameters must be positive")

    def prefill_cost(self, tokens: int) -> float:
        if tokens <= 0:
            return 0.0
        return self.prefill_chunk_ms * math.ceil(tokens / self.max_chunk)


@dataclass(frozen=True)
class SimulatedLatency:
    """Simulated timing for a trace plus the sequential-averaged baseline."""

    total_ms: float
    tokens_per_sec: float
    ce_baseline_ms: float
    speedup_vs_ce: float


def simulate_latency(trace: GenerationTrace, latency: LatencyModel) -> SimulatedLatency:
    """Price a trace under the cost model and compare it to sequential "ce".

    The baseline is the averaged strategy run sequentially over the same
    workload: n decode forwards per emitted token plus one prompt prefill per
    model.
    """
    total = 0.0
    for record in trace.steps:
        for receipt in record.per_model:
            total += receipt.decode_forwards * latency.decode_ms
            total += latency.prefill_cost(receipt.prefill_tokens)
    emitted = len(trace.tokens)
    baseline = trace.n_models * (
        emitted * latency.decode_ms + latency.prefill_cost(len(trace.prompt_tokens))
    )
    tokens_per_sec = emitted * 1000.0 / total if total > 0 else float("inf")
    return SimulatedLatency(
        total_ms=total,
        tokens_per_sec=tokens_per_sec,
        ce_baseline_ms=baseline,
        speedup_vs_ce=baseline / total if total > 0 else float("inf"),
    )


def write_trace_jsonl(trace: GenerationTrace, path: str | Path) -> None:
    """One JSON record per step, as emitted (deterministic byte-for-byte)."""
    lines = [json.dumps(record, separators=(",", ":")) for record in trace.jsonl_records()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def trace_summary(trace: GenerationTrace, latency: LatencyModel | None = None) -> dict:
    """Aggregate view of a trace, optionally priced by a latency model."""
    totals = trace.per_model_totals
    selections = trace.selections()
    summary = {
        "tokens": len(trace.tokens),
        "strategy": trace.strategy,
        "prompt_tokens": len(trace.prompt_tokens),
        "stop_reason": trace.stop_reason,
        "per_model": {
            str(i): {
                "decode_forwards": totals[i].decode_forwards,
                "prefill_tokens": totals[i].prefill_tokens,
                "selections": selections[i],
            }
            for i in range(trace.n_models)
        },
        "simulated": None,
    }
    if latency is not None:
        sim = simulate_latency(trace, latency)
        summary["simulated"] = {
            "decode_ms": latency.decode_ms,
            "total_ms": sim.total_ms,
            "tokens_per_sec": sim.tokens_per_sec,
            "speedup_vs_ce": sim.speedup_vs_ce,
        }
    return summary
