"""Command-line harness: train, generate, equivalence, decompose, bench.

Configuration is one JSON document, fully validated (unknown keys rejected)
before any model is loaded. All machine-readable output is JSON or JSON
lines, deterministic byte-for-byte for a fixed config and seed.

Exit codes: 0 success, 1 runtime failure, 2 configuration problem,
3 mathematical precondition violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Distribution, EnsembleWeights, MixdecodeError, Vocabulary
from .decoding import (
    EnsembleSpec,
    GenerationConfig,
    GenerationError,
    GreedyUnderMixture,
    LatencyModel,
    UnrepresentablePrompt,
    generate,
    trace_summary,
    write_trace_jsonl,
)
from .equivalence import (
    DEFAULT_P_VALUE_FLOOR,
    DEFAULT_TV_THRESHOLD,
    run_equivalence,
)
from .mixture import ContainmentViolated, LambdaOutOfRange, decompose
from .predictors import (
    EmptyCorpus,
    NGramModel,
    OrderTooLargeForCorpus,
    RemotePredictor,
    TableModel,
    TokenPredictor,
    load_ngram,
    read_corpus,
    save_ngram,
    tokenize,
    train_ngram,
    vocab_from_tokens,
)

MIN_EQUIVALENCE_SAMPLES = 10_000


class ConfigError(MixdecodeError):
    """The run configuration is malformed or inconsistent."""


def _check_keys(payload: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


def _require(payload: Mapping, key: str, where: str):
    if key not in payload:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return payload[key]


def _parse_top_k(value) -> int | str:
    if value == "all":
        return "all"
    try:
        k = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"top_k must be a positive integer or 'all', got {value!r}") from None
    if k < 1:
        raise ConfigError(f"top_k must be >= 1, got {k}")
    return k


def build_predictor(desc: Mapping, base_dir: Path) -> TokenPredictor:
    """Instantiate one model from its config descriptor."""
    if not isinstance(desc, Mapping):
        raise ConfigError("model descriptor must be an object")
    kind = _require(desc, "kind", "model descriptor")
    if kind == "table":
        _check_keys(desc, {"kind", "vocab", "default", "order", "entries"}, "table model")
        vocab = Vocabulary(_require(desc, "vocab", "table model"))
        order = int(desc.get("order", 0))
        entries = {}
        for row in desc.get("entries", []):
            _check_keys(row, {"context", "probs"}, "table entry")
            ctx = tuple(vocab.index_of(t) for t in _require(row, "context", "table entry"))
            entries[ctx] = _require(row, "probs", "table entry")
        return TableModel(vocab, _require(desc, "default", "table model"), entries, order)
    if kind == "ngram":
        _check_keys(desc, {"kind", "path"}, "ngram model")
        return load_ngram(base_dir / _require(desc, "path", "ngram model"))
    if kind == "remote":
        _check_keys(
            desc,
            {"kind", "endpoint", "model", "vocab", "timeout_ms", "top_logprobs", "auth_env", "joiner"},
            "remote model",
        )
        return RemotePredictor(
            Vocabulary(_require(desc, "vocab", "remote model")),
            _require(desc, "endpoint", "remote model"),
            _require(desc, "model", "remote model"),
            timeout_ms=int(desc.get("timeout_ms", 10_000)),
            top_logprobs=int(desc.get("top_logprobs", 5)),
            auth_env=desc.get("auth_env"),
            joiner=desc.get("joiner", ""),
        )
    raise ConfigError(f"unknown model kind {kind!r} (expected table, ngram, or remote)")


def _load_config(path: str) -> tuple[dict, Path]:
    config_path = Path(path)
    payload = json.loads(config_path.read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    return payload, config_path.parent


_GENERATE_KEYS = {
    "models", "weights", "strategy", "single_index", "top_k", "seed",
    "max_new_tokens", "prompt", "tokenization", "stop_tokens", "greedy", "latency",
}
_BENCH_KEYS = {
    "models", "weights", "top_k", "seed", "max_new_tokens", "prompt",
    "tokenization", "stop_tokens", "latency",
}
_EQUIVALENCE_KEYS = {
    "models", "weights", "top_k", "seed", "tokenization", "samples", "prefixes",
    "tv_threshold", "p_value_floor", "workers", "lambda_grid",
}
_LATENCY_KEYS = {"decode_ms", "prefill_chunk_ms", "max_chunk"}


def _build_spec(
    payload: Mapping,
    base_dir: Path,
    top_k_flag: str | None,
    weights_override: Sequence[float] | None = None,
) -> EnsembleSpec:
    models = [build_predictor(d, base_dir) for d in _require(payload, "models", "config")]
    if not models:
        raise ConfigError("config names no models")
    weights = payload.get("weights") if weights_override is None else list(weights_override)
    if weights is None:
        raise ConfigError("missing required key 'weights' in config")
    top_k = _parse_top_k(top_k_flag if top_k_flag is not None else payload.get("top_k", "all"))
    try:
        return EnsembleSpec.from_models(models, weights, top_k)
    except (ValueError, MixdecodeError) as exc:
        raise ConfigError(str(exc)) from exc


def _latency_from(payload: Mapping) -> LatencyModel:
    section = payload.get("latency", {})
    _check_keys(section, _LATENCY_KEYS, "latency")
    try:
        return LatencyModel(
            decode_ms=float(section.get("decode_ms", 10.0)),
            prefill_chunk_ms=float(section.get("prefill_chunk_ms", 10.0)),
            max_chunk=int(section.get("max_chunk", 512)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _encode_prompt(payload: Mapping, spec: EnsembleSpec) -> list[int]:
    text = payload.get("prompt", "")
    mode = payload.get("tokenization", "char")
    try:
        tokens = tokenize(text, mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    indices = []
    for tok in tokens:
        if tok not in spec.unified.vocab:
            raise ConfigError(f"prompt token {tok!r} is not in the unified vocabulary")
        indices.append(spec.unified.vocab.index_of(tok))
    return indices


def _encode_stop_tokens(payload: Mapping, spec: EnsembleSpec) -> frozenset[int]:
    stops = payload.get("stop_tokens", [])
    out = set()
    for tok in stops:
        if tok not in spec.unified.vocab:
            raise ConfigError(f"stop token {tok!r} is not in the unified vocabulary")
        out.add(spec.unified.vocab.index_of(tok))
    return frozenset(out)


def _seed_from(payload: Mapping, args) -> int:
    seed = args.seed if args.seed is not None else payload.get("seed", 0)
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    return seed


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    corpus = read_corpus(args.corpus, args.tokenization)
    vocab = vocab_from_tokens(corpus)
    model = train_ngram(corpus, args.order, args.alpha, vocab)
    save_ngram(model, args.out)
    print(f"trained order-{args.order} model over {len(vocab)} tokens -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    payload, base_dir = _load_config(args.config)
    _check_keys(payload, _GENERATE_KEYS, "generate config")
    weights_override = [float(x) for x in args.lam.split(",")] if args.lam else None
    spec = _build_spec(payload, base_dir, args.top_k, weights_override)
    latency = _latency_from(payload)
    strategy = args.strategy if args.strategy is not None else payload.get("strategy", "me")
    try:
        cfg = GenerationConfig(
            max_new_tokens=int(_require(payload, "max_new_tokens", "generate config")),
            seed=_seed_from(payload, args),
            strategy=strategy,
            single_index=int(payload.get("single_index", 0)),
            stop_tokens=_encode_stop_tokens(payload, spec),
            greedy=bool(payload.get("greedy", False)),
        )
    except (ValueError, GreedyUnderMixture) as exc:
        raise ConfigError(str(exc)) from exc
    prompt = _encode_prompt(payload, spec)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        trace = generate(spec, prompt, cfg)
    except GenerationError as exc:
        write_trace_jsonl(exc.trace, out_dir / "trace.jsonl")
        _write_json(out_dir / "summary.json", trace_summary(exc.trace, latency) | {"error": str(exc)})
        print(f"generation failed after {len(exc.trace.tokens)} tokens: {exc}", file=sys.stderr)
        return 1
    write_trace_jsonl(trace, out_dir / "trace.jsonl")
    _write_json(out_dir / "summary.json", trace_summary(trace, latency))
    print(f"emitted {len(trace.tokens)} tokens ({trace.stop_reason}) -> {out_dir}")
    return 0


def _equivalence_prefixes(payload: Mapping, base_dir: Path, spec: EnsembleSpec) -> list[list[int]]:
    section = payload.get("prefixes", [""])
    if isinstance(section, Mapping):
        _check_keys(section, {"path"}, "prefixes")
        lines = (base_dir / _require(section, "path", "prefixes")).read_text(encoding="utf-8").splitlines()
        texts = [line for line in lines if line]
    else:
        texts = list(section)
    mode = payload.get("tokenization", "char")
    out = []
    for text in texts:
        indices = []
        for tok in tokenize(text, mode):
            if tok not in spec.unified.vocab:
                raise ConfigError(f"prefix token {tok!r} is not in the unified vocabulary")
            indices.append(spec.unified.vocab.index_of(tok))
        out.append(indices)
    if not out:
        out = [[]]
    return out


def cmd_equivalence(args) -> int:
    payload, base_dir = _load_config(args.config)
    _check_keys(payload, _EQUIVALENCE_KEYS, "equivalence config")
    # For equivalence, --lambda is a sweep grid, not a weight-vector override.
    spec = _build_spec(payload, base_dir, args.top_k)
    n_samples = int(args.samples if args.samples is not None else payload.get("samples", 200_000))
    if n_samples < MIN_EQUIVALENCE_SAMPLES:
        raise ConfigError(f"samples must be >= {MIN_EQUIVALENCE_SAMPLES}, got {n_samples}")
    seed = _seed_from(payload, args)
    tv_threshold = float(payload.get("tv_threshold", DEFAULT_TV_THRESHOLD))
    p_value_floor = float(payload.get("p_value_floor", DEFAULT_P_VALUE_FLOOR))
    workers = int(payload.get("workers", 4))
    prefixes = _equivalence_prefixes(payload, base_dir, spec)

    grid = payload.get("lambda_grid")
    if args.lam:
        grid = [float(x) for x in args.lam.split(",")]
    if grid is not None and spec.n != 2:
        raise ConfigError("a lambda grid sweeps the first model's weight and needs exactly 2 models")

    weight_vectors = (
        [spec.weights.lambdas.tolist()] if grid is None else [[x, 1.0 - x] for x in grid]
    )
    runs = []
    all_passed = True
    for lambdas in weight_vectors:
        swept = spec.with_weights(EnsembleWeights(lambdas))
        report = run_equivalence(
            swept, prefixes, n_samples, seed,
            workers=workers, tv_threshold=tv_threshold, p_value_floor=p_value_floor,
        )
        all_passed &= report.all_passed
        verdict = "PASS" if report.all_passed else "FAIL"
        worst_tv = max(r.tv for r in report.results)
        print(f"{verdict} lambda={lambdas} worst_tv={worst_tv:.5f} prefixes={len(report.results)}")
        runs.append(
            {
                "lambdas": lambdas,
                "all_passed": report.all_passed,
                "results": [
                    {
                        "prefix": r.prefix,
                        "n_samples": r.n_samples,
                        "tv": r.tv,
                        "chi2_stat": r.chi2_stat,
                        "dof": r.dof,
                        "p_value": r.p_value,
                        "passed": r.passed,
                    }
                    for r in report.results
                ],
            }
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(
        out_dir / "equivalence.json",
        {
            "tv_threshold": tv_threshold,
            "p_value_floor": p_value_floor,
            "samples": n_samples,
            "seed": seed,
            "all_passed": all_passed,
            "runs": runs,
        },
    )
    print(("PASS" if all_passed else "FAIL") + f" overall -> {out_dir / 'equivalence.json'}")
    return 0


def _as_equivalence_args(args):
    # Equivalence interprets --lambda as a sweep grid, not a weight vector.
    class _Wrapper(_EquivalenceArgsMarker):
        top_k = args.top_k
        lam = None

    return _Wrapper()


def _load_vector(path: str | Path) -> list[float]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, list):
        raise ConfigError(f"{path} must hold a JSON array of probabilities")
    return [float(x) for x in payload]


def cmd_decompose(args) -> int:
    combined_probs = _load_vector(args.combined)
    base_probs = _load_vector(args.base)
    if len(combined_probs) != len(base_probs):
        raise ConfigError("combined and base vectors must have the same length")
    if args.lam is None:
        raise ConfigError("--lambda is required for decompose")
    lam = float(args.lam)
    vocab = Vocabulary([str(i) for i in range(len(combined_probs))])
    combined = Distribution(vocab, combined_probs)
    base = Distribution(vocab, base_probs)
    decomposition = decompose(combined, base, lam)
    print(
        json.dumps(
            {
                "lambda": decomposition.lam,
                "residual": decomposition.residual.probs.tolist(),
                "base": base_probs,
                "combined": combined_probs,
            },
            indent=2,
        )
    )
    return 0


def cmd_bench(args) -> int:
    payload, base_dir = _load_config(args.config)
    _check_keys(payload, _BENCH_KEYS, "bench config")
    latency = _latency_from(payload)
    seed = _seed_from(payload, args)
    max_new_tokens = int(_require(payload, "max_new_tokens", "bench config"))

    summaries = {}
    for strategy in ("me", "ce"):
        spec = _build_spec(payload, base_dir, args)  # fresh models per run
        prompt = _encode_prompt(payload, spec)
        cfg = GenerationConfig(
            max_new_tokens=max_new_tokens,
            seed=seed,
            strategy=strategy,
            stop_tokens=_encode_stop_tokens(payload, spec),
        )
        trace = generate(spec, prompt, cfg)
        summaries[strategy] = trace_summary(trace, latency)

    me_speed = summaries["me"]["simulated"]["tokens_per_sec"]
    ce_speed = summaries["ce"]["simulated"]["tokens_per_sec"]
    report = {
        "me": summaries["me"],
        "ce": summaries["ce"],
        "tokens_per_sec_ratio_me_vs_ce": me_speed / ce_speed,
    }
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "bench.json", report)
    print(
        f"me {me_speed:.2f} tok/s vs ce {ce_speed:.2f} tok/s "
        f"(ratio {me_speed / ce_speed:.2f}x) -> {out_dir / 'bench.json'}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixdecode",
        description="Ensemble decoding harness: averaged and mixture-selection strategies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train an n-gram model from a text corpus")
    train.add_argument("--corpus", required=True, help="UTF-8 text file")
    train.add_argument("--order", type=int, required=True)
    train.add_argument("--alpha", type=float, default=0.0)
    train.add_argument("--tokenization", choices=("char", "word"), default="char")
    train.add_argument("--out", required=True, help="output model JSON path")

    def common(p: argparse.ArgumentParser, with_strategy: bool = False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--top-k", dest="top_k", default=None, help="n or 'all'")
        p.add_argument("--lambda", dest="lam", default=None, help="comma-separated values")
        p.add_argument("--out", default=".", help="output directory")
        if with_strategy:
            p.add_argument("--strategy", choices=("single", "ce", "me"), default=None)

    gen = sub.add_parser("generate", help="run one generation session")
    common(gen, with_strategy=True)

    eq = sub.add_parser("equivalence", help="statistically compare the two strategies")
    common(eq)
    eq.add_argument("--samples", type=int, default=None)

    dec = sub.add_parser("decompose", help="split a combined distribution into a mixture")
    dec.add_argument("combined", help="JSON array of probabilities")
    dec.add_argument("base", help="JSON array of probabilities")
    dec.add_argument("--lambda", dest="lam", default=None, help="mixing weight in (0, 1)")

    bench = sub.add_parser("bench", help="work-law and simulated-latency comparison")
    common(bench)

    return parser


_DISPATCH = {
    "train": cmd_train,
    "generate": cmd_generate,
    "equivalence": cmd_equivalence,
    "decompose": cmd_decompose,
    "bench": cmd_bench,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ContainmentViolated as exc:
        print(
            json.dumps(
                {
                    "error": "containment_violated",
                    "index": exc.index,
                    "combined_prob": exc.combined_prob,
                    "required": exc.required,
                },
                indent=2,
            ),
            file=sys.stderr,
        )
        return 3
    except (
        ConfigError,
        LambdaOutOfRange,
        GreedyUnderMixture,
        UnrepresentablePrompt,
        EmptyCorpus,
        OrderTooLargeForCorpus,
        FileNotFoundError,
        json.JSONDecodeError,
        ValueError,
    ) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MixdecodeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
