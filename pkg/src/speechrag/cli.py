"""Command-line entry point.

Subcommands cover the full experiment cycle: ``synth``, ``split``, ``train``,
``embed``, ``index``, ``search``, ``eval-retrieval``, ``noise-sweep``,
``corrupt``, ``eval-generation``, ``gradcheck``. A single JSON config file
(--config) drives everything; flags override config values. Every run writes
a metadata record (resolved config, config hash, seed, versions) so reports
are reproducible byte-for-byte from the same config and seed.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .corpus import corpus_words, load_manifest, save_manifest, split, synth_corpus
from .encoder import Vocab
from .index import build as build_index
from .index import load as load_index
from .index import load_embeddings, save, save_embeddings, search
from .ragpipe import (
    CorruptionConfig,
    HttpGenerator,
    HttpJudge,
    MockJudge,
    OracleGenerator,
    PipelineMode,
    corrupt_transcript,
    corpus_wer,
    eval_generation,
    passage_embeddings,
    retrieval_run,
    run_pipeline,
    wer,
)
from .training import build_model, grad_check, train

MODE_ALIASES = {
    "speech": PipelineMode.SPEECH_RAG,
    "gt_text": PipelineMode.GT_TEXT,
    "cascaded": PipelineMode.FULLY_CASCADED,
    "speech_rag": PipelineMode.SPEECH_RAG,
    "fully_cascaded": PipelineMode.FULLY_CASCADED,
    "semi_cascaded": PipelineMode.SEMI_CASCADED,
}

GRADCHECK_THRESHOLD = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_modes(value: str) -> list[PipelineMode]:
    modes = []
    for token in value.split(","):
        token = token.strip()
        if token not in MODE_ALIASES:
            raise ValueError(f"unknown mode {token!r} (choose from {sorted(MODE_ALIASES)})")
        modes.append(MODE_ALIASES[token])
    return modes


def _parse_floats(value: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in value.split(","))


def _parse_ints(value: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in value.split(","))


def _write_meta(config: RunConfig, command: str) -> None:
    meta = {
        "command": command,
        "config": config.resolved(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "versions": {
            "speechrag": __version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__,
        },
    }
    out = config.path(config.report_dir) / f"{command}.meta.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _corruption(config: RunConfig, corpus, target_wer: float | None = None) -> CorruptionConfig:
    target = config.target_wer if target_wer is None else target_wer
    sub, dele, ins = config.corruption_mix
    return CorruptionConfig(
        target_wer=target,
        vocabulary=tuple(corpus_words(corpus)),
        sub_weight=sub,
        del_weight=dele,
        ins_weight=ins,
        seed=config.seed,
    )


def _model_for(config: RunConfig, corpus, mode: PipelineMode):
    """Speech modes need the trained checkpoint; text-only modes fall back to
    a freshly built (frozen-backbone) model when no checkpoint exists yet."""
    ckpt_path = config.path(config.checkpoint_path)
    if ckpt_path.exists():
        return load_checkpoint(ckpt_path).model
    if mode in (PipelineMode.SPEECH_RAG, PipelineMode.SEMI_CASCADED):
        raise FileNotFoundError(f"mode {mode.value} requires a trained checkpoint at {ckpt_path}")
    vocab = Vocab.from_words(corpus_words(corpus))
    return build_model(
        vocab,
        hidden_dim=config.hidden_dim,
        encoder_dim=config.encoder_dim,
        encoder_layers=config.encoder_layers,
        backbone_layers=config.backbone_layers,
        downsample_factor=config.downsample_factor,
        feature_config=config.feature,
        seed=config.seed,
    )


def _generator_for(config: RunConfig, corpus, url: str | None):
    url = url or config.generator_url
    if url:
        return HttpGenerator(url, config.generator_timeout_s)
    return OracleGenerator(corpus)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(config: RunConfig, args) -> int:
    corpus = synth_corpus(config.synth)
    save_manifest(corpus, config.path(config.corpus_manifest))
    _write_meta(config, "synth")
    print(f"wrote {len(corpus.passages)} passages, {len(corpus.queries)} queries "
          f"to {config.path(config.corpus_manifest)}")
    return 0


def cmd_split(config: RunConfig, args) -> int:
    corpus = load_manifest(config.path(config.corpus_manifest))
    parts = split(corpus, config.train_frac, config.val_frac, config.seed)
    for part, template in zip(parts, (config.train_manifest, config.val_manifest, config.test_manifest)):
        save_manifest(part, config.path(template))
    _write_meta(config, "split")
    print("split sizes:", *(len(p.passages) for p in parts))
    return 0


def cmd_train(config: RunConfig, args) -> int:
    train_corpus = load_manifest(config.path(config.train_manifest))
    val_corpus = load_manifest(config.path(config.val_manifest))
    full_path = config.path(config.corpus_manifest)
    vocab_source = load_manifest(full_path) if full_path.exists() else None
    vocab = Vocab.from_words(
        corpus_words(vocab_source)
        if vocab_source
        else corpus_words(train_corpus) + corpus_words(val_corpus)
    )
    model = build_model(
        vocab,
        hidden_dim=config.hidden_dim,
        encoder_dim=config.encoder_dim,
        encoder_layers=config.encoder_layers,
        backbone_layers=config.backbone_layers,
        downsample_factor=config.downsample_factor,
        feature_config=config.feature,
        seed=config.train.seed,
    )
    log_path = config.path(config.train_log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    result = train(train_corpus, val_corpus, config.train, model=model, log_path=log_path)
    save_checkpoint(result.checkpoint, config.path(config.checkpoint_path))
    _write_meta(config, "train")
    last = result.history[-1]
    print(f"trained {last['epoch']} epochs; best epoch {result.checkpoint.epoch} "
          f"(val loss {result.checkpoint.best_val_loss:.6f}); "
          f"checkpoint at {config.path(config.checkpoint_path)}")
    return 0


def cmd_embed(config: RunConfig, args) -> int:
    mode = _parse_modes(args.mode)[0]
    corpus = load_manifest(config.path(args.manifest or config.corpus_manifest))
    model = _model_for(config, corpus, mode)
    corruption = (
        _corruption(config, corpus, args.target_wer)
        if mode is PipelineMode.FULLY_CASCADED
        else None
    )
    pairs, _ = passage_embeddings(corpus, mode, model, corruption=corruption, snr_db=args.snr_db)
    out = config.path(config.embeddings_path, mode=mode.value)
    save_embeddings(out, [pid for pid, _ in pairs], np.stack([emb for _, emb in pairs]))
    _write_meta(config, "embed")
    print(f"wrote {len(pairs)} embeddings to {out}")
    return 0


def cmd_index(config: RunConfig, args) -> int:
    mode = _parse_modes(args.mode)[0]
    ids, matrix = load_embeddings(config.path(config.embeddings_path, mode=mode.value))
    idx = build_index(zip(ids, matrix))
    out = config.path(config.index_path, mode=mode.value)
    save(idx, out)
    _write_meta(config, "index")
    print(f"indexed {len(idx)} vectors of dim {idx.dim} at {out}")
    return 0


def cmd_search(config: RunConfig, args) -> int:
    mode = _parse_modes(args.mode)[0]
    idx = load_index(config.path(config.index_path, mode=mode.value))
    corpus = load_manifest(config.path(args.manifest or config.corpus_manifest))
    model = _model_for(config, corpus, PipelineMode.GT_TEXT)
    result = search(idx, model.embed_text(args.query), args.k)
    for pid, score in result.ranking:
        print(json.dumps({"id": pid, "score": round(score, 6)}))
    _write_meta(config, "search")
    return 0


def cmd_eval_retrieval(config: RunConfig, args) -> int:
    corpus = load_manifest(config.path(args.manifest or config.corpus_manifest))
    modes = _parse_modes(args.mode)
    k_values = _parse_ints(args.k) if args.k else config.k_values
    header = ["mode", "passage_wer"] + [f"recall@{k}" for k in k_values]
    rows = []
    for mode in modes:
        model = _model_for(config, corpus, mode)
        corruption = (
            _corruption(config, corpus, args.target_wer)
            if mode is PipelineMode.FULLY_CASCADED
            else None
        )
        report = retrieval_run(
            corpus, mode, model, k_values=k_values, corruption=corruption, snr_db=args.snr_db
        )
        wer_cell = "" if report.passage_wer is None else f"{report.passage_wer:.4f}"
        rows.append([mode.value, wer_cell] + [f"{report.recalls[k]:.4f}" for k in k_values])
        _write_jsonl(
            config.path(config.report_dir) / f"retrieval_{mode.value}.jsonl", report.rows
        )
    out = config.path(config.report_dir) / "retrieval.csv"
    _write_csv(out, header, rows)
    _write_meta(config, "eval-retrieval")
    print(out)
    for row in rows:
        print(",".join(map(str, row)))
    return 0


def cmd_noise_sweep(config: RunConfig, args) -> int:
    corpus = load_manifest(config.path(args.manifest or config.corpus_manifest))
    snr_grid = _parse_floats(args.snr) if args.snr else config.snr_grid
    speech_model = _model_for(config, corpus, PipelineMode.SPEECH_RAG)
    corruption = _corruption(config, corpus, args.target_wer)
    # The corruptor is word-level, not audio-driven, so the cascaded row is a
    # noise-independent reference line at the configured WER.
    cascaded = retrieval_run(
        corpus, PipelineMode.FULLY_CASCADED, speech_model, k_values=(5,), corruption=corruption
    )
    rows = []
    for snr_db in snr_grid:
        speech = retrieval_run(
            corpus,
            PipelineMode.SPEECH_RAG,
            speech_model,
            k_values=(5,),
            snr_db=snr_db,
            noise_seed=config.seed,
        )
        rows.append([snr_db, "speech_rag", f"{speech.recalls[5]:.4f}"])
        rows.append([snr_db, "fully_cascaded", f"{cascaded.recalls[5]:.4f}"])
    out = config.path(config.report_dir) / "noise_sweep.csv"
    _write_csv(out, ["snr_db", "mode", "recall@5"], rows)
    _write_meta(config, "noise-sweep")
    print(out)
    return 0


def cmd_corrupt(config: RunConfig, args) -> int:
    corpus = load_manifest(config.path(args.manifest or config.corpus_manifest))
    corruption = _corruption(config, corpus, args.target_wer)
    rows = []
    for p in corpus.passages:
        corrupted = corrupt_transcript(p.transcript, corruption)
        rows.append(
            {
                "id": p.id,
                "transcript": p.transcript,
                "corrupted": corrupted,
                "wer": round(wer(p.transcript, corrupted), 6),
            }
        )
    achieved = corpus_wer((r["transcript"], r["corrupted"]) for r in rows)
    out = config.path(config.report_dir) / "corruption.jsonl"
    _write_jsonl(out, rows + [{"summary": True, "target_wer": corruption.target_wer,
                               "achieved_wer": round(achieved, 6)}])
    _write_meta(config, "corrupt")
    print(f"target {corruption.target_wer} achieved {achieved:.4f} -> {out}")
    return 0


def cmd_eval_generation(config: RunConfig, args) -> int:
    corpus = load_manifest(config.path(args.manifest or config.corpus_manifest))
    mode = _parse_modes(args.mode)[0]
    model = _model_for(config, corpus, mode)
    corruption = (
        _corruption(config, corpus, args.target_wer)
        if mode is PipelineMode.FULLY_CASCADED
        else None
    )
    generator = _generator_for(config, corpus, args.generator_url)
    traces = run_pipeline(
        corpus,
        mode,
        model,
        k=args.top_k_context or config.top_k_context,
        generator=generator,
        corruption=corruption,
        instruction=config.instruction_template,
        concurrency=config.generator_concurrency,
    )
    judge = (
        HttpJudge(config.generator_url, config.generator_timeout_s)
        if config.judge == "external" and config.generator_url
        else MockJudge()
    )
    report = eval_generation(traces, judge=judge)
    _write_jsonl(
        config.path(config.report_dir) / f"traces_{mode.value}.jsonl",
        [
            {
                "query_key": t.query_key,
                "query": t.query,
                "gold_answer": t.gold_answer,
                "relevant_id": t.relevant_id,
                "retrieved_ids": t.retrieved_ids,
                "contexts": list(t.contexts),
                "answer": t.answer,
                "error": t.error,
            }
            for t in traces
        ],
    )
    out = config.path(config.report_dir) / f"generation_{mode.value}.csv"
    _write_csv(
        out,
        ["mode", "exact_match", "llm_correctness", "generator_errors", "judge_errors"],
        [[mode.value, f"{report.em_mean:.4f}", f"{report.correctness_mean:.4f}",
          report.generator_errors, report.judge_errors]],
    )
    _write_jsonl(config.path(config.report_dir) / f"generation_{mode.value}_rows.jsonl", report.rows)
    _write_meta(config, "eval-generation")
    print(f"{mode.value}: EM {report.em_mean:.4f} correctness {report.correctness_mean:.4f} -> {out}")
    return 0


def cmd_gradcheck(config: RunConfig, args) -> int:
    from .corpus import SynthParams
    from .dsp import logmel
    from .encoder import embed_text

    probe_corpus = synth_corpus(
        SynthParams(n_passages=4, vocabulary_size=24, seed=config.seed)
    )
    vocab = Vocab.from_words(corpus_words(probe_corpus))
    # Probe at a healthy projection scale: the training init is nearly zero,
    # where finite differences measure curvature rather than gradient error.
    model = build_model(
        vocab,
        hidden_dim=config.hidden_dim,
        encoder_dim=config.encoder_dim,
        encoder_layers=config.encoder_layers,
        backbone_layers=config.backbone_layers,
        downsample_factor=config.downsample_factor,
        feature_config=config.feature,
        seed=config.seed,
        dtype=np.float64,
        proj_std=0.1,
    )
    items = []
    for p in probe_corpus.passages[:2]:
        feats = logmel(probe_corpus.load_audio(p), model.feature_config).data
        target = embed_text(p.transcript, model.vocab, model.backbone)
        items.append((feats, target))
    err = grad_check(model, items, probe_count=args.probes, eps=args.eps, seed=config.seed)
    _write_meta(config, "gradcheck")
    passed = err <= GRADCHECK_THRESHOLD
    print(f"max relative error: {err:.3e} (threshold {GRADCHECK_THRESHOLD:g}) "
          f"-> {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 2


# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="path to JSON config")
    sub.add_argument("--seed", type=int, help="override the global seed")
    sub.add_argument("--data-dir", dest="data_dir", help="override the data root")


def build_parser() -> _Parser:
    parser = _Parser(prog="speechrag", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    for name in ("synth", "split", "train"):
        sub = subs.add_parser(name)
        _add_common(sub)

    for name in ("embed", "index", "search", "eval-retrieval", "noise-sweep",
                 "corrupt", "eval-generation", "gradcheck"):
        sub = subs.add_parser(name)
        _add_common(sub)
        if name in ("embed", "index", "search", "eval-retrieval", "eval-generation"):
            sub.add_argument("--mode", default="speech",
                             help="pipeline mode: speech|gt_text|cascaded (comma list for eval-retrieval)")
        if name in ("embed", "search", "eval-retrieval", "noise-sweep", "corrupt", "eval-generation"):
            sub.add_argument("--manifest", help="manifest to evaluate (defaults to the corpus manifest)")
            sub.add_argument("--target-wer", dest="target_wer", type=float,
                             help="corruption target WER for cascaded mode")
        if name in ("embed", "eval-retrieval"):
            sub.add_argument("--snr-db", dest="snr_db", type=float,
                             help="add Gaussian noise to passage audio at this SNR")
        if name == "search":
            sub.add_argument("--query", required=True)
            sub.add_argument("--k", type=int, default=5)
        if name == "eval-retrieval":
            sub.add_argument("--k", help="comma list of recall cutoffs, e.g. 5,10,100")
        if name == "noise-sweep":
            sub.add_argument("--snr", "--snr-db", dest="snr",
                             help="comma list of SNR values in dB")
        if name == "eval-generation":
            sub.add_argument("--top-k-context", dest="top_k_context", type=int,
                             help="number of retrieved contexts per query")
            sub.add_argument("--generator-url", dest="generator_url",
                             help="external generator endpoint")
        if name == "gradcheck":
            sub.add_argument("--probes", type=int, default=5,
                             help="random scalar probes per tensor")
            sub.add_argument("--eps", type=float, default=1e-4,
                             help="central-difference step")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "embed": cmd_embed,
    "index": cmd_index,
    "search": cmd_search,
    "eval-retrieval": cmd_eval_retrieval,
    "noise-sweep": cmd_noise_sweep,
    "corrupt": cmd_corrupt,
    "eval-generation": cmd_eval_generation,
    "gradcheck": cmd_gradcheck,
}


def _join_negative_values(argv: list[str]) -> list[str]:
    """Fold values like ``--snr -5,0,10`` into ``--snr=-5,0,10`` so argparse
    does not mistake leading-minus values for option names."""
    out = []
    skip = False
    for i, token in enumerate(argv):
        if skip:
            skip = False
            continue
        if token in ("--snr", "--snr-db", "--target-wer") and i + 1 < len(argv):
            out.append(f"{token}={argv[i + 1]}")
            skip = True
        else:
            out.append(token)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = {"seed": args.seed, "data_dir": args.data_dir}
        config = load_config(args.config, overrides)
        return COMMANDS[args.command](config, args)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
