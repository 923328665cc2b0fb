"""Retrieval-augmented generation pipelines and their evaluation metrics.

Four pipeline shapes share one retrieval core:

* ``speech_rag``: speech retrieval, audio references as generator context.
* ``semi_cascaded``: speech retrieval, ground-truth transcripts as context.
* ``fully_cascaded``: text retrieval over corrupted transcripts (the stand-in
  for an ASR front end), corrupted transcripts as context.
* ``gt_text``: text retrieval over ground-truth transcripts; the upper-bound
  reference.

Real ASR is replaced by a calibrated word-level corruptor: the quantity under
study is the transcript WER level, and the corruptor controls it exactly.
Generators are pluggable; the built-in OracleGenerator answers correctly iff
the relevant passage was retrieved, which makes LLM-free end-to-end checks
possible. An HTTP generator client speaks the JSON wire protocol documented
in the README so a real (speech) language model endpoint can be attached.
"""

from __future__ import annotations

import hashlib
import json
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .corpus import Corpus, Passage
from .dsp import add_noise_snr
from .encoder import RetrieverModel, words
from .index import SearchResult, build as build_index, recall_at_k, search

DEFAULT_INSTRUCTION = "Answer the question using the numbered contexts."
JUDGE_INSTRUCTION = (
    "You are grading an answer. Contexts hold the candidate answer and the "
    "reference answer. Reply with 1 if the candidate conveys the reference, "
    "otherwise reply with 0."
)


class PipelineMode(str, Enum):
    SPEECH_RAG = "speech_rag"
    FULLY_CASCADED = "fully_cascaded"
    SEMI_CASCADED = "semi_cascaded"
    GT_TEXT = "gt_text"


# ---------------------------------------------------------------------------
# Word error rate
# ---------------------------------------------------------------------------


def _levenshtein(ref: list[str], hyp: list[str]) -> int:
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (r != h),
            )
        previous = current
    return previous[len(hyp)]


def wer(reference: str, hypothesis: str) -> float:
    """Word-level Levenshtein distance (unit costs) over reference length.
    Tokenization matches the retrieval tokenizer, so case and punctuation
    differences never count as errors."""
    ref = words(reference)
    if not ref:
        raise ValueError(f"reference {reference!r} is empty after tokenization")
    return _levenshtein(ref, words(hypothesis)) / len(ref)


def corpus_wer(pairs) -> float:
    """Micro-averaged WER: total edits over total reference words."""
    edits = 0
    total = 0
    for reference, hypothesis in pairs:
        ref = words(reference)
        if not ref:
            raise ValueError(f"reference {reference!r} is empty after tokenization")
        edits += _levenshtein(ref, words(hypothesis))
        total += len(ref)
    if total == 0:
        raise ValueError("no reference words")
    return edits / total


# ---------------------------------------------------------------------------
# WER-targeted transcript corruption
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionConfig:
    target_wer: float
    vocabulary: tuple[str, ...]
    sub_weight: float = 0.6
    del_weight: float = 0.2
    ins_weight: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_wer < 1.0:
            raise ValueError("target_wer must lie in [0, 1)")
        total = self.sub_weight + self.del_weight + self.ins_weight
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"operation mix weights must sum to 1, got {total}")


def _text_rng(seed: int, text: str) -> np.random.Generator:
    # Independent stream per text: sharing one stream across passages would
    # corrupt the same positions everywhere and wreck corpus-level calibration.
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def corrupt_transcript(text: str, cfg: CorruptionConfig) -> str:
    """Corrupt each word independently with probability target_wer, drawing
    the operation (substitute / delete / insert-after) from the configured
    mix. Deterministic per (seed, text)."""
    if not text:
        raise ValueError("cannot corrupt empty text")
    rng = _text_rng(cfg.seed, text)
    out: list[str] = []
    for word in words(text):
        if rng.random() >= cfg.target_wer:
            out.append(word)
            continue
        draw = rng.random()
        if draw < cfg.sub_weight:
            out.append(_random_other_word(rng, cfg.vocabulary, word))
        elif draw < cfg.sub_weight + cfg.del_weight:
            continue
        else:
            out.append(word)
            out.append(_random_word(rng, cfg.vocabulary))
    return " ".join(out)


def _random_word(rng: np.random.Generator, vocabulary, *_) -> str:
    if not vocabulary:
        raise ValueError("empty vocabulary but an insertion was selected")
    return vocabulary[int(rng.integers(len(vocabulary)))]


def _random_other_word(rng: np.random.Generator, vocabulary, word: str) -> str:
    if not vocabulary:
        raise ValueError("empty vocabulary but a substitution was selected")
    if all(w == word for w in vocabulary):
        raise ValueError(f"vocabulary offers no substitute for {word!r}")
    while True:
        candidate = vocabulary[int(rng.integers(len(vocabulary)))]
        if candidate != word:
            return candidate


# ---------------------------------------------------------------------------
# Generation wire protocol and generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationRequest:
    query: str
    contexts: tuple[str, ...]
    instruction: str = DEFAULT_INSTRUCTION

    def __post_init__(self):
        if not self.query:
            raise ValueError("query must be non-empty")

    def to_json(self) -> str:
        return json.dumps(
            {
                "query": self.query,
                "contexts": list(self.contexts),
                "instruction": self.instruction,
            }
        )


@dataclass(frozen=True)
class GenerationResponse:
    answer: str


class GeneratorError(RuntimeError):
    pass


def assemble_prompt(query: str, contexts, instruction: str = DEFAULT_INSTRUCTION) -> str:
    """Deterministic prompt: instruction, enumerated contexts in retrieval
    rank order, then the question."""
    contexts = list(contexts)
    if not contexts:
        raise ValueError("contexts must be non-empty")
    blocks = [instruction]
    blocks.extend(f"[{i}] {ctx}" for i, ctx in enumerate(contexts, start=1))
    blocks.append(f"Question: {query}")
    return "\n".join(blocks)


def audio_reference(passage: Passage) -> str:
    return passage.audio_path if passage.audio_path is not None else f"audio:{passage.id}"


class OracleGenerator:
    """Returns the gold answer iff the relevant passage is among the request
    contexts (matched by ground-truth transcript or audio reference), else an
    empty string. Makes end-to-end runs LLM-free: EM then equals the hit rate
    of the retriever at the context depth."""

    def __init__(self, corpus: Corpus):
        self._by_query: dict[str, tuple[str, set[str]]] = {}
        for q in corpus.queries:
            passage = corpus.passage(q.relevant_passage_id)
            keys = {passage.transcript, audio_reference(passage)}
            self._by_query[q.text] = (q.gold_answer, keys)

    def __call__(self, request: GenerationRequest) -> GenerationResponse:
        entry = self._by_query.get(request.query)
        if entry is None:
            return GenerationResponse(answer="")
        gold, keys = entry
        hit = any(ctx in keys for ctx in request.contexts)
        return GenerationResponse(answer=gold if hit else "")


class HttpGenerator:
    """POSTs the JSON request body to an external generator endpoint."""

    def __init__(self, url: str, timeout_s: float = 30.0):
        self.url = url
        self.timeout_s = timeout_s

    def __call__(self, request: GenerationRequest) -> GenerationResponse:
        req = urllib.request.Request(
            self.url,
            data=request.to_json().encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise GeneratorError(f"generator call to {self.url} failed: {exc}") from exc
        if "answer" not in payload:
            raise GeneratorError(f"generator response missing 'answer': {payload!r}")
        return GenerationResponse(answer=str(payload["answer"]))


# ---------------------------------------------------------------------------
# Answer-quality metrics
# ---------------------------------------------------------------------------


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(words(text))


def exact_match(answer: str, gold: str) -> int:
    """1 iff the normalized gold answer is a substring of the normalized
    generated answer."""
    gold_norm = normalize_answer(gold)
    if not gold_norm:
        raise ValueError(f"gold answer {gold!r} is empty after normalization")
    return int(gold_norm in normalize_answer(answer))


def token_f1(answer: str, gold: str) -> float:
    """Token-multiset F1 between normalized answer and gold."""
    from collections import Counter

    a, g = Counter(words(answer)), Counter(words(gold))
    overlap = sum((a & g).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(a.values())
    recall = overlap / sum(g.values())
    return 2 * precision * recall / (precision + recall)


class MockJudge:
    """Deterministic stand-in for an LLM judge: exact match, or token-level
    F1 at or above the threshold. Its agreement with any real judge is
    untested and not claimed."""

    def __init__(self, f1_threshold: float = 0.8):
        self.f1_threshold = f1_threshold

    def __call__(self, query: str, answer: str, gold: str) -> int:
        if exact_match(answer, gold):
            return 1
        return int(token_f1(answer, gold) >= self.f1_threshold)


class HttpJudge:
    """LLM-judge client over the generator wire protocol with a fixed
    judging instruction."""

    def __init__(self, url: str, timeout_s: float = 30.0):
        self._generator = HttpGenerator(url, timeout_s)

    def __call__(self, query: str, answer: str, gold: str) -> int:
        request = GenerationRequest(
            query=query,
            contexts=(f"Candidate answer: {answer}", f"Reference answer: {gold}"),
            instruction=JUDGE_INSTRUCTION,
        )
        verdict = self._generator(request).answer.strip().lower()
        return int(verdict.startswith(("1", "yes", "correct")))


def judge_correctness(query: str, answer: str, gold: str, judge=None) -> int:
    judge = judge or MockJudge()
    return judge(query, answer, gold)


# ---------------------------------------------------------------------------
# Pipeline execution
# ---------------------------------------------------------------------------


def _noise_seed_for(noise_seed: int, passage_id: str) -> int:
    digest = hashlib.sha256(f"{noise_seed}:{passage_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def passage_embeddings(
    corpus: Corpus,
    mode: PipelineMode,
    model: RetrieverModel,
    corruption: CorruptionConfig | None = None,
    snr_db: float | None = None,
    noise_seed: int = 0,
) -> tuple[list[tuple[str, np.ndarray]], dict[str, str]]:
    """Embed every passage under the given mode's representation and return
    (id, embedding) pairs plus the context string each passage contributes
    to generation prompts."""
    pairs: list[tuple[str, np.ndarray]] = []
    contexts: dict[str, str] = {}
    for p in corpus.passages:
        if mode in (PipelineMode.SPEECH_RAG, PipelineMode.SEMI_CASCADED):
            signal = corpus.load_audio(p)
            if snr_db is not None:
                signal = add_noise_snr(signal, snr_db, _noise_seed_for(noise_seed, p.id))
            emb = model.embed_speech(signal)
            contexts[p.id] = (
                audio_reference(p) if mode is PipelineMode.SPEECH_RAG else p.transcript
            )
        elif mode is PipelineMode.FULLY_CASCADED:
            if corruption is None:
                raise ValueError("fully_cascaded mode requires a CorruptionConfig")
            corrupted = corrupt_transcript(p.transcript, corruption)
            emb = model.embed_text(corrupted) if words(corrupted) else _zero_fallback(model)
            contexts[p.id] = corrupted
        elif mode is PipelineMode.GT_TEXT:
            emb = model.embed_text(p.transcript)
            contexts[p.id] = p.transcript
        else:
            raise ValueError(f"unhandled mode {mode}")
        pairs.append((p.id, emb))
    return pairs, contexts


def _zero_fallback(model: RetrieverModel) -> np.ndarray:
    # A fully deleted transcript still needs an indexable vector; an all-equal
    # tiny vector keeps build() happy while ranking last against real queries.
    dim = model.backbone.hidden_dim
    return np.full(dim, 1e-6, dtype=np.float32)


@dataclass(frozen=True)
class Trace:
    query_key: str
    query: str
    gold_answer: str
    relevant_id: str
    retrieved: tuple[tuple[str, float], ...]
    contexts: tuple[str, ...]
    answer: str = ""
    error: str | None = None

    @property
    def retrieved_ids(self) -> list[str]:
        return [pid for pid, _ in self.retrieved]


def run_pipeline(
    corpus: Corpus,
    mode: PipelineMode,
    model: RetrieverModel,
    k: int = 5,
    generator=None,
    corruption: CorruptionConfig | None = None,
    snr_db: float | None = None,
    noise_seed: int = 0,
    instruction: str = DEFAULT_INSTRUCTION,
    concurrency: int = 1,
) -> list[Trace]:
    """Retrieve top-k for every query, build per-mode contexts, call the
    generator, and record one trace per query. Generator failures are
    recorded on the trace and the run continues."""
    generator = generator if generator is not None else OracleGenerator(corpus)
    pairs, context_by_id = passage_embeddings(
        corpus, mode, model, corruption=corruption, snr_db=snr_db, noise_seed=noise_seed
    )
    idx = build_index(pairs)

    prepared: list[tuple[str, "Query", SearchResult, tuple[str, ...]]] = []
    for qi, q in enumerate(corpus.queries):
        result = search(idx, model.embed_text(q.text), k)
        contexts = tuple(context_by_id[pid] for pid, _ in result.ranking)
        prepared.append((f"q{qi:04d}", q, result, contexts))

    def generate(entry) -> Trace:
        key, q, result, contexts = entry
        try:
            response = generator(
                GenerationRequest(query=q.text, contexts=contexts, instruction=instruction)
            )
            answer, error = response.answer, None
        except Exception as exc:  # recorded per query; the run continues
            answer, error = "", f"{type(exc).__name__}: {exc}"
        return Trace(
            query_key=key,
            query=q.text,
            gold_answer=q.gold_answer,
            relevant_id=q.relevant_passage_id,
            retrieved=result.ranking,
            contexts=contexts,
            answer=answer,
            error=error,
        )

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            return list(pool.map(generate, prepared))
    return [generate(entry) for entry in prepared]


@dataclass
class RetrievalReport:
    mode: str
    recalls: dict[int, float]
    rows: list[dict] = field(default_factory=list)
    passage_wer: float | None = None


def retrieval_run(
    corpus: Corpus,
    mode: PipelineMode,
    model: RetrieverModel,
    k_values=(5, 10, 100),
    corruption: CorruptionConfig | None = None,
    snr_db: float | None = None,
    noise_seed: int = 0,
) -> RetrievalReport:
    """Embed passages for the mode, run every query, and report Recall@k for
    each requested k plus one ranked row per query."""
    k_values = sorted(k_values)
    pairs, contexts = passage_embeddings(
        corpus, mode, model, corruption=corruption, snr_db=snr_db, noise_seed=noise_seed
    )
    idx = build_index(pairs)
    results: dict[str, SearchResult] = {}
    qrels: dict[str, str] = {}
    rows: list[dict] = []
    max_k = max(k_values)
    for qi, q in enumerate(corpus.queries):
        key = f"q{qi:04d}"
        result = search(idx, model.embed_text(q.text), max_k)
        results[key] = result
        qrels[key] = q.relevant_passage_id
        rows.append(
            {
                "query_key": key,
                "query": q.text,
                "relevant_id": q.relevant_passage_id,
                "ranked_ids": result.ids,
                "scores": [round(score, 6) for _, score in result.ranking],
                "relevant_rank": result.rank_of(q.relevant_passage_id),
            }
        )
    recalls = {k: recall_at_k(results, qrels, k) for k in k_values}
    passage_wer = None
    if mode is PipelineMode.FULLY_CASCADED:
        passage_wer = corpus_wer((p.transcript, contexts[p.id]) for p in corpus.passages)
    elif mode is PipelineMode.GT_TEXT:
        passage_wer = 0.0
    return RetrievalReport(mode=mode.value, recalls=recalls, rows=rows, passage_wer=passage_wer)


@dataclass
class GenerationReport:
    em_mean: float
    correctness_mean: float
    rows: list[dict]
    generator_errors: int = 0
    judge_errors: int = 0


def eval_generation(traces: list[Trace], judge=None) -> GenerationReport:
    """Score traces with Exact Match and judge correctness. Judge failures
    are excluded from the correctness mean and counted."""
    judge = judge or MockJudge()
    rows: list[dict] = []
    em_total = 0
    correct_total = 0
    judged = 0
    generator_errors = 0
    judge_errors = 0
    for trace in traces:
        em = exact_match(trace.answer, trace.gold_answer)
        em_total += em
        if trace.error is not None:
            generator_errors += 1
        correct: int | None
        try:
            correct = judge(trace.query, trace.answer, trace.gold_answer)
            correct_total += correct
            judged += 1
        except Exception as exc:
            correct = None
            judge_errors += 1
            rows.append(_generation_row(trace, em, correct, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(_generation_row(trace, em, correct, None))
    return GenerationReport(
        em_mean=em_total / len(traces) if traces else 0.0,
        correctness_mean=correct_total / judged if judged else 0.0,
        rows=rows,
        generator_errors=generator_errors,
        judge_errors=judge_errors,
    )


def _generation_row(trace: Trace, em: int, correct: int | None, judge_error: str | None) -> dict:
    return {
        "query_key": trace.query_key,
        "query": trace.query,
        "gold_answer": trace.gold_answer,
        "answer": trace.answer,
        "exact_match": em,
        "correct": correct,
        "retrieved_ids": trace.retrieved_ids,
        "relevant_id": trace.relevant_id,
        "generator_error": trace.error,
        "judge_error": judge_error,
    }
