"""Corpus data model: manifest I/O, dataset splitting, and synthetic
audio/text corpus generation.

A corpus pairs spoken passages (each with a ground-truth transcript) with
queries that reference exactly one relevant passage. Synthetic corpora make
the audio a deterministic function of the transcript: every vocabulary word
owns a fixed 100 ms tone-plus-noise pattern, and a passage's waveform is the
concatenation of its words' patterns. Queries are dropout-perturbed copies
of the transcript, so lexical overlap ties each query to its one passage.

Corpus values are immutable after construction and safe to share across
threads read-only.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .dsp import AudioSignal, read_wav, write_wav

SYNTH_SAMPLE_RATE = 16000
WORD_SECONDS = 0.1

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class ManifestError(ValueError):
    """Malformed manifest content; message carries the offending line number."""


@dataclass(frozen=True)
class Passage:
    id: str
    transcript: str
    audio: AudioSignal | None = None
    audio_path: str | None = None


@dataclass(frozen=True)
class Query:
    text: str
    gold_answer: str
    relevant_passage_id: str


@dataclass(frozen=True)
class Corpus:
    passages: tuple[Passage, ...]
    queries: tuple[Query, ...]
    sample_rate: int = SYNTH_SAMPLE_RATE
    base_dir: str | None = None

    @cached_property
    def passages_by_id(self) -> dict[str, Passage]:
        return {p.id: p for p in self.passages}

    def passage(self, passage_id: str) -> Passage:
        return self.passages_by_id[passage_id]

    def load_audio(self, passage: Passage) -> AudioSignal:
        if passage.audio is not None:
            return passage.audio
        if passage.audio_path is None:
            raise ValueError(f"passage {passage.id} has neither audio nor a file reference")
        root = Path(self.base_dir) if self.base_dir else Path(".")
        signal = read_wav(root / passage.audio_path)
        if signal.sample_rate != self.sample_rate:
            raise ValueError(
                f"passage {passage.id}: sample rate {signal.sample_rate} does not "
                f"match corpus rate {self.sample_rate}"
            )
        return signal


def validate_corpus(corpus: Corpus) -> None:
    """Check every corpus invariant, raising ValueError on the first breach."""
    seen: set[str] = set()
    for p in corpus.passages:
        if p.id in seen:
            raise ValueError(f"duplicate passage id {p.id!r}")
        seen.add(p.id)
        if not p.transcript:
            raise ValueError(f"passage {p.id}: empty transcript")
        if p.audio is None and p.audio_path is None:
            raise ValueError(f"passage {p.id}: no audio and no file reference")
        if p.audio is not None:
            if p.audio.samples.size == 0:
                raise ValueError(f"passage {p.id}: zero-duration audio")
            if p.audio.sample_rate != corpus.sample_rate:
                raise ValueError(
                    f"passage {p.id}: sample rate {p.audio.sample_rate} does not "
                    f"match corpus rate {corpus.sample_rate}"
                )
    for q in corpus.queries:
        if q.relevant_passage_id not in seen:
            raise ValueError(
                f"query {q.text!r}: dangling relevant_passage_id {q.relevant_passage_id!r}"
            )


def corpus_words(corpus: Corpus) -> list[str]:
    """Sorted unique lowercase words across all transcripts and query texts."""
    from .encoder import words as split_words

    seen: set[str] = set()
    for p in corpus.passages:
        seen.update(split_words(p.transcript))
    for q in corpus.queries:
        seen.update(split_words(q.text))
    return sorted(seen)


# ---------------------------------------------------------------------------
# Manifest I/O (line-delimited JSON; see README for the record schema)
# ---------------------------------------------------------------------------


def load_manifest(path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    passages: list[Passage] = []
    queries: list[Query] = []
    sample_rate: int | None = None
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict) or "kind" not in record:
                raise ManifestError(f"line {lineno}: record has no 'kind' field")
            kind = record["kind"]
            if kind == "passage":
                passage, rate = _parse_passage(record, lineno, path.parent)
                if passage.id in seen_ids:
                    raise ManifestError(f"line {lineno}: duplicate passage id {passage.id!r}")
                seen_ids.add(passage.id)
                if sample_rate is None:
                    sample_rate = rate
                elif rate != sample_rate:
                    raise ManifestError(
                        f"line {lineno}: sample rate {rate} does not match "
                        f"corpus rate {sample_rate}"
                    )
                passages.append(passage)
            elif kind == "query":
                queries.append(_parse_query(record, lineno))
            else:
                raise ManifestError(f"line {lineno}: unknown record kind {kind!r}")
    corpus = Corpus(
        passages=tuple(passages),
        queries=tuple(queries),
        sample_rate=sample_rate if sample_rate is not None else SYNTH_SAMPLE_RATE,
        base_dir=str(path.parent),
    )
    validate_corpus(corpus)
    return corpus


def _parse_passage(record: dict, lineno: int, base_dir: Path) -> tuple[Passage, int]:
    for field in ("id", "audio", "transcript"):
        if field not in record:
            raise ManifestError(f"line {lineno}: passage record missing {field!r}")
    if not record["transcript"]:
        raise ManifestError(f"line {lineno}: passage {record['id']!r} has empty transcript")
    wav_path = base_dir / record["audio"]
    if not wav_path.exists():
        raise ManifestError(f"line {lineno}: audio file not found: {wav_path}")
    # Header-only read: samples stay lazy, but rate and duration are checked now.
    try:
        with wave.open(str(wav_path), "rb") as fh:
            rate = fh.getframerate()
            n_frames = fh.getnframes()
    except wave.Error as exc:
        raise ManifestError(f"line {lineno}: unreadable WAV {wav_path}: {exc}") from exc
    if n_frames == 0:
        raise ManifestError(f"line {lineno}: passage {record['id']!r} has zero-duration audio")
    passage = Passage(
        id=str(record["id"]),
        transcript=str(record["transcript"]),
        audio_path=str(record["audio"]),
    )
    return passage, rate


def _parse_query(record: dict, lineno: int) -> Query:
    for field in ("text", "answer", "passage_id"):
        if field not in record:
            raise ManifestError(f"line {lineno}: query record missing {field!r}")
    return Query(
        text=str(record["text"]),
        gold_answer=str(record["answer"]),
        relevant_passage_id=str(record["passage_id"]),
    )


def save_manifest(corpus: Corpus, path, audio_dirname: str = "audio") -> None:
    """Write a corpus as JSONL plus PCM16 WAV files.

    Passages already referencing files under the destination directory keep
    their references; in-memory audio is written to `<dir>/<audio_dirname>/`.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for p in corpus.passages:
        if p.audio_path is not None and corpus.base_dir == str(path.parent):
            rel = p.audio_path
        else:
            audio_dir = path.parent / audio_dirname
            audio_dir.mkdir(parents=True, exist_ok=True)
            rel = f"{audio_dirname}/{p.id}.wav"
            write_wav(path.parent / rel, corpus.load_audio(p))
        lines.append(
            json.dumps(
                {"kind": "passage", "id": p.id, "audio": rel, "transcript": p.transcript},
                ensure_ascii=False,
            )
        )
    for q in corpus.queries:
        lines.append(
            json.dumps(
                {
                    "kind": "query",
                    "text": q.text,
                    "answer": q.gold_answer,
                    "passage_id": q.relevant_passage_id,
                },
                ensure_ascii=False,
            )
        )
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def corpus_equal(a: Corpus, b: Corpus, audio_atol: float = 1.0 / 32768.0) -> bool:
    """Structural equality with an audio tolerance covering PCM quantization."""
    if a.sample_rate != b.sample_rate or len(a.passages) != len(b.passages):
        return False
    if [(q.text, q.gold_answer, q.relevant_passage_id) for q in a.queries] != [
        (q.text, q.gold_answer, q.relevant_passage_id) for q in b.queries
    ]:
        return False
    for pa, pb in zip(a.passages, b.passages):
        if pa.id != pb.id or pa.transcript != pb.transcript:
            return False
        sa, sb = a.load_audio(pa), b.load_audio(pb)
        if sa.samples.size != sb.samples.size:
            return False
        if sa.samples.size and float(np.max(np.abs(sa.samples - sb.samples))) > audio_atol:
            return False
    return True


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    # Default vocabulary is kept below the default training-split size: the
    # speech branch can only generalize to held-out passages when the
    # training passages pin down a per-word embedding dictionary, which
    # requires at least as many training passages as vocabulary words.
    n_passages: int = 64
    words_per_passage: tuple[int, int] = (20, 40)
    vocabulary_size: int = 48
    query_word_dropout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_passages < 1:
            raise ValueError("n_passages must be >= 1")
        lo, hi = self.words_per_passage
        if lo < 1 or hi < lo:
            raise ValueError(f"bad words_per_passage range {self.words_per_passage}")
        if self.vocabulary_size < 2:
            raise ValueError("vocabulary_size must be >= 2")
        if not 0.0 <= self.query_word_dropout < 1.0:
            raise ValueError("query_word_dropout must lie in [0, 1)")


def _make_vocabulary(size: int, rng: np.random.Generator) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    n = len(syllables)
    max_words = n**3
    if size > max_words:
        raise ValueError(f"vocabulary_size {size} exceeds {max_words} distinct words")
    codes = rng.choice(max_words, size=size, replace=False)
    words = []
    for code in codes:
        a, rem = divmod(int(code), n * n)
        b, c = divmod(rem, n)
        words.append(syllables[a] + syllables[b] + syllables[c])
    return words


def _word_waveform(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    """Fixed tone/noise signature for one vocabulary word: three random
    sinusoids plus a low noise floor, faded in and out to avoid clicks."""
    t = np.arange(n_samples) / sample_rate
    wave_sum = np.zeros(n_samples)
    freqs = rng.uniform(250.0, 6000.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    amps = rng.uniform(0.5, 1.0, size=3)
    amps = 0.4 * amps / amps.sum()
    for f, ph, a in zip(freqs, phases, amps):
        wave_sum += a * np.sin(2.0 * np.pi * f * t + ph)
    # Floor high enough that moderate added noise shifts log-mel energies
    # gradually instead of swamping near-silent bins all at once.
    wave_sum += 0.025 * rng.standard_normal(n_samples)
    fade = min(int(0.005 * sample_rate), n_samples // 4)
    if fade > 0:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(fade) / fade))
        wave_sum[:fade] *= ramp
        wave_sum[-fade:] *= ramp[::-1]
    return wave_sum


def synth_corpus(params: SynthParams) -> Corpus:
    """Deterministically generate a paired audio/text corpus.

    Each passage transcript is a sequence of random vocabulary words; its
    waveform concatenates the per-word codebook patterns. Each passage gets
    one query: the transcript with each word independently dropped with
    probability query_word_dropout, and a retained word as the gold answer.
    """
    rng_vocab = np.random.default_rng([params.seed, 0])
    rng_code = np.random.default_rng([params.seed, 1])
    rng_text = np.random.default_rng([params.seed, 2])
    rng_query = np.random.default_rng([params.seed, 3])

    vocabulary = _make_vocabulary(params.vocabulary_size, rng_vocab)
    word_samples = int(round(WORD_SECONDS * SYNTH_SAMPLE_RATE))
    codebook = {
        word: _word_waveform(rng_code, word_samples, SYNTH_SAMPLE_RATE) for word in vocabulary
    }

    lo, hi = params.words_per_passage
    passages: list[Passage] = []
    queries: list[Query] = []
    for i in range(params.n_passages):
        n_words = int(rng_text.integers(lo, hi + 1))
        word_ids = rng_text.integers(0, params.vocabulary_size, size=n_words)
        transcript_words = [vocabulary[w] for w in word_ids]
        samples = np.concatenate([codebook[w] for w in transcript_words])
        pid = f"p{i:04d}"
        passages.append(
            Passage(
                id=pid,
                transcript=" ".join(transcript_words),
                audio=AudioSignal(samples, SYNTH_SAMPLE_RATE),
            )
        )
        keep = rng_query.random(n_words) >= params.query_word_dropout
        if not keep.any():
            keep[int(rng_query.integers(n_words))] = True
        retained = [w for w, k in zip(transcript_words, keep) if k]
        gold = retained[int(rng_query.integers(len(retained)))]
        queries.append(Query(text=" ".join(retained), gold_answer=gold, relevant_passage_id=pid))

    corpus = Corpus(passages=tuple(passages), queries=tuple(queries))
    validate_corpus(corpus)
    return corpus


def split(
    corpus: Corpus, train_frac: float, val_frac: float, seed: int
) -> tuple[Corpus, Corpus, Corpus]:
    """Disjoint train/val/test partition of passages; queries follow their
    relevant passage. Deterministic for a fixed seed."""
    if not (0.0 < train_frac < 1.0 and 0.0 < val_frac < 1.0):
        raise ValueError("train_frac and val_frac must lie in (0, 1)")
    if train_frac + val_frac >= 1.0:
        raise ValueError("train_frac + val_frac must be < 1")
    n = len(corpus.passages)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    buckets = (
        sorted(perm[:n_train].tolist()),
        sorted(perm[n_train : n_train + n_val].tolist()),
        sorted(perm[n_train + n_val :].tolist()),
    )
    parts = []
    for indices in buckets:
        chosen = [corpus.passages[i] for i in indices]
        ids = {p.id for p in chosen}
        part_queries = tuple(q for q in corpus.queries if q.relevant_passage_id in ids)
        parts.append(
            replace(corpus, passages=tuple(chosen), queries=part_queries)
        )
    return parts[0], parts[1], parts[2]
