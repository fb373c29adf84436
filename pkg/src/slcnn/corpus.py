"""Dataset ingestion and text preprocessing.

Turns labeled raw documents into fixed-shape token grids plus per-corpus
statistics.  The pipeline order is fixed: join fields -> strip HTML /
decode entities -> split sentences -> per-sentence lowercase + punctuation
strip -> word tokenize.  Sentence terminators must survive cleaning so the
splitter can see them, which is why punctuation is only dropped at the
word-tokenization step.
"""

from __future__ import annotations

import csv
import html
import json
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Distinguished pad marker.  tokenize_words can never produce it (tokens
# are lowercase and contain no angle brackets), so it cannot collide with
# real vocabulary.  It always maps to the all-zeros embedding vector.
PAD_TOKEN = "<pad>"

# Grid file magic, see write_grid_file / read_grid_file.
GRID_MAGIC = b"SLCG"
GRID_VERSION = 1


class DatasetFormatError(Exception):
    """Raised for unreadable dataset files or, in strict mode, bad rows."""


class EmptyCorpusError(Exception):
    """Raised when an operation requires at least one document/sentence."""


@dataclass
class RawDocument:
    """One labeled document as stored: 0-based label plus ordered text fields."""

    label: int
    fields: list[str]

    def text(self) -> str:
        """Joined document text; a title-like field becomes its own sentence."""
        parts = [f.strip() for f in self.fields if f.strip()]
        if not parts:
            return ""
        # Terminate every non-final field so it splits off as a sentence.
        head = [p if p.endswith((".", "!", "?")) else p + "." for p in parts[:-1]]
        return " ".join(head + parts[-1:])


@dataclass
class TokenGrid:
    """A document cropped/padded to exactly doc_len x sent_len tokens.

    Padding always forms suffixes: within a row after the real words, and
    whole all-pad rows only after the real sentences.
    """

    sentences: list[list[str]]
    real_sentence_count: int
    real_word_counts: list[int]

    @property
    def doc_len(self) -> int:
        return len(self.sentences)

    @property
    def sent_len(self) -> int:
        return len(self.sentences[0]) if self.sentences else 0


@dataclass
class CorpusStats:
    num_documents: int
    num_sentences: int
    pct_cropped_sentences: float
    pct_cropped_documents: float
    pct_docs_with_cropped_sentences: float
    max_sentences_per_doc: int
    max_words_per_sentence: int
    vocab_size: int
    mean_sentences_per_doc: float
    stddev_sentences_per_doc: float
    t_d: int


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------

def load_dataset(
    path: str | Path,
    schema: Sequence[str] | None = None,
    *,
    strict: bool = False,
    errors: list[tuple[int, str]] | None = None,
) -> Iterator[RawDocument]:
    """Stream RawDocuments from a CSV or JSONL dataset file.

    CSV rows follow the common benchmark layout: first field is a 1-based
    class index, remaining fields are text (e.g. title, body).  JSONL rows
    are ``{"label": int, "text": str}`` with the same 1-based labels.
    Class indices are shifted to 0-based.  Literal ``\\n`` escapes inside
    fields become spaces.

    Malformed rows are skipped with a warning (collected into *errors* as
    ``(line_number, message)`` when given); ``strict=True`` aborts instead.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(f"dataset file not found: {path}")

    def bad_row(line_no: int, message: str) -> None:
        if strict:
            raise DatasetFormatError(f"{path}:{line_no}: {message}")
        if errors is not None:
            errors.append((line_no, message))
        log.warning("%s:%d: %s (row skipped)", path, line_no, message)

    if path.suffix.lower() in (".jsonl", ".ndjson"):
        yield from _load_jsonl(path, bad_row)
    else:
        yield from _load_csv(path, schema, bad_row)


def _decode_field(text: str) -> str:
    return text.replace("\\n", " ")


def _load_csv(path: Path, schema, bad_row) -> Iterator[RawDocument]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        for row in reader:
            line_no = reader.line_num
            if not row:
                continue
            if len(row) < 2:
                bad_row(line_no, f"expected >= 2 fields, got {len(row)}")
                continue
            if schema is not None and len(row) != len(schema) + 1:
                bad_row(line_no, f"expected {len(schema) + 1} fields, got {len(row)}")
                continue
            try:
                stored = int(row[0])
            except ValueError:
                bad_row(line_no, f"class index {row[0]!r} is not an integer")
                continue
            if stored < 1:
                bad_row(line_no, f"class index {stored} is not positive")
                continue
            fields = [_decode_field(f) for f in row[1:]]
            if not any(f.strip() for f in fields):
                bad_row(line_no, "document text is empty")
                continue
            yield RawDocument(label=stored - 1, fields=fields)


def _load_jsonl(path: Path, bad_row) -> Iterator[RawDocument]:
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                stored = obj["label"]
                text = obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                bad_row(line_no, f"bad JSON row: {exc}")
                continue
            if not isinstance(stored, int) or stored < 1:
                bad_row(line_no, f"class index {stored!r} is not a positive integer")
                continue
            if not isinstance(text, str) or not text.strip():
                bad_row(line_no, "document text is empty")
                continue
            yield RawDocument(label=stored - 1, fields=[_decode_field(text)])


# --------------------------------------------------------------------------
# Cleaning / splitting / tokenizing
# --------------------------------------------------------------------------

_TAG_RE = re.compile(r"<[^<>]*>")
_WS_RE = re.compile(r"\s+")


def clean_text(raw: str) -> str:
    """Strip HTML tags, decode entities, and collapse whitespace.

    Sentence-final punctuation is preserved for the sentence splitter.
    Iterates to a fixed point so that entity-encoded markup (``&lt;b&gt;``)
    is removed too and the function is idempotent.
    """
    text = raw
    for _ in range(10):
        out = _TAG_RE.sub(" ", text)
        out = html.unescape(out)
        out = _WS_RE.sub(" ", out).strip()
        if out == text:
            return out
        text = out
    return text


# Words whose trailing period does not end a sentence.
_ABBREVIATIONS = frozenset(
    ["mr", "mrs", "dr", "st", "vs", "etc", "e.g", "i.e", "no", "inc", "ltd", "co", "u.s"]
)
_SENT_BOUNDARY_RE = re.compile(r"[.!?]+(?=\s+[A-Z0-9])")


def split_sentences(text: str) -> list[str]:
    """Split cleaned text into sentences.

    A run of ``.!?`` followed by whitespace and an uppercase letter or
    digit ends a sentence, unless the preceding word is a known
    abbreviation.  Concatenating the sentences with single spaces
    reconstructs the (cleaned) input; empty sentences never appear.
    """
    sentences: list[str] = []
    start = 0
    for match in _SENT_BOUNDARY_RE.finditer(text):
        end = match.end()
        prev_word = text[start : match.start()].rsplit(None, 1)[-1:]
        if prev_word and prev_word[0].lower() in _ABBREVIATIONS:
            continue
        chunk = text[start:end].strip()
        if chunk:
            sentences.append(chunk)
        start = end
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


# A word is letters/digits, optionally chained by apostrophes or hyphens
# ("it's", "state-of-the-art").  Anything else is punctuation and dropped.
_WORD_RE = re.compile(r"[^\W_]+(?:['’-][^\W_]+)*")


def tokenize_words(sentence: str) -> list[str]:
    """Lowercase a sentence and return its word tokens in order."""
    return _WORD_RE.findall(sentence.lower())


def preprocess_document(doc: RawDocument) -> list[list[str]]:
    """Full per-document pipeline: joined text to per-sentence token lists.

    Sentences that tokenize to nothing (pure punctuation) are dropped so
    grids never contain interior all-pad rows.
    """
    cleaned = clean_text(doc.text())
    token_lists = [tokenize_words(s) for s in split_sentences(cleaned)]
    return [tokens for tokens in token_lists if tokens]


# --------------------------------------------------------------------------
# Thresholds and grids
# --------------------------------------------------------------------------

def compute_doc_threshold(sentence_counts: Sequence[int]) -> int:
    """Sentences-per-document threshold: ceil(mean + 1.5 * population stddev).

    Values within 1e-9 of an integer are snapped to it before the ceiling
    to keep floating-point dust from causing an off-by-one.
    """
    if len(sentence_counts) == 0:
        raise EmptyCorpusError("cannot compute document threshold of an empty corpus")
    mu = float(np.mean(sentence_counts))
    sigma = float(np.std(sentence_counts))  # population stddev
    value = mu + 1.5 * sigma
    nearest = round(value)
    if abs(value - nearest) <= 1e-9:
        return max(1, int(nearest))
    return max(1, math.ceil(value))


def crop_pad(doc: list[list[str]], doc_len: int, sent_len: int) -> TokenGrid:
    """Crop/pad per-sentence token lists to a fixed doc_len x sent_len grid.

    Keeps the first *doc_len* sentences and the first *sent_len* tokens of
    each; shorter dimensions are filled with PAD_TOKEN.
    """
    if doc_len < 1 or sent_len < 1:
        raise ValueError("grid dimensions must be >= 1")
    kept = doc[:doc_len]
    rows: list[list[str]] = []
    word_counts: list[int] = []
    for sent in kept:
        words = sent[:sent_len]
        word_counts.append(len(words))
        rows.append(words + [PAD_TOKEN] * (sent_len - len(words)))
    while len(rows) < doc_len:
        rows.append([PAD_TOKEN] * sent_len)
        word_counts.append(0)
    return TokenGrid(
        sentences=rows,
        real_sentence_count=len(kept),
        real_word_counts=word_counts,
    )


def corpus_stats(dataset: Iterable[RawDocument], sent_len: int) -> CorpusStats:
    """Single-pass corpus statistics over preprocessed documents.

    Crop percentages use strict inequalities: a sentence is cropped when it
    has more than *sent_len* words and a document when it has more than the
    derived threshold sentences.
    """
    num_docs = 0
    num_sentences = 0
    cropped_sentences = 0
    docs_with_cropped_sentences = 0
    max_sents = 0
    max_words = 0
    vocab: set[str] = set()
    # Histogram of sentences-per-document; enough to recover mean/stddev and
    # the exact cropped-document count once the threshold is known.
    sent_count_hist: Counter[int] = Counter()

    for doc in dataset:
        token_lists = preprocess_document(doc)
        num_docs += 1
        n_sents = len(token_lists)
        sent_count_hist[n_sents] += 1
        num_sentences += n_sents
        max_sents = max(max_sents, n_sents)
        doc_has_cropped = False
        for tokens in token_lists:
            n_words = len(tokens)
            max_words = max(max_words, n_words)
            if n_words > sent_len:
                cropped_sentences += 1
                doc_has_cropped = True
            vocab.update(tokens)
        if doc_has_cropped:
            docs_with_cropped_sentences += 1

    if num_docs == 0:
        raise EmptyCorpusError("corpus_stats requires at least one document")

    counts = np.array(sorted(sent_count_hist.elements()), dtype=np.int64)
    mu = float(np.mean(counts))
    sigma = float(np.std(counts))
    t_d = compute_doc_threshold(counts)
    cropped_docs = sum(n for c, n in sent_count_hist.items() if c > t_d)

    return CorpusStats(
        num_documents=num_docs,
        num_sentences=num_sentences,
        pct_cropped_sentences=100.0 * cropped_sentences / max(1, num_sentences),
        pct_cropped_documents=100.0 * cropped_docs / num_docs,
        pct_docs_with_cropped_sentences=100.0 * docs_with_cropped_sentences / num_docs,
        max_sentences_per_doc=max_sents,
        max_words_per_sentence=max_words,
        vocab_size=len(vocab),
        mean_sentences_per_doc=mu,
        stddev_sentences_per_doc=sigma,
        t_d=t_d,
    )


# --------------------------------------------------------------------------
# Grid datasets and their binary file format
# --------------------------------------------------------------------------

@dataclass
class GridDataset:
    """Token grids in id form: 0 is the pad id, token i of *vocab* has id i+1."""

    doc_len: int
    sent_len: int
    vocab: list[str]
    labels: np.ndarray  # (N,) int64
    grids: np.ndarray  # (N, doc_len, sent_len) int32
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.index = {tok: i + 1 for i, tok in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.labels)


def build_grid_dataset(
    docs: Iterable[RawDocument], doc_len: int, sent_len: int
) -> GridDataset:
    """Preprocess, crop/pad and id-encode a dataset; vocab is first-seen order."""
    return build_grid_dataset_from_token_docs(
        ((doc.label, preprocess_document(doc)) for doc in docs), doc_len, sent_len
    )


def build_grid_dataset_from_token_docs(
    token_docs: Iterable[tuple[int, list[list[str]]]], doc_len: int, sent_len: int
) -> GridDataset:
    """Crop/pad and id-encode already-preprocessed (label, sentences) pairs."""
    vocab: dict[str, int] = {}
    labels: list[int] = []
    grid_rows: list[np.ndarray] = []
    for label, token_lists in token_docs:
        grid = crop_pad(token_lists, doc_len, sent_len)
        ids = np.zeros((doc_len, sent_len), dtype=np.int32)
        for i, row in enumerate(grid.sentences):
            for j, tok in enumerate(row):
                if tok == PAD_TOKEN:
                    break
                token_id = vocab.get(tok)
                if token_id is None:
                    token_id = len(vocab) + 1
                    vocab[tok] = token_id
                ids[i, j] = token_id
        labels.append(label)
        grid_rows.append(ids)
    if not labels:
        raise EmptyCorpusError("cannot build a grid dataset from zero documents")
    return GridDataset(
        doc_len=doc_len,
        sent_len=sent_len,
        vocab=list(vocab),
        labels=np.array(labels, dtype=np.int64),
        grids=np.stack(grid_rows),
    )


class GridFileError(Exception):
    """Raised for corrupt or incompatible grid files."""


def write_grid_file(dataset: GridDataset, path: str | Path) -> None:
    """Write a GridDataset as a packed binary file.

    Layout (all integers little-endian): magic ``SLCG``, version byte,
    u32 doc_len / sent_len / num_docs, u32 vocab size followed by
    (u16 byte length, UTF-8 bytes) per token, then per document a u32
    label and doc_len*sent_len u32 token ids in row-major order.
    """
    with Path(path).open("wb") as out:
        out.write(GRID_MAGIC)
        out.write(struct.pack("<B", GRID_VERSION))
        out.write(struct.pack("<III", dataset.doc_len, dataset.sent_len, len(dataset)))
        out.write(struct.pack("<I", len(dataset.vocab)))
        for token in dataset.vocab:
            raw = token.encode("utf-8")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
        for label, grid in zip(dataset.labels, dataset.grids):
            out.write(struct.pack("<I", int(label)))
            out.write(grid.astype("<u4").tobytes())


def read_grid_file(path: str | Path) -> GridDataset:
    """Read a file written by write_grid_file; validates magic and version."""
    data = Path(path).read_bytes()
    view = memoryview(data)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise GridFileError(f"truncated grid file: {path}")
        chunk, view = view[:n], view[n:]
        return chunk

    if bytes(take(4)) != GRID_MAGIC:
        raise GridFileError(f"not a grid file (bad magic): {path}")
    (version,) = struct.unpack("<B", take(1))
    if version != GRID_VERSION:
        raise GridFileError(f"unsupported grid file version {version}: {path}")
    doc_len, sent_len, num_docs = struct.unpack("<III", take(12))
    (vocab_size,) = struct.unpack("<I", take(4))
    vocab: list[str] = []
    for _ in range(vocab_size):
        (length,) = struct.unpack("<H", take(2))
        vocab.append(bytes(take(length)).decode("utf-8"))
    labels = np.empty(num_docs, dtype=np.int64)
    grids = np.empty((num_docs, doc_len, sent_len), dtype=np.int32)
    cells = doc_len * sent_len
    for d in range(num_docs):
        (labels[d],) = struct.unpack("<I", take(4))
        grids[d] = np.frombuffer(take(4 * cells), dtype="<u4").reshape(doc_len, sent_len)
    if len(view):
        raise GridFileError(f"trailing bytes after last document: {path}")
    return GridDataset(
        doc_len=doc_len, sent_len=sent_len, vocab=vocab, labels=labels, grids=grids
    )
