"""Tokenization, vocabulary construction, and batch assembly.

Word-level tokenization lowercases and emits marker tokens for
surface features that would otherwise be destroyed: ``xxup`` before a
fully-uppercase word, ``xxrep n c`` before a word whose character run of
length n was collapsed to the single character c, and ``xxwrep n`` before
a word that appeared n >= 3 times consecutively. Marker emission is
deterministic and (per word) verified reversible at encode time; words
whose collapse would be ambiguous are left untouched.

Batch assembly covers both training regimes: contiguous-stream batches
for LM training (targets shifted one step within each column) and
front-padded fixed-length chunk stacks for classifier fine-tuning.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

PAD, UNK, BOS, EOS = "xxpad", "xxunk", "xxbos", "xxeos"
UP, REP, WREP = "xxup", "xxrep", "xxwrep"
RESERVED = (PAD, UNK, BOS, EOS, UP, REP, WREP)

_MARKER_LIKE = re.compile(r"^(x*)(xx)(pad|unk|bos|eos|up|rep|wrep)$")
_RUN = re.compile(r"(.)\1{2,}")


class TextError(Exception):
    """Raised for malformed corpora or batching preconditions."""


def _escape(word: str) -> str:
    # literal marker lookalikes get one extra leading x; decode strips it
    return "x" + word if _MARKER_LIKE.match(word) else word


def _unescape(token: str) -> str:
    m = _MARKER_LIKE.match(token)
    return token[1:] if m and m.group(1) else token


def _collapse_runs(word: str) -> tuple[list[tuple[int, str]], str]:
    """Collapse every character run of length >= 3 to one character."""
    runs: list[tuple[int, str]] = []
    out: list[str] = []
    i = 0
    while i < len(word):
        j = i
        while j < len(word) and word[j] == word[i]:
            j += 1
        n = j - i
        if n >= 3:
            runs.append((n, word[i]))
            out.append(word[i])
        else:
            out.append(word[i:j])
        i = j
    return runs, "".join(out)


def _expand_runs(runs: Sequence[tuple[int, str]], word: str) -> str:
    """Re-expand collapsed runs, leftmost occurrence of each run char first."""
    for n, ch in runs:
        m = re.search(re.escape(ch) + r"+", word)
        if m is None:
            return word  # undecodable; leave as-is
        word = word[:m.start()] + ch * n + word[m.end():]
    return word


def _encode_word(word: str) -> list[str]:
    tokens: list[str] = []
    if word.isupper():
        tokens.append(UP)
        word = word.lower()
    else:
        word = word.lower()
    runs, collapsed = _collapse_runs(word)
    if runs and _expand_runs(runs, collapsed) == word:
        for n, ch in runs:
            tokens.extend((REP, str(n), ch))
        tokens.append(_escape(collapsed))
    else:
        tokens.append(_escape(word))
    return tokens


def tokenize(text: str, mode: str = "word") -> list[str]:
    """Split text into tokens; word mode lowercases and emits markers."""
    if mode == "char":
        return list(text)
    if mode != "word":
        raise TextError(f"unknown tokenize mode {mode!r}")
    words = text.split()
    tokens: list[str] = []
    i = 0
    while i < len(words):
        j = i
        while j < len(words) and words[j] == words[i]:
            j += 1
        n = j - i
        if n >= 3:
            tokens.extend((WREP, str(n)))
            tokens.extend(_encode_word(words[i]))
        else:
            for k in range(i, j):
                tokens.extend(_encode_word(words[k]))
        i = j
    return tokens


def detokenize(tokens: Sequence[str], mode: str = "word") -> str:
    """Invert :func:`tokenize`; word mode rejoins with single spaces."""
    if mode == "char":
        return "".join(tokens)
    words: list[str] = []
    i = 0
    n_tokens = len(tokens)

    def parse_word_unit(i: int) -> tuple[str, int]:
        upper = False
        runs: list[tuple[int, str]] = []
        while i < n_tokens:
            t = tokens[i]
            if t == UP:
                upper = True
                i += 1
            elif t == REP and i + 2 < n_tokens:
                runs.append((int(tokens[i + 1]), tokens[i + 2]))
                i += 3
            else:
                break
        if i >= n_tokens:
            return "", i
        word = _unescape(tokens[i])
        word = _expand_runs(runs, word)
        if upper:
            word = word.upper()
        return word, i + 1

    while i < n_tokens:
        if tokens[i] == WREP and i + 1 < n_tokens:
            count = int(tokens[i + 1])
            word, i = parse_word_unit(i + 2)
            words.extend([word] * count)
        else:
            word, i = parse_word_unit(i)
            if word:
                words.append(word)
    return " ".join(words)


class Vocab:
    """Bijective token<->id map with reserved ids 0..6 for the specials."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise TextError("vocab must start with the reserved tokens")
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise TextError("vocab contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.unk_id
        get = self.token_to_id.get
        return np.fromiter((get(t, unk) for t in tokens), dtype=np.int32,
                           count=len(tokens))

    def decode(self, ids: Sequence[int]) -> list[str]:
        table = self.id_to_token
        return [table[int(i)] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int,
                min_freq: int = 1) -> Vocab:
    """Keep the most frequent tokens; ties break lexicographically."""
    if max_size < len(RESERVED):
        raise TextError(f"max_size must be >= {len(RESERVED)} reserved tokens")
    counts: dict[str, int] = {}
    for seq in corpus:
        for tok in seq:
            counts[tok] = counts.get(tok, 0) + 1
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, c in ranked if c >= min_freq]
    kept = kept[:max_size - len(RESERVED)]
    return Vocab(list(RESERVED) + kept)


@dataclass
class LmBatch:
    """One truncated-BPTT slice: targets are inputs shifted by one step."""
    inputs: np.ndarray   # [len, batch] int32
    targets: np.ndarray  # [len, batch] int32


def lm_batches(stream: np.ndarray, batch_size: int, bptt_len: int,
               length_jitter: Optional[float] = None,
               rng: Optional[np.random.Generator] = None) -> list[LmBatch]:
    """Split a token stream into contiguous column substreams and slice them.

    ``length_jitter`` is the probability of drawing a batch length around
    the full ``bptt_len`` (Normal(bptt, 5)) as opposed to around half of it
    (Normal(bptt/2, 5)); lengths clamp to [5, 2*bptt]. None disables jitter
    and every batch except possibly the last has exactly ``bptt_len`` rows.
    The final ragged remainder of the stream is dropped.
    """
    stream = np.asarray(stream)
    if stream.size < batch_size * 2:
        raise TextError(
            f"stream of {stream.size} tokens is too short for batch_size "
            f"{batch_size} (need at least {batch_size * 2})")
    cols = stream.size // batch_size
    arr = stream[:cols * batch_size].reshape(batch_size, cols).T
    if length_jitter is not None and rng is None:
        raise TextError("length_jitter requires an rng")
    batches: list[LmBatch] = []
    i = 0
    while i < cols - 1:
        if length_jitter is None:
            length = bptt_len
        else:
            center = bptt_len if rng.random() < length_jitter else bptt_len / 2
            length = int(round(rng.normal(center, 5.0)))
            length = max(5, min(2 * bptt_len, length))
        length = min(length, cols - 1 - i)
        batches.append(LmBatch(inputs=arr[i:i + length],
                               targets=arr[i + 1:i + length + 1]))
        i += length
    return batches


@dataclass
class DocChunks:
    """Front-padded documents stacked time-major and cut into chunks."""
    chunks: list[np.ndarray]          # each [b, batch] int32
    lengths: np.ndarray               # true document lengths, [batch]
    pad_id: int = 0

    @property
    def total_len(self) -> int:
        return sum(c.shape[0] for c in self.chunks)

    def pad_mask(self) -> np.ndarray:
        """Boolean [total_len, batch]: True where the token is real."""
        t = self.total_len
        steps = np.arange(t)[:, None]
        return steps >= (t - self.lengths[None, :])


def bpt3c_chunks(docs: Sequence[np.ndarray], chunk_len: int,
                 pad_id: int = 0) -> DocChunks:
    """Front-pad documents to a common multiple of ``chunk_len`` and split.

    Front padding keeps the final time step on real content, so the last
    hidden state that feeds the classifier never sits on padding.
    """
    if chunk_len < 1:
        raise TextError("chunk_len must be >= 1")
    if not docs:
        raise TextError("bpt3c_chunks needs at least one document")
    lengths = np.array([len(d) for d in docs], dtype=np.int64)
    if (lengths == 0).any():
        raise TextError("bpt3c_chunks: empty document")
    padded = int(math.ceil(lengths.max() / chunk_len) * chunk_len)
    mat = np.full((padded, len(docs)), pad_id, dtype=np.int32)
    for col, doc in enumerate(docs):
        mat[padded - len(doc):, col] = np.asarray(doc, dtype=np.int32)
    chunks = [mat[i:i + chunk_len] for i in range(0, padded, chunk_len)]
    return DocChunks(chunks=chunks, lengths=lengths, pad_id=pad_id)


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def read_lm_corpus(path) -> str:
    """Contiguous UTF-8 text for language-model training."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise TextError(f"LM corpus {path} is empty")
    return text


def read_labeled(path) -> list[tuple[str, str]]:
    """One document per line: label TAB text."""
    rows: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise TextError(f"{path}:{lineno}: expected 'label<TAB>text'")
            label, text = line.split("\t", 1)
            rows.append((label, text))
    if not rows:
        raise TextError(f"labeled corpus {path} is empty")
    return rows


def write_labeled(path, rows: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, text in rows:
            fh.write(f"{label}\t{text}\n")


def corpus_stream(text: str, vocab: Vocab, mode: str) -> np.ndarray:
    """Numericalize a contiguous corpus, prefixed with a begin marker."""
    return vocab.encode([BOS] + tokenize(text, mode))


def doc_ids(text: str, vocab: Vocab, mode: str) -> np.ndarray:
    """Numericalize one classification document with begin/end markers."""
    return vocab.encode([BOS] + tokenize(text, mode) + [EOS])
