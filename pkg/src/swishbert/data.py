"""Corpus ingestion, a byte-level BPE vocabulary and sequence packing."""

from __future__ import annotations

import heapq
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIALS)
IGNORE = -100

# Letters, digits, underscores and other symbols form separate chunks, each
# with at most one leading space; remaining whitespace runs stand alone.
_PRETOKEN = re.compile(r" ?[^\W\d_]+| ?\d+| ?[^\s\w]+| ?_+|\s+(?!\S)|\s+")
_DOC_SPLIT = re.compile(r"\n[ \t\r\f\v]*\n\s*")


@lru_cache(maxsize=1)
def byte_alphabet() -> dict[int, str]:
    """Map every byte to a printable, non-whitespace character (GPT-2 layout)."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    chars = keep[:]
    n = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            chars.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(keep, chars)}


def _to_symbols(text: str) -> str:
    table = byte_alphabet()
    return "".join(table[b] for b in text.encode("utf-8"))


def _from_symbols(sym: str) -> bytes:
    inv = {c: b for b, c in byte_alphabet().items()}
    return bytes(inv[c] for c in sym)


def pretokenize(text: str) -> list[str]:
    """Split text into the chunks BPE merges never cross. Lossless."""
    return _PRETOKEN.findall(text)


# ----------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Packed token ids plus MLM annotations.

    ``pad_mask`` is True at padding. ``mlm_labels`` holds the original id at
    masked positions and ``IGNORE`` elsewhere; ``masked_positions`` lists the
    ``(row, col)`` pairs of masked tokens.
    """

    token_ids: np.ndarray
    pad_mask: np.ndarray
    mlm_labels: Optional[np.ndarray] = None
    masked_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    skipped_rows: int = 0

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.mlm_labels is None:
            self.mlm_labels = np.full(self.token_ids.shape, IGNORE, dtype=np.int64)
        self.masked_positions = np.asarray(self.masked_positions, dtype=np.int64).reshape(-1, 2)

    @property
    def shape(self) -> tuple:
        return self.token_ids.shape

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def check(self) -> None:
        """Raise AssertionError if the batch invariants do not hold."""
        assert self.token_ids.shape == self.pad_mask.shape == self.mlm_labels.shape
        assert np.all(self.token_ids[self.pad_mask] == PAD)
        rows, cols = self.masked_positions.T
        on = np.zeros(self.token_ids.shape, dtype=bool)
        on[rows, cols] = True
        assert not np.any(self.pad_mask & on), "masked a pad position"
        assert np.all(self.mlm_labels[on] >= NUM_SPECIALS), "masked a special token"
        assert np.all(self.mlm_labels[~on] == IGNORE), "label set off the mask"
        assert np.all(self.token_ids[on] == MASK)


# ----------------------------------------------------------------------------
# vocabulary


class Vocab:
    """Bijective token string <-> id table with the five reserved specials first.

    Non-special tokens are strings over :func:`byte_alphabet`, so a vocab
    file never contains raw whitespace.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            raise InputError(f"vocab must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocab tokens are not unique")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self._match = {t: i for i, t in enumerate(tokens) if i >= NUM_SPECIALS}
        self._max_len = max((len(t) for t in self._match), default=1)
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def _encode_chunk(self, sym: str) -> list[int]:
        out = []
        i, n = 0, len(sym)
        while i < n:
            for j in range(min(n, i + self._max_len), i, -1):
                tid = self._match.get(sym[i:j])
                if tid is not None:
                    out.append(tid)
                    i = j
                    break
            else:
                out.append(UNK)
                i += 1
        return out

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match segmentation of each whitespace chunk."""
        ids: list[int] = []
        for chunk in pretokenize(text):
            hit = self._cache.get(chunk)
            if hit is None:
                hit = self._encode_chunk(_to_symbols(chunk))
                if len(self._cache) < 200_000:
                    self._cache[chunk] = hit
            ids.extend(hit)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode`; specials other than [PAD] render as their names."""
        parts: list[bytes] = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise InputError(f"token id {i} outside vocab of {len(self.tokens)}")
            if i == PAD:
                continue
            tok = self.tokens[i]
            parts.append(tok.encode("utf-8") if i < NUM_SPECIALS else _from_symbols(tok))
        return b"".join(parts).decode("utf-8", errors="replace")

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(texts: Union[str, Iterable[str]], target_size: int, min_pair_count: int = 2) -> Vocab:
    """Train byte-level BPE merges until ``target_size`` tokens exist.

    The base alphabet is every byte seen in ``texts``. Each round merges the
    most frequent adjacent pair inside whitespace chunks; ties go to the
    lexicographically smaller pair. Stops early once no pair occurs
    ``min_pair_count`` times.
    """
    if isinstance(texts, str):
        texts = [texts]
    words: Counter[str] = Counter()
    for text in texts:
        words.update(pretokenize(text))

    seqs: list[list[str]] = []
    freqs: list[int] = []
    alphabet: set[str] = set()
    for w, f in words.items():
        sym = list(_to_symbols(w))
        alphabet.update(sym)
        seqs.append(sym)
        freqs.append(f)

    table = byte_alphabet()
    base = [table[b] for b in range(256) if table[b] in alphabet]
    tokens = list(SPECIALS) + base
    seen = set(tokens)
    if target_size <= len(tokens):
        return Vocab(tokens)

    pair_count: defaultdict[tuple[str, str], int] = defaultdict(int)
    where: defaultdict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (sym, f) in enumerate(zip(seqs, freqs)):
        for pair in zip(sym, sym[1:]):
            pair_count[pair] += f
            where[pair].add(idx)
    heap = [(-c, a, b) for (a, b), c in pair_count.items()]
    heapq.heapify(heap)

    while len(tokens) < target_size and heap:
        negc, a, b = heapq.heappop(heap)
        count = pair_count.get((a, b), 0)
        if count != -negc:
            if count > 0:
                heapq.heappush(heap, (-count, a, b))
            continue
        if count < min_pair_count:
            break
        merged = a + b
        if merged not in seen:
            tokens.append(merged)
            seen.add(merged)
        touched: dict[tuple[str, str], int] = {}
        for idx in list(where[(a, b)]):
            sym, f = seqs[idx], freqs[idx]
            for pair in zip(sym, sym[1:]):
                pair_count[pair] -= f
                touched[pair] = pair_count[pair]
            out, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == a and sym[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            seqs[idx] = out
            for pair in zip(out, out[1:]):
                pair_count[pair] += f
                where[pair].add(idx)
                touched[pair] = pair_count[pair]
        del pair_count[(a, b)]
        where.pop((a, b), None)
        for pair in touched:
            c = pair_count.get(pair, 0)
            if c > 0:
                heapq.heappush(heap, (-c, pair[0], pair[1]))
            else:
                pair_count.pop(pair, None)
    return Vocab(tokens)


# ----------------------------------------------------------------------------
# corpus and packing


def split_documents(text: str) -> list[str]:
    """Blank-line separated documents, stripped, empty ones dropped."""
    return [d.strip() for d in _DOC_SPLIT.split(text) if d.strip()]


@dataclass
class Corpus:
    docs: list[np.ndarray]

    @classmethod
    def from_text(cls, text: str, vocab: Vocab) -> "Corpus":
        return cls([np.asarray(vocab.encode(d), dtype=np.int64) for d in split_documents(text)])

    @classmethod
    def from_file(cls, path: Union[str, Path], vocab: Vocab) -> "Corpus":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), vocab)

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def num_tokens(self) -> int:
        return int(sum(len(d) for d in self.docs))

    def split(self, holdout: float, seed: int = 0) -> tuple["Corpus", "Corpus"]:
        """Deterministic document-level train/held-out split."""
        order = np.random.default_rng(seed).permutation(len(self.docs))
        n_hold = int(round(holdout * len(self.docs)))
        hold = set(order[:n_hold].tolist())
        train = [d for i, d in enumerate(self.docs) if i not in hold]
        held = [d for i, d in enumerate(self.docs) if i in hold]
        return Corpus(train), Corpus(held)


def pack_sequences(docs: Iterable[np.ndarray], seq_len: int) -> list[np.ndarray]:
    """Pack documents into ``[CLS] doc [SEP] doc [SEP] ...`` rows of ``seq_len``.

    Rows are filled completely: a document that does not fit in the space
    left is cut, and its remainder continues after the next row's [CLS].
    Only the final row is padded, so every corpus token lands in exactly
    one row.
    """
    if seq_len < 3:
        raise InputError("seq_len must be at least 3 to fit [CLS] x [SEP]")
    rows: list[np.ndarray] = []
    row = np.full(seq_len, PAD, dtype=np.int64)
    row[0] = CLS
    fill = 1

    for doc in docs:
        doc = np.asarray(doc, dtype=np.int64)
        pos = 0
        while pos < len(doc):
            if fill == seq_len:
                rows.append(row)
                row = np.full(seq_len, PAD, dtype=np.int64)
                row[0], fill = CLS, 1
            take = min(len(doc) - pos, seq_len - fill)
            row[fill:fill + take] = doc[pos:pos + take]
            fill += take
            pos += take
        if len(doc):
            # the closing [SEP] opens a new row when the document ended flush
            if fill == seq_len:
                rows.append(row)
                row = np.full(seq_len, PAD, dtype=np.int64)
                row[0], fill = CLS, 1
            row[fill] = SEP
            fill += 1
    if fill > 1:
        rows.append(row)
    return rows


def batch_iterator(corpus: Corpus, seq_len: int, batch_size: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """One epoch of batches; document order is shuffled from ``(seed, epoch)``."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(corpus.docs))
    rows = pack_sequences((corpus.docs[i] for i in order), seq_len)
    for start in range(0, len(rows), batch_size):
        ids = np.stack(rows[start:start + batch_size])
        yield Batch(ids, ids == PAD)


def batch_stream(corpus: Corpus, seq_len: int, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless batches, cycling epochs with a fresh shuffle each time.

    Trailing partial batches are dropped, unless the whole corpus packs into
    fewer than ``batch_size`` rows, in which case every batch is that one
    (reshuffled) partial batch.
    """
    if corpus.num_tokens == 0:
        return
    epoch = 0
    while True:
        batches = list(batch_iterator(corpus, seq_len, batch_size, seed, epoch))
        full = [b for b in batches if len(b) == batch_size]
        yield from (full or batches)
        epoch += 1
