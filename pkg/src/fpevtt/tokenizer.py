"""Frequency-capped word vocabulary, WordPiece inference and embedding files."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
FILTERED_CHARS = '!"#$%&()*+.,-/:;=?@[\\]^_`{|}~'
_FILTER_TABLE = str.maketrans("", "", FILTERED_CHARS)

EMBEDDING_MAGIC = b"FPEE"


class VocabError(ValueError):
    pass


def normalize(sentence: str) -> list[str]:
    """Lowercase, drop the filtered punctuation, split on whitespace."""
    return sentence.lower().translate(_FILTER_TABLE).split()


@dataclass
class Vocabulary:
    tokens: list[str]
    kind: str = "default"
    id_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise VocabError(f"first four tokens must be {SPECIALS}")
        if self.kind not in ("default", "wordpiece"):
            raise VocabError(f"unknown vocabulary kind {self.kind!r}")
        if self.kind == "default" and any(t.startswith("##") for t in self.tokens):
            raise VocabError("default vocabularies cannot hold '##' continuation pieces")
        self.id_of = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.id_of:
                raise VocabError(f"duplicate token {tok!r} at line {i}")
            self.id_of[tok] = i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def encode(self, sentence: str, add_specials: bool = True) -> list[int]:
        if self.kind == "wordpiece":
            return wordpiece_tokenize(sentence, self, add_specials)
        return default_tokenize(sentence, self, add_specials)

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize(ids, self)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, kind: str | None = None) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        while lines and lines[-1] == "":
            lines.pop()
        if kind is None:
            kind = "wordpiece" if any(t.startswith("##") for t in lines) else "default"
        return cls(lines, kind)


def build_default_vocab(corpus: Sequence[str], cap: int) -> Vocabulary:
    """Keep the ``cap - 4`` most frequent words; ties go to the lexicographically smaller word."""
    if cap < 5:
        raise VocabError(f"cap must be at least 5, got {cap}")
    if not corpus:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for s in corpus for w in normalize(s))
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIALS) + [w for w, _ in ranked[: cap - len(SPECIALS)]])


def default_tokenize(sentence: str, vocab: Vocabulary, add_specials: bool = True) -> list[int]:
    ids = [vocab.id_of.get(w, UNK) for w in normalize(sentence)]
    return [BOS, *ids, EOS] if add_specials else ids


def wordpiece_word(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first split of one word; ``[<unk>]`` if it gets stuck."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab.id_of:
                match = piece
                break
            end -= 1
        if match is None:
            return [SPECIALS[UNK]]
        pieces.append(match)
        start = end
    return pieces


def wordpiece_tokenize(sentence: str, vocab: Vocabulary, add_specials: bool = True) -> list[int]:
    ids = [vocab.id_of[p] for w in normalize(sentence) for p in wordpiece_word(w, vocab)]
    return [BOS, *ids, EOS] if add_specials else ids


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        i = int(i)
        if i < len(SPECIALS):
            continue
        tok = vocab.tokens[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)


def unk_rate(sentences: Iterable[str], vocab: Vocabulary) -> float:
    total = unk = 0
    for s in sentences:
        ids = vocab.encode(s, add_specials=False)
        total += len(ids)
        unk += sum(1 for i in ids if i == UNK)
    return unk / total if total else 0.0


# ---------------------------------------------------------------------------
# embedding matrices


def write_embedding_file(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    rows, cols = matrix.shape
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_embedding_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != EMBEDDING_MAGIC:
        raise VocabError(f"{path}: not an embedding file (bad magic)")
    rows, cols = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) != rows * cols * 4:
        raise VocabError(f"{path}: expected {rows * cols} values, file holds {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def load_embedding_matrix(vocab: Vocabulary, path, d_model: int, freeze: bool = True) -> Tensor:
    matrix = read_embedding_file(path)
    expected = (len(vocab), d_model)
    if matrix.shape != expected:
        raise VocabError(
            f"{path}: embedding extents {matrix.shape} do not match expected {expected}"
        )
    return Tensor(matrix, requires_grad=not freeze)
