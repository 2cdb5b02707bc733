"""WordPiece-style subword vocabulary: training, greedy encoding, decoding."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Document
from .errors import ConfigError, DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIAL_TOKENS)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    continuation_prefix: str = CONTINUATION
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {SPECIAL_TOKENS}")
        mapping = {tok: i for i, tok in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            dupes = [t for t, c in Counter(self.tokens).items() if c > 1]
            raise DataError(f"duplicate vocabulary tokens: {dupes[:5]}")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def is_special(self, token_id: int) -> bool:
        return token_id < N_SPECIAL

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for lineno, tok in enumerate(lines, start=1):
            if not tok or any(ch.isspace() for ch in tok):
                raise DataError(f"{path}:{lineno}: empty or whitespace-bearing token")
        return cls(tuple(lines))


@dataclass(frozen=True)
class Tokenization:
    token_ids: tuple[int, ...]
    word_spans: tuple[tuple[int, int], ...]  # (first token index, token count) per word
    words: tuple[str, ...] = ()


def _split_word(word: str, prefix: str) -> list[str]:
    return [word[0]] + [prefix + c for c in word[1:]]


def train_vocab(corpus: Iterable[Document | str], target_size: int, continuation_prefix: str = CONTINUATION) -> Vocabulary:
    """Train a vocabulary of at most ``target_size`` tokens.

    Starts from every observed character in both word-initial and
    continuation form, then repeatedly merges the adjacent pair with the
    highest ``freq(ab) / (freq(a) * freq(b))``. Ties go to the more frequent
    pair, then to the lexicographically smaller one.
    """
    word_counts: Counter = Counter()
    for item in corpus:
        text = item.text if isinstance(item, Document) else item
        word_counts.update(w for w in normalize(text).split() if len(w) <= MAX_WORD_CHARS)
    if not word_counts:
        raise DataError("cannot train a vocabulary on an empty corpus")

    alphabet = sorted({c for w in word_counts for c in w})
    base = alphabet + [continuation_prefix + c for c in alphabet]
    if target_size < N_SPECIAL + len(base):
        raise ConfigError(
            f"target_size {target_size} too small: need {N_SPECIAL} specials + {len(base)} character tokens")
    tokens = list(SPECIAL_TOKENS) + base
    known = set(tokens)

    words = sorted(word_counts)
    counts = [word_counts[w] for w in words]
    splits = [_split_word(w, continuation_prefix) for w in words]
    tok_freq: Counter = Counter()
    pair_freq: Counter = Counter()
    pair_words: dict[tuple[str, str], set[int]] = {}

    def account(i: int, sign: int) -> None:
        pieces, c = splits[i], counts[i] * sign
        for p in pieces:
            tok_freq[p] += c
        for pair in zip(pieces, pieces[1:]):
            pair_freq[pair] += c
            if sign > 0:
                pair_words.setdefault(pair, set()).add(i)

    for i in range(len(words)):
        account(i, +1)

    while len(tokens) < target_size:
        live = [(p, f) for p, f in pair_freq.items() if f > 0]
        if not live:
            break
        (a, b), _ = min(live, key=lambda pf: (-pf[1] / (tok_freq[pf[0][0]] * tok_freq[pf[0][1]]), -pf[1], pf[0]))
        merged = a + b[len(continuation_prefix):]
        for i in sorted(pair_words.pop((a, b), ())):
            pieces = splits[i]
            if not any(x == a and y == b for x, y in zip(pieces, pieces[1:])):
                continue
            account(i, -1)
            out, j = [], 0
            while j < len(pieces):
                if j + 1 < len(pieces) and pieces[j] == a and pieces[j + 1] == b:
                    out.append(merged)
                    j += 2
                else:
                    out.append(pieces[j])
                    j += 1
            splits[i] = out
            account(i, +1)
        pair_freq.pop((a, b), None)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocabulary(tuple(tokens), continuation_prefix)


def encode_word(vocab: Vocabulary, word: str, continuation: bool = False) -> list[int]:
    """Greedy longest-match-first pieces of one word; ``[UNK]`` if uncoverable.

    With ``continuation=True`` the word is treated as a word-internal fragment,
    so its first piece must also carry the continuation prefix.
    """
    if len(word) > MAX_WORD_CHARS:
        return [UNK_ID]
    prefix = vocab.continuation_prefix
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        hit = None
        while start < end:
            piece = word[start:end]
            if start > 0 or continuation:
                piece = prefix + piece
            hit = vocab.token_to_id.get(piece)
            if hit is not None:
                break
            end -= 1
        if hit is None:
            return [UNK_ID]
        ids.append(hit)
        start = end
    return ids


def encode(vocab: Vocabulary, text: str) -> Tokenization:
    words = tuple(normalize(text).split())
    ids: list[int] = []
    spans = []
    for word in words:
        pieces = encode_word(vocab, word)
        spans.append((len(ids), len(pieces)))
        ids.extend(pieces)
    return Tokenization(tuple(ids), tuple(spans), words)


def decode(vocab: Vocabulary, token_ids: Sequence[int]) -> str:
    """Join pieces back into words; ``[PAD]``, ``[CLS]`` and ``[SEP]`` are dropped."""
    prefix = vocab.continuation_prefix
    words: list[str] = []
    for tid in token_ids:
        tid = int(tid)
        if not 0 <= tid < len(vocab):
            raise DataError(f"token id {tid} out of range for vocabulary of {len(vocab)}")
        if tid in (PAD_ID, CLS_ID, SEP_ID):
            continue
        tok = vocab.tokens[tid]
        if tok.startswith(prefix) and words and tid >= N_SPECIAL:
            words[-1] += tok[len(prefix):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass(frozen=True)
class Window:
    """A model-ready slice of a tokenized document: ``[CLS] ... [SEP]``."""

    token_ids: tuple[int, ...]
    word_spans: tuple[tuple[int, int], ...]
    words: tuple[str, ...]


def windows(tok: Tokenization, max_len: int) -> list[Window]:
    """Split at word boundaries into sequences of at most ``max_len`` ids (specials included)."""
    capacity = max_len - 2
    if capacity < 1:
        raise ConfigError("max_len must leave room for [CLS] and [SEP]")
    out: list[Window] = []
    ids: list[int] = [CLS_ID]
    spans: list[tuple[int, int]] = []
    words: list[str] = []
    for (start, count), word in zip(tok.word_spans, tok.words or ("",) * len(tok.word_spans)):
        if count > capacity:
            raise DataError(f"word {word!r} needs {count} tokens, more than a window holds ({capacity})")
        if len(ids) - 1 + count > capacity:
            out.append(Window(tuple(ids + [SEP_ID]), tuple(spans), tuple(words)))
            ids, spans, words = [CLS_ID], [], []
        spans.append((len(ids), count))
        ids.extend(tok.token_ids[start : start + count])
        words.append(word)
    if spans:
        out.append(Window(tuple(ids + [SEP_ID]), tuple(spans), tuple(words)))
    return out
