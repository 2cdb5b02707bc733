"""Corpus ingestion, cleaning, statistics and synthetic language pairs."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_ALPHABET = "aąbcćdeęfghijklłmnńoóprsśtuwyzźż"
SHINGLE_SIZE = 3


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str


@dataclass(frozen=True)
class CorpusStats:
    n_docs: int
    n_words: int


def load_corpus(path: str | Path) -> list[Document]:
    """Read a JSON-lines corpus, one ``{"id", "title", "text"}`` object per line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            for key in ("id", "title", "text"):
                if not isinstance(obj.get(key), str):
                    raise DataError(f"{path}:{lineno}: missing or non-string field '{key}'")
            if obj["id"] in seen:
                raise DataError(f"{path}:{lineno}: duplicate document id {obj['id']!r}")
            seen.add(obj["id"])
            docs.append(Document(obj["id"], obj["title"], obj["text"]))
    return docs


def save_corpus(path: str | Path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for doc in docs:
            f.write(json.dumps(asdict(doc), ensure_ascii=False) + "\n")


def shingles(text: str, size: int = SHINGLE_SIZE) -> frozenset[tuple[str, ...]]:
    """Word ``size``-shingles; texts shorter than ``size`` words form one shingle."""
    words = text.split()
    if not words:
        return frozenset()
    if len(words) < size:
        return frozenset([tuple(words)])
    return frozenset(tuple(words[i : i + size]) for i in range(len(words) - size + 1))


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def clean_corpus(docs: Sequence[Document], min_words: int = 0, near_dup_threshold: float = 1.0) -> list[Document]:
    """Drop short documents and near-duplicates (earlier document wins).

    A document is dropped when its word 3-shingle Jaccard similarity with an
    already-kept document reaches ``near_dup_threshold``.
    """
    if min_words < 0:
        raise ConfigError("min_words must be >= 0")
    if not 0.0 < near_dup_threshold <= 1.0:
        raise ConfigError("near_dup_threshold must be in (0, 1]")
    kept: list[Document] = []
    kept_shingles: list[frozenset] = []
    index: dict[tuple[str, ...], list[int]] = {}
    n_empty_kept = 0
    for doc in docs:
        if len(doc.text.split()) < min_words:
            continue
        sh = shingles(doc.text)
        if not sh:
            # two empty documents are identical
            if n_empty_kept:
                continue
            n_empty_kept += 1
        candidates = {j for s in sh for j in index.get(s, ())}
        if any(jaccard(sh, kept_shingles[j]) >= near_dup_threshold for j in candidates):
            continue
        for s in sh:
            index.setdefault(s, []).append(len(kept))
        kept.append(doc)
        kept_shingles.append(sh)
    return kept


def corpus_stats(docs: Iterable[Document]) -> CorpusStats:
    n_docs = n_words = 0
    for doc in docs:
        n_docs += 1
        n_words += len(doc.text.split())
    return CorpusStats(n_docs, n_words)


@dataclass(frozen=True)
class SynthPairSpec:
    """Parameters of a synthetic source/target language pair.

    Both languages share one hidden "concept" sequence model (Zipf unigram
    prior plus a few preferred successors per concept) and differ only in the
    surface form of each concept.
    """

    alphabet: str = DEFAULT_ALPHABET
    n_word_types: int = 300
    n_docs: int = 400
    doc_length: tuple[int, int] = (8, 24)
    mapping_seed: int = 0
    dictionary_coverage: float = 0.6
    zipf_exponent: float = 1.0
    word_length: tuple[int, int] = (2, 8)
    n_successors: int = 2
    successor_prob: float = 0.85
    mutation_rate: float = 0.35

    def validate(self) -> None:
        if not 0.0 <= self.dictionary_coverage <= 1.0:
            raise ConfigError(f"dictionary_coverage must be in [0, 1], got {self.dictionary_coverage}")
        if len(set(self.alphabet)) < 2:
            raise ConfigError("alphabet needs at least two distinct characters")
        if self.n_word_types < 1 or self.n_docs < 0:
            raise ConfigError("n_word_types must be >= 1 and n_docs >= 0")
        lo, hi = self.doc_length
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid doc_length range {self.doc_length}")
        wlo, whi = self.word_length
        if not 1 <= wlo <= whi:
            raise ConfigError(f"invalid word_length range {self.word_length}")
        if not 0.0 <= self.successor_prob <= 1.0:
            raise ConfigError("successor_prob must be in [0, 1]")


@dataclass
class SyntheticPair:
    source: list[Document]
    target: list[Document]
    dictionary: list[tuple[str, str]]  # (target word, source word), emitted entries only
    gold_mapping: dict[str, str] = field(default_factory=dict)  # every target word -> source word


VOWELS = frozenset("aąeęioóuy")


def _random_forms(rng: np.random.Generator, alphabet: list[str], n: int, lengths: tuple[int, int],
                  taken: set[str]) -> list[str]:
    """Distinct word forms built from consonant-vowel syllables where the alphabet allows."""
    vowels = [c for c in alphabet if c in VOWELS] or alphabet
    consonants = [c for c in alphabet if c not in VOWELS] or alphabet
    forms: list[str] = []
    while len(forms) < n:
        length = int(rng.integers(lengths[0], lengths[1] + 1))
        chars = []
        while len(chars) < length:
            chars.append(consonants[int(rng.integers(len(consonants)))])
            if len(chars) < length:
                chars.append(vowels[int(rng.integers(len(vowels)))])
        form = "".join(chars)
        if form not in taken:
            taken.add(form)
            forms.append(form)
    return forms


def _mutate(rng: np.random.Generator, form: str, shift: dict[str, str], rate: float) -> str:
    chars = [shift[c] if rng.random() < rate else c for c in form]
    if "".join(chars) == form:
        i = int(rng.integers(0, len(form)))
        chars[i] = shift[form[i]]
    return "".join(chars)


def generate_synthetic_pair(spec: SynthPairSpec) -> SyntheticPair:
    spec.validate()
    rng = np.random.default_rng(spec.mapping_seed)
    alphabet = sorted(set(spec.alphabet))
    n = spec.n_word_types

    source_forms = _random_forms(rng, alphabet, n, spec.word_length, set())
    # related language: a per-seed "sound shift" that keeps vowels and consonants apart
    shift = {}
    for group in ([c for c in alphabet if c in VOWELS], [c for c in alphabet if c not in VOWELS]):
        if len(group) > 1:
            rolled = np.roll(rng.permutation(group), 1)
            shift.update(zip(rng.permutation(group).tolist(), rolled.tolist()))
        elif group:
            shift[group[0]] = alphabet[(alphabet.index(group[0]) + 1) % len(alphabet)]
    taken = set(source_forms)
    target_forms = []
    for form in source_forms:
        for _ in range(20):
            cand = _mutate(rng, form, shift, spec.mutation_rate)
            if cand not in taken:
                break
        else:
            cand = _random_forms(rng, alphabet, 1, spec.word_length, taken)[0]
        taken.add(cand)
        target_forms.append(cand)

    probs = 1.0 / np.arange(1, n + 1) ** spec.zipf_exponent
    probs /= probs.sum()
    successors = rng.choice(n, size=(n, spec.n_successors), p=probs)

    source_docs, target_docs = [], []
    lo, hi = spec.doc_length
    for i in range(spec.n_docs):
        length = int(rng.integers(lo, hi + 1))
        concepts = [int(rng.choice(n, p=probs))]
        for _ in range(length - 1):
            if rng.random() < spec.successor_prob:
                concepts.append(int(successors[concepts[-1], rng.integers(0, spec.n_successors)]))
            else:
                concepts.append(int(rng.choice(n, p=probs)))
        source_docs.append(Document(f"src-{i:05d}", f"source {i}", " ".join(source_forms[c] for c in concepts)))
        target_docs.append(Document(f"tgt-{i:05d}", f"target {i}", " ".join(target_forms[c] for c in concepts)))

    n_entries = int(round(spec.dictionary_coverage * n))
    # frequent words are the likeliest to be listed in a real dictionary
    chosen = sorted(rng.choice(n, size=n_entries, replace=False, p=probs).tolist()) if n_entries else []
    dictionary = [(target_forms[c], source_forms[c]) for c in chosen]
    gold = dict(zip(target_forms, source_forms))
    return SyntheticPair(source_docs, target_docs, dictionary, gold)


def word_frequencies(docs: Iterable[Document]) -> Counter:
    counts: Counter = Counter()
    for doc in docs:
        counts.update(doc.text.split())
    return counts


def make_retrieval_pairs(passages: Sequence[Document], n_pairs: int, question_words: int = 4,
                         seed: int = 0) -> list[tuple[str, str]]:
    """Pseudo-questions built from words sampled out of randomly chosen passages.

    Returns ``(question, passage id)`` tuples.
    """
    rng = np.random.default_rng(seed)
    if n_pairs > len(passages):
        raise ConfigError("more pairs requested than passages available")
    picks = rng.choice(len(passages), size=n_pairs, replace=False)
    pairs = []
    for p in picks:
        words = passages[int(p)].text.split()
        take = rng.choice(len(words), size=min(question_words, len(words)), replace=False)
        pairs.append((" ".join(words[int(i)] for i in sorted(take)), passages[int(p)].id))
    return pairs
