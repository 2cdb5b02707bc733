"""Bilingual dictionaries (target word -> source translations)."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import DataError
from .tokenizer import CONTINUATION


def normalize_entry(word: str) -> str:
    return unicodedata.normalize("NFC", word).strip().lower()


@dataclass
class BilingualDictionary:
    entries: dict[str, list[str]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return normalize_entry(word) in self.entries

    def add(self, target: str, translations: Iterable[str]) -> None:
        key = normalize_entry(target)
        if not key:
            raise ValueError("empty target word")
        merged = self.entries.setdefault(key, [])
        for t in translations:
            t = normalize_entry(t)
            if not t:
                raise ValueError(f"empty translation for {target!r}")
            if t not in merged:
                merged.append(t)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "BilingualDictionary":
        d = cls()
        for target, source in pairs:
            d.add(target, [source])
        return d


def load_dictionary(path: str | Path) -> BilingualDictionary:
    """Read a TSV dictionary: target word, then one or more translation columns.

    Blank lines and lines starting with ``#`` are skipped. Repeated target
    words are merged, keeping translations in first-seen order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dictionary file not found: {path}")
    d = BilingualDictionary()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise DataError(f"{path}:{lineno}: expected target<TAB>translation")
            try:
                d.add(cols[0], cols[1:])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return d


def save_dictionary(path: str | Path, d: BilingualDictionary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for target, translations in d.entries.items():
            f.write("\t".join([target, *translations]) + "\n")


def lookup_token(d: BilingualDictionary, token: str, continuation_prefix: str = CONTINUATION) -> list[str]:
    """Single-word translations of a vocabulary token.

    Continuation pieces are never words, so they always come back empty.
    """
    if token.startswith(continuation_prefix):
        return []
    translations = d.entries.get(normalize_entry(token), [])
    return [t for t in translations if not any(ch.isspace() for ch in t)]
