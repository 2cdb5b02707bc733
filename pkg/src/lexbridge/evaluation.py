"""Whole-word masked prediction and retrieval metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .corpus import Document
from .errors import ConfigError, DataError, ShapeError
from .model import MlmEncoder
from .tokenizer import MASK_ID, PAD_ID, Vocabulary, decode, encode, windows


@dataclass(frozen=True)
class MaskedWordTask:
    token_ids: tuple[int, ...]  # full model input, gold ids still in place
    span_start: int
    gold_ids: tuple[int, ...]
    gold_word: str = ""

    @property
    def span(self) -> range:
        return range(self.span_start, self.span_start + len(self.gold_ids))


@dataclass
class EvalResult:
    metric: str
    value: float
    records: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "n_items": len(self.records)}

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        if csv_path is not None:
            self.save_records(csv_path)

    def save_records(self, csv_path: str | Path) -> None:
        fieldnames = list(self.records[0]) if self.records else []
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.records)


def _decode_causal(weights: MlmEncoder, tasks: Sequence[MaskedWordTask]) -> list[list[int]]:
    """Fill every task's span left to right, re-running the model after each fill."""
    if not tasks:
        return []
    width = max(len(t.token_ids) for t in tasks)
    if width > weights.config.max_seq_len:
        raise DataError(f"sequence length {width} exceeds max_seq_len {weights.config.max_seq_len}")
    ids = torch.full((len(tasks), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(tasks), width), dtype=torch.bool)
    for r, t in enumerate(tasks):
        ids[r, : len(t.token_ids)] = torch.as_tensor(t.token_ids)
        mask[r, : len(t.token_ids)] = True
        ids[r, t.span_start : t.span_start + len(t.gold_ids)] = MASK_ID
    longest = max(len(t.gold_ids) for t in tasks)
    weights.eval()
    with weights.guard.reading(), torch.no_grad():
        for step in range(longest):
            rows = [r for r, t in enumerate(tasks) if step < len(t.gold_ids)]
            logits = weights(ids[rows], mask[rows])
            for i, r in enumerate(rows):
                pos = tasks[r].span_start + step
                ids[r, pos] = int(torch.argmax(logits[i, pos]))
    return [ids[r, t.span_start : t.span_start + len(t.gold_ids)].tolist() for r, t in enumerate(tasks)]


def predict_word(weights: MlmEncoder, task: MaskedWordTask, vocab: Vocabulary) -> str:
    """Mask the whole span, then predict it one token at a time, earliest slot first."""
    (pieces,) = _decode_causal(weights, [task])
    return decode(vocab, pieces)


def word_tasks(vocab: Vocabulary, doc: Document, max_len: int) -> list[MaskedWordTask]:
    """One task per word occurrence, other words left visible."""
    tasks = []
    for w in windows(encode(vocab, doc.text), max_len):
        for (start, count), word in zip(w.word_spans, w.words):
            tasks.append(MaskedWordTask(w.token_ids, start, w.token_ids[start : start + count], word))
    return tasks


def masked_word_accuracy(weights: MlmEncoder, docs: Sequence[Document], vocab: Vocabulary) -> EvalResult:
    """Fraction of word occurrences whose causal whole-word prediction equals the word exactly."""
    if not docs:
        raise ConfigError("empty validation set")
    records = []
    for doc in docs:
        tasks = word_tasks(vocab, doc, weights.config.max_seq_len)
        for i, (task, pieces) in enumerate(zip(tasks, _decode_causal(weights, tasks))):
            predicted = decode(vocab, pieces)
            records.append({"doc_id": doc.id, "word_index": i, "gold": task.gold_word,
                            "predicted": predicted, "correct": int(predicted == task.gold_word)})
    if not records:
        raise ConfigError("validation set contains no words")
    value = sum(r["correct"] for r in records) / len(records)
    return EvalResult("masked_word_accuracy", value, records)


def make_task(vocab: Vocabulary, words: Sequence[str], target: int, max_len: int) -> MaskedWordTask:
    """Task that masks ``words[target]`` in the sentence built from ``words``."""
    (w,) = windows(encode(vocab, " ".join(words)), max_len)
    start, count = w.word_spans[target]
    return MaskedWordTask(w.token_ids, start, w.token_ids[start : start + count], w.words[target])


def accuracy_at_k(ranked_lists: Sequence[Sequence], gold_sets: Sequence[set], k: int) -> float:
    if k < 1:
        raise ConfigError("k must be >= 1")
    if not ranked_lists:
        raise ConfigError("empty query set")
    if len(ranked_lists) != len(gold_sets):
        raise ConfigError("ranked_lists and gold_sets differ in length")
    hits = sum(1 for ranked, gold in zip(ranked_lists, gold_sets) if any(p in gold for p in ranked[:k]))
    return hits / len(ranked_lists)


def ndcg_single(ranked: Sequence, gold: set, k: int) -> float:
    dcg = 0.0
    for i, p in enumerate(ranked[:k], start=1):
        if p in gold:
            dcg += 1.0 / math.log2(i + 1)
    idcg = 0.0
    for i in range(1, min(len(gold), k) + 1):
        idcg += 1.0 / math.log2(i + 1)
    return dcg / idcg


def ndcg_at_k(ranked_lists: Sequence[Sequence], gold_sets: Sequence[set], k: int) -> float:
    """Mean binary-relevance NDCG@k; queries without gold passages are skipped."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(ranked_lists) != len(gold_sets):
        raise ConfigError("ranked_lists and gold_sets differ in length")
    scores = [ndcg_single(r, g, k) for r, g in zip(ranked_lists, gold_sets) if g]
    if not scores:
        raise ConfigError("no query has a gold passage")
    return sum(scores) / len(scores)


@dataclass
class RetrievalIndex:
    passage_ids: list[str]
    embeddings: np.ndarray  # (n_passages, dim)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.passage_ids):
            raise ShapeError("index needs one embedding row per passage")
        if not np.isfinite(self.embeddings).all():
            raise DataError("index embeddings contain non-finite values")


def retrieve_topk(query: np.ndarray, index: RetrievalIndex, k: int) -> list[str]:
    """Passage ids by descending dot product; ties go to the smaller passage id."""
    query = np.asarray(query)
    if query.shape != (index.embeddings.shape[1],):
        raise ShapeError(f"query shape {query.shape} does not match index dim {index.embeddings.shape[1]}")
    if not 1 <= k <= len(index.passage_ids):
        raise ConfigError(f"k must be in [1, {len(index.passage_ids)}]")
    scores = index.embeddings @ query
    order = np.lexsort((np.asarray(index.passage_ids), -scores))
    return [index.passage_ids[i] for i in order[:k]]


def build_index(encoder: MlmEncoder, vocab: Vocabulary, passages: Sequence[Document],
                batch_size: int = 64) -> RetrievalIndex:
    from .training import encode_texts

    encoder.eval()
    rows = []
    with encoder.guard.reading(), torch.no_grad():
        for start in range(0, len(passages), batch_size):
            chunk = passages[start : start + batch_size]
            rows.append(encode_texts(encoder, vocab, [p.text for p in chunk]).double().numpy())
    return RetrievalIndex([p.id for p in passages], np.concatenate(rows))


def embed_queries(encoder: MlmEncoder, vocab: Vocabulary, questions: Sequence[str]) -> np.ndarray:
    from .training import encode_texts

    encoder.eval()
    with encoder.guard.reading(), torch.no_grad():
        return encode_texts(encoder, vocab, list(questions)).double().numpy()


def evaluate_rankings(ranked_lists: Sequence[Sequence[str]], gold_sets: Sequence[set], k: int = 10,
                      query_ids: Sequence[str] | None = None) -> dict[str, EvalResult]:
    query_ids = query_ids or [str(i) for i in range(len(ranked_lists))]
    records = []
    for qid, ranked, gold in zip(query_ids, ranked_lists, gold_sets):
        rank = next((i for i, p in enumerate(ranked, start=1) if p in gold), None)
        records.append({"query_id": qid, "first_gold_rank": rank if rank is not None else "",
                        "hit": int(rank is not None and rank <= k),
                        "ndcg": ndcg_single(ranked, gold, k) if gold else ""})
    return {
        f"accuracy@{k}": EvalResult(f"accuracy@{k}", accuracy_at_k(ranked_lists, gold_sets, k), records),
        f"ndcg@{k}": EvalResult(f"ndcg@{k}", ndcg_at_k(ranked_lists, gold_sets, k), records),
    }
