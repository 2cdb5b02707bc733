"""MLM pre-training with dynamic masking and dual-encoder retrieval fine-tuning."""

from __future__ import annotations

import contextlib
import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Document
from .errors import ConfigError, NumericalError
from .model import IGNORE_INDEX, Batch, MlmEncoder, mlm_loss
from .tokenizer import CLS_ID, MASK_ID, SEP_ID, N_SPECIAL, PAD_ID, Vocabulary, Window, encode, windows


@dataclass(frozen=True)
class MlmTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 5e-4
    mask_rate: float = 0.15
    mask_fraction: float = 0.8
    keep_fraction: float = 0.1
    random_fraction: float = 0.1
    warmup_fraction: float = 0.1
    whole_word: bool = False
    max_steps: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in [0, 1), got {self.mask_rate}")
        splits = (self.mask_fraction, self.keep_fraction, self.random_fraction)
        if min(splits) < 0 or not math.isclose(sum(splits), 1.0, abs_tol=1e-9):
            raise ConfigError(f"mask/keep/random fractions must be non-negative and sum to 1, got {splits}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")


# Full-size settings; training from scratch needs the smaller batch to stay stable.
FULL_SCALE_MLM = MlmTrainConfig(epochs=150, batch_size=720, learning_rate=5e-4)
FULL_SCALE_MLM_FROM_SCRATCH = MlmTrainConfig(epochs=150, batch_size=240, learning_rate=5e-4)


@dataclass(frozen=True)
class DprTrainConfig:
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")


FULL_SCALE_DPR = DprTrainConfig(steps=1250, batch_size=1024, learning_rate=2e-5)


def load_config(cls, path: str | Path | None, **overrides):
    """Build ``cls`` from an optional JSON file plus non-None keyword overrides."""
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = cls(**values)
    cfg.validate()
    return cfg


def sample_masking(token_ids: Sequence[int], word_spans: Sequence[tuple[int, int]], config: MlmTrainConfig,
                   rng: np.random.Generator, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic masking of one sequence.

    Each non-special token (each word, with ``whole_word``) is selected with
    probability ``mask_rate``; selected tokens become ``[MASK]``, stay, or are
    replaced by a random non-special token in the configured proportions.
    A draw that selects nothing is repeated once, after which one unit is
    forced. Labels hold the original id at selected positions and
    ``IGNORE_INDEX`` elsewhere.
    """
    ids = np.asarray(token_ids, dtype=np.int64).copy()
    labels = np.full_like(ids, IGNORE_INDEX)
    if config.whole_word:
        units = [list(range(s, s + c)) for s, c in word_spans if all(ids[s + i] >= N_SPECIAL for i in range(c))]
    else:
        units = [[i] for i in np.flatnonzero(ids >= N_SPECIAL)]
    if not units:
        return ids, labels

    chosen = np.flatnonzero(rng.random(len(units)) < config.mask_rate)
    if chosen.size == 0:
        chosen = np.flatnonzero(rng.random(len(units)) < config.mask_rate)
    if chosen.size == 0:
        chosen = np.array([rng.integers(len(units))])

    positions = np.array([p for u in chosen for p in units[u]], dtype=np.int64)
    labels[positions] = ids[positions]
    action = rng.random(len(positions))
    to_mask = positions[action < config.mask_fraction]
    to_random = positions[action >= config.mask_fraction + config.keep_fraction]
    ids[to_mask] = MASK_ID
    if to_random.size and vocab_size > N_SPECIAL:
        ids[to_random] = rng.integers(N_SPECIAL, vocab_size, size=to_random.size)
    return ids, labels


def collate(rows: Sequence[tuple[Sequence[int], Sequence[int] | None]]) -> Batch:
    """Right-pad (ids, labels) rows into a Batch."""
    width = max(len(ids) for ids, _ in rows)
    input_ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    attention = torch.zeros((len(rows), width), dtype=torch.bool)
    labels = torch.full((len(rows), width), IGNORE_INDEX, dtype=torch.long)
    for r, (ids, lab) in enumerate(rows):
        n = len(ids)
        input_ids[r, :n] = torch.as_tensor(np.asarray(ids, dtype=np.int64))
        attention[r, :n] = True
        if lab is not None:
            labels[r, :n] = torch.as_tensor(np.asarray(lab, dtype=np.int64))
    return Batch(input_ids, attention, labels)


def corpus_windows(docs: Sequence[Document], vocab: Vocabulary, max_len: int) -> list[Window]:
    return [w for doc in docs for w in windows(encode(vocab, doc.text), max_len)]


@dataclass
class TrainTrace:
    steps: list[tuple[int, int, float]] = field(default_factory=list)  # (step, epoch, loss)
    epoch_losses: list[float] = field(default_factory=list)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["step", "epoch", "loss"])
            for step, epoch, loss in self.steps:
                writer.writerow([step, epoch, repr(loss)])


def _lr_at(step: int, total: int, base: float, warmup_fraction: float) -> float:
    warmup = math.ceil(warmup_fraction * total)
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    return base


def _check_finite(loss: torch.Tensor, step: int, epoch: int | None = None) -> float:
    value = loss.item()
    if not math.isfinite(value):
        where = f"step {step}" + (f", epoch {epoch}" if epoch is not None else "")
        raise NumericalError(f"non-finite loss {value} at {where}")
    return value


def mlm_train(weights: MlmEncoder, corpus: Sequence[Document], vocab: Vocabulary,
              config: MlmTrainConfig) -> tuple[MlmEncoder, TrainTrace]:
    """Train ``weights`` in place with Adam, linear warmup then a constant rate."""
    config.validate()
    if weights.config.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {weights.config.vocab_size} != vocabulary size {len(vocab)}")
    seqs = corpus_windows(corpus, vocab, weights.config.max_seq_len)
    if not seqs:
        raise ConfigError("training corpus produced no sequences")
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    per_epoch = math.ceil(len(seqs) / config.batch_size)
    total = per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    optimizer = torch.optim.Adam(weights.parameters(), lr=config.learning_rate)
    trace = TrainTrace()
    weights.train()
    step = 0
    for epoch in range(config.epochs):
        if step >= total:
            break
        order = rng.permutation(len(seqs))
        epoch_losses = []
        for b in range(per_epoch):
            if step >= total:
                break
            rows = []
            for i in order[b * config.batch_size : (b + 1) * config.batch_size]:
                w = seqs[i]
                rows.append(sample_masking(w.token_ids, w.word_spans, config, rng, len(vocab)))
            batch = collate(rows)
            lr = _lr_at(step, total, config.learning_rate, config.warmup_fraction)
            for group in optimizer.param_groups:
                group["lr"] = lr
            with weights.guard.writing():
                optimizer.zero_grad(set_to_none=True)
                loss = mlm_loss(weights(batch.input_ids, batch.attention_mask), batch.labels)
                value = _check_finite(loss, step, epoch)
                loss.backward()
                optimizer.step()
            trace.steps.append((step, epoch, value))
            epoch_losses.append(value)
            step += 1
        trace.epoch_losses.append(float(np.mean(epoch_losses)))
    weights.eval()
    return weights, trace


def evaluate_mlm_loss(weights: MlmEncoder, corpus: Sequence[Document], vocab: Vocabulary,
                      config: MlmTrainConfig | None = None, seed: int = 0, batch_size: int = 64) -> float:
    """Mean masked-LM loss over the corpus under one fixed masking draw (no updates)."""
    config = config or MlmTrainConfig()
    rng = np.random.default_rng(seed)
    seqs = corpus_windows(corpus, vocab, weights.config.max_seq_len)
    rows = [sample_masking(w.token_ids, w.word_spans, config, rng, len(vocab)) for w in seqs]
    total, count = 0.0, 0
    weights.eval()
    with weights.guard.reading(), torch.no_grad():
        for start in range(0, len(rows), batch_size):
            batch = collate(rows[start : start + batch_size])
            logits = weights(batch.input_ids, batch.attention_mask)
            n = int((batch.labels != IGNORE_INDEX).sum())
            total += mlm_loss(logits, batch.labels).item() * n
            count += n
    return total / count


def encode_texts(encoder: MlmEncoder, vocab: Vocabulary, texts: Sequence[str]) -> torch.Tensor:
    """[CLS]-position vectors of each text (truncated to the first window)."""
    rows = []
    for text in texts:
        ws = windows(encode(vocab, text), encoder.config.max_seq_len)
        rows.append((ws[0].token_ids if ws else (CLS_ID, SEP_ID), None))
    batch = collate(rows)
    return encoder.encode(batch.input_ids, batch.attention_mask)[:, 0, :]


def dpr_loss(query_vectors: torch.Tensor, passage_vectors: torch.Tensor) -> torch.Tensor:
    """In-batch softmax cross-entropy; row i's gold passage is passage i."""
    scores = query_vectors @ passage_vectors.T
    return F.cross_entropy(scores, torch.arange(scores.shape[0]))


def dpr_train(query_encoder: MlmEncoder, passage_encoder: MlmEncoder, pairs: Sequence[tuple[str, str]],
              config: DprTrainConfig, vocab: Vocabulary) -> tuple[MlmEncoder, MlmEncoder, list[float]]:
    """Fine-tune both encoders in place on (question, passage) pairs."""
    config.validate()
    if len(pairs) < 2:
        raise ConfigError("dual-encoder training needs at least 2 pairs")
    batch_size = min(config.batch_size, len(pairs))
    if config.steps == 0:
        return query_encoder, passage_encoder, []
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    params = list({id(p): p for enc in (query_encoder, passage_encoder) for p in enc.parameters()}.values())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    query_encoder.train()
    passage_encoder.train()
    losses = []
    order = rng.permutation(len(pairs))
    cursor = 0
    for step in range(config.steps):
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(pairs)), 0
        picked = [pairs[i] for i in order[cursor : cursor + batch_size]]
        cursor += batch_size
        with contextlib.ExitStack() as stack:
            for enc in {id(e): e for e in (query_encoder, passage_encoder)}.values():
                stack.enter_context(enc.guard.writing())
            optimizer.zero_grad(set_to_none=True)
            q = encode_texts(query_encoder, vocab, [question for question, _ in picked])
            p = encode_texts(passage_encoder, vocab, [passage for _, passage in picked])
            loss = dpr_loss(q, p)
            losses.append(_check_finite(loss, step))
            loss.backward()
            optimizer.step()
    query_encoder.eval()
    passage_encoder.eval()
    return query_encoder, passage_encoder, losses
