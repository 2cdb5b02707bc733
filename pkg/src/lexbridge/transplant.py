"""Vocabulary matching and embedding transplantation.

Every target-vocabulary token gets an initialization source, chosen by the
first rule that applies:

1. ``DictMatch``: a single-word dictionary translation of the token is a
   source-vocabulary token; copy that row.
2. ``DirectCopy``: the token string itself (continuation prefix included) is
   a source-vocabulary token; copy that row.
3. ``SubwordAverage``: segment the token's surface with the source tokenizer
   and average the rows of the resulting pieces.

Special tokens map to the same-named source special tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch

from . import tensorio
from .errors import ShapeError
from .lexicon import BilingualDictionary, lookup_token
from .model import EncoderConfig, MlmEncoder, check_shapes, init_random
from .tokenizer import N_SPECIAL, SPECIAL_TOKENS, Vocabulary, encode_word


@dataclass(frozen=True)
class DictMatch:
    source_id: int
    translation: str = ""


@dataclass(frozen=True)
class DirectCopy:
    source_id: int


@dataclass(frozen=True)
class SubwordAverage:
    source_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.source_ids:
            raise ValueError("SubwordAverage needs at least one source id")


MatchCase = Union[DictMatch, DirectCopy, SubwordAverage]


@dataclass
class MatchPlan:
    cases: list[MatchCase]
    special_ids: frozenset[int] = frozenset(range(N_SPECIAL))

    def __len__(self) -> int:
        return len(self.cases)

    def max_source_id(self) -> int:
        return max(max(_source_ids(c)) for c in self.cases)


@dataclass
class TransplantReport:
    n_dict_matched: int = 0
    n_direct_copied: int = 0
    n_subword_averaged: int = 0
    n_special: int = 0
    samples: dict[str, list[str]] = field(default_factory=dict)
    mlm_bias: str = "zeroed"

    @property
    def total(self) -> int:
        return self.n_dict_matched + self.n_direct_copied + self.n_subword_averaged + self.n_special

    def census(self) -> str:
        return (f"tokens={self.total} dict_matched={self.n_dict_matched} direct_copied={self.n_direct_copied} "
                f"subword_averaged={self.n_subword_averaged} special={self.n_special}")

    def to_dict(self) -> dict:
        return {
            "n_dict_matched": self.n_dict_matched,
            "n_direct_copied": self.n_direct_copied,
            "n_subword_averaged": self.n_subword_averaged,
            "n_special": self.n_special,
            "mlm_bias": self.mlm_bias,
            "samples": self.samples,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _source_ids(case: MatchCase) -> tuple[int, ...]:
    if isinstance(case, SubwordAverage):
        return case.source_ids
    return (case.source_id,)


def segment_for_source(token: str, source_vocab: Vocabulary, target_prefix: str) -> list[int]:
    """Source pieces for a target token's surface form.

    A continuation token is segmented as a word-internal fragment so its
    first piece is a continuation piece as well.
    """
    if token.startswith(target_prefix) and len(token) > len(target_prefix):
        return encode_word(source_vocab, token[len(target_prefix):], continuation=True)
    return encode_word(source_vocab, token)


def match_vocabulary(target_vocab: Vocabulary, source_vocab: Vocabulary, dictionary: BilingualDictionary,
                     sample_size: int = 10) -> tuple[MatchPlan, TransplantReport]:
    """Assign each target token its initialization case.

    ``source_vocab`` doubles as the source tokenizer (greedy longest match).
    """
    prefix = target_vocab.continuation_prefix
    cases: list[MatchCase] = []
    report = TransplantReport(samples={"dict_match": [], "direct_copy": [], "subword_average": [], "special": []})

    def note(kind: str, text: str) -> None:
        if len(report.samples[kind]) < sample_size:
            report.samples[kind].append(text)

    for tid, token in enumerate(target_vocab.tokens):
        if tid < N_SPECIAL:
            cases.append(DirectCopy(source_vocab.token_to_id[SPECIAL_TOKENS[tid]]))
            report.n_special += 1
            note("special", token)
            continue
        hit = next(((t, source_vocab.token_to_id[t]) for t in lookup_token(dictionary, token, prefix)
                    if not t.startswith(source_vocab.continuation_prefix) and t in source_vocab), None)
        if hit is not None:
            cases.append(DictMatch(hit[1], hit[0]))
            report.n_dict_matched += 1
            note("dict_match", f"{token}->{hit[0]}")
        elif token in source_vocab:
            cases.append(DirectCopy(source_vocab.token_to_id[token]))
            report.n_direct_copied += 1
            note("direct_copy", token)
        else:
            pieces = segment_for_source(token, source_vocab, prefix)
            cases.append(SubwordAverage(tuple(pieces)))
            report.n_subword_averaged += 1
            note("subword_average", f"{token}->{' '.join(source_vocab.tokens[i] for i in pieces)}")
    return MatchPlan(cases), report


def apply_plan(plan: MatchPlan, source_embeddings: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Target embedding matrix: copied rows bit for bit, averaged rows as plain means.

    Means are accumulated in float64 in token order, then cast to the source
    dtype.
    """
    src = torch.as_tensor(source_embeddings).detach()
    if src.dim() != 2:
        raise ShapeError(f"source embeddings must be 2-D, got shape {tuple(src.shape)}")
    if plan.max_source_id() >= src.shape[0]:
        raise ShapeError(f"plan references source row {plan.max_source_id()} but only {src.shape[0]} rows exist")
    out = torch.empty(len(plan), src.shape[1], dtype=src.dtype)
    for row, case in enumerate(plan.cases):
        if isinstance(case, SubwordAverage):
            acc = torch.zeros(src.shape[1], dtype=torch.float64)
            for sid in case.source_ids:
                acc += src[sid].double()
            out[row] = (acc / len(case.source_ids)).to(src.dtype)
        else:
            out[row] = src[case.source_id]
    return out


def transplant_model(source_weights: MlmEncoder, plan: MatchPlan,
                     source_embeddings: torch.Tensor | None = None) -> MlmEncoder:
    """Copy every non-vocabulary parameter; rebuild embeddings from the plan.

    The MLM output bias is reset to zero for the target vocabulary.
    """
    cfg = source_weights.config
    state = source_weights.state_dict()
    check_shapes(cfg, state)
    if source_embeddings is None:
        source_embeddings = source_weights.token_embeddings
    elif torch.as_tensor(source_embeddings).shape[-1] != cfg.d_model:
        raise ShapeError(f"source embeddings dim {torch.as_tensor(source_embeddings).shape[-1]} != d_model {cfg.d_model}")
    target = MlmEncoder(cfg.replace(vocab_size=len(plan))).to(source_weights.token_embeddings.dtype)
    new_state = {k: v.clone() for k, v in state.items() if k not in ("token_embeddings", "mlm_bias")}
    new_state["token_embeddings"] = apply_plan(plan, source_embeddings)
    new_state["mlm_bias"] = torch.zeros(len(plan), dtype=state["mlm_bias"].dtype)
    target.load_state_dict(new_state)
    return target


def transfer_encoder(source_weights: MlmEncoder, vocab_size: int, seed: int) -> MlmEncoder:
    """Source encoder weights with freshly initialized (unmatched) embeddings."""
    cfg: EncoderConfig = source_weights.config.replace(vocab_size=vocab_size)
    fresh = init_random(cfg, seed, dtype=source_weights.token_embeddings.dtype)
    state = {k: v.clone() for k, v in source_weights.state_dict().items()}
    state["token_embeddings"] = fresh.token_embeddings.detach().clone()
    state["mlm_bias"] = torch.zeros(vocab_size, dtype=fresh.mlm_bias.dtype)
    target = MlmEncoder(cfg).to(fresh.token_embeddings.dtype)
    target.load_state_dict(state)
    return target


def save_embeddings(path: str | Path, embeddings: torch.Tensor | np.ndarray) -> None:
    tensorio.save_matrix(path, torch.as_tensor(embeddings).detach().cpu().numpy())


def load_embeddings(path: str | Path) -> torch.Tensor:
    return torch.from_numpy(tensorio.load_matrix(path))
