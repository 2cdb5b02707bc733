"""Small BERT-style encoder with a tied masked-LM head.

Thread-safety: forward passes and gradient evaluation only read the weights
and may run concurrently; anything that mutates parameters (optimizer steps,
transplantation into an existing module) must hold ``weights.guard.writing()``.
``forward_mlm`` and ``loss_and_grads`` take the shared side of the guard.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorio
from .errors import ConfigError, DataError, ShapeError

IGNORE_INDEX = -100
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 128
    dropout: float = 0.1

    def validate(self) -> None:
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def replace(self, **changes) -> "EncoderConfig":
        return EncoderConfig(**{**asdict(self), **changes})


class ReadWriteGuard:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextlib.contextmanager
    def reading(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextlib.contextmanager
    def writing(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()

    def __deepcopy__(self, memo):
        return ReadWriteGuard()


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.dropout = cfg.dropout
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.attn_out = nn.Linear(d, d)
        self.attn_norm = nn.LayerNorm(d, eps=1e-12)
        self.ff_in = nn.Linear(d, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, d)
        self.ff_norm = nn.LayerNorm(d, eps=1e-12)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.n_heads

        def heads(proj):
            return proj(x).view(b, t, h, d // h).transpose(1, 2)

        q, k, v = heads(self.query), heads(self.key), heads(self.value)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        attn = F.dropout(scores.softmax(-1), self.dropout, self.training)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = self.attn_norm(x + F.dropout(self.attn_out(ctx), self.dropout, self.training))
        ff = self.ff_out(F.gelu(self.ff_in(x)))
        return self.ff_norm(x + F.dropout(ff, self.dropout, self.training))


class MlmEncoder(nn.Module):
    """Token + learned position embeddings, post-norm layers, tied MLM head.

    The output projection is ``token_embeddings`` itself, so the embedding
    matrix and the MLM classifier share one storage.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        d = cfg.d_model
        self.token_embeddings = nn.Parameter(torch.zeros(cfg.vocab_size, d))
        self.position_embeddings = nn.Parameter(torch.zeros(cfg.max_seq_len, d))
        self.embedding_norm = nn.LayerNorm(d, eps=1e-12)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.head_dense = nn.Linear(d, d)
        self.head_norm = nn.LayerNorm(d, eps=1e-12)
        self.mlm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.guard = ReadWriteGuard()

    def encode(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        t = token_ids.shape[1]
        x = self.token_embeddings[token_ids] + self.position_embeddings[:t]
        x = F.dropout(self.embedding_norm(x), self.config.dropout, self.training)
        key_mask = attention_mask.bool()
        for layer in self.layers:
            x = layer(x, key_mask)
        return x

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        hidden = self.encode(token_ids, attention_mask)
        hidden = self.head_norm(F.gelu(self.head_dense(hidden)))
        return hidden @ self.token_embeddings.T + self.mlm_bias


def expected_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {name: tuple(p.shape) for name, p in MlmEncoder(cfg).state_dict().items()}


def init_random(cfg: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> MlmEncoder:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    model = MlmEncoder(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("norm.weight"):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)
    return model.to(dtype)


def _as_batch(token_ids, attention_mask, model: MlmEncoder):
    ids = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
    squeeze = ids.dim() == 1
    if squeeze:
        ids = ids[None]
    if attention_mask is None:
        mask = torch.ones_like(ids, dtype=torch.bool)
    else:
        mask = torch.as_tensor(np.asarray(attention_mask)).bool().reshape(ids.shape)
    cfg = model.config
    if ids.shape[1] > cfg.max_seq_len:
        raise DataError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.numel() and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DataError(f"token ids must lie in [0, {cfg.vocab_size})")
    return ids, mask, squeeze


def forward_mlm(weights: MlmEncoder, token_ids, attention_mask=None) -> torch.Tensor:
    """Logits over the vocabulary for every position (dropout off)."""
    ids, mask, squeeze = _as_batch(token_ids, attention_mask, weights)
    was_training = weights.training
    weights.eval()
    try:
        with weights.guard.reading(), torch.no_grad():
            logits = weights(ids, mask)
    finally:
        weights.train(was_training)
    return logits[0] if squeeze else logits


@dataclass
class Batch:
    input_ids: torch.Tensor  # (B, T) long
    attention_mask: torch.Tensor  # (B, T) bool
    labels: torch.Tensor  # (B, T) long, IGNORE_INDEX where unlabeled


def mlm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX)


def loss_and_grads(weights: MlmEncoder, batch: Batch) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean cross-entropy over labeled positions and its gradient for every parameter.

    Uses whatever train/eval mode the module is in; call ``weights.eval()``
    for deterministic results.
    """
    if not (batch.labels != IGNORE_INDEX).any():
        raise ValueError("batch has no masked positions")
    ids, mask, _ = _as_batch(batch.input_ids, batch.attention_mask, weights)
    names, params = zip(*weights.named_parameters())
    with weights.guard.reading():
        loss = mlm_loss(weights(ids, mask), batch.labels)
        grads = torch.autograd.grad(loss, params)
    return loss.item(), dict(zip(names, grads))


def check_shapes(cfg: EncoderConfig, tensors: dict[str, np.ndarray | torch.Tensor]) -> None:
    expected = expected_shapes(cfg)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ShapeError(f"{name}: shape {tuple(tensors[name].shape)} does not match config {shape}")


def save_model(path: str | Path, weights: MlmEncoder) -> None:
    """Write an LXCK checkpoint (float32 storage)."""
    tensors = {name: t.detach().cpu().numpy() for name, t in weights.state_dict().items()}
    tensorio.save_checkpoint(path, asdict(weights.config), tensors)


def load_model(path: str | Path) -> MlmEncoder:
    raw_cfg, tensors = tensorio.load_checkpoint(path)
    try:
        cfg = EncoderConfig(**raw_cfg)
    except TypeError as exc:
        raise DataError(f"{path}: bad encoder config ({exc})") from exc
    check_shapes(cfg, tensors)
    model = MlmEncoder(cfg)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    return model
