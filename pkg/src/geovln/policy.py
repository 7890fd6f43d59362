"""Language encoder, recurrent cross-modal state update and the multiway
decision head.

Action vectors have ``K + 1`` entries per row with STOP in the last
position.  In a padded batch ``K`` is the batch maximum and padded candidate
slots are masked out of the final softmax; STOP therefore sits at column
``K_max`` and callers map it back to action ``K`` of the row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .nn_core import Affine, LayerNorm, affine, dropout, softmax_over_axis
from .world import MODALITIES


def sinusoidal_positions(length: int, dim: int) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table


class SelfAttentionLayer(nn.Module):
    """Post-norm transformer layer: multi-head attention then a GELU FFN."""

    def __init__(self, d: int, heads: int, ff_mult: int = 4, eps: float = 1e-6, dropout: float = 0.0, gen=None):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Affine(d, d, gen=gen)
        self.k = Affine(d, d, gen=gen)
        self.v = Affine(d, d, gen=gen)
        self.o = Affine(d, d, gen=gen)
        self.norm1 = LayerNorm(d, eps)
        self.ff1 = Affine(d, ff_mult * d, gen=gen)
        self.ff2 = Affine(ff_mult * d, d, gen=gen)
        self.norm2 = LayerNorm(d, eps)
        self.dropout = dropout

    def forward(self, x: Tensor, key_mask: Tensor, rng: torch.Generator | None = None) -> Tensor:
        b, n, d = x.shape
        h = self.heads

        def split(t: Tensor) -> Tensor:
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        attn = softmax_over_axis(logits, axis=-1, mask=key_mask[:, None, None, :])
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = self.norm1(x + dropout(self.o(ctx), self.dropout, self.training, rng))
        ff = self.ff2(torch.nn.functional.gelu(self.ff1(x)))
        return self.norm2(x + dropout(ff, self.dropout, self.training, rng))


class LanguageEncoder(nn.Module):
    def __init__(self, vocab_size: int, d: int, layers: int = 2, heads: int = 4, eps: float = 1e-6, dropout: float = 0.0, gen=None, max_len: int = 64):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Parameter(torch.randn(vocab_size, d, generator=gen, dtype=torch.float64).to(torch.get_default_dtype()) * 0.5)
        self.register_buffer("positions", sinusoidal_positions(max_len, d).to(torch.get_default_dtype()), persistent=False)
        self.layers = nn.ModuleList(SelfAttentionLayer(d, heads, eps=eps, dropout=dropout, gen=gen) for _ in range(layers))

    def forward(self, tokens: Tensor, pad_mask: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        """``tokens``: B x L int; ``pad_mask``: B x L, true for real tokens.

        Returns the per-token encodings (B x L x d) and the initial state
        (the position-0 output).
        """
        if tokens.numel() == 0 or tokens.shape[1] == 0:
            raise ValueError("instruction must contain at least one token")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size:
            raise ValueError(f"token outside vocabulary of size {self.vocab_size}")
        if tokens.shape[1] > self.positions.shape[0]:
            raise ValueError(f"instruction longer than {self.positions.shape[0]} tokens")
        x = self.embedding[tokens] + self.positions[: tokens.shape[1]]
        for layer in self.layers:
            x = layer(x, pad_mask, rng)
        return x, x[:, 0]


class StateUpdater(nn.Module):
    """Runs ``[state ; language ; visual ; STOP]`` through a small transformer
    and returns the new state (position-0 output)."""

    def __init__(self, d: int, layers: int = 2, heads: int = 4, eps: float = 1e-6, dropout: float = 0.0, gen=None):
        super().__init__()
        self.type_embedding = nn.Parameter(torch.randn(4, d, generator=gen, dtype=torch.float64).to(torch.get_default_dtype()) * 0.1)
        self.stop_embedding = nn.Parameter(torch.randn(d, generator=gen, dtype=torch.float64).to(torch.get_default_dtype()) * 0.5)
        self.layers = nn.ModuleList(SelfAttentionLayer(d, heads, eps=eps, dropout=dropout, gen=gen) for _ in range(layers))

    def forward(self, state: Tensor, language: Tensor, lang_mask: Tensor, visual: Tensor, valid: Tensor, rng=None) -> Tensor:
        b = state.shape[0]
        te = self.type_embedding
        x = torch.cat(
            [
                (state + te[0])[:, None],
                language + te[1],
                visual + te[2],
                (self.stop_embedding + te[3]).expand(b, 1, -1),
            ],
            dim=1,
        )
        ones = torch.ones(b, 1, dtype=torch.bool, device=state.device)
        key_mask = torch.cat([ones, lang_mask, valid, ones], dim=1)
        for layer in self.layers:
            x = layer(x, key_mask, rng)
        return x[:, 0]


@dataclass
class ActionDistribution:
    scores: Tensor  # B x (K+1), masked columns hold -inf
    probs: Tensor  # B x (K+1)
    weights: Tensor | None  # B x 3 modality weights (rgb, dep, nor); None for single-way scoring
    modality_scores: dict[str, Tensor]  # per-modality B x (K+1)

    def greedy(self) -> Tensor:
        return self.probs.argmax(dim=-1)


def append_stop_row(features: Tensor) -> Tensor:
    """Append the zero-feature STOP pseudo-candidate as the last row."""
    pad = torch.zeros_like(features[:, :1])
    return torch.cat([features, pad], dim=1)


def action_mask(valid: Tensor) -> Tensor:
    """B x (K+1) mask: real candidates plus STOP."""
    return torch.cat([valid, torch.ones_like(valid[:, :1])], dim=1)


class ModalityScorer(nn.Module):
    """``A = FC(LN(F)) (s W)^T / sqrt(d_h)`` for one modality."""

    def __init__(self, feature_width: int, d_h: int, eps: float = 1e-6, gen=None):
        super().__init__()
        self.state_proj = nn.Parameter(
            ((torch.rand(d_h, d_h, generator=gen, dtype=torch.float64) * 2 - 1) / math.sqrt(d_h)).to(torch.get_default_dtype())
        )
        self.norm = LayerNorm(feature_width, eps)
        self.fc = Affine(feature_width, d_h, gen=gen)
        self.d_h = d_h

    def forward(self, state: Tensor, features: Tensor) -> Tensor:
        s = affine(state, self.state_proj)  # B x d_h
        f = self.fc(self.norm(features))  # B x (K+1) x d_h
        return (f @ s[:, :, None]).squeeze(-1) / math.sqrt(self.d_h)


class DecisionHead(nn.Module):
    def __init__(self, feature_width: int, d_h: int, modalities=MODALITIES, multiway: bool = True, eps: float = 1e-6, gen=None):
        super().__init__()
        self.modalities = tuple(m for m in MODALITIES if m in modalities)
        self.multiway = multiway
        if multiway:
            self.scorers = nn.ModuleDict({m: ModalityScorer(feature_width, d_h, eps, gen) for m in self.modalities})
            self.mix_weight = nn.Parameter(torch.zeros(d_h, 3))
            self.mix_bias = nn.Parameter(torch.zeros(3))
        else:
            self.single = ModalityScorer(d_h, d_h, eps, gen)

    def modality_weights(self, state: Tensor) -> Tensor:
        logits = affine(state, self.mix_weight, self.mix_bias)
        present = torch.tensor([m in self.modalities for m in MODALITIES], device=state.device)
        return softmax_over_axis(logits, axis=-1, mask=present)

    def forward(self, state: Tensor, enhanced: dict[str, Tensor], fused: Tensor, valid: Tensor) -> ActionDistribution:
        amask = action_mask(valid)
        if self.multiway:
            scores = {m: self.scorers[m](state, append_stop_row(enhanced[m])) for m in self.modalities}
            weights = self.modality_weights(state)
            total = decide_scores(scores, weights)
        else:
            scores = {"fused": self.single(state, append_stop_row(fused))}
            weights = None
            total = scores["fused"]
        probs = softmax_over_axis(total, axis=-1, mask=amask)
        return ActionDistribution(total.masked_fill(~amask, -math.inf), probs, weights, scores)


def decide_scores(scores: dict[str, Tensor], weights: Tensor) -> Tensor:
    """Weighted sum of per-modality scores; absent modalities contribute nothing."""
    total = 0.0
    for i, m in enumerate(MODALITIES):
        if m in scores:
            total = total + weights[:, i : i + 1] * scores[m]
    return total


def decide(scores: dict[str, Tensor], weights: Tensor, valid: Tensor | None = None) -> ActionDistribution:
    total = decide_scores(scores, weights)
    mask = torch.ones_like(total, dtype=torch.bool) if valid is None else action_mask(valid)
    probs = softmax_over_axis(total, axis=-1, mask=mask)
    return ActionDistribution(total, probs, weights, scores)


class Critic(nn.Module):
    def __init__(self, d_h: int, gen=None):
        super().__init__()
        self.hidden = Affine(d_h, d_h, gen=gen)
        self.out = Affine(d_h, 1, gen=gen)

    def forward(self, state: Tensor) -> Tensor:
        return self.out(torch.tanh(self.hidden(state))).squeeze(-1)
