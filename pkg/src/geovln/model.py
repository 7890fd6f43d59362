"""The full agent: two-stage fusion, language encoder, recurrent state
update, multiway decision head and critic, plus batch collation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import Tensor, nn

from .encoding import ModalFeatures, assemble
from .policy import ActionDistribution, Critic, DecisionHead, LanguageEncoder, StateUpdater
from .slot_fusion import FusedRepresentation, FusionInputs, LsaConfig, TwoStageModule, local_mask
from .world import LANDMARK_OFFSET, MODALITIES, N_VIEWS, PAD, Episode, WorldGraph, observe


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    angle_repeat: int = 8
    d_h: int = 128
    heads: int = 4
    state_layers: int = 2
    lang_layers: int = 2
    n_landmarks: int = 20
    dropout: float = 0.1
    lsa: LsaConfig = field(default_factory=LsaConfig)
    modalities: tuple[str, ...] = MODALITIES
    multiway: bool = True
    eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.lsa.d_hidden != self.d_h:
            object.__setattr__(self, "lsa", replace(self.lsa, d_hidden=self.d_h))
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")

    @property
    def vocab_size(self) -> int:
        return LANDMARK_OFFSET + self.n_landmarks

    @property
    def angle_dim(self) -> int:
        return 4 * self.angle_repeat


@dataclass
class StepOutput:
    state: Tensor
    dist: ActionDistribution
    value: Tensor
    fused: FusedRepresentation


class GeoVLNAgent(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.fusion = TwoStageModule(config.feature_dim, config.angle_dim, config.lsa, config.modalities, gen)
        self.language = LanguageEncoder(
            config.vocab_size, config.d_h, config.lang_layers, config.heads, config.eps, config.dropout, gen
        )
        self.updater = StateUpdater(config.d_h, config.state_layers, config.heads, config.eps, config.dropout, gen)
        self.head = DecisionHead(
            config.feature_dim + config.angle_dim, config.d_h, config.modalities, config.multiway, config.eps, gen
        )
        self.critic = Critic(config.d_h, gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.parameters().__next__().dtype

    def encode(self, tokens: Tensor, pad_mask: Tensor, rng: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        return self.language(tokens, pad_mask, rng)

    def act(
        self,
        state: Tensor,
        language: Tensor,
        lang_mask: Tensor,
        inputs: FusionInputs,
        rng: torch.Generator | None = None,
    ) -> StepOutput:
        fused = self.fusion(inputs, rng)
        new_state = self.updater(state, language, lang_mask, fused.fused, inputs.valid, rng)
        dist = self.head(new_state, fused.enhanced, fused.fused, inputs.valid)
        return StepOutput(new_state, dist, self.critic(new_state), fused)


# --------------------------------------------------------------------------
# collation


def viewpoint_inputs(world: WorldGraph, node: int, repeat: int, dtype: torch.dtype) -> dict:
    """Per-viewpoint tensors, cached on the (immutable) world."""
    key = ("inputs", node, repeat, dtype)
    cached = world._cache.get(key)
    if cached is None:
        feats = assemble(observe(world, node), repeat)
        cached = _to_tensors(feats, dtype)
        world._cache[key] = cached
    return cached


def _to_tensors(feats: ModalFeatures, dtype: torch.dtype) -> dict:
    def t(a: np.ndarray) -> Tensor:
        return torch.tensor(np.asarray(a), dtype=dtype)

    return {
        "candidate": {m: t(feats.candidate[m]) for m in MODALITIES},
        "visual": {m: t(feats.visual[m]) for m in MODALITIES},
        "candidate_angles": t(feats.candidate_angles),
        "panorama": {m: t(feats.panorama[m]) for m in MODALITIES},
        "panorama_visual": {m: t(feats.panorama_visual[m]) for m in MODALITIES},
        "mask": torch.as_tensor(local_mask(feats.grid_indices)),
        "k": feats.num_candidates,
    }


def _pad_stack(rows: list[Tensor], k_max: int) -> Tensor:
    out = rows[0].new_zeros((len(rows), k_max) + tuple(rows[0].shape[1:]))
    for i, r in enumerate(rows):
        out[i, : r.shape[0]] = r
    return out


def collate(items: list[dict]) -> FusionInputs:
    k_max = max(it["k"] for it in items)
    valid = torch.zeros(len(items), k_max, dtype=torch.bool)
    for i, it in enumerate(items):
        valid[i, : it["k"]] = True
    return FusionInputs(
        candidate={m: _pad_stack([it["candidate"][m] for it in items], k_max) for m in MODALITIES},
        visual={m: _pad_stack([it["visual"][m] for it in items], k_max) for m in MODALITIES},
        candidate_angles=_pad_stack([it["candidate_angles"] for it in items], k_max),
        panorama={m: torch.stack([it["panorama"][m] for it in items]) for m in MODALITIES},
        panorama_visual={m: torch.stack([it["panorama_visual"][m] for it in items]) for m in MODALITIES},
        mask=_pad_stack([it["mask"] for it in items], k_max) if k_max else torch.zeros(len(items), 0, N_VIEWS, dtype=torch.bool),
        valid=valid,
    )


def collate_instructions(episodes: list[Episode]) -> tuple[Tensor, Tensor]:
    length = max(len(ep.instruction) for ep in episodes)
    tokens = torch.full((len(episodes), length), PAD, dtype=torch.long)
    mask = torch.zeros(len(episodes), length, dtype=torch.bool)
    for i, ep in enumerate(episodes):
        tokens[i, : len(ep.instruction)] = torch.tensor(ep.instruction)
        mask[i, : len(ep.instruction)] = True
    return tokens, mask


def single_inputs(features: ModalFeatures, dtype: torch.dtype = torch.float64) -> FusionInputs:
    """Batch of one from an assembled viewpoint (no padding)."""
    return collate([_to_tensors(features, dtype)])
