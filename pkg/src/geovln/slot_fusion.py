"""Local-aware slot attention and the two-stage fusion module.

Slots are the candidate views.  They are initialized from the RGB candidate
features, attend to the panorama cells within 30 degrees of their own view,
compete for each cell through a softmax over the slot axis, and are refined
by a GRU plus residual MLP.  The refined visual block is added back onto the
raw candidate features, concatenated with the depth/normal features and
projected to the fused width.

All tensors carry a leading batch axis.  Padded candidate rows have an
all-false mask row, so they never take attention mass from real slots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .nn_core import Affine, GRUCell, LayerNorm, ResidualMLP, dropout, softmax_over_axis
from .world import MODALITIES, N_VIEWS, grid_angles

log = logging.getLogger(__name__)

VARIANTS = ("TwoSM", "TwoSM-1", "TwoSM-2", "TwoSM-3")


@dataclass(frozen=True)
class LsaConfig:
    iterations: int = 3
    dropout: float = 0.1
    variant: str = "TwoSM"
    learned_qkv: bool = False
    # Divide attention by its per-slot total before pooling (canonical slot attention).
    canonical_renorm: bool = False
    # Feed the slots, not the updates, to the residual MLP.
    canonical_mlp: bool = False
    # Re-apply the slot dropout at every iteration instead of once.
    slot_dropout_per_iteration: bool = False
    d_hidden: int = 128
    mlp_hidden: int | None = None
    eps: float = 1e-6
    enabled: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("slot attention needs at least one iteration")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def local_mask(grid_indices, max_angle: float = 30.0) -> np.ndarray:
    """K x 36 boolean mask of panorama cells within ``max_angle`` of each
    candidate's snapped heading and elevation."""
    cells = np.array([grid_angles(j) for j in range(N_VIEWS)])
    mask = np.zeros((len(grid_indices), N_VIEWS), dtype=bool)
    for i, g in enumerate(grid_indices):
        heading, elevation = grid_angles(g)
        dh = np.abs(cells[:, 0] - heading) % 360.0
        dh = np.minimum(dh, 360.0 - dh)
        mask[i] = (dh <= max_angle + 1e-9) & (np.abs(cells[:, 1] - elevation) <= max_angle + 1e-9)
    return mask


@dataclass
class SlotState:
    slots: Tensor  # B x K x D
    trace: list[Tensor] = field(default_factory=list)  # per iteration, B x K x N


class SlotAttention(nn.Module):
    """One slot-attention stack.

    ``slot_dim`` is the width of slots and keys (visual + angle block);
    ``value_dim`` is the width of values, which carry no angle block.
    """

    def __init__(self, slot_dim: int, value_dim: int, config: LsaConfig, gen: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.slot_dim = slot_dim
        self.norm_slots = LayerNorm(slot_dim, config.eps)
        self.norm_keys = LayerNorm(slot_dim, config.eps)
        self.norm_values = LayerNorm(value_dim, config.eps)
        if config.learned_qkv:
            self.project_q = Affine(slot_dim, slot_dim, bias=False, gen=gen)
            self.project_k = Affine(slot_dim, slot_dim, bias=False, gen=gen)
            self.project_v = Affine(value_dim, value_dim, bias=False, gen=gen)
        self.gru = GRUCell(value_dim, slot_dim, gen=gen)
        mlp_in = slot_dim if config.canonical_mlp else value_dim
        self.mlp = ResidualMLP(mlp_in, config.mlp_hidden or slot_dim, slot_dim, eps=config.eps, gen=gen)

    def iterate(
        self,
        slots: Tensor,
        keys: Tensor,
        values: Tensor,
        mask: Tensor,
        rng: torch.Generator | None,
    ) -> tuple[Tensor, Tensor]:
        """One attention/GRU/MLP round on already normalized keys and values."""
        cfg = self.config
        q = dropout(self.norm_slots(slots), cfg.dropout, self.training, rng)
        k = dropout(keys, cfg.dropout, self.training, rng)
        v = dropout(values, cfg.dropout, self.training, rng)
        if cfg.learned_qkv:
            q, k, v = self.project_q(q), self.project_k(k), self.project_v(v)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.slot_dim)
        attn = softmax_over_axis(logits, axis=-2, mask=mask)
        pool = attn / (attn.sum(dim=-1, keepdim=True) + 1e-8) if cfg.canonical_renorm else attn
        updates = pool @ v
        slots = self.gru(slots, updates)
        slots = slots + self.mlp(slots if cfg.canonical_mlp else updates)
        return slots, attn

    def forward(
        self,
        slots_init: Tensor,
        keys: Tensor,
        values: Tensor,
        mask: Tensor,
        rng: torch.Generator | None = None,
        iterations: int | None = None,
    ) -> SlotState:
        cfg = self.config
        if log.isEnabledFor(logging.DEBUG):
            log.debug("%d slot rows with an empty mask receive zero updates", int((~mask.any(dim=-1)).sum()))
        keys = self.norm_keys(keys)
        values = self.norm_values(values)
        slots = dropout(slots_init, cfg.dropout, self.training, rng)
        state = SlotState(slots)
        for it in range(iterations or cfg.iterations):
            if it > 0 and cfg.slot_dropout_per_iteration:
                slots = dropout(slots, cfg.dropout, self.training, rng)
            slots, attn = self.iterate(slots, keys, values, mask, rng)
            state.trace.append(attn)
        state.slots = slots
        return state

    @torch.no_grad()
    def make_identity_(self) -> None:
        """Zero the GRU and MLP so that a round leaves the slots untouched.

        All-zero GRU weights alone would halve the state (update gate at 0.5),
        so the update-gate bias is pushed far enough negative for the sigmoid
        to underflow to exactly zero.
        """
        for name, p in self.gru.gate_params().items():
            p.zero_()
        self.gru.b_z.fill_(-1e4)
        self.mlp.w2.zero_()
        self.mlp.b2.zero_()


@dataclass
class FusionInputs:
    """Padded, batched per-viewpoint features (see ``encoding.ModalFeatures``)."""

    candidate: dict[str, Tensor]  # B x K x (d + 4r)
    visual: dict[str, Tensor]  # B x K x d
    candidate_angles: Tensor  # B x K x 4r
    panorama: dict[str, Tensor]  # B x 36 x (d + 4r)
    panorama_visual: dict[str, Tensor]  # B x 36 x d
    mask: Tensor  # B x K x 36
    valid: Tensor  # B x K

    def index(self, rows: Tensor) -> "FusionInputs":
        return FusionInputs(
            {m: t[rows] for m, t in self.candidate.items()},
            {m: t[rows] for m, t in self.visual.items()},
            self.candidate_angles[rows],
            {m: t[rows] for m, t in self.panorama.items()},
            {m: t[rows] for m, t in self.panorama_visual.items()},
            self.mask[rows],
            self.valid[rows],
        )


@dataclass
class FusedRepresentation:
    enhanced: dict[str, Tensor]  # per-modality decision-head features, B x K x (d + 4r)
    fused: Tensor  # B x K x d_hidden
    slot_states: dict[str, SlotState]


class TwoStageModule(nn.Module):
    def __init__(
        self,
        feature_dim: int,
        angle_dim: int,
        config: LsaConfig,
        modalities: tuple[str, ...] = MODALITIES,
        gen: torch.Generator | None = None,
    ):
        super().__init__()
        if "rgb" not in modalities:
            raise ValueError("the RGB modality is always required")
        self.config = config
        self.modalities = tuple(m for m in MODALITIES if m in modalities)
        self.feature_dim = feature_dim
        slot_dim = feature_dim + angle_dim
        stacks = {}
        if config.enabled:
            stack_modalities = self.modalities if config.variant == "TwoSM-1" else ("rgb",)
            for m in stack_modalities:
                stacks[m] = SlotAttention(slot_dim, feature_dim, config, gen)
        self.stacks = nn.ModuleDict(stacks)
        self.encoder = Affine(self._encoder_width(feature_dim, angle_dim), config.d_hidden, gen=gen)
        self.encoder_norm = LayerNorm(config.d_hidden, config.eps)

    def _encoder_modalities(self) -> tuple[str, ...]:
        return ("rgb",) if self.config.variant == "TwoSM-2" else self.modalities

    def _encoder_width(self, d: int, angle_dim: int) -> int:
        return d * len(self._encoder_modalities()) + angle_dim

    def run_lsa(self, inputs: FusionInputs, rng: torch.Generator | None = None) -> dict[str, SlotState]:
        variant = self.config.variant
        states = {}
        for m, stack in self.stacks.items():
            if variant in ("TwoSM-2", "TwoSM-3"):
                # RGB-guided: slots stay RGB, keys/values span every modality's cells.
                keys = torch.cat([inputs.panorama[k] for k in self.modalities], dim=1)
                values = torch.cat([inputs.panorama_visual[k] for k in self.modalities], dim=1)
                mask = inputs.mask.repeat(1, 1, len(self.modalities))
            else:
                keys, values, mask = inputs.panorama[m], inputs.panorama_visual[m], inputs.mask
            states[m] = stack(inputs.candidate[m], keys, values, mask, rng)
        return states

    def fuse(self, states: dict[str, SlotState], inputs: FusionInputs) -> FusedRepresentation:
        d = self.feature_dim
        ang = inputs.candidate_angles
        visual = dict(inputs.visual)
        for m, state in states.items():
            visual[m] = inputs.visual[m] + state.slots[..., :d]
        enhanced = {m: torch.cat([visual[m], ang], dim=-1) for m in self.modalities}
        encoder_in = torch.cat([visual[m] for m in self._encoder_modalities()] + [ang], dim=-1)
        fused = self.encoder_norm(self.encoder(encoder_in))
        return FusedRepresentation(enhanced, fused, states)

    def forward(self, inputs: FusionInputs, rng: torch.Generator | None = None) -> FusedRepresentation:
        return self.fuse(self.run_lsa(inputs, rng), inputs)


def split_trace(attn: Tensor, n_modalities: int) -> list[Tensor]:
    """Split a ``K x (36 * n)`` RGB-guided trace into per-modality ``K x 36`` blocks."""
    return list(attn.split(N_VIEWS, dim=-1)) if attn.shape[-1] == N_VIEWS * n_modalities else [attn]


__all__ = [
    "VARIANTS",
    "LsaConfig",
    "local_mask",
    "SlotState",
    "SlotAttention",
    "FusionInputs",
    "FusedRepresentation",
    "TwoStageModule",
    "split_trace",
]
