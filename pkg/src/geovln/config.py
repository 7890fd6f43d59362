"""Flat ``key=value`` run configuration shared by every command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .learning import TrainConfig
from .model import ModelConfig
from .slot_fusion import VARIANTS, LsaConfig
from .world import MODALITIES, FeatureSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # world and splits
    n_nodes: int = 50
    extent: float = 20.0
    k_nearest: int = 3
    world_seed: int = 0
    n_seen_worlds: int = 1
    n_unseen_worlds: int = 1
    n_train: int = 200
    n_val_seen: int = 50
    n_val_unseen: int = 50
    min_hops: int = 2
    max_hops: int = 6
    max_steps: int = 15
    success_radius: float = 3.0
    feature_dim: int = 64
    feature_noise: float = 0.05
    n_landmarks: int = 20
    bank_seed: int = 0
    features_dir: str = ""
    # model
    variant: str = "TwoSM"
    use_lsa: bool = True
    lsa_iterations: int = 3
    lsa_dropout: float = 0.1
    learned_qkv: bool = False
    canonical_renorm: bool = False
    canonical_mlp: bool = False
    slot_dropout_per_iteration: bool = False
    angle_repeat: int = 8
    d_h: int = 128
    heads: int = 4
    state_layers: int = 2
    lang_layers: int = 2
    dropout: float = 0.1
    modalities: str = "rgb,dep,nor"
    multiway: bool = True
    eps: float = 1e-6
    model_seed: int = 0
    dtype: str = "float32"
    # training
    lam: float = 0.2
    lam_reg: float = 0.01
    gamma: float = 0.9
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    warmup_frac: float = 0.05
    lr_cycles: int = 1
    lr_gamma: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 8
    iterations: int = 5000
    clip_norm: float = 5.0
    train_seed: int = 0
    il_only: bool = False
    il_warmup: int = 0
    two_rollouts: bool = True
    eval_every: int = 250
    checkpoint_every: int = 1000
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"
    train_split: str = "train.split"
    probe_split: str = "val_seen.split"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {', '.join(VARIANTS)}, got {self.variant!r}")
        bad = [m for m in self.modality_tuple if m not in MODALITIES]
        if bad or not self.modality_tuple:
            raise ConfigError(f"modalities: unknown or empty entries in {self.modalities!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: expected float32 or float64, got {self.dtype!r}")
        if self.n_nodes < 2:
            raise ConfigError("n_nodes: must be at least 2")

    @property
    def modality_tuple(self) -> tuple[str, ...]:
        return tuple(m.strip() for m in self.modalities.split(",") if m.strip())

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(self.feature_dim, self.feature_noise, self.n_landmarks, self.bank_seed)

    def model_config(self) -> ModelConfig:
        lsa = LsaConfig(
            iterations=self.lsa_iterations,
            dropout=self.lsa_dropout,
            variant=self.variant,
            learned_qkv=self.learned_qkv,
            canonical_renorm=self.canonical_renorm,
            canonical_mlp=self.canonical_mlp,
            slot_dropout_per_iteration=self.slot_dropout_per_iteration,
            d_hidden=self.d_h,
            eps=self.eps,
            enabled=self.use_lsa,
        )
        return ModelConfig(
            feature_dim=self.feature_dim,
            angle_repeat=self.angle_repeat,
            d_h=self.d_h,
            heads=self.heads,
            state_layers=self.state_layers,
            lang_layers=self.lang_layers,
            n_landmarks=self.n_landmarks,
            dropout=self.dropout,
            lsa=lsa,
            modalities=self.modality_tuple,
            multiway=self.multiway,
            eps=self.eps,
            seed=self.model_seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            lam_reg=self.lam_reg,
            gamma=self.gamma,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            warmup_frac=self.warmup_frac,
            lr_cycles=self.lr_cycles,
            lr_gamma=self.lr_gamma,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            iterations=self.iterations,
            clip_norm=self.clip_norm,
            seed=self.train_seed,
            il_only=self.il_only,
            il_warmup=self.il_warmup,
            two_rollouts=self.two_rollouts,
            success_radius=self.success_radius,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
        )

    def resolved(self) -> dict[str, str]:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.resolved().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string overrides to ``base``; unknown keys are rejected by name."""
    known = {f.name: _TYPES[f.type] for f in fields(RunConfig)}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, v, known[k]) for k, v in pairs.items()}
    try:
        return dataclasses.replace(base or RunConfig(), **values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    if path:
        try:
            with open(path) as fh:
                pairs.update(parse_text(fh.read(), path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    pairs.update(parse_text("\n".join(overrides or []), "--set"))
    return parse_pairs(pairs)
