"""Configuration records and the strict JSON run-config format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

ROUTING_KINDS = ("relu", "topk", "topp")
GATINGS = ("non_gated", "gated")
ACTIVATIONS = ("normsilu", "normsilu_no_mean", "normsilu_no_rms", "silu")
ALPHA_MODES = ("vector", "scalar", "fixed")


class ConfigError(ValueError):
    pass


def _choice(value, allowed, what):
    if value not in allowed:
        raise ConfigError(f"{what} must be one of {allowed}, got {value!r}")


@dataclass
class MoEConfig:
    d_h: int = 64
    d_e: int = 8
    d_s: int = 16
    n_experts: int = 16
    routing: str = "relu"
    gating: str = "non_gated"
    activation: str = "normsilu"
    alpha_mode: str = "vector"
    alpha_init: float = 0.1
    top_k: int = 3
    top_p: float = 0.5
    fixed_scale: float = 1.0
    target_activation_ratio: float = 0.2
    init_std: float = 0.02
    rms_eps: float = 1e-6

    def validate(self) -> None:
        for name in ("d_h", "d_e", "d_s", "n_experts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"moe.{name} must be >= 1")
        _choice(self.routing, ROUTING_KINDS, "moe.routing")
        _choice(self.gating, GATINGS, "moe.gating")
        _choice(self.activation, ACTIVATIONS, "moe.activation")
        _choice(self.alpha_mode, ALPHA_MODES, "moe.alpha_mode")
        if self.routing == "topk" and not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"moe.top_k must be in [1, {self.n_experts}], got {self.top_k}")
        if self.routing == "topp" and not 0 < self.top_p <= 1:
            raise ConfigError(f"moe.top_p must be in (0, 1], got {self.top_p}")
        if not 0 < self.target_activation_ratio < 1:
            raise ConfigError("moe.target_activation_ratio must be in (0, 1)")


@dataclass
class LMConfig:
    vocab_size: int = 256
    d_h: int = 64
    n_layers: int = 4
    n_heads: int = 4
    context_length: int = 128
    # "moe" or "dense" per layer; None means dense first layer then MoE
    ffn_kinds: list[str] | None = None
    d_ff: int | None = None
    seed: int = 0

    def layer_kinds(self) -> list[str]:
        if self.ffn_kinds is not None:
            return list(self.ffn_kinds)
        return ["dense"] + ["moe"] * (self.n_layers - 1)

    def validate(self, moe: MoEConfig | None = None) -> None:
        if self.n_layers < 1 or self.vocab_size < 1 or self.context_length < 1:
            raise ConfigError("model: n_layers, vocab_size, context_length must be >= 1")
        if self.d_h % self.n_heads:
            raise ConfigError(f"model.d_h={self.d_h} is not divisible by n_heads={self.n_heads}")
        kinds = self.layer_kinds()
        if len(kinds) != self.n_layers:
            raise ConfigError(f"model.ffn_kinds has {len(kinds)} entries for {self.n_layers} layers")
        for k in kinds:
            _choice(k, ("dense", "moe"), "model.ffn_kinds entry")
        if "moe" in kinds and kinds[0] != "dense":
            raise ConfigError("layer 0 must use a dense FFN in an MoE model")
        if moe is not None and moe.d_h != self.d_h:
            raise ConfigError(f"moe.d_h={moe.d_h} differs from model.d_h={self.d_h}")


@dataclass
class TrainConfig:
    n_steps: int = 2000
    batch_size: int = 8
    seq_len: int = 128
    peak_lr: float = 1e-3
    warmup_steps: int = 50
    decay_steps: int = 200
    eta: float = 1.002
    lambda_init: float = 1e-8
    controller: bool = True
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    eval_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_steps < 1:
            raise ConfigError("train.n_steps must be >= 1")
        if self.warmup_steps + self.decay_steps > self.n_steps:
            raise ConfigError(
                f"train.warmup_steps + decay_steps = {self.warmup_steps + self.decay_steps} "
                f"exceeds n_steps = {self.n_steps}")
        if self.eta <= 1:
            raise ConfigError("train.eta must be > 1")
        if self.lambda_init < 0:
            raise ConfigError("train.lambda_init must be >= 0")


@dataclass
class PathsConfig:
    corpus: str = "corpus.txt"
    output_dir: str = "runs/default"


@dataclass
class RunConfig:
    model: LMConfig = field(default_factory=LMConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        self.moe.validate()
        self.model.validate(self.moe if "moe" in self.model.layer_kinds() else None)
        self.train.validate()
        if self.train.seq_len > self.model.context_length:
            raise ConfigError("train.seq_len exceeds model.context_length")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"model": LMConfig, "moe": MoEConfig, "train": TrainConfig, "paths": PathsConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**data)


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - set(_SECTIONS) - {"schema_version"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**kw, schema_version=data.get("schema_version", SCHEMA_VERSION))
    return cfg.validate()


def load_run_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return run_config_from_dict(data)


def desk_preset() -> RunConfig:
    """Desk-scale DECO defaults (eta and lambda_init as in the small/medium runs)."""
    return RunConfig().validate()


def paper_small_preset() -> RunConfig:
    """Shapes of the 0.11B setting, kept for reference; far too large to train here."""
    moe = MoEConfig(d_h=768, d_e=64, d_s=128, n_experts=42)
    model = LMConfig(d_h=768, n_layers=16, n_heads=12, context_length=1024)
    train = TrainConfig(n_steps=15000, peak_lr=1.175e-3, warmup_steps=100, decay_steps=1000,
                        eta=1.002, lambda_init=1e-8, seq_len=1024)
    return RunConfig(model=model, moe=moe, train=train).validate()


PRESETS = {"desk": desk_preset, "paper-small": paper_small_preset}


def with_moe(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, moe=replace(cfg.moe, **changes))
