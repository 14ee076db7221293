"""Run configuration: one flat dataclass, parsed from key=value or JSON text plus overrides."""
from __future__ import annotations

import json
import math
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .adapter import RECON_MODES, AdapterConfig
from .decoder import ADAPTER_TYPES, LORA_TARGETS, DecoderConfig
from .synth import DomainShift, SynthSpec

SA_PLACEMENTS = ("last_adapter_layer", "all_adapter_layers")
SA_TARGETS = ("planted", "features")
LR_SCHEDULES = ("constant", "cosine")


class RunConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # slot adapter
    adapter_dim: int = 512
    n_slots: int = 4
    slot_iters: int = 3
    slot_heads: int = 8
    recon_mode: str = "cross_attention"
    eps_token_norm: float = 1e-8
    # decoder
    n_layers: int = 6
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    adapter_layers: tuple = (1, 2)
    lora_layers: tuple = (3, 4, 5, 6)
    lora_rank: int = 16
    lora_alpha: float = 64.0
    lora_targets: tuple = LORA_TARGETS
    adapter_type: str = "slot"
    max_decode_len: int = 16
    # synthetic data
    frames_per_video: int = 20
    tokens_per_frame: int = 64
    n_entities: int = 4
    feature_dim: int = 16
    n_classes: int = 8
    n_event_classes: int = 4
    separation: float = 3.0
    frame_interval: float = 0.5
    min_window: int = 3
    max_window: int = 10
    world_seed: int = 0
    shift_rotation_seed: int = 1234
    shift_bias: float = 1.0
    n_train: int = 2000
    n_eval: int = 200
    # objective / optimisation
    lambda_sa: float = 0.1
    sa_placement: str = "last_adapter_layer"
    sa_target: str = "planted"
    epochs: int = 5
    lr: float = 5e-5
    lr_schedule: str = "constant"  # or "cosine": linear warmup then cosine decay to 0
    warmup_steps: int = 0
    weight_decay: float = 0.0
    batch_size: int = 16
    train_base: bool = False
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    pretrain_world_seed: int = -1  # -1: pretrain on the fine-tuning training set
    pretrain_n_train: int = 2000  # videos drawn from the pretraining world
    checkpoint_every: int = 0  # steps; 0 = only at the end
    eval_batch_size: int = 50
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        validate(self)

    # ---- derived component configs

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(
            D=self.dim,
            d=self.adapter_dim,
            n_slots=self.n_slots,
            iters=self.slot_iters,
            heads=self.slot_heads,
            recon_mode=self.recon_mode,
            eps_token_norm=self.eps_token_norm,
        )

    def decoder_config(self) -> DecoderConfig:
        T = self.frames_per_video
        seq = T * (self.tokens_per_frame + 6) + 2 + self.max_decode_len
        return DecoderConfig(
            n_layers=self.n_layers,
            dim=self.dim,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            feature_dim=self.feature_dim,
            max_len=seq,
            adapter_layers=tuple(self.adapter_layers) if self.adapter_type != "none" else (),
            lora_layers=tuple(self.lora_layers),
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            lora_targets=tuple(self.lora_targets),
            adapter_type=self.adapter_type,
            max_decode_len=self.max_decode_len,
            frames_per_video=T,
        )

    def synth_spec(self, seed: int | None = None) -> SynthSpec:
        return SynthSpec(
            seed=self.seed if seed is None else seed,
            T=self.frames_per_video,
            N=self.tokens_per_frame,
            n_entities=self.n_entities,
            feature_dim=self.feature_dim,
            n_classes=self.n_classes,
            n_event_classes=self.n_event_classes,
            separation=self.separation,
            frame_interval=self.frame_interval,
            min_window=self.min_window,
            max_window=self.max_window,
            world_seed=self.world_seed,
        )

    def pretrain_spec(self) -> SynthSpec | None:
        """Synthetic world the base is pretrained in, or None to reuse the training set."""
        if self.pretrain_world_seed < 0:
            return None
        return replace(self.synth_spec(), world_seed=self.pretrain_world_seed, seed=self.seed + 7919)

    def domain_shift(self) -> DomainShift:
        return DomainShift(rotation_seed=self.shift_rotation_seed, bias=self.shift_bias)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


_FIELDS = {f.name: f for f in fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)
_ALIASES = {"lambda": "lambda_sa"}


def _positive(cfg, *keys):
    for k in keys:
        if getattr(cfg, k) < 1:
            raise RunConfigError(k, f"must be >= 1, got {getattr(cfg, k)}")


def validate(cfg: RunConfig) -> None:
    _positive(
        cfg, "adapter_dim", "n_slots", "slot_iters", "slot_heads", "n_layers", "dim", "heads", "mlp_ratio",
        "max_decode_len", "frames_per_video", "tokens_per_frame", "n_entities", "feature_dim", "n_classes",
        "n_train", "n_eval", "epochs", "batch_size", "eval_batch_size", "min_window",
    )
    for k in ("lr", "pretrain_lr", "separation", "frame_interval", "eps_token_norm"):
        v = getattr(cfg, k)
        if not (math.isfinite(v) and v > 0):
            raise RunConfigError(k, f"must be a positive finite number, got {v}")
    for k in ("lambda_sa", "weight_decay", "lora_alpha", "shift_bias"):
        v = getattr(cfg, k)
        if not math.isfinite(v) or (k != "shift_bias" and v < 0):
            raise RunConfigError(k, f"must be finite and >= 0, got {v}")
    for k in ("pretrain_steps", "checkpoint_every", "lora_rank", "warmup_steps", "pretrain_n_train"):
        if getattr(cfg, k) < 0:
            raise RunConfigError(k, "must be >= 0")
    if cfg.pretrain_world_seed < -1:
        raise RunConfigError("pretrain_world_seed", "must be -1 (reuse the training set) or a seed >= 0")
    choices = {
        "recon_mode": RECON_MODES,
        "adapter_type": ADAPTER_TYPES,
        "sa_placement": SA_PLACEMENTS,
        "sa_target": SA_TARGETS,
        "lr_schedule": LR_SCHEDULES,
    }
    for k, allowed in choices.items():
        if getattr(cfg, k) not in allowed:
            raise RunConfigError(k, f"must be one of {allowed}, got {getattr(cfg, k)!r}")
    if cfg.adapter_dim % cfg.slot_heads:
        raise RunConfigError("slot_heads", f"adapter_dim={cfg.adapter_dim} is not divisible by {cfg.slot_heads}")
    if cfg.dim % cfg.heads:
        raise RunConfigError("heads", f"dim={cfg.dim} is not divisible by {cfg.heads}")
    if cfg.n_entities > cfg.tokens_per_frame:
        raise RunConfigError("n_entities", "cannot exceed tokens_per_frame")
    if not 1 <= cfg.n_event_classes < cfg.n_classes:
        raise RunConfigError("n_event_classes", f"must be in [1, n_classes), got {cfg.n_event_classes}")
    if cfg.n_entities - 1 > cfg.n_classes - cfg.n_event_classes:
        raise RunConfigError("n_entities", "not enough scene classes for the non-target entities")
    if not cfg.min_window <= cfg.max_window <= cfg.frames_per_video:
        raise RunConfigError("max_window", "need min_window <= max_window <= frames_per_video")
    layers = set(range(1, cfg.n_layers + 1))
    for k in ("adapter_layers", "lora_layers"):
        v = getattr(cfg, k)
        if not set(v) <= layers:
            raise RunConfigError(k, f"layer indices must lie in 1..{cfg.n_layers}, got {list(v)}")
    if cfg.adapter_type != "none":
        if not cfg.adapter_layers:
            raise RunConfigError("adapter_layers", "empty while adapter_type is not 'none'")
        if tuple(sorted(cfg.adapter_layers)) != tuple(range(1, len(cfg.adapter_layers) + 1)):
            raise RunConfigError("adapter_layers", f"must be an early prefix 1..k, got {list(cfg.adapter_layers)}")
        if set(cfg.adapter_layers) & set(cfg.lora_layers):
            raise RunConfigError("lora_layers", "overlaps adapter_layers")
    bad = set(cfg.lora_targets) - set(LORA_TARGETS)
    if bad:
        raise RunConfigError("lora_targets", f"unknown targets {sorted(bad)}")
    if cfg.lora_layers and cfg.lora_rank < 1:
        raise RunConfigError("lora_rank", "must be >= 1 when lora_layers is non-empty")
    if cfg.adapter_type == "none" and not cfg.lora_layers and not cfg.train_base:
        raise RunConfigError("adapter_type", "no trainable parameters: adapter_type=none with no LoRA layers")
    if cfg.adapter_type != "slot" and cfg.lambda_sa > 0:
        raise RunConfigError("lambda_sa", f"the alignment loss needs slot adapters (adapter_type={cfg.adapter_type!r})")


# ---------------------------------------------------------------- parsing


def _coerce(key: str, value):
    hint = _HINTS[key]
    default = _FIELDS[key].default
    try:
        if hint is bool or isinstance(default, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                s = value.strip().strip("[]()")
                items = [x.strip().strip("'\"") for x in s.split(",") if x.strip()]
            else:
                items = list(value)
            kind = type(default[0]) if default else int
            return tuple(kind(x) for x in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, str) and not value.strip().lstrip("+-").isdigit():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(value, str):
            return value.strip()
        raise ValueError(value)
    except (TypeError, ValueError):
        raise RunConfigError(key, f"cannot interpret {value!r} as {type(default).__name__}") from None


def _canonical(key: str) -> str:
    key = key.strip()
    key = _ALIASES.get(key, key)
    if key not in _FIELDS:
        raise RunConfigError(key, "unknown configuration key")
    return key


def parse_text(text: str) -> dict:
    """Raw key -> value mapping from a JSON object or ``key = value`` lines (``#`` comments)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise RunConfigError("<file>", f"invalid JSON: {e}") from None
        if not isinstance(obj, dict):
            raise RunConfigError("<file>", "JSON config must be an object")
        return obj
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise RunConfigError(str(item), "override must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(values: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    kw = base.to_dict() if base is not None else {}
    for k, v in (values or {}).items():
        key = _canonical(k)
        kw[key] = _coerce(key, v)
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in kw.items()}
    return RunConfig(**kw)


def parse_config(path=None, overrides=None) -> RunConfig:
    """Defaults <- file (if any) <- ``key=value`` overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise RunConfigError("--config", f"no such file: {path}")
        values.update(parse_text(p.read_text()))
    raw = dict(values)
    over = parse_overrides(overrides) if not isinstance(overrides, dict) else overrides
    cfg = build_config(raw)
    return build_config(over, base=cfg) if over else cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
