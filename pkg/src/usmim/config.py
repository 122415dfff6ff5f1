"""Training configuration and its flat-table TOML form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import AugmentConfig, ViewConfig
from .distill import HeadConfig
from .encoder import EncoderConfig

GLOBAL_MASKS = ("self_adaptive", "attention", "reconstruction", "rbw")
LOCAL_MASKS = ("rbw", "none")


@dataclass
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 3
    batch_size: int = 16
    base_lr: float = 5e-4
    weight_decay: float = 4e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 3.0
    tau_t: float = 0.04
    tau_s: float = 0.07
    lam: float = 0.996
    rat_m: float = 0.8
    local_rat_m: float = 0.8
    r0: float = 0.1
    rT: float = 0.9
    alpha_min: float = 0.1
    alpha_max: float = 0.9
    rec_ema_decay: float = 0.9
    centering: bool = True
    center_decay: float = 0.9
    student_global_cls: bool = False
    global_mask: str = "self_adaptive"
    local_mask: str = "rbw"
    use_cls: bool = True
    use_patch: bool = True
    use_recon_global: bool = True
    use_recon_local: bool = True
    w_cls: float = 1.0
    w_patch: float = 1.0
    w_recon_global: float = 1.0
    w_recon_local: float = 1.0
    # views and masks drawn from (seed, image) only, identical every epoch
    epoch_invariant_sampling: bool = False
    seed: int = 0
    dtype: str = "float32"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    views: ViewConfig = field(default_factory=ViewConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")
        if not (self.tau_t > 0 and self.tau_s > 0):
            raise ValueError("temperatures must be positive")
        if not 0 <= self.lam <= 1:
            raise ValueError("EMA momentum must lie in [0, 1]")
        if not (0 < self.rat_m <= 1 and 0 < self.local_rat_m <= 1):
            raise ValueError("masking ratios must lie in (0, 1]")
        if not 0 <= self.r0 <= self.rT <= 1:
            raise ValueError("need 0 <= r0 <= rT <= 1")
        if not 0 <= self.alpha_min <= self.alpha_max <= 1:
            raise ValueError("need 0 <= alpha_min <= alpha_max <= 1")
        if self.global_mask not in GLOBAL_MASKS:
            raise ValueError(f"global_mask must be one of {GLOBAL_MASKS}")
        if self.local_mask not in LOCAL_MASKS:
            raise ValueError(f"local_mask must be one of {LOCAL_MASKS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.views.global_size % self.encoder.down_total or self.views.local_size % self.encoder.down_total:
            raise ValueError("view sizes must be divisible by the encoder's total downsampling")
        if self.use_cls and self.views.n_local == 0 and not self.student_global_cls:
            raise ValueError("class-token loss needs local views or student_global_cls")

    def loss_terms(self) -> dict[str, float]:
        terms = {"cls": (self.use_cls, self.w_cls), "patch": (self.use_patch, self.w_patch),
                 "recon_g": (self.use_recon_global, self.w_recon_global),
                 "recon_l": (self.use_recon_local and self.local_mask != "none", self.w_recon_local)}
        return {k: w for k, (on, w) in terms.items() if on}


_NESTED = {"encoder": EncoderConfig, "head": HeadConfig, "views": ViewConfig}


def _build(cls, table: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**table)


def config_from_dict(d: dict) -> TrainConfig:
    train = dict(d.get("train", {}))
    enc = _build(EncoderConfig, d.get("encoder", {}))
    head = _build(HeadConfig, d.get("head", {}))
    views_t = dict(d.get("views", {}))
    aug = _build(AugmentConfig, d.get("augment", {}))
    views = _build(ViewConfig, {**views_t, "augment": aug})
    extra = set(d) - {"train", "encoder", "head", "views", "augment", "data", "probe"}
    if extra:
        raise ValueError(f"unknown config tables: {sorted(extra)}")
    return _build(TrainConfig, {**train, "encoder": enc, "head": head, "views": views})


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse a config file; returns the config plus the raw table dict."""
    raw = tomllib.loads(Path(path).read_text())
    return config_from_dict(raw), raw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _table(name: str, obj, skip=()) -> str:
    lines = [f"[{name}]"]
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def dump_config(cfg: TrainConfig) -> str:
    parts = [
        _table("train", cfg, skip=("encoder", "head", "views")),
        _table("encoder", cfg.encoder),
        _table("head", cfg.head),
        _table("views", cfg.views, skip=("augment",)),
        _table("augment", cfg.views.augment),
    ]
    return "\n".join(parts)


def replace(cfg: TrainConfig, **changes) -> TrainConfig:
    """Copy with top-level and ``encoder__x`` / ``views__x`` style nested overrides."""
    nested: dict[str, dict] = {}
    top = {}
    for k, v in changes.items():
        if "__" in k:
            table, key = k.split("__", 1)
            nested.setdefault(table, {})[key] = v
        else:
            top[k] = v
    for table, vals in nested.items():
        top[table] = dataclasses.replace(getattr(cfg, table), **vals)
    return dataclasses.replace(cfg, **top)
