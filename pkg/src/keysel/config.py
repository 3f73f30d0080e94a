"""Model and training configuration plus the ``key=value`` run-file format.

A run file is UTF-8 text with one ``key=value`` per line; blank lines and
lines starting with ``#`` are ignored. Unknown or repeated keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import BadConfig
from .selection import DlfsConfig


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 32)
    num_classes: int = 6
    global_dim: int = 64
    # None disables the local branch entirely (K = 0)
    dlfs: DlfsConfig | None = field(default_factory=DlfsConfig)
    vi_pool: int = 2
    margin: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise BadConfig("need at least two classes")
        if not self.channels:
            raise BadConfig("backbone needs at least one block")
        h, w = self.feature_size
        if h < 3 or w < 3:
            raise BadConfig(f"final feature map {h}x{w} is smaller than 3x3")

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        for _ in range(len(self.channels) - 1):
            h, w = h // 2, w // 2
        return h, w

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def uses_local(self) -> bool:
        return self.dlfs is not None


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.9
    decay_epochs: int = 80
    batch_size: int = 64
    epochs: int = 60
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    seed: int = 0
    use_local: bool = True
    use_aux: bool = True
    use_vi: bool = True
    use_corr: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise BadConfig(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise BadConfig(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.decay_epochs < 1 or self.epochs < 0:
            raise BadConfig("decay_epochs >= 1 and epochs >= 0 required")
        if self.batch_size < 1 or (self.use_corr and self.use_local and self.batch_size < 3):
            raise BadConfig(f"batch_size {self.batch_size} too small (triplets need 3)")

    def ablate(self, *names: str) -> "TrainConfig":
        """Copy with the named terms (local, aux, vi, corr) switched off."""
        changes = {}
        for n in names:
            key = f"use_{n}"
            if key not in {f.name for f in dataclasses.fields(self)}:
                raise BadConfig(f"unknown ablation {n!r}")
            changes[key] = False
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# run files


def _ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(p) for p in s.split(",") if p.strip()) if s else ()


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _stages(s: str) -> tuple[tuple[int, int], ...]:
    s = s.strip()
    if not s:
        return ()
    out = []
    for part in s.split(","):
        k, st = part.split(":")
        out.append((int(k), int(st)))
    return tuple(out)


_MODEL_KEYS = {
    "input_height": int,
    "input_width": int,
    "in_channels": int,
    "channels": _ints,
    "num_classes": int,
    "global_dim": int,
    "ks": _ints,
    "dlfs_channels": int,
    "stages": _stages,
    "vi_pool": int,
    "margin": float,
}
_TRAIN_KEYS = {
    "lr": float,
    "lr_decay": float,
    "decay_epochs": int,
    "batch_size": int,
    "epochs": int,
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
    "seed": int,
    "use_local": _bool,
    "use_aux": _bool,
    "use_vi": _bool,
    "use_corr": _bool,
}


def parse_run_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS:
            raise BadConfig(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise BadConfig(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    parsed = {}
    for key, value in raw.items():
        conv = _MODEL_KEYS.get(key) or _TRAIN_KEYS[key]
        try:
            parsed[key] = conv(value)
        except ValueError as exc:
            raise BadConfig(f"{key}: {exc}") from None
    return _build_model(parsed), TrainConfig(**{k: v for k, v in parsed.items() if k in _TRAIN_KEYS})


def _build_model(p: dict) -> ModelConfig:
    base = ModelConfig()
    dbase = DlfsConfig()
    h, w = base.input_size
    kw = {
        "input_size": (p.get("input_height", h), p.get("input_width", w)),
        "in_channels": p.get("in_channels", base.in_channels),
        "channels": p.get("channels", base.channels),
        "num_classes": p.get("num_classes", base.num_classes),
        "global_dim": p.get("global_dim", base.global_dim),
        "vi_pool": p.get("vi_pool", base.vi_pool),
        "margin": p.get("margin", base.margin),
    }
    ks = p.get("ks", dbase.ks)
    if not ks or ks == (0,):
        kw["dlfs"] = None
    else:
        stages = p["stages"] if "stages" in p else ((3, 2),) * (len(ks) - 1)
        kw["dlfs"] = DlfsConfig(ks=ks, channels=p.get("dlfs_channels", dbase.channels), stages=stages)
    return ModelConfig(**kw)


def format_run_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = [
        f"input_height={model.input_size[0]}",
        f"input_width={model.input_size[1]}",
        f"in_channels={model.in_channels}",
        f"channels={','.join(map(str, model.channels))}",
        f"num_classes={model.num_classes}",
        f"global_dim={model.global_dim}",
        f"vi_pool={model.vi_pool}",
        f"margin={model.margin!r}",
    ]
    if model.dlfs is None:
        lines.append("ks=0")
    else:
        lines.append(f"ks={','.join(map(str, model.dlfs.ks))}")
        lines.append(f"dlfs_channels={model.dlfs.channels}")
        lines.append("stages=" + ",".join(f"{k}:{s}" for k, s in model.dlfs.stages))
    if train is not None:
        for f in dataclasses.fields(train):
            v = getattr(train, f.name)
            lines.append(f"{f.name}={int(v) if isinstance(v, bool) else repr(v)}")
    return "\n".join(lines) + "\n"


def load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise BadConfig(f"cannot read {path}: {exc}") from None
    return parse_run_config(text)
