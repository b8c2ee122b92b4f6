"""Model and training configuration as a flat ``key=value`` file."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .synthdata import VOCAB


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # image encoder
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    s1: int = 16
    s2: int = 8
    contextual_layers: int = 1
    stage1_layers: int = 4
    P: int = 4
    post_layers1: int = 2
    post_layers2: int = 2
    joint_dim: int = 32
    # text encoder
    vocab_size: int = len(VOCAB)
    text_dim: int = 32
    text_layers: int = 4
    text_heads: int = 2
    max_len: int = 16
    # mixing / losses
    M: int = 4
    K: int = 3
    tau_init: float = 0.07
    cm: bool = True
    use_seg: bool = True
    use_re: bool = True
    hard_assign: bool = True
    gumbel: bool = True
    gumbel_temperature: float = 1.0
    # training
    seed: int = 0
    batch_size: int = 16
    steps: int = 2000
    lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    ckpt_every: int = 0
    float64: bool = False
    # evaluation
    bg_threshold: float = 0.2

    @property
    def N(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not (1 <= self.s2 <= self.s1 <= self.N):
            raise ConfigError(f"need 1 <= s2 <= s1 <= N, got s2={self.s2} s1={self.s1} N={self.N}")
        if self.M < 1 or self.batch_size % self.M:
            raise ConfigError(f"M={self.M} must divide batch_size={self.batch_size}")
        if not 0 <= self.P <= self.stage1_layers:
            raise ConfigError(f"P={self.P} must lie in [0, stage1_layers={self.stage1_layers}]")
        if self.dim % self.heads or self.text_dim % self.text_heads:
            raise ConfigError("hidden dims must be divisible by head counts")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.vocab_size < len(VOCAB):
            raise ConfigError(f"vocab_size {self.vocab_size} smaller than shipped vocabulary ({len(VOCAB)})")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(val, known[key].type, key)
        start = dataclasses.asdict(base) if base is not None else {}
        start.update(values)
        return cls(**start)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse(val: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = val.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None
    return val


def tiny_config(**overrides) -> ModelConfig:
    """The 64-bit verification configuration (d=8, N=4, M=2, B=4, K=2)."""
    base = dict(
        image_size=8,
        patch_size=4,
        dim=8,
        heads=2,
        mlp_ratio=1,
        s1=4,
        s2=2,
        contextual_layers=1,
        stage1_layers=1,
        P=1,
        post_layers1=1,
        post_layers2=1,
        joint_dim=4,
        text_dim=8,
        text_layers=1,
        text_heads=2,
        max_len=16,
        M=2,
        K=2,
        batch_size=4,
        hard_assign=False,
        float64=True,
    )
    base.update(overrides)
    return ModelConfig(**base)
