"""Architecture configuration shared by both stages."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Tuple


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    stage1_levels: int = 3
    stage1_base: int = 16
    stage1_shape: Tuple[int, int, int] = (64, 64, 64)
    stage1_classes: int = 2
    stage2_levels: int = 4
    stage2_base: int = 32
    stage2_shape: Tuple[int, int, int] = (128, 128, 128)
    num_classes: int = 21
    num_segments: int = 20
    use_tgdm: bool = True
    slow_channel: bool = False  # feed the stage-1 mask as an extra stage-2 input channel
    sampling: str = "trilinear"  # or "nearest"
    psm_hidden: Optional[int] = None  # defaults to the bottleneck width
    d_state: int = 16
    scan_chunk: Optional[int] = None  # blockwise scan; step-by-step is faster on CPU at these lengths
    desk_scale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage1_shape", tuple(int(s) for s in self.stage1_shape))
        object.__setattr__(self, "stage2_shape", tuple(int(s) for s in self.stage2_shape))
        if self.sampling not in ("trilinear", "nearest"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        for name in ("stage1", "stage2"):
            levels, base, shape = (getattr(self, f"{name}_{k}") for k in ("levels", "base", "shape"))
            if levels < 1 or base < 1:
                raise ConfigError(f"{name}: levels and base filters must be positive")
            if len(shape) != 3 or any(s % 2**levels for s in shape):
                raise ConfigError(f"{name}: input shape {shape} not divisible by 2^{levels}")
        if self.num_classes != self.num_segments + 1:
            raise ConfigError("num_classes must be num_segments + 1")

    @classmethod
    def desk(cls, **overrides) -> "NetConfig":
        """Reduced preset: 48^3 / 96^3 inputs with half the filters."""
        base = dict(stage1_base=8, stage1_shape=(48,) * 3, stage2_base=16, stage2_shape=(96,) * 3, desk_scale=True)
        return cls(**{**base, **overrides})

    @property
    def in_channels(self) -> int:
        return 2 if self.slow_channel else 1

    @property
    def gdm_channels(self) -> int:
        return self.stage2_base * 2 ** (self.stage2_levels - 1)

    @property
    def hidden(self) -> int:
        return self.psm_hidden or self.gdm_channels

    def with_(self, **changes) -> "NetConfig":
        return replace(self, **changes)

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage1_shape"] = list(self.stage1_shape)
        d["stage2_shape"] = list(self.stage2_shape)
        return d

    @classmethod
    def from_json(cls, d) -> "NetConfig":
        if isinstance(d, str):
            d = json.loads(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**d)
