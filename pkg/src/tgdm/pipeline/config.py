"""Run configuration, presets and command-line overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from tgdm.net import ConfigError, NetConfig
from tgdm.phantom import PhantomProfile
from tgdm.topo import DEFAULT_M0, DEFAULT_M1

ABLATIONS = ("M0", "M1", "M2", "M3", "M4")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    data_root: str = "data"
    net: NetConfig = field(default_factory=NetConfig.desk)
    phantom: PhantomProfile = field(default_factory=PhantomProfile)
    n_train: int = 30
    n_val: int = 10
    n_test: int = 0
    n_ood: int = 0
    lr: float = 1e-3
    batch_size: int = 2
    epochs: int = 50
    stage1_epochs: Optional[int] = None
    seed: int = 0
    ablation_seeds: Tuple[int, ...] = (0, 1, 2)
    # ablation switches
    stage1_target: str = "box"  # "box" (BB) or "binary" (DB)
    single_stage: bool = False  # backbone on the whole volume, no stage 1
    vpn: bool = True  # variable point numbers; False gives round((M0+M1)/2) everywhere
    m0: int = DEFAULT_M0
    m1: int = DEFAULT_M1
    margin_frac: float = 0.1
    clip_percentiles: Tuple[float, float] = (1.0, 99.0)
    tau_mm: float = 1.0
    train_box_source: str = "gt"  # "gt" or "pred"
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.net, dict):
            object.__setattr__(self, "net", NetConfig.from_json(self.net))
        if isinstance(self.phantom, dict):
            object.__setattr__(self, "phantom", PhantomProfile.from_json(self.phantom))
        object.__setattr__(self, "ablation_seeds", tuple(int(s) for s in self.ablation_seeds))
        object.__setattr__(self, "clip_percentiles", tuple(float(p) for p in self.clip_percentiles))
        if self.stage1_target not in ("box", "binary"):
            raise ConfigError(f"stage1_target must be 'box' or 'binary', got {self.stage1_target!r}")
        if self.train_box_source not in ("gt", "pred"):
            raise ConfigError(f"train_box_source must be 'gt' or 'pred', got {self.train_box_source!r}")
        if not 2 <= self.m0 <= self.m1:
            raise ConfigError(f"need 2 <= m0 <= m1, got {self.m0}, {self.m1}")
        lo, hi = self.clip_percentiles
        if not 0 <= lo < hi <= 100:
            raise ConfigError(f"bad clip percentiles {self.clip_percentiles}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.n_train < 1:
            raise ConfigError("lr, batch_size, epochs and n_train must be positive")
        if self.margin_frac < 0 or self.tau_mm <= 0:
            raise ConfigError("margin_frac must be >= 0 and tau_mm > 0")

    @property
    def epochs_stage1(self) -> int:
        return self.epochs if self.stage1_epochs is None else self.stage1_epochs

    def split_dir(self, split: str) -> Path:
        return Path(self.data_root) / split

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_json(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_json()
        d["phantom"] = self.phantom.to_json()
        d["ablation_seeds"] = list(self.ablation_seeds)
        d["clip_percentiles"] = list(self.clip_percentiles)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_json(d)


def preset(name: str) -> RunConfig:
    """``paper``: published hyper-parameters; ``desk``: reduced acceptance scale;
    ``smoke``: tiny settings for tests."""
    if name == "paper":
        return RunConfig(
            preset="paper",
            net=NetConfig(),
            phantom=PhantomProfile(grid_shape=(160, 160, 160), radius_range=(4.2, 5.8), jitter_mm=1.7),  # desk geometry scaled by 160/96
            lr=1e-4,
            batch_size=4,
            epochs=500,
            n_train=60,
            n_val=20,
        )
    if name == "desk":
        return RunConfig()
    if name == "smoke":
        return RunConfig(
            preset="smoke",
            net=NetConfig(
                stage1_base=4, stage1_shape=(16,) * 3, stage2_base=4, stage2_shape=(32,) * 3, d_state=4
            ),
            phantom=PhantomProfile(grid_shape=(48, 48, 48), radius_range=(1.2, 1.6)),
            n_train=2,
            n_val=1,
            epochs=1,
            batch_size=2,
            ablation_seeds=(0,),
        )
    raise ConfigError(f"unknown preset {name!r}; choose paper, desk or smoke")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, assignments) -> RunConfig:
    """Apply ``key=value`` strings; nested keys use dots (``net.stage2_base=8``)."""
    d = config.to_json()
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        target = d
        *parents, leaf = key.strip().split(".")
        for p in parents:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            target = target[p]
        if leaf not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[leaf] = _parse_value(value)
    try:
        return RunConfig.from_json(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def ablation_config(base: RunConfig, name: str) -> RunConfig:
    """Switch settings for one row of the M0..M4 ablation."""
    switches = {
        "M0": dict(single_stage=True, stage1_target="box", tgdm=False, vpn=False),
        "M1": dict(single_stage=False, stage1_target="binary", tgdm=False, vpn=False),
        "M2": dict(single_stage=False, stage1_target="box", tgdm=False, vpn=False),
        "M3": dict(single_stage=False, stage1_target="box", tgdm=True, vpn=False),
        "M4": dict(single_stage=False, stage1_target="box", tgdm=True, vpn=True),
    }
    if name not in switches:
        raise ConfigError(f"unknown ablation {name!r}")
    s = switches[name]
    return replace(
        base,
        single_stage=s["single_stage"],
        stage1_target=s["stage1_target"],
        vpn=s["vpn"],
        net=base.net.with_(use_tgdm=s["tgdm"]),
    )
