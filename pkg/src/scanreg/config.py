"""Run configuration with a flat key=value file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ContractError
from .network import NetConfig


@dataclass
class RunConfig:
    """Defaults for the desk-scale pipeline; all knobs overridable from file or CLI."""

    size: int = 32
    n_labels: int = 4
    feat_channels: int = 8
    feat_channels_half: int = 16
    enc_channels: tuple[int, ...] = (16, 32, 64)
    state_size: int = 4
    vss_levels: tuple[int, ...] = (1, 2)
    k_train: int = 2
    k_infer: int = 2
    smooth_weight: float = 1.0
    lr: float = 0.001
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.k_train < 1 or self.k_infer < 1:
            raise ContractError("recursion depths must be >= 1")
        if self.smooth_weight < 0:
            raise ContractError("smooth_weight must be >= 0")
        if self.lr <= 0:
            raise ContractError("learning rate must be > 0")

    def net_config(self) -> NetConfig:
        return NetConfig(self.feat_channels, self.feat_channels_half,
                         tuple(self.enc_channels), self.state_size,
                         tuple(self.vss_levels))


_TUPLE_FIELDS = {"enc_channels", "vss_levels"}


def parse_config_file(path, base: RunConfig | None = None) -> RunConfig:
    """Read `key = value` lines ('#' comments allowed) over the defaults."""
    cfg = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    overrides = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ContractError(f"{path}:{lineno}: unknown option {key!r}")
            if key in _TUPLE_FIELDS:
                overrides[key] = tuple(int(v) for v in raw.split(","))
            elif isinstance(getattr(cfg, key), int):
                overrides[key] = int(raw)
            else:
                overrides[key] = float(raw)
    return replace(cfg, **overrides)


def write_config_file(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        for f in fields(RunConfig):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")
