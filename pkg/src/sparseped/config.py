"""Run configuration as flat ``key=value`` text with typed fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Tuple


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # pseudo-label quality thresholds and contrastive temperature
    tau1: float = 0.9
    tau2: float = 0.7
    tau: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    m: int = 1
    ema_momentum: float = 0.99
    score_thresh: float = 0.5
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    removal_fraction: float = 0.3
    apra_mode: str = "dynamic"
    mpaw_enabled: bool = True
    ppe_enabled: bool = True
    burn_in_steps: int = 0
    refine_strict_all: bool = False
    channels: int = 8
    anchor_stride: int = 8
    anchor_heights: Tuple[float, ...] = (13.0, 21.0, 34.0)
    anchor_aspect: float = 0.42
    placement_stride: int = 4
    nms_iou: float = 0.5
    # pseudo-labels must overlap every GT box less than this
    pl_gt_iou: float = 0.5
    eval_score_thresh: float = 0.05
    fppi_points: int = 9

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.tau1 > self.tau2:
            raise ConfigError("tau1 must exceed tau2")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        for name in ("tau1", "tau2", "ema_momentum", "score_thresh", "removal_fraction", "nms_iou", "pl_gt_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.apra_mode not in ("off", "static", "dynamic"):
            raise ConfigError("apra_mode must be off, static or dynamic")
        if self.m < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("m and batch_size must be >= 1, epochs >= 0")
        if not self.anchor_heights:
            raise ConfigError("need at least one anchor height")

    @property
    def uses_pseudo_labels(self) -> bool:
        return self.mpaw_enabled or self.ppe_enabled or self.apra_mode == "dynamic"

    def anchor_sizes(self) -> Tuple[Tuple[float, float], ...]:
        return tuple((h * self.anchor_aspect, h) for h in self.anchor_heights)

    def replace(self, **kw) -> "RunConfig":
        d = asdict(self)
        d.update(kw)
        return RunConfig(**d)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, overrides: Dict[str, str] | None = None) -> "RunConfig":
        raw = parse_key_values(text.splitlines())
        raw.update(overrides or {})
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: Dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kw[key] = _parse(key, types[key], v)
        return cls(**kw)


def parse_key_values(lines: Iterable[str]) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, typ, v: str):
    typ = str(typ)
    try:
        if typ == "bool":
            low = v.lower()
            if low in ("true", "on", "1", "yes"):
                return True
            if low in ("false", "off", "0", "no"):
                return False
            raise ValueError(v)
        if typ == "int":
            return int(v)
        if typ == "float":
            return float(v)
        if typ.startswith("Tuple"):
            return tuple(float(x) for x in v.split(",") if x.strip())
        return v
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {v!r}") from exc
