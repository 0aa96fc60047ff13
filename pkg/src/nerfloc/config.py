"""Run configuration: a flat ``section.key = value`` text file merged with command-line overrides."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import UnknownConfigKey
from .matcher_training import MatcherTrainConfig
from .nerf_training import NerfTrainConfig
from .pose_solver import RansacConfig
from .refinement import RefineConfig


@dataclass
class MatcherOptions:
    """Matcher settings that do not depend on the field (dimensions are derived from it)."""

    variant: str = "mini"
    feature_source: str = "f3"
    temperature: float = 0.1
    threshold: float = 0.2
    coarse_dim: int = 0  # 0: field feature width for f-layer sources, 256 otherwise
    fine_dim: int = 128
    encoder_widths: tuple = (32, 64, 128, 128)
    n_self: int = 4
    n_heads: int = 8
    window: int = 5
    pe_bands: int = 10
    stride: int = 8
    opacity_threshold: float = 0.5
    descriptor_dim: int = 256
    detach_variance: bool = True

    def overrides(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("variant", "feature_source"):
            d.pop(k)
        if d["coarse_dim"] == 0:
            d.pop("coarse_dim")
        return d


@dataclass
class LocalizeOptions:
    topk: int = 1
    merge: str = "none"
    covis_min: int = 2
    fallback_to_retrieval: bool = True
    retrieval_db: str = "real"
    workers: int = 1


@dataclass
class EvalOptions:
    t_thresh: float = 0.05
    r_thresh: float = 5.0
    # translation threshold as a fraction of scene diameter; overrides t_thresh when > 0
    t_thresh_diameter_fraction: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    nerf: NerfTrainConfig = field(default_factory=NerfTrainConfig)
    matcher: MatcherOptions = field(default_factory=MatcherOptions)
    matcher_train: MatcherTrainConfig = field(default_factory=MatcherTrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    localize: LocalizeOptions = field(default_factory=LocalizeOptions)
    evaluate: EvalOptions = field(default_factory=EvalOptions)

    SECTIONS = ("nerf", "matcher", "matcher_train", "refine", "ransac", "localize", "evaluate")

    def set(self, key: str, raw: str) -> None:
        """Assign ``key`` (``seed`` or ``section.name``) from its text form; unknown keys raise."""
        parts = key.strip().split(".")
        if parts == ["seed"]:
            self.seed = int(raw)
            return
        if len(parts) != 2 or parts[0] not in self.SECTIONS:
            raise UnknownConfigKey(f"unknown config key {key!r}")
        section = getattr(self, parts[0])
        names = {f.name: f for f in dataclasses.fields(section)}
        if parts[1] not in names:
            raise UnknownConfigKey(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(section))
        value = _coerce(raw, hints[parts[1]])
        # rebuild so each section re-validates in __post_init__
        setattr(self, parts[0], dataclasses.replace(section, **{parts[1]: value}))

    def items(self) -> list[tuple[str, object]]:
        out = [("seed", self.seed)]
        for s in self.SECTIONS:
            sec = getattr(self, s)
            out.extend((f"{s}.{f.name}", getattr(sec, f.name)) for f in dataclasses.fields(sec))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def write_echo(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "config.echo"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _coerce(raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() == "none":
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is tuple or origin is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_pairs(text: str) -> list[tuple[str, str]]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def load_run_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for k, v in parse_pairs(Path(path).read_text()):
            cfg.set(k, v)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg
