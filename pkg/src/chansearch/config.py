"""Run configuration files (JSON) and their resolution into concrete objects.

A run file has four top-level sections, all optional::

    {
      "search":  {... SearchConfig fields ...},
      "net":     {"preset": "flexcharts", "num_stages": 4, "scale": 0.25,
                  "stem_channels": 16, "head_channels": 32, "stages": [...]},
      "data":    {"kind": "synthetic", "synthetic": {...}} or
                 {"kind": "cifar10-binary", "path": "...", "subset": 5000,
                  "augment": {"crop_pad": 4, "hflip": true, "cutout": 16}},
      "out_dir": "runs/toy"
    }

Unknown keys anywhere are rejected.  ``resolve`` expands presets and fills the
input geometry from the data source, so the echo written next to a run's
outputs is fully explicit and replays the run exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import Augment, CIFAR_AUGMENT, Dataset, SyntheticSpec, load_cifar10, synthetic_task
from .search import SearchConfig
from .supernet import PRESET_SELECTOR, RANGE_PRESETS, NetConfig, StageSpec, preset_stages

PRESETS = ("dmask-small", "dmask-large", "flexcharts")
ECHO_NAME = "config.echo"


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, inconsistent sections)."""


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


_NET_KEYS = ["preset", "num_stages", "scale", "stages", "in_channels", "input_hw", "num_classes",
             "stem_channels", "head_channels", "margin_sigmas", "max_channels", "normalize_gaussian"]
_DATA_KEYS = ["kind", "path", "subset", "subset_seed", "augment", "synthetic"]


@dataclass
class DataSource:
    kind: str = "synthetic"
    path: str | None = None
    subset: int | None = None
    subset_seed: int = 0
    augment: dict | None = None
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10-binary"):
            raise ConfigError(f"data.kind must be synthetic or cifar10-binary; got {self.kind!r}")
        if self.kind == "cifar10-binary" and not self.path:
            raise ConfigError("data.path is required for cifar10-binary")
        _check_keys("data.synthetic", self.synthetic, _names(SyntheticSpec))
        if self.augment is not None:
            _check_keys("data.augment", self.augment, _names(Augment))

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.synthetic)
        if "hw" in d:
            d["hw"] = tuple(d["hw"])
        if "noise" in d and isinstance(d["noise"], str):
            d["noise"] = float(d["noise"])  # allows "inf"
        return SyntheticSpec(**d)

    def geometry(self) -> tuple[int, tuple[int, int], int]:
        """Input channels, spatial size and class count, without loading anything."""
        if self.kind == "cifar10-binary":
            return 3, (32, 32), 10
        s = self.synthetic_spec()
        return s.in_channels, tuple(s.hw), s.classes

    def load(self) -> tuple[Dataset, Dataset]:
        if self.kind == "cifar10-binary":
            return load_cifar10(self.path, self.subset, self.subset_seed)
        train, test = synthetic_task(self.synthetic_spec())
        if self.subset is not None:
            train = train.subset(slice(0, self.subset))
        return train, test

    def augmentation(self) -> Augment | None:
        """Training-time augmentation; CIFAR gets crop/flip/cutout unless overridden."""
        if self.augment is not None:
            return Augment(**self.augment)
        return CIFAR_AUGMENT if self.kind == "cifar10-binary" else None


@dataclass
class RunConfig:
    search: SearchConfig
    net: NetConfig
    data: DataSource
    out_dir: str | None = None
    preset: str | None = None

    def to_dict(self) -> dict:
        s = asdict(self.search)
        s["a_betas"] = list(s["a_betas"])
        n = asdict(self.net)
        n["input_hw"] = list(n["input_hw"])
        if self.preset is not None:
            n["preset"] = self.preset
        return {"search": s, "net": n, "data": asdict(self.data), "out_dir": self.out_dir}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / ECHO_NAME
        path.write_text(self.to_json())
        return path


def _stage_from_dict(i: int, d: dict) -> StageSpec:
    _check_keys(f"net.stages[{i}]", d, _names(StageSpec))
    try:
        return StageSpec(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"net.stages[{i}]: {e}") from None


def resolve(raw: dict, *, preset: str | None = None, seed: int | None = None, lam: float | None = None,
            out_dir: str | None = None) -> RunConfig:
    """Turn a parsed run file plus command-line overrides into a RunConfig.

    ``preset`` expands into stage ranges when the file lists none; when stages
    are given explicitly it only switches their selector kind.
    """
    _check_keys("config", raw, ["search", "net", "data", "out_dir"])
    s = dict(raw.get("search", {}))
    _check_keys("search", s, _names(SearchConfig))
    if seed is not None:
        s["seed"] = seed
    if lam is not None:
        s["lam"] = lam
    try:
        search = SearchConfig(**s)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"search: {e}") from None

    d = dict(raw.get("data", {}))
    _check_keys("data", d, _DATA_KEYS)
    data = DataSource(**d)

    n = dict(raw.get("net", {}))
    _check_keys("net", n, _NET_KEYS)
    chosen = preset or n.pop("preset", None)
    n.pop("preset", None)
    if chosen is not None and chosen not in PRESETS:
        raise ConfigError(f"unknown preset {chosen!r}; choose from {list(PRESETS)}")
    num_stages = n.pop("num_stages", None)
    scale = n.pop("scale", 1.0)
    stages_raw = n.pop("stages", None)
    if stages_raw is not None:
        if not isinstance(stages_raw, list) or not stages_raw:
            raise ConfigError("net.stages must be a non-empty list")
        stages = [_stage_from_dict(i, sd) for i, sd in enumerate(stages_raw)]
        if chosen is not None:
            for st in stages:
                st.selector = PRESET_SELECTOR[chosen]
    else:
        chosen = chosen or "flexcharts"
        if chosen not in RANGE_PRESETS:
            raise ConfigError(f"unknown preset {chosen!r}")
        stages = preset_stages(chosen, num_stages or 20, scale)

    c, hw, k = data.geometry()
    n.setdefault("in_channels", c)
    n.setdefault("input_hw", hw)
    n.setdefault("num_classes", k)
    n["input_hw"] = tuple(n["input_hw"])
    if (n["in_channels"], n["input_hw"]) != (c, hw):
        raise ConfigError(f"net expects inputs {n['in_channels']}x{n['input_hw']} but data provides {c}x{hw}")
    try:
        net = NetConfig(stages=stages, **n)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"net: {e}") from None
    if chosen is not None and chosen.startswith("dmask"):
        search.reallocate = False
    return RunConfig(search, net, data, out_dir if out_dir is not None else raw.get("out_dir"), chosen)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return resolve(raw, **overrides)
