"""Pipeline configuration shared by every CLI subcommand.

One JSON file names the scene artifacts and carries each stage's knobs:

    {
      "seed": 0,
      "paths": {"scene": "scene.lsplat", "cameras": "cameras.json", ...},
      "synth": {"n_gaussians": 2000, ...},
      "raster": {"tile_size": 16, ...},
      "mask_filter": {"min_predicted_iou": 0.7, ...},
      "autoencoder": {"input_dim": 512, ...},
      "field": {"iterations": 30000, ...},
      "query": {"smooth_size": 20, ...}
    }

Every section is optional and falls back to the module defaults. Relative
paths are resolved against the config file's directory at load time
(command-line overrides resolve against the working directory instead).
The top-level seed fills in any stage seed the file does not set itself,
so a single number pins the whole pipeline; `validate` plus fixed seeds
gives byte-identical artifacts across runs.

Threading is not a config field: the LANGFIELD_THREADS environment
variable caps rasterizer workers (unset means one, 0 means all cores).
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .autoencoder import AutoencoderConfig
from .errors import ConfigError
from .masks import MaskFilterConfig
from .query import QueryConfig
from .rasterizer import RasterConfig
from .scene import SyntheticSceneSpec
from .trainer import FieldTrainConfig


@dataclass
class PipelinePaths:
    """Artifact locations. Inputs a deployment does not have (say, no
    annotations) may be null; stages that need them will refuse to run."""

    scene: str | None = "scene.lsplat"
    cameras: str | None = "cameras.json"
    masks: str | None = "masks"            # dir: {view}_{level}.png label maps
    embeddings: str | None = "embeddings"  # dir: {view}_{level}.lemb tables
    queries: str | None = "queries.json"
    canonical: str | None = "canonical.json"
    ground_truth: str | None = "gt.json"
    output: str = "out"

    def resolved(self, base: Path) -> "PipelinePaths":
        def fix(p):
            if p is None:
                return None
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        return PipelinePaths(**{f.name: fix(getattr(self, f.name)) for f in fields(self)})


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item = typing.get_args(hint)[0]
        return tuple(_coerce(v, item, where) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _dataclass_from(cls, data, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
    kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in data.items()}
    return cls(**kwargs)


_SECTIONS = {
    "paths": PipelinePaths,
    "synth": SyntheticSceneSpec,
    "raster": RasterConfig,
    "mask_filter": MaskFilterConfig,
    "autoencoder": AutoencoderConfig,
    "field": FieldTrainConfig,
    "query": QueryConfig,
}
_SEEDED = ("synth", "autoencoder", "field")


@dataclass
class PipelineConfig:
    paths: PipelinePaths = field(default_factory=PipelinePaths)
    seed: int = 0
    synth: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    raster: RasterConfig = field(default_factory=RasterConfig)
    mask_filter: MaskFilterConfig = field(default_factory=MaskFilterConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    field_train: FieldTrainConfig = field(default_factory=FieldTrainConfig)
    query: QueryConfig = field(default_factory=QueryConfig)

    @staticmethod
    def from_dict(data: dict, base: Path | None = None) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(data) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        cfg = PipelineConfig()
        cfg.seed = _coerce(data.get("seed", 0), int, "seed")
        for name, cls in _SECTIONS.items():
            attr = "field_train" if name == "field" else name
            section = data.get(name, {})
            built = _dataclass_from(cls, section, name)
            if name in _SEEDED and "seed" not in section:
                built.seed = cfg.seed
            setattr(cfg, attr, built)
        if base is not None:
            cfg.paths = cfg.paths.resolved(base)
        return cfg

    @staticmethod
    def load(path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return PipelineConfig.from_dict(data, base=path.parent)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            attr = "field_train" if name == "field" else name
            out[name] = dataclasses.asdict(getattr(self, attr))
        out["autoencoder"]["hidden"] = list(out["autoencoder"]["hidden"])
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def apply_override(self, spec: str) -> None:
        """`section.key=value` or `seed=value`; values are parsed as JSON,
        with a bare-word fallback for strings. Setting the top-level seed
        re-seeds every stage, so stage-specific overrides must come after
        it to stick."""
        key, sep, raw = spec.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {spec!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if parts == ["seed"]:
            self.seed = _coerce(value, int, "seed")
            for name in _SEEDED:
                attr = "field_train" if name == "field" else name
                getattr(self, attr).seed = self.seed
            return
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        section, fname = parts
        attr = "field_train" if section == "field" else section
        target = getattr(self, attr)
        hints = typing.get_type_hints(type(target))
        if fname not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, fname, _coerce(value, hints[fname], key))

    def validate(self, require: tuple[str, ...] = ()) -> None:
        """Check every knob's invariants, plus that the named path fields
        (by attribute, e.g. "scene") exist on disk."""
        r = self.raster
        if r.tile_size < 1:
            raise ConfigError("raster.tile_size must be >= 1")
        if r.blur < 0 or r.near_plane <= 0 or r.max_sigma <= 0:
            raise ConfigError("raster blur/near_plane/max_sigma out of range")
        if not 0.0 < r.alpha_clamp <= 1.0:
            raise ConfigError("raster.alpha_clamp must be in (0, 1]")
        if not 0.0 < r.transmittance_min < 1.0:
            raise ConfigError("raster.transmittance_min must be in (0, 1)")
        if r.frustum_margin <= 0:
            raise ConfigError("raster.frustum_margin must be positive")
        s = self.synth
        if min(s.n_gaussians, s.n_objects, s.n_views, s.width, s.height, s.latent_dim) < 1:
            raise ConfigError("synth sizes must all be positive")
        m = self.mask_filter
        if not (0 <= m.min_predicted_iou <= 1 and 0 <= m.min_stability <= 1
                and 0 < m.max_overlap <= 1):
            raise ConfigError("mask_filter thresholds out of range")
        self.autoencoder.validate()
        self.field_train.validate()
        self.query.validate()
        for name in require:
            p = getattr(self.paths, name)
            if p is None:
                raise ConfigError(f"paths.{name} is not set but this step needs it")
            if not Path(p).exists():
                raise ConfigError(f"paths.{name}: {p} does not exist")
