"""Run configuration: one TOML tree covering every module, with flag overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .geometry import ForearmModelParams
from .models.gan import GanHyperparams
from .synth_pipeline import CONFIGS, DEFAULT_NOISE_SIGMA, SimParams, WavelengthGrid
from .tissue_optics import TissueOpticalSpec


class ConfigError(ValueError):
    pass


SIM_KEYS = {"wavelengths_nm", "y_extent", "photons", "offset_mm", "aperture_mm", "divergence_deg", "tally",
            "noise_sigma"}
UNET_KEYS = {"depth", "base_channels", "convs_per_block", "epochs", "batch_size", "lr", "beta1", "max_steps",
             "target_mse"}
DATASET_KEYS = {"config", "pool_sizes", "split_sizes", "limit"}
EXPERIMENT_KEYS = {"configs", "metric", "classes", "n_boot", "lit_geometry", "pool_sizes", "split_sizes",
                   "gan_site"}
TOP_KEYS = {"seed", "workers", "paper_scale", "geometry", "optics", "simulation", "gan", "unet", "dataset",
            "experiment"}

# full-resolution settings restored by --paper-scale
FULL_SCALE_GEOMETRY = {"image_shape": [256, 128], "spacing_mm": 0.16}
FULL_SCALE_SIMULATION = {"y_extent": 64}


def _check_keys(section: str, tree: dict, allowed: set) -> None:
    if not isinstance(tree, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = set(tree) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """Parsed configuration tree.

    Sections stay plain dictionaries so they can be hashed and echoed into
    ``run.json``; the typed objects are built on demand and validated once
    in :meth:`validate`.
    """

    seed: int = 0
    workers: int | None = None
    paper_scale: bool = False
    geometry: dict = field(default_factory=dict)
    optics: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)
    unet: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, tree: dict) -> "RunConfig":
        _check_keys("top level", tree, TOP_KEYS)
        for name, allowed in (("simulation", SIM_KEYS), ("unet", UNET_KEYS), ("dataset", DATASET_KEYS),
                              ("experiment", EXPERIMENT_KEYS)):
            _check_keys(name, tree.get(name, {}), allowed)
        cfg = cls(**copy.deepcopy(tree))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                tree = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(tree)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in sorted(TOP_KEYS)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **flags) -> "RunConfig":
        """Apply command-line flags; ``None`` means "not given"."""
        tree = self.to_dict()
        for key in ("seed", "workers"):
            if flags.get(key) is not None:
                tree[key] = int(flags[key])
        if flags.get("paper_scale"):
            tree["paper_scale"] = True
        return RunConfig.from_dict(tree)

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.geometry_params()
            self.optics_spec()
            self.sim_params()
            self.grid()
            self.gan_hyperparams()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.dataset.get("config", "gan") not in CONFIGS:
            raise ConfigError(f"[dataset] config must be one of {', '.join(CONFIGS)}")
        for c in self.experiment.get("configs", []):
            if c not in CONFIGS:
                raise ConfigError(f"[experiment] unknown dataset config {c!r}")

    # -- typed views ---------------------------------------------------

    def geometry_params(self, extra: dict | None = None) -> ForearmModelParams:
        tree = dict(self.geometry)
        if self.paper_scale:
            tree.update(FULL_SCALE_GEOMETRY)
        tree.update(extra or {})
        params = ForearmModelParams.from_dict(tree)
        params.validate()
        return params

    def optics_spec(self) -> TissueOpticalSpec:
        base = TissueOpticalSpec.default().to_dict()
        return TissueOpticalSpec.from_dict(_deep_update(base, self.optics))

    def sim_params(self) -> SimParams:
        tree = {k: v for k, v in self.simulation.items() if k not in ("wavelengths_nm", "noise_sigma")}
        if self.paper_scale:
            tree.update(FULL_SCALE_SIMULATION)
        if "aperture_mm" in tree:
            tree["aperture_mm"] = tuple(tree["aperture_mm"])
        params = SimParams(**tree)
        if self.workers is not None:
            params.workers = self.workers
        if params.tally not in ("absorption", "pathlength"):
            raise ConfigError(f"unknown tally {params.tally!r}")
        if params.photons < 1 or params.y_extent < 1:
            raise ConfigError("photons and y_extent must be >= 1")
        return params

    def grid(self) -> WavelengthGrid:
        if "wavelengths_nm" in self.simulation:
            return WavelengthGrid(tuple(self.simulation["wavelengths_nm"]))
        return WavelengthGrid()

    @property
    def noise_sigma(self) -> float:
        return float(self.simulation.get("noise_sigma", DEFAULT_NOISE_SIGMA))

    def gan_hyperparams(self, site: str = "forearm") -> GanHyperparams:
        return GanHyperparams.for_site(site, **self.gan)

    def unet_params(self) -> dict:
        return dict(self.unet)
