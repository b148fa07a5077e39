"""From 2D label maps to multispectral initial-pressure images and datasets."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .geometry import GeometryError, LabelMap, TissueClass, save_labelmap
from .photon_mc import SourceSpec, initial_pressure, simulate_fluence
from .tissue_optics import (ChromophoreSpectra, TissueOpticalSpec, assign_optics,
                            sample_tissue_instance)
from .volume_io import save_volume

SOURCE_OFFSET_MM = 43.2
LOG_EPS = 1e-10
DEFAULT_NOISE_SIGMA = 0.5


@dataclass(frozen=True)
class WavelengthGrid:
    wavelengths_nm: tuple = tuple(range(700, 851, 10))

    def __post_init__(self):
        wl = tuple(float(w) for w in self.wavelengths_nm)
        if not wl or any(b <= a for a, b in zip(wl, wl[1:])):
            raise ValueError("wavelength grid must be nonempty and strictly increasing")
        object.__setattr__(self, "wavelengths_nm", wl)

    def __len__(self):
        return len(self.wavelengths_nm)

    def __iter__(self):
        return iter(self.wavelengths_nm)


@dataclass
class MultispectralImage:
    """Image stack ``data[x, z, channel]``."""

    data: np.ndarray
    spacing_mm: float
    wavelengths_nm: tuple
    kind: str = "p0"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != len(self.wavelengths_nm):
            raise ValueError(f"data shape {self.data.shape} does not match {len(self.wavelengths_nm)} channels")

    @property
    def shape(self):
        return self.data.shape

    def channel(self, wavelength_nm: float) -> np.ndarray:
        return self.data[:, :, list(self.wavelengths_nm).index(float(wavelength_nm))]

    def save(self, path) -> None:
        save_volume(path, self.data, spacing_mm=self.spacing_mm, kind=self.kind,
                    wavelengths_nm=list(self.wavelengths_nm), provenance=self.provenance)

    @classmethod
    def load(cls, path) -> "MultispectralImage":
        from .volume_io import load_volume

        data, header = load_volume(path)
        return cls(data, header["spacing_mm"], tuple(header["wavelengths_nm"]),
                   header.get("kind", "p0"), header.get("provenance", {}))


@dataclass
class SimParams:
    y_extent: int = 32
    photons: int = 100_000
    offset_mm: float = SOURCE_OFFSET_MM
    aperture_mm: tuple = (30.0, 2.0)
    divergence_deg: float = 5.0
    workers: int = 1
    tally: str = "pathlength"

    def source(self, base_seed: int) -> SourceSpec:
        return SourceSpec(aperture_mm=tuple(self.aperture_mm), divergence_deg=self.divergence_deg,
                          photon_count=self.photons, base_seed=base_seed)


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from integers and strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode()))
        else:
            words.append(int(round(p)) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def extrude_mask(mask: LabelMap, y_extent: int) -> LabelMap:
    """Stack a ``(X, Z)`` map ``y_extent`` times into ``(X, Y, Z)``."""
    if y_extent < 1:
        raise ValueError("y_extent must be >= 1")
    if mask.data.ndim != 2:
        raise GeometryError("extrude_mask expects a 2D map")
    data = np.repeat(mask.data[:, None, :], y_extent, axis=1)
    return LabelMap(data, mask.spacing_mm, dict(mask.meta))


def gel_top_index(data: np.ndarray) -> int:
    hits = np.nonzero(np.any(data == TissueClass.GEL, axis=tuple(range(data.ndim - 1))))[0]
    if len(hits) == 0:
        raise GeometryError("no-gel-class: map has no ultrasound gel voxel")
    return int(hits[0])


def place_in_volume(map3d: LabelMap, offset_mm: float = SOURCE_OFFSET_MM) -> LabelMap:
    """Pad with heavy water above so the topmost gel voxel sits ``offset_mm`` below the top face.

    The number of added rows is stored in ``meta['pad_rows']``.
    """
    target = int(round(offset_mm / map3d.spacing_mm))
    pad = target - gel_top_index(map3d.data)
    if pad < 0:
        raise GeometryError(
            f"gel top lies {-pad} voxels deeper than the {offset_mm} mm source offset")
    if pad == 0:
        out = map3d.copy()
        out.meta["pad_rows"] = 0
        return out
    shape = map3d.data.shape[:-1] + (pad,)
    top = np.full(shape, TissueClass.HEAVY_WATER, dtype=np.uint8)
    data = np.concatenate([top, map3d.data], axis=-1)
    return LabelMap(data, map3d.spacing_mm, dict(map3d.meta, pad_rows=pad))


def simulate_multispectral(mask2d: LabelMap, optics_spec: TissueOpticalSpec,
                           grid: WavelengthGrid = WavelengthGrid(), sim_params: SimParams | None = None,
                           instance_seed: int = 0, sim_seed: int = 0,
                           spectra: ChromophoreSpectra | None = None):
    """Simulate one mask at every wavelength.

    Returns ``(p0, mua)`` multispectral images cut from the centre x-z slice
    and cropped back to the mask's own extent.
    """
    sim_params = sim_params or SimParams()
    spectra = spectra or ChromophoreSpectra.load()
    instance = sample_tissue_instance(optics_spec, instance_seed)
    placed = place_in_volume(extrude_mask(mask2d, sim_params.y_extent), sim_params.offset_mm)
    pad = placed.meta["pad_rows"]
    nz = mask2d.data.shape[1]
    yc = sim_params.y_extent // 2
    p0 = np.empty(mask2d.data.shape + (len(grid),))
    mua = np.empty_like(p0)
    for k, wl in enumerate(grid):
        optics = assign_optics(placed, instance, optics_spec, spectra, wl)
        source = sim_params.source(derive_seed(sim_seed, wl))
        fluence = simulate_fluence(optics, source, workers=sim_params.workers, tally=sim_params.tally)
        pressure = initial_pressure(fluence, optics)
        p0[:, :, k] = pressure.p0[:, yc, pad:pad + nz]
        mua[:, :, k] = optics.mua[:, yc, pad:pad + nz]
    prov = {"instance_seed": int(instance_seed), "sim_seed": int(sim_seed),
            "mask_id": mask2d.meta.get("id"), "photons": sim_params.photons}
    wls = grid.wavelengths_nm
    return (MultispectralImage(p0, mask2d.spacing_mm, wls, "p0", prov),
            MultispectralImage(mua, mask2d.spacing_mm, wls, "mua", dict(prov)))


def log_scale(values: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    return np.log(np.maximum(values, eps))


def preprocess(img: MultispectralImage, sigma: float = DEFAULT_NOISE_SIGMA, seed=None) -> MultispectralImage:
    """Natural log (clamped at 1e-10) followed by additive N(0, sigma^2) noise."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    out = log_scale(img.data)
    if sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, sigma, out.shape)
    kind = f"log-{img.kind}" + ("-noisy" if sigma > 0 else "")
    return MultispectralImage(out, img.spacing_mm, img.wavelengths_nm, kind,
                              dict(img.provenance, noise_sigma=sigma, noise_seed=seed))


class LogNoiseTransformer(TransformerMixin, BaseEstimator):
    """Log-scale images and add Gaussian noise; usable inside sklearn pipelines.

    Operates on arrays of any shape; set ``sigma=0`` for ground-truth maps.
    """

    def __init__(self, sigma=DEFAULT_NOISE_SIGMA, eps=LOG_EPS, random_state=None):
        self.sigma = sigma
        self.eps = eps
        self.random_state = random_state

    def fit(self, X, y=None):
        check_array(X, allow_nd=True, ensure_2d=False)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def transform(self, X):
        X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
        out = np.log(np.maximum(X, self.eps))
        if self.sigma > 0:
            rng = getattr(self, "rng_", None) or np.random.default_rng(self.random_state)
            out = out + rng.normal(0.0, self.sigma, out.shape)
        return out


# --------------------------------------------------------------------------
# dataset configurations

DEFAULT_SPLITS = {
    "anno": (66, 12, 18),
    "gan": (350, 50, 100),
    "lit": (350, 50, 100),
}
CONFIGS = ("anno", "gan", "gan-anno", "lit", "lit-gan-anno")
SPLIT_NAMES = ("train", "val", "test")


class InsufficientPoolError(ValueError):
    pass


@dataclass
class DatasetManifest:
    config: str
    train: list
    val: list
    test: list
    target_test: list
    source_mix: dict
    seed: int
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = {s: len(getattr(self, s)) for s in SPLIT_NAMES}

    def splits(self) -> dict:
        return {s: getattr(self, s) for s in SPLIT_NAMES}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        d.pop("counts", None)
        return cls(**d)


def split_counts(n: int) -> tuple:
    """70/10/20 split of ``n`` samples: train and val rounded half-up, test takes the rest."""
    train = int(np.floor(0.7 * n + 0.5))
    val = int(np.floor(0.1 * n + 0.5))
    return train, val, n - train - val


def _split_source(name, ids, counts, seed):
    need = sum(counts)
    if len(ids) < need:
        raise InsufficientPoolError(f"pool {name!r} has {len(ids)} samples, {need} required")
    rng = np.random.default_rng(derive_seed(seed, name))
    order = rng.permutation(len(ids))
    chosen = [ids[i] for i in order[:need]]
    a, b, _ = counts
    return chosen[:a], chosen[a:a + b], chosen[a + b:need]


def _as_ids(name, pool):
    if isinstance(pool, int):
        return [f"{name}:{i:05d}" for i in range(pool)]
    return list(pool)


def build_dataset(config_name: str, pools: dict, seed: int, split_sizes: dict | None = None) -> DatasetManifest:
    """Assign pool samples to train/val/test per a named configuration.

    ``pools`` maps ``anno``/``gan``/``lit`` to sample-ID lists (or pool sizes).
    Each source is split with a seed derived from ``(seed, source)``, so a
    source contributes the same split to every configuration and the
    annotation test split is shared as the target test set.  ``split_sizes``
    overrides the per-source counts for down-scaled runs.
    """
    if config_name not in CONFIGS:
        raise ValueError(f"unknown dataset config {config_name!r}; expected one of {CONFIGS}")
    sizes = dict(DEFAULT_SPLITS)
    sizes.update(split_sizes or {})
    parts = {}

    def source(name):
        if name not in parts:
            if name not in pools:
                raise InsufficientPoolError(f"config {config_name!r} needs a {name!r} pool")
            parts[name] = _split_source(name, _as_ids(name, pools[name]), sizes[name], seed)
        return parts[name]

    if config_name in ("anno", "gan", "lit"):
        used = {config_name: source(config_name)}
    elif config_name == "gan-anno":
        anno = source("anno")
        gan = source("gan")
        # the annotation splits are kept whole and GAN samples fill each split to the gan sizes
        fill = [sizes["gan"][i] - len(anno[i]) for i in range(3)]
        if min(fill) < 0:
            raise InsufficientPoolError("annotation splits exceed the gan-anno split sizes")
        used = {"anno": anno, "gan": tuple(gan[i][:fill[i]] for i in range(3))}
    else:
        used = {"lit": source("lit"), "gan": source("gan"), "anno": source("anno")}

    splits = [sum((list(v[i]) for v in used.values()), []) for i in range(3)]
    mix = {s: {k: len(v[i]) for k, v in used.items()} for i, s in enumerate(SPLIT_NAMES)}
    target = list(source("anno")[2]) if "anno" in pools else list(splits[2])
    return DatasetManifest(config_name, splits[0], splits[1], splits[2], target, mix, int(seed))


def materialize_dataset(manifest: DatasetManifest, masks: dict, out_root, optics_spec: TissueOpticalSpec,
                        grid: WavelengthGrid, sim_params: SimParams, sigma: float = DEFAULT_NOISE_SIGMA,
                        limit: int | None = None, spectra=None, log=None, cache: dict | None = None,
                        splits=SPLIT_NAMES) -> Path:
    """Simulate and write every manifest sample under ``<out_root>/<config>/<split>/``.

    ``masks`` maps sample IDs to :class:`LabelMap`.  ``limit`` caps the
    number of samples written per split (the manifest keeps full counts).
    ``cache`` (sample ID -> preprocessed images) lets several
    configurations built with one seed share simulations.
    """
    spectra = spectra or ChromophoreSpectra.load()
    root = Path(out_root) / manifest.config
    root.mkdir(parents=True, exist_ok=True)
    manifest.save(root / "manifest.json")
    for split, ids in manifest.splits().items():
        if split not in splits:
            continue
        for i, sid in enumerate(ids[:limit] if limit is not None else ids):
            sample_dir = root / split / f"sample_{i:05d}"
            sample_dir.mkdir(parents=True, exist_ok=True)
            mask = masks[sid]
            inst_seed = derive_seed(manifest.seed, sid, "instance")
            sim_seed = derive_seed(manifest.seed, sid, "sim")
            noise_seed = derive_seed(manifest.seed, sid, "noise")
            if cache is not None and sid in cache:
                x, y = cache[sid]
            else:
                p0, mua = simulate_multispectral(mask, optics_spec, grid, sim_params, inst_seed,
                                                 sim_seed, spectra)
                x, y = preprocess(p0, sigma, noise_seed), preprocess(mua, 0.0)
                if cache is not None:
                    cache[sid] = (x, y)
            x.save(sample_dir / "input.vol16")
            y.save(sample_dir / "gt_mua.vol16")
            save_labelmap(mask, sample_dir / "mask.png")
            meta = {"id": sid, "split": split, "instance_seed": inst_seed, "sim_seed": sim_seed,
                    "noise_seed": noise_seed, "noise_sigma": sigma}
            (sample_dir / "meta.json").write_text(json.dumps(meta, indent=2))
            if log:
                log(f"{manifest.config}/{split}/{sample_dir.name} <- {sid}")
    return root
