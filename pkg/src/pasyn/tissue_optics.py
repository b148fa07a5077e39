"""Wavelength-dependent optical parameters assigned per tissue class."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import LabelMap, TissueClass, Uniform

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

CHROMOPHORES = ("hbo2", "hb", "water", "fat")
# melanin absorption scale at 500 nm (1/mm) for a unit volume fraction
MELANIN_MUA_500 = 51.9
MELANIN_POWER = 3.5


class OpticsError(ValueError):
    pass


def data_dir() -> Path:
    env = os.environ.get("PASYN_DATA_DIR")
    if env:
        return Path(env)
    return Path(str(resources.files("pasyn") / "data"))


def read_spectrum(path) -> tuple[np.ndarray, np.ndarray]:
    table = np.loadtxt(path, comments="#", ndmin=2)
    return table[:, 0].astype(float), table[:, 1].astype(float)


@dataclass
class ChromophoreSpectra:
    wavelengths_nm: np.ndarray
    mua: dict  # name -> array (1/mm) on wavelengths_nm

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=float)
        if wl.ndim != 1 or len(wl) < 2 or np.any(np.diff(wl) <= 0):
            raise OpticsError("spectra grid must be strictly increasing")
        self.wavelengths_nm = wl
        for name, values in self.mua.items():
            values = np.asarray(values, dtype=float)
            if values.shape != wl.shape:
                raise OpticsError(f"{name}: spectrum length does not match the grid")
            self.mua[name] = values

    @classmethod
    def load(cls, directory=None) -> "ChromophoreSpectra":
        directory = Path(directory) if directory else data_dir()
        grid = None
        tables = {}
        for name in CHROMOPHORES:
            wl, mua = read_spectrum(directory / f"{name}.txt")
            if grid is None:
                grid = wl
            elif not np.array_equal(grid, wl):
                # bring every chromophore onto the first file's grid
                mua = np.interp(grid, wl, mua)
            tables[name] = mua
        return cls(grid, tables)

    def __call__(self, name: str, wavelength_nm: float) -> float:
        lo, hi = self.wavelengths_nm[0], self.wavelengths_nm[-1]
        if not lo <= wavelength_nm <= hi:
            raise OpticsError(f"wavelength {wavelength_nm} nm outside spectra grid [{lo}, {hi}]")
        return float(np.interp(wavelength_nm, self.wavelengths_nm, self.mua[name]))

    def isosbestic_nm(self, lo=780.0, hi=820.0) -> float:
        """Wavelength where the HbO2 and Hb curves cross inside [lo, hi]."""
        wl = np.linspace(lo, hi, 4001)
        diff = np.interp(wl, self.wavelengths_nm, self.mua["hbo2"]) - np.interp(
            wl, self.wavelengths_nm, self.mua["hb"])
        idx = np.nonzero(np.diff(np.sign(diff)))[0]
        if len(idx) == 0:
            raise OpticsError(f"no hemoglobin crossing in [{lo}, {hi}] nm")
        i = idx[0]
        return float(wl[i] - diff[i] * (wl[i + 1] - wl[i]) / (diff[i + 1] - diff[i]))


@dataclass
class ClassOptics:
    so2: Uniform
    vb: Uniform
    water: float = 0.0
    fat: float = 0.0
    baseline_mua_per_mm: float = 0.0
    melanin_fraction: float = 0.0
    scatter_a: float = 1.0
    scatter_b: float = 1.0
    g: float = 0.9
    n: float = 1.37

    def validate(self, name: str) -> None:
        for label, dist in (("so2", self.so2), ("vb", self.vb)):
            if not (0.0 <= dist.low <= dist.high <= 1.0):
                raise OpticsError(f"{name}.{label} must be a fraction range, got {dist}")
        for label in ("water", "fat", "melanin_fraction"):
            v = getattr(self, label)
            if not 0.0 <= v <= 1.0:
                raise OpticsError(f"{name}.{label} must lie in [0, 1], got {v}")
        if self.vb.high + self.water + self.fat > 1.0 + 1e-12:
            raise OpticsError(f"{name}: vb + water + fat exceeds 1")
        if not -1.0 <= self.g < 1.0:
            raise OpticsError(f"{name}.g must lie in [-1, 1)")
        if self.scatter_a <= 0:
            raise OpticsError(f"{name}.scatter_a must be positive")
        if self.n < 1.0:
            raise OpticsError(f"{name}.n must be >= 1")
        if self.baseline_mua_per_mm < 0:
            raise OpticsError(f"{name}.baseline_mua_per_mm must be nonnegative")

    def reduced_scattering(self, wavelength_nm: float) -> float:
        return self.scatter_a * (wavelength_nm / 500.0) ** (-self.scatter_b)

    def scattering(self, wavelength_nm: float) -> float:
        return self.reduced_scattering(wavelength_nm) / (1.0 - self.g)


_CLASS_KEYS = {c.label: c for c in TissueClass}


@dataclass
class TissueOpticalSpec:
    classes: dict  # TissueClass -> ClassOptics

    def __post_init__(self):
        for cls, opt in self.classes.items():
            opt.validate(TissueClass(cls).label)

    @classmethod
    def from_dict(cls, tree: dict) -> "TissueOpticalSpec":
        classes = {}
        fields = set(ClassOptics.__dataclass_fields__)
        for key, block in tree.items():
            if key not in _CLASS_KEYS:
                raise OpticsError(f"unknown tissue class {key!r}")
            unknown = set(block) - fields
            if unknown:
                raise OpticsError(f"{key}: unknown keys {sorted(unknown)}")
            kwargs = dict(block)
            kwargs["so2"] = Uniform.coerce(kwargs.get("so2", 0.0))
            kwargs["vb"] = Uniform.coerce(kwargs.get("vb", 0.0))
            classes[_CLASS_KEYS[key]] = ClassOptics(**kwargs)
        return cls(classes)

    @classmethod
    def load(cls, path=None) -> "TissueOpticalSpec":
        path = Path(path) if path else data_dir() / "tissue_optics.toml"
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    @classmethod
    def default(cls) -> "TissueOpticalSpec":
        return cls.load()

    def to_dict(self) -> dict:
        out = {}
        for c, opt in self.classes.items():
            block = {k: getattr(opt, k) for k in ClassOptics.__dataclass_fields__}
            for k in ("so2", "vb"):
                block[k] = {"low": block[k].low, "high": block[k].high}
            out[TissueClass(c).label] = block
        return out

    def with_class(self, cls_id, **changes) -> "TissueOpticalSpec":
        classes = dict(self.classes)
        old = classes[TissueClass(cls_id)]
        new = {k: getattr(old, k) for k in ClassOptics.__dataclass_fields__}
        for k, v in changes.items():
            new[k] = Uniform.coerce(v) if k in ("so2", "vb") else v
        classes[TissueClass(cls_id)] = ClassOptics(**new)
        return TissueOpticalSpec(classes)


@dataclass
class TissueInstance:
    so2: dict  # TissueClass -> float
    vb: dict
    seed: int | None = None


def sample_tissue_instance(spec: TissueOpticalSpec, seed) -> TissueInstance:
    """Draw one (sO2, vb) pair per class; classes are visited in ID order."""
    rng = np.random.default_rng(seed)
    so2, vb = {}, {}
    for cls in sorted(spec.classes):
        opt = spec.classes[cls]
        so2[cls] = opt.so2.sample(rng)
        vb[cls] = opt.vb.sample(rng)
    return TissueInstance(so2, vb, seed)


def mixed_mua(instance: TissueInstance, cls, wavelength_nm: float, spectra: ChromophoreSpectra,
              spec: TissueOpticalSpec | None = None, *, water: float | None = None,
              fat: float | None = None) -> float:
    """Absorption coefficient (1/mm) of one class at one wavelength.

    Water and fat fractions come from ``spec`` unless passed explicitly.
    """
    cls = TissueClass(cls)
    opt = spec.classes[cls] if spec is not None else None
    if water is None:
        water = opt.water if opt else 0.0
    if fat is None:
        fat = opt.fat if opt else 0.0
    vb = instance.vb[cls]
    so2 = instance.so2[cls]
    mua = vb * (so2 * spectra("hbo2", wavelength_nm) + (1.0 - so2) * spectra("hb", wavelength_nm))
    mua += water * spectra("water", wavelength_nm) + fat * spectra("fat", wavelength_nm)
    if opt is not None:
        mua += opt.baseline_mua_per_mm
        if opt.melanin_fraction:
            mua += opt.melanin_fraction * MELANIN_MUA_500 * (wavelength_nm / 500.0) ** (-MELANIN_POWER)
    return float(mua)


@dataclass
class OpticalVolume:
    mua: np.ndarray
    mus: np.ndarray
    g: np.ndarray
    n: np.ndarray
    spacing_mm: float
    wavelength_nm: float
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.mua.shape

    def check(self) -> None:
        if not (self.mua.shape == self.mus.shape == self.g.shape == self.n.shape):
            raise OpticsError("optical parameter arrays differ in shape")
        if self.mua.ndim != 3:
            raise OpticsError("optical volumes are 3D")
        if not np.all(self.mua > 0):
            raise OpticsError("mua must be positive everywhere")
        if not np.all(self.mus >= 0):
            raise OpticsError("mus must be nonnegative")
        if not np.all((self.g >= -1) & (self.g < 1)):
            raise OpticsError("g must lie in [-1, 1)")
        if not np.all(self.n >= 1):
            raise OpticsError("n must be >= 1")


def class_optics_table(instance, spec, spectra, wavelength_nm):
    """Per-class (mua, mus, g, n) lookup tables indexed by class ID."""
    table = np.zeros((4, 256))
    table[3] = 1.0
    for cls, opt in spec.classes.items():
        table[0, cls] = mixed_mua(instance, cls, wavelength_nm, spectra, spec)
        table[1, cls] = opt.scattering(wavelength_nm)
        table[2, cls] = opt.g
        table[3, cls] = opt.n
    return table


def assign_optics(labelmap: LabelMap, instance: TissueInstance, spec: TissueOpticalSpec,
                  spectra: ChromophoreSpectra, wavelength_nm: float) -> OpticalVolume:
    data = labelmap.data
    if data.ndim != 3:
        raise OpticsError("assign_optics expects a 3D label map; extrude 2D masks first")
    present = set(np.unique(data).tolist())
    missing = sorted(present - {int(c) for c in spec.classes})
    if missing:
        raise OpticsError(f"classes {missing} present in map but missing from the optical spec")
    table = class_optics_table(instance, spec, spectra, wavelength_nm)
    vol = OpticalVolume(
        mua=table[0][data],
        mus=table[1][data],
        g=table[2][data],
        n=table[3][data],
        spacing_mm=labelmap.spacing_mm,
        wavelength_nm=float(wavelength_nm),
        meta={"instance_seed": instance.seed},
    )
    vol.check()
    return vol
