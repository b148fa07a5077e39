"""Anatomical parameter images: semantic tissue label maps.

A label map stores one tissue-class ID per voxel.  2D maps are indexed
``data[x, z]`` (x = lateral column, z = depth row, increasing downwards);
3D maps are ``data[x, y, z]``.  Network-facing class tensors use the image
layout ``(C, H, W)`` with ``H = z`` and ``W = x``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

N_CLASSES = 7
DEFAULT_SPACING_MM = 0.16


class TissueClass(IntEnum):
    ARTERY = 1
    SKIN = 2
    MUSCLE = 3
    GEL = 4
    MEMBRANE = 5
    HEAVY_WATER = 6
    VEIN = 7

    @property
    def label(self) -> str:
        return _CLASS_NAMES[self]


_CLASS_NAMES = {
    TissueClass.ARTERY: "artery",
    TissueClass.SKIN: "skin",
    TissueClass.MUSCLE: "muscle-background",
    TissueClass.GEL: "us-gel",
    TissueClass.MEMBRANE: "transducer-membrane",
    TissueClass.HEAVY_WATER: "heavy-water",
    TissueClass.VEIN: "vein",
}

VALID_IDS = frozenset(int(c) for c in TissueClass)
# top-to-bottom layer order asserted for literature-model maps
LAYER_ORDER = (
    TissueClass.HEAVY_WATER,
    TissueClass.MEMBRANE,
    TissueClass.GEL,
    TissueClass.SKIN,
    TissueClass.MUSCLE,
)


class GeometryError(ValueError):
    """Raised for invalid label maps or generator parameters."""


@dataclass
class LabelMap:
    data: np.ndarray
    spacing_mm: float = DEFAULT_SPACING_MM
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim not in (2, 3):
            raise GeometryError(f"label map must be 2D or 3D, got ndim={self.data.ndim}")
        if not self.spacing_mm > 0:
            raise GeometryError(f"spacing_mm must be positive, got {self.spacing_mm}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.data, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def copy(self) -> "LabelMap":
        return LabelMap(self.data.copy(), self.spacing_mm, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and self.spacing_mm == other.spacing_mm
        )


# --------------------------------------------------------------------------
# literature-based forearm model


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        if self.low == self.high:
            return float(self.low)
        return float(rng.uniform(self.low, self.high))

    @classmethod
    def coerce(cls, value) -> "Uniform":
        if isinstance(value, Uniform):
            return value
        if isinstance(value, dict):
            return cls(float(value["low"]), float(value["high"]))
        if np.isscalar(value):
            return cls(float(value), float(value))
        low, high = value
        return cls(float(low), float(high))


@dataclass(frozen=True)
class ForearmModelParams:
    """Distributions of the procedural forearm geometry (all lengths in mm).

    Vessel depth is measured from the skin surface to the vessel centre.
    ``vessel_count`` is an inclusive integer range; each vessel is an artery
    with probability ``artery_fraction``, otherwise a vein.
    """

    image_shape: tuple = (128, 64)
    spacing_mm: float = 0.32
    water_thickness: Uniform = Uniform(0.5, 1.5)
    membrane_thickness_mm: float = 0.3
    gel_thickness: Uniform = Uniform(1.0, 4.0)
    skin_thickness: Uniform = Uniform(0.4, 1.2)
    skin_curvature: Uniform = Uniform(0.0, 1.0)
    vessel_count: tuple = (1, 6)
    artery_fraction: float = 1.0 / 3.0
    vessel_radius: Uniform = Uniform(0.5, 3.0)
    vessel_aspect: Uniform = Uniform(0.6, 1.0)
    vessel_depth: Uniform = Uniform(1.0, 12.0)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ForearmModelParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise GeometryError(f"unknown forearm parameters: {sorted(unknown)}")
        kwargs = {}
        for key, value in cfg.items():
            default = getattr(cls, key)
            if isinstance(default, Uniform):
                value = Uniform.coerce(value)
            elif isinstance(default, tuple):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def replace(self, **changes) -> "ForearmModelParams":
        for key, value in changes.items():
            if isinstance(getattr(self, key), Uniform):
                changes[key] = Uniform.coerce(value)
        return replace(self, **changes)

    def validate(self) -> None:
        nx, nz = self.image_shape
        if nx < 1 or nz < 1 or self.spacing_mm <= 0:
            raise GeometryError("image_shape and spacing_mm must be positive")
        dists = {
            "water_thickness": self.water_thickness,
            "gel_thickness": self.gel_thickness,
            "skin_thickness": self.skin_thickness,
            "vessel_radius": self.vessel_radius,
            "vessel_aspect": self.vessel_aspect,
            "vessel_depth": self.vessel_depth,
        }
        for name, dist in dists.items():
            if dist.low <= 0 or dist.high < dist.low:
                raise GeometryError(f"{name}: bounds must be positive and ordered, got {dist}")
        if self.skin_curvature.low < 0 or self.skin_curvature.high < self.skin_curvature.low:
            raise GeometryError("skin_curvature bounds must be nonnegative and ordered")
        if self.membrane_thickness_mm <= 0:
            raise GeometryError("membrane_thickness_mm must be positive")
        lo, hi = self.vessel_count
        if lo < 0 or hi < lo:
            raise GeometryError(f"vessel_count must be a nonnegative range, got {self.vessel_count}")
        if not 0.0 <= self.artery_fraction <= 1.0:
            raise GeometryError("artery_fraction must lie in [0, 1]")
        depth_mm = nz * self.spacing_mm
        top = (
            self.water_thickness.high
            + self.membrane_thickness_mm
            + self.gel_thickness.high
            + self.skin_curvature.high
        )
        if top + self.skin_thickness.high >= depth_mm:
            raise GeometryError(
                f"layer stack up to {top + self.skin_thickness.high:.2f} mm does not fit "
                f"image depth {depth_mm:.2f} mm"
            )
        if hi > 0:
            rz_min = self.vessel_radius.low * self.vessel_aspect.low
            # smallest vessel at its shallowest admissible centre must fit in the tissue
            centre = max(self.vessel_depth.low, self.skin_thickness.high + rz_min)
            if top + centre + rz_min > depth_mm or centre > self.vessel_depth.high:
                raise GeometryError("vessel depth/radius distributions cannot fit inside the tissue region")


def _mm_to_px(mm: float, spacing: float) -> int:
    return int(round(mm / spacing))


def generate_forearm_labelmap(params: ForearmModelParams, seed: int) -> LabelMap:
    """Draw one 2D forearm cross-section.

    Layers from the top: heavy water, membrane, gel, skin, muscle.  The skin
    surface bows upward towards the centre by a sampled curvature; vessels
    are axis-aligned ellipses placed entirely below the skin, later vessels
    overwrite earlier ones.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    nx, nz = params.image_shape
    sp = params.spacing_mm
    data = np.full((nx, nz), TissueClass.MUSCLE, dtype=np.uint8)

    water_px = max(1, _mm_to_px(params.water_thickness.sample(rng), sp))
    membrane_px = max(1, _mm_to_px(params.membrane_thickness_mm, sp))
    gel_mm = params.gel_thickness.sample(rng)
    skin_mm = params.skin_thickness.sample(rng)
    bow_mm = params.skin_curvature.sample(rng)

    gel_top = water_px + membrane_px
    x_mm = (np.arange(nx) + 0.5) * sp
    xc = nx * sp / 2.0
    half = max(xc, sp)
    # skin surface: deepest at the lateral edges, shallowest (by bow_mm) at the centre
    surface_mm = gel_top * sp + gel_mm + bow_mm * ((x_mm - xc) / half) ** 2
    skin_top = np.maximum(np.round(surface_mm / sp).astype(int), gel_top + 1)
    skin_bottom = skin_top + max(1, _mm_to_px(skin_mm, sp))

    z = np.arange(nz)[None, :]
    data[z < skin_bottom[:, None]] = TissueClass.SKIN
    data[z < skin_top[:, None]] = TissueClass.GEL
    data[:, :gel_top] = TissueClass.MEMBRANE
    data[:, :water_px] = TissueClass.HEAVY_WATER

    lo, hi = params.vessel_count
    n_vessels = int(rng.integers(lo, hi + 1))
    zc_grid = (np.arange(nz) + 0.5) * sp
    xs = x_mm[:, None]
    zs = zc_grid[None, :]
    vessels = []
    for _ in range(n_vessels):
        is_artery = rng.random() < params.artery_fraction
        for _attempt in range(100):
            r = params.vessel_radius.sample(rng)
            rz = r * params.vessel_aspect.sample(rng)
            cx = rng.uniform(0.0, nx * sp)
            surf = float(surface_mm[min(int(cx / sp), nx - 1)])
            # keep the ellipse between the deepest skin bottom and the image bottom
            d_min = max(params.vessel_depth.low, float(skin_bottom.max()) * sp - surf + rz)
            d_max = min(params.vessel_depth.high, nz * sp - surf - rz)
            if d_min <= d_max:
                break
        else:
            raise GeometryError("could not place a vessel inside the tissue region")
        depth = rng.uniform(d_min, d_max) if d_max > d_min else d_min
        cz = surf + depth
        inside = ((xs - cx) / r) ** 2 + ((zs - cz) / rz) ** 2 <= 1.0
        data[inside] = TissueClass.ARTERY if is_artery else TissueClass.VEIN
        vessels.append(
            {"artery": bool(is_artery), "cx_mm": cx, "cz_mm": cz, "rx_mm": r, "rz_mm": rz}
        )

    meta = {"generator": "literature", "body_site": "forearm", "seed": int(seed), "vessels": vessels}
    return LabelMap(data, sp, meta)


def layer_order_ok(m: LabelMap) -> bool:
    """True if every column runs heavy water -> membrane -> gel -> skin -> muscle.

    Vessel voxels count as muscle (they only appear inside the muscle region).
    """
    d = m.data.copy()
    d[(d == TissueClass.ARTERY) | (d == TissueClass.VEIN)] = TissueClass.MUSCLE
    rank = np.zeros(256, dtype=np.int8)
    for i, cls in enumerate(LAYER_ORDER):
        rank[cls] = i
    r = rank[d]
    return bool(np.all(np.diff(r.astype(np.int16), axis=-1) >= 0)) and all(
        np.any(d == cls) for cls in LAYER_ORDER
    )


# --------------------------------------------------------------------------
# augmentation


def hflip_copy_augment(masks: list[LabelMap]) -> list[LabelMap]:
    """Return the masks followed by horizontally mirrored copies of each."""
    if not masks:
        raise GeometryError("hflip_copy_augment needs at least one mask")
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise GeometryError(f"shape mismatch: {m.shape} vs {shape}")
        if m.data.ndim != 2:
            raise GeometryError("hflip_copy_augment expects 2D maps")
    flipped = [LabelMap(m.data[::-1].copy(), m.spacing_mm, dict(m.meta, hflip=True)) for m in masks]
    return list(masks) + flipped


def one_hot(mask) -> np.ndarray:
    """Encode a 2D map ``(X, Z)`` as a float32 tensor ``(7, Z, X)``."""
    data = mask.data if isinstance(mask, LabelMap) else np.asarray(mask)
    if data.ndim != 2:
        raise GeometryError("one_hot expects a 2D label map")
    bad = (data < 1) | (data > N_CLASSES)
    if bad.any():
        raise GeometryError(f"invalid class id(s): {sorted(set(np.unique(data[bad]).tolist()))}")
    img = data.T.astype(np.intp) - 1
    out = np.zeros((N_CLASSES,) + img.shape, dtype=np.float32)
    np.put_along_axis(out, img[None], 1.0, axis=0)
    return out


def argmax_decode(t: np.ndarray, spacing_mm: float = DEFAULT_SPACING_MM) -> LabelMap:
    """Inverse of :func:`one_hot`; ties resolve to the lowest class ID."""
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != N_CLASSES:
        raise GeometryError(f"expected a (7, H, W) tensor, got {t.shape}")
    # np.argmax returns the first maximal index
    ids = np.argmax(t, axis=0).astype(np.uint8) + 1
    return LabelMap(ids.T, spacing_mm)


def affine_index_map(shape, rng, p_apply=0.6, rot_range_deg=(-45.0, 45.0),
                     x_trans_range=(-5.0, 5.0), y_trans_range=(-5.0, 5.0)):
    """Draw one random affine transform and return its nearest-neighbour source map.

    Returns a flat int array ``src`` of length H*W where ``out.flat[i] =
    img.flat[src[i]]`` and ``src[i] == -1`` marks an exposed pixel.
    ``None`` means the identity was drawn.
    """
    h, w = shape
    angle = tx = ty = 0.0
    # one independent Bernoulli draw per transform
    if rng.random() < p_apply:
        angle = _draw(rng, rot_range_deg)
    if rng.random() < p_apply:
        tx = _draw(rng, x_trans_range)
    if rng.random() < p_apply:
        ty = _draw(rng, y_trans_range)
    tx, ty = round(tx), round(ty)
    if angle == 0.0 and tx == 0 and ty == 0:
        return None
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # inverse mapping: output -> source
    y = rr - ty - cy
    x = cc - tx - cx
    th = np.deg2rad(angle)
    cos, sin = np.cos(th), np.sin(th)
    sx = cos * x + sin * y + cx
    sy = -sin * x + cos * y + cy
    sxi = np.rint(sx).astype(np.intp)
    syi = np.rint(sy).astype(np.intp)
    valid = (sxi >= 0) & (sxi < w) & (syi >= 0) & (syi < h)
    src = np.where(valid, syi * w + sxi, -1).ravel()
    return src


def _draw(rng, bounds) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def apply_index_map(img: np.ndarray, src, fill_channel: int = TissueClass.HEAVY_WATER - 1) -> np.ndarray:
    """Resample a ``(C, H, W)`` tensor with a map from :func:`affine_index_map`."""
    if src is None:
        return img.copy()
    c, h, w = img.shape
    flat = img.reshape(c, h * w)
    out = flat[:, np.maximum(src, 0)]
    exposed = src < 0
    out[:, exposed] = 0.0
    out[fill_channel, exposed] = 1.0
    return out.reshape(c, h, w)


def apply_index_map_backward(grad: np.ndarray, src) -> np.ndarray:
    """Adjoint of :func:`apply_index_map` with respect to the input tensor."""
    if src is None:
        return grad.copy()
    c, h, w = grad.shape
    out = np.zeros((c, h * w), dtype=grad.dtype)
    keep = src >= 0
    g = grad.reshape(c, h * w)
    for ch in range(c):
        np.add.at(out[ch], src[keep], g[ch, keep])
    return out.reshape(c, h, w)


def affine_augment(one_hot_image: np.ndarray, rng: np.random.Generator, p_apply: float = 0.6,
                   rot_range_deg=(-45.0, 45.0), x_trans_range=(-5.0, 5.0),
                   y_trans_range=(-5.0, 5.0)) -> np.ndarray:
    """Randomly rotate and translate a class tensor.

    Rotation, x- and y-translation are each applied with probability
    ``p_apply``.  Exposed pixels become heavy water.
    """
    if not 0.0 <= p_apply <= 1.0:
        raise GeometryError("p_apply must lie in [0, 1]")
    src = affine_index_map(one_hot_image.shape[1:], rng, p_apply, rot_range_deg,
                           x_trans_range, y_trans_range)
    return apply_index_map(np.asarray(one_hot_image), src)


# --------------------------------------------------------------------------
# validation and persistence


def validate_labelmap(m: LabelMap) -> list[str]:
    """Return a list of problems; an empty list means the map is usable."""
    problems = []
    ids = set(np.unique(m.data).tolist())
    unknown = sorted(ids - VALID_IDS)
    if unknown:
        problems.append(f"unknown class id(s): {unknown}")
    tissue = {TissueClass.ARTERY, TissueClass.SKIN, TissueClass.MUSCLE, TissueClass.VEIN}
    if not ids & {int(t) for t in tissue}:
        problems.append("empty tissue region: no skin, muscle or vessel voxels")
    return problems


def save_labelmap(m: LabelMap, png_path, body_site="forearm", seed=None, generator=None) -> None:
    """Write an 8-bit PNG (rows = depth) plus a JSON sidecar."""
    if m.data.ndim != 2:
        raise GeometryError("only 2D maps persist as PNG")
    png_path = Path(png_path)
    Image.fromarray(np.ascontiguousarray(m.data.T), mode="L").save(png_path)
    sidecar = {
        "spacing_mm": m.spacing_mm,
        "body_site": m.meta.get("body_site", body_site),
        "seed": m.meta.get("seed", seed) if seed is None else seed,
        "generator": generator or m.meta.get("generator", "annotation"),
    }
    png_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_labelmap(png_path) -> LabelMap:
    png_path = Path(png_path)
    data = np.asarray(Image.open(png_path)).T.copy()
    sidecar = png_path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return LabelMap(data, float(meta.get("spacing_mm", DEFAULT_SPACING_MM)), meta)


def save_mask_dataset(masks, out_dir, generator: str, body_site: str = "forearm", seeds=None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(masks):
        p = out_dir / f"mask_{i:05d}.png"
        seed = None if seeds is None else seeds[i]
        save_labelmap(m, p, body_site=body_site, seed=seed, generator=generator)
        paths.append(p)
    return paths


def load_mask_dataset(directory) -> list[LabelMap]:
    paths = sorted(Path(directory).glob("mask_*.png"))
    return [load_labelmap(p) for p in paths]
