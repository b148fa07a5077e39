"""Voxel Monte Carlo photon transport and initial-pressure conversion.

Photons carry a weight that is partially absorbed at every interaction
(implicit capture).  Each photon draws from its own counter-based random
stream keyed by ``(base_seed, photon_index)``; photons are grouped into
fixed-size blocks whose tallies are summed in block order, so the result
does not depend on how many worker threads process the blocks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .tissue_optics import OpticalVolume

BLOCK_SIZE = 8192
ROULETTE_THRESHOLD = 1e-4
ROULETTE_SURVIVAL = 0.1


class TransportError(ValueError):
    pass


@dataclass
class SourceSpec:
    """Rectangular top-face source.

    ``center_mm`` is the (x, y) aperture centre; ``None`` centres it on the
    volume.  A zero aperture with zero divergence is a pencil beam.
    """

    center_mm: tuple | None = None
    aperture_mm: tuple = (30.0, 2.0)
    direction: tuple = (0.0, 0.0, 1.0)
    divergence_deg: float = 5.0
    photon_count: int = 100_000
    base_seed: int = 0

    def validate(self) -> None:
        if int(self.photon_count) < 1:
            raise TransportError("photon_count must be >= 1")
        d = np.asarray(self.direction, dtype=float)
        norm = np.linalg.norm(d)
        if d.shape != (3,) or not abs(norm - 1.0) < 1e-9:
            raise TransportError(f"direction must be a unit 3-vector, got {self.direction}")
        if d[2] <= 0:
            raise TransportError("source must emit into the volume (+z component)")
        if not 0.0 <= self.divergence_deg < 90.0:
            raise TransportError("divergence_deg must lie in [0, 90)")
        if any(a < 0 for a in self.aperture_mm):
            raise TransportError("aperture extents must be nonnegative")

    @classmethod
    def pencil(cls, photon_count=100_000, base_seed=0, center_mm=None) -> "SourceSpec":
        return cls(center_mm=center_mm, aperture_mm=(0.0, 0.0), divergence_deg=0.0,
                   photon_count=photon_count, base_seed=base_seed)


@dataclass
class FluenceVolume:
    fluence: np.ndarray  # 1/mm^2 per unit launched energy
    spacing_mm: float
    wavelength_nm: float
    escaped_weight: float
    deposited_weight: float
    absorbed: np.ndarray | None = None  # fraction of launched energy per voxel
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.fluence.shape


@dataclass
class InitialPressureVolume:
    p0: np.ndarray
    spacing_mm: float
    wavelength_nm: float
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.p0.shape


# --------------------------------------------------------------------------
# random streams


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@numba.njit(inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(inline="always")
def _stream_seed(base_seed, index):
    return _mix(base_seed ^ _mix(np.uint64(index) + _GOLDEN))


@numba.njit(inline="always")
def _uniform(state):
    """Uniform in [0, 1); advances ``state[0]``."""
    state[0] = state[0] + _GOLDEN
    return float(_mix(state[0]) >> _S11) * _INV53


@numba.njit(inline="always")
def _hg_cos(g, xi):
    if abs(g) < 1e-6:
        return 2.0 * xi - 1.0
    t = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi)
    c = (1.0 + g * g - t * t) / (2.0 * g)
    if c > 1.0:
        return 1.0
    if c < -1.0:
        return -1.0
    return c


@numba.njit(inline="always")
def _deflect(ux, uy, uz, cost, phi):
    sint = math.sqrt(max(0.0, 1.0 - cost * cost))
    cosp = math.cos(phi)
    sinp = math.sin(phi)
    if abs(uz) > 0.99999:
        nx = sint * cosp
        ny = sint * sinp
        nz = cost if uz > 0 else -cost
    else:
        tmp = math.sqrt(1.0 - uz * uz)
        nx = sint * (ux * uz * cosp - uy * sinp) / tmp + ux * cost
        ny = sint * (uy * uz * cosp + ux * sinp) / tmp + uy * cost
        nz = -sint * cosp * tmp + uz * cost
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


# --------------------------------------------------------------------------
# kernel


@numba.njit(nogil=True, cache=True)
def _transport_block(mua, mus, gvol, dx, src, base_seed, start, stop, w_min, p_survive, path_tally, buf):
    nx, ny, nz = mua.shape
    cx, cy, ax, ay, dux, duy, duz, cos_max = src[0], src[1], src[2], src[3], src[4], src[5], src[6], src[7]
    inf = np.inf
    state = np.empty(1, dtype=np.uint64)
    deposited = 0.0
    escaped = 0.0
    for pid in range(start, stop):
        state[0] = _stream_seed(base_seed, pid)
        x = cx + (_uniform(state) - 0.5) * ax
        y = cy + (_uniform(state) - 0.5) * ay
        z = 0.0
        cost = 1.0 - _uniform(state) * (1.0 - cos_max)
        phi = 2.0 * math.pi * _uniform(state)
        ux, uy, uz = _deflect(dux, duy, duz, cost, phi)
        w = 1.0
        ix = int(math.floor(x / dx))
        iy = int(math.floor(y / dx))
        iz = 0
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny or uz <= 0.0:
            escaped += w
            continue
        tau = -math.log(1.0 - _uniform(state))
        while True:
            mt = mua[ix, iy, iz] + mus[ix, iy, iz]
            if ux > 0.0:
                tx = ((ix + 1) * dx - x) / ux
            elif ux < 0.0:
                tx = (ix * dx - x) / ux
            else:
                tx = inf
            if uy > 0.0:
                ty = ((iy + 1) * dx - y) / uy
            elif uy < 0.0:
                ty = (iy * dx - y) / uy
            else:
                ty = inf
            if uz > 0.0:
                tz = ((iz + 1) * dx - z) / uz
            elif uz < 0.0:
                tz = (iz * dx - z) / uz
            else:
                tz = inf
            axis = 0
            tb = tx
            if ty < tb:
                tb = ty
                axis = 1
            if tz < tb:
                tb = tz
                axis = 2
            if tb < 0.0:
                tb = 0.0
            if mt > 0.0 and mt * tb >= tau:
                s = tau / mt
                if path_tally:
                    buf[ix, iy, iz] += w * s
                x += s * ux
                y += s * uy
                z += s * uz
                a = mua[ix, iy, iz]
                sc = mus[ix, iy, iz]
                if sc <= 0.0:
                    if not path_tally:
                        buf[ix, iy, iz] += w
                    deposited += w
                    break
                dep = w * a / mt
                if not path_tally:
                    buf[ix, iy, iz] += dep
                deposited += dep
                w -= dep
                if w < w_min:
                    if _uniform(state) >= p_survive:
                        # terminated: residual weight is absorbed where it stops
                        if not path_tally:
                            buf[ix, iy, iz] += w
                        deposited += w
                        break
                cost = _hg_cos(gvol[ix, iy, iz], _uniform(state))
                phi = 2.0 * math.pi * _uniform(state)
                ux, uy, uz = _deflect(ux, uy, uz, cost, phi)
                tau = -math.log(1.0 - _uniform(state))
            else:
                if path_tally:
                    buf[ix, iy, iz] += w * tb
                if mt > 0.0:
                    tau -= mt * tb
                    if tau < 0.0:
                        tau = 0.0
                if axis == 0:
                    y += tb * uy
                    z += tb * uz
                    if ux > 0.0:
                        ix += 1
                        x = ix * dx
                    else:
                        x = ix * dx
                        ix -= 1
                    if ix < 0 or ix >= nx:
                        escaped += w
                        break
                elif axis == 1:
                    x += tb * ux
                    z += tb * uz
                    if uy > 0.0:
                        iy += 1
                        y = iy * dx
                    else:
                        y = iy * dx
                        iy -= 1
                    if iy < 0 or iy >= ny:
                        escaped += w
                        break
                else:
                    x += tb * ux
                    y += tb * uy
                    if uz > 0.0:
                        iz += 1
                        z = iz * dx
                    else:
                        z = iz * dx
                        iz -= 1
                    if iz < 0 or iz >= nz:
                        escaped += w
                        break
    return deposited, escaped


# --------------------------------------------------------------------------
# public API


def sample_hg(g: float, rng: np.random.Generator, size=None):
    """Draw cos(theta) from the Henyey-Greenstein phase function."""
    if not -1.0 <= g < 1.0:
        raise TransportError("g must lie in [-1, 1)")
    xi = rng.random(size)
    if abs(g) < 1e-6:
        return 2.0 * xi - 1.0
    t = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi)
    return np.clip((1.0 + g * g - t * t) / (2.0 * g), -1.0, 1.0)


def _source_array(source: SourceSpec, shape, spacing) -> np.ndarray:
    nx, ny, _ = shape
    if source.center_mm is None:
        cx, cy = nx * spacing / 2.0, ny * spacing / 2.0
    else:
        cx, cy = source.center_mm
    d = np.asarray(source.direction, dtype=float)
    return np.array([cx, cy, source.aperture_mm[0], source.aperture_mm[1], d[0], d[1], d[2],
                     math.cos(math.radians(source.divergence_deg))])


def simulate_fluence(volume: OpticalVolume, source: SourceSpec, workers: int = 1,
                     roulette_threshold: float = ROULETTE_THRESHOLD,
                     roulette_survival: float = ROULETTE_SURVIVAL,
                     block_size: int = BLOCK_SIZE, tally: str = "absorption") -> FluenceVolume:
    """Run the photon loop and return the normalised fluence.

    ``tally="absorption"`` estimates fluence from the weight deposited at
    interactions (divided by mua); ``tally="pathlength"`` accumulates weight
    times track length per voxel, which has far lower variance in weakly
    absorbing voxels.  Voxels with zero attenuation are crossed
    ballistically.  The output is a pure function of ``(volume, source)``;
    ``workers`` only changes speed.
    """
    if tally not in ("absorption", "pathlength"):
        raise TransportError(f"unknown tally {tally!r}")
    path_tally = tally == "pathlength"
    if workers < 1:
        raise TransportError("workers must be >= 1")
    source.validate()
    mua = np.ascontiguousarray(volume.mua, dtype=np.float64)
    mus = np.ascontiguousarray(volume.mus, dtype=np.float64)
    gv = np.ascontiguousarray(volume.g, dtype=np.float64)
    if mua.ndim != 3 or mua.shape != mus.shape or mua.shape != gv.shape:
        raise TransportError("invalid optical volume")
    if np.any(mua < 0) or np.any(mus < 0) or not np.all(np.isfinite(mua + mus)):
        raise TransportError("invalid optical volume: negative or non-finite coefficients")
    spacing = float(volume.spacing_mm)
    src = _source_array(source, mua.shape, spacing)
    seed = np.uint64(int(source.base_seed) & 0xFFFFFFFFFFFFFFFF)
    n = int(source.photon_count)
    blocks = [(s, min(s + block_size, n)) for s in range(0, n, block_size)]

    def run(block):
        buf = np.zeros(mua.shape, dtype=np.float64)
        dep, esc = _transport_block(mua, mus, gv, spacing, src, seed, block[0], block[1],
                                    roulette_threshold, roulette_survival, path_tally, buf)
        return buf, dep, esc

    total = np.zeros(mua.shape, dtype=np.float64)
    deposited = escaped = 0.0
    if workers == 1:
        results = map(run, blocks)
        for buf, dep, esc in results:
            total += buf
            deposited += dep
            escaped += esc
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # bounded look-ahead; tallies are merged strictly in block order
            pending = []
            it = iter(blocks)
            for block in it:
                pending.append(pool.submit(run, block))
                if len(pending) >= 2 * workers:
                    buf, dep, esc = pending.pop(0).result()
                    total += buf
                    deposited += dep
                    escaped += esc
            for fut in pending:
                buf, dep, esc = fut.result()
                total += buf
                deposited += dep
                escaped += esc

    voxel_volume = spacing ** 3
    if path_tally:
        fluence = total / (n * voxel_volume)
        absorbed = fluence * mua * voxel_volume
    else:
        absorbed = total / n
        with np.errstate(divide="ignore", invalid="ignore"):
            fluence = np.where(mua > 0, absorbed / (mua * voxel_volume), 0.0)
    return FluenceVolume(
        fluence=fluence,
        spacing_mm=spacing,
        wavelength_nm=volume.wavelength_nm,
        escaped_weight=escaped / n,
        deposited_weight=deposited / n,
        absorbed=absorbed,
        meta={"seed": int(source.base_seed), "photons": n, "tally": tally},
    )


def initial_pressure(fluence: FluenceVolume, optics: OpticalVolume) -> InitialPressureVolume:
    """Voxelwise ``p0 = mua * fluence`` (Grueneisen parameter fixed at 1)."""
    if fluence.shape != optics.shape:
        raise TransportError(f"shape mismatch: fluence {fluence.shape} vs optics {optics.shape}")
    if fluence.wavelength_nm != optics.wavelength_nm:
        raise TransportError("fluence and optics were computed at different wavelengths")
    return InitialPressureVolume(
        p0=optics.mua * fluence.fluence,
        spacing_mm=fluence.spacing_mm,
        wavelength_nm=fluence.wavelength_nm,
        meta=dict(fluence.meta),
    )
