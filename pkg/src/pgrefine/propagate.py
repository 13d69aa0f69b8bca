"""Physics path-gain generators.

Two generators share the same geometry code:

* :func:`rough_estimate` -- free-space loss plus the single dominant knife
  edge, evaluated on a coarse grid and bilinearly upsampled.  Cheap and
  blurry; this is the network's second input channel.
* :func:`oracle_truth` -- dense free-space loss, Deygout multi-edge
  diffraction (up to three edges) and a two-ray ground reflection on
  unobstructed links.  This is the training target.

All path gains are in dB and negative for real links.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import tileio
from .errors import DomainError
from .geodata import ElevationMap, GridTile, center_index, crop_tile, sample_bilinear, tile_coordinates

__all__ = [
    "SPEED_OF_LIGHT",
    "PG_MIN_DB",
    "PG_MAX_DB",
    "LinkGeometry",
    "Heatmap",
    "fspl_db",
    "fresnel_nu",
    "knife_edge_loss_db",
    "rough_estimate",
    "oracle_truth",
    "upsample_bilinear",
    "write_heatmap",
    "read_heatmap",
    "heatmap_to_png",
]

SPEED_OF_LIGHT = 299_792_458.0
PG_MIN_DB = -250.0
PG_MAX_DB = -50.0
NU_THRESHOLD = -0.78
MIN_PROFILE_SAMPLES = 16
GENERATORS = ("rough", "oracle", "model", "measurement")


@dataclass(frozen=True)
class LinkGeometry:
    """Antenna heights (above the local raster value), carrier and ground reflection."""

    frequency_hz: float = 910e6
    tx_height_agl_m: float = 2.0
    rx_height_agl_m: float = 1.5
    reflection_coeff: float = -0.9

    def __post_init__(self):
        if not self.frequency_hz > 0:
            raise DomainError(f"frequency_hz must be positive, got {self.frequency_hz}")
        if self.tx_height_agl_m < 0 or self.rx_height_agl_m < 0:
            raise DomainError("antenna heights must be non-negative")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.frequency_hz


@dataclass(frozen=True)
class Heatmap:
    """Path-gain tile in dB plus the tag of the generator that produced it."""

    tile: GridTile
    generator: str

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise DomainError(f"unknown generator tag {self.generator!r}")

    @property
    def values(self) -> np.ndarray:
        return self.tile.values

    @property
    def mask(self) -> np.ndarray:
        return self.tile.mask

    def clamped(self) -> np.ndarray:
        return np.clip(self.tile.values, PG_MIN_DB, PG_MAX_DB)


# ---------------------------------------------------------------------------
# Scalar physics
# ---------------------------------------------------------------------------


def fspl_db(distance_m, frequency_hz):
    """Free-space path loss ``20 log10(4 pi d / lambda)`` in dB."""
    d = np.asarray(distance_m, dtype=np.float64)
    if np.any(d <= 0):
        raise DomainError("distance must be positive")
    if not frequency_hz > 0:
        raise DomainError("frequency must be positive")
    wavelength = SPEED_OF_LIGHT / frequency_hz
    out = 20.0 * np.log10(4.0 * np.pi * d / wavelength)
    return float(out) if out.ndim == 0 else out


def fresnel_nu(h_m, d1_m, d2_m, wavelength_m):
    """Fresnel-Kirchhoff diffraction parameter for an edge ``h_m`` above the sightline."""
    d1 = np.asarray(d1_m, dtype=np.float64)
    d2 = np.asarray(d2_m, dtype=np.float64)
    if np.any(d1 <= 0) or np.any(d2 <= 0) or not wavelength_m > 0:
        raise DomainError("d1, d2 and wavelength must be positive")
    out = np.asarray(h_m, dtype=np.float64) * np.sqrt(2.0 * (d1 + d2) / (wavelength_m * d1 * d2))
    return float(out) if out.ndim == 0 else out


def knife_edge_loss_db(nu):
    """Single knife-edge loss J(nu); zero for nu <= -0.78."""
    nu = np.asarray(nu, dtype=np.float64)
    x = nu - 0.1
    with np.errstate(invalid="ignore", divide="ignore"):
        j = 6.9 + 20.0 * np.log10(np.sqrt(x * x + 1.0) + x)
    out = np.where(nu > NU_THRESHOLD, j, 0.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Vectorised link evaluation
# ---------------------------------------------------------------------------


def _nu_rows(z, line, d, span, wavelength, interior):
    """nu for every profile sample; -inf outside ``interior``."""
    d1 = np.where(interior, d, 1.0)
    d2 = np.where(interior, span - d, 1.0)
    d2 = np.where(d2 > 0, d2, 1.0)
    d1 = np.where(d1 > 0, d1, 1.0)
    nu = (z - line) * np.sqrt(2.0 * span / (wavelength * d1 * d2))
    return np.where(interior, nu, -np.inf)


def _argmax_stable(nu):
    # rounding keeps tie-breaking independent of last-bit noise
    return np.argmax(np.round(nu, 9), axis=1)


class _Links:
    """Profiles from one TX to many RX points, sampled row-wise."""

    def __init__(self, emap: ElevationMap, tx_xy, rx_x, rx_y, rx_ground, geom: LinkGeometry):
        cell = emap.cell_size_m
        self.wavelength = geom.wavelength_m
        self.h_tx = emap.ground_height(tx_xy) + geom.tx_height_agl_m
        self.h_rx = rx_ground + geom.rx_height_agl_m
        dx = rx_x - tx_xy[0]
        dy = rx_y - tx_xy[1]
        self.horiz = np.hypot(dx, dy)
        self.near = self.horiz < 0.5 * cell
        self.horiz_eff = np.maximum(self.horiz, 0.5 * cell)
        self.slant = np.hypot(self.horiz_eff, self.h_rx - self.h_tx)

        # the tolerance keeps whole-cell distances from flipping with rounding
        n_per = np.maximum(MIN_PROFILE_SAMPLES, np.ceil(self.horiz / cell - 1e-9).astype(np.int64) + 1)
        n_max = int(n_per.max()) if n_per.size else MIN_PROFILE_SAMPLES
        k = np.arange(n_max)[np.newaxis, :]
        last = (n_per - 1)[:, np.newaxis]
        t = np.minimum(k, last) / last
        self.k = k
        self.last = last
        self.d = t * self.horiz[:, np.newaxis]
        self.z, _ = sample_bilinear(emap, tx_xy[0] + t * dx[:, np.newaxis], tx_xy[1] + t * dy[:, np.newaxis])
        self.interior = (k > 0) & (k < last) & ~self.near[:, np.newaxis]
        line = self.h_tx + (self.h_rx - self.h_tx)[:, np.newaxis] * t
        span = self.horiz[:, np.newaxis]
        self.nu = _nu_rows(self.z, line, self.d, span, self.wavelength, self.interior)

    def dominant_edge_loss(self):
        nu_max = np.max(self.nu, axis=1)
        return knife_edge_loss_db(np.where(np.isfinite(nu_max), nu_max, -np.inf))

    def deygout_loss(self):
        """Recursive three-edge Deygout loss and a flag for links with any active edge."""
        rows = np.arange(self.nu.shape[0])
        k1 = _argmax_stable(self.nu)
        nu1 = self.nu[rows, k1]
        active = nu1 > NU_THRESHOLD
        loss = np.where(active, knife_edge_loss_db(np.where(active, nu1, -np.inf)), 0.0)

        d_e = self.d[rows, k1][:, np.newaxis]
        z_e = self.z[rows, k1][:, np.newaxis]
        kk = k1[:, np.newaxis]

        # TX -> main edge
        interior = self.interior & (self.k < kk) & active[:, np.newaxis]
        frac = np.divide(self.d, d_e, out=np.zeros_like(self.d), where=d_e > 0)
        line = self.h_tx + (z_e - self.h_tx) * frac
        nu_l = _nu_rows(self.z, line, self.d, d_e, self.wavelength, interior)
        loss = loss + knife_edge_loss_db(np.max(nu_l, axis=1))

        # main edge -> RX
        interior = self.interior & (self.k > kk) & active[:, np.newaxis]
        span = self.horiz[:, np.newaxis] - d_e
        rel = self.d - d_e
        frac = np.divide(rel, span, out=np.zeros_like(rel), where=span > 0)
        line = z_e + (self.h_rx[:, np.newaxis] - z_e) * frac
        nu_r = _nu_rows(self.z, line, rel, span, self.wavelength, interior)
        loss = loss + knife_edge_loss_db(np.max(nu_r, axis=1))
        return loss, active

    def two_ray_db(self, gamma: float, ht: float, hr: float):
        """Ground-reflection correction for antennas ``ht``/``hr`` above their local ground."""
        direct = np.hypot(self.horiz_eff, ht - hr)
        reflected = np.hypot(self.horiz_eff, ht + hr)
        phase = 2.0 * np.pi * (reflected - direct) / self.wavelength
        mag = np.abs(1.0 + gamma * np.exp(-1j * phase))
        return 20.0 * np.log10(np.maximum(mag, 1e-6))


def _check_tx(emap: ElevationMap, tx_xy):
    if not emap.contains(tx_xy):
        raise DomainError(f"TX {tuple(tx_xy)} is outside the map extent {emap.extent}")


def oracle_truth(emap: ElevationMap, tx_xy, geom: LinkGeometry, tile_px: int = 100) -> Heatmap:
    """Dense high-fidelity path gain: FSPL, Deygout diffraction, two-ray on clear links."""
    _check_tx(emap, tx_xy)
    ground = crop_tile(emap, tx_xy, tile_px)
    x, y = tile_coordinates(tx_xy, tile_px, emap.cell_size_m)
    sel = ground.mask
    links = _Links(emap, tx_xy, x[sel], y[sel], ground.values[sel], geom)
    diff, obstructed = links.deygout_loss()
    pg = -fspl_db(links.slant, geom.frequency_hz) - diff
    if geom.reflection_coeff != 0.0:
        pg = pg + np.where(obstructed, 0.0, links.two_ray_db(geom.reflection_coeff, geom.tx_height_agl_m, geom.rx_height_agl_m))
    values = np.zeros((tile_px, tile_px))
    values[sel] = pg
    return Heatmap(GridTile(values, sel.copy(), emap.cell_size_m), "oracle")


def rough_estimate(
    emap: ElevationMap,
    tx_xy,
    geom: LinkGeometry,
    tile_px: int = 100,
    coarse_factor: int = 4,
) -> Heatmap:
    """Coarse FSPL + dominant knife edge, bilinearly upsampled to ``tile_px``.

    Coarse nodes sit on every ``coarse_factor``-th fine pixel, phased so one
    node coincides with the TX pixel.  When ``tile_px / coarse_factor`` is
    odd (the default 100/4 gives 25) the lattice is symmetric about the TX
    and the output is exactly equivariant under quarter turns.
    """
    _check_tx(emap, tx_xy)
    if coarse_factor < 1 or tile_px % coarse_factor:
        raise DomainError(f"coarse_factor {coarse_factor} must divide tile_px {tile_px}")
    ground = crop_tile(emap, tx_xy, tile_px)
    x, y = tile_coordinates(tx_xy, tile_px, emap.cell_size_m)
    offset = center_index(tile_px) % coarse_factor
    idx = np.arange(offset, tile_px, coarse_factor)
    cx = x[np.ix_(idx, idx)]
    cy = y[np.ix_(idx, idx)]
    cmask = ground.mask[np.ix_(idx, idx)]
    cground = ground.values[np.ix_(idx, idx)]

    links = _Links(emap, tx_xy, cx[cmask], cy[cmask], cground[cmask], geom)
    pg = -fspl_db(links.slant, geom.frequency_hz) - links.dominant_edge_loss()
    coarse_vals = np.zeros(cmask.shape)
    coarse_vals[cmask] = pg
    coarse = GridTile(coarse_vals, cmask, emap.cell_size_m * coarse_factor)
    fine = upsample_bilinear(coarse, coarse_factor, offset=offset)
    mask = fine.mask & ground.mask
    return Heatmap(GridTile(np.where(mask, fine.values, 0.0), mask, emap.cell_size_m), "rough")


def upsample_bilinear(coarse: GridTile, factor: int, offset: int = 0) -> GridTile:
    """Bilinear upsampling by an integer factor.

    Fine pixel ``i`` reads coarse coordinate ``(i - offset) / factor``, clamped
    to the node range.  A fine pixel is valid only if every coarse node with
    non-zero weight is valid.
    """
    if factor < 1:
        raise DomainError(f"factor must be >= 1, got {factor}")
    n = coarse.size_px
    if factor == 1 and offset == 0:
        return GridTile(coarse.values.copy(), coarse.mask.copy(), coarse.cell_size_m)
    m = n * factor
    u = np.clip((np.arange(m) - offset) / factor, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    f = u - i0

    vals = coarse.values
    msk = coarse.mask
    out = np.zeros((m, m))
    valid = np.ones((m, m), dtype=bool)
    for ra, wa in ((i0, 1 - f), (i1, f)):
        for ca, wb in ((i0, 1 - f), (i1, f)):
            w = wa[:, np.newaxis] * wb[np.newaxis, :]
            used = w != 0
            ok = msk[np.ix_(ra, ca)]
            valid &= ~used | ok
            out += np.where(used & ok, w * vals[np.ix_(ra, ca)], 0.0)
    out[~valid] = 0.0
    return GridTile(out, valid, coarse.cell_size_m / factor)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def write_heatmap(heatmap: Heatmap, path) -> None:
    """Store clamped dB values as a PGT1 float tile; invalid pixels are NaN."""
    vals = np.where(heatmap.mask, heatmap.clamped(), np.nan)
    tileio.write_array(path, vals)


def read_heatmap(path, cell_size_m: float = 1.0, generator: str = "model") -> Heatmap:
    arr = tileio.read_array(path).astype(np.float64)
    mask = np.isfinite(arr)
    return Heatmap(GridTile(np.where(mask, arr, 0.0), mask, cell_size_m), generator)


def to_gray(values_db: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Linear 8-bit mapping of -250..-50 dB to 0..255; invalid pixels are 0."""
    scaled = (np.clip(values_db, PG_MIN_DB, PG_MAX_DB) - PG_MIN_DB) / (PG_MAX_DB - PG_MIN_DB)
    gray = np.round(scaled * 255.0).astype(np.uint8)
    gray[~mask] = 0
    return gray


def heatmap_to_png(heatmap: Heatmap, path) -> None:
    gray = to_gray(heatmap.values, heatmap.mask)
    # image rows run top-down, tiles bottom-up
    Image.fromarray(np.ascontiguousarray(gray[::-1])).save(Path(path))
