"""Elevation rasters, TX-centred tiles, rotation augmentation and terrain profiles.

Coordinate conventions
----------------------
Map rows are stored bottom-up: ``heights[r, c]`` is the cell whose centre sits
at ``origin + ((c + 0.5) * cell, (r + 0.5) * cell)``.  Tiles use the same
orientation; tile pixel ``(i, j)`` lies at ``center + ((j - k) * cell,
(i - k) * cell)`` with ``k = size_px // 2``, so the TX always occupies pixel
``(k, k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError

__all__ = [
    "ElevationMap",
    "GridTile",
    "TerrainProfile",
    "load_elevation",
    "save_elevation",
    "crop_tile",
    "rotate_tile",
    "terrain_profile",
    "sample_bilinear",
    "center_index",
]

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True)
class ElevationMap:
    """Geo-referenced height raster (terrain plus buildings, metres)."""

    heights: np.ndarray
    cell_size_m: float
    origin: tuple[float, float] = (0.0, 0.0)
    nodata: float = -9999.0

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise DomainError(f"heights must be a non-empty 2-D grid, got shape {h.shape}")
        if not self.cell_size_m > 0:
            raise DomainError(f"cell_size_m must be positive, got {self.cell_size_m}")
        valid = h != self.nodata
        if not np.all(np.isfinite(h[valid])):
            raise DomainError("non-sentinel heights must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width_px(self) -> int:
        return self.heights.shape[1]

    @property
    def height_px(self) -> int:
        return self.heights.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.heights != self.nodata

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(xmin, ymin, xmax, ymax)`` of the raster in map metres."""
        x0, y0 = self.origin
        return (x0, y0, x0 + self.width_px * self.cell_size_m, y0 + self.height_px * self.cell_size_m)

    def contains(self, xy) -> bool:
        xmin, ymin, xmax, ymax = self.extent
        return xmin <= xy[0] <= xmax and ymin <= xy[1] <= ymax

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        x0, y0 = self.origin
        return (x0 + (col + 0.5) * self.cell_size_m, y0 + (row + 0.5) * self.cell_size_m)

    def nearest_cell(self, x, y):
        """Row/column indices of the cells containing ``(x, y)`` (may be out of range)."""
        x0, y0 = self.origin
        col = np.floor((np.asarray(x, dtype=np.float64) - x0) / self.cell_size_m).astype(np.int64)
        row = np.floor((np.asarray(y, dtype=np.float64) - y0) / self.cell_size_m).astype(np.int64)
        return row, col

    def ground_height(self, xy) -> float:
        """Height of the cell containing ``xy``; sentinel cells read as 0."""
        row, col = self.nearest_cell(xy[0], xy[1])
        row = int(np.clip(row, 0, self.height_px - 1))
        col = int(np.clip(col, 0, self.width_px - 1))
        v = self.heights[row, col]
        return 0.0 if v == self.nodata else float(v)


@dataclass(frozen=True)
class GridTile:
    """Square raster tile with a validity mask (True = valid)."""

    values: np.ndarray
    mask: np.ndarray
    cell_size_m: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DomainError(f"tile values must be square, got shape {v.shape}")
        if m.shape != v.shape:
            raise DomainError(f"mask shape {m.shape} does not match values {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def size_px(self) -> int:
        return self.values.shape[0]

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with invalid pixels replaced by ``fill``."""
        return np.where(self.mask, self.values, fill)


@dataclass(frozen=True)
class TerrainProfile:
    distances_m: np.ndarray
    heights_m: np.ndarray
    n_nodata: int = field(default=0)

    @property
    def total_length_m(self) -> float:
        return float(self.distances_m[-1])

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.distances_m.tolist(), self.heights_m.tolist()))


def center_index(size_px: int) -> int:
    """Index of the TX pixel along each axis of a ``size_px`` tile."""
    return size_px // 2


# ---------------------------------------------------------------------------
# ASCII grid I/O
# ---------------------------------------------------------------------------


def load_elevation(path) -> ElevationMap:
    """Parse an ASCII elevation grid (``ncols``/``nrows``/... header, top row first)."""
    path = Path(path)
    header: dict[str, float] = {}
    rows: list[list[float]] = []
    with path.open("r") as fh:
        lines = fh.readlines()

    lineno = 0
    while len(header) < len(_HEADER_KEYS):
        if lineno >= len(lines):
            missing = [k for k in _HEADER_KEYS if k not in header]
            raise ParseError(f"missing header keys {missing}", line=lineno)
        text = lines[lineno].strip()
        lineno += 1
        if not text:
            continue
        parts = text.split()
        key = parts[0].lower()
        if key not in _HEADER_KEYS or len(parts) != 2:
            raise ParseError(f"malformed header entry {text!r}", line=lineno)
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric header value {parts[1]!r}", line=lineno) from None

    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise ParseError("ncols/nrows must be positive integers", line=None)
    ncols, nrows = int(ncols), int(nrows)

    for idx in range(lineno, len(lines)):
        text = lines[idx].strip()
        if not text:
            continue
        try:
            row = [float(tok) for tok in text.split()]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", line=idx + 1) from None
        if len(row) != ncols:
            raise ParseError(f"expected {ncols} values, found {len(row)}", line=idx + 1)
        rows.append(row)
    if len(rows) != nrows:
        raise ParseError(f"expected {nrows} data rows, found {len(rows)}", line=len(lines))

    heights = np.array(rows[::-1], dtype=np.float64)
    return ElevationMap(
        heights=heights,
        cell_size_m=header["cellsize"],
        origin=(header["xllcorner"], header["yllcorner"]),
        nodata=header["nodata_value"],
    )


def save_elevation(emap: ElevationMap, path) -> None:
    x0, y0 = emap.origin
    with Path(path).open("w") as fh:
        fh.write(f"ncols {emap.width_px}\n")
        fh.write(f"nrows {emap.height_px}\n")
        fh.write(f"xllcorner {x0!r}\n")
        fh.write(f"yllcorner {y0!r}\n")
        fh.write(f"cellsize {emap.cell_size_m!r}\n")
        fh.write(f"NODATA_value {emap.nodata!r}\n")
        for row in emap.heights[::-1]:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Tiles
# ---------------------------------------------------------------------------


def tile_coordinates(center_xy, size_px: int, cell_size_m: float):
    """Map coordinates ``(x, y)`` of every pixel centre of a TX-centred tile."""
    k = center_index(size_px)
    offs = (np.arange(size_px) - k) * cell_size_m
    x = center_xy[0] + offs[np.newaxis, :]
    y = center_xy[1] + offs[:, np.newaxis]
    return np.broadcast_to(x, (size_px, size_px)), np.broadcast_to(y, (size_px, size_px))


def crop_tile(emap: ElevationMap, center_xy, size_px: int) -> GridTile:
    """Nearest-cell crop of ``size_px`` x ``size_px`` pixels with the TX at the centre pixel."""
    if size_px < 1:
        raise DomainError(f"size_px must be >= 1, got {size_px}")
    x, y = tile_coordinates(center_xy, size_px, emap.cell_size_m)
    row, col = emap.nearest_cell(x, y)
    inside = (row >= 0) & (row < emap.height_px) & (col >= 0) & (col < emap.width_px)
    values = np.zeros((size_px, size_px))
    values[inside] = emap.heights[row[inside], col[inside]]
    mask = inside.copy()
    mask[inside] = values[inside] != emap.nodata
    values[~mask] = 0.0
    return GridTile(values=values, mask=mask, cell_size_m=emap.cell_size_m)


def _exact_trig(angle_deg: float) -> tuple[float, float]:
    a = angle_deg % 360.0
    quarter = round(a / 90.0)
    if abs(a - 90.0 * quarter) < 1e-12:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0), (1.0, 0.0))[quarter]
    rad = math.radians(a)
    return math.cos(rad), math.sin(rad)


def rotate_tile(tile: GridTile, angle_deg: float) -> GridTile:
    """Rotate a tile about its centre pixel with bilinear interpolation.

    A target pixel is valid only if every source pixel with non-zero
    interpolation weight is inside the tile and valid.  Multiples of 90
    degrees are pure index permutations (on odd-sized tiles; even-sized
    tiles lose the one row/column with no mirror partner).
    """
    n = tile.size_px
    k = center_index(n)
    cos_a, sin_a = _exact_trig(angle_deg)
    di = (np.arange(n) - k)[:, np.newaxis].astype(np.float64)
    dj = (np.arange(n) - k)[np.newaxis, :].astype(np.float64)
    si = cos_a * di + sin_a * dj + k
    sj = -sin_a * di + cos_a * dj + k
    # snap interpolation noise so that lattice-aligned sources stay exact
    si_r, sj_r = np.round(si), np.round(sj)
    si = np.where(np.abs(si - si_r) < 1e-9, si_r, si)
    sj = np.where(np.abs(sj - sj_r) < 1e-9, sj_r, sj)

    i0 = np.floor(si).astype(np.int64)
    j0 = np.floor(sj).astype(np.int64)
    fi = si - i0
    fj = sj - j0

    src_vals = tile.values
    src_mask = tile.mask
    out = np.zeros((n, n))
    valid = np.ones((n, n), dtype=bool)
    for oi, oj, w in (
        (0, 0, (1 - fi) * (1 - fj)),
        (1, 0, fi * (1 - fj)),
        (0, 1, (1 - fi) * fj),
        (1, 1, fi * fj),
    ):
        ii = i0 + oi
        jj = j0 + oj
        used = w != 0
        inb = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n)
        ok = np.zeros((n, n), dtype=bool)
        ok[inb] = src_mask[ii[inb], jj[inb]]
        valid &= ~used | ok
        contrib = np.zeros((n, n))
        sel = used & ok
        contrib[sel] = w[sel] * src_vals[ii[sel], jj[sel]]
        out += contrib
    out[~valid] = 0.0
    return GridTile(values=out, mask=valid, cell_size_m=tile.cell_size_m)


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


def sample_bilinear(emap: ElevationMap, x, y):
    """Bilinear interpolation of heights at arbitrary map points.

    Nodes are cell centres; points within half a cell of the border clamp to
    the edge nodes.  Sentinel cells read as height 0.  Returns the heights and
    a boolean array flagging samples that touched a sentinel cell.
    """
    x0, y0 = emap.origin
    h = emap.heights
    valid = emap.valid
    grid = np.where(valid, h, 0.0)
    u = (np.asarray(x, dtype=np.float64) - x0) / emap.cell_size_m - 0.5
    v = (np.asarray(y, dtype=np.float64) - y0) / emap.cell_size_m - 0.5
    u = np.clip(u, 0.0, emap.width_px - 1)
    v = np.clip(v, 0.0, emap.height_px - 1)
    c0 = np.minimum(np.floor(u).astype(np.int64), max(emap.width_px - 2, 0))
    r0 = np.minimum(np.floor(v).astype(np.int64), max(emap.height_px - 2, 0))
    c1 = np.minimum(c0 + 1, emap.width_px - 1)
    r1 = np.minimum(r0 + 1, emap.height_px - 1)
    fu = u - c0
    fv = v - r0
    out = (
        grid[r0, c0] * (1 - fu) * (1 - fv)
        + grid[r0, c1] * fu * (1 - fv)
        + grid[r1, c0] * (1 - fu) * fv
        + grid[r1, c1] * fu * fv
    )
    touched = ~(valid[r0, c0] & valid[r0, c1] & valid[r1, c0] & valid[r1, c1])
    return out, touched


def terrain_profile(emap: ElevationMap, tx_xy, rx_xy, n_samples: int) -> TerrainProfile:
    """Ground heights at ``n_samples`` equally spaced points from TX to RX."""
    if n_samples < 2:
        raise DomainError(f"n_samples must be >= 2, got {n_samples}")
    for name, xy in (("tx", tx_xy), ("rx", rx_xy)):
        if not emap.contains(xy):
            raise DomainError(f"{name} endpoint {tuple(xy)} is outside the map extent {emap.extent}")
    dx = rx_xy[0] - tx_xy[0]
    dy = rx_xy[1] - tx_xy[1]
    length = math.hypot(dx, dy)
    if length == 0.0:
        raise DomainError("degenerate profile: tx and rx coincide")
    t = np.arange(n_samples) / (n_samples - 1)
    heights, touched = sample_bilinear(emap, tx_xy[0] + t * dx, tx_xy[1] + t * dy)
    return TerrainProfile(distances_m=t * length, heights_m=heights, n_nodata=int(touched.sum()))
