"""Training samples: TX-centred crops, normalisation, rotation augmentation, splits, persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tileio
from .errors import DomainError, FormatError, VersionError
from .geodata import ElevationMap, GridTile, crop_tile, rotate_tile
from .propagate import PG_MAX_DB, PG_MIN_DB, LinkGeometry, oracle_truth, rough_estimate

__all__ = [
    "ELEVATION_SCALE_M",
    "Sample",
    "SplitPlan",
    "normalize_pg",
    "denormalize_pg",
    "normalize_elevation",
    "build_scenario",
    "split_scenarios",
    "write_samples",
    "read_samples",
    "sample_name",
    "stack_inputs",
    "synthetic_city",
    "rooftop_tx",
    "synthetic_corpus",
]

ELEVATION_SCALE_M = 100.0
SAMPLES_FORMAT = "pgrefine-samples"
SAMPLES_VERSION = 1
_CHANNELS = ("elevation", "estimate", "target", "mask")


def normalize_pg(pg_db):
    """Map -250..-50 dB onto 0..1 (clamped)."""
    out = np.clip((np.asarray(pg_db, dtype=np.float64) - PG_MIN_DB) / (PG_MAX_DB - PG_MIN_DB), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def denormalize_pg(x):
    out = np.asarray(x, dtype=np.float64) * (PG_MAX_DB - PG_MIN_DB) + PG_MIN_DB
    return float(out) if out.ndim == 0 else out


def normalize_elevation(heights_m):
    return np.clip(np.asarray(heights_m, dtype=np.float64) / ELEVATION_SCALE_M, 0.0, 1.0)


@dataclass(frozen=True)
class Sample:
    """One TX-centred example.  All channel tiles carry the shared ``mask``."""

    elevation: GridTile
    estimate: GridTile
    target: GridTile
    mask: np.ndarray
    scenario_id: int
    augmentation_angle_deg: float = 0.0
    augmentation_index: int = 0
    frequency_hz: float = 910e6

    @property
    def size_px(self) -> int:
        return self.mask.shape[0]

    @property
    def cell_size_m(self) -> float:
        return self.elevation.cell_size_m

    def model_input(self) -> np.ndarray:
        """``(2, n, n)`` array: normalised elevation and rough estimate, invalid pixels 0."""
        elev = np.where(self.mask, normalize_elevation(self.elevation.values), 0.0)
        est = np.where(self.mask, self.estimate.values, 0.0)
        return np.stack([elev, est])


def stack_inputs(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(x, target, mask)`` with shapes ``(N,2,n,n)``, ``(N,n,n)``, ``(N,n,n)``."""
    x = np.stack([s.model_input() for s in samples])
    y = np.stack([np.where(s.mask, s.target.values, 0.0) for s in samples])
    m = np.stack([s.mask for s in samples])
    return x, y, m


def _f32(a: np.ndarray) -> np.ndarray:
    # samples hold float32-representable values so persistence is lossless
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _assemble(elev: GridTile, est: GridTile, tgt: GridTile, **meta) -> Sample:
    mask = elev.mask & est.mask & tgt.mask
    tiles = [GridTile(_f32(np.where(mask, t.values, 0.0)), mask.copy(), t.cell_size_m) for t in (elev, est, tgt)]
    return Sample(tiles[0], tiles[1], tiles[2], mask, **meta)


def build_scenario(
    emap: ElevationMap,
    tx_xy,
    geom: LinkGeometry,
    n_augment: int,
    seed: int,
    *,
    scenario_id: int = 0,
    tile_px: int = 100,
    coarse_factor: int = 4,
    truth_geom: LinkGeometry | None = None,
    truth_offset_db: float = 0.0,
) -> list[Sample]:
    """Unrotated sample followed by ``n_augment - 1`` randomly rotated copies.

    ``truth_geom``/``truth_offset_db`` perturb the target generator only, to
    emulate measurement data that disagrees with the physics used for the
    rough input.
    """
    if n_augment < 1:
        raise DomainError(f"n_augment must be >= 1, got {n_augment}")
    elev = crop_tile(emap, tx_xy, tile_px)
    rough = rough_estimate(emap, tx_xy, geom, tile_px, coarse_factor)
    truth = oracle_truth(emap, tx_xy, truth_geom or geom, tile_px)
    est = GridTile(normalize_pg(rough.values), rough.mask, rough.tile.cell_size_m)
    tgt = GridTile(normalize_pg(truth.values + truth_offset_db), truth.mask, truth.tile.cell_size_m)

    rng = np.random.default_rng(seed)
    angles = [0.0] + list(rng.uniform(0.0, 360.0, size=n_augment - 1))
    out = []
    for idx, angle in enumerate(angles):
        if idx == 0:
            tiles = (elev, est, tgt)
        else:
            tiles = tuple(rotate_tile(t, angle) for t in (elev, est, tgt))
        out.append(
            _assemble(
                *tiles,
                scenario_id=scenario_id,
                augmentation_angle_deg=float(angle),
                augmentation_index=idx,
                frequency_hz=geom.frequency_hz,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    ratio: float
    seed: int

    def select(self, samples, which: str = "train") -> list[Sample]:
        ids = set(self.train_ids if which == "train" else self.test_ids)
        return [s for s in samples if s.scenario_id in ids]


def split_scenarios(ids, ratio: float, seed: int) -> SplitPlan:
    """Seeded scenario-level split; ``floor(ratio * N + 0.5)`` scenarios go to training."""
    ids = sorted(set(int(i) for i in ids))
    if not 0.0 < ratio < 1.0:
        raise DomainError(f"ratio must be in (0, 1), got {ratio}")
    if len(ids) < 2:
        raise DomainError("need at least two scenarios to split")
    # the tolerance keeps products like 0.7 * 5 = 3.4999... on the half-up side
    n_train = int(math.floor(ratio * len(ids) + 0.5 + 1e-9))
    if n_train == 0 or n_train == len(ids):
        raise DomainError(f"ratio {ratio} with {len(ids)} scenarios leaves one side empty")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitPlan(tuple(sorted(shuffled[:n_train])), tuple(sorted(shuffled[n_train:])), ratio, seed)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def sample_name(s: Sample) -> str:
    """Directory name of a sample inside a sample directory."""
    return f"s{s.scenario_id:05d}_a{s.augmentation_index:04d}"


def write_samples(samples, directory) -> None:
    """Write samples as PGT1 tiles plus JSON metadata, ordered by (scenario, augmentation)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    ordered = sorted(samples, key=lambda s: (s.scenario_id, s.augmentation_index))
    entries = []
    for s in ordered:
        name = sample_name(s)
        d = root / name
        d.mkdir(exist_ok=True)
        tileio.write_array(d / "elevation.pgt", s.elevation.values)
        tileio.write_array(d / "estimate.pgt", s.estimate.values)
        tileio.write_array(d / "target.pgt", s.target.values)
        tileio.write_array(d / "mask.pgt", s.mask)
        meta = {
            "scenario_id": s.scenario_id,
            "augmentation_index": s.augmentation_index,
            "augmentation_angle_deg": s.augmentation_angle_deg,
            "cell_size_m": s.cell_size_m,
            "frequency_hz": s.frequency_hz,
        }
        (d / "sample.json").write_text(json.dumps(meta, indent=2))
        entries.append(name)
    manifest = {"format": SAMPLES_FORMAT, "version": SAMPLES_VERSION, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_samples(directory) -> list[Sample]:
    root = Path(directory)
    man_path = root / "manifest.json"
    if not man_path.is_file():
        raise FormatError(f"{root} has no manifest.json")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format") != SAMPLES_FORMAT:
        raise FormatError(f"{man_path}: not a sample directory manifest")
    if manifest.get("version") != SAMPLES_VERSION:
        raise VersionError(f"{man_path}: unsupported version {manifest.get('version')}")
    out = []
    for name in manifest["samples"]:
        d = root / name
        meta = json.loads((d / "sample.json").read_text())
        arrays = {c: tileio.read_array(d / f"{c}.pgt") for c in _CHANNELS}
        mask = arrays["mask"]
        cell = float(meta["cell_size_m"])
        tiles = [GridTile(arrays[c].astype(np.float64), mask.copy(), cell) for c in _CHANNELS[:3]]
        out.append(
            Sample(
                *tiles,
                mask=mask,
                scenario_id=int(meta["scenario_id"]),
                augmentation_angle_deg=float(meta["augmentation_angle_deg"]),
                augmentation_index=int(meta["augmentation_index"]),
                frequency_hz=float(meta["frequency_hz"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Synthetic scenarios
# ---------------------------------------------------------------------------


def synthetic_city(
    rng: np.random.Generator,
    size_px: int = 128,
    cell_size_m: float = 1.929,
    n_buildings: int = 18,
) -> ElevationMap:
    """Rolling terrain with axis-aligned box buildings."""
    n = size_px
    yy, xx = np.mgrid[0:n, 0:n] / n
    terrain = np.zeros((n, n))
    for _ in range(3):
        fx, fy = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        terrain += rng.uniform(0.5, 2.5) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    terrain -= terrain.min()
    heights = terrain.copy()
    for _ in range(n_buildings):
        w, h = rng.integers(5, 18, size=2)
        r0 = int(rng.integers(0, n - h))
        c0 = int(rng.integers(0, n - w))
        top = terrain[r0 : r0 + h, c0 : c0 + w].max() + rng.uniform(6.0, 40.0)
        block = heights[r0 : r0 + h, c0 : c0 + w]
        heights[r0 : r0 + h, c0 : c0 + w] = np.maximum(block, top)
    return ElevationMap(heights=heights, cell_size_m=cell_size_m)


def rooftop_tx(emap: ElevationMap, rng: np.random.Generator, search_px: int = 12) -> tuple[float, float]:
    """Pick a rooftop corner cell near the map centre (falls back to the centre cell)."""
    h = emap.heights
    n_r, n_c = h.shape
    cr, cc = n_r // 2, n_c // 2
    lo_r, hi_r = max(1, cr - search_px), min(n_r - 1, cr + search_px)
    lo_c, hi_c = max(1, cc - search_px), min(n_c - 1, cc + search_px)
    win = h[lo_r - 1 : hi_r + 1, lo_c - 1 : hi_c + 1]
    core = win[1:-1, 1:-1]
    # corner: higher than the ground on two orthogonal sides
    drop = 3.0
    lower_n = core - win[2:, 1:-1] > drop
    lower_s = core - win[:-2, 1:-1] > drop
    lower_e = core - win[1:-1, 2:] > drop
    lower_w = core - win[1:-1, :-2] > drop
    corner = (lower_n | lower_s) & (lower_e | lower_w)
    cand = np.argwhere(corner)
    if cand.size == 0:
        r, c = cr, cc
    else:
        r, c = cand[int(rng.integers(len(cand)))]
        r, c = int(r) + lo_r, int(c) + lo_c
    return emap.cell_center(r, c)


def synthetic_corpus(
    n_scenarios: int,
    seed: int,
    *,
    n_augment: int = 4,
    tile_px: int = 100,
    map_px: int = 128,
    coarse_factor: int = 4,
    geom: LinkGeometry | None = None,
    truth_geom: LinkGeometry | None = None,
    offset_db_range: tuple[float, float] = (0.0, 0.0),
    first_id: int = 0,
) -> list[Sample]:
    """Random cities, one rooftop TX each, with rough inputs and oracle targets.

    A per-scenario target offset is drawn uniformly from ``offset_db_range``.
    """
    geom = geom or LinkGeometry()
    master = np.random.default_rng(seed)
    out: list[Sample] = []
    for sid in range(first_id, first_id + n_scenarios):
        rng = np.random.default_rng(master.integers(2**63))
        emap = synthetic_city(rng, size_px=map_px)
        tx = rooftop_tx(emap, rng)
        offset = float(rng.uniform(*offset_db_range)) if offset_db_range != (0.0, 0.0) else 0.0
        out.extend(
            build_scenario(
                emap,
                tx,
                geom,
                n_augment,
                seed=int(rng.integers(2**31)),
                scenario_id=sid,
                tile_px=tile_px,
                coarse_factor=coarse_factor,
                truth_geom=truth_geom,
                truth_offset_db=offset,
            )
        )
    return out


def with_target(sample: Sample, target_values: np.ndarray) -> Sample:
    """Copy of ``sample`` with a new normalised target (same mask)."""
    tgt = GridTile(_f32(np.where(sample.mask, target_values, 0.0)), sample.mask.copy(), sample.cell_size_m)
    return replace(sample, target=tgt)
