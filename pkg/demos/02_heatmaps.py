"""Rough and oracle path-gain heatmaps around a rooftop transmitter.

Run:  python demos/02_heatmaps.py [output_dir]

Builds a synthetic city (rolling terrain plus box buildings), places a TX
on a rooftop corner and renders three 8-bit PNGs:

* the elevation tile,
* the rough estimate (coarse FSPL + one knife edge, bilinearly upsampled),
* the oracle (dense FSPL + Deygout edges + two-ray ground term),

plus the dB difference between them.  It also prints how long each
generator took, since the rough estimate is meant to be cheap.
"""

import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from pgrefine.dataset import rooftop_tx, synthetic_city
from pgrefine.evalkit import nrmse
from pgrefine.geodata import crop_tile, save_elevation
from pgrefine.propagate import LinkGeometry, heatmap_to_png, oracle_truth, rough_estimate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "heatmaps"
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(3)
city = synthetic_city(rng, size_px=225)  # 225 px at 1.929 m is about 434 m square
tx = rooftop_tx(city, rng)
save_elevation(city, out / "city.asc")
geom = LinkGeometry()

t = time.perf_counter()
rough = rough_estimate(city, tx, geom, tile_px=100)
t_rough = time.perf_counter() - t
t = time.perf_counter()
oracle = oracle_truth(city, tx, geom, tile_px=100)
t_oracle = time.perf_counter() - t
print(f"rough estimate {t_rough * 1e3:.0f} ms, oracle {t_oracle * 1e3:.0f} ms")

elev = crop_tile(city, tx, 100)
gray = np.clip(elev.values / max(elev.values.max(), 1e-9) * 255, 0, 255).astype(np.uint8)
Image.fromarray(np.ascontiguousarray(gray[::-1])).save(out / "elevation.png")
heatmap_to_png(rough, out / "rough.png")
heatmap_to_png(oracle, out / "oracle.png")

diff = np.abs(oracle.values - rough.values)
both = oracle.mask & rough.mask
scaled = np.clip(diff / 40.0 * 255, 0, 255).astype(np.uint8)  # white = 40 dB or more
scaled[~both] = 0
Image.fromarray(np.ascontiguousarray(scaled[::-1])).save(out / "difference.png")
print(f"rough vs oracle: nRMSE {nrmse(rough, oracle):.4f}, median |diff| {np.median(diff[both]):.1f} dB")
print(f"PNGs written to {out}")
