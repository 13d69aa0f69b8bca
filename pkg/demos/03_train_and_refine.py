"""Train the U-Net to refine rough estimates, then fine-tune on shifted data.

Run:  python demos/03_train_and_refine.py [output_dir] [n_scenarios] [epochs]

Defaults (200 scenarios, 40 epochs, 32-px tiles, base width 8) finish in a
few minutes on one core and show the trend; the acceptance suite uses a
larger corpus.

1. Generate synthetic scenarios: rough estimates as inputs, oracle maps as
   targets.  Split 60/40 by scenario.
2. Train and compare the model's held-out errors with the rough estimate
   itself (ECDF CSV and PNG).
3. Generate "measurement-like" scenarios from a perturbed oracle (weaker
   ground reflection, a per-scenario gain offset), fine-tune on 10% of
   them and report the held-out 90% before and after.
"""

import json
import sys
from pathlib import Path

from pgrefine.dataset import split_scenarios, synthetic_corpus
from pgrefine.evalkit import baseline_compare, refine_experiment, write_ecdf_png
from pgrefine.propagate import LinkGeometry
from pgrefine.unet import TrainConfig, save_params, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "training"
n_scen = int(sys.argv[2]) if len(sys.argv) > 2 else 200
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 40
out.mkdir(parents=True, exist_ok=True)
net = dict(base_width=8, depth=3, batch_size=4, learning_rate=1e-3)

# -- 1. corpus -----------------------------------------------------------------
corpus = synthetic_corpus(n_scen, seed=0, n_augment=1, tile_px=32, map_px=60)
plan = split_scenarios({s.scenario_id for s in corpus}, 0.6, seed=0)
train_set, test_set = plan.select(corpus, "train"), plan.select(corpus, "test")
print(f"{len(train_set)} training / {len(test_set)} test samples")

# -- 2. train and compare --------------------------------------------------------
params, history = train(
    train_set,
    TrainConfig(epochs=epochs, seed=0, **net),
    log=lambda r: print(f"epoch {r['epoch']:3d}  loss {r['train_loss']:.5f}") if r["epoch"] % 10 == 0 else None,
)
save_params(params, out / "model.unet")
cmp = baseline_compare(test_set, params)
cmp.model.write_ecdf_csv(out / "ecdf_model.csv")
cmp.baseline.write_ecdf_csv(out / "ecdf_rough.csv")
write_ecdf_png({"U-Net": cmp.model, "rough estimate": cmp.baseline}, out / "ecdf.png", "held-out error")
print(
    f"held-out median error: model {cmp.model.median_abs_error:.4f}, rough {cmp.baseline.median_abs_error:.4f}; "
    f"nRMSE: model {cmp.model.nrmse:.4f}, rough {cmp.baseline.nrmse:.4f}"
)

# -- 3. fine-tune on measurement-like data ------------------------------------------
measured = synthetic_corpus(
    max(20, n_scen // 4),
    seed=1,
    n_augment=1,
    tile_px=32,
    map_px=60,
    truth_geom=LinkGeometry(reflection_coeff=-0.6),
    offset_db_range=(0.0, 2.0),
)
before, after, _ = refine_experiment(params, measured, 0.9, TrainConfig(epochs=20, seed=0, **net))
write_ecdf_png({"before": before, "after": after}, out / "ecdf_refine.png", "measurement-like holdout")
print(f"measurement-like holdout median: {before.median_abs_error:.4f} -> {after.median_abs_error:.4f}")
(out / "summary.json").write_text(
    json.dumps({"comparison": cmp.scalars(), "refine_before": before.scalars(), "refine_after": after.scalars()}, indent=2)
)
print(f"outputs written to {out}")
