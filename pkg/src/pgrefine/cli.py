"""Command-line entry point: ``pgrefine <command> [options]``.

Every command writes a run manifest ``<output>.run.json`` beside its main
output.  The manifest records the arguments, seed, tool version, input
digests and timestamps.  Exit codes: 0 success, 2 usage or input errors,
3 numerical or domain errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dataset import (
    SAMPLES_FORMAT,
    build_scenario,
    denormalize_pg,
    normalize_pg,
    read_samples,
    sample_name,
    split_scenarios,
    synthetic_corpus,
    write_samples,
)
from .errors import DomainError, FormatError, NoSignalError, ParseError
from .evalkit import (
    abs_errors,
    baseline_compare,
    refine_experiment,
    report_from_errors,
    split_sweep,
    write_ecdf_png,
    write_sweep_csv,
)
from .geodata import GridTile, crop_tile, load_elevation
from .propagate import Heatmap, LinkGeometry, heatmap_to_png, read_heatmap, rough_estimate, write_heatmap
from .sounder import CalibrationParams, SounderConfig, moving_average, process_capture, write_trace
from .unet import TrainConfig, load_params, predict, save_params, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DOMAIN = 3


class UsageError(Exception):
    """Inconsistent or missing command-line options."""


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode())
            h.update(b"\0")
            h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    arguments: dict
    seed: int
    tool_version: str
    input_digests: dict = field(default_factory=dict)
    started_utc: str = ""
    finished_utc: str = ""

    def write(self, path: Path) -> None:
        """Write atomically: a temporary file in the same directory is renamed over ``path``."""
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".run.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(asdict(self), fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


def manifest_path(output: Path) -> Path:
    return output.with_name(output.name + ".run.json")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


# ---------------------------------------------------------------------------
# Shared option groups
# ---------------------------------------------------------------------------


def _existing(path_str: str) -> Path:
    p = Path(path_str)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _add_geometry(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("link geometry")
    g.add_argument("--frequency-hz", type=float, default=910e6)
    g.add_argument("--tx-height", type=float, default=2.0, help="TX antenna height above the raster, m")
    g.add_argument("--rx-height", type=float, default=1.5, help="RX antenna height above the raster, m")
    g.add_argument("--reflection", type=float, default=-0.9, help="ground reflection coefficient")


def _geometry(a) -> LinkGeometry:
    return LinkGeometry(a.frequency_hz, a.tx_height, a.rx_height, a.reflection)


def _add_train_config(p: argparse.ArgumentParser, epochs: int = 20) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=8)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--base-width", type=int, default=32)
    g.add_argument("--depth", type=int, default=4)
    g.add_argument("--validation-fraction", type=float, default=0.0)


def _train_config(a) -> TrainConfig:
    return TrainConfig(
        epochs=a.epochs,
        batch_size=a.batch_size,
        learning_rate=a.lr,
        seed=a.seed,
        validation_fraction=a.validation_fraction,
        base_width=a.base_width,
        depth=a.depth,
    )


def _parse_ratios(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise UsageError(f"--ratios must be comma-separated numbers, got {text!r}") from exc


def read_tx_csv(path) -> list[tuple[float, float]]:
    """TX positions from a CSV with header ``x_m,y_m``."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x_m", "y_m"} <= set(reader.fieldnames):
            raise ParseError(f"{path}: header must contain x_m,y_m", line=1)
        out = []
        for row in reader:
            try:
                out.append((float(row["x_m"]), float(row["y_m"])))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}: non-numeric TX position", line=reader.line_num) from exc
    if not out:
        raise ParseError(f"{path}: no TX positions")
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(a, inputs: dict) -> Path:
    out = Path(a.out)
    geom = _geometry(a)
    if a.random_scenarios is not None:
        if a.map or a.tx_file:
            raise UsageError("--random-scenarios excludes --map/--tx-file")
        samples = synthetic_corpus(
            a.random_scenarios,
            a.seed,
            n_augment=a.augment,
            tile_px=a.tile_px,
            map_px=a.map_px,
            coarse_factor=a.coarse_factor,
            geom=geom,
        )
    else:
        if not (a.map and a.tx_file):
            raise UsageError("gen needs --map and --tx-file, or --random-scenarios")
        inputs["map"] = _existing(a.map)
        inputs["tx_file"] = _existing(a.tx_file)
        emap = load_elevation(a.map)
        txs = read_tx_csv(a.tx_file)
        master = np.random.default_rng(a.seed)
        samples = []
        for sid, tx in enumerate(txs):
            samples.extend(
                build_scenario(
                    emap,
                    tx,
                    geom,
                    a.augment,
                    seed=int(master.integers(2**31)),
                    scenario_id=sid,
                    tile_px=a.tile_px,
                    coarse_factor=a.coarse_factor,
                )
            )
    write_samples(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return out


def cmd_train(a, inputs: dict) -> Path:
    inputs["samples"] = _existing(a.samples)
    if a.init:
        inputs["init"] = _existing(a.init)
    samples = read_samples(a.samples)
    if a.ratio is not None:
        plan = split_scenarios({s.scenario_id for s in samples}, a.ratio, a.seed)
        samples = plan.select(samples, "train")
        print(f"training on {len(plan.train_ids)} of {len(plan.train_ids) + len(plan.test_ids)} scenarios")
    cfg = _train_config(a)
    init = load_params(a.init) if a.init else None
    log = (lambda r: print(json.dumps(r))) if a.verbose else None
    params, history = train(samples, cfg, params=init, log=log)
    out = Path(a.out)
    save_params(params, out)
    hist_path = Path(a.history) if a.history else out.with_name(out.name + ".history.csv")
    with hist_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["epoch", "train_loss"] + (["val_loss"] if history and "val_loss" in history[0] else [])
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] if c == "epoch" else repr(row[c]) for c in cols])
    if history:
        print(f"final train loss {history[-1]['train_loss']:.6g}")
    return out


def cmd_predict(a, inputs: dict) -> Path:
    inputs["model"] = _existing(a.model)
    params = load_params(a.model)
    tile_px = int(params.meta.get("tile_px", 100))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.samples:
        if a.map or a.tx:
            raise UsageError("--samples excludes --map/--tx")
        inputs["samples"] = _existing(a.samples)
        jobs = [(sample_name(s), s.elevation, s.estimate, None) for s in read_samples(a.samples)]
    else:
        if not (a.map and a.tx):
            raise UsageError("predict needs --samples, or --map with --tx X,Y")
        inputs["map"] = _existing(a.map)
        emap = load_elevation(a.map)
        try:
            tx = tuple(float(v) for v in a.tx.split(","))
        except ValueError as exc:
            raise UsageError(f"--tx must be X,Y in metres, got {a.tx!r}") from exc
        if len(tx) != 2:
            raise UsageError(f"--tx must be X,Y in metres, got {a.tx!r}")
        t0 = time.perf_counter()
        rough = rough_estimate(emap, tx, _geometry(a), tile_px, a.coarse_factor)
        rough_s = time.perf_counter() - t0
        est = GridTile(normalize_pg(rough.values), rough.mask, rough.tile.cell_size_m)
        jobs = [("tile", crop_tile(emap, tx, tile_px), est, rough_s)]
    for name, elev, est, rough_s in jobs:
        heat, latency = predict(params, elev, est)
        write_heatmap(heat, out / f"{name}.pgt")
        heatmap_to_png(heat, out / f"{name}.png")
        if a.time:
            line = f"{name}: predict {latency * 1e3:.1f} ms"
            if rough_s is not None:
                line += f", rough_estimate {rough_s * 1e3:.1f} ms"
            print(line)
    print(f"wrote {len(jobs)} heatmaps to {out}")
    return out


def _is_sample_dir(path: Path) -> bool:
    man = path / "manifest.json"
    if not man.is_file():
        return False
    try:
        return json.loads(man.read_text()).get("format") == SAMPLES_FORMAT
    except json.JSONDecodeError:
        return False


def _heatmap_dir(path: Path, generator: str) -> dict[str, Heatmap]:
    """Heatmaps keyed by tile name from a heatmap directory or a sample directory's targets."""
    if _is_sample_dir(path):
        out = {}
        for s in read_samples(path):
            db = np.where(s.mask, denormalize_pg(s.target.values), 0.0)
            out[sample_name(s)] = Heatmap(GridTile(db, s.mask, s.cell_size_m), generator)
        return out
    return {f.stem: read_heatmap(f, generator=generator) for f in sorted(path.glob("*.pgt"))}


def cmd_eval(a, inputs: dict) -> Path:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.model:
        if a.pred:
            raise UsageError("--model excludes --pred")
        if not a.samples:
            raise UsageError("--model needs --samples")
        inputs["model"] = _existing(a.model)
        inputs["samples"] = _existing(a.samples)
        samples = read_samples(a.samples)
        cmp = baseline_compare(samples, load_params(a.model))
        (out / "report.json").write_text(json.dumps(cmp.scalars(), indent=2))
        cmp.model.write_ecdf_csv(out / "ecdf_model.csv")
        cmp.baseline.write_ecdf_csv(out / "ecdf_rough.csv")
        write_ecdf_png({"U-Net": cmp.model, "rough estimate": cmp.baseline}, out / "ecdf.png")
        print(
            f"model nrmse {cmp.model.nrmse:.5f} median {cmp.model.median_abs_error:.5f}; "
            f"rough nrmse {cmp.baseline.nrmse:.5f} median {cmp.baseline.median_abs_error:.5f}"
        )
        return out
    if not (a.pred and (a.truth or a.samples)):
        raise UsageError("eval needs --model with --samples, or --pred with --truth")
    pred_dir = _existing(a.pred)
    truth_dir = _existing(a.truth or a.samples)
    inputs["pred"], inputs["truth"] = pred_dir, truth_dir
    truth = _heatmap_dir(truth_dir, "oracle")
    preds = _heatmap_dir(pred_dir, "model")
    common = sorted(set(truth) & set(preds))
    if not common:
        raise DomainError(f"no matching tiles between {pred_dir} and {truth_dir}")
    errs = np.concatenate([abs_errors(preds[k], truth[k]) for k in common])
    rep = report_from_errors(errs, "model")
    rep.write_json(out / "report.json")
    rep.write_ecdf_csv(out / "ecdf.csv")
    write_ecdf_png({"prediction": rep}, out / "ecdf.png")
    print(f"{len(common)} tiles: nrmse {rep.nrmse:.5f} median {rep.median_abs_error:.5f}")
    return out


def cmd_sweep(a, inputs: dict) -> Path:
    inputs["samples"] = _existing(a.samples)
    samples = read_samples(a.samples)
    log = (lambda r: print(json.dumps(r))) if a.verbose else None
    rows = split_sweep(samples, _parse_ratios(a.ratios), a.repeats, _train_config(a), a.seed, log=log)
    out = Path(a.out)
    write_sweep_csv(rows, out)
    for r in rows:
        state = f"skipped ({r.warning})" if r.skipped else f"{r.mean_nrmse:.5f} +- {r.std_nrmse:.5f}"
        print(f"ratio {r.ratio}: {state}")
    return out


def cmd_sound(a, inputs: dict) -> Path:
    inputs["iq"] = _existing(a.iq)
    inputs["gps"] = _existing(a.gps)
    cal = CalibrationParams()
    if a.cal:
        inputs["cal"] = _existing(a.cal)
        cal = CalibrationParams.from_json(a.cal)
    cfg = SounderConfig(chip_rate_hz=a.chip_rate, calibration=cal, threshold_db=a.threshold_db, guard=a.guard)
    trace = process_capture(a.iq, a.gps, cfg)
    if a.window > 1:
        trace = moving_average(trace, a.window)
    out = Path(a.out)
    write_trace(trace, out)
    print(f"wrote {len(trace)} trace points to {out}")
    return out


def cmd_refine(a, inputs: dict) -> Path:
    inputs["model"] = _existing(a.model)
    inputs["samples"] = _existing(a.samples)
    params = load_params(a.model)
    samples = read_samples(a.samples)
    before, after, tuned = refine_experiment(params, samples, a.holdout, _train_config(a), a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"before": before.scalars(), "after": after.scalars(), "holdout_fraction": a.holdout}
    (out / "report.json").write_text(json.dumps(report, indent=2))
    before.write_ecdf_csv(out / "ecdf_before.csv")
    after.write_ecdf_csv(out / "ecdf_after.csv")
    write_ecdf_png({"before fine-tuning": before, "after fine-tuning": after}, out / "ecdf.png")
    save_params(tuned, out / "refined.unet")
    print(f"holdout median {before.median_abs_error:.5f} -> {after.median_abs_error:.5f}")
    return out


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for every stochastic stage")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pgrefine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pgrefine {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a sample directory")
    p.add_argument("--map", help="elevation raster (ESRI ASCII grid)")
    p.add_argument("--tx-file", help="CSV of TX positions with header x_m,y_m")
    p.add_argument("--random-scenarios", type=int, help="use N synthetic cities instead of a map")
    p.add_argument("--augment", type=int, default=4, help="samples per TX including the unrotated one")
    p.add_argument("--tile-px", type=int, default=100)
    p.add_argument("--map-px", type=int, default=128, help="synthetic city size")
    p.add_argument("--coarse-factor", type=int, default=4)
    p.add_argument("--out", required=True)
    _add_geometry(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a model on a sample directory")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--ratio", type=float, help="train on this scenario fraction only")
    p.add_argument("--init", help="fine-tune from this model")
    p.add_argument("--history", help="loss history CSV (default <out>.history.csv)")
    _add_train_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", help="sample directory to predict")
    p.add_argument("--map", help="elevation raster for a single TX")
    p.add_argument("--tx", help="TX position X,Y in metres")
    p.add_argument("--coarse-factor", type=int, default=4)
    p.add_argument("--time", action="store_true", help="print per-tile latency")
    p.add_argument("--out", required=True, help="output directory")
    _add_geometry(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="error report and ECDF")
    p.add_argument("--model", help="compare this model with the rough estimate")
    p.add_argument("--samples", help="sample directory (ground truth)")
    p.add_argument("--pred", help="directory of predicted heatmaps")
    p.add_argument("--truth", help="directory of truth heatmaps or samples")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="split-ratio sweep")
    p.add_argument("--samples", required=True)
    p.add_argument("--ratios", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", required=True, help="sweep CSV")
    _add_train_config(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sound", parents=[common], help="path-gain trace from an IQ capture")
    p.add_argument("--iq", required=True)
    p.add_argument("--gps", required=True)
    p.add_argument("--cal", help="calibration JSON")
    p.add_argument("--chip-rate", type=float, default=10e6)
    p.add_argument("--threshold-db", type=float, default=3.0)
    p.add_argument("--guard", type=int, default=5)
    p.add_argument("--window", type=int, default=1, help="moving-average window in seconds (odd)")
    p.add_argument("--out", required=True, help="trace CSV")
    p.set_defaults(func=cmd_sound)

    p = sub.add_parser("refine", parents=[common], help="fine-tune on measurement-like samples")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--holdout", type=float, default=0.9)
    p.add_argument("--out", required=True, help="output directory")
    _add_train_config(p, epochs=10)
    p.set_defaults(func=cmd_refine)
    return parser


def _error_code(exc: BaseException) -> int | None:
    if isinstance(exc, (UsageError, OSError, ParseError, FormatError, json.JSONDecodeError)):
        return EXIT_INPUT
    if isinstance(exc, (DomainError, NoSignalError, ArithmeticError)):
        return EXIT_DOMAIN
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if a.threads is not None and a.threads < 1:
        print("pgrefine: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT

    args = {k: v for k, v in vars(a).items() if k not in ("func",)}
    inputs: dict[str, Path] = {}
    started = _now()
    try:
        with threadpool_limits(limits=a.threads):
            out = a.func(a, inputs)
    except Exception as exc:
        code = _error_code(exc)
        if code is None:
            raise
        print(f"pgrefine {a.command}: error: {exc}", file=sys.stderr)
        return code
    manifest = RunManifest(
        command=a.command,
        arguments=args,
        seed=a.seed,
        tool_version=__version__,
        input_digests={k: _digest(p) for k, p in sorted(inputs.items())},
        started_utc=started,
        finished_utc=_now(),
    )
    manifest.write(manifest_path(Path(out)))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
