"""Error metrics and experiment runners.

All normalised errors are dB errors divided by the 200 dB evaluation range
(-250..-50 dB).  ECDFs pool per-pixel absolute errors over every evaluated
tile.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Sample, denormalize_pg, split_scenarios
from .errors import DomainError
from .propagate import PG_MAX_DB, PG_MIN_DB, Heatmap
from .unet import ModelParams, TrainConfig, predict_samples, train

__all__ = [
    "PG_RANGE_DB",
    "EvalReport",
    "BaselineComparison",
    "SweepRow",
    "nrmse",
    "ecdf",
    "abs_errors",
    "report_from_errors",
    "evaluate_samples",
    "baseline_compare",
    "split_sweep",
    "refine_experiment",
    "write_sweep_csv",
    "write_ecdf_png",
    "DEFAULT_RATIOS",
]

PG_RANGE_DB = PG_MAX_DB - PG_MIN_DB
DEFAULT_RATIOS = tuple(round(0.1 * k, 1) for k in range(1, 10))

Predictor = Callable[[Sequence[Sample]], np.ndarray]


@dataclass
class EvalReport:
    """Pooled error statistics of one generator against ground truth."""

    nrmse: float
    rmse_db: float
    median_abs_error: float
    median_abs_error_db: float
    n_pixels: int
    generator_compared: str
    wall_clock_s: float = 0.0
    ecdf_errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def ecdf_fractions(self) -> np.ndarray:
        n = self.ecdf_errors.size
        return np.arange(1, n + 1) / n

    @property
    def ecdf(self) -> list[tuple[float, float]]:
        return list(zip(self.ecdf_errors.tolist(), self.ecdf_fractions.tolist()))

    def ecdf_at(self, error: float) -> float:
        """Fraction of pixels with normalised error <= ``error``."""
        return float(np.searchsorted(self.ecdf_errors, error, side="right") / self.ecdf_errors.size)

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("ecdf_errors")
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.scalars(), indent=2))

    def write_ecdf_csv(self, path, max_points: int | None = 2000) -> None:
        err, frac = self.ecdf_errors, self.ecdf_fractions
        if max_points and err.size > max_points:
            idx = np.unique(np.linspace(0, err.size - 1, max_points).round().astype(int))
            err, frac = err[idx], frac[idx]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["error_normalized", "cumulative_fraction"])
            for e, f in zip(err, frac):
                w.writerow([f"{e:.8g}", f"{f:.8g}"])


def _joint(pred: Heatmap, truth: Heatmap) -> np.ndarray:
    if pred.values.shape != truth.values.shape:
        raise DomainError(f"shape mismatch {pred.values.shape} vs {truth.values.shape}")
    joint = pred.mask & truth.mask
    if not joint.any():
        raise DomainError("prediction and truth share no valid pixels")
    return joint


def abs_errors(pred: Heatmap, truth: Heatmap) -> np.ndarray:
    """Normalised absolute errors on jointly valid pixels (values clamped to the range)."""
    joint = _joint(pred, truth)
    return np.abs(pred.clamped()[joint] - truth.clamped()[joint]) / PG_RANGE_DB


def nrmse(pred: Heatmap, truth: Heatmap) -> float:
    """dB RMSE over jointly valid pixels divided by the 200 dB range."""
    e = abs_errors(pred, truth)
    return float(np.sqrt(np.mean(e * e)))


def ecdf(pred: Heatmap, truth: Heatmap) -> tuple[np.ndarray, np.ndarray, float]:
    """Sorted normalised errors, cumulative fractions ``k/n`` and the median."""
    e = np.sort(abs_errors(pred, truth))
    return e, np.arange(1, e.size + 1) / e.size, float(np.median(e))


def report_from_errors(errors, generator: str, wall_clock_s: float = 0.0) -> EvalReport:
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if e.size == 0:
        raise DomainError("no pixels to evaluate")
    rms = float(np.sqrt(np.mean(e * e)))
    med = float(np.median(e))
    return EvalReport(
        nrmse=rms,
        rmse_db=rms * PG_RANGE_DB,
        median_abs_error=med,
        median_abs_error_db=med * PG_RANGE_DB,
        n_pixels=int(e.size),
        generator_compared=generator,
        wall_clock_s=wall_clock_s,
        ecdf_errors=e,
    )


def evaluate_samples(pred_norm: np.ndarray, samples: Sequence[Sample], generator: str) -> EvalReport:
    """Pooled report for normalised predictions ``(N, n, n)`` against sample targets."""
    errs = []
    for p, s in zip(pred_norm, samples):
        d = denormalize_pg(np.asarray(p, dtype=np.float64)) - denormalize_pg(s.target.values)
        errs.append(np.abs(d[s.mask]) / PG_RANGE_DB)
    return report_from_errors(np.concatenate(errs) if errs else [], generator)


def _as_predictor(model) -> Predictor:
    if isinstance(model, ModelParams):
        return lambda samples: predict_samples(model, list(samples))
    if callable(model):
        return model
    raise TypeError("model must be ModelParams or a callable mapping samples to normalised predictions")


def rough_passthrough(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.estimate.values for s in samples])


@dataclass
class BaselineComparison:
    model: EvalReport
    baseline: EvalReport

    @property
    def improvement_ratio(self) -> float | None:
        """Baseline median over model median; ``None`` when the model median is exactly 0."""
        if self.model.median_abs_error == 0.0:
            return None
        return self.baseline.median_abs_error / self.model.median_abs_error

    def scalars(self) -> dict:
        return {
            "model": self.model.scalars(),
            "baseline": self.baseline.scalars(),
            "improvement_ratio": self.improvement_ratio,
        }


def baseline_compare(samples: Sequence[Sample], model) -> BaselineComparison:
    """Evaluate a model and the raw rough-estimate channel on identical pixels."""
    samples = list(samples)
    if not samples:
        raise DomainError("no samples to compare")
    predictor = _as_predictor(model)
    t0 = time.perf_counter()
    pred = predictor(samples)
    dt = time.perf_counter() - t0
    model_rep = evaluate_samples(pred, samples, "model")
    model_rep.wall_clock_s = dt
    base_rep = evaluate_samples(rough_passthrough(samples), samples, "rough")
    return BaselineComparison(model_rep, base_rep)


@dataclass
class SweepRow:
    ratio: float
    mean_nrmse: float
    std_nrmse: float
    runs: int
    skipped: bool = False
    warning: str = ""
    values: list[float] = field(default_factory=list)


def split_sweep(
    corpus: Sequence[Sample],
    ratios=DEFAULT_RATIOS,
    repeats: int = 10,
    cfg: TrainConfig | None = None,
    seed: int = 0,
    log=None,
) -> list[SweepRow]:
    """Train/evaluate ``repeats`` seeded scenario splits for every ratio.

    Cell seeds come from one generator seeded with ``seed`` and are drawn in
    (ratio, repeat) order, so the table is reproducible.  Ratios that leave a
    side empty are reported as skipped.
    """
    cfg = cfg or TrainConfig()
    corpus = list(corpus)
    ids = sorted({s.scenario_id for s in corpus})
    master = np.random.default_rng(seed)
    rows = []
    for ratio in ratios:
        cell_seeds = [int(master.integers(2**31)) for _ in range(repeats)]
        values = []
        try:
            for r, cs in enumerate(cell_seeds):
                plan = split_scenarios(ids, ratio, cs)
                params, _ = train(plan.select(corpus, "train"), replace(cfg, seed=cs))
                test = plan.select(corpus, "test")
                rep = evaluate_samples(predict_samples(params, test), test, "model")
                values.append(rep.nrmse)
                if log is not None:
                    log({"ratio": ratio, "repeat": r, "nrmse": rep.nrmse})
        except DomainError as exc:
            rows.append(SweepRow(ratio, float("nan"), float("nan"), 0, True, str(exc)))
            continue
        v = np.array(values)
        rows.append(SweepRow(ratio, float(v.mean()), float(v.std()), len(values), values=values))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "mean_nrmse", "std_nrmse", "runs", "skipped", "warning"])
        for r in rows:
            w.writerow([r.ratio, f"{r.mean_nrmse:.8g}", f"{r.std_nrmse:.8g}", r.runs, int(r.skipped), r.warning])


def refine_experiment(
    pretrained: ModelParams,
    measurement_like: Sequence[Sample],
    holdout_fraction: float = 0.9,
    cfg: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[EvalReport, EvalReport, ModelParams]:
    """Fine-tune on the non-holdout scenarios; report the holdout before and after.

    Returns ``(before, after, fine_tuned_params)``.
    """
    samples = list(measurement_like)
    if not samples:
        raise DomainError("measurement-like set is empty")
    cfg = cfg or TrainConfig(epochs=10)
    ids = sorted({s.scenario_id for s in samples})
    plan = split_scenarios(ids, 1.0 - holdout_fraction, seed)
    tune = plan.select(samples, "train")
    hold = plan.select(samples, "test")
    before = evaluate_samples(predict_samples(pretrained, hold), hold, "model")
    tuned, _ = train(tune, cfg, params=pretrained)
    after = evaluate_samples(predict_samples(tuned, hold), hold, "model")
    return before, after, tuned


def write_ecdf_png(reports: dict[str, EvalReport], path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rep in reports.items():
        ax.step(rep.ecdf_errors, rep.ecdf_fractions, where="post", label=label)
    ax.set_xlabel("normalized absolute error")
    ax.set_ylabel("ECDF")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
