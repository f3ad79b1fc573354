"""Depth evaluation metrics and the point-count/pattern sweep harness."""

import io
from dataclasses import dataclass, fields
from typing import Callable, List, Sequence, Tuple

import numpy as np

PRED_FLOOR = 1e-6  # clamp before inverse metrics so underflow cannot blow up


@dataclass(frozen=True)
class MetricReport:
    rel: float
    rmse: float
    mae: float
    irmse: float
    imae: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int

    def __post_init__(self):
        values = [self.rel, self.rmse, self.mae, self.irmse, self.imae,
                  self.delta1, self.delta2, self.delta3]
        if not all(np.isfinite(v) for v in values):
            raise ValueError("metric report contains non-finite values")
        if self.pixel_count <= 0:
            raise ValueError("metric report over zero pixels")
        if not self.delta1 <= self.delta2 <= self.delta3:
            raise ValueError("delta accuracies must be non-decreasing")


def evaluate(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> MetricReport:
    """Standard depth errors over the valid mask.

    REL, RMSE, MAE on raw depths; iRMSE/iMAE on inverse depths (prediction
    clamped to a small floor first); delta_i = fraction of pixels whose
    prediction/truth ratio in either direction is below 1.25**i.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluate: no valid pixels in mask")
    p = np.asarray(pred, dtype=np.float64)[mask]
    g = np.asarray(gt, dtype=np.float64)[mask]
    if (g <= 0).any():
        raise ValueError("evaluate: ground truth must be positive on the mask")
    p_floored = np.maximum(p, PRED_FLOOR)

    diff = p - g
    rel = float(np.mean(np.abs(diff) / g))
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    mae = float(np.mean(np.abs(diff)))
    inv_diff = 1.0 / p_floored - 1.0 / g
    irmse = float(np.sqrt(np.mean(inv_diff ** 2)))
    imae = float(np.mean(np.abs(inv_diff)))
    ratio = np.maximum(p_floored / g, g / p_floored)
    deltas = [float(np.mean(ratio < 1.25 ** i)) for i in (1, 2, 3)]
    return MetricReport(rel=rel, rmse=rmse, mae=mae, irmse=irmse, imae=imae,
                        delta1=deltas[0], delta2=deltas[1], delta3=deltas[2],
                        pixel_count=int(mask.sum()))


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-image metrics averaged with equal weight (the usual convention)."""
    if not reports:
        raise ValueError("no reports to average")
    kwargs = {}
    for f in fields(MetricReport):
        vals = [getattr(r, f.name) for r in reports]
        kwargs[f.name] = int(np.sum(vals)) if f.name == "pixel_count" else float(np.mean(vals))
    return MetricReport(**kwargs)


def format_report(report: MetricReport) -> str:
    """Flat key/value text, one metric per line, 6 significant digits."""
    lines = []
    for f in fields(MetricReport):
        v = getattr(report, f.name)
        lines.append(f"{f.name} = {v:d}" if f.name == "pixel_count" else f"{f.name} = {v:.6g}")
    return "\n".join(lines) + "\n"


SWEEP_CSV_HEADER = ("count,pattern,rel,rmse,mae,irmse,imae,"
                    "delta1,delta2,delta3,pixel_count")


@dataclass(frozen=True)
class SweepRow:
    count: int
    pattern: str
    report: MetricReport


def sweep(predictor: Callable, dataset: Sequence, point_counts: Sequence[int],
          pattern: str = "random", base_seed: int = 0) -> List[SweepRow]:
    """Evaluate a predictor across point budgets with freshly sampled clouds.

    `predictor(sample, cloud) -> depth map`; each (count, sample) pair gets a
    deterministic sampling seed derived from `base_seed`, so repeated sweeps
    are identical.
    """
    from .data import SamplingSpec, sample_points

    rows = []
    for ci, count in enumerate(point_counts):
        reports = []
        for si, sample in enumerate(dataset):
            spec = SamplingSpec(pattern=pattern, count=count,
                                seed=base_seed * 1_000_003 + ci * 1_009 + si)
            cloud = sample_points(sample.gt_depth, sample.gt_mask,
                                  sample.intrinsics, spec, rgb=sample.rgb)
            pred = predictor(sample, cloud)
            reports.append(evaluate(pred, sample.gt_depth, sample.gt_mask))
        rows.append(SweepRow(count=int(count), pattern=pattern,
                             report=mean_report(reports)))
    return rows


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_CSV_HEADER + "\n")
    for row in rows:
        r = row.report
        vals = [f"{v:.6g}" for v in (r.rel, r.rmse, r.mae, r.irmse, r.imae,
                                      r.delta1, r.delta2, r.delta3)]
        buf.write(f"{row.count},{row.pattern}," + ",".join(vals) + f",{r.pixel_count}\n")
    return buf.getvalue()
