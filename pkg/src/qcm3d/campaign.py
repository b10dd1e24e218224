"""Monte-Carlo experiment orchestration.

A campaign runs, for one detection configuration, N random ground
truths x T acquisition times x M simulate-then-localise trials, pools
each (ground truth, time) ensemble into effective-PSF statistics, and
reduces everything to relative-frequency histograms, per-time modes and
a log-log scaling fit.

Every trial draws from an RNG stream derived from
(seed, lane, ground truth, time index, trial), so results are
bit-for-bit reproducible for any worker count and any trial can be
regenerated in isolation. Estimate records are persisted incrementally
per (config, time) so an interrupted campaign resumes where it stopped
and finishes with the same files an uninterrupted run produces.
"""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    HistogramMap,
    ScalingFit,
    effective_psf,
    equal_kmeans2,
    fit_scaling,
    histogram_map,
    histogram_mode,
    log_bin_edges,
)
from .configs import builtin_config
from .estimator import LocaliserOptions, localise
from .optics import BeamModel, EmitterPair
from .simulate import rng_stream, simulate_measurement_set

logger = logging.getLogger(__name__)

# RNG lanes: keeps ground-truth sampling streams disjoint from
# per-trial measurement streams under one campaign seed.
_LANE_GROUND_TRUTH = 0
_LANE_TRIAL = 1

ESTIMATE_COLUMNS = [
    "config", "gt_id", "t", "trial",
    "x1", "y1", "z1", "x2", "y2", "z2", "alpha",
    "x1_hat", "y1_hat", "z1_hat", "x2_hat", "y2_hat", "z2_hat", "alpha_hat",
    "objective", "converged", "iterations",
]

EFFECTIVE_PSF_COLUMNS = [
    "config", "gt_id", "t",
    "c1x", "c1y", "c1z", "c2x", "c2y", "c2z",
    "rho1", "rho2", "weff1", "weff2", "weff_bar", "n_failed",
]


@dataclass(frozen=True)
class GroundTruthSampler:
    """Ground-truth distribution for a campaign.

    mode "ball": both positions uniform in the ball of radius r_gt
    around the origin, brightness ratio uniform on alpha_range.
    mode "fixed": every ground truth is the given pair.
    """

    mode: str = "ball"
    r_gt: float = 0.5
    alpha_range: tuple = (0.1, 0.9)
    position1: tuple = (0.0, 0.0, 0.0)
    position2: tuple = (0.0, 0.0, 0.0)
    alpha: float = 0.5

    def __post_init__(self):
        if self.mode not in ("ball", "fixed"):
            raise ValueError(f"sampler mode must be 'ball' or 'fixed', got {self.mode!r}")
        if self.mode == "ball":
            if self.r_gt < 0:
                raise ValueError("r_gt must be >= 0")
            lo, hi = self.alpha_range
            if not (0 < lo <= hi < 1):
                raise ValueError("alpha_range must satisfy 0 < lo <= hi < 1")


def _uniform_ball(rng, radius):
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return radius * rng.random() ** (1.0 / 3.0) * direction


def sample_ground_truth(rng, sampler=None):
    """Draw one EmitterPair from the sampler's distribution.

    Positions are uniform in the ball (radius 0 degenerates to the
    origin), the ratio uniform on its range; the pair comes out
    canonical (brighter emitter first) by construction.
    """
    sampler = sampler or GroundTruthSampler()
    if sampler.mode == "fixed":
        return EmitterPair(np.asarray(sampler.position1, dtype=float),
                           np.asarray(sampler.position2, dtype=float),
                           float(sampler.alpha))
    x1 = _uniform_ball(rng, sampler.r_gt)
    x2 = _uniform_ball(rng, sampler.r_gt)
    lo, hi = sampler.alpha_range
    alpha = lo + (hi - lo) * rng.random()
    return EmitterPair(x1, x2, alpha)


@dataclass(frozen=True)
class CampaignSpec:
    """Everything needed to reproduce one campaign bit-for-bit."""

    config: str
    n_ground_truths: int
    m_trials: int
    t_grid: tuple
    seed: int
    sampler: GroundTruthSampler = field(default_factory=GroundTruthSampler)
    output_path: str = ""
    w_min: float = 1e-3
    w_max: float = 10.0
    n_bins: int = 60
    fit_window: tuple = (1e4, 1e6)
    exclude_nonconverged: bool = False

    def __post_init__(self):
        builtin_config(self.config)  # raises UnknownConfig early
        if self.n_ground_truths < 1:
            raise ValueError("n_ground_truths must be >= 1")
        if self.m_trials < 2:
            raise ValueError("m_trials must be >= 2 (clustering needs two points per side)")
        t_grid = tuple(float(t) for t in self.t_grid)
        if len(t_grid) == 0 or any(t <= 0 for t in t_grid) or \
                any(b <= a for a, b in zip(t_grid, t_grid[1:])):
            raise ValueError("t_grid must be strictly increasing positive times")
        object.__setattr__(self, "t_grid", t_grid)
        object.__setattr__(self, "fit_window",
                           (float(self.fit_window[0]), float(self.fit_window[1])))

    _SCHEMA = {
        "config", "n_ground_truths", "m_trials", "t_grid", "seed", "sampler",
        "output_path", "w_min", "w_max", "n_bins", "fit_window",
        "exclude_nonconverged",
    }
    _SAMPLER_SCHEMA = {"mode", "r_gt", "alpha_range", "position1", "position2",
                       "alpha"}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - cls._SCHEMA
        if unknown:
            raise ValueError(f"unknown campaign spec keys: {sorted(unknown)}")
        data = dict(data)
        sampler = data.pop("sampler", {})
        if not isinstance(sampler, dict):
            raise ValueError("sampler must be an object")
        unknown = set(sampler) - cls._SAMPLER_SCHEMA
        if unknown:
            raise ValueError(f"unknown sampler keys: {sorted(unknown)}")
        for key in ("alpha_range", "position1", "position2"):
            if key in sampler:
                sampler[key] = tuple(sampler[key])
        if "t_grid" in data:
            data["t_grid"] = tuple(data["t_grid"])
        if "fit_window" in data:
            data["fit_window"] = tuple(data["fit_window"])
        return cls(sampler=GroundTruthSampler(**sampler), **data)

    @classmethod
    def from_json(cls, path_or_text):
        if os.path.exists(str(path_or_text)):
            with open(path_or_text) as fh:
                data = json.load(fh)
        else:
            data = json.loads(path_or_text)
        return cls.from_dict(data)

    def to_dict(self):
        return {
            "config": self.config,
            "n_ground_truths": self.n_ground_truths,
            "m_trials": self.m_trials,
            "t_grid": list(self.t_grid),
            "seed": self.seed,
            "sampler": {
                "mode": self.sampler.mode,
                "r_gt": self.sampler.r_gt,
                "alpha_range": list(self.sampler.alpha_range),
                "position1": list(self.sampler.position1),
                "position2": list(self.sampler.position2),
                "alpha": self.sampler.alpha,
            },
            "output_path": self.output_path,
            "w_min": self.w_min,
            "w_max": self.w_max,
            "n_bins": self.n_bins,
            "fit_window": list(self.fit_window),
            "exclude_nonconverged": self.exclude_nonconverged,
        }


@dataclass
class CampaignResult:
    spec: CampaignSpec
    effective_psfs: list          # dict rows, EFFECTIVE_PSF_COLUMNS
    histogram: HistogramMap
    modes: list                   # (t, w_mode) pairs
    fit: ScalingFit | None
    output_dir: Path | None = None


def ground_truths(spec):
    """The campaign's ground-truth pairs, independent of trial order."""
    return [
        sample_ground_truth(
            rng_stream(spec.seed, _LANE_GROUND_TRUTH, g), spec.sampler)
        for g in range(spec.n_ground_truths)
    ]


def run_trial(pair, beam, config, t, stream, options=None):
    """One simulate-then-localise trial on its own RNG stream."""
    rng = rng_stream(*stream)
    ms = simulate_measurement_set(pair, beam, config, t, rng,
                                  seed=stream[0], stream=stream[1:])
    return localise(ms, beam, options)


@dataclass(frozen=True)
class _ChunkTask:
    """All M trials of one (ground truth, time) cell."""

    spec: CampaignSpec
    beam: BeamModel
    options: LocaliserOptions | None
    gt_id: int
    pair: EmitterPair
    t_index: int
    t: float


def _run_chunk(task):
    config = builtin_config(task.spec.config)
    rows = []
    for trial in range(task.spec.m_trials):
        stream = (task.spec.seed, _LANE_TRIAL, task.gt_id, task.t_index, trial)
        try:
            est = run_trial(task.pair, task.beam, config, task.t, stream,
                            task.options)
            pair = est.pair
            values = [*pair.position1, *pair.position2,
                      pair.brightness_ratio, est.objective,
                      int(est.converged), est.iterations]
        except Exception:  # surfaced as a flagged record, never fatal
            logger.exception("trial failed (gt=%d t=%g trial=%d)",
                             task.gt_id, task.t, trial)
            values = [np.nan] * 7 + [np.nan, 0, 0]
        truth = task.pair
        rows.append({
            "config": task.spec.config,
            "gt_id": task.gt_id,
            "t": repr(task.t),
            "trial": trial,
            "x1": repr(float(truth.position1[0])),
            "y1": repr(float(truth.position1[1])),
            "z1": repr(float(truth.position1[2])),
            "x2": repr(float(truth.position2[0])),
            "y2": repr(float(truth.position2[1])),
            "z2": repr(float(truth.position2[2])),
            "alpha": repr(float(truth.brightness_ratio)),
            "x1_hat": repr(float(values[0])),
            "y1_hat": repr(float(values[1])),
            "z1_hat": repr(float(values[2])),
            "x2_hat": repr(float(values[3])),
            "y2_hat": repr(float(values[4])),
            "z2_hat": repr(float(values[5])),
            "alpha_hat": repr(float(values[6])),
            "objective": repr(float(values[7])),
            "converged": int(values[8]),
            "iterations": int(values[9]),
        })
    return rows


def _t_label(t):
    return f"{t:g}".replace("+", "")


def estimates_filename(config, t):
    return f"estimates__{config}__t{_t_label(t)}.csv"


def _read_complete_groups(path, m_trials):
    """Rows of gt groups that already hold all M trials, keyed by gt."""
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_gt = {}
    for row in rows:
        by_gt.setdefault(int(row["gt_id"]), []).append(row)
    complete = {}
    for gt_id, group in by_gt.items():
        trials = sorted(int(r["trial"]) for r in group)
        if trials == list(range(m_trials)):
            complete[gt_id] = sorted(group, key=lambda r: int(r["trial"]))
    return complete


def run_campaign(spec, output_dir=None, n_workers=0, beam=None, options=None,
                 progress=None):
    """Execute a campaign and reduce it to effective-PSF statistics.

    Chunks of M trials are distributed over a process pool
    (n_workers 0 = all cores, 1 = run in-process) and appended to one
    estimates CSV per acquisition time as they complete, in
    deterministic order. On resume, ground truths whose chunk is fully
    present are not recomputed. Per-trial failures are flagged records;
    the campaign never aborts on one.
    """
    beam = beam or BeamModel()
    out = Path(output_dir) if output_dir else (
        Path(spec.output_path) if spec.output_path else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "campaign.json", "w") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    pairs = ground_truths(spec)
    tasks = []
    existing = {}
    for t_index, t in enumerate(spec.t_grid):
        have = {}
        if out is not None:
            have = _read_complete_groups(
                out / estimates_filename(spec.config, t), spec.m_trials)
        existing[t_index] = have
        for gt_id, pair in enumerate(pairs):
            if gt_id in have:
                continue
            tasks.append(_ChunkTask(spec, beam, options, gt_id, pair,
                                    t_index, t))

    logger.info("campaign %s: %d/%d chunks to run", spec.config, len(tasks),
                spec.n_ground_truths * len(spec.t_grid))
    if n_workers == 0:
        n_workers = os.cpu_count() or 1
    if tasks and n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            chunk_rows = pool.map(_run_chunk, tasks, chunksize=1)
            results = _collect(tasks, chunk_rows, progress)
    else:
        results = _collect(tasks, map(_run_chunk, tasks), progress)

    rows_by_t = {}
    for t_index, t in enumerate(spec.t_grid):
        groups = dict(existing[t_index])
        for task, rows in results:
            if task.t_index == t_index:
                groups[task.gt_id] = rows
        ordered = [row for gt_id in sorted(groups) for row in groups[gt_id]]
        rows_by_t[t] = ordered
        if out is not None:
            _write_csv(out / estimates_filename(spec.config, t),
                       ESTIMATE_COLUMNS, ordered)

    result = analyse_records(
        [row for t in spec.t_grid for row in rows_by_t[t]], spec=spec)
    result.output_dir = out
    if out is not None:
        write_analysis(result, out)
    return result


def _collect(tasks, chunk_iter, progress):
    results = []
    for task, rows in zip(tasks, chunk_iter):
        results.append((task, rows))
        if progress is not None:
            progress(task, len(results), len(tasks))
    return results


def _write_csv(path, columns, rows):
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def analyse_records(rows, spec=None, w_min=None, w_max=None, n_bins=None,
                    fit_window=None, exclude_nonconverged=None):
    """Reduce estimate records to effective-PSF statistics and fits.

    ``rows`` are estimate records (dicts with ESTIMATE_COLUMNS keys, as
    read back from an estimates CSV). Pure post-processing: running it
    again on a campaign's persisted records reproduces the campaign's
    own analysis exactly. Analysis parameters default to the spec's
    values when one is given.
    """
    def _param(value, name, default):
        if value is not None:
            return value
        return getattr(spec, name) if spec is not None else default

    w_min = _param(w_min, "w_min", 1e-3)
    w_max = _param(w_max, "w_max", 10.0)
    n_bins = _param(n_bins, "n_bins", 60)
    fit_window = _param(fit_window, "fit_window", (1e4, 1e6))
    exclude = _param(exclude_nonconverged, "exclude_nonconverged", False)

    cells = {}
    gt_ids = set()
    max_trials = 0
    for row in rows:
        key = (row["config"], float(row["t"]), int(row["gt_id"]))
        cells.setdefault(key, []).append(row)
        gt_ids.add((row["config"], int(row["gt_id"])))
        max_trials = max(max_trials, int(row["trial"]) + 1)
    n_ground_truths = _param(None, "n_ground_truths", len(gt_ids))
    m_trials = _param(None, "m_trials", max_trials)

    psf_rows = []
    samples_by_t = {}
    for (config, t, gt_id) in sorted(cells):
        group = cells[(config, t, gt_id)]
        positions, n_failed = _cluster_points(group, exclude)
        if len(positions) < 4:
            logger.warning("skipping gt=%d t=%g: only %d usable points",
                           gt_id, t, len(positions))
            continue
        clusters = equal_kmeans2(positions)
        psf = effective_psf(positions, clusters)
        samples_by_t.setdefault(t, []).append(psf.weff_bar)
        psf_rows.append({
            "config": config, "gt_id": gt_id, "t": repr(t),
            "c1x": repr(float(clusters.centroid1[0])),
            "c1y": repr(float(clusters.centroid1[1])),
            "c1z": repr(float(clusters.centroid1[2])),
            "c2x": repr(float(clusters.centroid2[0])),
            "c2y": repr(float(clusters.centroid2[1])),
            "c2z": repr(float(clusters.centroid2[2])),
            "rho1": repr(psf.rho1), "rho2": repr(psf.rho2),
            "weff1": repr(psf.weff1), "weff2": repr(psf.weff2),
            "weff_bar": repr(psf.weff_bar),
            "n_failed": n_failed,
        })

    bins = log_bin_edges(w_min, w_max, n_bins)
    hist = histogram_map(samples_by_t, bins, n_ground_truths, m_trials)
    modes = []
    for i, t in enumerate(hist.time_points):
        if np.any(hist.counts[i] > 0):
            modes.append((float(t), histogram_mode(hist.counts[i], bins)))
    fit = None
    try:
        fit = fit_scaling(np.array(modes), fit_window) if modes else None
    except Exception as exc:
        logger.warning("scaling fit unavailable: %s", exc)
    return CampaignResult(spec, psf_rows, hist, modes, fit)


def _cluster_points(group, exclude_nonconverged):
    positions = []
    n_failed = 0
    for row in sorted(group, key=lambda r: int(r["trial"])):
        est = [float(row[k]) for k in
               ("x1_hat", "y1_hat", "z1_hat", "x2_hat", "y2_hat", "z2_hat")]
        converged = bool(int(row["converged"]))
        if not np.all(np.isfinite(est)) or (exclude_nonconverged and
                                            not converged):
            n_failed += 1
            continue
        positions.append(est[:3])
        positions.append(est[3:])
    return np.array(positions, dtype=float).reshape(-1, 3), n_failed


def write_analysis(result, output_dir):
    """Persist the analysis outputs: CSVs plus a JSON summary."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = result.spec.config if result.spec else \
        (result.effective_psfs[0]["config"] if result.effective_psfs else "")

    _write_csv(out / f"effective_psf__{config}.csv", EFFECTIVE_PSF_COLUMNS,
               result.effective_psfs)

    hist = result.histogram
    hist_rows = []
    for i, t in enumerate(hist.time_points):
        for b in range(len(hist.bin_edges) - 1):
            hist_rows.append({
                "t": repr(float(t)),
                "bin_lo": repr(float(hist.bin_edges[b])),
                "bin_hi": repr(float(hist.bin_edges[b + 1])),
                "count": int(hist.counts[i, b]),
                "rel_freq": repr(float(hist.rel_freq[i, b])),
            })
        hist_rows.append({
            "t": repr(float(t)), "bin_lo": "", "bin_hi": "",
            "count": int(hist.out_of_range[i]), "rel_freq":
                repr(float(hist.out_of_range[i] / hist.n_experiments)),
        })
    _write_csv(out / f"histogram__{config}.csv",
               ["t", "bin_lo", "bin_hi", "count", "rel_freq"], hist_rows)

    _write_csv(out / f"modes__{config}.csv", ["t", "w_mode"],
               [{"t": repr(t), "w_mode": repr(w)} for t, w in result.modes])

    summary = {
        "config": config,
        "a": result.fit.a if result.fit else None,
        "b": result.fit.b if result.fit else None,
        "window": list(result.fit.window) if result.fit else None,
        "residual": result.fit.residual if result.fit else None,
        "modes": [[t, w] for t, w in result.modes],
    }
    if result.spec is not None:
        summary["seed"] = result.spec.seed
        summary["n_ground_truths"] = result.spec.n_ground_truths
        summary["m_trials"] = result.spec.m_trials
    with open(out / f"summary__{config}.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
