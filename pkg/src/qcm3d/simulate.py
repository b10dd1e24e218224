"""Stochastic measurement generation for two-emitter HBT experiments.

Draws Poisson photon and coincidence counts for each focal point of a
detection configuration and reduces them to the observables used by the
estimator: a normalised intensity and a g2 value per focal point. g2 is
NaN ("missing") when no pair events of any kind were recorded; the
estimator skips those terms rather than imputing zero, which would bias
the brightness ratio downward at short acquisition times.

All randomness flows through explicit numpy Generators derived from a
(seed, *stream) tuple, so any trial of any campaign is reproducible
without replaying earlier trials and distinct streams can run in
parallel.
"""

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_points, check_positive
from .optics import pair_rates

#: Minimum number of focal points for the 7-parameter problem to be
#: determined (two observables per focal point, 2m >= 7).
MIN_FOCAL_POINTS = 4

MEASUREMENT_COLUMNS = [
    "config", "index", "xi_x", "xi_y", "xi_z", "t",
    "intensity", "g2", "seed", "stream",
]


class ConfigTooSmall(UserWarning):
    """Fewer than four focal points: the system is underdetermined."""


def rng_stream(seed, *stream):
    """Independent Generator for the sub-stream (seed, *stream).

    Identical arguments reproduce identical draws bit-for-bit; distinct
    stream ids give statistically independent streams (numpy
    SeedSequence hashing).
    """
    ids = [int(seed)] + [int(s) for s in stream]
    return np.random.default_rng(ids)


@dataclass(frozen=True)
class CountRecord:
    """Raw photon counts at one focal point over acquisition time t.

    c1/c2 are singles from each emitter; c11/c22 are uncorrelated pair
    events from one emitter; c12 are true coincidences.
    """

    c1: int
    c2: int
    c11: int
    c22: int
    c12: int
    t: float

    def __post_init__(self):
        for name in ("c1", "c2", "c11", "c22", "c12"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        check_positive(self.t, "t")


@dataclass(frozen=True)
class Measurement:
    """One reduced measurement: intensity and g2 at a focal point."""

    focal: np.ndarray
    intensity: float
    g2: float  # NaN when missing
    t: float


@dataclass
class MeasurementSet:
    """Per-focal-point intensity and g2 readings of one experiment.

    g2 entries are NaN where missing. ``seed``/``stream`` record the RNG
    stream that generated the set (None for data not produced by the
    simulator, e.g. files from elsewhere).
    """

    focal_points: np.ndarray  # (m, 3)
    t: np.ndarray             # (m,)
    intensity: np.ndarray     # (m,)
    g2: np.ndarray            # (m,), NaN = missing
    config_name: str = ""
    seed: int | None = None
    stream: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.focal_points = as_points(self.focal_points, "focal_points")
        m = len(self.focal_points)
        self.t = np.broadcast_to(np.asarray(self.t, dtype=float), (m,)).copy()
        self.intensity = np.asarray(self.intensity, dtype=float).reshape(m)
        self.g2 = np.asarray(self.g2, dtype=float).reshape(m)
        if not np.all(np.isfinite(self.t)) or np.any(self.t <= 0):
            raise ValueError("acquisition times must be positive and finite")
        if not np.all(np.isfinite(self.intensity)) or np.any(self.intensity < 0):
            raise ValueError("intensities must be non-negative and finite")
        present = ~np.isnan(self.g2)
        if np.any(self.g2[present] < 0) or np.any(self.g2[present] > 1):
            raise ValueError("g2 readings must lie in [0, 1] (or be NaN)")

    def __len__(self):
        return len(self.focal_points)

    @property
    def measurements(self):
        return [
            Measurement(self.focal_points[j], float(self.intensity[j]),
                        float(self.g2[j]), float(self.t[j]))
            for j in range(len(self))
        ]

    def as_array(self):
        """Flat (m, 6) array [xi_x, xi_y, xi_z, t, intensity, g2]."""
        return np.column_stack([
            self.focal_points, self.t, self.intensity, self.g2,
        ])

    @classmethod
    def from_array(cls, X, config_name=""):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 6:
            raise ValueError(
                f"expected (m, 6) columns [xi_x, xi_y, xi_z, t, intensity, g2], got {X.shape}")
        return cls(X[:, :3], X[:, 3], X[:, 4], X[:, 5], config_name=config_name)

    def to_records(self):
        stream = ":".join(str(s) for s in self.stream)
        seed = "" if self.seed is None else str(self.seed)
        rows = []
        for j in range(len(self)):
            g2 = self.g2[j]
            rows.append({
                "config": self.config_name,
                "index": j,
                "xi_x": repr(float(self.focal_points[j, 0])),
                "xi_y": repr(float(self.focal_points[j, 1])),
                "xi_z": repr(float(self.focal_points[j, 2])),
                "t": repr(float(self.t[j])),
                "intensity": repr(float(self.intensity[j])),
                "g2": "" if np.isnan(g2) else repr(float(g2)),
                "seed": seed,
                "stream": stream,
            })
        return rows

    def to_csv(self, path_or_buffer):
        if hasattr(path_or_buffer, "write"):
            self._write_csv(path_or_buffer)
        else:
            with open(path_or_buffer, "w", newline="") as fh:
                self._write_csv(fh)

    def _write_csv(self, fh):
        writer = csv.DictWriter(fh, fieldnames=MEASUREMENT_COLUMNS,
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.to_records())

    def csv_text(self):
        buf = io.StringIO()
        self._write_csv(buf)
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"measurements": self.to_records()}, indent=2) + "\n"

    @classmethod
    def from_records(cls, rows):
        if not rows:
            raise ValueError("no measurement rows")
        rows = sorted(rows, key=lambda r: int(r["index"]))
        xi = np.array([[float(r["xi_x"]), float(r["xi_y"]), float(r["xi_z"])]
                       for r in rows])
        t = np.array([float(r["t"]) for r in rows])
        intensity = np.array([float(r["intensity"]) for r in rows])
        g2 = np.array([float(r["g2"]) if str(r["g2"]).strip() != "" else np.nan
                       for r in rows])
        seed = rows[0].get("seed", "")
        stream = rows[0].get("stream", "")
        return cls(
            xi, t, intensity, g2,
            config_name=rows[0].get("config", ""),
            seed=int(seed) if str(seed).strip() else None,
            stream=tuple(int(s) for s in str(stream).split(":") if s != ""),
        )

    @classmethod
    def from_csv(cls, path_or_buffer):
        if hasattr(path_or_buffer, "read"):
            rows = list(csv.DictReader(path_or_buffer))
        else:
            with open(path_or_buffer, newline="") as fh:
                rows = list(csv.DictReader(fh))
        return cls.from_records(rows)

    @classmethod
    def from_json(cls, text):
        return cls.from_records(json.loads(text)["measurements"])


def sample_counts(pair, beam, focal, t, rng):
    """Draw one CountRecord at a focal point.

    Counts are independent Poisson draws: singles at rates p_i*t,
    same-emitter pair events at p_i**2*t, coincidences at p1*p2*t.
    """
    check_positive(t, "t")
    p1, p2 = pair_rates(pair, beam, np.asarray(focal, dtype=float)[None, :])
    p1, p2 = float(p1[0]), float(p2[0])
    draws = rng.poisson([p1 * t, p2 * t, p1**2 * t, p2**2 * t, p1 * p2 * t])
    return CountRecord(*(int(c) for c in draws), t=float(t))


def reduce_measurement(record, brightness_sum, focal=None):
    """Reduce raw counts to the (intensity, g2) observables.

    intensity = (c1+c2)/(brightness_sum*t); g2 = 2*c12/(c11+c22+2*c12),
    NaN when the denominator is zero (no pair events of any kind).
    """
    intensity = (record.c1 + record.c2) / (brightness_sum * record.t)
    denom = record.c11 + record.c22 + 2 * record.c12
    g2 = 2.0 * record.c12 / denom if denom > 0 else np.nan
    focal = np.zeros(3) if focal is None else np.asarray(focal, dtype=float)
    return Measurement(focal, float(intensity), float(g2), record.t)


def simulate_measurement_set(pair, beam, config, t, rng, seed=None, stream=()):
    """Simulate one full measurement set over a detection configuration.

    ``config`` is a DetectionConfig or a plain (m, 3) array of focal
    points; ``t`` is the per-focal-point acquisition time. Warns
    ConfigTooSmall for m < 4 (the 7-parameter problem is then
    underdetermined) but still simulates.
    """
    name = getattr(config, "name", "")
    xi = as_points(getattr(config, "focal_points", config), "focal_points")
    if len(xi) < MIN_FOCAL_POINTS:
        warnings.warn(
            f"{len(xi)} focal points give {2 * len(xi)} observables for 7 "
            "unknowns; localisation is underdetermined", ConfigTooSmall,
            stacklevel=2)
    intensity = np.empty(len(xi))
    g2 = np.empty(len(xi))
    for j, focal in enumerate(xi):
        rec = sample_counts(pair, beam, focal, t, rng)
        meas = reduce_measurement(rec, pair.brightness_sum, focal)
        intensity[j] = meas.intensity
        g2[j] = meas.g2
    return MeasurementSet(xi, np.full(len(xi), float(t)), intensity, g2,
                          config_name=name, seed=seed, stream=tuple(stream))
