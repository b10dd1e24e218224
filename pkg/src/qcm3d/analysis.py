"""Post-processing of Monte-Carlo localisation ensembles.

Given the pooled position estimates of many repeated localisations of
one ground truth, this module groups them into two equally sized
clusters, reduces each cluster to an effective-PSF width (twice the
radial quantile that a Gaussian cloud would put one standard deviation
at), builds relative-frequency histograms of those widths across many
ground truths, extracts per-time histogram modes, and fits the modes'
power-law dependence on acquisition time in log-log coordinates.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from ._validation import as_points
from .optics import EmitterPair

#: Fraction of a cluster inside the effective-PSF radius: for an exact
#: Gaussian cloud this radial quantile equals the per-axis standard
#: deviation scale of the distribution, 1 - 1/sqrt(e) ~ 0.3935.
PSF_QUANTILE = 1.0 - 1.0 / np.sqrt(np.e)

_MAX_KMEANS_ITER = 200


class EmptyColumn(ValueError):
    """Histogram column contains no occupied bin."""


class InsufficientPoints(ValueError):
    """Fewer than two mode points inside the fit window."""


@dataclass
class McEnsemble:
    """Pooled position estimates from repeated localisations.

    Each trial contributes exactly two points (one per emitter slot).
    """

    positions: np.ndarray   # (2M, 3)
    trial_ids: np.ndarray   # (2M,)
    slots: np.ndarray       # (2M,), 0 or 1
    ground_truth: EmitterPair | None = None
    t: float = np.nan
    config_name: str = ""

    def __post_init__(self):
        self.positions = as_points(self.positions, "positions")
        self.trial_ids = np.asarray(self.trial_ids, dtype=int).reshape(-1)
        self.slots = np.asarray(self.slots, dtype=int).reshape(-1)
        n = len(self.positions)
        if len(self.trial_ids) != n or len(self.slots) != n:
            raise ValueError("positions, trial_ids and slots must align")
        ids, counts = np.unique(self.trial_ids, return_counts=True)
        if n == 0 or np.any(counts != 2):
            raise ValueError("each trial must contribute exactly two points")
        self.n_trials = len(ids)

    @classmethod
    def from_estimates(cls, estimates, ground_truth=None, t=np.nan,
                       config_name=""):
        positions, trial_ids, slots = [], [], []
        for k, est in enumerate(estimates):
            positions.extend([est.pair.position1, est.pair.position2])
            trial_ids.extend([k, k])
            slots.extend([0, 1])
        return cls(np.array(positions), trial_ids, slots, ground_truth, t,
                   config_name)


@dataclass(frozen=True)
class ClusterResult:
    """Balanced two-cluster partition: centroids plus per-point labels."""

    centroid1: np.ndarray
    centroid2: np.ndarray
    labels: np.ndarray
    sse: float
    n_iter: int

    @property
    def centroids(self):
        return np.vstack([self.centroid1, self.centroid2])


@dataclass(frozen=True)
class EffectivePsf:
    """Effective-PSF widths of the two clusters of one ensemble.

    The effective width of one cluster is the diameter 2*rho of the
    sphere holding the fraction PSF_QUANTILE of its points closest to
    the centroid (equivalently the cube root of 6V/pi for that sphere's
    volume V); weff_bar averages the two clusters.
    """

    rho1: float
    rho2: float
    weff1: float
    weff2: float
    weff_bar: float


@dataclass(frozen=True)
class HistogramMap:
    """Per-acquisition-time relative-frequency histograms of weff_bar.

    rel_freq[i, b] is (count in bin b at time_points[i]) / (N*M); counts
    outside the bin range are tallied separately per column, so
    counts.sum(axis=1) + out_of_range equals the per-time sample count.
    """

    time_points: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray        # (T, B) ints
    rel_freq: np.ndarray      # (T, B)
    out_of_range: np.ndarray  # (T,) ints
    n_experiments: int        # N*M normaliser


@dataclass(frozen=True)
class ScalingFit:
    """Power-law fit of histogram modes: log10(w) = a + b*log10(t).

    ``a`` is the intercept and ``b`` the slope, so w = 10**a * t**b.
    ``residual`` is the RMS residual in log10(w) over the fitted points.
    """

    a: float
    b: float
    window: tuple
    residual: float
    n_points: int


def _pairwise_farthest(points):
    """Indices of an exactly farthest pair (O(n^2), blocked)."""
    n = len(points)
    norms = np.einsum("ij,ij->i", points, points)
    best = (-1.0, 0, 0)
    block = 2048
    for start in range(0, n, block):
        chunk = points[start:start + block]
        d2 = norms[start:start + block, None] + norms[None, :] \
            - 2.0 * chunk @ points.T
        i, j = np.unravel_index(np.argmax(d2), d2.shape)
        if d2[i, j] > best[0]:
            best = (float(d2[i, j]), start + int(i), int(j))
    return best[1], best[2]


def equal_kmeans2(points):
    """Two-cluster k-means constrained to equal cluster sizes.

    Lloyd-style iteration: given the centroids, the optimal balanced
    assignment sorts points by the difference of squared distances to
    the two centroids and gives each centroid half (stable sort, so
    ties break by point index); centroids are then recomputed. The
    squared-distance key makes the assignment step optimal under the
    balance constraint, so the within-cluster SSE never increases and
    the iteration reaches a fixed point. Centroids start at an exactly
    farthest pair of input points, making the result deterministic for
    a given input order.
    """
    points = as_points(points, "points")
    n = len(points)
    if n < 2 or n % 2:
        raise ValueError(f"need an even number of points >= 2, got {n}")
    half = n // 2

    i, j = _pairwise_farthest(points)
    centroids = np.vstack([points[i], points[j]])
    labels = np.zeros(n, dtype=int)
    n_iter = 0
    for n_iter in range(1, _MAX_KMEANS_ITER + 1):
        d1 = np.einsum("ij,ij->i", points - centroids[0], points - centroids[0])
        d2 = np.einsum("ij,ij->i", points - centroids[1], points - centroids[1])
        order = np.argsort(d1 - d2, kind="stable")
        new_labels = np.ones(n, dtype=int)
        new_labels[order[:half]] = 0
        new_centroids = np.vstack([
            points[new_labels == 0].mean(axis=0),
            points[new_labels == 1].mean(axis=0),
        ])
        done = np.array_equal(new_labels, labels) and np.allclose(
            new_centroids, centroids, rtol=0, atol=0)
        labels, centroids = new_labels, new_centroids
        if done:
            break

    d1 = np.einsum("ij,ij->i", points - centroids[0], points - centroids[0])
    d2 = np.einsum("ij,ij->i", points - centroids[1], points - centroids[1])
    sse = float(np.sum(np.where(labels == 0, d1, d2)))
    return ClusterResult(centroids[0], centroids[1], labels, sse, n_iter)


def radial_quantile(points, centroid, q=PSF_QUANTILE):
    """q-quantile of the distances from centroid to the points."""
    points = as_points(points, "points")
    distances = np.linalg.norm(points - np.asarray(centroid, dtype=float), axis=1)
    return float(np.quantile(distances, q))


def effective_psf(ensemble, clusters):
    """Effective-PSF widths from a clustered ensemble.

    ``ensemble`` may be an McEnsemble or a plain (n, 3) array whose rows
    align with ``clusters.labels``.
    """
    points = getattr(ensemble, "positions", ensemble)
    points = as_points(points, "points")
    labels = clusters.labels
    if len(labels) != len(points):
        raise ValueError("cluster labels do not match the ensemble size")
    if not np.any(labels == 0) or not np.any(labels == 1):
        raise ValueError("both clusters must be non-empty")
    rho1 = radial_quantile(points[labels == 0], clusters.centroid1)
    rho2 = radial_quantile(points[labels == 1], clusters.centroid2)
    weff1, weff2 = 2.0 * rho1, 2.0 * rho2
    return EffectivePsf(rho1, rho2, weff1, weff2, (weff1 + weff2) / 2.0)


def log_bin_edges(w_min=1e-3, w_max=10.0, n_bins=60):
    """Logarithmic bin edges over the effective-width range."""
    return np.logspace(np.log10(w_min), np.log10(w_max), n_bins + 1)


def histogram_map(samples_by_t, bins, n_ground_truths, m_trials):
    """Relative-frequency histograms of weff_bar, one column per time.

    Frequencies are bin counts divided by the total number of
    experiments N*M (not by the column's sample count). Samples outside
    the bin range are counted per column in out_of_range, so counts are
    conserved exactly.
    """
    bins = np.asarray(bins, dtype=float)
    if bins.ndim != 1 or len(bins) < 2 or np.any(np.diff(bins) <= 0):
        raise ValueError("bins must be strictly increasing edges")
    total = int(n_ground_truths) * int(m_trials)
    if total <= 0:
        raise ValueError("n_ground_truths and m_trials must be positive")
    times = np.array(sorted(samples_by_t), dtype=float)
    counts = np.zeros((len(times), len(bins) - 1), dtype=int)
    out = np.zeros(len(times), dtype=int)
    for i, t in enumerate(sorted(samples_by_t)):
        w = np.asarray(samples_by_t[t], dtype=float)
        counts[i], _ = np.histogram(w, bins=bins)
        out[i] = len(w) - counts[i].sum()
    return HistogramMap(times, bins, counts, counts / total, out, total)


def _gaussian(x, amplitude, centre, width):
    return amplitude * np.exp(-((x - centre) ** 2) / (2.0 * width**2))


def histogram_mode(column, bins):
    """Peak location of one histogram column, in w units.

    Fits a Gaussian in log10(w) to the column by least squares and
    returns the fitted peak; a fit that fails or lands more than one
    bin away from the tallest bin falls back to the tallest bin's
    geometric centre. The tallest peak therefore wins in multimodal
    columns, and exact ties take the smaller w (first maximal bin).
    """
    column = np.asarray(column, dtype=float)
    bins = np.asarray(bins, dtype=float)
    if len(column) != len(bins) - 1:
        raise ValueError("column length must be len(bins) - 1")
    if not np.any(column > 0):
        raise EmptyColumn("histogram column has no occupied bin")

    log_centres = (np.log10(bins[:-1]) + np.log10(bins[1:])) / 2.0
    bin_width = np.mean(np.diff(np.log10(bins)))
    tallest = int(np.argmax(column))
    fallback = 10.0 ** log_centres[tallest]
    if np.count_nonzero(column) == 1:
        return fallback

    start = (column[tallest], log_centres[tallest], 2.0 * bin_width)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, _ = curve_fit(_gaussian, log_centres, column, p0=start,
                                maxfev=5000)
    except RuntimeError:
        return fallback
    centre = popt[1]
    if abs(centre - log_centres[tallest]) > bin_width or not np.isfinite(centre):
        return fallback
    return float(10.0**centre)


def fit_scaling(modes, window=(1e4, 1e6)):
    """Ordinary least squares of log10(w_mode) on log10(t) inside window.

    Returns a ScalingFit with intercept a and slope b, i.e.
    w = 10**a * t**b. Points outside the closed window are ignored.
    """
    modes = np.asarray(modes, dtype=float)
    if modes.ndim != 2 or modes.shape[1] != 2:
        raise ValueError("modes must be rows of (t, w)")
    t_min, t_max = float(window[0]), float(window[1])
    inside = (modes[:, 0] >= t_min) & (modes[:, 0] <= t_max)
    selected = modes[inside]
    if len(selected) < 2:
        raise InsufficientPoints(
            f"need >= 2 mode points inside window ({t_min:g}, {t_max:g}), "
            f"got {len(selected)}")
    log_t = np.log10(selected[:, 0])
    log_w = np.log10(selected[:, 1])
    slope, intercept = np.polyfit(log_t, log_w, 1)
    residual = float(np.sqrt(np.mean((intercept + slope * log_t - log_w) ** 2)))
    return ScalingFit(float(intercept), float(slope), (t_min, t_max),
                      residual, int(len(selected)))
