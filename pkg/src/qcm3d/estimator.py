"""Two-stage localisation of an emitter pair from one measurement set.

Pipeline: an intensity-scan seed picks two starting positions by
back-projecting the measured intensities through the PSF; a
method-of-moments stage minimises the unweighted squared residuals of
the forward model; a maximum-likelihood stage refines that minimiser
under the Gaussian-approximation likelihood (residuals weighted by the
model variances). Both stages use the Nelder-Mead simplex algorithm.

The optimiser works on an unconstrained 7-vector
(x1, y1, z1, x2, y2, z2, logit of the brightness ratio): the logit keeps
the ratio inside (0, 1) without clamping, so the first emitter is the
intrinsically brighter one by construction.

``TwoEmitterLocalizer`` wraps the pipeline in a scikit-learn style
estimator (fit/predict/score, get_params) so it composes with the wider
ecosystem; ``localise`` is the underlying functional entry point.
"""

import time
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit, logit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .optics import (
    BeamModel,
    EmitterPair,
    _rates_from_deltas,
    g2_moments,
    intensity_moments,
    measurement_moments,
)
from .simulate import MIN_FOCAL_POINTS, ConfigTooSmall, MeasurementSet


class DegenerateScan(UserWarning):
    """All measured intensities are zero; the seed scan carries no signal."""


class NonFiniteObjective(ValueError):
    """Objective is not finite at the optimiser start point."""


class Stage(Enum):
    MME = "mme"
    MLE = "mle"


@dataclass(frozen=True)
class ScanGrid:
    """Regular 3D grid for the intensity-scan seed.

    bounds are (lo, hi) per axis; resolution is points per axis (>= 3).
    """

    bounds: tuple = ((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0))
    resolution: int = 11

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(bounds) != 3 or any(hi <= lo for lo, hi in bounds):
            raise ValueError(f"bounds must be three (lo, hi) intervals, got {bounds}")
        if self.resolution < 3:
            raise ValueError("resolution must be >= 3 points per axis")
        object.__setattr__(self, "bounds", bounds)

    def axes(self):
        return [np.linspace(lo, hi, self.resolution) for lo, hi in self.bounds]

    def points(self):
        """All grid points, shape (resolution**3, 3)."""
        ax, ay, az = self.axes()
        gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    @property
    def centre(self):
        return np.array([(lo + hi) / 2 for lo, hi in self.bounds])

    @property
    def cell(self):
        """Grid spacing per axis."""
        return np.array([(hi - lo) / (self.resolution - 1)
                         for lo, hi in self.bounds])


@dataclass(frozen=True)
class NelderMeadOptions:
    """Convergence controls for one simplex run.

    Converged means the simplex function-value spread fell below ftol
    and the simplex diameter below xtol (units of w0) within max_iter
    iterations.
    """

    ftol: float = 1e-10
    xtol: float = 1e-6
    max_iter: int = 5000


@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class LocaliserOptions:
    grid: ScanGrid = field(default_factory=ScanGrid)
    nm: NelderMeadOptions = field(default_factory=NelderMeadOptions)
    #: initial simplex displacement for position coordinates (units of w0)
    step: float = 0.05
    #: initial simplex displacement for the logit-ratio coordinate
    logit_step: float = 0.1
    #: seed value for the brightness ratio is clamped to this interval
    alpha_seed_clamp: tuple = (0.1, 0.9)
    #: estimates with |x1 - x2| below this are flagged as co-located
    degenerate_tol: float = 1e-4
    #: run the likelihood refinement stage after the method of moments
    refine: bool = True


@dataclass(frozen=True)
class Estimate:
    """Result of one localisation.

    ``objective`` is the final value of the stage's objective function;
    ``degenerate`` flags fits whose two positions coincide to within
    the configured tolerance (kept, not rejected: they still carry
    information for ensemble clustering).
    """

    pair: EmitterPair
    objective: float
    stage: Stage
    converged: bool
    iterations: int
    mme_objective: float = np.nan
    degenerate: bool = False
    wall_time: float = 0.0

    def to_record(self, gt_id=None, trial=None):
        x1, x2 = self.pair.position1, self.pair.position2
        rec = {
            "gt_id": gt_id,
            "trial": trial,
            "x1_hat": x1[0], "y1_hat": x1[1], "z1_hat": x1[2],
            "x2_hat": x2[0], "y2_hat": x2[1], "z2_hat": x2[2],
            "alpha_hat": self.pair.brightness_ratio,
            "objective": self.objective,
            "stage": self.stage.value,
            "converged": self.converged,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
        }
        return rec


def pack_params(pair):
    """EmitterPair -> unconstrained 7-vector (positions, logit ratio)."""
    return np.concatenate([
        pair.position1, pair.position2, [logit(pair.brightness_ratio)],
    ])


def unpack_params(params):
    """Unconstrained 7-vector -> canonical EmitterPair."""
    params = np.asarray(params, dtype=float)
    if params.shape != (7,):
        raise ValueError(f"parameter vector must have shape (7,), got {params.shape}")
    return EmitterPair(params[:3], params[3:6], float(expit(params[6])))


def _seed_with_scores(ms, beam, grid):
    """Back-projection intensity seed.

    Scores every grid point x by sum_j I_j * PSF(x; xi_j) and returns
    (seed1, seed2, score1, score2, degenerate). The second seed is the
    best point outside the first seed's immediate grid neighbourhood
    (at least one cell between them), so both seeds never sit on the
    same sample of a single peak.
    """
    if len(ms) == 0:
        raise ValueError("measurement set is empty")
    points = grid.points()
    res = grid.resolution
    scores = np.zeros(len(points))
    for j in range(len(ms)):
        rates = _rates_from_deltas(points - ms.focal_points[j], 1.0, beam.w0,
                                   beam.rayleigh_range, beam.asymmetric_waist)
        scores += ms.intensity[j] * rates
    if not np.any(scores > 0):
        warnings.warn("all intensities are zero; seeding from the grid centre",
                      DegenerateScan, stacklevel=3)
        centre = grid.centre
        return centre, centre, 0.0, 0.0, True

    best = int(np.argmax(scores))
    idx = np.unravel_index(np.arange(len(points)), (res, res, res))
    cheb = np.maximum.reduce([
        np.abs(axis - axis[best]) for axis in idx
    ])
    outside = cheb >= 2
    if not np.any(outside):
        outside = cheb >= 1  # tiny grids: any distinct point
    masked = np.where(outside, scores, -np.inf)
    second = int(np.argmax(masked))
    return (points[best], points[second],
            float(scores[best]), float(scores[second]), False)


def intensity_seed(ms, beam, grid=None):
    """Two starting positions for the optimiser, brightest first."""
    s1, s2, _, _, _ = _seed_with_scores(ms, beam, grid or ScanGrid())
    return s1, s2


class _Objective:
    """Residual objective over one measurement set, weighted or not.

    Precomputes the measurement arrays once; __call__ evaluates the
    (negative log-) likelihood surrogate at a 7-parameter vector.
    Missing g2 readings are skipped in both variants.
    """

    def __init__(self, ms, beam, weighted):
        self.xi = ms.focal_points
        self.t = ms.t
        self.intensity = ms.intensity
        mask = ~np.isnan(ms.g2)
        self.g2_mask = mask
        self.g2 = ms.g2[mask]
        self.t_g2 = ms.t[mask]
        self.weighted = weighted
        self.w0 = beam.w0
        self.zr = beam.rayleigh_range
        self.asymmetric = beam.asymmetric_waist

    def __call__(self, params):
        x1 = params[0:3]
        x2 = params[3:6]
        alpha = expit(params[6])
        p1 = _rates_from_deltas(x1[None, :] - self.xi, 1.0, self.w0, self.zr,
                                self.asymmetric)
        p2 = _rates_from_deltas(x2[None, :] - self.xi, alpha, self.w0,
                                self.zr, self.asymmetric)
        mean_i, var_i = intensity_moments(p1, p2, 1.0 + alpha, self.t)
        res_i = mean_i - self.intensity
        mask = self.g2_mask
        mean_g, var_g = g2_moments(p1[mask], p2[mask], self.t_g2)
        res_g = mean_g - self.g2
        if self.weighted:
            value = np.sum(res_i**2 / var_i) + np.sum(res_g**2 / var_g)
        else:
            value = np.sum(res_i**2) + np.sum(res_g**2)
        return float(value)


def neg_log_likelihood(params, ms, beam):
    """Gaussian-approximation objective: variance-weighted squared residuals.

    sum_j (mean_I,j - I_j)**2/var_I,j + (mean_g,j - g2_j)**2/var_g,j,
    with missing g2 terms skipped. The variance floor keeps the value
    finite everywhere.
    """
    return _Objective(ms, beam, weighted=True)(np.asarray(params, dtype=float))


def mme_objective(params, ms, beam):
    """Method-of-moments objective: unweighted squared residuals."""
    return _Objective(ms, beam, weighted=False)(np.asarray(params, dtype=float))


def nelder_mead(f, start, options=None, steps=0.05):
    """Minimise f by the Nelder-Mead simplex algorithm.

    Standard coefficients: reflection 1, expansion 2, contraction 0.5,
    shrink 0.5. The initial simplex is the start point plus one vertex
    per coordinate displaced by ``steps`` (scalar or per-coordinate).
    Convergence requires both the function-value spread and the simplex
    diameter (max distance from the best vertex) to fall below the
    options' tolerances.

    Raises NonFiniteObjective when f(start) is not finite.
    """
    opts = options or NelderMeadOptions()
    start = np.asarray(start, dtype=float)
    n = start.size
    f0 = float(f(start))
    if not np.isfinite(f0):
        raise NonFiniteObjective(f"objective is {f0} at the start point")
    if opts.max_iter <= 0:
        return NelderMeadResult(start.copy(), f0, False, 0)

    steps = np.broadcast_to(np.asarray(steps, dtype=float), (n,))
    simplex = np.repeat(start[None, :], n + 1, axis=0)
    fvals = np.empty(n + 1)
    fvals[0] = f0
    for i in range(n):
        simplex[i + 1, i] += steps[i]
        fvals[i + 1] = f(simplex[i + 1])

    converged = False
    iterations = 0
    while iterations < opts.max_iter:
        order = np.argsort(fvals, kind="stable")
        simplex = simplex[order]
        fvals = fvals[order]

        spread = fvals[-1] - fvals[0]
        diameter = np.max(np.abs(simplex[1:] - simplex[0]))
        if spread <= opts.ftol and diameter <= opts.xtol:
            converged = True
            break

        iterations += 1
        centroid = simplex[:-1].mean(axis=0)
        reflected = centroid + (centroid - simplex[-1])
        f_r = f(reflected)

        if f_r < fvals[0]:
            expanded = centroid + 2.0 * (centroid - simplex[-1])
            f_e = f(expanded)
            if f_e < f_r:
                simplex[-1], fvals[-1] = expanded, f_e
            else:
                simplex[-1], fvals[-1] = reflected, f_r
        elif f_r < fvals[-2]:
            simplex[-1], fvals[-1] = reflected, f_r
        elif f_r < fvals[-1]:
            contracted = centroid + 0.5 * (reflected - centroid)
            f_c = f(contracted)
            if f_c <= f_r:
                simplex[-1], fvals[-1] = contracted, f_c
            else:
                simplex, fvals = _shrink(f, simplex, fvals)
        else:
            contracted = centroid - 0.5 * (centroid - simplex[-1])
            f_c = f(contracted)
            if f_c < fvals[-1]:
                simplex[-1], fvals[-1] = contracted, f_c
            else:
                simplex, fvals = _shrink(f, simplex, fvals)

    order = np.argsort(fvals, kind="stable")
    return NelderMeadResult(simplex[order[0]].copy(), float(fvals[order[0]]),
                            converged, iterations)


def _shrink(f, simplex, fvals):
    simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
    for i in range(1, len(simplex)):
        fvals[i] = f(simplex[i])
    return simplex, fvals


def localise(ms, beam=None, options=None):
    """Full two-stage localisation of one measurement set.

    Seeds from the intensity scan, minimises the unweighted
    method-of-moments residual, then refines under the
    variance-weighted likelihood objective from the first stage's
    minimiser. Returns a canonicalised Estimate (brighter emitter
    first). Optimiser stagnation is reported via converged=False, never
    as an error.
    """
    t0 = time.perf_counter()
    beam = beam or BeamModel()
    opts = options or LocaliserOptions()
    if len(ms) < MIN_FOCAL_POINTS:
        warnings.warn(
            f"{len(ms)} focal points give {2 * len(ms)} observables for 7 "
            "unknowns; localisation is underdetermined", ConfigTooSmall,
            stacklevel=2)

    seed1, seed2, score1, score2, degenerate_scan = _seed_with_scores(
        ms, beam, opts.grid)
    if degenerate_scan or score1 <= 0:
        alpha0 = 0.5
    else:
        lo, hi = opts.alpha_seed_clamp
        alpha0 = min(max(score2 / score1, lo), hi)
    start = np.concatenate([seed1, seed2, [logit(alpha0)]])
    steps = np.array([opts.step] * 6 + [opts.logit_step])

    mme = nelder_mead(_Objective(ms, beam, weighted=False), start,
                      opts.nm, steps)
    if opts.refine:
        mle = nelder_mead(_Objective(ms, beam, weighted=True), mme.x,
                          opts.nm, steps)
        final, stage = mle, Stage.MLE
        iterations = mme.iterations + mle.iterations
    else:
        final, stage = mme, Stage.MME
        iterations = mme.iterations

    pair = unpack_params(final.x)
    return Estimate(
        pair=pair,
        objective=final.fun,
        stage=stage,
        converged=final.converged,
        iterations=iterations,
        mme_objective=mme.fun,
        degenerate=bool(pair.separation < opts.degenerate_tol),
        wall_time=time.perf_counter() - t0,
    )


class TwoEmitterLocalizer(BaseEstimator):
    """scikit-learn style interface to the two-stage pair localiser.

    Measurements are rows [xi_x, xi_y, xi_z, t, intensity, g2] (g2 NaN
    where missing), one per focal point. Fitting estimates both emitter
    positions and their relative brightness; ``predict`` returns the
    model's expected (intensity, g2) at new focal points and ``score``
    the negative of the likelihood objective (higher is better).

    Parameters mirror BeamModel, ScanGrid, the simplex controls and the
    pipeline options; see those classes. All are plain constructor
    arguments so the estimator works with get_params/set_params,
    cloning and sklearn model-selection tooling.
    """

    def __init__(self, w0=1.0, wavelength=np.pi, asymmetric_waist=False,
                 grid_bounds=((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)),
                 grid_resolution=11, step=0.05, logit_step=0.1,
                 ftol=1e-10, xtol=1e-6, max_iter=5000,
                 alpha_seed_clamp=(0.1, 0.9), degenerate_tol=1e-4,
                 refine=True):
        self.w0 = w0
        self.wavelength = wavelength
        self.asymmetric_waist = asymmetric_waist
        self.grid_bounds = grid_bounds
        self.grid_resolution = grid_resolution
        self.step = step
        self.logit_step = logit_step
        self.ftol = ftol
        self.xtol = xtol
        self.max_iter = max_iter
        self.alpha_seed_clamp = alpha_seed_clamp
        self.degenerate_tol = degenerate_tol
        self.refine = refine

    def _beam(self):
        return BeamModel(self.w0, self.wavelength, self.asymmetric_waist)

    def _options(self):
        return LocaliserOptions(
            grid=ScanGrid(self.grid_bounds, self.grid_resolution),
            nm=NelderMeadOptions(self.ftol, self.xtol, self.max_iter),
            step=self.step, logit_step=self.logit_step,
            alpha_seed_clamp=tuple(self.alpha_seed_clamp),
            degenerate_tol=self.degenerate_tol, refine=self.refine,
        )

    def _measurement_set(self, X):
        if isinstance(X, MeasurementSet):
            return X
        return MeasurementSet.from_array(X)

    def fit(self, X, y=None):
        """Estimate emitter positions and brightness ratio from X."""
        ms = self._measurement_set(X)
        est = localise(ms, self._beam(), self._options())
        self.estimate_ = est
        self.position1_ = est.pair.position1
        self.position2_ = est.pair.position2
        self.brightness_ratio_ = est.pair.brightness_ratio
        self.objective_ = est.objective
        self.converged_ = est.converged
        self.n_iter_ = est.iterations
        return self

    def predict(self, X):
        """Expected [intensity, g2] rows at the focal points/times in X.

        X needs at least columns [xi_x, xi_y, xi_z, t]; extra columns
        (e.g. a full measurement array) are ignored.
        """
        check_is_fitted(self, "estimate_")
        if isinstance(X, MeasurementSet):
            xi, t = X.focal_points, X.t
        else:
            X = np.asarray(X, dtype=float)
            if X.ndim != 2 or X.shape[1] < 4:
                raise ValueError(
                    f"expected columns [xi_x, xi_y, xi_z, t, ...], got shape {X.shape}")
            xi, t = X[:, :3], X[:, 3]
        mean_i, _, mean_g, _ = measurement_moments(self.estimate_.pair,
                                                   self._beam(), xi, t)
        return np.column_stack([mean_i, mean_g])

    def score(self, X, y=None):
        """Negative likelihood objective of the fit on X (higher is better)."""
        check_is_fitted(self, "estimate_")
        ms = self._measurement_set(X)
        params = pack_params(self.estimate_.pair)
        return -neg_log_likelihood(params, ms, self._beam())
