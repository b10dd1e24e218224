"""Deterministic forward model for two-emitter confocal detection.

Maps emitter positions, relative brightness and a focal point to photon
detection rates, the expected normalised intensity, the expected
second-order correlation g2(0), and the Gaussian-approximation moments
used by the likelihood. All lengths are expressed in units of the beam
waist w0; the default wavelength pi*w0 makes the Rayleigh range equal
to w0.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_point, as_points, check_positive

# Lower bound applied to both moment variances so the Gaussian
# log-likelihood stays finite when an emitter pair drifts far outside
# the detection volume during optimiser excursions.
VAR_FLOOR = 1e-12


class DegenerateInput(ValueError):
    """Raised when both detection rates vanish (no light at a focal point)."""


@dataclass(frozen=True)
class BeamModel:
    """Gaussian-beam detection PSF parameters.

    w0 is the beam-waist radius (the unit of all positions) and
    wavelength defaults to pi*w0 so that the Rayleigh range equals w0.
    The Rayleigh range is always recomputed from (w0, wavelength),
    never stored.

    asymmetric_waist selects a non-physical axial profile
    w(z) = w0*sqrt(1 + z/zR) kept only for comparison studies; the
    default is the standard symmetric w(z) = w0*sqrt(1 + (z/zR)**2).
    """

    w0: float = 1.0
    wavelength: float = field(default=np.pi)
    asymmetric_waist: bool = False

    def __post_init__(self):
        check_positive(self.w0, "w0")
        check_positive(self.wavelength, "wavelength")

    @property
    def rayleigh_range(self):
        """Axial distance at which the beam cross-section doubles."""
        return np.pi * self.w0**2 / self.wavelength


@dataclass(frozen=True)
class EmitterPair:
    """Two emitter positions plus relative intrinsic brightness.

    The brighter emitter is stored first by convention: its intrinsic
    brightness is 1 and the second emitter's is brightness_ratio. A pair
    constructed with brightness_ratio > 1 is normalised by swapping the
    emitters and inverting the ratio. Ratio 1 (equal brightness, labels
    ambiguous) is accepted as a degenerate edge case.
    """

    position1: np.ndarray
    position2: np.ndarray
    brightness_ratio: float

    def __post_init__(self):
        p1 = as_point(self.position1, "position1")
        p2 = as_point(self.position2, "position2")
        ratio = float(self.brightness_ratio)
        if not np.isfinite(ratio) or ratio <= 0:
            raise ValueError(f"brightness_ratio must be > 0, got {ratio}")
        if ratio > 1:
            p1, p2 = p2, p1
            ratio = 1.0 / ratio
        object.__setattr__(self, "position1", p1)
        object.__setattr__(self, "position2", p2)
        object.__setattr__(self, "brightness_ratio", ratio)

    @property
    def brightness_sum(self):
        """Sum of intrinsic brightnesses, 1 + brightness_ratio."""
        return 1.0 + self.brightness_ratio

    @property
    def separation(self):
        return float(np.linalg.norm(self.position1 - self.position2))


@dataclass(frozen=True)
class MomentModel:
    """Gaussian-approximation moments of one (intensity, g2) measurement."""

    mean_intensity: float
    var_intensity: float
    mean_g2: float
    var_g2: float


def beam_waist(beam, z):
    """Beam radius w(z) at axial distance z from the focal plane.

    Standard Gaussian-beam form w0*sqrt(1 + (z/zR)**2); the asymmetric
    variant (flagged on the BeamModel) is w0*sqrt(1 + z/zR) and is
    undefined for z < -zR.
    """
    z = np.asarray(z, dtype=float)
    zr = beam.rayleigh_range
    if beam.asymmetric_waist:
        return beam.w0 * np.sqrt(1.0 + z / zr)
    return beam.w0 * np.sqrt(1.0 + (z / zr) ** 2)


def detection_probability(beam, position, intrinsic, focal_points):
    """Photon detection rate for one emitter at one or more focal points.

    Normalised so the rate equals ``intrinsic`` when the emitter sits
    exactly at a focal point: rate = intrinsic * (w0/w)**2 * exp(-2 r**2 / w**2)
    with r the transverse and z the axial offset between emitter and
    focal point.

    Returns a scalar for a single focal point, else an array of shape (m,).
    """
    position = as_point(position, "position")
    single = np.asarray(focal_points, dtype=float).ndim == 1
    xi = as_points(focal_points, "focal_points")
    rates = _detection_rates(position, float(intrinsic), xi, beam.w0,
                             beam.rayleigh_range, beam.asymmetric_waist)
    return float(rates[0]) if single else rates


def _rates_from_deltas(delta, intrinsic, w0, zr, asymmetric=False):
    """Detection rates from emitter-minus-focal offsets, shape (m,)."""
    r2 = delta[:, 0] ** 2 + delta[:, 1] ** 2
    u = delta[:, 2] / zr
    if asymmetric:
        w2 = w0**2 * (1.0 + u)
    else:
        w2 = w0**2 * (1.0 + u**2)
    return intrinsic * (w0**2 / w2) * np.exp(-2.0 * r2 / w2)


def _detection_rates(position, intrinsic, xi, w0, zr, asymmetric=False):
    """Vectorised detection rates, shape (m,). Inputs pre-validated."""
    return _rates_from_deltas(position[None, :] - xi, intrinsic, w0, zr,
                              asymmetric)


def g2_forward(p1, p2):
    """Second-order correlation at zero delay, 2*p1*p2/(p1+p2)**2.

    Symmetric in (p1, p2), invariant under joint rescaling, bounded by
    0.5 with equality iff p1 == p2.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if np.any(p1 < 0) or np.any(p2 < 0):
        raise ValueError("detection rates must be non-negative")
    total = p1 + p2
    if np.any(total == 0):
        raise DegenerateInput("no light: both detection rates are zero")
    out = 2.0 * p1 * p2 / total**2
    return float(out) if out.ndim == 0 else out


def intensity_moments(p1, p2, brightness_sum, t):
    """Mean and variance of the normalised intensity.

    The summed count c1+c2 is Poisson with rate (p1+p2)*t, so the
    normalised intensity (c1+c2)/(brightness_sum*t) has exact moments
    mean = (p1+p2)/brightness_sum and var = (p1+p2)/(brightness_sum**2*t).
    """
    total = np.asarray(p1, dtype=float) + np.asarray(p2, dtype=float)
    mean = total / brightness_sum
    var = np.maximum(total / (brightness_sum**2 * t), VAR_FLOOR)
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


def g2_moments(p1, p2, t):
    """First-order (delta-method) mean and variance of the g2 estimate.

    g2 = 2*c12/(c11 + c22 + 2*c12) with independent Poisson counts at
    rates p1**2*t, p2**2*t and p1*p2*t. Linearising about the rate means
    gives
        mean = 2*p1*p2/(p1+p2)**2
        var  = 4*p1*p2*(p1**2+p2**2)*(p1**2+p2**2+p1*p2) / ((p1+p2)**8 * t)
    Zero-rate focal points get mean 0 and the floored variance so the
    weighted objective stays finite.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    total = p1 + p2
    sq = p1**2 + p2**2
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(total > 0, 2.0 * p1 * p2 / total**2, 0.0)
        var = np.where(
            total > 0,
            4.0 * p1 * p2 * sq * (sq + p1 * p2) / (total**8 * t),
            0.0,
        )
    var = np.maximum(np.nan_to_num(var, nan=0.0, posinf=np.inf), VAR_FLOOR)
    mean = np.nan_to_num(mean, nan=0.0)
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


def pair_rates(pair, beam, focal_points):
    """Detection rates of both emitters at each focal point, shapes (m,)."""
    xi = as_points(focal_points, "focal_points")
    zr = beam.rayleigh_range
    p1 = _detection_rates(pair.position1, 1.0, xi, beam.w0, zr,
                          beam.asymmetric_waist)
    p2 = _detection_rates(pair.position2, pair.brightness_ratio, xi, beam.w0,
                          zr, beam.asymmetric_waist)
    return p1, p2


def measurement_moments(pair, beam, focal_points, t):
    """Moments of (intensity, g2) at each focal point.

    Returns four arrays of shape (m,): mean/var of the normalised
    intensity and mean/var of g2. This is the vectorised core shared by
    moment_model and the estimator objectives.
    """
    p1, p2 = pair_rates(pair, beam, focal_points)
    mean_i, var_i = intensity_moments(p1, p2, pair.brightness_sum, t)
    mean_g, var_g = g2_moments(p1, p2, t)
    return mean_i, var_i, mean_g, var_g


def moment_model(pair, beam, focal, t):
    """MomentModel of the (intensity, g2) measurement at one focal point.

    Raises DegenerateInput when both detection rates vanish there.
    """
    check_positive(t, "t")
    focal = as_point(focal, "focal")
    p1, p2 = pair_rates(pair, beam, focal[None, :])
    if p1[0] + p2[0] == 0:
        raise DegenerateInput("no light: both detection rates are zero")
    mean_i, var_i = intensity_moments(p1[0], p2[0], pair.brightness_sum, t)
    mean_g, var_g = g2_moments(p1[0], p2[0], t)
    return MomentModel(float(mean_i), float(var_i), float(mean_g), float(var_g))
