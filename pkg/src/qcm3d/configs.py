"""Built-in detection configurations.

Six named focal-point layouts, from the minimal tetrahedron (four
points, the fewest that determine the 7-parameter two-emitter problem)
up to a nine-point z-stack. Coordinates are in units of the beam waist.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import as_points

_SIN60 = np.sin(np.pi / 3)
_COS60 = np.cos(np.pi / 3)


class UnknownConfig(KeyError):
    """Requested configuration name is not a built-in."""


@dataclass(frozen=True)
class DetectionConfig:
    """Named ordered list of focal points, shape (m, 3), units of w0."""

    name: str
    focal_points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "focal_points",
                           as_points(self.focal_points, "focal_points"))

    def __len__(self):
        return len(self.focal_points)


def _triangle(z):
    """Equilateral trilateration triangle in the plane at height z."""
    return [(0, 1, z), (-_SIN60, -_COS60, z), (_SIN60, -_COS60, z)]


_BUILTINS = {
    "tetrahedral": [
        (1, 1, 1), (-1, -1, 1), (-1, 1, -1), (1, -1, -1),
    ],
    "z-augmented-trilateration": [
        (0, 1, 0), (0, 0, 0.5), (0, 0, -0.5),
        (-_SIN60, -_COS60, 0), (_SIN60, -_COS60, 0),
    ],
    "orthogonal-trilateration": [
        (0, 1, 0), (0, 0, 1),
        (-_SIN60, -_COS60, 0), (_SIN60, -_COS60, 0),
        (0, -_SIN60, -_COS60), (0, _SIN60, -_COS60),
    ],
    "orthogonal-trilateration-plus": [
        (0, 1, 0.5), (0, 1, -0.5), (0, 0, 0),
        (-_SIN60, -_COS60, 0.5), (_SIN60, -_COS60, 0.5),
        (-_SIN60, -_COS60, -0.5), (_SIN60, -_COS60, -0.5),
    ],
    "grid-2x2x2": [
        (-1, -1, -1), (-1, 1, -1), (1, -1, -1), (1, 1, -1),
        (-1, -1, 1), (-1, 1, 1), (1, -1, 1), (1, 1, 1),
    ],
    # Trilateration triangle scanned through three focal planes. The
    # published coordinate table prints cos(pi/30) in two second-plane
    # entries and one sign flip at z=+1 where the stack symmetry (the
    # same triangle at z = 1, 0, -1) requires -cos(pi/3); the symmetric
    # form is used here.
    "z-stack": [(0, 1, 1), (0, 1, 0), (0, 1, -1)] + [
        p for z in (1, 0, -1) for p in _triangle(z)[1:]
    ],
}

CONFIG_NAMES = tuple(_BUILTINS)


def builtin_config(name):
    """Return the built-in DetectionConfig with this name.

    Raises UnknownConfig for anything outside CONFIG_NAMES.
    """
    try:
        points = _BUILTINS[name]
    except KeyError:
        raise UnknownConfig(
            f"unknown configuration {name!r}; expected one of {', '.join(CONFIG_NAMES)}"
        ) from None
    return DetectionConfig(name, np.array(points, dtype=float))


def all_configs():
    """All built-in configurations in declaration order."""
    return [builtin_config(name) for name in CONFIG_NAMES]
