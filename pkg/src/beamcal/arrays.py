"""Uniform planar array model: geometry, steering vectors, codebooks, beam responses.

Conventions used throughout the package:

* Angles are radians internally; azimuth and elevation both live in the open
  interval (-pi/2, pi/2), i.e. only the boresight hemisphere is modeled.
* A codebook is stored codeword-major: entry matrix of shape (G, N) whose
  row g is the codeword steering beam g.  The beam response at direction
  ``d`` is then ``entries.conj() @ steering_vector(geom, d)``, the per-beam
  Hermitian inner product of each codeword with the steering vector.
* Element ordering inside a codeword follows the Kronecker product
  a_col (azimuth axis) x a_row (elevation axis): index n = k * rows + m for
  column k and row m.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

HALF_PI = math.pi / 2.0


def deg2rad(x):
    return np.deg2rad(x)


def rad2deg(x):
    return np.rad2deg(x)


@dataclass(frozen=True)
class AngleDirection:
    """A direction in the boresight hemisphere (azimuth, elevation), radians."""

    azimuth: float
    elevation: float = 0.0

    def __post_init__(self):
        az, el = float(self.azimuth), float(self.elevation)
        if not (math.isfinite(az) and math.isfinite(el)):
            raise ValueError("direction angles must be finite")
        if not (-HALF_PI < az < HALF_PI and -HALF_PI < el < HALF_PI):
            raise ValueError(
                f"direction ({math.degrees(az):.2f} deg, {math.degrees(el):.2f} deg) "
                "outside the open boresight hemisphere (-90, 90) deg"
            )
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)

    @classmethod
    def from_degrees(cls, azimuth_deg: float, elevation_deg: float = 0.0) -> "AngleDirection":
        return cls(math.radians(azimuth_deg), math.radians(elevation_deg))

    def as_degrees(self) -> tuple[float, float]:
        return math.degrees(self.azimuth), math.degrees(self.elevation)


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array with `rows x cols` elements.

    ``element_spacing`` is in wavelengths (default half-wavelength).
    """

    rows: int
    cols: int
    element_spacing: float = 0.5

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array must have at least one row and one column")
        if not self.element_spacing > 0:
            raise ValueError("element spacing must be positive")

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols


class NormMode(enum.Enum):
    """Codeword normalization convention.

    PER_ELEMENT_UNIT_MODULUS: every entry has |w| = 1 (phase-shifter codebook).
    PER_CODEWORD_UNIT_NORM: every codeword has unit l2 norm (power constraint).
    """

    PER_ELEMENT_UNIT_MODULUS = "per-element-unit-modulus"
    PER_CODEWORD_UNIT_NORM = "per-codeword-unit-norm"


UNIT_NORM_TOL = 1e-9


@dataclass
class BeamformingAngles:
    """The nominal steering direction of each codeword."""

    directions: list[AngleDirection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.directions)

    @classmethod
    def from_degrees(cls, pairs: Iterable[tuple[float, float]]) -> "BeamformingAngles":
        return cls([AngleDirection.from_degrees(az, el) for az, el in pairs])

    @classmethod
    def azimuth_fan_degrees(cls, azimuths_deg: Iterable[float]) -> "BeamformingAngles":
        return cls([AngleDirection.from_degrees(az, 0.0) for az in azimuths_deg])

    def as_degree_pairs(self) -> list[tuple[float, float]]:
        return [d.as_degrees() for d in self.directions]


@dataclass
class Codebook:
    """G beamforming codewords over N array elements, stored codeword-major (G, N)."""

    entries: np.ndarray
    norm_mode: NormMode

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.complex128)
        if self.entries.ndim != 2:
            raise ValueError("codebook entries must be a 2-D (G, N) array")

    @property
    def n_codewords(self) -> int:
        return self.entries.shape[0]

    @property
    def n_elements(self) -> int:
        return self.entries.shape[1]

    def validate(self) -> None:
        """Check the norm convention invariant, raising ValueError on violation."""
        if self.norm_mode is NormMode.PER_ELEMENT_UNIT_MODULUS:
            dev = np.max(np.abs(np.abs(self.entries) - 1.0))
            if dev > UNIT_NORM_TOL:
                raise ValueError(f"entry modulus deviates from 1 by {dev:.3e}")
        else:
            norms = np.linalg.norm(self.entries, axis=1)
            dev = np.max(np.abs(norms - 1.0))
            if dev > UNIT_NORM_TOL:
                raise ValueError(f"codeword norm deviates from 1 by {dev:.3e}")

    def normalized_per_codeword(self) -> "Codebook":
        """Return a copy with each codeword scaled to unit l2 norm."""
        norms = np.linalg.norm(self.entries, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("cannot normalize a zero codeword")
        return Codebook(self.entries / norms, NormMode.PER_CODEWORD_UNIT_NORM)

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.norm_mode)


def _angles_as_arrays(directions) -> tuple[np.ndarray, np.ndarray]:
    """Accept AngleDirection, a sequence of them, or (az, el) arrays in radians."""
    if isinstance(directions, AngleDirection):
        return np.array([directions.azimuth]), np.array([directions.elevation])
    if isinstance(directions, BeamformingAngles):
        directions = directions.directions
    if isinstance(directions, tuple) and len(directions) == 2:
        az = np.atleast_1d(np.asarray(directions[0], dtype=float))
        el = np.atleast_1d(np.asarray(directions[1], dtype=float))
        return az, el
    seq = list(directions)
    az = np.array([d.azimuth for d in seq], dtype=float)
    el = np.array([d.elevation for d in seq], dtype=float)
    return az, el


def _check_hemisphere(az: np.ndarray, el: np.ndarray) -> None:
    if az.size and (
        not np.all(np.isfinite(az) & np.isfinite(el))
        or np.any(np.abs(az) >= HALF_PI)
        or np.any(np.abs(el) >= HALF_PI)
    ):
        raise ValueError("all directions must lie strictly inside the boresight hemisphere")


def steering_matrix(geom: ArrayGeometry, directions) -> np.ndarray:
    """Steering vectors for many directions at once, stacked as columns (N, T).

    Element k of the column (azimuth) factor carries phase
    2*pi*spacing*k*sin(az)*cos(el); element m of the row (elevation) factor
    carries 2*pi*spacing*m*sin(el).  The full vector is their Kronecker
    product, column factor varying slowest.
    """
    az, el = _angles_as_arrays(directions)
    _check_hemisphere(az, el)
    phase_unit = 2.0 * np.pi * geom.element_spacing
    k = np.arange(geom.cols)[:, None]
    m = np.arange(geom.rows)[:, None]
    a_col = np.exp(1j * phase_unit * k * (np.sin(az) * np.cos(el))[None, :])  # (cols, T)
    a_row = np.exp(1j * phase_unit * m * np.sin(el)[None, :])  # (rows, T)
    # Kronecker product per column: index n = k * rows + m.
    out = (a_col[:, None, :] * a_row[None, :, :]).reshape(geom.n_elements, az.size)
    return out


def steering_vector(geom: ArrayGeometry, direction: AngleDirection) -> np.ndarray:
    """Unit-modulus array phase response toward ``direction``, length N."""
    return steering_matrix(geom, direction)[:, 0]


def element_pattern(direction, beta: float):
    """Directional per-element gain (cos az * cos el) ** beta, clamped to [0, 1].

    ``direction`` may be an AngleDirection or (az, el) radian arrays.
    """
    if not beta > 0:
        raise ValueError("element pattern exponent beta must be positive")
    az, el = _angles_as_arrays(direction)
    base = np.clip(np.cos(az) * np.cos(el), 0.0, None)
    gain = base**beta
    if isinstance(direction, AngleDirection):
        return float(gain[0])
    return gain


def ideal_codebook(geom: ArrayGeometry, angles: BeamformingAngles) -> Codebook:
    """Steering-based codebook: codeword g is the steering vector at angle g.

    All entries have unit modulus (pure phase shifts).
    """
    if len(angles) == 0:
        raise ValueError("need at least one beamforming angle")
    entries = steering_matrix(geom, angles).T  # (G, N), row g = a(phi_g)
    return Codebook(entries.copy(), NormMode.PER_ELEMENT_UNIT_MODULUS)


def beam_response_matrix(
    cb: Codebook,
    geom: ArrayGeometry,
    directions,
    element_beta: float | None = None,
) -> np.ndarray:
    """Beam responses for many directions, shape (G, T).

    Column t is ``g(dir_t) * conj(W) @ a(dir_t)`` where W is the codeword-major
    entry matrix; without ``element_beta`` the element gain is 1 (sensing mode).
    """
    if cb.n_elements != geom.n_elements:
        raise ValueError(
            f"codebook has {cb.n_elements} elements but geometry has {geom.n_elements}"
        )
    a = steering_matrix(geom, directions)
    resp = cb.entries.conj() @ a
    if element_beta is not None:
        az, el = _angles_as_arrays(directions)
        resp = resp * element_pattern((az, el), element_beta)[None, :]
    return resp


def beam_response(
    cb: Codebook,
    geom: ArrayGeometry,
    direction: AngleDirection,
    element_beta: float | None = None,
) -> np.ndarray:
    """Beam response vector (length G) of the codebook at one direction."""
    return beam_response_matrix(cb, geom, direction, element_beta)[:, 0]
