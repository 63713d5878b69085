"""Maximum-likelihood angle extraction and mismatch bias utilities.

Angle estimation from a single beam-sweep observation y maximizes the
normalized projection |b(d)^H y| / ||b(d)|| over directions d, where
b(d) = conj(W) @ a(d) is the assumed beam response.  The same projection
geometry yields the pseudo-true angle of a mismatched codebook: the direction
at which the model best explains a noiseless ground-truth response, whose
offset from the true direction is the irreducible estimation bias.

Searches are derivative-free: a coarse grid scan bounds the basin, then
golden-section passes per axis refine the maximizer.  Ties on the coarse grid
resolve to the smallest azimuth, then smallest elevation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .arrays import AngleDirection, ArrayGeometry, Codebook, steering_matrix

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_REFINE_TOL_RAD = math.radians(1e-4)
_ANGLE_LIMIT = math.radians(89.9)  # stay strictly inside the hemisphere


class AmbiguousAngleError(RuntimeError):
    """The projection objective is identically (numerically) zero."""


@dataclass(frozen=True)
class GridSpec:
    """Search grid for angle estimation, in degrees.

    ``el_range=None`` freezes elevation at zero and searches azimuth only.
    """

    az_range: tuple[float, float] = (-70.0, 70.0)
    el_range: tuple[float, float] | None = None
    step: float = 1.0
    refine_iters: int = 2

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        for rng in (self.az_range, self.el_range):
            if rng is not None and not (-90.0 < rng[0] <= rng[1] < 90.0):
                raise ValueError("grid ranges must lie inside (-90, 90) degrees")


@dataclass(frozen=True)
class PseudoTrueEstimate:
    """Best-fit gain/angle of a model against a ground-truth response."""

    gain: complex
    angle: AngleDirection
    residual: float


def _response_columns(cb: Codebook, geom: ArrayGeometry, az: np.ndarray, el: np.ndarray):
    a = steering_matrix(geom, (az, el))
    return cb.entries.conj() @ a


def _projection_values(cb, geom, target: np.ndarray, az: np.ndarray, el: np.ndarray):
    """|b(d)^H target| / ||b(d)|| for each direction; zero-norm beams score 0."""
    b = _response_columns(cb, geom, az, el)
    den = np.linalg.norm(b, axis=0)
    num = np.abs(b.conj().T @ target)
    out = np.zeros_like(den)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def _golden_max(fun, lo: float, hi: float, tol: float) -> float:
    """Golden-section maximizer of a scalar function on [lo, hi]."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def _refine(objective, az0, el0, half_az, half_el, passes, az_bounds, el_bounds):
    """Per-axis golden-section passes around a coarse maximizer."""
    az, el = az0, el0
    for _ in range(passes):
        lo = max(az - half_az, az_bounds[0])
        hi = min(az + half_az, az_bounds[1])
        az = _golden_max(lambda x: objective(x, el), lo, hi, _REFINE_TOL_RAD)
        if half_el > 0:
            lo = max(el - half_el, el_bounds[0])
            hi = min(el + half_el, el_bounds[1])
            el = _golden_max(lambda x: objective(az, x), lo, hi, _REFINE_TOL_RAD)
    return az, el


def mle_angle(
    y: np.ndarray,
    cb: Codebook,
    geom: ArrayGeometry,
    grid: GridSpec = GridSpec(),
) -> AngleDirection:
    """Maximum-likelihood direction estimate from one observation vector.

    Scans the normalized projection objective on the coarse grid, then runs
    ``grid.refine_iters`` golden-section passes per searched axis.  Raises
    AmbiguousAngleError when y is orthogonal to every candidate response.
    """
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim != 1 or y.shape[0] != cb.n_codewords:
        raise ValueError("observation must be a length-G vector")
    norm_y = np.linalg.norm(y)
    if norm_y == 0:
        raise ValueError("observation must be nonzero")

    step = math.radians(grid.step)
    az_vals = np.deg2rad(
        np.arange(grid.az_range[0], grid.az_range[1] + grid.step / 2.0, grid.step)
    )
    if grid.el_range is None:
        el_vals = np.array([0.0])
    else:
        el_vals = np.deg2rad(
            np.arange(grid.el_range[0], grid.el_range[1] + grid.step / 2.0, grid.step)
        )
    # Azimuth varies slowest so the first flat argmax realizes the tie rule.
    azg = np.repeat(az_vals, el_vals.size)
    elg = np.tile(el_vals, az_vals.size)
    vals = _projection_values(cb, geom, y, azg, elg)
    best = int(np.argmax(vals))
    if vals[best] <= 1e-12 * norm_y:
        raise AmbiguousAngleError("observation is orthogonal to the whole beam grid")

    def objective(az, el):
        return _projection_values(cb, geom, y, np.array([az]), np.array([el]))[0]

    az_bounds = (math.radians(grid.az_range[0]), math.radians(grid.az_range[1]))
    if grid.el_range is None:
        el_bounds = (0.0, 0.0)
        half_el = 0.0
    else:
        el_bounds = (math.radians(grid.el_range[0]), math.radians(grid.el_range[1]))
        half_el = step
    az, el = _refine(
        objective, azg[best], elg[best], step, half_el, grid.refine_iters, az_bounds, el_bounds
    )
    return AngleDirection(az, el)


def nuisance_gain(y: np.ndarray, cb: Codebook, geom: ArrayGeometry, angle: AngleDirection):
    """Closed-form gain that best fits y at a given direction: b^H y / b^H b."""
    b = _response_columns(cb, geom, np.array([angle.azimuth]), np.array([angle.elevation]))[:, 0]
    bb = np.vdot(b, b).real
    if bb == 0:
        return 0.0 + 0.0j
    return np.vdot(b, y) / bb


def pseudo_true(
    truth_response: np.ndarray,
    cb: Codebook,
    geom: ArrayGeometry,
    init: AngleDirection,
    scan_halfwidth_deg: float = 5.0,
    scan_step_deg: float = 0.1,
    refine_passes: int = 2,
    search_elevation: bool | None = None,
) -> PseudoTrueEstimate:
    """Best-fit angle/gain of a (possibly mismatched) codebook model.

    Minimizes ||b_bar - gain * b_model(d)||^2 with the gain eliminated in
    closed form, leaving the same normalized-projection objective as
    estimation.  The search is local: a coarse safeguard scan within
    ``scan_halfwidth_deg`` of ``init`` followed by golden-section refinement.
    By default elevation is searched only for planar (multi-row) arrays.
    """
    b_bar = np.ascontiguousarray(truth_response, dtype=np.complex128)
    if not np.all(np.isfinite(b_bar.real) & np.isfinite(b_bar.imag)):
        raise ValueError("truth response must be finite")
    if b_bar.ndim != 1 or b_bar.shape[0] != cb.n_codewords:
        raise ValueError("truth response must be a length-G vector")
    if search_elevation is None:
        search_elevation = geom.rows > 1

    half = math.radians(scan_halfwidth_deg)
    step = math.radians(scan_step_deg)

    def axis_scan(center):
        lo = max(center - half, -_ANGLE_LIMIT)
        hi = min(center + half, _ANGLE_LIMIT)
        return lo, hi, np.arange(lo, hi + step / 2.0, step)

    az_lo, az_hi, az_vals = axis_scan(init.azimuth)
    if search_elevation:
        el_lo, el_hi, el_vals = axis_scan(init.elevation)
    else:
        el_lo = el_hi = init.elevation
        el_vals = np.array([init.elevation])

    azg = np.repeat(az_vals, el_vals.size)
    elg = np.tile(el_vals, az_vals.size)
    vals = _projection_values(cb, geom, b_bar, azg, elg)
    best = int(np.argmax(vals))

    def objective(az, el):
        return _projection_values(cb, geom, b_bar, np.array([az]), np.array([el]))[0]

    az, el = _refine(
        objective,
        azg[best],
        elg[best],
        step,
        step if search_elevation else 0.0,
        refine_passes,
        (az_lo, az_hi),
        (el_lo, el_hi),
    )

    angle = AngleDirection(az, el)
    b = _response_columns(cb, geom, np.array([az]), np.array([el]))[:, 0]
    bb = np.vdot(b, b).real
    gain = np.vdot(b, b_bar) / bb if bb > 0 else 0.0 + 0.0j
    residual = float(np.linalg.norm(b_bar - gain * b) ** 2)
    return PseudoTrueEstimate(gain=complex(gain), angle=angle, residual=residual)


def snr_loss(delta_theta: float, n_elements: int, theta: float = 0.0) -> float:
    """SNR degradation, in positive dB, from steering a ULA off by delta_theta.

    Angles in radians; the array has half-wavelength spacing.
    """
    if n_elements < 1:
        raise ValueError("need at least one element")
    n = np.arange(n_elements)
    phase = np.pi * n * (math.sin(theta) - math.sin(theta + delta_theta))
    factor = abs(np.exp(1j * phase).mean()) ** 2
    if factor == 0:
        return math.inf
    return -10.0 * math.log10(factor)


def position_error(distance: float, theta: float, delta_theta: float) -> float:
    """Cross-range position error r * |tan(theta + dtheta) - tan(theta)|, meters."""
    return distance * abs(math.tan(theta + delta_theta) - math.tan(theta))
