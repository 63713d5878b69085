"""Calibration quality metrics: response similarity, angle bias, gain loss.

Three complementary views of a calibrated codebook:

* ``response_similarity`` compares Frobenius-normalized pattern matrices and
  lands in [0, 1]; it scores raw pattern fidelity.
* ``angle_error`` measures sensing quality: the RMS offset between each
  evaluation angle and the pseudo-true angle the model would converge to when
  fed the ground-truth response at that angle.
* ``gain_loss`` scores communications: beams are selected with the model
  under evaluation, cashed out on the ground-truth pattern, and referenced to
  what an ideal-hardware codebook would deliver.  Reported in dB (<= 0 when
  real hardware cannot beat the ideal reference).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .arrays import AngleDirection, ArrayGeometry, Codebook, beam_response_matrix
from .estimation import pseudo_true


@dataclass
class EvaluationAngleSet:
    """Angles (and optional weights) over which metrics are evaluated."""

    azimuth: np.ndarray  # (S,) radians
    elevation: np.ndarray  # (S,) radians
    weights: np.ndarray | None = None  # (S,) non-negative, default all ones

    def __post_init__(self):
        self.azimuth = np.atleast_1d(np.asarray(self.azimuth, dtype=float))
        self.elevation = np.atleast_1d(np.asarray(self.elevation, dtype=float))
        if self.azimuth.shape != self.elevation.shape:
            raise ValueError("azimuth and elevation must have equal length")
        if self.azimuth.size < 1:
            raise ValueError("need at least one evaluation angle")
        if self.weights is None:
            self.weights = np.ones_like(self.azimuth)
        else:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.azimuth.shape or np.any(self.weights < 0):
                raise ValueError("weights must be non-negative, one per angle")

    @property
    def size(self) -> int:
        return self.azimuth.size

    @property
    def angles(self) -> list[AngleDirection]:
        return [AngleDirection(a, e) for a, e in zip(self.azimuth, self.elevation)]

    @classmethod
    def from_degrees(cls, az_deg, el_deg=None, weights=None) -> "EvaluationAngleSet":
        az = np.deg2rad(np.atleast_1d(np.asarray(az_deg, dtype=float)))
        el = np.zeros_like(az) if el_deg is None else np.deg2rad(np.atleast_1d(el_deg))
        return cls(az, el, weights)

    def describe(self) -> dict:
        return {
            "count": int(self.size),
            "azimuth_deg": np.rad2deg(self.azimuth).tolist(),
            "elevation_deg": np.rad2deg(self.elevation).tolist(),
        }


def default_eval_set_2d() -> EvaluationAngleSet:
    """81 azimuth angles, 1 degree apart, across -40..40 deg at zero elevation."""
    return EvaluationAngleSet.from_degrees(np.linspace(-40.0, 40.0, 81))


def default_eval_set_3d() -> EvaluationAngleSet:
    """119 angles on a 17 x 7 az/el grid over -40..40 x -40..10 deg."""
    az = np.linspace(-40.0, 40.0, 17)
    el = np.linspace(-40.0, 10.0, 7)
    azg, elg = np.meshgrid(az, el, indexing="ij")
    return EvaluationAngleSet.from_degrees(azg.ravel(), elg.ravel())


@dataclass
class MetricReport:
    """One row of the calibration scoreboard."""

    model: str
    method: str
    response_similarity: float
    angle_error_rms_deg: float
    angle_error_mean_square_deg2: float
    gain_loss_db: float
    eval_set: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "method": self.method,
            "response_similarity": self.response_similarity,
            "angle_error_rms_deg": self.angle_error_rms_deg,
            "angle_error_mean_square_deg2": self.angle_error_mean_square_deg2,
            "gain_loss_db": self.gain_loss_db,
            "eval_set": self.eval_set,
        }

    @staticmethod
    def csv_header() -> str:
        return "model,method,response_similarity,angle_error_rms_deg,gain_loss_db"

    def csv_row(self) -> str:
        return (
            f"{self.model},{self.method},{self.response_similarity:.6f},"
            f"{self.angle_error_rms_deg:.6f},{self.gain_loss_db:.6f}"
        )


def response_similarity(b_hat: np.ndarray, b_bar: np.ndarray, mode: str = "magnitude") -> float:
    """One minus half the Frobenius distance of the normalized patterns.

    "magnitude" compares entry magnitudes (power-spectrum style, phase
    blind); "complex" compares the full complex matrices.
    """
    b_hat = np.asarray(b_hat)
    b_bar = np.asarray(b_bar)
    if b_hat.shape != b_bar.shape:
        raise ValueError("pattern matrices must have identical shape")
    if mode not in ("magnitude", "complex"):
        raise ValueError("mode must be 'magnitude' or 'complex'")
    x = np.abs(b_hat) if mode == "magnitude" else b_hat.astype(np.complex128)
    y = np.abs(b_bar) if mode == "magnitude" else b_bar.astype(np.complex128)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("patterns must be nonzero")
    return float(1.0 - 0.5 * np.linalg.norm(x / nx - y / ny))


def pseudo_true_biases(
    cb: Codebook,
    geom: ArrayGeometry,
    truth_responses: np.ndarray,
    eval_set: EvaluationAngleSet,
    **pseudo_true_kwargs,
) -> np.ndarray:
    """Per-angle pseudo-true offsets [(d_az, d_el), ...] in radians, shape (S, 2)."""
    truth_responses = np.asarray(truth_responses, dtype=np.complex128)
    if truth_responses.shape != (cb.n_codewords, eval_set.size):
        raise ValueError("truth responses must have shape (G, S)")
    out = np.empty((eval_set.size, 2))
    for s in range(eval_set.size):
        init = AngleDirection(eval_set.azimuth[s], eval_set.elevation[s])
        try:
            est = pseudo_true(truth_responses[:, s], cb, geom, init, **pseudo_true_kwargs)
        except Exception as exc:
            raise RuntimeError(f"pseudo-true search failed at evaluation angle {s}") from exc
        out[s, 0] = est.angle.azimuth - init.azimuth
        out[s, 1] = est.angle.elevation - init.elevation
    return out


def angle_error(
    cb: Codebook,
    geom: ArrayGeometry,
    truth_responses: np.ndarray,
    eval_set: EvaluationAngleSet,
    **pseudo_true_kwargs,
) -> float:
    """RMS pseudo-true angle bias of the model, in degrees.

    The underlying mean-square error (degrees squared) is the weighted mean
    over the evaluation set of the squared az/el offset.
    """
    return math.sqrt(
        angle_error_mean_square(cb, geom, truth_responses, eval_set, **pseudo_true_kwargs)
    )


def angle_error_mean_square(
    cb: Codebook,
    geom: ArrayGeometry,
    truth_responses: np.ndarray,
    eval_set: EvaluationAngleSet,
    **pseudo_true_kwargs,
) -> float:
    biases = np.rad2deg(
        pseudo_true_biases(cb, geom, truth_responses, eval_set, **pseudo_true_kwargs)
    )
    sq = np.sum(biases**2, axis=1)
    w = eval_set.weights
    return float(np.sum(w * sq) / np.sum(w))


def gain_loss(
    calibrated: np.ndarray,
    truth: np.ndarray,
    ideal: np.ndarray,
    eval_set: EvaluationAngleSet | None = None,
) -> float:
    """Best-beam gain of the calibrated selection relative to ideal hardware, dB.

    All three pattern matrices are (G, S) over the same evaluation angles.
    Per angle, the serving beam is chosen by magnitude argmax of the
    calibrated pattern (ties to the lowest beam index) and scored on the
    ground-truth pattern; the reference is the ideal pattern's own best beam.
    Angles with a zero reference gain are excluded with a warning.
    """
    calibrated = np.asarray(calibrated)
    truth = np.asarray(truth)
    ideal = np.asarray(ideal)
    if not (calibrated.shape == truth.shape == ideal.shape):
        raise ValueError("pattern matrices must share one (G, S) shape")
    sel_cal = np.argmax(np.abs(calibrated), axis=0)
    sel_ideal = np.argmax(np.abs(ideal), axis=0)
    cols = np.arange(truth.shape[1])
    achieved = np.abs(truth[sel_cal, cols]) ** 2
    reference = np.abs(ideal[sel_ideal, cols]) ** 2
    ok = reference > 0
    skipped = int(np.size(ok) - np.count_nonzero(ok))
    if skipped:
        warnings.warn(f"gain_loss: excluded {skipped} angle(s) with zero reference gain")
    if not np.any(ok):
        raise ValueError("all evaluation angles have zero reference gain")
    ratios = achieved[ok] / reference[ok]
    if eval_set is not None:
        w = eval_set.weights[ok]
        mean_ratio = float(np.sum(w * ratios) / np.sum(w))
    else:
        mean_ratio = float(np.mean(ratios))
    return 10.0 * math.log10(mean_ratio)


def evaluate_codebook(
    cb: Codebook,
    geom: ArrayGeometry,
    truth_codebook: Codebook,
    ideal_reference: Codebook,
    eval_set: EvaluationAngleSet,
    model: str = "",
    method: str = "",
    similarity_mode: str = "magnitude",
) -> MetricReport:
    """Score a codebook against synthetic ground truth on all three metrics.

    The ideal reference codebook is normalized per codeword so the gain-loss
    denominator shares the truth codebook's power constraint.
    """
    truth_resp = beam_response_matrix(truth_codebook, geom, (eval_set.azimuth, eval_set.elevation))
    model_resp = beam_response_matrix(cb, geom, (eval_set.azimuth, eval_set.elevation))
    ideal_resp = beam_response_matrix(
        ideal_reference.normalized_per_codeword(), geom, (eval_set.azimuth, eval_set.elevation)
    )
    ms = angle_error_mean_square(cb, geom, truth_resp, eval_set)
    return MetricReport(
        model=model,
        method=method,
        response_similarity=response_similarity(model_resp, truth_resp, similarity_mode),
        angle_error_rms_deg=math.sqrt(ms),
        angle_error_mean_square_deg2=ms,
        gain_loss_db=gain_loss(model_resp, truth_resp, ideal_resp, eval_set),
        eval_set={"count": int(eval_set.size)},
    )
