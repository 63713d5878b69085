"""Codebook calibration from pilot measurements.

The data model is Y = conj(W) @ A @ diag(gamma) + noise, with W the (G, N)
codeword-major entry matrix, A the (N, T) steering matrix of the known sample
directions, and gamma the per-sample complex channel gains.  Calibration
estimates some subset of {W, gamma, beamforming angles, element exponent}
depending on the model:

* m1: nominal codebook kept, gains fit in closed form (baseline).
* m2: nominal beam directions re-fit per codeword, plus gains.
* m3: full codebook fit with gains structured as known path gain times a
  cos^beta element pattern (controlled-environment calibration).
* m4: joint codebook and gain fit, by alternating optimization or by
  gradient descent on either the residual loss or the projection-matching
  angle loss.

Two losses drive the solvers.  The residual loss is the mean squared
Frobenius misfit per sample.  The angle loss compares, for every
(sample t, anchor s) pair, the model's normalized projection
b_t^H y_s / ||b_t|| against the data-only reference y_t^H y_s / ||y_t||;
matching these projections aligns exactly the objective an angle estimator
maximizes.  Gradients of both losses are taken with respect to conjugated
parameters (Wirtinger convention), which for a real loss is the direction of
steepest ascent.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .arrays import (
    ArrayGeometry,
    BeamformingAngles,
    Codebook,
    NormMode,
    element_pattern,
    ideal_codebook,
    steering_matrix,
)
from .metrics import EvaluationAngleSet
from .synth import MeasurementSet

MODELS = ("m1", "m2", "m3", "m4")
METHODS = ("ao", "gd-rel", "gd-ael")

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class CalibrationDivergedError(RuntimeError):
    """Loss became non-finite; carries the last state for post-mortem."""

    def __init__(self, message: str, state: "CalibrationState"):
        super().__init__(message)
        self.state = state


@dataclass
class SolverConfig:
    """Solver hyperparameters for the m4 methods (and iteration caps for m2/m3)."""

    method: str = "gd-rel"
    learning_rate: float = 0.02
    batch_size: int | None = None  # None: full batch
    max_iters: int | None = None  # None: 200 for AO, 2000 for GD
    seed: int = 0
    convergence_tol: float = 1e-8
    convergence_patience: int = 20
    anchor_indices: np.ndarray | None = None  # sample indices used as AEL anchors
    update_gamma: bool = True  # gd-ael also steps the gains

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")

    def resolved_max_iters(self) -> int:
        if self.max_iters is not None:
            return self.max_iters
        return 200 if self.method == "ao" else 2000


@dataclass
class CalibrationState:
    """Solver output: unit-norm codebook, per-sample gains, and the loss trace."""

    codebook: Codebook
    gains: np.ndarray
    model: str = "m4"
    method: str = ""
    loss_trace: list[tuple[int, float, str]] = field(default_factory=list)
    beamforming_angles: BeamformingAngles | None = None  # m2 estimate
    beta: float | None = None  # m3 estimate

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.complex128)

    def record(self, iteration: int, loss: float, kind: str) -> None:
        if self.loss_trace and iteration <= self.loss_trace[-1][0]:
            raise ValueError("loss trace iterations must increase strictly")
        self.loss_trace.append((iteration, float(loss), kind))

    def final_loss(self) -> float:
        return self.loss_trace[-1][1] if self.loss_trace else math.nan


# ---------------------------------------------------------------------------
# Losses and closed-form updates
# ---------------------------------------------------------------------------


def model_responses(entries: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Unit-gain model responses conj(W) @ A, shape (G, T)."""
    return entries.conj() @ a


def rel_loss(y: np.ndarray, entries: np.ndarray, gamma: np.ndarray, a: np.ndarray) -> float:
    """Mean per-sample squared residual ||Y - conj(W) A diag(gamma)||_F^2 / T."""
    resid = y - model_responses(entries, a) * gamma[None, :]
    return float(np.sum(np.abs(resid) ** 2) / y.shape[1])


def update_gamma_closed_form(y: np.ndarray, entries: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Per-sample least-squares gains b_t^H y_t / b_t^H b_t, independent in t."""
    b = model_responses(entries, a)
    den = np.sum(np.abs(b) ** 2, axis=0)
    num = np.sum(b.conj() * y, axis=0)
    gamma = np.zeros_like(num)
    ok = den > 0
    gamma[ok] = num[ok] / den[ok]
    if not np.all(ok):
        warnings.warn(f"{np.count_nonzero(~ok)} sample(s) have zero-norm model beams; gain set to 0")
    return gamma


@dataclass
class TrustRegionUpdate:
    entries: np.ndarray  # (G, N) codewords on the unit sphere
    lambdas: np.ndarray  # (G,) multipliers of the norm constraint


def _norm_on_sphere(eigvals: np.ndarray, u2: np.ndarray, lam: float) -> float:
    return float(np.sqrt(np.sum(u2 / (eigvals + lam) ** 2)))


def update_w_trust_region(
    y: np.ndarray,
    gamma: np.ndarray,
    a: np.ndarray,
    prev_entries: np.ndarray | None = None,
    norm_tol: float = 1e-12,
    max_bisect: int = 200,
) -> TrustRegionUpdate:
    """Exact unit-norm-constrained least-squares update of every codeword.

    Each codeword solves min ||y_g - w^H A diag(gamma)||^2 subject to
    ||w|| = 1.  Stationarity gives (Q + lambda I) w = b_g with
    Q = B B^H, B = A diag(gamma), b_g = B conj(y_g); since
    ||(Q + lambda I)^{-1} b_g|| decreases strictly in lambda, the multiplier
    is found by bisection on the shared eigenbasis of Q (one O(N) evaluation
    per step).  Codewords whose right-hand side vanishes keep their previous
    direction (or a basis vector) and are flagged.
    """
    g_total, t_total = y.shape
    b_mat = a * gamma[None, :]
    q = b_mat @ b_mat.conj().T
    eigvals, eigvecs = np.linalg.eigh(q)
    eigvals = np.maximum(eigvals, 0.0)
    lam_min = eigvals[0]
    cutoff = max(eigvals[-1], 0.0) * eigvals.size * np.finfo(float).eps

    rhs = b_mat @ y.conj().T  # (N, G); column g is b_g
    scale = np.max(np.abs(rhs)) if rhs.size else 0.0

    entries = np.empty((g_total, a.shape[0]), dtype=np.complex128)
    lambdas = np.zeros(g_total)
    for g in range(g_total):
        bg = rhs[:, g]
        if np.linalg.norm(bg) <= 1e-15 * max(scale, 1e-300):
            warnings.warn(f"codeword {g}: degenerate update (zero right-hand side)")
            if prev_entries is not None:
                w = prev_entries[g] / np.linalg.norm(prev_entries[g])
            else:
                w = np.zeros(a.shape[0], dtype=np.complex128)
                w[0] = 1.0
            entries[g] = w
            lambdas[g] = 0.0
            continue

        ut = eigvecs.conj().T @ bg
        u2 = np.abs(ut) ** 2
        active = eigvals > cutoff
        ls_norm2 = float(np.sum(u2[active] / eigvals[active] ** 2)) if np.any(active) else math.inf
        ls_on_sphere = math.isfinite(ls_norm2) and abs(math.sqrt(ls_norm2) - 1.0) <= norm_tol

        if ls_on_sphere:
            coef = np.zeros_like(ut)
            coef[active] = ut[active] / eigvals[active]
            lam = 0.0
        elif not math.isfinite(ls_norm2) or ls_norm2 > 1.0:
            # Constraint active from outside: positive multiplier.
            hi = float(np.linalg.norm(ut)) + lam_min
            lo = 0.0
            for _ in range(max_bisect):
                lam = 0.5 * (lo + hi)
                f = _norm_on_sphere(eigvals, u2, lam)
                if abs(f - 1.0) <= norm_tol:
                    break
                if f > 1.0:
                    lo = lam
                else:
                    hi = lam
            coef = ut / (eigvals + lam)
        else:
            # Least-squares point is inside the sphere: the boundary optimum
            # needs a negative multiplier in (-lam_min, 0).
            probe = -lam_min + max(lam_min, 1.0) * 1e-13
            if _norm_on_sphere(eigvals, u2, probe) <= 1.0:
                # Hard case: no boundary crossing; pad with the bottom eigenvector.
                coef = ut / (eigvals - lam_min + max(lam_min, 1.0) * 1e-13)
                deficit = 1.0 - float(np.sum(np.abs(coef) ** 2))
                pad = math.sqrt(max(deficit, 0.0))
                coef[0] += pad * (1.0 if ut[0] == 0 else ut[0] / abs(ut[0]))
                lam = -lam_min
            else:
                lo, hi = probe, 0.0  # f(lo) > 1 >= f(hi)
                for _ in range(max_bisect):
                    lam = 0.5 * (lo + hi)
                    f = _norm_on_sphere(eigvals, u2, lam)
                    if abs(f - 1.0) <= norm_tol:
                        break
                    if f > 1.0:
                        lo = lam
                    else:
                        hi = lam
                coef = ut / (eigvals + lam)
        entries[g] = eigvecs @ coef
        lambdas[g] = lam
    return TrustRegionUpdate(entries=entries, lambdas=lambdas)


# ---------------------------------------------------------------------------
# Wirtinger gradients
# ---------------------------------------------------------------------------


def rel_gradient_w(
    y: np.ndarray,
    entries: np.ndarray,
    gamma: np.ndarray,
    a: np.ndarray,
    batch: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the residual loss w.r.t. the conjugated codebook, (G, N).

    Averaged over the batch (all samples when ``batch`` is None), matching
    the loss normalization on that batch.
    """
    if batch is None:
        batch = np.arange(y.shape[1])
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    yb = y[:, batch]
    ab = a[:, batch]
    gb = gamma[batch]
    resid = yb - model_responses(entries, ab) * gb[None, :]
    return -(resid.conj() * gb[None, :]) @ ab.T / batch.size


def rel_gradient_gamma(
    y: np.ndarray,
    entries: np.ndarray,
    gamma: np.ndarray,
    a: np.ndarray,
    t: int | None = None,
):
    """Gradient of the residual loss w.r.t. conjugated gains.

    Returns the full (T,) vector, or a single complex value for sample ``t``.
    Uses the 1/T loss normalization.
    """
    b = model_responses(entries, a)
    resid = y - b * gamma[None, :]
    grad = -np.sum(b.conj() * resid, axis=0) / y.shape[1]
    return grad if t is None else complex(grad[t])


class _AelWorkspace:
    """Data-only AEL terms, computed once and reused across iterations."""

    def __init__(self, y: np.ndarray, anchors, weights):
        self.anchors = np.asarray(anchors, dtype=int)
        if self.anchors.size == 0:
            raise ValueError("need at least one anchor sample")
        self.ys = y[:, self.anchors]
        self.ys_conj = self.ys.conj()
        self.y_norm = np.linalg.norm(y, axis=0)
        self.data_ok = self.y_norm > 0
        safe_yn = np.where(self.data_ok, self.y_norm, 1.0)
        self.proj_data = (y.conj().T @ self.ys) / safe_yn[:, None]
        if weights is None:
            self.w_row = np.ones(self.anchors.size)
        else:
            self.w_row = np.asarray(weights, dtype=float)
            if self.w_row.shape != (self.anchors.size,):
                raise ValueError("need one weight per anchor")
        self.t_total = y.shape[1]


def _ael_terms(ws: _AelWorkspace, entries, gamma, a):
    """Model-side AEL intermediates; zero-norm samples are masked out."""
    b_unit = model_responses(entries, a)  # (G, T), unit-gain responses
    q = np.abs(gamma) * np.linalg.norm(b_unit, axis=0)  # ||gamma_t * b_t||
    all_ok = bool(np.all(ws.data_ok)) and bool(np.all(q > 0))
    if all_ok:
        ok = np.ones(ws.t_total, dtype=bool)
        safe_q = q
        proj_model = (gamma.conj() / q)[:, None] * (b_unit.conj().T @ ws.ys)
        err = proj_model - ws.proj_data
        return q, safe_q, ok, proj_model, err
    ok = (q > 0) & ws.data_ok
    warnings.warn(
        f"angle loss: {np.count_nonzero(~ok)} sample(s) with zero beam or "
        "observation norm excluded"
    )
    safe_q = np.where(ok, q, 1.0)
    proj_model = (gamma.conj() / safe_q)[:, None] * (b_unit.conj().T @ ws.ys)
    err = np.where(ok[:, None], proj_model - ws.proj_data, 0.0)
    return q, safe_q, ok, proj_model, err


def ael_loss(
    y: np.ndarray,
    entries: np.ndarray,
    gamma: np.ndarray,
    a: np.ndarray,
    anchors,
    weights: np.ndarray | None = None,
) -> float:
    """Projection-matching angle loss averaged over samples x anchors."""
    ws = _AelWorkspace(y, anchors, weights)
    _, _, _, _, err = _ael_terms(ws, entries, gamma, a)
    return float(np.sum(ws.w_row[None, :] * np.abs(err) ** 2) / (ws.t_total * ws.anchors.size))


def _ael_core(ws: _AelWorkspace, entries, gamma, a, batch):
    """Full-set loss plus batch-normalized gradients from one shared evaluation."""
    q, safe_q, ok, proj_model, err = _ael_terms(ws, entries, gamma, a)
    t_total = ws.t_total
    err2 = err.real**2 + err.imag**2
    loss = float(np.sum(ws.w_row[None, :] * err2) / (t_total * ws.anchors.size))
    if batch is None:
        use = ok
        norm = t_total * ws.anchors.size
    else:
        batch = np.asarray(batch, dtype=int)
        in_batch = np.zeros(t_total, dtype=bool)
        in_batch[batch] = True
        use = ok & in_batch
        norm = batch.size * ws.anchors.size

    all_used = bool(np.all(use))
    uniform_w = bool(np.all(ws.w_row == 1.0))
    werr = err if uniform_w else err * ws.w_row[None, :]

    # First term: sum over (t, s) of (gamma_t / q_t) err a_t y_s^H, transposed
    # into codeword-major layout.
    coef = gamma / safe_q if all_used else np.where(use, gamma / safe_q, 0.0)
    c_mat = coef[:, None] * werr  # (T, S)
    grad_w = (ws.ys_conj @ c_mat.T) @ a.T

    # Second term: per-sample curvature of the normalization.
    re_part = np.sum(np.real(werr * proj_model.conj()), axis=1)
    c2 = (np.abs(gamma) ** 2 / safe_q**2) * re_part
    if not all_used:
        c2 = np.where(use, c2, 0.0)
    grad_w -= entries @ ((a.conj() * c2[None, :]) @ a.T)
    grad_w /= norm

    gamma_ok = use & (np.abs(gamma) > 0)
    if np.any(use & ~gamma_ok):
        warnings.warn("angle loss: zero-gain sample(s) skipped in the gain gradient")
    imag_part = np.sum(ws.w_row[None, :] * np.imag(err.conj() * proj_model), axis=1)
    grad_gamma = np.zeros(t_total, dtype=np.complex128)
    grad_gamma[gamma_ok] = 1j * imag_part[gamma_ok] / (gamma.conj()[gamma_ok] * norm)
    return loss, grad_w, grad_gamma


def ael_gradients(
    y: np.ndarray,
    entries: np.ndarray,
    gamma: np.ndarray,
    a: np.ndarray,
    anchors,
    weights: np.ndarray | None = None,
    batch: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Wirtinger gradients of the angle loss w.r.t. (conj codebook, conj gains).

    Gain gradients are undefined where gamma vanishes; those samples are
    skipped with a warning and contribute zero.  With ``batch`` set, only the
    selected samples contribute and the gradient is normalized over the batch.
    """
    ws = _AelWorkspace(y, anchors, weights)
    _, grad_w, grad_gamma = _ael_core(ws, entries, gamma, a, batch)
    return grad_w, grad_gamma


# ---------------------------------------------------------------------------
# Anchors and initialization
# ---------------------------------------------------------------------------


def anchor_indices_for(measurements: MeasurementSet, eval_set: EvaluationAngleSet) -> np.ndarray:
    """Indices of the measurement samples nearest each requested anchor angle."""
    pts = np.column_stack([measurements.azimuth, measurements.elevation])
    req = np.column_stack([eval_set.azimuth, eval_set.elevation])
    idx = np.empty(req.shape[0], dtype=int)
    for i, p in enumerate(req):
        idx[i] = int(np.argmin(np.sum((pts - p[None, :]) ** 2, axis=1)))
    return np.unique(idx)


def normalized_ideal_codebook(geom: ArrayGeometry, angles: BeamformingAngles) -> Codebook:
    return ideal_codebook(geom, angles).normalized_per_codeword()


def initial_state(
    measurements: MeasurementSet,
    nominal_angles: BeamformingAngles,
    model: str = "m4",
) -> CalibrationState:
    """Manufacturer starting point: nominal codebook plus closed-form gains."""
    cb = normalized_ideal_codebook(measurements.geom, nominal_angles)
    a = steering_matrix(measurements.geom, (measurements.azimuth, measurements.elevation))
    gamma = update_gamma_closed_form(measurements.observations, cb.entries, a)
    return CalibrationState(
        codebook=cb, gains=gamma, model=model, beamforming_angles=nominal_angles
    )


def _normalize_rows(entries: np.ndarray) -> np.ndarray | None:
    """Scale rows to unit norm; None signals a numerically destroyed step."""
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.linalg.norm(entries, axis=1, keepdims=True)
        if not np.all(np.isfinite(norms)) or np.any(norms == 0):
            return None
        out = entries / norms
    if not np.all(np.isfinite(out.view(float))):
        return None
    return out


class _Convergence:
    """Relative-change stopping rule with patience."""

    def __init__(self, tol: float, patience: int):
        self.tol = tol
        self.patience = patience
        self.prev: float | None = None
        self.streak = 0

    def update(self, loss: float) -> bool:
        if self.prev is not None:
            rel = abs(loss - self.prev) / max(abs(self.prev), 1e-300)
            self.streak = self.streak + 1 if rel < self.tol else 0
        self.prev = loss
        return self.streak >= self.patience


def _check_finite(loss: float, state: CalibrationState) -> None:
    if not math.isfinite(loss):
        raise CalibrationDivergedError("loss became non-finite; aborting with trace", state)


def _golden_min(fun, lo: float, hi: float, tol: float) -> float:
    a_, b_ = lo, hi
    c = b_ - _GOLDEN * (b_ - a_)
    d = a_ + _GOLDEN * (b_ - a_)
    fc, fd = fun(c), fun(d)
    while b_ - a_ > tol:
        if fc <= fd:
            b_, d, fd = d, c, fc
            c = b_ - _GOLDEN * (b_ - a_)
            fc = fun(c)
        else:
            a_, c, fc = c, d, fd
            d = a_ + _GOLDEN * (b_ - a_)
            fd = fun(d)
    return 0.5 * (a_ + b_)


# ---------------------------------------------------------------------------
# Model drivers
# ---------------------------------------------------------------------------


def _calibrate_m1(y, a, geom, nominal_angles, config) -> CalibrationState:
    cb = normalized_ideal_codebook(geom, nominal_angles)
    gamma = update_gamma_closed_form(y, cb.entries, a)
    state = CalibrationState(
        codebook=cb, gains=gamma, model="m1", method="closed-form",
        beamforming_angles=nominal_angles,
    )
    state.record(0, rel_loss(y, cb.entries, gamma, a), "rel")
    return state


def _calibrate_m2(y, a, geom, nominal_angles, config) -> CalibrationState:
    """Re-fit each codeword's steering direction by per-axis golden search."""
    window = math.radians(2.5)
    tol = math.radians(0.01)
    limit = math.radians(89.5)
    sqrt_n = math.sqrt(geom.n_elements)
    phi = np.array([[d.azimuth, d.elevation] for d in nominal_angles.directions])
    search_el = geom.rows > 1

    def codeword(az, el):
        return steering_matrix(geom, (np.array([az]), np.array([el])))[:, 0] / sqrt_n

    def build_entries():
        return np.vstack([codeword(az, el) for az, el in phi])

    entries = build_entries()
    gamma = update_gamma_closed_form(y, entries, a)
    state = CalibrationState(
        codebook=Codebook(entries, NormMode.PER_CODEWORD_UNIT_NORM),
        gains=gamma, model="m2", method="coordinate-descent",
    )
    state.record(0, rel_loss(y, entries, gamma, a), "rel")
    stop = _Convergence(config.convergence_tol, config.convergence_patience)
    max_outer = config.max_iters if config.max_iters is not None else 50

    for it in range(1, max_outer + 1):
        b_scaled = a * gamma[None, :]
        for g in range(phi.shape[0]):
            yg = y[g, :]

            def row_misfit(az, el):
                model = codeword(az, el).conj() @ b_scaled
                return float(np.sum(np.abs(yg - model) ** 2))

            az0, el0 = phi[g]
            lo = max(az0 - window, -limit)
            hi = min(az0 + window, limit)
            phi[g, 0] = _golden_min(lambda x: row_misfit(x, phi[g, 1]), lo, hi, tol)
            if search_el:
                lo = max(el0 - window, -limit)
                hi = min(el0 + window, limit)
                phi[g, 1] = _golden_min(lambda x: row_misfit(phi[g, 0], x), lo, hi, tol)
        entries = build_entries()
        gamma = update_gamma_closed_form(y, entries, a)
        loss = rel_loss(y, entries, gamma, a)
        state.codebook = Codebook(entries, NormMode.PER_CODEWORD_UNIT_NORM)
        state.gains = gamma
        state.record(it, loss, "rel")
        _check_finite(loss, state)
        if stop.update(loss):
            break
    state.beamforming_angles = BeamformingAngles.from_degrees(
        [(math.degrees(az), math.degrees(el)) for az, el in phi]
    )
    return state


def _calibrate_m3(y, a, geom, measurements, init_entries, config) -> CalibrationState:
    """Alternate exact codebook solves with a 1-D search over the element exponent."""
    if measurements.los_path_gains is None:
        raise ValueError("m3 needs per-sample path gains (controlled-environment data)")
    base = measurements.los_path_gains
    angles = (measurements.azimuth, measurements.elevation)

    def gains_for(beta):
        return base * element_pattern(angles, beta)

    beta = 1.0
    entries = init_entries.copy()
    gamma = gains_for(beta)
    state = CalibrationState(
        codebook=Codebook(entries.copy(), NormMode.PER_CODEWORD_UNIT_NORM),
        gains=gamma, model="m3", method="ao", beta=beta,
    )
    state.record(0, rel_loss(y, entries, gamma, a), "rel")
    stop = _Convergence(config.convergence_tol, config.convergence_patience)
    max_outer = config.max_iters if config.max_iters is not None else 50

    for it in range(1, max_outer + 1):
        entries = update_w_trust_region(y, gamma, a, prev_entries=entries).entries
        beta = _golden_min(
            lambda b: rel_loss(y, entries, gains_for(b), a), 0.05, 8.0, 1e-4
        )
        gamma = gains_for(beta)
        loss = rel_loss(y, entries, gamma, a)
        state.codebook = Codebook(entries.copy(), NormMode.PER_CODEWORD_UNIT_NORM)
        state.gains = gamma
        state.beta = beta
        state.record(it, loss, "rel")
        _check_finite(loss, state)
        if stop.update(loss):
            break
    return state


def _calibrate_m4_ao(y, a, entries, gamma, config) -> CalibrationState:
    state = CalibrationState(
        codebook=Codebook(entries.copy(), NormMode.PER_CODEWORD_UNIT_NORM),
        gains=gamma.copy(), model="m4", method="ao",
    )
    state.record(0, rel_loss(y, entries, gamma, a), "rel")
    stop = _Convergence(config.convergence_tol, config.convergence_patience)
    for it in range(1, config.resolved_max_iters() + 1):
        gamma = update_gamma_closed_form(y, entries, a)
        entries = update_w_trust_region(y, gamma, a, prev_entries=entries).entries
        loss = rel_loss(y, entries, gamma, a)
        state.codebook = Codebook(entries.copy(), NormMode.PER_CODEWORD_UNIT_NORM)
        state.gains = gamma
        state.record(it, loss, "rel")
        _check_finite(loss, state)
        if stop.update(loss):
            break
    return state


def _epoch_batches(t_total: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= t_total:
        while True:
            yield np.arange(t_total)
    else:
        while True:
            perm = rng.permutation(t_total)
            for start in range(0, t_total, batch_size):
                chunk = perm[start : start + batch_size]
                if chunk.size:
                    yield chunk


def _data_scale(y: np.ndarray) -> float:
    """RMS per-sample observation norm; GD runs on data divided by this.

    Gradient magnitudes (hence usable learning rates) depend on the raw
    measurement scale, which varies over many orders of magnitude with
    transmit power and range.  Normalizing to unit mean sample power makes
    the stock learning rates meaningful for any scenario; the mapping is
    exact because gains and loss are scale-equivariant.
    """
    scale = float(np.linalg.norm(y) / math.sqrt(y.shape[1]))
    if scale == 0:
        raise ValueError("measurements are identically zero")
    return scale


def _calibrate_m4_gd_rel(y, a, entries, gamma, config) -> CalibrationState:
    scale = _data_scale(y)
    yn = y / scale
    gamma = gamma / scale
    raw = scale**2  # losses are reported in raw measurement units
    state = CalibrationState(
        codebook=Codebook(entries.copy(), NormMode.PER_CODEWORD_UNIT_NORM),
        gains=gamma * scale, model="m4", method="gd-rel",
    )
    state.record(0, raw * rel_loss(yn, entries, gamma, a), "rel")
    stop = _Convergence(config.convergence_tol, config.convergence_patience)
    rng = np.random.default_rng(config.seed)
    batches = _epoch_batches(y.shape[1], config.batch_size, rng)
    for it in range(1, config.resolved_max_iters() + 1):
        batch = next(batches)
        grad = rel_gradient_w(yn, entries, gamma, a, batch)
        stepped = _normalize_rows(entries - config.learning_rate * grad)
        if stepped is None:
            raise CalibrationDivergedError(
                "codebook step overflowed; learning rate too large", state
            )
        entries = stepped
        gamma = update_gamma_closed_form(yn, entries, a)
        loss = rel_loss(yn, entries, gamma, a)
        state.codebook = Codebook(entries.copy(), NormMode.PER_CODEWORD_UNIT_NORM)
        state.gains = gamma * scale
        state.record(it, raw * loss, "rel")
        _check_finite(loss, state)
        if stop.update(loss):
            break
    return state


def _calibrate_m4_gd_ael(y, a, entries, gamma, config) -> CalibrationState:
    if config.anchor_indices is None:
        raise ValueError("gd-ael needs anchor_indices in the solver config")
    anchors = np.asarray(config.anchor_indices, dtype=int)
    scale = _data_scale(y)
    yn = y / scale
    gamma = gamma / scale
    raw = scale**2
    state = CalibrationState(
        codebook=Codebook(entries.copy(), NormMode.PER_CODEWORD_UNIT_NORM),
        gains=gamma * scale, model="m4", method="gd-ael",
    )
    stop = _Convergence(config.convergence_tol, config.convergence_patience)
    rng = np.random.default_rng(config.seed)
    batches = _epoch_batches(y.shape[1], config.batch_size, rng)
    ws = _AelWorkspace(yn, anchors, None)
    # One shared-terms evaluation per iteration: the loss recorded for step k
    # is computed together with the gradient taken at step k's starting point.
    last_it = 0
    full_batch = config.batch_size is None or config.batch_size >= y.shape[1]
    for it in range(1, config.resolved_max_iters() + 1):
        batch = None if full_batch else next(batches)
        loss_here, grad_w, grad_gamma = _ael_core(ws, entries, gamma, a, batch)
        state.record(it - 1, raw * loss_here, "ael")
        state.codebook = Codebook(entries, NormMode.PER_CODEWORD_UNIT_NORM)
        state.gains = gamma * scale
        _check_finite(loss_here, state)
        stepped = _normalize_rows(entries - config.learning_rate * grad_w)
        if stepped is None:
            raise CalibrationDivergedError(
                "codebook step overflowed; learning rate too large", state
            )
        entries = stepped
        if config.update_gamma:
            gamma = gamma - config.learning_rate * grad_gamma
        last_it = it
        if stop.update(loss_here):
            break
    _, _, _, _, err = _ael_terms(ws, entries, gamma, a)
    final = float(np.sum(ws.w_row[None, :] * np.abs(err) ** 2) / (ws.t_total * ws.anchors.size))
    state.codebook = Codebook(entries, NormMode.PER_CODEWORD_UNIT_NORM)
    state.gains = gamma * scale
    state.record(last_it, raw * final, "ael")
    _check_finite(final, state)
    return state


def calibrate(
    measurements: MeasurementSet,
    model: str = "m4",
    config: SolverConfig | None = None,
    init: CalibrationState | None = None,
    nominal_angles: BeamformingAngles | None = None,
) -> CalibrationState:
    """Run one calibration model on a measurement set.

    ``init`` seeds m3/m4 with a codebook and gains; otherwise the nominal
    (manufacturer) codebook built from ``nominal_angles`` is used.  m1 and m2
    always need the nominal angles.  The projection-matching method expects a
    residual-calibrated ``init`` for best results; its anchors come from
    ``config.anchor_indices``.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    config = config or SolverConfig()
    y = measurements.observations
    geom = measurements.geom
    a = steering_matrix(geom, (measurements.azimuth, measurements.elevation))

    if init is None:
        if nominal_angles is None:
            raise ValueError("need either an init state or the nominal beamforming angles")
        init = initial_state(measurements, nominal_angles, model=model)
    entries = init.codebook.entries.copy()
    gamma = init.gains.copy()
    if gamma.shape != (y.shape[1],):
        gamma = update_gamma_closed_form(y, entries, a)

    if model == "m1":
        if nominal_angles is None:
            nominal_angles = init.beamforming_angles
        if nominal_angles is None:
            raise ValueError("m1 needs the nominal beamforming angles")
        return _calibrate_m1(y, a, geom, nominal_angles, config)
    if model == "m2":
        if nominal_angles is None:
            nominal_angles = init.beamforming_angles
        if nominal_angles is None:
            raise ValueError("m2 needs the nominal beamforming angles")
        return _calibrate_m2(y, a, geom, nominal_angles, config)
    if model == "m3":
        return _calibrate_m3(y, a, geom, measurements, entries, config)
    if config.method == "ao":
        return _calibrate_m4_ao(y, a, entries, gamma, config)
    if config.method == "gd-rel":
        return _calibrate_m4_gd_rel(y, a, entries, gamma, config)
    return _calibrate_m4_gd_ael(y, a, entries, gamma, config)


def loss_trace_oscillates(trace: list[tuple[int, float, str]]) -> bool:
    """Heuristic instability flag for a solver loss trace.

    True when, over the second half of the trace, the loss keeps stepping
    upward and its mean cannot hold the best value seen (a learning rate too
    large for the batch size).
    """
    losses = np.array([v for _, v, _ in trace], dtype=float)
    tail = losses[losses.size // 2 :]
    if tail.size < 4:
        return False
    diffs = np.diff(tail)
    material = diffs > 1e-6 * tail[:-1]  # ignore converged-flat float jitter
    increase_fraction = float(np.mean(material))
    return increase_fraction > 0.2 and float(np.mean(tail)) > 1.1 * float(np.min(losses))


def calibrate_m4_pipeline(
    measurements: MeasurementSet,
    nominal_angles: BeamformingAngles,
    rel_config: SolverConfig | None = None,
    ael_config: SolverConfig | None = None,
) -> tuple[CalibrationState, CalibrationState]:
    """Residual-loss calibration followed by angle-loss refinement.

    Returns (rel_state, ael_state); the second starts from the first.
    """
    rel_config = rel_config or SolverConfig(method="gd-rel")
    rel_state = calibrate(measurements, "m4", rel_config, nominal_angles=nominal_angles)
    if ael_config is None:
        from .metrics import default_eval_set_2d, default_eval_set_3d

        anchor_set = (
            default_eval_set_3d() if measurements.geom.rows > 1 else default_eval_set_2d()
        )
        ael_config = SolverConfig(
            method="gd-ael",
            learning_rate=0.03 if measurements.geom.rows == 1 else 0.2,
            anchor_indices=anchor_indices_for(measurements, anchor_set),
        )
    ael_state = calibrate(measurements, "m4", ael_config, init=rel_state)
    return rel_state, ael_state
