"""Synthetic ground truth and pilot measurement generation.

A Scenario bundles everything needed to simulate a downlink beam sweep: the
array, a ground-truth (hardware-perturbed) codebook, the UE trajectory,
optional scatterers, and the power/noise budget.  The generator produces the
G x T observation matrix

    Y[:, t] = gain_t * conj(W_true) @ a(dir_t) + nlos_residual_t + noise_t

where gain_t combines transmit power, free-space path loss, the LOS phase,
and (when configured) the element pattern.  Multipath enters through a
subcarrier de-rotation factor: after aligning the receiver to the LOS delay
and averaging the K subcarriers, a path with excess delay dt contributes
mean_k exp(j*2*pi*k*df*dt), which shrinks toward zero once K*df*dt >> 1.

Noise is injected after subcarrier averaging.  With per-subcarrier noise
variance sigma_n^2 the averaged per-entry variance is sigma_n^2 / K; when a
target SNR is requested instead, the per-sample variance is set to
|gain_t|^2 * ||b_t||^2 / (G * 10^(snr/10)) so every sample sits exactly at
the stated SNR.  The applied variance is recorded on the MeasurementSet.

All randomness is drawn from per-sample substreams seeded by
(rng_seed, stream_tag, t), so regenerating any single sample, in any order
or in parallel, reproduces identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arrays import (
    AngleDirection,
    ArrayGeometry,
    BeamformingAngles,
    Codebook,
    NormMode,
    element_pattern,
    steering_matrix,
)

SPEED_OF_LIGHT = 299792458.0

# Substream tags for per-sample random draws.
_STREAM_LOS_PHASE = 1
_STREAM_NLOS_PHASE = 2
_STREAM_NOISE = 3


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    if watts <= 0:
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * np.log10(watts) + 30.0


def los_gain(tx_power_w: float, wavelength: float, distance, phase):
    """Free-space line-of-sight complex gain sqrt(P) * lambda / (4 pi r) * e^{j phase}."""
    if tx_power_w < 0:
        raise ValueError("transmit power must be non-negative")
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive")
    mag = np.sqrt(tx_power_w) * wavelength / (4.0 * np.pi * distance)
    out = mag * np.exp(1j * np.asarray(phase, dtype=float))
    return complex(out) if out.ndim == 0 else out


def scatter_gain(tx_power_w: float, wavelength: float, rcs: float, r1, r2, phase):
    """Two-hop scattered-path gain sqrt(P) * (c/sqrt(4 pi)) * lambda / (4 pi r1 r2) * e^{j phase}."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    if np.any(r1 <= 0) or np.any(r2 <= 0):
        raise ValueError("scatterer hop distances must be positive")
    mag = np.sqrt(tx_power_w) * (rcs / np.sqrt(4.0 * np.pi)) * wavelength / (4.0 * np.pi * r1 * r2)
    return mag * np.exp(1j * np.asarray(phase, dtype=float))


def delay_derotation(n_subcarriers: int, subcarrier_spacing: float, excess_delay):
    """Average over subcarriers of the residual phase ramp for an excess delay.

    Returns mean_k exp(j*2*pi*k*df*dt) for k = 0..K-1; magnitude is 1 exactly
    when the delay matches (dt = 0) and decays like a Dirichlet kernel.
    """
    if n_subcarriers < 1:
        raise ValueError("need at least one subcarrier")
    dt = np.atleast_1d(np.asarray(excess_delay, dtype=float))
    x = 2.0 * np.pi * subcarrier_spacing * dt  # phase step between adjacent subcarriers
    k = np.arange(n_subcarriers)
    out = np.exp(1j * np.outer(k, x)).mean(axis=0)
    return complex(out[0]) if np.ndim(excess_delay) == 0 else out


@dataclass(frozen=True)
class PerturbationSpec:
    """Hardware-error model applied to an ideal codebook.

    kind: "additive" (complex Gaussian entry noise), "phase-quantization"
    (snap entry phases to a 2**phase_bits grid), or "both" (additive first,
    then quantization).
    """

    kind: str = "both"
    additive_sigma: float = 0.0
    phase_bits: int = 2

    def __post_init__(self):
        if self.kind not in ("additive", "phase-quantization", "both"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind in ("phase-quantization", "both") and self.phase_bits < 1:
            raise ValueError("phase quantization needs at least 1 bit")
        if self.additive_sigma < 0:
            raise ValueError("additive sigma must be non-negative")


def perturb_codebook(ideal: Codebook, spec: PerturbationSpec, seed: int) -> Codebook:
    """Derive a ground-truth codebook from an ideal one.

    Applies the configured hardware error, then scales every codeword to unit
    l2 norm.  Deterministic for a fixed seed.
    """
    if ideal.norm_mode is not NormMode.PER_ELEMENT_UNIT_MODULUS:
        raise ValueError("perturbation starts from a per-element-unit-modulus codebook")
    entries = ideal.entries.copy()
    if spec.kind in ("additive", "both") and spec.additive_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(entries.shape) + 1j * rng.standard_normal(entries.shape)
        entries = entries + spec.additive_sigma * noise / np.sqrt(2.0)
    if spec.kind in ("phase-quantization", "both"):
        step = 2.0 * np.pi / (2**spec.phase_bits)
        quant = np.round(np.angle(entries) / step) * step
        entries = np.abs(entries) * np.exp(1j * quant)
    return Codebook(entries, NormMode.PER_ELEMENT_UNIT_MODULUS).normalized_per_codeword()


@dataclass(frozen=True)
class Scatterer:
    position: tuple[float, float, float]
    rcs: float

    def __post_init__(self):
        if self.rcs < 0:
            raise ValueError("radar cross-section coefficient must be non-negative")


@dataclass
class Scenario:
    """Full synthetic world for one calibration campaign."""

    geom: ArrayGeometry
    true_codebook: Codebook
    nominal_angles: BeamformingAngles
    carrier_wavelength: float
    tx_power_dbm: float
    noise_variance: float  # per-subcarrier noise power sigma_n^2, watts
    subcarriers: int
    subcarrier_spacing: float
    bs_position: tuple[float, float, float]
    ue_trajectory: np.ndarray  # (T, 3) meters
    scatterers: list[Scatterer] = field(default_factory=list)
    rng_seed: int = 0
    element_beta: float | None = None  # None: isotropic elements
    los_phase_mode: str = "random"  # "random" or "zero" (controlled environment)
    target_snr_db: float | None = None  # overrides noise_variance when set

    def __post_init__(self):
        self.ue_trajectory = np.asarray(self.ue_trajectory, dtype=float)
        if self.ue_trajectory.ndim != 2 or self.ue_trajectory.shape[1] != 3:
            raise ValueError("ue_trajectory must have shape (T, 3)")
        if self.ue_trajectory.shape[0] < 1:
            raise ValueError("trajectory needs at least one sample")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")
        if self.subcarriers < 1:
            raise ValueError("need at least one subcarrier")
        if self.los_phase_mode not in ("random", "zero"):
            raise ValueError("los_phase_mode must be 'random' or 'zero'")
        bs = np.asarray(self.bs_position, dtype=float)
        if np.any(np.linalg.norm(self.ue_trajectory - bs[None, :], axis=1) == 0):
            raise ValueError("UE trajectory passes through the BS position")

    @property
    def n_samples(self) -> int:
        return self.ue_trajectory.shape[0]


@dataclass
class MeasurementSet:
    """Pilot observations plus the per-sample geometry that produced them."""

    observations: np.ndarray  # (G, T) complex
    azimuth: np.ndarray  # (T,) radians
    elevation: np.ndarray  # (T,) radians
    distances: np.ndarray  # (T,) meters
    snr_db: np.ndarray  # (T,) per-sample SNR, +inf when noiseless
    geom: ArrayGeometry
    seed: int = 0
    los_path_gains: np.ndarray | None = None  # (T,) complex gain excluding element pattern
    noise_variance_per_entry: np.ndarray | None = None  # (T,) applied post-averaging variance

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.complex128)
        t = self.observations.shape[1]
        for name in ("azimuth", "elevation", "distances", "snr_db"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (t,):
                raise ValueError(f"{name} must have shape ({t},)")
            setattr(self, name, arr)

    @property
    def n_codewords(self) -> int:
        return self.observations.shape[0]

    @property
    def n_samples(self) -> int:
        return self.observations.shape[1]

    @property
    def angles(self) -> list[AngleDirection]:
        return [AngleDirection(a, e) for a, e in zip(self.azimuth, self.elevation)]

    def subset(self, indices) -> "MeasurementSet":
        """A new MeasurementSet restricted to the given sample indices."""
        idx = np.asarray(indices, dtype=int)
        return MeasurementSet(
            observations=self.observations[:, idx],
            azimuth=self.azimuth[idx],
            elevation=self.elevation[idx],
            distances=self.distances[idx],
            snr_db=self.snr_db[idx],
            geom=self.geom,
            seed=self.seed,
            los_path_gains=None if self.los_path_gains is None else self.los_path_gains[idx],
            noise_variance_per_entry=(
                None
                if self.noise_variance_per_entry is None
                else self.noise_variance_per_entry[idx]
            ),
        )


def relative_direction(bs_position, position) -> tuple[float, float, float]:
    """(azimuth, elevation, range) of a point as seen from the BS boresight (+x)."""
    d = np.asarray(position, dtype=float) - np.asarray(bs_position, dtype=float)
    r = float(np.linalg.norm(d))
    if r == 0:
        raise ValueError("point coincides with the BS position")
    az = float(np.arctan2(d[1], d[0]))
    el = float(np.arcsin(np.clip(d[2] / r, -1.0, 1.0)))
    return az, el, r


def trajectory_directions(scenario: Scenario) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (azimuth, elevation, range) along the UE trajectory."""
    d = scenario.ue_trajectory - np.asarray(scenario.bs_position, dtype=float)[None, :]
    r = np.linalg.norm(d, axis=1)
    az = np.arctan2(d[:, 1], d[:, 0])
    el = np.arcsin(np.clip(d[:, 2] / r, -1.0, 1.0))
    return az, el, r


def _los_phases(scenario: Scenario) -> np.ndarray:
    if scenario.los_phase_mode == "zero":
        return np.zeros(scenario.n_samples)
    return np.array(
        [
            np.random.default_rng((scenario.rng_seed, _STREAM_LOS_PHASE, t)).uniform(
                0.0, 2.0 * np.pi
            )
            for t in range(scenario.n_samples)
        ]
    )


def nlos_residual(scenario: Scenario, t: int) -> np.ndarray:
    """Leakage of all scattered paths into sample t after LOS delay de-rotation."""
    g = scenario.true_codebook.n_codewords
    out = np.zeros(g, dtype=np.complex128)
    if not scenario.scatterers:
        return out
    p_bs = np.asarray(scenario.bs_position, dtype=float)
    p_ue = scenario.ue_trajectory[t]
    tau_los = np.linalg.norm(p_ue - p_bs) / SPEED_OF_LIGHT
    tx_w = dbm_to_watts(scenario.tx_power_dbm)
    rng = np.random.default_rng((scenario.rng_seed, _STREAM_NLOS_PHASE, t))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(scenario.scatterers))
    for ell, sc in enumerate(scenario.scatterers):
        az, el, r1 = relative_direction(p_bs, sc.position)
        r2 = float(np.linalg.norm(p_ue - np.asarray(sc.position, dtype=float)))
        if r2 == 0:
            raise ValueError(f"UE sample {t} coincides with scatterer {ell}")
        tau = (r1 + r2) / SPEED_OF_LIGHT
        alpha = scatter_gain(
            tx_w, scenario.carrier_wavelength, sc.rcs, r1, r2, phases[ell]
        )
        rot = delay_derotation(
            scenario.subcarriers, scenario.subcarrier_spacing, tau - tau_los
        )
        a = steering_matrix(scenario.geom, (np.array([az]), np.array([el])))[:, 0]
        resp = scenario.true_codebook.entries.conj() @ a
        if scenario.element_beta is not None:
            resp = resp * element_pattern(AngleDirection(az, el), scenario.element_beta)
        out += alpha * rot * resp
    return out


def generate_measurements(scenario: Scenario) -> MeasurementSet:
    """Simulate the full beam-sweep campaign described by the scenario."""
    az, el, dist = trajectory_directions(scenario)
    a = steering_matrix(scenario.geom, (az, el))
    b = scenario.true_codebook.entries.conj() @ a  # (G, T) noiseless unit-gain responses
    g, t_total = b.shape

    tx_w = dbm_to_watts(scenario.tx_power_dbm)
    path = los_gain(tx_w, scenario.carrier_wavelength, dist, _los_phases(scenario))
    gains = path.copy()
    if scenario.element_beta is not None:
        gains = gains * element_pattern((az, el), scenario.element_beta)

    y = b * gains[None, :]
    if scenario.scatterers:
        for t in range(t_total):
            y[:, t] += nlos_residual(scenario, t)

    signal_power = np.abs(gains) ** 2 * np.sum(np.abs(b) ** 2, axis=0)  # per-sample, all beams
    if scenario.target_snr_db is not None:
        var = signal_power / (g * 10.0 ** (scenario.target_snr_db / 10.0))
    else:
        var = np.full(t_total, scenario.noise_variance / scenario.subcarriers)

    if np.any(var > 0):
        for t in range(t_total):
            if var[t] == 0:
                continue
            rng = np.random.default_rng((scenario.rng_seed, _STREAM_NOISE, t))
            n = rng.standard_normal(g) + 1j * rng.standard_normal(g)
            y[:, t] += np.sqrt(var[t] / 2.0) * n

    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(signal_power / (g * var))

    return MeasurementSet(
        observations=y,
        azimuth=az,
        elevation=el,
        distances=dist,
        snr_db=snr,
        geom=scenario.geom,
        seed=scenario.rng_seed,
        los_path_gains=path,
        noise_variance_per_entry=var,
    )


def noiseless_observations(scenario: Scenario) -> np.ndarray:
    """The exact LOS-only model conj(W) @ A @ diag(gains), for oracle checks."""
    az, el, dist = trajectory_directions(scenario)
    a = steering_matrix(scenario.geom, (az, el))
    b = scenario.true_codebook.entries.conj() @ a
    tx_w = dbm_to_watts(scenario.tx_power_dbm)
    gains = los_gain(tx_w, scenario.carrier_wavelength, dist, _los_phases(scenario))
    if scenario.element_beta is not None:
        gains = gains * element_pattern((az, el), scenario.element_beta)
    return b * gains[None, :]
