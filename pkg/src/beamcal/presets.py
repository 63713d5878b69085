"""Ready-made scenarios mirroring the standard benchmark configurations.

Three presets are provided:

* ``2d-sweep``: 1 x 16 array, 11 azimuth beams at -50..50 deg, 561 samples on
  a 10 m arc covering -70..70 deg in 0.25 deg steps, 2-bit phase quantization
  plus additive entry error, 35 dB per-sample SNR.
* ``3d-sweep``: 16 x 16 array, 66 beams on a -50..50 x -50..0 deg grid,
  12831 samples on a 1 deg az/el grid over -70..70 x -70..20 deg.
* ``mpc-line``: the multipath study layout; BS at the origin, UE walking the
  x = 10 m line from y = -30 to +30 in 0.2 m steps (301 samples), three
  scatterer clusters of five points each spread along the same line.

Carrier frequency is 5 GHz in all presets.  The subcarrier grid (256 x
240 kHz) is chosen so scattered paths are partially, not perfectly,
suppressed by LOS delay de-rotation; with no scatterers it is inert.
"""

from __future__ import annotations

import numpy as np

from .arrays import ArrayGeometry, BeamformingAngles, ideal_codebook
from .synth import PerturbationSpec, Scatterer, Scenario, perturb_codebook

CARRIER_WAVELENGTH = 299792458.0 / 5e9  # 5 GHz
DEFAULT_SUBCARRIERS = 256
DEFAULT_SUBCARRIER_SPACING = 240e3

# Additive entry error paired with 2-bit quantization; sized so the
# uncalibrated angle bias of the 2d-sweep preset lands near one degree.
DEFAULT_ADDITIVE_SIGMA = 0.65

PRESET_NAMES = ("2d-sweep", "3d-sweep", "mpc-line")


def arc_trajectory(radius: float, az_start_deg: float, az_stop_deg: float, step_deg: float):
    """UE positions on a boresight-plane arc at constant range (z = 0)."""
    az = np.deg2rad(np.arange(az_start_deg, az_stop_deg + step_deg / 2.0, step_deg))
    return radius * np.column_stack([np.cos(az), np.sin(az), np.zeros_like(az)])


def spherical_grid_trajectory(
    radius: float,
    az_start_deg: float,
    az_stop_deg: float,
    el_start_deg: float,
    el_stop_deg: float,
    step_deg: float,
):
    """UE positions on a constant-range az/el grid, azimuth varying slowest."""
    az = np.deg2rad(np.arange(az_start_deg, az_stop_deg + step_deg / 2.0, step_deg))
    el = np.deg2rad(np.arange(el_start_deg, el_stop_deg + step_deg / 2.0, step_deg))
    azg, elg = np.meshgrid(az, el, indexing="ij")
    azf, elf = azg.ravel(), elg.ravel()
    return radius * np.column_stack(
        [np.cos(azf) * np.cos(elf), np.sin(azf) * np.cos(elf), np.sin(elf)]
    )


def line_trajectory(x: float, y_start: float, y_stop: float, step: float):
    """UE positions walking a line of constant x (z = 0)."""
    y = np.arange(y_start, y_stop + step / 2.0, step)
    return np.column_stack([np.full_like(y, x), y, np.zeros_like(y)])


def fan_beam_angles(start_deg: float = -50.0, stop_deg: float = 50.0, step_deg: float = 10.0):
    return BeamformingAngles.azimuth_fan_degrees(
        np.arange(start_deg, stop_deg + step_deg / 2.0, step_deg)
    )


def grid_beam_angles(az_deg, el_deg) -> BeamformingAngles:
    """Beam grid with azimuth varying fastest within each elevation row."""
    pairs = [(a, e) for e in el_deg for a in az_deg]
    return BeamformingAngles.from_degrees(pairs)


def scenario_2d(
    seed: int = 0,
    target_snr_db: float | None = 35.0,
    additive_sigma: float = DEFAULT_ADDITIVE_SIGMA,
    phase_bits: int = 2,
    tx_power_dbm: float = 15.0,
    scatterers: list[Scatterer] | None = None,
) -> Scenario:
    """The 11-beam / 16-element azimuth sweep benchmark (T = 561)."""
    geom = ArrayGeometry(rows=1, cols=16)
    angles = fan_beam_angles()
    ideal = ideal_codebook(geom, angles)
    spec = PerturbationSpec(kind="both", additive_sigma=additive_sigma, phase_bits=phase_bits)
    truth = perturb_codebook(ideal, spec, seed=seed)
    return Scenario(
        geom=geom,
        true_codebook=truth,
        nominal_angles=angles,
        carrier_wavelength=CARRIER_WAVELENGTH,
        tx_power_dbm=tx_power_dbm,
        noise_variance=0.0,
        subcarriers=DEFAULT_SUBCARRIERS,
        subcarrier_spacing=DEFAULT_SUBCARRIER_SPACING,
        bs_position=(0.0, 0.0, 0.0),
        ue_trajectory=arc_trajectory(10.0, -70.0, 70.0, 0.25),
        scatterers=list(scatterers or []),
        rng_seed=seed,
        target_snr_db=target_snr_db,
    )


def scenario_3d(
    seed: int = 0,
    target_snr_db: float | None = 35.0,
    additive_sigma: float = DEFAULT_ADDITIVE_SIGMA,
    phase_bits: int = 2,
    tx_power_dbm: float = 15.0,
) -> Scenario:
    """The 66-beam / 256-element az-el sweep benchmark (T = 12831)."""
    geom = ArrayGeometry(rows=16, cols=16)
    angles = grid_beam_angles(
        az_deg=np.arange(-50.0, 50.0 + 5.0, 10.0),
        el_deg=np.arange(-50.0, 0.0 + 5.0, 10.0),
    )
    ideal = ideal_codebook(geom, angles)
    spec = PerturbationSpec(kind="both", additive_sigma=additive_sigma, phase_bits=phase_bits)
    truth = perturb_codebook(ideal, spec, seed=seed)
    return Scenario(
        geom=geom,
        true_codebook=truth,
        nominal_angles=angles,
        carrier_wavelength=CARRIER_WAVELENGTH,
        tx_power_dbm=tx_power_dbm,
        noise_variance=0.0,
        subcarriers=DEFAULT_SUBCARRIERS,
        subcarrier_spacing=DEFAULT_SUBCARRIER_SPACING,
        bs_position=(0.0, 0.0, 0.0),
        ue_trajectory=spherical_grid_trajectory(10.0, -70.0, 70.0, -70.0, 20.0, 1.0),
        scatterers=[],
        rng_seed=seed,
        target_snr_db=target_snr_db,
    )


def make_scatterer_clusters(
    seed: int,
    rcs_total: float,
    centers_y=(-20.0, 0.0, 20.0),
    x: float = 10.0,
    points_per_cluster: int = 5,
    cluster_radius: float = 1.0,
) -> list[Scatterer]:
    """Clusters of point scatterers around evenly spaced centers on the UE line.

    Each cluster's total cross-section sums to ``rcs_total``.
    """
    rng = np.random.default_rng((seed, 4))
    out: list[Scatterer] = []
    per_point = rcs_total / points_per_cluster
    for cy in centers_y:
        for _ in range(points_per_cluster):
            r = cluster_radius * np.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2.0 * np.pi)
            out.append(
                Scatterer(
                    position=(x + r * np.cos(phi), cy + r * np.sin(phi), 0.0),
                    rcs=per_point,
                )
            )
    return out


def scenario_mpc_line(
    seed: int = 0,
    rcs: float = 10.0,
    tx_power_dbm: float = 15.0,
    with_noise: bool = True,
    additive_sigma: float = DEFAULT_ADDITIVE_SIGMA,
    phase_bits: int = 2,
) -> Scenario:
    """Multipath study: UE on the x = 10 m line, three scatterer clusters.

    Noise here follows the physical budget (fixed per-subcarrier variance), so
    sweeping ``tx_power_dbm`` moves the per-sample SNR one-for-one in dB.
    """
    geom = ArrayGeometry(rows=1, cols=16)
    angles = fan_beam_angles()
    ideal = ideal_codebook(geom, angles)
    spec = PerturbationSpec(kind="both", additive_sigma=additive_sigma, phase_bits=phase_bits)
    truth = perturb_codebook(ideal, spec, seed=seed)
    scatterers = make_scatterer_clusters(seed, rcs_total=rcs) if rcs > 0 else []
    # Fixed floor giving ~35 dB median per-sample SNR at 15 dBm transmit power.
    noise_variance = 1.1e-10 if with_noise else 0.0
    return Scenario(
        geom=geom,
        true_codebook=truth,
        nominal_angles=angles,
        carrier_wavelength=CARRIER_WAVELENGTH,
        tx_power_dbm=tx_power_dbm,
        noise_variance=noise_variance,
        subcarriers=DEFAULT_SUBCARRIERS,
        subcarrier_spacing=DEFAULT_SUBCARRIER_SPACING,
        bs_position=(0.0, 0.0, 0.0),
        ue_trajectory=line_trajectory(10.0, -30.0, 30.0, 0.2),
        scatterers=scatterers,
        rng_seed=seed,
        target_snr_db=None,
    )


def scenario_from_preset(name: str, seed: int = 0, **overrides) -> Scenario:
    if name == "2d-sweep":
        return scenario_2d(seed=seed, **overrides)
    if name == "3d-sweep":
        return scenario_3d(seed=seed, **overrides)
    if name == "mpc-line":
        return scenario_mpc_line(seed=seed, **overrides)
    raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
