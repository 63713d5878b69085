"""Federated codebook calibration across multiple UEs.

Round protocol: the BS broadcasts the current global codebook, every UE
calibrates locally for a fixed iteration budget on its own measurements, and
uplinks only the codebook delta (G x N complex entries, never the raw pilots
or its gain estimates).  The BS forms the weighted sum

    W_new = W_old + sum_m xi_m * delta_m

and renormalizes every codeword.  Uplink cost per round is therefore exactly
M * G * N complex entries, against G * sum_m T_m for shipping raw data once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .arrays import Codebook, NormMode, steering_matrix
from .calibration import (
    CalibrationState,
    SolverConfig,
    calibrate,
    update_gamma_closed_form,
)
from .synth import MeasurementSet


@dataclass
class LocalUpdate:
    """One UE's contribution to a fusion round."""

    ue_id: int
    delta_w: np.ndarray  # (G, N) codebook difference
    sample_count: int
    mean_gain_magnitude: float


@dataclass
class FusionWeights:
    xi: np.ndarray  # one non-negative coefficient per UE

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if np.any(self.xi < 0) or not np.sum(self.xi) > 0:
            raise ValueError("weights must be non-negative with positive sum")

    @classmethod
    def equal(cls, n_ues: int) -> "FusionWeights":
        return cls(np.full(n_ues, 1.0 / n_ues))

    @classmethod
    def gain_proportional(cls, updates: list[LocalUpdate]) -> "FusionWeights":
        mags = np.array([u.mean_gain_magnitude for u in updates])
        if not np.sum(mags) > 0:
            return cls.equal(len(updates))
        return cls(mags / np.sum(mags))


def local_delta(
    global_codebook: Codebook,
    measurements: MeasurementSet,
    config: SolverConfig,
    ue_id: int = 0,
) -> LocalUpdate:
    """Calibrate locally from the broadcast codebook and report the difference."""
    if measurements.n_samples == 0:
        raise ValueError("local measurement set is empty")
    a = steering_matrix(measurements.geom, (measurements.azimuth, measurements.elevation))
    gains = update_gamma_closed_form(measurements.observations, global_codebook.entries, a)
    init = CalibrationState(codebook=global_codebook.copy(), gains=gains, model="m4")
    state = calibrate(measurements, "m4", config, init=init)
    return LocalUpdate(
        ue_id=ue_id,
        delta_w=state.codebook.entries - global_codebook.entries,
        sample_count=measurements.n_samples,
        mean_gain_magnitude=float(np.mean(np.abs(state.gains))),
    )


def fuse(
    global_codebook: Codebook,
    updates: list[LocalUpdate],
    weights: FusionWeights,
) -> Codebook:
    """Weighted aggregation of local deltas, renormalized per codeword.

    A codeword that sums to zero keeps the previous global value (flagged).
    """
    if len(updates) != weights.xi.size:
        raise ValueError("need one weight per update")
    merged = global_codebook.entries.copy()
    for xi, upd in zip(weights.xi, updates):
        if upd.delta_w.shape != merged.shape:
            raise ValueError(f"UE {upd.ue_id} delta shape {upd.delta_w.shape} mismatch")
        merged = merged + xi * upd.delta_w
    norms = np.linalg.norm(merged, axis=1)
    dead = norms == 0
    if np.any(dead):
        warnings.warn(f"fusion produced {np.count_nonzero(dead)} zero codeword(s); kept previous")
        merged[dead] = global_codebook.entries[dead]
        norms[dead] = np.linalg.norm(merged[dead], axis=1)
    return Codebook(merged / norms[:, None], NormMode.PER_CODEWORD_UNIT_NORM)


@dataclass
class FusionRound:
    round_index: int
    codebook: Codebook
    uplink_entries: int  # complex entries sent BS-ward this round
    local_delta_norms: list[float]
    metrics: dict = field(default_factory=dict)


@dataclass
class CoopHistory:
    rounds: list[FusionRound] = field(default_factory=list)
    centralized_baseline_entries: int = 0

    @property
    def total_uplink_entries(self) -> int:
        return sum(r.uplink_entries for r in self.rounds)

    def final_codebook(self) -> Codebook:
        return self.rounds[-1].codebook


def run_rounds(
    per_ue_measurements: list[MeasurementSet],
    init_codebook: Codebook,
    n_rounds: int,
    weights: FusionWeights | None = None,
    local_config: SolverConfig | None = None,
    metric_hook=None,
) -> CoopHistory:
    """Alternate broadcast, local calibration, and fusion for ``n_rounds``.

    ``local_config.max_iters`` is the per-round local iteration budget.
    ``metric_hook(codebook) -> dict`` is evaluated on each fused codebook.
    """
    if n_rounds < 1:
        raise ValueError("need at least one round")
    m = len(per_ue_measurements)
    if m == 0:
        raise ValueError("need at least one UE")
    weights = weights or FusionWeights.equal(m)
    local_config = local_config or SolverConfig(method="gd-rel", max_iters=100)

    g, n = init_codebook.entries.shape
    history = CoopHistory(
        centralized_baseline_entries=g * sum(ms.n_samples for ms in per_ue_measurements)
    )
    global_cb = init_codebook.copy()
    for rnd in range(1, n_rounds + 1):
        updates = [
            local_delta(global_cb, ms, local_config, ue_id=i)
            for i, ms in enumerate(per_ue_measurements)
        ]
        global_cb = fuse(global_cb, updates, weights)
        entry = FusionRound(
            round_index=rnd,
            codebook=global_cb.copy(),
            uplink_entries=m * g * n,
            local_delta_norms=[float(np.linalg.norm(u.delta_w)) for u in updates],
        )
        if metric_hook is not None:
            entry.metrics = dict(metric_hook(global_cb))
        history.rounds.append(entry)
    return history


def split_measurements(
    measurements: MeasurementSet, sizes: list[int], seed: int = 0
) -> list[MeasurementSet]:
    """Randomly partition a measurement set into disjoint per-UE subsets."""
    if sum(sizes) != measurements.n_samples:
        raise ValueError("split sizes must sum to the sample count")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(measurements.n_samples)
    out = []
    start = 0
    for size in sizes:
        out.append(measurements.subset(np.sort(perm[start : start + size])))
        start += size
    return out
