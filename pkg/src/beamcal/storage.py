"""Versioned, checksummed serialization for codebooks, measurements, and states.

Layout: every payload file (CSV text or raw binary) travels with a JSON
manifest at the same path with a ``.json`` suffix.  The manifest declares the
format version, artifact kind, shapes, units, seed, encoding, and a SHA-256
checksum of the payload bytes; loading verifies all of them before any data
is returned.  Text payloads print floats with 17 significant digits, which
round-trips IEEE-754 doubles exactly; binary payloads are little-endian
complex128, C order.  Angles are degrees and power is dBm at this boundary
(radians and watts inside the library).

See FORMATS.md at the repository root for byte-level layouts.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .arrays import ArrayGeometry, Codebook, NormMode
from .calibration import CalibrationState
from .synth import MeasurementSet

FORMAT_VERSION = 1
_FLOAT_FMT = "%.17g"


class StorageError(RuntimeError):
    """Malformed, corrupted, or incompatible artifact file."""


def data_dir() -> Path:
    """Default artifact directory, overridable via BEAMCAL_DATA_DIR."""
    return Path(os.environ.get("BEAMCAL_DATA_DIR", "beamcal-data"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(payload_path: Path) -> Path:
    # Appended (not substituted) so CSV and binary payloads sharing a stem
    # keep distinct manifests.
    return payload_path.with_name(payload_path.name + ".json")


def _write_manifest(payload_path: Path, manifest: dict) -> None:
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["payload"] = payload_path.name
    manifest["checksum_sha256"] = _sha256(payload_path)
    with open(_manifest_path(payload_path), "w") as fh:
        json.dump(manifest, fh, indent=1)


def _read_manifest(payload_path: Path, expected_kind: str) -> dict:
    mpath = _manifest_path(payload_path)
    if not mpath.exists():
        raise StorageError(f"missing manifest {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise StorageError(f"unsupported format version {version!r}")
    if manifest.get("kind") != expected_kind:
        raise StorageError(f"expected kind {expected_kind!r}, found {manifest.get('kind')!r}")
    digest = _sha256(payload_path)
    if digest != manifest.get("checksum_sha256"):
        raise StorageError(f"checksum mismatch for {payload_path}")
    return manifest


def _complex_pairs(arr: np.ndarray) -> dict:
    return {"re": arr.real.tolist(), "im": arr.imag.tolist()}


def _pairs_complex(d: dict) -> np.ndarray:
    return np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)


def _geometry_dict(geom: ArrayGeometry) -> dict:
    return {"rows": geom.rows, "cols": geom.cols, "element_spacing": geom.element_spacing}


def _geometry_from(d: dict) -> ArrayGeometry:
    return ArrayGeometry(int(d["rows"]), int(d["cols"]), float(d["element_spacing"]))


# ---------------------------------------------------------------------------
# Codebooks: CSV rows g,n,re,im (or raw binary)
# ---------------------------------------------------------------------------


def save_codebook(
    path,
    cb: Codebook,
    geom: ArrayGeometry | None = None,
    beam_angles_deg: list | None = None,
    seed: int | None = None,
    encoding: str = "csv",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g, n = cb.entries.shape
    if encoding == "csv":
        gi, ni = np.meshgrid(np.arange(g), np.arange(n), indexing="ij")
        table = np.column_stack(
            [gi.ravel(), ni.ravel(), cb.entries.real.ravel(), cb.entries.imag.ravel()]
        )
        np.savetxt(
            path, table, fmt=("%d", "%d", _FLOAT_FMT, _FLOAT_FMT),
            delimiter=",", header="g,n,re,im", comments="",
        )
    elif encoding == "binary":
        cb.entries.astype("<c16").tofile(path)
    else:
        raise ValueError("encoding must be 'csv' or 'binary'")
    manifest = {
        "kind": "codebook",
        "encoding": encoding,
        "shape": {"G": g, "N": n},
        "norm_mode": cb.norm_mode.value,
        "units": {"angles": "degrees"},
        "seed": seed,
    }
    if geom is not None:
        manifest["geometry"] = _geometry_dict(geom)
    if beam_angles_deg is not None:
        manifest["beamforming_angles_deg"] = [list(map(float, p)) for p in beam_angles_deg]
    _write_manifest(path, manifest)
    return path


def load_codebook(path) -> tuple[Codebook, dict]:
    path = Path(path)
    manifest = _read_manifest(path, "codebook")
    g, n = manifest["shape"]["G"], manifest["shape"]["N"]
    if manifest["encoding"] == "csv":
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if table.shape != (g * n, 4):
            raise StorageError(f"codebook payload has {table.shape[0]} rows, expected {g * n}")
        entries = np.zeros((g, n), dtype=np.complex128)
        gi = table[:, 0].astype(int)
        ni = table[:, 1].astype(int)
        entries[gi, ni] = table[:, 2] + 1j * table[:, 3]
    else:
        entries = np.fromfile(path, dtype="<c16")
        if entries.size != g * n:
            raise StorageError("codebook payload size mismatch")
        entries = entries.reshape(g, n)
    return Codebook(entries, NormMode(manifest["norm_mode"])), manifest


# ---------------------------------------------------------------------------
# Measurement sets: CSV rows t,g,re,im (or raw binary), geometry in sidecar
# ---------------------------------------------------------------------------


def save_measurements(
    path,
    ms: MeasurementSet,
    encoding: str = "csv",
    extra_manifest: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g, t = ms.observations.shape
    if encoding == "csv":
        ti, gi = np.meshgrid(np.arange(t), np.arange(g), indexing="ij")
        obs = ms.observations.T  # t-major rows
        table = np.column_stack([ti.ravel(), gi.ravel(), obs.real.ravel(), obs.imag.ravel()])
        np.savetxt(
            path, table, fmt=("%d", "%d", _FLOAT_FMT, _FLOAT_FMT),
            delimiter=",", header="t,g,re,im", comments="",
        )
    elif encoding == "binary":
        ms.observations.astype("<c16").tofile(path)
    else:
        raise ValueError("encoding must be 'csv' or 'binary'")
    manifest = {
        "kind": "measurements",
        "encoding": encoding,
        "shape": {"G": g, "T": t},
        "units": {"angles": "degrees", "distance": "m", "snr": "dB"},
        "seed": ms.seed,
        "geometry": _geometry_dict(ms.geom),
        "azimuth_deg": np.rad2deg(ms.azimuth).tolist(),
        "elevation_deg": np.rad2deg(ms.elevation).tolist(),
        "distances_m": ms.distances.tolist(),
        "snr_db": ms.snr_db.tolist(),
    }
    if ms.los_path_gains is not None:
        manifest["los_path_gains"] = _complex_pairs(ms.los_path_gains)
    if ms.noise_variance_per_entry is not None:
        manifest["noise_variance_per_entry"] = ms.noise_variance_per_entry.tolist()
    if extra_manifest:
        manifest.update(extra_manifest)
    _write_manifest(path, manifest)
    return path


def load_measurements(path) -> MeasurementSet:
    path = Path(path)
    manifest = _read_manifest(path, "measurements")
    g, t = manifest["shape"]["G"], manifest["shape"]["T"]
    if manifest["encoding"] == "csv":
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if table.shape != (g * t, 4):
            raise StorageError(f"measurement payload has {table.shape[0]} rows, expected {g * t}")
        obs = np.zeros((g, t), dtype=np.complex128)
        ti = table[:, 0].astype(int)
        gi = table[:, 1].astype(int)
        obs[gi, ti] = table[:, 2] + 1j * table[:, 3]
    else:
        obs = np.fromfile(path, dtype="<c16")
        if obs.size != g * t:
            raise StorageError("measurement payload size mismatch")
        obs = obs.reshape(g, t)
    gains = manifest.get("los_path_gains")
    noise = manifest.get("noise_variance_per_entry")
    return MeasurementSet(
        observations=obs,
        azimuth=np.deg2rad(manifest["azimuth_deg"]),
        elevation=np.deg2rad(manifest["elevation_deg"]),
        distances=np.asarray(manifest["distances_m"], dtype=float),
        snr_db=np.asarray(manifest["snr_db"], dtype=float),
        geom=_geometry_from(manifest["geometry"]),
        seed=manifest.get("seed") or 0,
        los_path_gains=None if gains is None else _pairs_complex(gains),
        noise_variance_per_entry=None if noise is None else np.asarray(noise, dtype=float),
    )


# ---------------------------------------------------------------------------
# Calibration states: single JSON document with embedded checksum
# ---------------------------------------------------------------------------


def _state_payload(state: CalibrationState) -> dict:
    payload = {
        "model": state.model,
        "method": state.method,
        "codebook": {
            "norm_mode": state.codebook.norm_mode.value,
            "shape": list(state.codebook.entries.shape),
            **_complex_pairs(state.codebook.entries),
        },
        "gains": _complex_pairs(state.gains),
        "loss_trace": [[int(i), float(v), k] for i, v, k in state.loss_trace],
        "beta": state.beta,
    }
    if state.beamforming_angles is not None:
        payload["beamforming_angles_deg"] = [
            list(p) for p in state.beamforming_angles.as_degree_pairs()
        ]
    return payload


def save_state(path, state: CalibrationState, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _state_payload(state)
    if provenance:
        payload["provenance"] = provenance
    body = json.dumps(payload, sort_keys=True)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "calibration-state",
        "checksum_sha256": hashlib.sha256(body.encode()).hexdigest(),
        "payload": payload,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def load_state(path) -> CalibrationState:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise StorageError(f"unsupported format version {doc.get('format_version')!r}")
    if doc.get("kind") != "calibration-state":
        raise StorageError("not a calibration-state file")
    payload = doc.get("payload")
    body = json.dumps(payload, sort_keys=True)
    if hashlib.sha256(body.encode()).hexdigest() != doc.get("checksum_sha256"):
        raise StorageError(f"checksum mismatch for {path}")
    cb_doc = payload["codebook"]
    entries = _pairs_complex(cb_doc)
    expect = tuple(cb_doc["shape"])
    if entries.shape != expect:
        raise StorageError(f"codebook shape {entries.shape} does not match manifest {expect}")
    state = CalibrationState(
        codebook=Codebook(entries, NormMode(cb_doc["norm_mode"])),
        gains=_pairs_complex(payload["gains"]),
        model=payload["model"],
        method=payload["method"],
        loss_trace=[(int(i), float(v), str(k)) for i, v, k in payload["loss_trace"]],
        beta=payload["beta"],
    )
    if "beamforming_angles_deg" in payload:
        from .arrays import BeamformingAngles

        state.beamforming_angles = BeamformingAngles.from_degrees(
            [tuple(p) for p in payload["beamforming_angles_deg"]]
        )
    return state


def write_metric_reports_csv(path, reports) -> Path:
    from .metrics import MetricReport

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MetricReport.csv_header()]
    lines += [r.csv_row() for r in reports]
    path.write_text("\n".join(lines) + "\n")
    return path
