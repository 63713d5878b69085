import json

import numpy as np
import pytest

from beamcal import (
    ArrayGeometry,
    BeamformingAngles,
    CalibrationState,
    Codebook,
    NormMode,
    SolverConfig,
    calibrate,
    ideal_codebook,
)
from beamcal.presets import scenario_2d
from beamcal.storage import (
    StorageError,
    load_codebook,
    load_measurements,
    load_state,
    save_codebook,
    save_measurements,
    save_state,
    write_metric_reports_csv,
)
from beamcal.synth import generate_measurements


@pytest.fixture()
def measurements():
    return generate_measurements(scenario_2d(seed=1))


def random_codebook(seed=0, g=7, n=6):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((g, n)) + 1j * rng.standard_normal((g, n))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return Codebook(w, NormMode.PER_CODEWORD_UNIT_NORM)


class TestCodebookRoundTrip:
    @pytest.mark.parametrize("encoding", ["csv", "binary"])
    def test_bit_exact(self, tmp_path, encoding):
        cb = random_codebook()
        suffix = ".csv" if encoding == "csv" else ".bin"
        path = save_codebook(
            tmp_path / f"cb{suffix}", cb, ArrayGeometry(1, 6),
            [( -10.0, 0.0)] * 7, seed=3, encoding=encoding,
        )
        loaded, manifest = load_codebook(path)
        assert np.array_equal(loaded.entries, cb.entries)
        assert loaded.norm_mode is cb.norm_mode
        assert manifest["seed"] == 3
        assert manifest["geometry"]["cols"] == 6

    def test_cross_format_agreement(self, tmp_path):
        cb = random_codebook(4)
        p1 = save_codebook(tmp_path / "a.csv", cb, encoding="csv")
        p2 = save_codebook(tmp_path / "a.bin", cb, encoding="binary")
        c1, _ = load_codebook(p1)
        c2, _ = load_codebook(p2)
        assert np.max(np.abs(c1.entries - c2.entries)) < 1e-15
        assert np.array_equal(c2.entries, cb.entries)

    def test_truncation_detected(self, tmp_path):
        cb = random_codebook(1)
        path = save_codebook(tmp_path / "cb.csv", cb)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(StorageError, match="checksum"):
            load_codebook(path)

    def test_unknown_version_rejected(self, tmp_path):
        cb = random_codebook(2)
        path = save_codebook(tmp_path / "cb.csv", cb)
        mpath = path.parent / (path.name + ".json")
        manifest = json.loads(mpath.read_text())
        manifest["format_version"] = 99
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(StorageError, match="version"):
            load_codebook(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        cb = random_codebook(3)
        path = save_codebook(tmp_path / "cb.csv", cb)
        mpath = path.parent / (path.name + ".json")
        manifest = json.loads(mpath.read_text())
        manifest["shape"]["G"] = 99
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(StorageError):
            load_codebook(path)

    def test_missing_manifest(self, tmp_path):
        cb = random_codebook(5)
        path = save_codebook(tmp_path / "cb.csv", cb)
        (path.parent / (path.name + ".json")).unlink()
        with pytest.raises(StorageError, match="manifest"):
            load_codebook(path)

    def test_garbage_payload_rejected(self, tmp_path):
        cb = random_codebook(6)
        path = save_codebook(tmp_path / "cb.csv", cb)
        path.write_text("g,n,re,im\nnot,numbers,at,all\n")
        with pytest.raises(StorageError):
            load_codebook(path)


class TestMeasurementRoundTrip:
    @pytest.mark.parametrize("encoding", ["csv", "binary"])
    def test_round_trip(self, tmp_path, measurements, encoding):
        suffix = ".csv" if encoding == "csv" else ".bin"
        path = save_measurements(tmp_path / f"m{suffix}", measurements, encoding)
        loaded = load_measurements(path)
        assert np.array_equal(loaded.observations, measurements.observations)
        assert np.allclose(loaded.azimuth, measurements.azimuth, atol=1e-15)
        assert np.array_equal(loaded.distances, measurements.distances)
        assert np.array_equal(loaded.los_path_gains, measurements.los_path_gains)
        assert loaded.geom == measurements.geom
        assert loaded.seed == measurements.seed

    def test_cross_format_values(self, tmp_path, measurements):
        p1 = save_measurements(tmp_path / "m.csv", measurements, "csv")
        p2 = save_measurements(tmp_path / "m.bin", measurements, "binary")
        a = load_measurements(p1)
        b = load_measurements(p2)
        assert np.max(np.abs(a.observations - b.observations)) < 1e-15

    def test_extra_manifest_echo(self, tmp_path, measurements):
        path = save_measurements(
            tmp_path / "m.csv", measurements, "csv", extra_manifest={"scenario": {"p": 1}}
        )
        manifest = json.loads((path.parent / (path.name + ".json")).read_text())
        assert manifest["scenario"] == {"p": 1}
        assert manifest["units"]["angles"] == "degrees"

    def test_truncated_binary(self, tmp_path, measurements):
        path = save_measurements(tmp_path / "m.bin", measurements, "binary")
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(StorageError, match="checksum"):
            load_measurements(path)


class TestStateRoundTrip:
    def test_full_state(self, tmp_path, measurements):
        sc = scenario_2d(seed=1)
        state = calibrate(
            measurements, "m4",
            SolverConfig(method="gd-rel", learning_rate=0.02, max_iters=30),
            nominal_angles=sc.nominal_angles,
        )
        path = save_state(tmp_path / "state.json", state, provenance={"run": "test"})
        loaded = load_state(path)
        assert np.array_equal(loaded.codebook.entries, state.codebook.entries)
        assert loaded.codebook.norm_mode is state.codebook.norm_mode
        assert np.array_equal(loaded.gains, state.gains)
        assert loaded.loss_trace == state.loss_trace
        assert loaded.model == "m4" and loaded.method == "gd-rel"

    def test_m2_state_keeps_angles(self, tmp_path):
        geom = ArrayGeometry(1, 4)
        angles = BeamformingAngles.azimuth_fan_degrees([-10.0, 10.0])
        cb = ideal_codebook(geom, angles).normalized_per_codeword()
        state = CalibrationState(
            codebook=cb, gains=np.array([1 + 1j]), model="m2",
            method="coordinate-descent", beamforming_angles=angles,
        )
        state.record(0, 1.0, "rel")
        loaded = load_state(save_state(tmp_path / "s.json", state))
        got = loaded.beamforming_angles.as_degree_pairs()
        assert np.allclose(got, [(-10.0, 0.0), (10.0, 0.0)])

    def test_tampered_state_rejected(self, tmp_path):
        cb = random_codebook(1)
        state = CalibrationState(codebook=cb, gains=np.ones(3, dtype=complex))
        path = save_state(tmp_path / "s.json", state)
        doc = json.loads(path.read_text())
        doc["payload"]["gains"]["re"][0] = 999.0
        path.write_text(json.dumps(doc))
        with pytest.raises(StorageError, match="checksum"):
            load_state(path)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"format_version": 1, "kind": "other"}))
        with pytest.raises(StorageError):
            load_state(path)


def test_metric_reports_csv(tmp_path):
    from beamcal.metrics import MetricReport

    reports = [
        MetricReport("m1", "closed-form", 0.8, 1.0, 1.0, -1.4),
        MetricReport("m4", "gd-ael", 0.96, 0.1, 0.01, -1.1),
    ]
    path = write_metric_reports_csv(tmp_path / "r.csv", reports)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == MetricReport.csv_header()
    assert len(lines) == 3 and lines[1].startswith("m1,")
