import numpy as np
import pytest

from beamcal import (
    AngleDirection,
    ArrayGeometry,
    BeamformingAngles,
    Codebook,
    EvaluationAngleSet,
    NormMode,
    angle_error,
    beam_response_matrix,
    default_eval_set_2d,
    default_eval_set_3d,
    evaluate_codebook,
    gain_loss,
    ideal_codebook,
    response_similarity,
)
from beamcal.calibration import normalized_ideal_codebook
from beamcal.metrics import angle_error_mean_square
from beamcal.presets import scenario_2d


class TestEvalSets:
    def test_default_sizes(self):
        assert default_eval_set_2d().size == 81
        assert default_eval_set_3d().size == 119

    def test_ranges(self):
        ev = default_eval_set_2d()
        az = np.rad2deg(ev.azimuth)
        assert az.min() == -40.0 and az.max() == 40.0
        ev3 = default_eval_set_3d()
        el = np.rad2deg(ev3.elevation)
        assert el.min() == -40.0 and el.max() == 10.0

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            EvaluationAngleSet.from_degrees([0.0, 10.0], weights=[1.0, -1.0])


class TestResponseSimilarity:
    def test_identity_is_one(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 9)) + 1j * rng.standard_normal((6, 9))
        assert response_similarity(x, x) == 1.0
        assert response_similarity(x, x, mode="complex") == 1.0

    def test_positive_scale_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 7)) + 1j * rng.standard_normal((4, 7))
        assert abs(response_similarity(3.7 * x, x) - 1.0) < 1e-12
        assert abs(response_similarity(3.7 * x, x, mode="complex") - 1.0) < 1e-12

    def test_global_phase_blind_in_magnitude_mode(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 7)) + 1j * rng.standard_normal((4, 7))
        y = np.exp(1j * 0.9) * x
        assert abs(response_similarity(y, x) - 1.0) < 1e-12
        assert response_similarity(y, x, mode="complex") < 1.0

    @pytest.mark.parametrize("seed", range(6))
    def test_bounded_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((5, 8)) + 1j * rng.standard_normal((5, 8))
        y = rng.standard_normal((5, 8)) + 1j * rng.standard_normal((5, 8))
        for mode in ("magnitude", "complex"):
            s = response_similarity(x, y, mode=mode)
            assert 0.0 <= s <= 1.0

    def test_rejects_zero_and_mismatch(self):
        x = np.ones((2, 2))
        with pytest.raises(ValueError):
            response_similarity(x, np.zeros((2, 2)))
        with pytest.raises(ValueError):
            response_similarity(x, np.ones((2, 3)))


class TestAngleError:
    def test_matched_model_is_zero(self):
        sc = scenario_2d(seed=0)
        ev = default_eval_set_2d()
        truth_resp = beam_response_matrix(sc.true_codebook, sc.geom, (ev.azimuth, ev.elevation))
        assert angle_error(sc.true_codebook, sc.geom, truth_resp, ev) < 0.005

    def test_mismatched_model_positive(self):
        sc = scenario_2d(seed=0)
        ev = default_eval_set_2d()
        truth_resp = beam_response_matrix(sc.true_codebook, sc.geom, (ev.azimuth, ev.elevation))
        model = normalized_ideal_codebook(sc.geom, sc.nominal_angles)
        ea = angle_error(model, sc.geom, truth_resp, ev)
        assert 0.3 < ea < 3.0

    def test_single_angle_equals_squared_bias(self):
        from beamcal.estimation import pseudo_true

        sc = scenario_2d(seed=2)
        model = normalized_ideal_codebook(sc.geom, sc.nominal_angles)
        d = AngleDirection.from_degrees(9.0)
        ev = EvaluationAngleSet.from_degrees([9.0])
        truth_resp = beam_response_matrix(sc.true_codebook, sc.geom, (ev.azimuth, ev.elevation))
        ms = angle_error_mean_square(model, sc.geom, truth_resp, ev)
        est = pseudo_true(truth_resp[:, 0], model, sc.geom, d)
        bias = np.rad2deg(est.angle.azimuth - d.azimuth)
        assert abs(ms - bias**2) < 1e-9

    def test_invariant_to_per_angle_scaling(self):
        rng = np.random.default_rng(3)
        sc = scenario_2d(seed=3)
        ev = EvaluationAngleSet.from_degrees(np.linspace(-30, 30, 7))
        truth_resp = beam_response_matrix(sc.true_codebook, sc.geom, (ev.azimuth, ev.elevation))
        model = normalized_ideal_codebook(sc.geom, sc.nominal_angles)
        scales = rng.standard_normal(7) + 1j * rng.standard_normal(7)
        a = angle_error(model, sc.geom, truth_resp, ev)
        b = angle_error(model, sc.geom, truth_resp * scales[None, :], ev)
        assert abs(a - b) < 1e-9


class TestGainLoss:
    def test_matched_everything_is_zero_db(self):
        sc = scenario_2d(seed=0)
        ev = default_eval_set_2d()
        resp = beam_response_matrix(sc.true_codebook, sc.geom, (ev.azimuth, ev.elevation))
        assert gain_loss(resp, resp, resp) == 0.0

    def test_better_selection_raises_gain(self):
        # Two beams; the ideal reference picks beam 0, but the true pattern is
        # stronger on beam 1.  A calibrated pattern that discovers this earns a
        # higher (less negative) score.
        truth = np.array([[0.4, 0.4], [1.0, 1.0]])
        ideal = np.array([[1.0, 1.0], [0.5, 0.5]])
        uncal = gain_loss(ideal, truth, ideal)  # selects beam 0, truth 0.4
        cal = gain_loss(truth, truth, ideal)  # selects beam 1, truth 1.0
        assert cal > uncal
        assert cal == 0.0  # |1.0|^2 / |1.0|^2

    def test_tie_breaks_to_lowest_index(self):
        tie = np.array([[1.0], [1.0]])
        truth = np.array([[0.8], [0.2]])
        # calibrated ties on both beams: beam 0 must win, scoring truth 0.8.
        val = gain_loss(tie, truth, tie)
        assert abs(val - 10 * np.log10(0.8**2 / 1.0)) < 1e-12

    def test_depends_only_on_argmax(self):
        rng = np.random.default_rng(4)
        truth = rng.uniform(0.1, 1.0, (5, 9))
        ideal = rng.uniform(0.1, 1.0, (5, 9))
        cal = rng.uniform(0.1, 1.0, (5, 9))
        base = gain_loss(cal, truth, ideal)
        # Any monotone per-column transform preserving the argmax gives the same loss.
        boosted = cal**3 * 7.7
        assert abs(gain_loss(boosted, truth, ideal) - base) < 1e-12

    def test_zero_reference_excluded_with_warning(self):
        truth = np.array([[1.0, 1.0], [0.5, 0.5]])
        ideal = np.array([[1.0, 0.0], [0.5, 0.0]])
        with pytest.warns(UserWarning):
            val = gain_loss(ideal, truth, ideal)
        assert np.isfinite(val)


def test_evaluate_codebook_report_fields():
    sc = scenario_2d(seed=0)
    ev = EvaluationAngleSet.from_degrees(np.linspace(-20, 20, 5))
    report = evaluate_codebook(
        sc.true_codebook, sc.geom, sc.true_codebook,
        ideal_codebook(sc.geom, sc.nominal_angles), ev, model="m4", method="ao",
    )
    assert report.response_similarity == 1.0
    assert report.angle_error_rms_deg < 0.005
    assert report.model == "m4"
    row = report.csv_row()
    assert row.startswith("m4,ao,")
