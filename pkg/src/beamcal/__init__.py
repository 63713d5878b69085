"""Beam pattern calibration toolkit.

Forward model, synthetic measurement generation, MLE angle estimation,
calibration solvers (alternating and gradient-based over two losses),
sensing/communication quality metrics, and federated multi-UE fusion.
"""

from .arrays import (
    AngleDirection,
    ArrayGeometry,
    BeamformingAngles,
    Codebook,
    NormMode,
    beam_response,
    beam_response_matrix,
    element_pattern,
    ideal_codebook,
    steering_matrix,
    steering_vector,
)
from .calibration import (
    CalibrationDivergedError,
    CalibrationState,
    SolverConfig,
    ael_gradients,
    ael_loss,
    anchor_indices_for,
    calibrate,
    calibrate_m4_pipeline,
    initial_state,
    rel_gradient_gamma,
    rel_gradient_w,
    rel_loss,
    update_gamma_closed_form,
    update_w_trust_region,
)
from .cooperative import (
    CoopHistory,
    FusionWeights,
    LocalUpdate,
    fuse,
    local_delta,
    run_rounds,
    split_measurements,
)
from .estimation import (
    AmbiguousAngleError,
    GridSpec,
    PseudoTrueEstimate,
    mle_angle,
    nuisance_gain,
    position_error,
    pseudo_true,
    snr_loss,
)
from .metrics import (
    EvaluationAngleSet,
    MetricReport,
    angle_error,
    default_eval_set_2d,
    default_eval_set_3d,
    evaluate_codebook,
    gain_loss,
    response_similarity,
)
from .synth import (
    MeasurementSet,
    PerturbationSpec,
    Scatterer,
    Scenario,
    delay_derotation,
    generate_measurements,
    los_gain,
    nlos_residual,
    perturb_codebook,
)

__version__ = "0.1.0"
