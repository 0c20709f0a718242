"""Hierarchical hidden Markov jump processes for longitudinal screening data.

Latent disease progression follows a continuous-time Markov jump process
whose intensity matrix is piecewise constant over age segments; a latent
frailty class selects per-class dynamics.  The package covers model
definition and persistence, trajectory and cohort simulation, exact
marginal-likelihood inference, hybrid soft/hard EM training with an
L-BFGS M-step, last-visit risk prediction, and Kaplan-Meier validation.
"""

from .model import (
    ALIVE,
    DEATH,
    DEFAULT_AGE_CUTS,
    AgePartition,
    ClassComponent,
    EMConfig,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
    ScreeningSequence,
    TopologySpec,
    Visit,
    make_visit,
    segment_index,
    validate_model,
)
from .kernels import (
    TransitionMatrix,
    expm,
    expm_with_directional_derivative,
    interval_transition,
)
from .emissions import (
    log_censor_likelihood,
    log_visit_likelihood,
    sample_visit,
)
from .simulate import (
    LatentTrajectory,
    SimulationSpec,
    complete_log_likelihood,
    simulate_cohort,
    simulate_sequence,
    simulate_trajectory,
)
from .inference import (
    ClassPosterior,
    StatePosterior,
    class_posterior,
    ffbs_sample,
    forward,
    smoothed_marginals,
    viterbi,
)
from .training import (
    ClusterPartition,
    EStepCache,
    FitReport,
    check_gradients,
    e_step,
    emcll,
    emcll_gradient,
    fit,
    initialize_model,
    mstep,
)
from .validate import (
    KaplanMeierCurve,
    PredictionResult,
    avg_posterior_predictive,
    classification_metrics,
    extract_failure_time,
    kaplan_meier,
    km_band,
    predict_last_visit,
    risk_stratify,
)
from .io import load_model, read_records, save_model, write_records

__version__ = "0.1.0"
