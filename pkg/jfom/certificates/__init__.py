from jfom.certificates.basis import BasisKind, FeatureBasis, feature_jacobians, feature_values
from jfom.certificates.certificate import (
    Certificate,
    FeasibilityReport,
    GradientBound,
    assemble_blockwise,
    block_running_slacks,
    block_terminal_slacks,
    c1_norm,
    certified_lower_bound,
    estimate_feasibility,
    evaluate,
    fit_certificate,
    gradient_bound,
    perturbation_degrade,
    running_slack,
    shifted_cost_margins,
    terminal_rows,
    terminal_slack,
    time_shift,
    transport_rows,
    validate_certificate,
)
from jfom.certificates.sampling import SamplePlan, SampleSet, as_sample_set
