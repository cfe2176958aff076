from jfom.problems.benchmarks import (
    LQRWeights,
    RiccatiOracle,
    make_lqr,
    make_strict_feedback,
    make_unicycle_avoid,
    penalty_bound,
)
from jfom.problems.perturb import perturb
from jfom.problems.problem import (
    Box,
    ControlProblem,
    PerturbationBudget,
    evaluate_dynamics,
    evaluate_running_cost,
    evaluate_terminal_cost,
)
