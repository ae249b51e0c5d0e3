"""Neural regression solvers for semilinear parabolic PDEs via FBSDEs."""

from .core import (
    AnalyticSolution,
    ProblemSpec,
    RunReport,
    SummaryStats,
    TimeGrid,
    relative_error,
    summarize,
)
from .paths import (
    BranchBatch,
    PathEnsemble,
    RngStream,
    gaussian_increments,
    sample_branches,
    simulate_forward,
)
from .neuralnet import (
    AdamState,
    GradBundle,
    MlpNetwork,
    adam_update,
    backward_batch,
    forward_batch,
    grad_check,
    init_xavier,
    load_network,
    save_network,
)
from .problems import (
    american_put,
    binomial_american_put,
    example1,
    example1_analytic,
    example2,
    example2_analytic,
    get_problem,
    khat,
    linear_toy,
)
from .schemes import (
    SchemeSolution,
    SolveResult,
    StepTargets,
    TrainConfig,
    compute_step_targets,
    dbdp1_solve,
    dbdp1_step,
    dbr_solve,
    evaluate_y_next,
    rdbr_solve,
    train_y_step,
    train_z_step,
)
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    apply_paper_budget,
    emit_csv,
    emit_profile,
    parse_config,
    run_experiment,
    serialize_config,
)

__version__ = "0.1.0"
