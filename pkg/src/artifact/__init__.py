"""Inference of joint densities and transfer operators from batches of
unpaired samples, using entropic transport kernels and multiplicative
KL-divergence solvers."""

from artifact.analysis import (
    SpectralResult,
    TransferEstimate,
    l2_baseline,
    l2_error,
    parametric_fit,
    q_eval,
    q_matrix,
    svd_cluster,
    transfer_matrix,
)
from artifact.entropic_kernel import (
    EntropicPotentials,
    KernelMatrix,
    extend_potentials,
    kernel_matrix,
    load_potentials,
    plan_matrix,
    save_potentials,
    sinkhorn,
)
from artifact.errors import (
    AssemblyError,
    ConfigError,
    ConvergenceError,
    DegenerateInstanceError,
    Error,
    EvaluationError,
    NumericalError,
    UnsupportedError,
)
from artifact.geometry import (
    DiscreteMeasure,
    MetricSpace,
    box,
    cost_matrix,
    dist,
    pairwise_dist,
    unit_torus,
)
from artifact.inference import (
    BatchDataset,
    BatchKroneckerOp,
    Coupling,
    InferenceProblem,
    assemble_problem,
    coverage_anchors,
    eval_J_batches,
    eval_J_empirical,
    eval_J_permutation,
    furthest_point_subsample,
    generate_dataset,
    load_dataset,
    nn_weights,
    pooled_measures,
    save_dataset,
    uniform_anchors,
)
from artifact.seeding import stream
from artifact.solver import (
    KLInstance,
    Partition,
    SolverState,
    cemml_run,
    emml_run,
    kkt_residual,
    kl_div,
    write_trace_csv,
)
from artifact.systems import (
    DoubleGyre,
    GroundTruthDensity,
    TorusMixture,
    density_p,
    gyre_flow,
    gyre_velocity,
    sample_batch,
    sample_pair,
    system_spaces,
    truth,
    wrapped_normal_pdf,
)

__version__ = "0.1.0"
