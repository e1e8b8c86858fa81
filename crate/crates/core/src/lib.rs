//! Quadratic tensor completion: models, objectives, solvers, and sweep
//! harnesses.
//!
//! A third-order tensor is modeled entrywise as a sum over factor columns
//! of a quadratic form in the three factor rows,
//! `T[i,j,k] = sum_l kappa(X[i,l], Y[j,l], Z[k,l])`, where `kappa` is
//! determined by a symmetric 3x3 kernel matrix. Choosing the kernel
//! recovers familiar interaction models (pairwise inner products, the
//! translation score `|a + b - c|^2`, plain squared norms) while keeping
//! a single completion machinery: sample entries, fit factors by
//! alternating least squares or gradient descent, or solve the convex
//! lifted relaxation and audit the nonconvex landscape against it.
//!
//! The crate exposes the building blocks in dependency order: dense
//! tensors and observation sets ([`tensor`]), kernels and the implicit
//! sensing operator ([`kernel`]), factor models ([`model`]), the
//! regularized objective ([`objective`]), the solvers ([`solvers`]), and
//! batch experiment drivers ([`harness`]).

pub mod error;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rng;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use harness::{
    auto_rank, convergence_trace, cp_vs_quadratic, default_sweep_lambda, gd_regularization,
    gd_solve_stable, gd_stable_step, generalization_gap, held_out_error, phase_transition_sweep,
    run_solver, synthetic_instance, target_samples, trace_non_increasing_after_first, GapReport,
    Instance, ModelComparison, RunOutcome, SolverKind, SweepRow, SweepSpec, TraceRow, TrainedModel,
    TruthKind,
};
pub use solvers::{
    als_solve, als_solve_from, cp_als_solve, fw_solve, gd_solve, gd_solve_from, multi_init_audit,
    AuditReport, SolveResult, SolverConfig, Termination,
};
pub use kernel::{make_kernel, sensing_accumulate, sensing_inner, KernelKind, KernelMatrix, SensingEntry};
pub use model::{
    incoherence_alpha, random_ground_truth, CPModel, FactorDistribution, FactorModel, GroundTruth,
    DENSE_MODE_CAP,
};
pub use objective::{
    default_lambdas, make_perturbation, objective_eval, objective_grad, q_alpha, q_alpha_deriv,
    ObjectiveBreakdown, Perturbation, RegularizationConfig,
};
pub use tensor::{
    mean_squared_error_full, relative_error_full, relative_test_error, sample_uniform_entries,
    DenseTensor, EntryIndex, ObservationSet, TensorDims,
};
