//! Training algorithms: alternating least squares and gradient descent on
//! the factored model, a projection-free solver for the lifted convex
//! program, the CP baseline, and a multi-start landscape audit.

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::model::{random_factor_matrix, FactorModel};
use crate::rng;
use crate::tensor::{DenseTensor, ObservationSet, TensorDims};

mod als;
mod audit;
mod cp;
mod fw;
mod gd;

pub use als::{als_solve, als_solve_from};
pub use audit::{multi_init_audit, AuditReport};
pub use cp::cp_als_solve;
pub use fw::fw_solve;
pub use gd::{gd_solve, gd_solve_from};

pub(crate) use fw::{fw_minimize, DiagPenalty, TraceBallProblem};

/// Iteration controls shared by every solver. `step_size` only matters for
/// gradient descent and `line_search` only for the convex solver; the other
/// algorithms ignore them.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative change threshold: iteration stops once the objective moves
    /// by less than `tol` relatively (for the convex solver, once the
    /// duality gap falls below `tol` times the starting gap).
    pub tol: f64,
    pub step_size: f64,
    pub line_search: bool,
    pub seed: u64,
}

impl SolverConfig {
    pub fn als() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-8,
            step_size: 0.05,
            line_search: false,
            seed: 0,
        }
    }

    pub fn gd() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-8,
            step_size: 0.05,
            line_search: false,
            seed: 0,
        }
    }

    pub fn fw() -> Self {
        Self {
            max_iters: 2_000,
            tol: 1e-8,
            step_size: 0.05,
            line_search: true,
            seed: 0,
        }
    }

    pub fn cp() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-8,
            step_size: 0.05,
            line_search: false,
            seed: 0,
        }
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_step_size(mut self, step: f64) -> Self {
        self.step_size = step;
        self
    }

    pub fn with_line_search(mut self, on: bool) -> Self {
        self.line_search = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tol must be non-negative and finite, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    pub(crate) fn validate_step(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step_size must be positive and finite, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Why a solve loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    Tolerance,
    NonDecreasing,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::MaxIters => "max_iters",
            Termination::Tolerance => "tolerance",
            Termination::NonDecreasing => "non_decreasing",
        };
        f.write_str(s)
    }
}

/// Outcome of one solve: the fitted model plus per-iteration traces. All
/// traces have `iterations_run + 1` points, the first describing the
/// initial iterate. Error traces are root-mean-square residuals: over the
/// observed entries for training, over the held-out entries against the
/// supplied ground truth for testing (absent when no truth was supplied).
/// The convex solver additionally reports its duality-gap trace and the
/// nuclear trace of each iterate.
#[derive(Debug, Clone)]
pub struct SolveResult<M> {
    pub model: M,
    pub objective_trace: Vec<f64>,
    pub train_error_trace: Vec<f64>,
    pub test_error_trace: Option<Vec<f64>>,
    pub duality_gap_trace: Option<Vec<f64>>,
    pub iterate_trace_norms: Option<Vec<f64>>,
    pub iterations_run: usize,
    pub termination: Termination,
}

impl<M> SolveResult<M> {
    pub(crate) fn check_trace_lengths(&self) {
        let want = self.iterations_run + 1;
        debug_assert_eq!(self.objective_trace.len(), want);
        debug_assert_eq!(self.train_error_trace.len(), want);
        if let Some(t) = &self.test_error_trace {
            debug_assert_eq!(t.len(), want);
        }
    }
}

/// Random starting factors: i.i.d. normal entries with variance
/// `1/sqrt(d_mode R)` per mode, so initial predictions are order one.
pub(crate) fn random_init(
    dims: TensorDims,
    rank: usize,
    kernel: KernelMatrix,
    seed: u64,
) -> Result<FactorModel> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let mut rng = rng::chacha(seed);
    let sigma = |d: usize| 1.0 / ((d * rank) as f64).powf(0.25);
    let x = random_factor_matrix(dims.d1(), rank, sigma(dims.d1()), &mut rng);
    let y = random_factor_matrix(dims.d2(), rank, sigma(dims.d2()), &mut rng);
    let z = random_factor_matrix(dims.d3(), rank, sigma(dims.d3()), &mut rng);
    FactorModel::new(x, y, z, kernel)
}

/// Held-out error tracker: compares a dense reconstruction against the
/// ground truth on the entries outside the training set.
pub(crate) struct TestTracer<'a> {
    truth: &'a DenseTensor,
    observed_sq: ObservedSq<'a>,
    holdout_count: usize,
}

struct ObservedSq<'a> {
    obs: &'a ObservationSet,
}

impl<'a> TestTracer<'a> {
    pub fn new(truth: &'a DenseTensor, obs: &'a ObservationSet) -> Result<Self> {
        if truth.dims() != obs.dims() {
            return Err(Error::ShapeMismatch(format!(
                "truth tensor is {} but observations are over {}",
                truth.dims(),
                obs.dims()
            )));
        }
        let total = truth.dims().total();
        if obs.len() >= total {
            return Err(Error::DegenerateMetric(
                "no held-out entries: every entry is observed".into(),
            ));
        }
        Ok(Self {
            truth,
            observed_sq: ObservedSq { obs },
            holdout_count: total - obs.len(),
        })
    }

    /// RMS error over held-out entries, computed as the full squared error
    /// minus the squared error on the training entries.
    pub fn rms(&self, estimate: &DenseTensor) -> f64 {
        let mut full = 0.0;
        for (a, b) in self.truth.values().iter().zip(estimate.values()) {
            let d = a - b;
            full += d * d;
        }
        let mut on_train = 0.0;
        for &(t, y) in self.observed_sq.obs.entries() {
            let d = y - estimate.get(t).expect("observation in range");
            on_train += d * d;
        }
        // Guard against cancellation noise making the difference negative.
        ((full - on_train).max(0.0) / self.holdout_count as f64).sqrt()
    }
}
