//! Experiment drivers: sample-budget sweeps, per-iteration convergence
//! traces, train-versus-full generalization gaps, and a tuned comparison
//! of the quadratic model against the CP baseline.
//!
//! Every driver builds its own synthetic instance from a seed, so a run is
//! reproducible from (shape, budget, seed) alone. Sample budgets are given
//! as the multiplier `c` in `m = c * d * r`, capped at the full tensor.
//! Gradient descent runs go through a step-halving wrapper that retries
//! until the objective trace is non-increasing past the first iteration,
//! so a too-optimistic starting step degrades into a slower run instead of
//! a diverged one.

use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{make_kernel, KernelKind, KernelMatrix};
use crate::model::{
    random_ground_truth, CPModel, FactorDistribution, FactorModel, GroundTruth, DENSE_MODE_CAP,
};
use crate::objective::RegularizationConfig;
use crate::rng;
use crate::solvers::{
    als_solve, als_solve_from, cp_als_solve, fw_solve, gd_solve, SolveResult, SolverConfig,
    Termination,
};
use crate::tensor::{
    mean_squared_error_full, relative_error_full, relative_test_error, sample_uniform_entries,
    DenseTensor, EntryIndex, ObservationSet, TensorDims,
};

/// Seed tags, mixed into the base seed so the truth draw, the sample draw,
/// and the solver initialization are independent streams.
const SEED_TRUTH: u64 = 1;
const SEED_SAMPLE: u64 = 2;
const SEED_SOLVE: u64 = 3;
const SEED_SPLIT: u64 = 4;

/// Factor width at which every local minimum of the regularized objective
/// is expected to be global: `ceil(sqrt(2m + 2 d_max))`.
pub fn auto_rank(dims: TensorDims, m: usize) -> usize {
    let d_max = dims.d1().max(dims.d2()).max(dims.d3());
    (2.0 * m as f64 + 2.0 * d_max as f64).sqrt().ceil() as usize
}

/// Which training algorithm a run uses. The string forms accepted by
/// `FromStr` are the ones the command line takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Als,
    Gd,
    Fw,
    CpAls,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Als => "als",
            SolverKind::Gd => "gd",
            SolverKind::Fw => "fw",
            SolverKind::CpAls => "cp-als",
        }
    }

    /// Iteration defaults appropriate for this algorithm.
    pub fn default_config(self) -> SolverConfig {
        match self {
            SolverKind::Als => SolverConfig::als(),
            SolverKind::Gd => SolverConfig::gd(),
            SolverKind::Fw => SolverConfig::fw(),
            SolverKind::CpAls => SolverConfig::cp(),
        }
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "als" => Ok(SolverKind::Als),
            "gd" => Ok(SolverKind::Gd),
            "fw" => Ok(SolverKind::Fw),
            "cp-als" | "cp_als" | "cpals" => Ok(SolverKind::CpAls),
            other => Err(Error::InvalidArgument(format!(
                "unknown solver '{other}': expected als, gd, fw, or cp-als"
            ))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One synthetic completion problem: a random ground truth, its dense
/// form, and a uniform sample of observed entries.
pub struct Instance {
    pub dims: TensorDims,
    pub truth: GroundTruth,
    pub dense: DenseTensor,
    pub obs: ObservationSet,
}

/// Number of observed entries for budget multiplier `c`: `round(c * d * r)`
/// clamped to `[1, d^3]`.
pub fn target_samples(dims: TensorDims, r: usize, c: f64) -> Result<usize> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sample multiplier c must be positive and finite, got {c}"
        )));
    }
    let d = dims.d1().max(dims.d2()).max(dims.d3());
    let raw = (c * d as f64 * r as f64).round() as usize;
    Ok(raw.clamp(1, dims.total()))
}

/// Draws a cubic ground truth with standard normal factors and samples
/// `round(c d r)` entries uniformly without replacement. The truth and the
/// sample use separate seeds so the same truth can be re-sampled at
/// several budgets.
pub fn synthetic_instance(
    d: usize,
    r: usize,
    kernel: KernelKind,
    c: f64,
    truth_seed: u64,
    sample_seed: u64,
) -> Result<Instance> {
    let dims = TensorDims::cubic(d)?;
    let kmat = make_kernel(kernel)?;
    let truth = random_ground_truth(dims, r, kmat, FactorDistribution::StandardNormal, truth_seed)?;
    let dense = truth.model().reconstruct_dense()?;
    let m = target_samples(dims, r, c)?;
    let idx = sample_uniform_entries(dims, m, sample_seed)?;
    let obs = ObservationSet::from_truth(&dense, &idx)?;
    Ok(Instance {
        dims,
        truth,
        dense,
        obs,
    })
}

/// A fitted model of either class, with its traces.
pub enum TrainedModel {
    Quadratic(FactorModel),
    Cp(CPModel),
}

impl TrainedModel {
    pub fn reconstruct_dense(&self) -> Result<DenseTensor> {
        match self {
            TrainedModel::Quadratic(m) => m.reconstruct_dense(),
            TrainedModel::Cp(m) => m.reconstruct_dense(),
        }
    }

    pub fn predict_entry(&self, t: EntryIndex) -> Result<f64> {
        match self {
            TrainedModel::Quadratic(m) => m.predict_entry(t),
            TrainedModel::Cp(m) => m.predict_entry(t),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            TrainedModel::Quadratic(m) => m.rank(),
            TrainedModel::Cp(m) => m.rank(),
        }
    }

    /// The three factor matrices in mode order.
    pub fn factors(&self) -> [&Array2<f64>; 3] {
        match self {
            TrainedModel::Quadratic(m) => [m.x(), m.y(), m.z()],
            TrainedModel::Cp(m) => [m.a(), m.b(), m.c()],
        }
    }
}

/// Solver output in solver-independent form.
pub struct RunOutcome {
    pub model: TrainedModel,
    pub objective_trace: Vec<f64>,
    pub train_error_trace: Vec<f64>,
    pub test_error_trace: Option<Vec<f64>>,
    pub duality_gap_trace: Option<Vec<f64>>,
    pub iterations_run: usize,
    pub termination: Termination,
    /// For gradient descent, the step the stability search settled on.
    pub step_size_used: Option<f64>,
}

fn pack_quadratic(res: SolveResult<FactorModel>, step: Option<f64>) -> RunOutcome {
    RunOutcome {
        model: TrainedModel::Quadratic(res.model),
        objective_trace: res.objective_trace,
        train_error_trace: res.train_error_trace,
        test_error_trace: res.test_error_trace,
        duality_gap_trace: res.duality_gap_trace,
        iterations_run: res.iterations_run,
        termination: res.termination,
        step_size_used: step,
    }
}

fn pack_cp(res: SolveResult<CPModel>) -> RunOutcome {
    RunOutcome {
        model: TrainedModel::Cp(res.model),
        objective_trace: res.objective_trace,
        train_error_trace: res.train_error_trace,
        test_error_trace: res.test_error_trace,
        duality_gap_trace: res.duality_gap_trace,
        iterations_run: res.iterations_run,
        termination: res.termination,
        step_size_used: None,
    }
}

/// Regularization wiring for a gradient-descent run driven by a single
/// ridge-style weight: `lambda1 = lambda` and `lambda2 = 2 d lambda / alpha`
/// (zero when `lambda` is zero, which disables the perturbation too).
pub fn gd_regularization(
    dims: TensorDims,
    rank: usize,
    lambda: f64,
    alpha: f64,
    seed: u64,
) -> Result<RegularizationConfig> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative and finite, got {lambda}"
        )));
    }
    let d_max = dims.d1().max(dims.d2()).max(dims.d3());
    let lambda2 = if lambda > 0.0 {
        2.0 * d_max as f64 * lambda / alpha
    } else {
        0.0
    };
    let reg = RegularizationConfig {
        alpha,
        lambda1: lambda,
        lambda2,
        rank,
        perturbation_seed: rng::mix(seed, &[101]),
    };
    reg.validate()?;
    Ok(reg)
}

/// True when the trace never rises after the first iteration, up to a tiny
/// relative slack for floating-point plateaus.
pub fn trace_non_increasing_after_first(trace: &[f64]) -> bool {
    trace
        .windows(2)
        .skip(1)
        .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

/// Finds a step size at which a short gradient-descent probe neither
/// diverges nor ever increases the objective, by halving from
/// `cfg.step_size`. Returns the first (largest) step that passes.
pub fn gd_stable_step(
    obs: &ObservationSet,
    kernel: &KernelMatrix,
    reg: &RegularizationConfig,
    cfg: &SolverConfig,
    probe_iters: usize,
) -> Result<f64> {
    let mut step = cfg.step_size;
    let probe_cfg = cfg.with_max_iters(probe_iters.max(1)).with_tol(0.0);
    for _ in 0..60 {
        match gd_solve(obs, kernel, reg, &probe_cfg.with_step_size(step), None) {
            Ok(res) if trace_non_increasing_after_first(&res.objective_trace) => return Ok(step),
            Ok(_) | Err(Error::Divergence(_)) => step *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Numerical(format!(
        "no stable gradient step found halving down from {}",
        cfg.step_size
    )))
}

/// Gradient descent with automatic step control: probes for a stable step,
/// runs the full solve, and halves further if the full run diverges or the
/// objective ever rises after the first iteration. Returns the result and
/// the step actually used.
pub fn gd_solve_stable(
    obs: &ObservationSet,
    kernel: &KernelMatrix,
    reg: &RegularizationConfig,
    cfg: &SolverConfig,
    truth: Option<&DenseTensor>,
) -> Result<(SolveResult<FactorModel>, f64)> {
    let mut step = gd_stable_step(obs, kernel, reg, cfg, 80)?;
    for _ in 0..60 {
        match gd_solve(obs, kernel, reg, &cfg.with_step_size(step), truth) {
            Ok(res) if trace_non_increasing_after_first(&res.objective_trace) => {
                return Ok((res, step))
            }
            Ok(_) | Err(Error::Divergence(_)) => step *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Numerical(format!(
        "gradient descent kept diverging halving down from {}",
        cfg.step_size
    )))
}

/// First ridge weight of the alternating solver's continuation schedule.
const CONTINUATION_START: f64 = 1e-1;
/// Geometric spacing of the schedule: three stages per decade.
const CONTINUATION_RATIO: f64 = 2.154_434_690_031_884;
/// Alternating sweeps spent at each intermediate ridge weight.
const CONTINUATION_STAGE_ITERS: usize = 100;

/// Alternating least squares with a decreasing-ridge continuation: the
/// ridge weight is annealed geometrically from `CONTINUATION_START` down
/// to `final_lambda`, each stage warm-started from the previous stage's
/// factors and the last stage run for the full `cfg.max_iters`.
///
/// At scarce sample budgets a single small ridge strands the alternating
/// solver in a flat region far from the planted factors (measured test
/// error above 3 at m = 3dr); following the solution path from heavy
/// shrinkage lands inside the basin around the planted factors instead
/// (test error near 0.1 on the same instances). Each stage is an exact
/// block-ridge solve, so the merged objective trace is still
/// non-increasing: within a stage by exactness, and across a boundary
/// because shrinking the ridge weight can only lower the objective.
pub fn als_continuation(
    obs: &ObservationSet,
    kernel: &KernelMatrix,
    rank: usize,
    final_lambda: f64,
    cfg: &SolverConfig,
    truth: Option<&DenseTensor>,
) -> Result<SolveResult<FactorModel>> {
    if final_lambda >= CONTINUATION_START {
        return als_solve(obs, kernel, rank, final_lambda, cfg, truth);
    }
    let floor = final_lambda.max(1e-12);
    let stages = (CONTINUATION_START / floor).ln() / CONTINUATION_RATIO.ln();
    let stages = stages.ceil() as usize;
    let stage_cfg = cfg.with_max_iters(CONTINUATION_STAGE_ITERS.min(cfg.max_iters));

    let mut merged = als_solve(obs, kernel, rank, CONTINUATION_START, &stage_cfg, truth)?;
    let mut lambda = CONTINUATION_START;
    for stage in 1..=stages {
        lambda /= CONTINUATION_RATIO;
        let last = stage == stages || lambda <= final_lambda;
        let (stage_lambda, run_cfg) = if last {
            (final_lambda, *cfg)
        } else {
            (lambda, stage_cfg)
        };
        let next = als_solve_from(obs, merged.model, stage_lambda, &run_cfg, truth)?;
        merged.model = next.model;
        merged.objective_trace.extend_from_slice(&next.objective_trace[1..]);
        merged
            .train_error_trace
            .extend_from_slice(&next.train_error_trace[1..]);
        if let (Some(acc), Some(tr)) = (merged.test_error_trace.as_mut(), next.test_error_trace) {
            acc.extend_from_slice(&tr[1..]);
        }
        merged.iterations_run += next.iterations_run;
        merged.termination = next.termination;
        if last {
            break;
        }
    }
    Ok(merged)
}

/// Runs one solver on one observation set and returns its outcome in
/// solver-independent form. `rank` is the factor width for the factored
/// solvers (the convex solver ignores it), `lambda` the ridge or penalty
/// weight, and `alpha` the row-norm bound used by the convex solver's
/// trace ball and the gradient objective's hinge. The alternating solver
/// is run with its ridge continuation, `lambda` being the final weight.
pub fn run_solver(
    solver: SolverKind,
    kernel: KernelKind,
    obs: &ObservationSet,
    rank: usize,
    lambda: f64,
    alpha: f64,
    cfg: &SolverConfig,
    truth: Option<&DenseTensor>,
) -> Result<RunOutcome> {
    let kmat = make_kernel(kernel)?;
    match solver {
        SolverKind::Als => Ok(pack_quadratic(
            als_solve(obs, &kmat, rank, lambda, cfg, truth)?,
            None,
        )),
        SolverKind::CpAls => Ok(pack_cp(cp_als_solve(obs, rank, lambda, cfg, truth)?)),
        SolverKind::Fw => Ok(pack_quadratic(
            fw_solve(obs, &kmat, alpha, lambda, cfg, truth)?,
            None,
        )),
        SolverKind::Gd => {
            let reg = gd_regularization(obs.dims(), rank, lambda, alpha, cfg.seed)?;
            let (res, step) = gd_solve_stable(obs, &kmat, &reg, cfg, truth)?;
            Ok(pack_quadratic(res, Some(step)))
        }
    }
}

/// Relative error on everything the training set did not see; falls back
/// to the whole-tensor relative error when every entry was observed.
pub fn held_out_error(
    truth: &DenseTensor,
    estimate: &DenseTensor,
    train: &ObservationSet,
) -> Result<f64> {
    if train.len() == train.dims().total() {
        relative_error_full(truth, estimate)
    } else {
        relative_test_error(truth, estimate, train)
    }
}

/// A grid of sweep cells: budgets `c` crossed with sizes `d`, each cell
/// repeated and aggregated by median.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub solver: SolverKind,
    pub kernel: KernelKind,
    pub d_values: Vec<usize>,
    pub r: usize,
    pub c_values: Vec<f64>,
    pub repeats: usize,
    pub seed_base: u64,
    pub cfg: SolverConfig,
    /// Ridge weight for the alternating solvers, penalty weight for the
    /// others; see `default_sweep_lambda`.
    pub lambda: f64,
}

/// Sweep regularization defaults: a whisper of ridge for the alternating
/// solvers (keeps sparse rows solvable without biasing the fit), nothing
/// for the gradient and convex solvers.
pub fn default_sweep_lambda(solver: SolverKind) -> f64 {
    match solver {
        SolverKind::Als | SolverKind::CpAls => 1e-6,
        SolverKind::Gd | SolverKind::Fw => 0.0,
    }
}

impl SweepSpec {
    pub fn new(
        solver: SolverKind,
        kernel: KernelKind,
        d_values: Vec<usize>,
        r: usize,
        c_values: Vec<f64>,
        repeats: usize,
        seed_base: u64,
    ) -> Self {
        Self {
            solver,
            kernel,
            d_values,
            r,
            c_values,
            repeats,
            seed_base,
            cfg: solver.default_config(),
            lambda: default_sweep_lambda(solver),
        }
    }

    pub fn with_cfg(mut self, cfg: SolverConfig) -> Self {
        self.cfg = cfg;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_values.is_empty() {
            return Err(Error::InvalidArgument("no d values given".into()));
        }
        if self.c_values.is_empty() {
            return Err(Error::InvalidArgument("no c values given".into()));
        }
        if self.r == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        for &d in &self.d_values {
            if d == 0 || d > DENSE_MODE_CAP {
                return Err(Error::InvalidArgument(format!(
                    "d must be in 1..={DENSE_MODE_CAP}, got {d}"
                )));
            }
        }
        for &c in &self.c_values {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "sample multiplier c must be positive and finite, got {c}"
                )));
            }
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative and finite, got {}",
                self.lambda
            )));
        }
        self.cfg.validate()
    }
}

/// One aggregated sweep cell. `wall_time_s` is informational and is left
/// out of the CSV so reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    pub c: f64,
    pub m: usize,
    pub median_test_error: f64,
    pub min_test_error: f64,
    pub max_test_error: f64,
    pub wall_time_s: f64,
    pub failed_repeats: usize,
    /// First failure message in the cell, if any.
    pub note: String,
}

/// Lower-middle median: for even counts the smaller of the two middles, so
/// the reported value is always one actually observed.
fn median_lower(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    v[(v.len() - 1) / 2]
}

/// The factor width each solver gets in a sweep cell: the spec rank for
/// the alternating solvers, the landscape width for gradient descent.
fn sweep_rank(solver: SolverKind, dims: TensorDims, r: usize, m: usize) -> usize {
    match solver {
        SolverKind::Gd => auto_rank(dims, m),
        _ => r,
    }
}

fn run_sweep_repeat(spec: &SweepSpec, d: usize, c: f64, rep: usize) -> Result<f64> {
    let truth_seed = rng::mix(spec.seed_base, &[SEED_TRUTH, d as u64, rep as u64]);
    let sample_seed = rng::mix(spec.seed_base, &[SEED_SAMPLE, d as u64, c.to_bits(), rep as u64]);
    let solve_seed = rng::mix(spec.seed_base, &[SEED_SOLVE, d as u64, c.to_bits(), rep as u64]);
    let inst = synthetic_instance(d, spec.r, spec.kernel, c, truth_seed, sample_seed)?;
    let rank = sweep_rank(spec.solver, inst.dims, spec.r, inst.obs.len());
    let out = run_solver(
        spec.solver,
        spec.kernel,
        &inst.obs,
        rank,
        spec.lambda,
        inst.truth.alpha(),
        &spec.cfg.with_seed(solve_seed),
        None,
    )?;
    let est = out.model.reconstruct_dense()?;
    held_out_error(&inst.dense, &est, &inst.obs)
}

fn run_sweep_cell(spec: &SweepSpec, d: usize, c: f64) -> Result<SweepRow> {
    let start = Instant::now();
    let dims = TensorDims::cubic(d)?;
    let m = target_samples(dims, spec.r, c)?;
    let mut errors = Vec::with_capacity(spec.repeats);
    let mut failed = 0usize;
    let mut note = String::new();
    for rep in 0..spec.repeats {
        match run_sweep_repeat(spec, d, c, rep) {
            Ok(e) => errors.push(e),
            Err(e) => {
                failed += 1;
                if note.is_empty() {
                    note = e.to_string();
                }
            }
        }
    }
    let (median, min, max) = if errors.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let median = median_lower(&errors);
        let min = errors.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = errors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (median, min, max)
    };
    Ok(SweepRow {
        d,
        c,
        m,
        median_test_error: median,
        min_test_error: min,
        max_test_error: max,
        wall_time_s: start.elapsed().as_secs_f64(),
        failed_repeats: failed,
        note,
    })
}

/// Runs the full grid. Rows come back in (d outer, c inner) order; failed
/// repeats are recorded in their row rather than aborting the sweep, so a
/// diverging cell still leaves the rest of the grid usable.
pub fn phase_transition_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.d_values.len() * spec.c_values.len());
    for &d in &spec.d_values {
        for &c in &spec.c_values {
            cells.push((d, c));
        }
    }
    cells
        .par_iter()
        .map(|&(d, c)| run_sweep_cell(spec, d, c))
        .collect()
}

/// One line of a convergence trace. The test error is relative (held-out
/// residual norm over held-out truth norm), so a blind model sits near 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub train_rmse: f64,
    pub test_rel_err: f64,
}

/// Count and squared norm of the entries the training set leaves out.
fn held_out_stats(truth: &DenseTensor, obs: &ObservationSet) -> Result<(usize, f64)> {
    let mask = obs.observed_mask();
    let mut count = 0usize;
    let mut den = 0.0;
    for (idx, &t) in truth.values().iter().enumerate() {
        if !mask[idx] {
            count += 1;
            den += t * t;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateMetric(
            "no held-out entries: every position is observed".into(),
        ));
    }
    if den == 0.0 {
        return Err(Error::DegenerateMetric(
            "held-out ground truth has zero norm".into(),
        ));
    }
    Ok((count, den))
}

/// Trains one solver on one synthetic instance and reports the objective,
/// training RMSE, and relative test error at every iteration, iteration 0
/// being the random initialization.
#[allow(clippy::too_many_arguments)]
pub fn convergence_trace(
    d: usize,
    r: usize,
    c: f64,
    solver: SolverKind,
    kernel: KernelKind,
    lambda: f64,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    let inst = synthetic_instance(
        d,
        r,
        kernel,
        c,
        rng::mix(seed, &[SEED_TRUTH]),
        rng::mix(seed, &[SEED_SAMPLE]),
    )?;
    let rank = sweep_rank(solver, inst.dims, r, inst.obs.len());
    let out = run_solver(
        solver,
        kernel,
        &inst.obs,
        rank,
        lambda,
        inst.truth.alpha(),
        &cfg.with_seed(rng::mix(seed, &[SEED_SOLVE])),
        Some(&inst.dense),
    )?;
    let test = out
        .test_error_trace
        .as_ref()
        .expect("test trace present whenever the truth is supplied");
    let (count, den) = held_out_stats(&inst.dense, &inst.obs)?;
    let to_relative = (count as f64 / den).sqrt();
    let rows = out
        .objective_trace
        .iter()
        .zip(&out.train_error_trace)
        .zip(test)
        .enumerate()
        .map(|(iteration, ((&objective, &train_rmse), &test_rms))| TraceRow {
            iteration,
            objective,
            train_rmse,
            test_rel_err: test_rms * to_relative,
        })
        .collect();
    Ok(rows)
}

/// Mean squared errors of the final model on the training entries and on
/// the full tensor, and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub train_mse: f64,
    pub full_mse: f64,
    pub gap: f64,
}

/// Measures how far training error understates whole-tensor error on one
/// synthetic instance. `gap = full_mse - train_mse`.
#[allow(clippy::too_many_arguments)]
pub fn generalization_gap(
    d: usize,
    r: usize,
    c: f64,
    solver: SolverKind,
    kernel: KernelKind,
    lambda: f64,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<GapReport> {
    let inst = synthetic_instance(
        d,
        r,
        kernel,
        c,
        rng::mix(seed, &[SEED_TRUTH]),
        rng::mix(seed, &[SEED_SAMPLE]),
    )?;
    let rank = sweep_rank(solver, inst.dims, r, inst.obs.len());
    let out = run_solver(
        solver,
        kernel,
        &inst.obs,
        rank,
        lambda,
        inst.truth.alpha(),
        &cfg.with_seed(rng::mix(seed, &[SEED_SOLVE])),
        None,
    )?;
    let est = out.model.reconstruct_dense()?;
    let mut train_sq = 0.0;
    for &(t, y) in inst.obs.entries() {
        let p = est.values()[inst.dims.linear_index(t)];
        train_sq += (p - y) * (p - y);
    }
    let train_mse = train_sq / inst.obs.len() as f64;
    let full_mse = mean_squared_error_full(&inst.dense, &est)?;
    Ok(GapReport {
        train_mse,
        full_mse,
        gap: full_mse - train_mse,
    })
}

/// Which model class generates the ground truth in a comparison run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthKind {
    Quadratic,
    Cp,
}

impl FromStr for TruthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quadratic" => Ok(TruthKind::Quadratic),
            "cp" => Ok(TruthKind::Cp),
            other => Err(Error::InvalidArgument(format!(
                "unknown truth kind '{other}': expected quadratic or cp"
            ))),
        }
    }
}

/// Held-out errors of the two model classes after each picked its ridge
/// weight on a validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelComparison {
    pub quadratic_error: f64,
    pub cp_error: f64,
    pub quadratic_lambda: f64,
    pub cp_lambda: f64,
}

/// The model class being fitted in one tuned run.
#[derive(Debug, Clone, Copy)]
enum Side {
    Quadratic,
    Cp,
}

impl Side {
    fn tag(self) -> u64 {
        match self {
            Side::Quadratic => 10,
            Side::Cp => 20,
        }
    }
}

fn fit_side(
    side: Side,
    obs: &ObservationSet,
    r: usize,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<TrainedModel> {
    match side {
        Side::Quadratic => {
            let kmat = make_kernel(KernelKind::Pairwise)?;
            Ok(TrainedModel::Quadratic(
                als_solve(obs, &kmat, r, lambda, cfg, None)?.model,
            ))
        }
        Side::Cp => Ok(TrainedModel::Cp(
            cp_als_solve(obs, r, lambda, cfg, None)?.model,
        )),
    }
}

/// Splits an observation set into a training part and a validation part
/// holding roughly a tenth of the entries (at least one), by a seeded
/// shuffle.
fn validation_split(
    obs: &ObservationSet,
    seed: u64,
) -> Result<(ObservationSet, Vec<(EntryIndex, f64)>)> {
    let m = obs.len();
    if m < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 observations to split off a validation set".into(),
        ));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::chacha(seed));
    let val_count = (m / 10).max(1);
    let val: Vec<(EntryIndex, f64)> = order[..val_count]
        .iter()
        .map(|&i| obs.entries()[i])
        .collect();
    let mut train_ids: Vec<usize> = order[val_count..].to_vec();
    train_ids.sort_unstable();
    let train_entries: Vec<(EntryIndex, f64)> =
        train_ids.iter().map(|&i| obs.entries()[i]).collect();
    let train = ObservationSet::new(obs.dims(), train_entries)?;
    Ok((train, val))
}

fn tuned_error(
    side: Side,
    dense: &DenseTensor,
    obs: &ObservationSet,
    train: &ObservationSet,
    val: &[(EntryIndex, f64)],
    r: usize,
    lambda_grid: &[f64],
    cfg: &SolverConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for (li, &lambda) in lambda_grid.iter().enumerate() {
        let model = fit_side(
            side,
            train,
            r,
            lambda,
            &cfg.with_seed(rng::mix(seed, &[side.tag(), li as u64])),
        )?;
        let mut val_sq = 0.0;
        for &(t, y) in val {
            let p = model.predict_entry(t)?;
            val_sq += (p - y) * (p - y);
        }
        if best.map_or(true, |(b, _)| val_sq < b) {
            best = Some((val_sq, lambda));
        }
    }
    let (_, lambda_star) = best.expect("non-empty lambda grid");
    let model = fit_side(
        side,
        obs,
        r,
        lambda_star,
        &cfg.with_seed(rng::mix(seed, &[side.tag(), 9999])),
    )?;
    let est = model.reconstruct_dense()?;
    let err = held_out_error(dense, &est, obs)?;
    Ok((err, lambda_star))
}

/// Fits the quadratic model (alternating solver, pairwise kernel) and the
/// CP baseline on the same observations at matched rank, each tuning its
/// ridge weight over `lambda_grid` on a shared validation split, and
/// reports both held-out errors.
#[allow(clippy::too_many_arguments)]
pub fn cp_vs_quadratic(
    d: usize,
    r: usize,
    c: f64,
    truth_kind: TruthKind,
    lambda_grid: &[f64],
    cfg: &SolverConfig,
    seed: u64,
) -> Result<ModelComparison> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    for &l in lambda_grid {
        if l < 0.0 || !l.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda grid values must be non-negative and finite, got {l}"
            )));
        }
    }
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let dims = TensorDims::cubic(d)?;
    let truth_seed = rng::mix(seed, &[SEED_TRUTH]);
    let dense = match truth_kind {
        TruthKind::Quadratic => {
            let kmat = make_kernel(KernelKind::Pairwise)?;
            random_ground_truth(dims, r, kmat, FactorDistribution::StandardNormal, truth_seed)?
                .model()
                .reconstruct_dense()?
        }
        TruthKind::Cp => CPModel::random(dims, r, truth_seed)?.reconstruct_dense()?,
    };
    let m = target_samples(dims, r, c)?;
    let idx = sample_uniform_entries(dims, m, rng::mix(seed, &[SEED_SAMPLE]))?;
    let obs = ObservationSet::from_truth(&dense, &idx)?;
    let (train, val) = validation_split(&obs, rng::mix(seed, &[SEED_SPLIT]))?;
    let (quadratic_error, quadratic_lambda) = tuned_error(
        Side::Quadratic,
        &dense,
        &obs,
        &train,
        &val,
        r,
        lambda_grid,
        cfg,
        seed,
    )?;
    let (cp_error, cp_lambda) = tuned_error(
        Side::Cp,
        &dense,
        &obs,
        &train,
        &val,
        r,
        lambda_grid,
        cfg,
        seed,
    )?;
    Ok(ModelComparison {
        quadratic_error,
        cp_error,
        quadratic_lambda,
        cp_lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_rank_matches_hand_computed_values() {
        let dims20 = TensorDims::cubic(20).unwrap();
        assert_eq!(auto_rank(dims20, 180), 20, "sqrt(360 + 40) = 20 exactly");
        let dims50 = TensorDims::cubic(50).unwrap();
        assert_eq!(auto_rank(dims50, 2500), 72, "ceil(sqrt(5100)) = 72");
        let thin = TensorDims::new(2, 3, 50).unwrap();
        assert_eq!(auto_rank(thin, 1), 11, "ceil(sqrt(2 + 100)) = 11");
    }

    #[test]
    fn solver_names_round_trip() {
        for kind in [
            SolverKind::Als,
            SolverKind::Gd,
            SolverKind::Fw,
            SolverKind::CpAls,
        ] {
            let back: SolverKind = kind.name().parse().unwrap();
            assert_eq!(back, kind);
        }
        assert!("newton".parse::<SolverKind>().is_err());
    }

    #[test]
    fn target_samples_rounds_and_caps() {
        let dims = TensorDims::cubic(8).unwrap();
        assert_eq!(target_samples(dims, 2, 1.5).unwrap(), 24);
        assert_eq!(target_samples(dims, 2, 1e9).unwrap(), 512);
        assert!(target_samples(dims, 2, 0.0).is_err());
    }

    #[test]
    fn synthetic_instances_are_deterministic_and_share_truth_across_budgets() {
        let a = synthetic_instance(6, 2, KernelKind::Pairwise, 2.0, 7, 8).unwrap();
        let b = synthetic_instance(6, 2, KernelKind::Pairwise, 2.0, 7, 8).unwrap();
        assert_eq!(a.dense.values(), b.dense.values());
        assert_eq!(a.obs.entries(), b.obs.entries());
        let wider = synthetic_instance(6, 2, KernelKind::Pairwise, 4.0, 7, 9).unwrap();
        assert_eq!(
            a.dense.values(),
            wider.dense.values(),
            "same truth seed must give the same truth at any budget"
        );
        assert!(wider.obs.len() > a.obs.len());
        assert!(a.truth.alpha() > 0.0);
    }

    #[test]
    fn median_is_an_observed_value() {
        assert_eq!(median_lower(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_lower(&[4.0, 1.0, 3.0, 2.0]), 2.0, "lower middle");
        assert_eq!(median_lower(&[5.0]), 5.0);
    }

    #[test]
    fn sweep_rows_cover_the_grid_and_repeat_identically() {
        let spec = SweepSpec::new(
            SolverKind::Als,
            KernelKind::Pairwise,
            vec![8],
            2,
            vec![2.0, 32.0],
            2,
            41,
        );
        let rows = phase_transition_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 2, "1 d value x 2 c values");
        for row in &rows {
            assert_eq!(row.failed_repeats, 0, "note: {}", row.note);
            assert!(
                row.min_test_error <= row.median_test_error
                    && row.median_test_error <= row.max_test_error
            );
        }
        let full = &rows[1];
        assert_eq!(full.m, 512, "c = 32 covers all 8^3 entries");
        assert!(
            full.median_test_error <= 1e-6,
            "full observation should fit to noise floor, got {}",
            full.median_test_error
        );
        let again = phase_transition_sweep(&spec).unwrap();
        for (x, y) in rows.iter().zip(&again) {
            assert_eq!(x.d, y.d);
            assert_eq!(x.m, y.m);
            assert_eq!(x.median_test_error.to_bits(), y.median_test_error.to_bits());
            assert_eq!(x.min_test_error.to_bits(), y.min_test_error.to_bits());
            assert_eq!(x.max_test_error.to_bits(), y.max_test_error.to_bits());
        }
    }

    #[test]
    fn full_observation_beats_scarce_observation_for_als() {
        let spec = SweepSpec::new(
            SolverKind::Als,
            KernelKind::Pairwise,
            vec![8],
            2,
            vec![1.0, 2.0, 32.0],
            3,
            17,
        );
        let rows = phase_transition_sweep(&spec).unwrap();
        let full = rows.last().unwrap();
        for row in &rows[..rows.len() - 1] {
            assert!(
                full.median_test_error <= row.median_test_error,
                "full observation ({}) should not be worse than m={} ({})",
                full.median_test_error,
                row.m,
                row.median_test_error
            );
        }
    }

    #[test]
    fn convergence_trace_starts_at_a_blind_model() {
        let cfg = SolverConfig::als().with_max_iters(30);
        let rows = convergence_trace(
            10,
            2,
            3.0,
            SolverKind::Als,
            KernelKind::Pairwise,
            1e-6,
            &cfg,
            5,
        )
        .unwrap();
        assert_eq!(rows[0].iteration, 0);
        assert!(
            rows[0].test_rel_err > 0.5,
            "random init should be far from the truth, got {}",
            rows[0].test_rel_err
        );
        assert!(rows.len() <= 31);
        let last = rows.last().unwrap();
        assert!(
            last.test_rel_err < rows[0].test_rel_err,
            "training should reduce the relative test error"
        );
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.iteration, i);
        }
    }

    #[test]
    fn generalization_gap_is_zero_at_full_observation() {
        let cfg = SolverConfig::als().with_max_iters(40);
        let report = generalization_gap(
            6,
            2,
            1e9,
            SolverKind::Als,
            KernelKind::Pairwise,
            1e-8,
            &cfg,
            3,
        )
        .unwrap();
        assert!(
            report.gap.abs() <= 1e-8,
            "train and full sets coincide, got gap {}",
            report.gap
        );
    }

    #[test]
    fn generalization_gap_matches_direct_loops() {
        let cfg = SolverConfig::als().with_max_iters(25);
        let (d, r, c, lambda, seed) = (7, 2, 3.0, 1e-6, 11);
        let report = generalization_gap(
            d,
            r,
            c,
            SolverKind::Als,
            KernelKind::Pairwise,
            lambda,
            &cfg,
            seed,
        )
        .unwrap();

        // Rebuild the identical run and measure both errors with plain loops.
        let inst = synthetic_instance(
            d,
            r,
            KernelKind::Pairwise,
            c,
            rng::mix(seed, &[SEED_TRUTH]),
            rng::mix(seed, &[SEED_SAMPLE]),
        )
        .unwrap();
        let out = run_solver(
            SolverKind::Als,
            KernelKind::Pairwise,
            &inst.obs,
            r,
            lambda,
            inst.truth.alpha(),
            &cfg.with_seed(rng::mix(seed, &[SEED_SOLVE])),
            None,
        )
        .unwrap();
        let est = out.model.reconstruct_dense().unwrap();
        let mut train_sq = 0.0;
        for &(t, y) in inst.obs.entries() {
            let p = est.values()[inst.dims.linear_index(t)];
            train_sq += (p - y) * (p - y);
        }
        let train_mse = train_sq / inst.obs.len() as f64;
        let mut full_sq = 0.0;
        for (p, t) in est.values().iter().zip(inst.dense.values()) {
            full_sq += (p - t) * (p - t);
        }
        let full_mse = full_sq / inst.dims.total() as f64;

        assert!((report.train_mse - train_mse).abs() <= 1e-12);
        assert!((report.full_mse - full_mse).abs() <= 1e-12);
        assert!((report.gap - (full_mse - train_mse)).abs() <= 1e-12);
    }

    #[test]
    fn stable_step_search_halves_past_a_divergent_start() {
        let inst = synthetic_instance(5, 1, KernelKind::Pairwise, 4.0, 2, 3).unwrap();
        let kmat = make_kernel(KernelKind::Pairwise).unwrap();
        let reg = gd_regularization(inst.dims, 3, 0.0, inst.truth.alpha(), 9).unwrap();
        let cfg = SolverConfig::gd().with_step_size(50.0).with_max_iters(400);
        let step = gd_stable_step(&inst.obs, &kmat, &reg, &cfg, 60).unwrap();
        assert!(step < 50.0, "a step of 50 must not survive the probe");
        let (res, used) = gd_solve_stable(&inst.obs, &kmat, &reg, &cfg, None).unwrap();
        assert!(used <= step);
        assert!(
            trace_non_increasing_after_first(&res.objective_trace),
            "the settled step must descend"
        );
    }

    #[test]
    fn comparison_is_deterministic_and_reports_grid_lambdas() {
        let grid = [1e-6, 1e-3];
        let cfg = SolverConfig::als().with_max_iters(30);
        let a = cp_vs_quadratic(8, 2, 4.0, TruthKind::Quadratic, &grid, &cfg, 13).unwrap();
        let b = cp_vs_quadratic(8, 2, 4.0, TruthKind::Quadratic, &grid, &cfg, 13).unwrap();
        assert_eq!(a, b, "same seed must reproduce the same comparison");
        assert!(grid.contains(&a.quadratic_lambda));
        assert!(grid.contains(&a.cp_lambda));
        assert!(a.quadratic_error.is_finite() && a.cp_error.is_finite());
    }

    #[test]
    fn validation_split_partitions_the_observations() {
        let inst = synthetic_instance(6, 2, KernelKind::Pairwise, 3.0, 1, 2).unwrap();
        let (train, val) = validation_split(&inst.obs, 99).unwrap();
        assert_eq!(train.len() + val.len(), inst.obs.len());
        assert_eq!(val.len(), inst.obs.len() / 10);
        let train_set: std::collections::HashSet<(usize, usize, usize)> = train
            .entries()
            .iter()
            .map(|(t, _)| (t.i, t.j, t.k))
            .collect();
        for (t, _) in &val {
            assert!(
                !train_set.contains(&(t.i, t.j, t.k)),
                "validation entries must not leak into training"
            );
        }
    }
}
