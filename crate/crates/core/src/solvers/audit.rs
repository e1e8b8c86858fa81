//! Multi-start landscape audit.
//!
//! Runs gradient descent from several independent random initializations
//! on the same regularized objective and reports how much the final
//! objective values (and, when the truth is available, the full-tensor
//! errors) disagree. At factor width `R >= ceil(sqrt(2m + 2d))` the runs
//! are expected to land on the same value; the report also carries the
//! optimum of the lifted convex program on the same data as an external
//! reference point, solved over the trace ball with the factored
//! objective's own row-norm hinge and perturbation so the two totals are
//! directly comparable.

use crate::error::{Error, Result};
use crate::harness::{auto_rank, gd_solve_stable};
use crate::kernel::KernelMatrix;
use crate::objective::{make_perturbation, RegularizationConfig};
use crate::rng;
use crate::solvers::{fw_minimize, DiagPenalty, SolverConfig, TraceBallProblem};
use crate::tensor::{mean_squared_error_full, DenseTensor, ObservationSet};

/// Per-init seed salt, so init `i` of a seed-`s` audit never collides with
/// an ordinary seed-`s` solve.
const AUDIT_SALT: u64 = 73;

/// What the audit saw across initializations.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    /// Final objective total per initialization, in init order.
    pub objectives: Vec<f64>,
    /// Full-tensor mean squared error per initialization, when the truth
    /// was supplied.
    pub full_mse: Option<Vec<f64>>,
    /// `(max - min) / |min|` over the final objectives.
    pub objective_spread_rel: f64,
    /// Same spread over the full-tensor errors, when available.
    pub mse_spread_rel: Option<f64>,
    /// Optimum of the lifted convex program, when a reference solve was
    /// requested.
    pub fw_reference_objective: Option<f64>,
    /// Largest `|objective - reference| / reference` over the inits.
    pub max_rel_diff_vs_fw: Option<f64>,
    pub rank_used: usize,
    /// `ceil(sqrt(2m + 2d))`: the width above which all runs should agree.
    pub rank_floor: usize,
    /// True when `rank_used` sits below the floor; the audit still runs,
    /// it just stops promising agreement.
    pub underparameterized: bool,
}

fn rel_spread(values: &[f64]) -> f64 {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max - min) / min.abs().max(1e-300)
}

/// Runs `n_inits` gradient-descent solves that differ only in their random
/// initialization and summarizes the spread of what they reach. Pass
/// `fw_cfg` to also solve the lifted convex program once on the same data
/// and report each run's distance from it.
pub fn multi_init_audit(
    obs: &ObservationSet,
    kernel: &KernelMatrix,
    reg: &RegularizationConfig,
    n_inits: usize,
    cfg: &SolverConfig,
    truth: Option<&DenseTensor>,
    fw_cfg: Option<&SolverConfig>,
) -> Result<AuditReport> {
    if n_inits == 0 {
        return Err(Error::InvalidArgument("n_inits must be at least 1".into()));
    }
    reg.validate()?;
    cfg.validate()?;
    let dims = obs.dims();
    let rank_floor = auto_rank(dims, obs.len());
    let underparameterized = reg.rank < rank_floor;

    let mut objectives = Vec::with_capacity(n_inits);
    let mut full_mse = truth.map(|_| Vec::with_capacity(n_inits));
    for i in 0..n_inits {
        let cfg_i = cfg.with_seed(rng::mix(cfg.seed, &[AUDIT_SALT, i as u64]));
        let (res, _step) = gd_solve_stable(obs, kernel, reg, &cfg_i, None)?;
        objectives.push(
            *res.objective_trace
                .last()
                .expect("trace always holds the initial value"),
        );
        if let (Some(mses), Some(t)) = (full_mse.as_mut(), truth) {
            mses.push(mean_squared_error_full(t, &res.model.reconstruct_dense()?)?);
        }
    }

    let (fw_reference_objective, max_rel_diff_vs_fw) = match fw_cfg {
        Some(fw_cfg) => {
            let rows = dims.stacked_rows();
            let problem = TraceBallProblem {
                obs,
                kernel,
                dims,
                tau: rows as f64 * reg.alpha,
                pert: make_perturbation(rows, reg.lambda1, reg.perturbation_seed)?,
                diag: if reg.lambda2 > 0.0 {
                    DiagPenalty::OnSqrtDiag {
                        weight: reg.lambda2,
                        sqrt_alpha: reg.alpha.sqrt(),
                    }
                } else {
                    DiagPenalty::None
                },
                trace_coeff: reg.lambda1,
            };
            let res = fw_minimize(&problem, fw_cfg, None)?;
            let reference = *res
                .objective_trace
                .last()
                .expect("trace always holds the initial value");
            let denom = reference.abs().max(1e-300);
            let worst = objectives
                .iter()
                .map(|o| (o - reference).abs() / denom)
                .fold(0.0, f64::max);
            (Some(reference), Some(worst))
        }
        None => (None, None),
    };

    Ok(AuditReport {
        objective_spread_rel: rel_spread(&objectives),
        mse_spread_rel: full_mse.as_deref().map(rel_spread),
        objectives,
        full_mse,
        fw_reference_objective,
        max_rel_diff_vs_fw,
        rank_used: reg.rank,
        rank_floor,
        underparameterized,
    })
}
