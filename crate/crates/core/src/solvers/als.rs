//! Alternating least squares for zero-diagonal kernels.
//!
//! With the kernel diagonal zero every prediction is affine in any one
//! factor's rows while the other two are held fixed, so each block update
//! is an exact ridge solve per row: for row `i` of X the features are
//! `phi_t = 2 K12 y_j + 2 K13 z_k` and the offsets `2 K23 <y_j, z_k>` over
//! the observations hitting that row. Under the 1/m-normalized squared
//! loss with penalty `lambda (|X|_F^2 + |Y|_F^2 + |Z|_F^2)` the per-row
//! normal equations carry a Tikhonov term `lambda m I`.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::linalg::cholesky_solve_in_place;
use crate::model::FactorModel;
use crate::solvers::{random_init, SolveResult, SolverConfig, Termination, TestTracer};
use crate::tensor::{DenseTensor, ObservationSet};

/// Fits a quadratic model by alternating exact block solves, starting from
/// random factors drawn with the solver seed. The kernel must have a zero
/// diagonal; pass a held-out `truth` to record a test-error trace.
pub fn als_solve(
    obs: &ObservationSet,
    kernel: &KernelMatrix,
    rank: usize,
    lambda: f64,
    cfg: &SolverConfig,
    truth: Option<&DenseTensor>,
) -> Result<SolveResult<FactorModel>> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let init = random_init(obs.dims(), rank, *kernel, cfg.seed)?;
    als_solve_from(obs, init, lambda, cfg, truth)
}

/// Same as [`als_solve`] but starting from the given factors.
pub fn als_solve_from(
    obs: &ObservationSet,
    init: FactorModel,
    lambda: f64,
    cfg: &SolverConfig,
    truth: Option<&DenseTensor>,
) -> Result<SolveResult<FactorModel>> {
    cfg.validate()?;
    if init.dims() != obs.dims() {
        return Err(Error::ShapeMismatch(format!(
            "initial model is over {} but observations are over {}",
            init.dims(),
            obs.dims()
        )));
    }
    if !init.kernel().has_zero_diagonal() {
        return Err(Error::UnsupportedKernel(
            "alternating least squares needs a zero-diagonal kernel (the block \
             subproblem is quartic otherwise); use gd_solve for this kernel"
                .into(),
        ));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative and finite, got {lambda}"
        )));
    }

    let dims = obs.dims();
    let kernel = *init.kernel();
    let rank = init.rank();
    let m = obs.len();
    let lambda_m = lambda * m as f64;

    // Observation ids grouped by the row they touch in each mode.
    let mut by_i = vec![Vec::new(); dims.d1()];
    let mut by_j = vec![Vec::new(); dims.d2()];
    let mut by_k = vec![Vec::new(); dims.d3()];
    for (t, &(e, _)) in obs.entries().iter().enumerate() {
        by_i[e.i].push(t);
        by_j[e.j].push(t);
        by_k[e.k].push(t);
    }

    let mut x = init.x().clone();
    let mut y = init.y().clone();
    let mut z = init.z().clone();

    let tracer = match truth {
        Some(t) => Some(TestTracer::new(t, obs)?),
        None => None,
    };

    let objective = |x: &Array2<f64>, y: &Array2<f64>, z: &Array2<f64>| -> (f64, f64) {
        let mut sq = 0.0;
        for &(e, v) in obs.entries() {
            let pred = kernel.eval_unchecked(
                row(x, e.i, rank),
                row(y, e.j, rank),
                row(z, e.k, rank),
            );
            sq += (pred - v) * (pred - v);
        }
        let mse = sq / m as f64;
        let frob: f64 = x.iter().map(|v| v * v).sum::<f64>()
            + y.iter().map(|v| v * v).sum::<f64>()
            + z.iter().map(|v| v * v).sum::<f64>();
        (mse + lambda * frob, mse)
    };

    let mut objective_trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut train_trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut test_trace = tracer.as_ref().map(|_| Vec::with_capacity(cfg.max_iters + 1));

    let record = |x: &Array2<f64>,
                  y: &Array2<f64>,
                  z: &Array2<f64>,
                  objective_trace: &mut Vec<f64>,
                  train_trace: &mut Vec<f64>,
                  test_trace: &mut Option<Vec<f64>>|
     -> Result<f64> {
        let (obj, mse) = objective(x, y, z);
        objective_trace.push(obj);
        train_trace.push(mse.sqrt());
        if let (Some(tr), Some(tracer)) = (test_trace.as_mut(), tracer.as_ref()) {
            let model = FactorModel::new(x.clone(), y.clone(), z.clone(), kernel)?;
            tr.push(tracer.rms(&model.reconstruct_dense()?));
        }
        Ok(obj)
    };

    let mut prev = record(
        &x,
        &y,
        &z,
        &mut objective_trace,
        &mut train_trace,
        &mut test_trace,
    )?;

    let mut iterations_run = 0;
    let mut termination = Termination::MaxIters;

    for _ in 1..=cfg.max_iters {
        let snapshot = (x.clone(), y.clone(), z.clone());

        // X rows: features from Y and Z.
        solve_block(&mut x, &by_i, rank, lambda_m, |t, phi| {
            let (e, v) = obs.entries()[t];
            let b = row(&y, e.j, rank);
            let c = row(&z, e.k, rank);
            let mut off = 0.0;
            for l in 0..rank {
                phi[l] = 2.0 * (kernel.entry(0, 1) * b[l] + kernel.entry(0, 2) * c[l]);
                off += b[l] * c[l];
            }
            v - 2.0 * kernel.entry(1, 2) * off
        })
        .map_err(|e| block_context(e, "first"))?;

        // Y rows: features from the updated X and current Z.
        solve_block(&mut y, &by_j, rank, lambda_m, |t, phi| {
            let (e, v) = obs.entries()[t];
            let a = row(&x, e.i, rank);
            let c = row(&z, e.k, rank);
            let mut off = 0.0;
            for l in 0..rank {
                phi[l] = 2.0 * (kernel.entry(0, 1) * a[l] + kernel.entry(1, 2) * c[l]);
                off += a[l] * c[l];
            }
            v - 2.0 * kernel.entry(0, 2) * off
        })
        .map_err(|e| block_context(e, "second"))?;

        // Z rows: features from the updated X and Y.
        solve_block(&mut z, &by_k, rank, lambda_m, |t, phi| {
            let (e, v) = obs.entries()[t];
            let a = row(&x, e.i, rank);
            let b = row(&y, e.j, rank);
            let mut off = 0.0;
            for l in 0..rank {
                phi[l] = 2.0 * (kernel.entry(0, 2) * a[l] + kernel.entry(1, 2) * b[l]);
                off += a[l] * b[l];
            }
            v - 2.0 * kernel.entry(0, 1) * off
        })
        .map_err(|e| block_context(e, "third"))?;

        let obj = record(
            &x,
            &y,
            &z,
            &mut objective_trace,
            &mut train_trace,
            &mut test_trace,
        )?;

        // Exact block solves cannot increase the objective; an uptick beyond
        // rounding noise means numerical trouble, so keep the better iterate.
        if obj > prev + 1e-12 * prev.abs().max(1.0) {
            x = snapshot.0;
            y = snapshot.1;
            z = snapshot.2;
            objective_trace.pop();
            train_trace.pop();
            if let Some(tr) = test_trace.as_mut() {
                tr.pop();
            }
            termination = Termination::NonDecreasing;
            break;
        }

        iterations_run += 1;
        // The floor keeps the check meaningful when the objective reaches exact
        // zero: float noise at 1e-30 scale would otherwise look like an O(1)
        // relative change forever.
        if (prev - obj).abs() <= cfg.tol * prev.abs().max(1e-16) {
            termination = Termination::Tolerance;
            break;
        }
        prev = obj;
    }

    let result = SolveResult {
        model: FactorModel::new(x, y, z, kernel)?,
        objective_trace,
        train_error_trace: train_trace,
        test_error_trace: test_trace,
        duality_gap_trace: None,
        iterate_trace_norms: None,
        iterations_run,
        termination,
    };
    result.check_trace_lengths();
    Ok(result)
}

fn row(m: &Array2<f64>, i: usize, rank: usize) -> &[f64] {
    &m.as_slice().expect("standard layout")[i * rank..(i + 1) * rank]
}

fn block_context(e: Error, which: &str) -> Error {
    match e {
        Error::SingularSystem(msg) => Error::SingularSystem(format!(
            "{which} factor block: {msg}; a positive lambda regularizes every row"
        )),
        other => other,
    }
}

/// Solves the ridge subproblem for every row of `target`. `fill` writes the
/// feature vector of observation `t` into its buffer and returns the
/// response (observed value minus the fixed offset).
fn solve_block(
    target: &mut Array2<f64>,
    rows_obs: &[Vec<usize>],
    rank: usize,
    lambda_m: f64,
    fill: impl Fn(usize, &mut [f64]) -> f64 + Sync,
) -> Result<()> {
    let solutions: Vec<Result<Vec<f64>>> = rows_obs
        .par_iter()
        .map(|ids| {
            if ids.is_empty() {
                if lambda_m > 0.0 {
                    // No data touches this row; the ridge drives it to zero.
                    return Ok(vec![0.0; rank]);
                }
                return Err(Error::SingularSystem(
                    "row with no observations and lambda = 0".into(),
                ));
            }
            let mut gram = Array2::<f64>::zeros((rank, rank));
            let mut rhs = vec![0.0; rank];
            let mut phi = vec![0.0; rank];
            for &t in ids {
                let resp = fill(t, &mut phi);
                for a in 0..rank {
                    let pa = phi[a];
                    if pa == 0.0 {
                        continue;
                    }
                    rhs[a] += pa * resp;
                    let grow = gram.row_mut(a);
                    let grow = grow.into_slice().expect("standard layout");
                    for b in 0..rank {
                        grow[b] += pa * phi[b];
                    }
                }
            }
            for a in 0..rank {
                gram[[a, a]] += lambda_m;
            }
            cholesky_solve_in_place(&mut gram, &mut rhs).map(|()| rhs)
        })
        .collect();

    let ts = target.as_slice_mut().expect("standard layout");
    for (i, sol) in solutions.into_iter().enumerate() {
        ts[i * rank..(i + 1) * rank].copy_from_slice(&sol?);
    }
    Ok(())
}
