//! Alternating least squares for the CP (rank-one sum) baseline.
//!
//! Predictions are multilinear, `sum_l A[i,l] B[j,l] C[k,l]`, so fixing two
//! factors makes the third a per-row ridge problem with features given by
//! the elementwise product of the fixed factors' rows. Mirrors the
//! quadratic solver's loop: 1/m-normalized loss, `lambda m I` Tikhonov
//! term, non-increasing objective, deterministic per seed.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve_in_place;
use crate::model::{random_factor_matrix, CPModel};
use crate::rng;
use crate::solvers::{SolveResult, SolverConfig, Termination, TestTracer};
use crate::tensor::{DenseTensor, ObservationSet};

/// Fits a CP model of rank `r` by alternating ridge solves from a random
/// initialization.
pub fn cp_als_solve(
    obs: &ObservationSet,
    r: usize,
    lambda: f64,
    cfg: &SolverConfig,
    truth: Option<&DenseTensor>,
) -> Result<SolveResult<CPModel>> {
    cfg.validate()?;
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative and finite, got {lambda}"
        )));
    }

    let dims = obs.dims();
    let m = obs.len();
    let lambda_m = lambda * m as f64;

    let mut by_i = vec![Vec::new(); dims.d1()];
    let mut by_j = vec![Vec::new(); dims.d2()];
    let mut by_k = vec![Vec::new(); dims.d3()];
    for (t, &(e, _)) in obs.entries().iter().enumerate() {
        by_i[e.i].push(t);
        by_j[e.j].push(t);
        by_k[e.k].push(t);
    }

    let mut rng = rng::chacha(cfg.seed);
    let sigma = |d: usize| 1.0 / ((d * r) as f64).powf(0.25);
    let mut a = random_factor_matrix(dims.d1(), r, sigma(dims.d1()), &mut rng);
    let mut b = random_factor_matrix(dims.d2(), r, sigma(dims.d2()), &mut rng);
    let mut c = random_factor_matrix(dims.d3(), r, sigma(dims.d3()), &mut rng);

    let tracer = match truth {
        Some(t) => Some(TestTracer::new(t, obs)?),
        None => None,
    };

    let objective = |a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>| -> (f64, f64) {
        let mut sq = 0.0;
        for &(e, v) in obs.entries() {
            let ra = row(a, e.i, r);
            let rb = row(b, e.j, r);
            let rc = row(c, e.k, r);
            let mut pred = 0.0;
            for l in 0..r {
                pred += ra[l] * rb[l] * rc[l];
            }
            sq += (pred - v) * (pred - v);
        }
        let mse = sq / m as f64;
        let frob: f64 = a.iter().map(|v| v * v).sum::<f64>()
            + b.iter().map(|v| v * v).sum::<f64>()
            + c.iter().map(|v| v * v).sum::<f64>();
        (mse + lambda * frob, mse)
    };

    let mut objective_trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut train_trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut test_trace = tracer.as_ref().map(|_| Vec::with_capacity(cfg.max_iters + 1));

    let record = |a: &Array2<f64>,
                  b: &Array2<f64>,
                  c: &Array2<f64>,
                  objective_trace: &mut Vec<f64>,
                  train_trace: &mut Vec<f64>,
                  test_trace: &mut Option<Vec<f64>>|
     -> Result<f64> {
        let (obj, mse) = objective(a, b, c);
        objective_trace.push(obj);
        train_trace.push(mse.sqrt());
        if let (Some(tr), Some(tracer)) = (test_trace.as_mut(), tracer.as_ref()) {
            let model = CPModel::new(a.clone(), b.clone(), c.clone())?;
            tr.push(tracer.rms(&model.reconstruct_dense()?));
        }
        Ok(obj)
    };

    let mut prev = record(
        &a,
        &b,
        &c,
        &mut objective_trace,
        &mut train_trace,
        &mut test_trace,
    )?;

    let mut iterations_run = 0;
    let mut termination = Termination::MaxIters;

    for _ in 1..=cfg.max_iters {
        let snapshot = (a.clone(), b.clone(), c.clone());

        solve_block(&mut a, &by_i, r, lambda_m, |t, phi| {
            let (e, v) = obs.entries()[t];
            let rb = row(&b, e.j, r);
            let rc = row(&c, e.k, r);
            for l in 0..r {
                phi[l] = rb[l] * rc[l];
            }
            v
        })?;
        solve_block(&mut b, &by_j, r, lambda_m, |t, phi| {
            let (e, v) = obs.entries()[t];
            let ra = row(&a, e.i, r);
            let rc = row(&c, e.k, r);
            for l in 0..r {
                phi[l] = ra[l] * rc[l];
            }
            v
        })?;
        solve_block(&mut c, &by_k, r, lambda_m, |t, phi| {
            let (e, v) = obs.entries()[t];
            let ra = row(&a, e.i, r);
            let rb = row(&b, e.j, r);
            for l in 0..r {
                phi[l] = ra[l] * rb[l];
            }
            v
        })?;

        let obj = record(
            &a,
            &b,
            &c,
            &mut objective_trace,
            &mut train_trace,
            &mut test_trace,
        )?;

        if obj > prev + 1e-12 * prev.abs().max(1.0) {
            a = snapshot.0;
            b = snapshot.1;
            c = snapshot.2;
            objective_trace.pop();
            train_trace.pop();
            if let Some(tr) = test_trace.as_mut() {
                tr.pop();
            }
            termination = Termination::NonDecreasing;
            break;
        }

        iterations_run += 1;
        // Floor mirrors the quadratic-model solver: an exact-zero objective
        // must still be able to meet the tolerance despite float noise.
        if (prev - obj).abs() <= cfg.tol * prev.abs().max(1e-16) {
            termination = Termination::Tolerance;
            break;
        }
        prev = obj;
    }

    let result = SolveResult {
        model: CPModel::new(a, b, c)?,
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
                for p in 0..rank {
                    let pa = phi[p];
                    if pa == 0.0 {
                        continue;
                    }
                    rhs[p] += pa * resp;
                    let grow = gram.row_mut(p);
                    let grow = grow.into_slice().expect("standard layout");
                    for q in 0..rank {
                        grow[q] += pa * phi[q];
                    }
                }
            }
            for p in 0..rank {
                gram[[p, p]] += lambda_m;
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
