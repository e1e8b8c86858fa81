//! Scratch harness for acceptance-criterion calibration runs.

use quadtensor_core::kernel::{make_kernel, KernelKind};
use quadtensor_core::objective::default_lambdas;
use quadtensor_core::solvers::{multi_init_audit, SolverConfig};
use quadtensor_core::{
    auto_rank, gd_regularization, gd_solve_stable, held_out_error, synthetic_instance,
};
use rayon::prelude::*;

fn main() {
    // Criterion 3 config: GD d=50 r=5, lambda=0, R=auto, at c=10 and c=2.
    let gd_cases: Vec<(f64, u64)> = [10.0f64, 2.0]
        .iter()
        .flat_map(|&c| (0..3u64).map(move |rep| (c, rep)))
        .collect();
    let results: Vec<String> = gd_cases
        .par_iter()
        .map(|&(c, rep)| {
            let inst =
                synthetic_instance(50, 5, KernelKind::Pairwise, c, 100 + rep, 200 + rep).unwrap();
            let rank = auto_rank(inst.dims, inst.obs.len());
            let reg = gd_regularization(inst.dims, rank, 0.0, inst.truth.alpha(), 77).unwrap();
            let cfg = SolverConfig::gd().with_max_iters(20000).with_seed(7 + rep);
            let t0 = std::time::Instant::now();
            let (res, step) = gd_solve_stable(
                &inst.obs,
                inst.truth.model().kernel(),
                &reg,
                &cfg,
                None,
            )
            .unwrap();
            let dense = res.model.reconstruct_dense().unwrap();
            let err = held_out_error(&inst.dense, &dense, &inst.obs).unwrap();
            format!(
                "GD c={:4} rep={} R={} err={:.4}@{} step={:.3} train={:.4} ({:.0}s)",
                c,
                rep,
                rank,
                err,
                res.iterations_run,
                step,
                res.train_error_trace.last().unwrap(),
                t0.elapsed().as_secs_f64()
            )
        })
        .collect();
    for s in results {
        println!("{s}");
    }

    // Criterion 5 config: audit at d=20 r=3 m=3dr R=auto, 10 inits.
    {
        let inst = synthetic_instance(20, 3, KernelKind::Pairwise, 3.0, 100, 200).unwrap();
        let rank = auto_rank(inst.dims, inst.obs.len());
        let alpha = inst.truth.alpha();
        let (l1, l2) = default_lambdas(alpha, 20, inst.obs.len()).unwrap();
        let mut reg = gd_regularization(inst.dims, rank, 0.0, alpha, 77).unwrap();
        reg.lambda1 = l1;
        reg.lambda2 = l2;
        let kernel = make_kernel(KernelKind::Pairwise).unwrap();
        let cfg = SolverConfig::gd().with_max_iters(4000).with_seed(7);
        let fw_cfg = SolverConfig::fw().with_max_iters(2000).with_seed(7);
        let t0 = std::time::Instant::now();
        let report =
            multi_init_audit(&inst.obs, &kernel, &reg, 10, &cfg, None, Some(&fw_cfg)).unwrap();
        println!(
            "AUDIT R={} l1={:.4} l2={:.4} spread={:.5} max_vs_fw={:?} fw_obj={:?} objs[0]={:.5} ({:.0}s)",
            rank,
            l1,
            l2,
            report.objective_spread_rel,
            report.max_rel_diff_vs_fw,
            report.fw_reference_objective,
            report.objectives[0],
            t0.elapsed().as_secs_f64()
        );
    }
}
