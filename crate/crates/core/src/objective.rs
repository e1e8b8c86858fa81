//! The regularized training objective, its analytic gradient, the row-norm
//! hinge penalty, the random PSD perturbation, and hyperparameter defaults.
//!
//! The objective on a factor model (X, Y, Z) with stacked U = [X; Y; Z] is
//!
//! ```text
//! (1/m) sum_{t in obs} (pred_t - y_t)^2          mean squared error
//! + lambda1 (|X|_F^2 + |Y|_F^2 + |Z|_F^2)        ridge term
//! + lambda2 sum_rows q_alpha(|row|)              row-norm hinge
//! + <C, U U^T>                                   PSD perturbation
//! ```
//!
//! with `q_alpha(x) = (|x| - sqrt(alpha))^4` beyond the threshold and zero
//! below it. The gradient with respect to U is
//! `sum_t z_t (A_t + A_t^T) U + 2 lambda1 U + diag(w) U + 2 C U` where
//! `z_t = (2/m) (pred_t - y_t)` and `w_i = 4 lambda2 (rho_i - sqrt(alpha))^3
//! / rho_i` on rows whose norm `rho_i` exceeds the threshold.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{accumulate_into, KernelMatrix};
use crate::linalg::{dominant_eigenpair, SymOp};
use crate::model::FactorModel;
use crate::rng;
use crate::tensor::{EntryIndex, ObservationSet, TensorDims};

/// Regularization settings shared by the gradient solver and the audit.
#[derive(Debug, Clone, Copy)]
pub struct RegularizationConfig {
    /// Row-norm budget, in units of squared factor row norm.
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Factor column count used by solvers that create their own factors.
    pub rank: usize,
    pub perturbation_seed: u64,
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidArgument(
                "lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lambda1 = alpha / sqrt(d m)` and `lambda2 = 2 d lambda1 / alpha`.
pub fn default_lambdas(alpha: f64, d: usize, m: usize) -> Result<(f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if d == 0 || m == 0 {
        return Err(Error::InvalidArgument(
            "dimension and sample count must be positive".into(),
        ));
    }
    let lambda1 = alpha / ((d as f64) * (m as f64)).sqrt();
    let lambda2 = 2.0 * (d as f64) * lambda1 / alpha;
    Ok((lambda1, lambda2))
}

/// Fourth-power hinge on the magnitude: zero inside `[-sqrt(alpha),
/// sqrt(alpha)]`, `(|x| - sqrt(alpha))^4` outside.
pub fn q_alpha(x: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(q_raw(x, alpha.sqrt()))
}

/// Derivative of `q_alpha`: `4 (|x| - sqrt(alpha))^3 sign(x)` beyond the
/// threshold, zero below; continuous (in fact twice differentiable) at it.
pub fn q_alpha_deriv(x: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(dq_raw(x, alpha.sqrt()))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    Ok(())
}

pub(crate) fn q_raw(x: f64, sqrt_alpha: f64) -> f64 {
    let excess = x.abs() - sqrt_alpha;
    if excess <= 0.0 {
        0.0
    } else {
        excess * excess * excess * excess
    }
}

pub(crate) fn dq_raw(x: f64, sqrt_alpha: f64) -> f64 {
    let excess = x.abs() - sqrt_alpha;
    if excess <= 0.0 {
        0.0
    } else {
        4.0 * excess * excess * excess * x.signum()
    }
}

/// Random PSD perturbation `C = s G G^T`, kept in factored form. The scale
/// is chosen so the spectral norm of `C` equals the ridge weight, making
/// the term a vanishing-size tilt of the loss surface.
#[derive(Debug, Clone)]
pub struct Perturbation {
    g: Array2<f64>,
    gt: Array2<f64>,
    scale: f64,
}

struct GramOp<'a> {
    g: &'a Array2<f64>,
    gt: &'a Array2<f64>,
}

impl SymOp for GramOp<'_> {
    fn dim(&self) -> usize {
        self.g.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let mut w = vec![0.0; n];
        for j in 0..n {
            let row = self.gt.row(j);
            let row = row.as_slice().expect("standard layout row");
            let mut s = 0.0;
            for i in 0..n {
                s += row[i] * x[i];
            }
            w[j] = s;
        }
        for i in 0..n {
            let row = self.g.row(i);
            let row = row.as_slice().expect("standard layout row");
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * w[j];
            }
            out[i] = s;
        }
    }
}

impl Perturbation {
    /// The zero perturbation; its term and gradient vanish for any shape.
    pub fn zero() -> Self {
        Self {
            g: Array2::zeros((0, 0)),
            gt: Array2::zeros((0, 0)),
            scale: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0
    }

    pub fn rows(&self) -> usize {
        self.g.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn g(&self) -> &Array2<f64> {
        &self.g
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if !self.is_zero() && self.rows() != rows {
            return Err(Error::ShapeMismatch(format!(
                "perturbation is over {} rows but factors have {rows}",
                self.rows()
            )));
        }
        Ok(())
    }

    /// `<C, U U^T> = s |G^T U|_F^2`.
    pub fn term(&self, u: &Array2<f64>) -> Result<f64> {
        self.check_rows(u.nrows())?;
        if self.is_zero() {
            return Ok(0.0);
        }
        let b = self.gt.dot(u);
        Ok(self.scale * b.iter().map(|v| v * v).sum::<f64>())
    }

    /// Adds `2 C U = 2 s G (G^T U)` into `out`.
    pub fn add_grad(&self, u: &Array2<f64>, out: &mut Array2<f64>) -> Result<()> {
        self.check_rows(u.nrows())?;
        if self.is_zero() {
            return Ok(());
        }
        let b = self.gt.dot(u);
        let cu = self.g.dot(&b);
        out.scaled_add(2.0 * self.scale, &cu);
        Ok(())
    }

    /// Adds `C v` into `out` for a single vector; used by the eigen oracle
    /// of the convex solver.
    pub(crate) fn apply_vec(&self, v: &[f64], out: &mut [f64]) {
        if self.is_zero() {
            return;
        }
        let n = self.rows();
        let mut w = vec![0.0; n];
        for j in 0..n {
            let row = self.gt.row(j);
            let row = row.as_slice().expect("standard layout row");
            let mut s = 0.0;
            for i in 0..n {
                s += row[i] * v[i];
            }
            w[j] = s;
        }
        for i in 0..n {
            let row = self.g.row(i);
            let row = row.as_slice().expect("standard layout row");
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * w[j];
            }
            out[i] += self.scale * s;
        }
    }

    /// `v^T C v`.
    pub(crate) fn quad_form(&self, v: &[f64]) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let n = self.rows();
        let mut s = 0.0;
        for j in 0..n {
            let row = self.gt.row(j);
            let row = row.as_slice().expect("standard layout row");
            let mut inner = 0.0;
            for i in 0..n {
                inner += row[i] * v[i];
            }
            s += inner * inner;
        }
        self.scale * s
    }
}

/// Builds the perturbation for a stacked factor matrix with `rows` rows.
/// `G` is standard normal `rows x rows` and the scale is
/// `lambda1 / |G G^T|_2`, the spectral norm estimated by power iteration
/// (relative tolerance 1e-9, iteration cap `10 rows`). A zero `lambda1`
/// yields the zero perturbation.
pub fn make_perturbation(rows: usize, lambda1: f64, seed: u64) -> Result<Perturbation> {
    if rows == 0 {
        return Err(Error::InvalidArgument(
            "perturbation needs at least one row".into(),
        ));
    }
    if lambda1 < 0.0 || !lambda1.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda1 must be non-negative and finite, got {lambda1}"
        )));
    }
    if lambda1 == 0.0 {
        return Ok(Perturbation::zero());
    }
    let mut rng = rng::chacha(seed);
    let mut vals = Vec::with_capacity(rows * rows);
    for _ in 0..rows * rows {
        let g: f64 = rng.sample(StandardNormal);
        vals.push(g);
    }
    let g = Array2::from_shape_vec((rows, rows), vals).expect("matching length");
    // An explicit standard-layout transpose: `.t().to_owned()` may keep the
    // flipped memory order, which would break the row-slice matvec kernels.
    let mut gt = Array2::zeros((rows, rows));
    gt.assign(&g.t());
    let op = GramOp { g: &g, gt: &gt };
    let pair = dominant_eigenpair(&op, 1e-9, 10 * rows.max(20))?;
    let norm = pair.value;
    if !norm.is_finite() || norm <= 0.0 || !pair.converged {
        return Err(Error::Numerical(format!(
            "spectral norm estimate failed (value {norm}, converged {})",
            pair.converged
        )));
    }
    Ok(Perturbation {
        g,
        gt,
        scale: lambda1 / norm,
    })
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveBreakdown {
    pub mse: f64,
    pub frob_penalty: f64,
    pub qalpha_penalty: f64,
    pub perturbation_term: f64,
    pub total: f64,
}

/// Everything needed to evaluate the objective on a stacked factor matrix;
/// shared by the public API and the gradient solver's hot loop.
pub(crate) struct StackedObjective<'a> {
    pub dims: TensorDims,
    pub kernel: &'a KernelMatrix,
    pub obs: &'a ObservationSet,
    pub cfg: &'a RegularizationConfig,
    pub pert: &'a Perturbation,
}

impl StackedObjective<'_> {
    /// Evaluates the objective at `u`; when `grad` is given it is filled
    /// with the full gradient. `weights` is scratch for the residual
    /// weights, reused across calls.
    pub fn eval(
        &self,
        u: &Array2<f64>,
        mut grad: Option<&mut Array2<f64>>,
        weights: &mut Vec<(EntryIndex, f64)>,
    ) -> Result<ObjectiveBreakdown> {
        self.cfg.validate()?;
        let rows = self.dims.stacked_rows();
        if u.nrows() != rows {
            return Err(Error::ShapeMismatch(format!(
                "stacked factors have {} rows, expected {rows}",
                u.nrows()
            )));
        }
        self.pert.check_rows(rows)?;
        if let Some(g) = grad.as_deref_mut() {
            if g.raw_dim() != u.raw_dim() {
                return Err(Error::ShapeMismatch(
                    "gradient buffer shape differs from factors".into(),
                ));
            }
            g.fill(0.0);
        }

        let m = self.obs.len() as f64;
        let us = u.as_slice().expect("standard layout");
        let rank = u.ncols();
        let (o1, o2) = (self.dims.d1(), self.dims.d1() + self.dims.d2());

        weights.clear();
        let mut sq_sum = 0.0;
        for &(t, y) in self.obs.entries() {
            self.dims.check(t)?;
            let a = &us[t.i * rank..(t.i + 1) * rank];
            let b = &us[(o1 + t.j) * rank..(o1 + t.j + 1) * rank];
            let c = &us[(o2 + t.k) * rank..(o2 + t.k + 1) * rank];
            let pred = self.kernel.eval_unchecked(a, b, c);
            let resid = pred - y;
            sq_sum += resid * resid;
            if grad.is_some() {
                weights.push((t, 2.0 * resid / m));
            }
        }
        let mse = sq_sum / m;

        if let Some(g) = grad.as_deref_mut() {
            accumulate_into(weights, self.kernel, self.dims, u, g)?;
        }

        let frob_sq: f64 = us.iter().map(|v| v * v).sum();
        let frob_penalty = self.cfg.lambda1 * frob_sq;
        if let Some(g) = grad.as_deref_mut() {
            if self.cfg.lambda1 > 0.0 {
                g.scaled_add(2.0 * self.cfg.lambda1, u);
            }
        }

        let sqrt_alpha = self.cfg.alpha.sqrt();
        let mut qpen = 0.0;
        if self.cfg.lambda2 > 0.0 {
            for i in 0..rows {
                let row = &us[i * rank..(i + 1) * rank];
                let rho = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let excess = rho - sqrt_alpha;
                if excess <= 0.0 {
                    continue;
                }
                qpen += excess * excess * excess * excess;
                if let Some(g) = grad.as_deref_mut() {
                    let w = 4.0 * self.cfg.lambda2 * excess * excess * excess / rho;
                    let gs = g.as_slice_mut().expect("standard layout");
                    let dst = &mut gs[i * rank..(i + 1) * rank];
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += w * v;
                    }
                }
            }
        }
        let qalpha_penalty = self.cfg.lambda2 * qpen;

        let perturbation_term = self.pert.term(u)?;
        if let Some(g) = grad.as_deref_mut() {
            self.pert.add_grad(u, g)?;
        }

        Ok(ObjectiveBreakdown {
            mse,
            frob_penalty,
            qalpha_penalty,
            perturbation_term,
            total: mse + frob_penalty + qalpha_penalty + perturbation_term,
        })
    }
}

fn check_model_obs(model: &FactorModel, obs: &ObservationSet) -> Result<()> {
    if model.dims() != obs.dims() {
        return Err(Error::ShapeMismatch(format!(
            "model is over {} but observations are over {}",
            model.dims(),
            obs.dims()
        )));
    }
    Ok(())
}

/// Evaluates all four objective terms at the given model.
pub fn objective_eval(
    model: &FactorModel,
    obs: &ObservationSet,
    cfg: &RegularizationConfig,
    pert: &Perturbation,
) -> Result<ObjectiveBreakdown> {
    check_model_obs(model, obs)?;
    let u = model.stacked();
    let stacked = StackedObjective {
        dims: model.dims(),
        kernel: model.kernel(),
        obs,
        cfg,
        pert,
    };
    stacked.eval(&u, None, &mut Vec::new())
}

/// Analytic gradient of the objective, split by mode.
pub fn objective_grad(
    model: &FactorModel,
    obs: &ObservationSet,
    cfg: &RegularizationConfig,
    pert: &Perturbation,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_model_obs(model, obs)?;
    let u = model.stacked();
    let mut grad = Array2::zeros(u.raw_dim());
    let stacked = StackedObjective {
        dims: model.dims(),
        kernel: model.kernel(),
        obs,
        cfg,
        pert,
    };
    stacked.eval(&u, Some(&mut grad), &mut Vec::new())?;
    let d = model.dims();
    let gx = grad.slice(ndarray::s![0..d.d1(), ..]).to_owned();
    let gy = grad
        .slice(ndarray::s![d.d1()..d.d1() + d.d2(), ..])
        .to_owned();
    let gz = grad.slice(ndarray::s![d.d1() + d.d2().., ..]).to_owned();
    Ok((gx, gy, gz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_ground_truth, FactorDistribution};
    use crate::tensor::sample_uniform_entries;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn cfg(alpha: f64, lambda1: f64, lambda2: f64, rank: usize) -> RegularizationConfig {
        RegularizationConfig {
            alpha,
            lambda1,
            lambda2,
            rank,
            perturbation_seed: 77,
        }
    }

    #[test]
    fn q_alpha_threshold_point() {
        let alpha: f64 = 2.3;
        let s = alpha.sqrt();
        assert_eq!(q_alpha(s, alpha).unwrap(), 0.0);
        assert_eq!(q_alpha_deriv(s, alpha).unwrap(), 0.0);
        assert_eq!(q_alpha(0.0, alpha).unwrap(), 0.0);
    }

    #[test]
    fn q_alpha_direct_values() {
        assert_abs_diff_eq!(q_alpha(2.0, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q_alpha_deriv(2.0, 1.0).unwrap(), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q_alpha(-2.0, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q_alpha_deriv(-2.0, 1.0).unwrap(), -4.0, epsilon = 1e-15);
    }

    #[test]
    fn q_alpha_rejects_bad_alpha() {
        assert!(q_alpha(1.0, 0.0).is_err());
        assert!(q_alpha(1.0, -2.0).is_err());
        assert!(q_alpha_deriv(1.0, f64::NAN).is_err());
    }

    #[test]
    fn q_alpha_derivative_matches_finite_differences() {
        let alpha = 1.7;
        let mut rng = crate::rng::chacha(40);
        for _ in 0..20 {
            let x: f64 = rng.random_range(-4.0..4.0);
            let h = 1e-6 * (1.0 + x.abs());
            let fd = (q_alpha(x + h, alpha).unwrap() - q_alpha(x - h, alpha).unwrap()) / (2.0 * h);
            let an = q_alpha_deriv(x, alpha).unwrap();
            let denom = an.abs().max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-6 || (fd - an).abs() < 1e-9,
                "x={x}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn q_alpha_is_smooth_at_the_threshold() {
        let alpha = 1.0;
        // First derivative continuous: values shrink cubically toward the
        // threshold from the right.
        for h in [1e-2, 1e-3, 1e-4] {
            let d = q_alpha_deriv(1.0 + h, alpha).unwrap();
            assert!(d.abs() <= 4.1 * h * h * h);
        }
        // Second difference quotient stays bounded across the threshold.
        for h in [1e-3, 1e-4, 1e-5] {
            let second = (q_alpha(1.0 + h, alpha).unwrap() - 2.0 * q_alpha(1.0, alpha).unwrap()
                + q_alpha(1.0 - h, alpha).unwrap())
                / (h * h);
            assert!(second.abs() <= 12.0 * h + 1e-9, "h={h}: {second}");
        }
    }

    #[test]
    fn default_lambda_arithmetic() {
        let (l1, l2) = default_lambdas(1.0, 100, 100).unwrap();
        assert_abs_diff_eq!(l1, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(l2, 2.0, epsilon = 1e-15);

        let (l1, l2) = default_lambdas(0.5, 50, 200).unwrap();
        assert_abs_diff_eq!(l1, 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(l2, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn lambda1_scales_with_alpha_lambda2_does_not() {
        let (l1a, l2a) = default_lambdas(1.0, 30, 500).unwrap();
        let (l1b, l2b) = default_lambdas(3.0, 30, 500).unwrap();
        assert_abs_diff_eq!(l1b, 3.0 * l1a, epsilon = 1e-15);
        assert_abs_diff_eq!(l2a, l2b, epsilon = 1e-15);
    }

    #[test]
    fn zero_lambda1_gives_zero_perturbation() {
        let pert = make_perturbation(12, 0.0, 5).unwrap();
        assert!(pert.is_zero());
        let u = Array2::from_elem((12, 3), 1.5);
        assert_eq!(pert.term(&u).unwrap(), 0.0);
        let mut g = Array2::zeros((12, 3));
        pert.add_grad(&u, &mut g).unwrap();
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn perturbation_spectral_norm_equals_lambda1() {
        let rows = 15;
        let lambda1 = 0.37;
        let pert = make_perturbation(rows, lambda1, 9).unwrap();
        let c = pert.g().dot(&pert.g().t()) * pert.scale();
        let nc = nalgebra::DMatrix::from_fn(rows, rows, |i, j| c[[i, j]]);
        let top = nc
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &l| m.max(l.abs()));
        assert_abs_diff_eq!(top, lambda1, epsilon = 1e-6);
    }

    #[test]
    fn perturbation_quadratic_form_is_nonnegative() {
        let pert = make_perturbation(9, 0.2, 10).unwrap();
        let mut rng = crate::rng::chacha(41);
        for _ in 0..50 {
            let u = Array2::from_shape_fn((9, 2), |_| rng.random_range(-3.0..3.0));
            assert!(pert.term(&u).unwrap() >= 0.0);
        }
    }

    #[test]
    fn perturbation_is_deterministic() {
        let a = make_perturbation(10, 0.5, 123).unwrap();
        let b = make_perturbation(10, 0.5, 123).unwrap();
        assert_eq!(a.g(), b.g());
        assert_eq!(a.scale(), b.scale());
    }

    fn small_instance(
        d: usize,
        r: usize,
        m: usize,
        kernel: KernelMatrix,
        seed: u64,
    ) -> (FactorModel, ObservationSet) {
        let dims = TensorDims::cubic(d).unwrap();
        let gt = random_ground_truth(dims, r, kernel, FactorDistribution::StandardNormal, seed)
            .unwrap();
        let truth = gt.model().reconstruct_dense().unwrap();
        let idx = sample_uniform_entries(dims, m, seed + 1).unwrap();
        let obs = ObservationSet::from_truth(&truth, &idx).unwrap();
        (gt.into_model(), obs)
    }

    #[test]
    fn exact_fit_has_zero_mse() {
        let (model, obs) = small_instance(5, 2, 30, KernelMatrix::pairwise(), 50);
        let cfg = cfg(1.0, 0.0, 0.0, 2);
        let bd = objective_eval(&model, &obs, &cfg, &Perturbation::zero()).unwrap();
        assert_abs_diff_eq!(bd.mse, 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(bd.total, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn zero_model_mse_is_squared_value() {
        let dims = TensorDims::cubic(3).unwrap();
        let v = 1.75;
        let entries = vec![
            (EntryIndex::new(0, 0, 0), v),
            (EntryIndex::new(1, 2, 0), v),
            (EntryIndex::new(2, 1, 1), v),
        ];
        let obs = ObservationSet::new(dims, entries).unwrap();
        let model = FactorModel::zeros(dims, 2, KernelMatrix::pairwise()).unwrap();
        let cfg = cfg(1.0, 0.0, 0.0, 2);
        let bd = objective_eval(&model, &obs, &cfg, &Perturbation::zero()).unwrap();
        assert_abs_diff_eq!(bd.mse, v * v, epsilon = 1e-14);
    }

    /// Fully naive reimplementation: dense perturbation matrix, explicit
    /// column-sum predictions, scalar penalty loops.
    fn naive_total(
        model: &FactorModel,
        obs: &ObservationSet,
        cfg: &RegularizationConfig,
        pert: &Perturbation,
    ) -> f64 {
        let r = model.rank();
        let mut mse = 0.0;
        for &(t, y) in obs.entries() {
            let mut pred = 0.0;
            for l in 0..r {
                pred += model.kernel().eval_scalar(
                    model.x()[[t.i, l]],
                    model.y()[[t.j, l]],
                    model.z()[[t.k, l]],
                );
            }
            mse += (pred - y) * (pred - y);
        }
        mse /= obs.len() as f64;

        let u = model.stacked();
        let frob: f64 = u.iter().map(|v| v * v).sum();

        let mut qpen = 0.0;
        for row in u.rows() {
            let rho = row.dot(&row).sqrt();
            qpen += q_alpha(rho, cfg.alpha).unwrap();
        }

        let mut pterm = 0.0;
        if !pert.is_zero() {
            let c = pert.g().dot(&pert.g().t()) * pert.scale();
            let x = u.dot(&u.t());
            pterm = (&c * &x).sum();
        }

        mse + cfg.lambda1 * frob + cfg.lambda2 * qpen + pterm
    }

    #[test]
    fn objective_matches_naive_reimplementation() {
        for (seed, kernel) in [(60u64, KernelMatrix::pairwise()), (61, KernelMatrix::transe())] {
            let (model, obs) = small_instance(4, 2, 20, kernel, seed);
            // Small alpha so the hinge is active on several rows.
            let cfg = cfg(0.8, 0.05, 0.3, 2);
            let pert = make_perturbation(12, cfg.lambda1, cfg.perturbation_seed).unwrap();
            let bd = objective_eval(&model, &obs, &cfg, &pert).unwrap();
            let naive = naive_total(&model, &obs, &cfg, &pert);
            assert_abs_diff_eq!(bd.total, naive, epsilon = 1e-10 * naive.abs().max(1.0));
            assert!(bd.qalpha_penalty > 0.0, "hinge should be active");
            assert!(bd.perturbation_term > 0.0);
        }
    }

    #[test]
    fn breakdown_total_is_sum_of_parts() {
        let (model, obs) = small_instance(4, 3, 25, KernelMatrix::pairwise(), 62);
        let cfg = cfg(0.5, 0.01, 0.2, 3);
        let pert = make_perturbation(12, cfg.lambda1, 3).unwrap();
        let bd = objective_eval(&model, &obs, &cfg, &pert).unwrap();
        let sum = bd.mse + bd.frob_penalty + bd.qalpha_penalty + bd.perturbation_term;
        assert_abs_diff_eq!(bd.total, sum, epsilon = 1e-12 * sum.abs());
        assert!(bd.mse >= 0.0 && bd.frob_penalty >= 0.0);
        assert!(bd.qalpha_penalty >= 0.0 && bd.perturbation_term >= 0.0);
    }

    #[test]
    fn objective_is_invariant_under_column_permutation() {
        let (model, obs) = small_instance(4, 3, 25, KernelMatrix::pairwise(), 63);
        let cfg = cfg(0.5, 0.01, 0.2, 3);
        let pert = make_perturbation(12, cfg.lambda1, 4).unwrap();
        let perm = [2usize, 0, 1];
        let permute = |m: &Array2<f64>| {
            let mut out = Array2::zeros(m.raw_dim());
            for (new_col, &old_col) in perm.iter().enumerate() {
                out.column_mut(new_col).assign(&m.column(old_col));
            }
            out
        };
        let permuted = FactorModel::new(
            permute(model.x()),
            permute(model.y()),
            permute(model.z()),
            *model.kernel(),
        )
        .unwrap();
        let a = objective_eval(&model, &obs, &cfg, &pert).unwrap();
        let b = objective_eval(&permuted, &obs, &cfg, &pert).unwrap();
        assert_abs_diff_eq!(a.total, b.total, epsilon = 1e-12 * a.total.abs());
    }

    #[test]
    fn plain_mse_reduction_without_regularizers() {
        let (model, obs) = small_instance(4, 2, 15, KernelMatrix::identity(), 64);
        let cfg = cfg(1.0, 0.0, 0.0, 2);
        let bd = objective_eval(&model, &obs, &cfg, &Perturbation::zero()).unwrap();
        let mut direct = 0.0;
        for &(t, y) in obs.entries() {
            let r = model.predict_entry(t).unwrap() - y;
            direct += r * r;
        }
        direct /= obs.len() as f64;
        assert_abs_diff_eq!(bd.total, direct, epsilon = 1e-14);
        assert_eq!(bd.frob_penalty, 0.0);
        assert_eq!(bd.qalpha_penalty, 0.0);
        assert_eq!(bd.perturbation_term, 0.0);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit_without_regularizers() {
        let (model, obs) = small_instance(5, 2, 40, KernelMatrix::pairwise(), 65);
        let cfg = cfg(1e6, 0.0, 0.0, 2);
        let (gx, gy, gz) =
            objective_grad(&model, &obs, &cfg, &Perturbation::zero()).unwrap();
        for g in [gx, gy, gz] {
            for v in g.iter() {
                assert!(v.abs() < 1e-10, "gradient entry {v} at exact fit");
            }
        }
    }

    fn finite_difference_grad(
        model: &FactorModel,
        obs: &ObservationSet,
        cfg: &RegularizationConfig,
        pert: &Perturbation,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let eval_at = |x: &Array2<f64>, y: &Array2<f64>, z: &Array2<f64>| -> f64 {
            let m = FactorModel::new(x.clone(), y.clone(), z.clone(), *model.kernel()).unwrap();
            objective_eval(&m, obs, cfg, pert).unwrap().total
        };
        let mut parts = Vec::new();
        for which in 0..3 {
            let base = match which {
                0 => model.x().clone(),
                1 => model.y().clone(),
                _ => model.z().clone(),
            };
            let mut g = Array2::zeros(base.raw_dim());
            for idx in 0..base.len() {
                let (i, j) = (idx / base.ncols(), idx % base.ncols());
                let h = 1e-5 * (1.0 + base[[i, j]].abs());
                let mut plus = base.clone();
                plus[[i, j]] += h;
                let mut minus = base.clone();
                minus[[i, j]] -= h;
                let (fp, fm) = match which {
                    0 => (
                        eval_at(&plus, model.y(), model.z()),
                        eval_at(&minus, model.y(), model.z()),
                    ),
                    1 => (
                        eval_at(model.x(), &plus, model.z()),
                        eval_at(model.x(), &minus, model.z()),
                    ),
                    _ => (
                        eval_at(model.x(), model.y(), &plus),
                        eval_at(model.x(), model.y(), &minus),
                    ),
                };
                g[[i, j]] = (fp - fm) / (2.0 * h);
            }
            parts.push(g);
        }
        let gz = parts.pop().unwrap();
        let gy = parts.pop().unwrap();
        let gx = parts.pop().unwrap();
        (gx, gy, gz)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, kernel) in [(70u64, KernelMatrix::pairwise()), (71, KernelMatrix::transe())] {
            let (model, obs) = small_instance(4, 3, 18, kernel, seed);
            let cfg = cfg(0.9, 0.02, 0.25, 3);
            let pert = make_perturbation(12, cfg.lambda1, cfg.perturbation_seed).unwrap();
            let (ax, ay, az) = objective_grad(&model, &obs, &cfg, &pert).unwrap();
            let (nx, ny, nz) = finite_difference_grad(&model, &obs, &cfg, &pert);
            let mut diff = 0.0;
            let mut norm = 0.0;
            for (a, n) in [(ax, nx), (ay, ny), (az, nz)] {
                for (va, vn) in a.iter().zip(n.iter()) {
                    diff += (va - vn) * (va - vn);
                    norm += va * va;
                }
            }
            let rel = (diff / norm).sqrt();
            assert!(rel < 1e-5, "finite-difference mismatch: rel err {rel}");
        }
    }

    #[test]
    fn perturbation_gradient_matches_dense_oracle() {
        let d = 4;
        let rows = 3 * d;
        let pert = make_perturbation(rows, 0.4, 17).unwrap();
        let mut rng = crate::rng::chacha(42);
        let u = Array2::from_shape_fn((rows, 3), |_| rng.random_range(-1.0..1.0));
        let mut got = Array2::zeros((rows, 3));
        pert.add_grad(&u, &mut got).unwrap();
        let c = pert.g().dot(&pert.g().t()) * pert.scale();
        let expected = c.dot(&u) * 2.0;
        for (g, e) in got.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let (model, obs) = small_instance(4, 2, 10, KernelMatrix::pairwise(), 80);
        let cfg_ok = cfg(1.0, 0.1, 0.0, 2);
        let wrong_pert = make_perturbation(9, 0.1, 1).unwrap();
        assert!(objective_eval(&model, &obs, &cfg_ok, &wrong_pert).is_err());

        let other_dims = TensorDims::cubic(5).unwrap();
        let other_obs = ObservationSet::new(
            other_dims,
            vec![(EntryIndex::new(0, 0, 0), 1.0)],
        )
        .unwrap();
        assert!(objective_eval(&model, &other_obs, &cfg_ok, &Perturbation::zero()).is_err());

        let bad_cfg = cfg(-1.0, 0.0, 0.0, 2);
        assert!(objective_eval(&model, &obs, &bad_cfg, &Perturbation::zero()).is_err());
    }
}
