//! Factor-matrix models: the quadratic kernel model, the CP baseline,
//! ground-truth generation, prediction, dense reconstruction, and row-norm
//! incoherence measurement.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::rng;
use crate::tensor::{DenseTensor, EntryIndex, TensorDims};

/// Default upper bound on any mode size for dense reconstruction; at this
/// cap the dense tensor holds 256^3 doubles (128 MiB).
pub const DENSE_MODE_CAP: usize = 256;

/// Entry distribution for generated ground-truth factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorDistribution {
    /// Each entry N(0, 1).
    StandardNormal,
    /// Each entry N(0, 1/d) with d the row count of its own mode.
    NormalInvDim,
}

pub(crate) fn random_factor_matrix(
    rows: usize,
    cols: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let mut vals = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let g: f64 = rng.sample(StandardNormal);
        vals.push(sigma * g);
    }
    Array2::from_shape_vec((rows, cols), vals).expect("matching length")
}

fn check_finite(name: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "factor matrix {name} contains a non-finite entry"
        )));
    }
    Ok(())
}

/// Rewrites a matrix into standard (row-major) memory order so rows can be
/// taken as contiguous slices; matrices born from views or transposed
/// products may arrive in flipped order.
fn standardized(m: Array2<f64>) -> Array2<f64> {
    if m.is_standard_layout() {
        m
    } else {
        let mut out = Array2::zeros(m.raw_dim());
        out.assign(&m);
        out
    }
}

/// Quadratic model: three factor matrices sharing a column count, plus the
/// kernel that turns row triples into tensor entries.
#[derive(Debug, Clone)]
pub struct FactorModel {
    x: Array2<f64>,
    y: Array2<f64>,
    z: Array2<f64>,
    kernel: KernelMatrix,
    dims: TensorDims,
}

impl FactorModel {
    pub fn new(
        x: Array2<f64>,
        y: Array2<f64>,
        z: Array2<f64>,
        kernel: KernelMatrix,
    ) -> Result<Self> {
        let r = x.ncols();
        if r == 0 {
            return Err(Error::InvalidArgument(
                "factor matrices need at least one column".into(),
            ));
        }
        if y.ncols() != r || z.ncols() != r {
            return Err(Error::ShapeMismatch(format!(
                "factor column counts differ: {}, {}, {}",
                r,
                y.ncols(),
                z.ncols()
            )));
        }
        check_finite("X", &x)?;
        check_finite("Y", &y)?;
        check_finite("Z", &z)?;
        let dims = TensorDims::new(x.nrows(), y.nrows(), z.nrows())?;
        Ok(Self {
            x: standardized(x),
            y: standardized(y),
            z: standardized(z),
            kernel,
            dims,
        })
    }

    pub fn zeros(dims: TensorDims, rank: usize, kernel: KernelMatrix) -> Result<Self> {
        Self::new(
            Array2::zeros((dims.d1(), rank)),
            Array2::zeros((dims.d2(), rank)),
            Array2::zeros((dims.d3(), rank)),
            kernel,
        )
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn kernel(&self) -> &KernelMatrix {
        &self.kernel
    }

    pub fn dims(&self) -> TensorDims {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.x.ncols()
    }

    pub fn predict_entry(&self, t: EntryIndex) -> Result<f64> {
        self.dims.check(t)?;
        Ok(self.predict_unchecked(t))
    }

    pub(crate) fn predict_unchecked(&self, t: EntryIndex) -> f64 {
        let a = self.x.row(t.i);
        let b = self.y.row(t.j);
        let c = self.z.row(t.k);
        self.kernel.eval_unchecked(
            a.as_slice().expect("standard layout row"),
            b.as_slice().expect("standard layout row"),
            c.as_slice().expect("standard layout row"),
        )
    }

    /// Full tensor of predictions, evaluated through the three Gram
    /// matrices so the cost is O(d^2 R + d^3) rather than O(d^3 R).
    pub fn reconstruct_dense(&self) -> Result<DenseTensor> {
        self.reconstruct_dense_with_cap(DENSE_MODE_CAP)
    }

    pub fn reconstruct_dense_with_cap(&self, cap: usize) -> Result<DenseTensor> {
        let d = self.dims;
        if d.d1() > cap || d.d2() > cap || d.d3() > cap {
            return Err(Error::ResourceLimit(format!(
                "dense reconstruction of a {d} tensor exceeds the mode cap {cap}"
            )));
        }
        let k = self.kernel.as_array();
        let gxy = standardized(self.x.dot(&self.y.t()));
        let gxz = standardized(self.x.dot(&self.z.t()));
        let gyz = standardized(self.y.dot(&self.z.t()));
        let sq = |m: &Array2<f64>| -> Vec<f64> {
            m.rows().into_iter().map(|r| r.dot(&r)).collect()
        };
        let sx = sq(&self.x);
        let sy = sq(&self.y);
        let sz = sq(&self.z);

        let mut out = DenseTensor::zeros(d);
        let values = out.values_mut();
        let (d2, d3) = (d.d2(), d.d3());
        for i in 0..d.d1() {
            let gxz_i = gxz.row(i);
            let gxz_i = gxz_i.as_slice().expect("standard layout row");
            let gxy_i = gxy.row(i);
            let gxy_i = gxy_i.as_slice().expect("standard layout row");
            for j in 0..d2 {
                let gyz_j = gyz.row(j);
                let gyz_j = gyz_j.as_slice().expect("standard layout row");
                let base = k[0][0] * sx[i] + k[1][1] * sy[j] + 2.0 * k[0][1] * gxy_i[j];
                let offset = (i * d2 + j) * d3;
                for kk in 0..d3 {
                    values[offset + kk] = base
                        + k[2][2] * sz[kk]
                        + 2.0 * (k[0][2] * gxz_i[kk] + k[1][2] * gyz_j[kk]);
                }
            }
        }
        Ok(out)
    }

    /// Stacks the factors into one `(d1+d2+d3) x R` matrix.
    pub fn stacked(&self) -> Array2<f64> {
        let d = self.dims;
        let r = self.rank();
        let mut u = Array2::zeros((d.stacked_rows(), r));
        u.slice_mut(s![0..d.d1(), ..]).assign(&self.x);
        u.slice_mut(s![d.d1()..d.d1() + d.d2(), ..]).assign(&self.y);
        u.slice_mut(s![d.d1() + d.d2().., ..]).assign(&self.z);
        u
    }

    /// Splits a stacked matrix back into the three factors.
    pub fn from_stacked(u: &Array2<f64>, dims: TensorDims, kernel: KernelMatrix) -> Result<Self> {
        if u.nrows() != dims.stacked_rows() {
            return Err(Error::ShapeMismatch(format!(
                "stacked matrix has {} rows, expected {} for dims {dims}",
                u.nrows(),
                dims.stacked_rows()
            )));
        }
        let x = u.slice(s![0..dims.d1(), ..]).to_owned();
        let y = u
            .slice(s![dims.d1()..dims.d1() + dims.d2(), ..])
            .to_owned();
        let z = u.slice(s![dims.d1() + dims.d2().., ..]).to_owned();
        Self::new(x, y, z, kernel)
    }
}

/// Maximum squared Euclidean row norm.
pub fn incoherence_alpha(u: &Array2<f64>) -> f64 {
    u.rows()
        .into_iter()
        .map(|r| r.dot(&r))
        .fold(0.0, f64::max)
}

/// A generated instance: factors plus the realized row-norm budget.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    model: FactorModel,
    alpha: f64,
}

impl GroundTruth {
    pub fn model(&self) -> &FactorModel {
        &self.model
    }

    pub fn into_model(self) -> FactorModel {
        self.model
    }

    /// Realized max squared row norm over all three factors, so that every
    /// row satisfies the `sqrt(alpha)` bound with equality somewhere.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Draws ground-truth factors entrywise from the chosen distribution; the
/// recorded alpha is the realized incoherence of the stacked factors.
pub fn random_ground_truth(
    dims: TensorDims,
    r: usize,
    kernel: KernelMatrix,
    dist: FactorDistribution,
    seed: u64,
) -> Result<GroundTruth> {
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let mut rng = rng::chacha(seed);
    let sigma = |d: usize| match dist {
        FactorDistribution::StandardNormal => 1.0,
        FactorDistribution::NormalInvDim => 1.0 / (d as f64).sqrt(),
    };
    let x = random_factor_matrix(dims.d1(), r, sigma(dims.d1()), &mut rng);
    let y = random_factor_matrix(dims.d2(), r, sigma(dims.d2()), &mut rng);
    let z = random_factor_matrix(dims.d3(), r, sigma(dims.d3()), &mut rng);
    let model = FactorModel::new(x, y, z, kernel)?;
    let alpha = incoherence_alpha(&model.stacked());
    Ok(GroundTruth { model, alpha })
}

/// CP model: entry (i,j,k) is the column-wise product sum
/// `sum_l A[i,l] B[j,l] C[k,l]`.
#[derive(Debug, Clone)]
pub struct CPModel {
    a: Array2<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
    dims: TensorDims,
}

impl CPModel {
    pub fn new(a: Array2<f64>, b: Array2<f64>, c: Array2<f64>) -> Result<Self> {
        let r = a.ncols();
        if r == 0 {
            return Err(Error::InvalidArgument(
                "factor matrices need at least one column".into(),
            ));
        }
        if b.ncols() != r || c.ncols() != r {
            return Err(Error::ShapeMismatch(format!(
                "factor column counts differ: {}, {}, {}",
                r,
                b.ncols(),
                c.ncols()
            )));
        }
        check_finite("A", &a)?;
        check_finite("B", &b)?;
        check_finite("C", &c)?;
        let dims = TensorDims::new(a.nrows(), b.nrows(), c.nrows())?;
        Ok(Self {
            a: standardized(a),
            b: standardized(b),
            c: standardized(c),
            dims,
        })
    }

    pub fn random(dims: TensorDims, r: usize, seed: u64) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        let mut rng = rng::chacha(seed);
        let a = random_factor_matrix(dims.d1(), r, 1.0, &mut rng);
        let b = random_factor_matrix(dims.d2(), r, 1.0, &mut rng);
        let c = random_factor_matrix(dims.d3(), r, 1.0, &mut rng);
        Self::new(a, b, c)
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn c(&self) -> &Array2<f64> {
        &self.c
    }

    pub fn dims(&self) -> TensorDims {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn predict_entry(&self, t: EntryIndex) -> Result<f64> {
        self.dims.check(t)?;
        Ok(self.predict_unchecked(t))
    }

    pub(crate) fn predict_unchecked(&self, t: EntryIndex) -> f64 {
        let a = self.a.row(t.i);
        let b = self.b.row(t.j);
        let c = self.c.row(t.k);
        let a = a.as_slice().expect("standard layout row");
        let b = b.as_slice().expect("standard layout row");
        let c = c.as_slice().expect("standard layout row");
        let mut s = 0.0;
        for l in 0..a.len() {
            s += a[l] * b[l] * c[l];
        }
        s
    }

    pub fn reconstruct_dense(&self) -> Result<DenseTensor> {
        self.reconstruct_dense_with_cap(DENSE_MODE_CAP)
    }

    pub fn reconstruct_dense_with_cap(&self, cap: usize) -> Result<DenseTensor> {
        let d = self.dims;
        if d.d1() > cap || d.d2() > cap || d.d3() > cap {
            return Err(Error::ResourceLimit(format!(
                "dense reconstruction of a {d} tensor exceeds the mode cap {cap}"
            )));
        }
        let mut out = DenseTensor::zeros(d);
        let values = out.values_mut();
        let (d2, d3) = (d.d2(), d.d3());
        for l in 0..self.rank() {
            for i in 0..d.d1() {
                let ail = self.a[[i, l]];
                for j in 0..d2 {
                    let w = ail * self.b[[j, l]];
                    let offset = (i * d2 + j) * d3;
                    for kk in 0..d3 {
                        values[offset + kk] += w * self.c[[kk, l]];
                    }
                }
            }
        }
        Ok(out)
    }
}
