//! The quadratic entry function as a symmetric 3x3 kernel matrix, plus the
//! implicit sensing view used by gradients and the convex solver.
//!
//! An entry of the model tensor is
//! `kappa(a, b, c) = K11 |a|^2 + K22 |b|^2 + K33 |c|^2
//!                 + 2 K12 <a,b> + 2 K13 <a,c> + 2 K23 <b,c>`
//! for factor rows `a, b, c`. Equivalently, with the rows stacked into
//! `u = [a; b; c]`, it is the quadratic form `<u, K u>` applied blockwise.
//! For an observation at `(i, j, k)` the same value is `<A_t, U U^T>` where
//! `A_t` places `K` at rows and columns `(i, d1+j, d1+d2+k)` of a stacked
//! square matrix; `A_t` is never materialized, every routine here works on
//! its nine nonzero entries.

use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::{EntryIndex, TensorDims};

/// Symmetric 3x3 kernel matrix; immutable after construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMatrix {
    k: [[f64; 3]; 3],
}

impl KernelMatrix {
    /// Zero diagonal, 1/2 off-diagonal: the sum of the three pairwise
    /// inner products of the factor rows.
    pub fn pairwise() -> Self {
        Self {
            k: [[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]],
        }
    }

    /// Identity kernel: the sum of the three squared row norms.
    pub fn identity() -> Self {
        Self {
            k: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Kernel of the translation score `|a + b - c|^2`.
    pub fn transe() -> Self {
        Self {
            k: [[1.0, 1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]],
        }
    }

    /// Arbitrary kernel; the input is symmetrized as `(K + K^T)/2`, which
    /// leaves the quadratic form unchanged.
    pub fn custom(m: [[f64; 3]; 3]) -> Result<Self> {
        for row in &m {
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "kernel entries must be finite, got {v}"
                    )));
                }
            }
        }
        let mut k = [[0.0; 3]; 3];
        for (p, row) in k.iter_mut().enumerate() {
            for (q, item) in row.iter_mut().enumerate() {
                *item = 0.5 * (m[p][q] + m[q][p]);
            }
        }
        Ok(Self { k })
    }

    pub fn entry(&self, p: usize, q: usize) -> f64 {
        self.k[p][q]
    }

    pub fn as_array(&self) -> &[[f64; 3]; 3] {
        &self.k
    }

    /// True when all three diagonal entries are exactly zero, which is the
    /// condition for the alternating solver's subproblems to be linear
    /// least squares.
    pub fn has_zero_diagonal(&self) -> bool {
        self.k[0][0] == 0.0 && self.k[1][1] == 0.0 && self.k[2][2] == 0.0
    }

    /// Evaluates the quadratic form on three factor rows.
    pub fn eval(&self, a: &[f64], b: &[f64], c: &[f64]) -> Result<f64> {
        if a.len() != b.len() || a.len() != c.len() {
            return Err(Error::InvalidArgument(format!(
                "kernel arguments must have equal length, got {}, {}, {}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        Ok(self.eval_unchecked(a, b, c))
    }

    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64], c: &[f64]) -> f64 {
        let mut aa = 0.0;
        let mut bb = 0.0;
        let mut cc = 0.0;
        let mut ab = 0.0;
        let mut ac = 0.0;
        let mut bc = 0.0;
        for l in 0..a.len() {
            let (x, y, z) = (a[l], b[l], c[l]);
            aa += x * x;
            bb += y * y;
            cc += z * z;
            ab += x * y;
            ac += x * z;
            bc += y * z;
        }
        self.k[0][0] * aa
            + self.k[1][1] * bb
            + self.k[2][2] * cc
            + 2.0 * (self.k[0][1] * ab + self.k[0][2] * ac + self.k[1][2] * bc)
    }

    /// The quadratic form on scalars, i.e. the single-column case.
    pub fn eval_scalar(&self, x: f64, y: f64, z: f64) -> f64 {
        self.k[0][0] * x * x
            + self.k[1][1] * y * y
            + self.k[2][2] * z * z
            + 2.0 * (self.k[0][1] * x * y + self.k[0][2] * x * z + self.k[1][2] * y * z)
    }
}

/// Kernel selector, also the CLI/config representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Pairwise,
    TransE,
    Identity,
    Custom([[f64; 3]; 3]),
}

impl KernelKind {
    /// Short name used in file names and logs.
    pub fn tag(&self) -> &'static str {
        match self {
            KernelKind::Pairwise => "pairwise",
            KernelKind::TransE => "transe",
            KernelKind::Identity => "identity",
            KernelKind::Custom(_) => "custom",
        }
    }
}

pub fn make_kernel(kind: KernelKind) -> Result<KernelMatrix> {
    match kind {
        KernelKind::Pairwise => Ok(KernelMatrix::pairwise()),
        KernelKind::TransE => Ok(KernelMatrix::transe()),
        KernelKind::Identity => Ok(KernelMatrix::identity()),
        KernelKind::Custom(m) => KernelMatrix::custom(m),
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    /// Accepts "pairwise", "transe", "identity", or nine comma-separated
    /// numbers in row-major order.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pairwise" => return Ok(KernelKind::Pairwise),
            "transe" => return Ok(KernelKind::TransE),
            "identity" => return Ok(KernelKind::Identity),
            _ => {}
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 9 {
            return Err(Error::InvalidArgument(format!(
                "unknown kernel '{s}': expected pairwise, transe, identity, or 9 comma-separated numbers"
            )));
        }
        let mut m = [[0.0; 3]; 3];
        for (idx, p) in parts.iter().enumerate() {
            m[idx / 3][idx % 3] = p.parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!("kernel entry '{p}' is not a number"))
            })?;
        }
        Ok(KernelKind::Custom(m))
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::Custom(m) => {
                let flat: Vec<String> = m.iter().flatten().map(|v| v.to_string()).collect();
                write!(f, "{}", flat.join(","))
            }
            other => write!(f, "{}", other.tag()),
        }
    }
}

/// One observed position together with the kernel that defines its implicit
/// sensing matrix.
#[derive(Debug, Clone, Copy)]
pub struct SensingEntry<'a> {
    pub index: EntryIndex,
    pub kernel: &'a KernelMatrix,
}

impl<'a> SensingEntry<'a> {
    pub fn new(index: EntryIndex, kernel: &'a KernelMatrix) -> Self {
        Self { index, kernel }
    }
}

fn stacked_rows_of(dims: TensorDims, t: EntryIndex) -> (usize, usize, usize) {
    (t.i, dims.d1() + t.j, dims.d1() + dims.d2() + t.k)
}

fn check_stacked(dims: TensorDims, u: &Array2<f64>) -> Result<()> {
    if u.nrows() != dims.stacked_rows() {
        return Err(Error::ShapeMismatch(format!(
            "stacked factor matrix has {} rows, expected {} for dims {dims}",
            u.nrows(),
            dims.stacked_rows()
        )));
    }
    Ok(())
}

/// `<A_t, U U^T>` for the implicit sensing matrix of `entry`, computed as
/// the kernel form on the three selected rows of `U`.
pub fn sensing_inner(entry: SensingEntry<'_>, dims: TensorDims, u: &Array2<f64>) -> Result<f64> {
    dims.check(entry.index)?;
    check_stacked(dims, u)?;
    let (ri, rj, rk) = stacked_rows_of(dims, entry.index);
    let u = u.as_standard_layout();
    let us = u.as_slice().expect("standard layout");
    let rank = u.ncols();
    Ok(entry.kernel.eval_unchecked(
        &us[ri * rank..(ri + 1) * rank],
        &us[rj * rank..(rj + 1) * rank],
        &us[rk * rank..(rk + 1) * rank],
    ))
}

/// `sum_t z_t (A_t + A_t^T) U` assembled by sparse scatter: for each
/// weighted observation the three selected rows of the output receive the
/// kernel-weighted combinations of the corresponding rows of `U`, with the
/// factor 2 of the symmetrized product included.
pub fn sensing_accumulate(
    weights: &[(EntryIndex, f64)],
    kernel: &KernelMatrix,
    dims: TensorDims,
    u: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_stacked(dims, u)?;
    let mut out = Array2::zeros(u.raw_dim());
    accumulate_into(weights, kernel, dims, u, &mut out)?;
    Ok(out)
}

pub(crate) fn accumulate_into(
    weights: &[(EntryIndex, f64)],
    kernel: &KernelMatrix,
    dims: TensorDims,
    u: &Array2<f64>,
    out: &mut Array2<f64>,
) -> Result<()> {
    let rank = u.ncols();
    let k = kernel.as_array();
    let u = u.as_standard_layout();
    let us = u.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for &(t, z) in weights {
        dims.check(t)?;
        let (ri, rj, rk) = stacked_rows_of(dims, t);
        let rows = [ri, rj, rk];
        for p in 0..3 {
            let dst = rows[p] * rank;
            for q in 0..3 {
                let w = 2.0 * z * k[p][q];
                if w == 0.0 {
                    continue;
                }
                let src = rows[q] * rank;
                for l in 0..rank {
                    os[dst + l] += w * us[src + l];
                }
            }
        }
    }
    Ok(())
}
