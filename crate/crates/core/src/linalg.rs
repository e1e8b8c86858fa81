//! Small dense routines shared by the solvers: symmetric positive definite
//! solves and power iteration for extreme eigenpairs.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Solves `a x = b` in place for a symmetric positive definite matrix.
///
/// `a` is overwritten with its lower Cholesky factor and `b` with the
/// solution. Fails with a singular-system error when a pivot is not
/// strictly positive.
pub fn cholesky_solve_in_place(a: &mut Array2<f64>, b: &mut [f64]) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "expected square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "right-hand side has length {} for a {n}x{n} system",
            b.len()
        )));
    }

    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::SingularSystem(format!(
                "non-positive pivot {d:e} at column {j}"
            )));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
    }

    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[[i, k]] * b[k];
        }
        b[i] = s / a[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[[k, i]] * b[k];
        }
        b[i] = s / a[[i, i]];
    }
    Ok(())
}

/// Symmetric linear operator given by its matrix-vector product.
pub trait SymOp {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

pub struct DenseSym<'a>(pub &'a Array2<f64>);

impl SymOp for DenseSym<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = 0.0;
            // Iterate the row view instead of slicing so transposed or
            // otherwise strided matrices work too.
            for (a, b) in self.0.row(i).iter().zip(x) {
                s += a * b;
            }
            out[i] = s;
        }
    }
}

pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flips the vector so its first coordinate of non-negligible magnitude is
/// positive, making eigenvectors deterministic up to the eigenspace.
fn canonicalize_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    for &x in v.iter() {
        if x.abs() > 1e-12 * max {
            if x < 0.0 {
                for y in v.iter_mut() {
                    *y = -*y;
                }
            }
            return;
        }
    }
}

/// Eigenvalue of largest magnitude, by power iteration from a fixed
/// all-ones start. Converges when the Rayleigh quotient changes by less
/// than `rel_tol` relatively; a zero image means the operator annihilates
/// the start vector and the pair (0, start) is returned as converged.
pub fn dominant_eigenpair(op: &dyn SymOp, rel_tol: f64, max_iters: usize) -> Result<EigenPair> {
    let n = op.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("operator of dimension zero".into()));
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut w = vec![0.0; n];
    let mut lambda = 0.0f64;
    for it in 1..=max_iters {
        op.apply(&v, &mut w);
        let new_lambda = dot(&v, &w);
        if !new_lambda.is_finite() {
            return Err(Error::Numerical(
                "power iteration produced a non-finite Rayleigh quotient".into(),
            ));
        }
        let nw = norm(&w);
        if nw == 0.0 {
            canonicalize_sign(&mut v);
            return Ok(EigenPair {
                value: 0.0,
                vector: v,
                iterations: it,
                converged: true,
            });
        }
        for (y, x) in v.iter_mut().zip(&w) {
            *y = x / nw;
        }
        let done = (new_lambda - lambda).abs() <= rel_tol * new_lambda.abs().max(1e-300);
        lambda = new_lambda;
        if done && it > 1 {
            canonicalize_sign(&mut v);
            return Ok(EigenPair {
                value: lambda,
                vector: v,
                iterations: it,
                converged: true,
            });
        }
    }
    canonicalize_sign(&mut v);
    Ok(EigenPair {
        value: lambda,
        vector: v,
        iterations: max_iters,
        converged: false,
    })
}

struct Shifted<'a> {
    inner: &'a dyn SymOp,
    shift: f64,
}

impl SymOp for Shifted<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.inner.apply(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.shift * xi - *o;
        }
    }
}

/// Most negative eigenvalue and its eigenvector: a first power iteration
/// bounds the spectral radius, a second runs on `shift*I - M` whose
/// dominant eigenvector is the minimizer of the quadratic form.
pub fn most_negative_eigenpair(
    op: &dyn SymOp,
    rel_tol: f64,
    max_iters: usize,
) -> Result<EigenPair> {
    let radius = dominant_eigenpair(op, rel_tol, max_iters)?;
    let shift = radius.value.abs() * 1.01 + 1e-12;
    let shifted = Shifted { inner: op, shift };
    let top = dominant_eigenpair(&shifted, rel_tol, max_iters)?;
    Ok(EigenPair {
        value: shift - top.value,
        vector: top.vector,
        iterations: radius.iterations + top.iterations,
        converged: radius.converged && top.converged,
    })
}
