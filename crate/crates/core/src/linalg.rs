//! Dense LU factorization with partial pivoting, used by the shared-only
//! `solve` primitive.

use thiserror::Error;

use crate::tensor::{Shape, TensorValue};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("expected a square matrix, got shape {0}")]
    NotSquare(Shape),
    #[error("right-hand side of shape {rhs} does not match a {n}x{n} system")]
    Dimension { n: usize, rhs: Shape },
    #[error("singular system: pivot {pivot:e} in column {column} is below tolerance")]
    Singular { column: usize, pivot: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    /// A pivot counts as zero when its magnitude is below this fraction of the
    /// largest magnitude in the same column of the original matrix.
    pub pivot_tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            pivot_tolerance: 1e-12,
        }
    }
}

/// `PA = LU`, stored compactly (unit lower triangle implied).
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &TensorValue, opts: SolveOptions) -> Result<Lu, LinalgError> {
        let n = match a.shape().dims() {
            &[r, c] if r == c => r,
            _ => return Err(LinalgError::NotSquare(a.shape().clone())),
        };
        let mut lu = a.data().to_vec();
        let column_scale: Vec<f64> = (0..n)
            .map(|k| (0..n).map(|i| lu[i * n + k].abs()).fold(0.0, f64::max))
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot == 0.0 || pivot < opts.pivot_tolerance * column_scale[k] || !pivot.is_finite() {
                return Err(LinalgError::Singular {
                    column: k + 1,
                    pivot,
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let d = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / d;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves for one right-hand side column.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

/// Solves `A x = b` for `b` of shape `(p)` or `(p, k)`.
pub fn solve(a: &TensorValue, b: &TensorValue) -> Result<TensorValue, LinalgError> {
    solve_with(a, b, SolveOptions::default())
}

pub fn solve_with(
    a: &TensorValue,
    b: &TensorValue,
    opts: SolveOptions,
) -> Result<TensorValue, LinalgError> {
    let lu = Lu::factor(a, opts)?;
    let n = lu.dim();
    let dims = b.shape().dims();
    match dims {
        [p] if *p == n => Ok(TensorValue::vector(lu.solve_vec(b.data()))),
        [p, k] if *p == n => {
            let k = *k;
            let mut out = vec![0.0; n * k];
            for c in 0..k {
                let col: Vec<f64> = (0..n).map(|i| b.data()[i * k + c]).collect();
                for (i, v) in lu.solve_vec(&col).into_iter().enumerate() {
                    out[i * k + c] = v;
                }
            }
            Ok(TensorValue::new(b.shape().clone(), out).expect("shape preserved"))
        }
        _ => Err(LinalgError::Dimension {
            n,
            rhs: b.shape().clone(),
        }),
    }
}
