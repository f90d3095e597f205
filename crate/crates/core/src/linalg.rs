//! Dense helpers on top of nalgebra for the small SPD systems used here.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Cholesky factorization that reports failure as a positive-definiteness error.
pub(crate) fn cholesky<T: Scalar>(
    m: &DMatrix<T>,
    what: &'static str,
    stage: Option<usize>,
) -> Result<Cholesky<T, Dyn>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite { what, stage });
    }
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite { what, stage })
}

/// `log det` of the factored matrix.
pub(crate) fn log_det<T: Scalar>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    (0..l.nrows()).fold(T::zero(), |acc, i| acc + l[(i, i)].ln())
        * lit::<T>(2.0)
}

pub(crate) fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let half = lit::<T>(0.5);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub(crate) fn check_square<T: Scalar>(m: &DMatrix<T>, n: usize, what: &'static str) -> Result<()> {
    if m.nrows() != n {
        return Err(Error::Dimension { what, expected: n, found: m.nrows() });
    }
    if m.ncols() != n {
        return Err(Error::Dimension { what, expected: n, found: m.ncols() });
    }
    Ok(())
}

/// Symmetric (relative tolerance) and Cholesky-factorable.
pub(crate) fn check_spd<T: Scalar>(
    m: &DMatrix<T>,
    what: &'static str,
    stage: Option<usize>,
) -> Result<Cholesky<T, Dyn>> {
    let scale = m.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let tol = lit::<T>(1e-10) * (T::one() + scale);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::invalid(format!(
                    "{what} is not symmetric{}",
                    stage.map(|s| format!(" (stage {s})")).unwrap_or_default()
                )));
            }
        }
    }
    cholesky(m, what, stage)
}

pub(crate) fn block_diag<T: Scalar>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut at = 0;
    for b in blocks {
        let n = b.nrows();
        out.view_mut((at, at), (n, n)).copy_from(*b);
        at += n;
    }
    out
}
