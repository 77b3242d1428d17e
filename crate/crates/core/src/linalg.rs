use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition numbers above this are reported as failures.
pub(crate) const MAX_CONDITION: f64 = 1e12;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverts `a` by LU with partial pivoting, rejecting singular or
/// ill-conditioned input (1-norm condition number).
pub(crate) fn checked_inverse(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::Conditioning {
            what,
            cond: f64::INFINITY,
        })?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Conditioning { what, cond });
    }
    Ok(inv)
}

/// Solves `a x = rhs`, surfacing the condition number when it is too large.
pub(crate) fn solve(
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    what: &'static str,
) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(rhs).ok_or(Error::Conditioning {
        what,
        cond: f64::INFINITY,
    })?;
    // The inverse is only needed for the condition estimate; sizes here are small.
    let inv = lu.try_inverse().ok_or(Error::Conditioning {
        what,
        cond: f64::INFINITY,
    })?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Conditioning { what, cond });
    }
    Ok(x)
}

/// Numerical rank with a tolerance relative to the largest singular value.
pub(crate) fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > max * 1e-10).count()
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn rows_to_vecs(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn vecs_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
