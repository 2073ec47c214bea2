//! Small dense linear-algebra and LP helpers shared by the modules.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative tolerance used for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program solver failed: {0}")]
    Solver(String),
}

/// Index of the largest value; ties resolve to the lowest index.
///
/// Returns `None` on empty input. NaN entries never win.
pub fn argmax_lowest<I: IntoIterator<Item = f64>>(values: I) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            None if !v.is_nan() => best = Some((i, v)),
            Some((_, b)) if v > b => best = Some((i, v)),
            _ => {}
        }
    }
    best.map(|(i, _)| i)
}

/// Numerical rank of `m` with singular values compared against
/// `tol * max(sigma)`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0_f64, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * top).count()
}

/// Orthonormal basis (as columns, `d x r`) of the span of the rows of `rows`.
///
/// The basis comes from the right singular vectors of the rows whose singular
/// values exceed `tol * max(sigma)`.
pub fn row_space_basis(rows: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let d = rows.ncols();
    if rows.nrows() == 0 {
        return DMatrix::zeros(d, 0);
    }
    let svd = rows.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let top = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| top > 0.0 && s > tol * top)
        .map(|(i, _)| i)
        .collect();
    let mut basis = DMatrix::zeros(d, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        for j in 0..d {
            basis[(j, col)] = v_t[(i, j)];
        }
    }
    basis
}

/// Result of a minimax (Chebyshev) linear fit.
#[derive(Debug, Clone)]
pub struct ChebyshevFit {
    pub theta: DVector<f64>,
    /// `max_i |(A theta - b)_i|` evaluated at the returned `theta`.
    pub residual: f64,
}

/// Solves `min_theta ||A theta - b||_inf` exactly as a linear program.
///
/// Variables are `theta` (free) and `t >= 0`; constraints are
/// `-t <= a_i . theta - b_i <= t` for every row.
pub fn chebyshev_fit(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<ChebyshevFit, LpError> {
    assert_eq!(a.nrows(), b.len(), "row count mismatch");
    let d = a.ncols();
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let theta: Vec<_> = (0..d)
        .map(|_| problem.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let t = problem.add_var(1.0, (0.0, f64::INFINITY));
    for i in 0..a.nrows() {
        let mut upper: Vec<_> = (0..d).map(|j| (theta[j], a[(i, j)])).collect();
        upper.push((t, -1.0));
        problem.add_constraint(upper.as_slice(), ComparisonOp::Le, b[i]);
        let mut lower: Vec<_> = (0..d).map(|j| (theta[j], a[(i, j)])).collect();
        lower.push((t, 1.0));
        problem.add_constraint(lower.as_slice(), ComparisonOp::Ge, b[i]);
    }
    let solution = problem.solve().map_err(map_lp_error)?;
    let theta = DVector::from_iterator(d, theta.iter().map(|&v| solution[v]));
    let residual = (a * &theta - b).amax();
    Ok(ChebyshevFit { theta, residual })
}

/// Outcome of maximizing a linear function over a polytope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LpValue {
    Bounded(f64),
    Unbounded,
}

/// Maximizes `c . v` over `{ v : |a_i . v| <= 1 for every row a_i of slabs }`.
pub fn max_over_slabs(c: &[f64], slabs: &DMatrix<f64>) -> Result<LpValue, LpError> {
    Ok(match argmax_over_slabs(c, slabs)? {
        Some((value, _)) => LpValue::Bounded(value),
        None => LpValue::Unbounded,
    })
}

/// As [`max_over_slabs`], also returning a maximizer; `None` when unbounded.
pub fn argmax_over_slabs(c: &[f64], slabs: &DMatrix<f64>) -> Result<Option<(f64, DVector<f64>)>, LpError> {
    let d = c.len();
    assert_eq!(slabs.ncols(), d, "dimension mismatch");
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let v: Vec<_> = c
        .iter()
        .map(|&ci| problem.add_var(ci, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    for i in 0..slabs.nrows() {
        let row: Vec<_> = (0..d).map(|j| (v[j], slabs[(i, j)])).collect();
        problem.add_constraint(row.as_slice(), ComparisonOp::Le, 1.0);
        problem.add_constraint(row.as_slice(), ComparisonOp::Ge, -1.0);
    }
    match problem.solve() {
        Ok(sol) => Ok(Some((sol.objective(), DVector::from_iterator(d, v.iter().map(|&x| sol[x]))))),
        Err(microlp::Error::Unbounded) => Ok(None),
        Err(e) => Err(map_lp_error(e)),
    }
}

fn map_lp_error(e: microlp::Error) -> LpError {
    match e {
        microlp::Error::Infeasible => LpError::Infeasible,
        other => LpError::Solver(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_lowest([1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_lowest([f64::NAN, 0.0]), Some(1));
        assert_eq!(argmax_lowest(std::iter::empty()), None);
    }

    #[test]
    fn chebyshev_fit_of_constant_model() {
        // min_c max |c - b_i| is attained at the midrange.
        let a = DMatrix::from_element(3, 1, 1.0);
        let b = DVector::from_vec(vec![0.0, 1.0, 4.0]);
        let fit = chebyshev_fit(&a, &b).unwrap();
        assert_abs_diff_eq!(fit.theta[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.residual, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn slab_lp_bounded_and_unbounded() {
        let slabs = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(max_over_slabs(&[1.0, 1.0], &slabs).unwrap(), LpValue::Bounded(2.0));
        let thin = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(max_over_slabs(&[0.0, 1.0], &thin).unwrap(), LpValue::Unbounded);
    }

    #[test]
    fn row_space_basis_detects_rank() {
        let rows = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let basis = row_space_basis(&rows, RANK_TOL);
        assert_eq!(basis.ncols(), 2);
        assert_eq!(numerical_rank(&rows, RANK_TOL), 2);
        let gram = basis.transpose() * &basis;
        assert_abs_diff_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-12);
    }
}
