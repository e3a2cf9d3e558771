//! Central finite-difference checks of analytic tangent-space Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::manifold::ParameterBlock;
use crate::solver::CostTerm;

/// Central-difference Jacobians of `f` with respect to each block's tangent
/// increment, applied through ⊞.
pub fn numeric_jacobians<F>(f: F, params: &[ParameterBlock], step: f64) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&[&ParameterBlock]) -> Result<DVector<f64>>,
{
    let refs: Vec<&ParameterBlock> = params.iter().collect();
    let m = f(&refs)?.len();
    let mut out = Vec::with_capacity(params.len());
    for (bi, block) in params.iter().enumerate() {
        let d = block.tangent_dim();
        let mut jac = DMatrix::zeros(m, d);
        for c in 0..d {
            let mut delta = DVector::zeros(d);
            delta[c] = step;
            let plus = block.plus(&delta)?;
            let minus = block.plus(&(-delta))?;
            let mut p: Vec<&ParameterBlock> = refs.clone();
            p[bi] = &plus;
            let ep = f(&p)?;
            p[bi] = &minus;
            let em = f(&p)?;
            jac.set_column(c, &((ep - em) / (2.0 * step)));
        }
        out.push(jac);
    }
    Ok(out)
}

/// Relative error between analytic and numeric Jacobians, measured over all
/// blocks stacked side by side.
pub fn relative_error(analytic: &[DMatrix<f64>], numeric: &[DMatrix<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut scale = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return f64::INFINITY;
        }
        diff += (a - n).norm_squared();
        scale += n.norm_squared();
    }
    if analytic.len() != numeric.len() {
        return f64::INFINITY;
    }
    diff.sqrt() / scale.sqrt().max(1e-12)
}

/// Compares a cost term's analytic Jacobians with central differences.
pub fn check_cost_term(term: &dyn CostTerm, params: &[ParameterBlock], step: f64) -> Result<f64> {
    let refs: Vec<&ParameterBlock> = params.iter().collect();
    let (_, analytic) = term.evaluate(&refs)?;
    let numeric = numeric_jacobians(|p| term.evaluate(p).map(|(e, _)| e), params, step)?;
    Ok(relative_error(&analytic, &numeric))
}
