//! Schur-complement marginalization and the resulting prior constraint.
//!
//! Marginalizing `x_m` collects every residual touching it, linearizes them at
//! the current values, and eliminates `x_m` from the normal equations:
//!
//! ```text
//! H* = H_ll - H_lm H_mm^{-1} H_ml
//! b* = b_l  - H_lm H_mm^{-1} b_m
//! ```
//!
//! The reduced system is stored as a residual `e_p = J_p (x_l ⊟ x̌_l) + o`
//! with `J_p^T J_p = H*` and `o = -(J_p^T)^+ b*`. At `x̌_l` this residual
//! contributes exactly `H*` and `b*` to the normal equations, and its
//! minimizer is the increment `H*^{-1} b*` of the reduced system.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MheError, Result};
use crate::manifold::ParameterBlock;
use crate::problem::ParamKey;
use crate::solver::{linearize, BlockLayout, CostTerm, Loss, Problem};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Eigenvalues below `-INDEFINITE_TOLERANCE * max` reject the matrix.
pub const INDEFINITE_TOLERANCE: f64 = 1e-8;
/// Eigenvalues below this fraction of the magnitude of the matrix a Schur
/// complement was taken from are elimination roundoff.
pub const ROUNDOFF_TOLERANCE: f64 = 1e-14;

/// Eigenvalues at or below this are treated as zero.
fn zero_threshold(max: f64, reference: f64) -> f64 {
    (RANK_TOLERANCE * max).max(ROUNDOFF_TOLERANCE * reference)
}

/// Normal equations of the residuals touching the marginalized blocks,
/// ordered with the marginalized blocks first.
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub marginalized: Vec<ParamKey>,
    pub marginalized_dims: Vec<usize>,
    pub linked: Vec<ParamKey>,
    pub linked_dims: Vec<usize>,
    /// Indices into `problem.residuals` of the collected residuals.
    pub residuals: Vec<usize>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Subproblem {
    pub fn dim_m(&self) -> usize {
        self.marginalized_dims.iter().sum()
    }

    pub fn dim_l(&self) -> usize {
        self.linked_dims.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

/// Collects the residuals touching `params_m` and assembles their dense
/// normal equations at the current values.
pub fn build_subproblem(problem: &Problem, params_m: &[ParamKey], loss: Loss) -> Result<Subproblem> {
    if params_m.is_empty() {
        return Err(MheError::InvalidInput("no parameters to marginalize".into()));
    }
    let m_set: BTreeSet<&ParamKey> = params_m.iter().collect();
    for k in params_m {
        if !problem.params.contains_key(k) {
            return Err(MheError::Configuration(format!("unknown parameter `{k}`")));
        }
    }
    let residuals: Vec<usize> = problem
        .residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| r.params.iter().any(|k| m_set.contains(k)))
        .map(|(i, _)| i)
        .collect();
    let marginalized: Vec<ParamKey> = params_m
        .iter()
        .filter(|k| problem.params[*k].active)
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut linked_set: BTreeSet<ParamKey> = BTreeSet::new();
    for &i in &residuals {
        for k in &problem.residuals[i].params {
            if !m_set.contains(k) && problem.params[k].active {
                linked_set.insert(k.clone());
            }
        }
    }
    let linked: Vec<ParamKey> = linked_set.into_iter().collect();
    let dims = |keys: &[ParamKey]| -> Vec<usize> {
        keys.iter().map(|k| problem.params[k].tangent_dim()).collect()
    };
    let marginalized_dims = dims(&marginalized);
    let linked_dims = dims(&linked);

    let mut offsets: BTreeMap<ParamKey, (usize, usize)> = BTreeMap::new();
    let mut off = 0;
    for (k, d) in marginalized
        .iter()
        .zip(&marginalized_dims)
        .chain(linked.iter().zip(&linked_dims))
    {
        offsets.insert(k.clone(), (off, *d));
        off += d;
    }
    let n = off;

    let sub = Problem {
        params: problem.params.clone(),
        residuals: residuals.iter().map(|&i| problem.residuals[i].clone()).collect(),
    };
    let layout = BlockLayout::new(offsets.iter().map(|(k, (_, d))| (k.clone(), *d)));
    let lin = linearize(&sub, &layout, loss, 1)?;
    let mut h = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for r in &lin {
        for (ia, ja) in &r.jacobians {
            let (oa, da) = offsets[layout.key(*ia)];
            let mut seg = b.rows_mut(oa, da);
            seg -= ja.transpose() * &r.residual;
            for (ib, jb) in &r.jacobians {
                let (ob, db) = offsets[layout.key(*ib)];
                let mut blk = h.view_mut((oa, ob), (da, db));
                blk += ja.transpose() * jb;
            }
        }
    }
    Ok(Subproblem {
        marginalized,
        marginalized_dims,
        linked,
        linked_dims,
        residuals,
        h,
        b,
    })
}

fn blocks_of_directions(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    keys: &[ParamKey],
    dims: &[usize],
    threshold: f64,
) -> Vec<String> {
    let mut names = BTreeSet::new();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > threshold {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        let mut off = 0;
        let mut best = (0, 0.0);
        for (bi, d) in dims.iter().enumerate() {
            let w = v.rows(off, *d).norm_squared();
            if w > best.1 {
                best = (bi, w);
            }
            off += d;
        }
        names.insert(keys[best.0].to_string());
    }
    names.into_iter().collect()
}

/// Eliminates the marginalized block from the subproblem.
pub fn schur_marginalize(sub: &Subproblem) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = sub.dim_m();
    let l = sub.dim_l();
    let h_ll = sub.h.view((m, m), (l, l)).into_owned();
    let b_l = sub.b.rows(m, l).into_owned();
    if m == 0 {
        return Ok((h_ll, b_l));
    }
    let h_mm = sub.h.view((0, 0), (m, m)).into_owned();
    let h_lm = sub.h.view((m, 0), (l, m)).into_owned();
    let b_m = sub.b.rows(0, m).into_owned();
    let eig = SymmetricEigen::new(h_mm.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let threshold = RANK_TOLERANCE * max;
    let chol = if max > 0.0 && eig.eigenvalues.iter().all(|&e| e > threshold) {
        Cholesky::new(h_mm)
    } else {
        None
    };
    let chol = chol.ok_or_else(|| MheError::RankDeficient {
        blocks: blocks_of_directions(&eig, &sub.marginalized, &sub.marginalized_dims, threshold),
    })?;
    let x = chol.solve(&h_lm.transpose());
    let y = chol.solve(&b_m);
    let h_star = &h_ll - &h_lm * x;
    let h_star = (&h_star + h_star.transpose()) * 0.5;
    let b_star = b_l - &h_lm * y;
    Ok((h_star, b_star))
}

/// Linearized summary of marginalized residuals over the linked parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConstraint {
    pub linked: Vec<ParamKey>,
    pub linearization_point: Vec<ParameterBlock>,
    pub j_p: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl PriorConstraint {
    pub fn empty() -> Self {
        Self {
            linked: Vec::new(),
            linearization_point: Vec::new(),
            j_p: DMatrix::zeros(0, 0),
            offset: DVector::zeros(0),
        }
    }

    /// True when the prior carries no information.
    pub fn is_empty(&self) -> bool {
        self.j_p.nrows() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        self.linearization_point.iter().map(|b| b.tangent_dim()).collect()
    }

    /// `J_p^T J_p`.
    pub fn information(&self) -> DMatrix<f64> {
        self.j_p.transpose() * &self.j_p
    }

    /// Gradient `-J_p^T o` contributed at the linearization point.
    pub fn gradient(&self) -> DVector<f64> {
        -(self.j_p.transpose() * &self.offset)
    }

    pub fn position(&self, key: &ParamKey) -> Option<usize> {
        self.linked.iter().position(|k| k == key)
    }
}

/// Factors `H* = J_p^T J_p` by eigendecomposition, dropping directions whose
/// eigenvalue is below `RANK_TOLERANCE * max`.
pub fn build_prior(
    h_star: &DMatrix<f64>,
    b_star: &DVector<f64>,
    linked: Vec<ParamKey>,
    values: Vec<ParameterBlock>,
) -> Result<PriorConstraint> {
    build_prior_scaled(h_star, b_star, linked, values, 0.0)
}

/// [`build_prior`] where `reference` is the magnitude of the matrix `H*` was
/// reduced from. Eigenvalues below `ROUNDOFF_TOLERANCE * reference` are
/// elimination roundoff and are dropped, and the indefiniteness check is
/// relative to `max(largest eigenvalue, reference)`.
pub fn build_prior_scaled(
    h_star: &DMatrix<f64>,
    b_star: &DVector<f64>,
    linked: Vec<ParamKey>,
    values: Vec<ParameterBlock>,
    reference: f64,
) -> Result<PriorConstraint> {
    let n: usize = values.iter().map(|b| b.tangent_dim()).sum();
    if h_star.nrows() != n || h_star.ncols() != n || b_star.len() != n || linked.len() != values.len() {
        return Err(MheError::DimensionMismatch {
            expected: n,
            actual: h_star.nrows(),
        });
    }
    let sym = (h_star + h_star.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = max.max(reference);
    let indefinite = if scale > 0.0 {
        min < -INDEFINITE_TOLERANCE * scale
    } else {
        n > 0 && min < -1e-12
    };
    if indefinite {
        return Err(MheError::Indefinite {
            min_eigenvalue: min,
            max_eigenvalue: max,
        });
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| max > 0.0 && eig.eigenvalues[i] > zero_threshold(max, reference))
        .collect();
    let mut j_p = DMatrix::zeros(keep.len(), n);
    let mut offset = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let lambda = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        let s = lambda.sqrt();
        j_p.set_row(row, &(v.transpose() * s));
        offset[row] = -v.dot(b_star) / s;
    }
    Ok(PriorConstraint {
        linked,
        linearization_point: values,
        j_p,
        offset,
    })
}

/// `e_p = J_p (x ⊟ x̌) + o` and its Jacobians with respect to each linked block.
pub fn evaluate_prior(
    prior: &PriorConstraint,
    values: &[&ParameterBlock],
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
    if values.len() != prior.linearization_point.len() {
        return Err(MheError::DimensionMismatch {
            expected: prior.linearization_point.len(),
            actual: values.len(),
        });
    }
    let n = prior.j_p.ncols();
    let mut dx = DVector::zeros(n);
    let mut jacs = Vec::with_capacity(values.len());
    let mut off = 0;
    for (x, anchor) in values.iter().zip(&prior.linearization_point) {
        let d = anchor.tangent_dim();
        dx.rows_mut(off, d).copy_from(&x.minus(anchor)?);
        let (jy, _) = anchor.kind.boxminus_jacobians(x.value(), anchor.value())?;
        jacs.push(prior.j_p.columns(off, d) * jy);
        off += d;
    }
    Ok((&prior.j_p * dx + &prior.offset, jacs))
}

impl CostTerm for PriorConstraint {
    fn dim(&self) -> usize {
        self.j_p.nrows()
    }

    fn evaluate(&self, params: &[&ParameterBlock]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        evaluate_prior(self, params)
    }
}

/// Largest diagonal entry of a PSD matrix, a bound on its eigenvalues' scale.
pub fn diagonal_scale(h: &DMatrix<f64>) -> f64 {
    h.diagonal().iter().cloned().fold(0.0, f64::max)
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
pub fn psd_pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    psd_pseudo_inverse_scaled(m, 0.0)
}

/// [`psd_pseudo_inverse`] treating eigenvalues below
/// `RANK_TOLERANCE * largest eigenvalue` or `ROUNDOFF_TOLERANCE * reference`
/// as zero.
pub fn psd_pseudo_inverse_scaled(m: &DMatrix<f64>, reference: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let lambda = eig.eigenvalues[i];
        if max > 0.0 && lambda > zero_threshold(max, reference) {
            let v = eig.eigenvectors.column(i);
            out += v * v.transpose() / lambda;
        }
    }
    out
}

/// Removes `params_r` from a prior by Schur complement on its information,
/// keeping the original linearization point of the survivors.
pub fn factor_out(prior: &PriorConstraint, params_r: &[ParamKey]) -> Result<PriorConstraint> {
    for k in params_r {
        if prior.position(k).is_none() {
            return Err(MheError::Configuration(format!(
                "`{k}` is not linked by the prior"
            )));
        }
    }
    let dims = prior.dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for d in &dims {
        offsets.push(off);
        off += d;
    }
    let removed: BTreeSet<&ParamKey> = params_r.iter().collect();
    let (mut r_idx, mut s_idx) = (Vec::new(), Vec::new());
    let mut survivors = Vec::new();
    let mut survivor_points = Vec::new();
    for (i, k) in prior.linked.iter().enumerate() {
        let range: Vec<usize> = (offsets[i]..offsets[i] + dims[i]).collect();
        if removed.contains(k) {
            r_idx.extend(range);
        } else {
            s_idx.extend(range);
            survivors.push(k.clone());
            survivor_points.push(prior.linearization_point[i].clone());
        }
    }
    if survivors.is_empty() {
        return Ok(PriorConstraint::empty());
    }
    let h = prior.information();
    let b = prior.gradient();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])])
    };
    let h_rr = pick(&r_idx, &r_idx);
    let h_sr = pick(&s_idx, &r_idx);
    let h_ss = pick(&s_idx, &s_idx);
    let b_r = DVector::from_fn(r_idx.len(), |i, _| b[r_idx[i]]);
    let b_s = DVector::from_fn(s_idx.len(), |i, _| b[s_idx[i]]);
    let pinv = psd_pseudo_inverse_scaled(&h_rr, diagonal_scale(&h));
    let h_star = &h_ss - &h_sr * &pinv * h_sr.transpose();
    let b_star = b_s - &h_sr * &pinv * b_r;
    build_prior_scaled(&h_star, &b_star, survivors, survivor_points, diagonal_scale(&h))
}

/// Builds the subproblem for `params_m`, eliminates it, and returns the prior
/// over the linked parameters together with the consumed residual indices.
/// Returns `None` for the prior when no residual touches `params_m`.
pub fn marginalize(
    problem: &Problem,
    params_m: &[ParamKey],
    loss: Loss,
) -> Result<(Option<PriorConstraint>, Vec<usize>)> {
    let sub = build_subproblem(problem, params_m, loss)?;
    if sub.is_empty() {
        return Ok((None, Vec::new()));
    }
    let (h_star, b_star) = schur_marginalize(&sub)?;
    let values = sub
        .linked
        .iter()
        .map(|k| problem.params[k].clone())
        .collect();
    let prior = build_prior_scaled(&h_star, &b_star, sub.linked.clone(), values, diagonal_scale(&sub.h))?;
    Ok((Some(prior), sub.residuals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: usize) -> Vec<ParamKey> {
        (0..n).map(|i| ParamKey::state(i as u64, 0)).collect()
    }

    fn scalars(n: usize) -> Vec<ParameterBlock> {
        (0..n).map(|_| ParameterBlock::euclidean(&[0.0])).collect()
    }

    fn scalar_subproblem(h: DMatrix<f64>, b: DVector<f64>, m: usize) -> Subproblem {
        let n = h.nrows();
        let all = keys(n);
        Subproblem {
            marginalized: all[..m].to_vec(),
            marginalized_dims: vec![1; m],
            linked: all[m..].to_vec(),
            linked_dims: vec![1; n - m],
            residuals: vec![0],
            h,
            b,
        }
    }

    #[test]
    fn two_by_two_schur() {
        let sub = scalar_subproblem(
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            1,
        );
        let (h, b) = schur_marginalize(&sub).unwrap();
        assert!((h[(0, 0)] - 1.5).abs() < 1e-15);
        assert!((b[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn decoupled_schur_is_identity() {
        let sub = scalar_subproblem(
            DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 5.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            1,
        );
        let (h, b) = schur_marginalize(&sub).unwrap();
        assert_eq!(h[(0, 0)], 5.0);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn singular_marginalized_block_is_named() {
        let sub = scalar_subproblem(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0]),
            1,
        );
        match schur_marginalize(&sub) {
            Err(MheError::RankDeficient { blocks }) => assert_eq!(blocks, vec!["x0.0".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_prior() {
        let p = build_prior(&DMatrix::identity(2, 2), &DVector::zeros(2), keys(2), scalars(2)).unwrap();
        assert!((p.information() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
        assert!(p.offset.amax() < 1e-15);
    }

    #[test]
    fn scalar_prior() {
        let p = build_prior(
            &DMatrix::from_element(1, 1, 4.0),
            &DVector::from_element(1, 2.0),
            keys(1),
            scalars(1),
        )
        .unwrap();
        assert!((p.j_p[(0, 0)].abs() - 2.0).abs() < 1e-15);
        // e_p = J_p * 0 + o with o = -b*/J_p
        assert!((p.j_p[(0, 0)] * p.offset[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_prior() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let p = build_prior(&h, &b, keys(2), scalars(2)).unwrap();
        assert_eq!(p.j_p.nrows(), 1);
        assert!((p.information() - &h).amax() < 1e-12);
        assert!((p.gradient() - &b).amax() < 1e-9);
    }

    #[test]
    fn indefinite_prior_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(
            build_prior(&h, &DVector::zeros(2), keys(2), scalars(2)),
            Err(MheError::Indefinite { .. })
        ));
    }

    #[test]
    fn factor_out_two_param_prior() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let p = build_prior(&h, &DVector::zeros(2), keys(2), scalars(2)).unwrap();
        let q = factor_out(&p, &keys(1)).unwrap();
        assert_eq!(q.linked, keys(2)[1..].to_vec());
        assert!((q.information()[(0, 0)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn factor_out_everything_is_empty() {
        let p = build_prior(&DMatrix::identity(2, 2), &DVector::zeros(2), keys(2), scalars(2)).unwrap();
        assert!(factor_out(&p, &keys(2)).unwrap().is_empty());
    }
}
