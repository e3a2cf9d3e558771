//! Block-sparse Cholesky factorization of the normal equations.
//!
//! Blocks are eliminated states first (in stamp order) and statics last, so
//! fill-in stays inside the static rows and the band between neighbouring
//! states.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::normal::{BlockLayout, SparseNormalEquations};
use crate::error::{MheError, Result};

/// Scalar pivots smaller than this fraction of the original diagonal entry are
/// treated as rank loss.
const PIVOT_RATIO: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct BlockCholesky {
    layout: BlockLayout,
    /// Elimination position -> layout index.
    perm: Vec<usize>,
    /// Layout index -> elimination position.
    inv: Vec<usize>,
    diag: Vec<DMatrix<f64>>,
    /// Column `k` of `L` below the diagonal: (row position, block).
    below: Vec<Vec<(usize, DMatrix<f64>)>>,
}

fn elimination_order(layout: &BlockLayout) -> Vec<usize> {
    let (statics, states): (Vec<usize>, Vec<usize>) =
        (0..layout.len()).partition(|&i| layout.key(i).is_static());
    states.into_iter().chain(statics).collect()
}

impl BlockCholesky {
    /// Factors `H + lambda * diag(H)`.
    pub fn factor(neq: &SparseNormalEquations, lambda: f64) -> Result<Self> {
        let layout = neq.layout.clone();
        let n = layout.len();
        let perm = elimination_order(&layout);
        let mut inv = vec![0; n];
        for (p, &i) in perm.iter().enumerate() {
            inv[i] = p;
        }
        let mut cols: Vec<BTreeMap<usize, DMatrix<f64>>> = vec![BTreeMap::new(); n];
        for (&(i, j), m) in &neq.blocks {
            let (pi, pj) = (inv[i], inv[j]);
            if pi >= pj {
                cols[pj].insert(pi, m.clone());
            } else {
                cols[pi].insert(pj, m.transpose());
            }
        }
        let mut original_diag = Vec::with_capacity(n);
        for (k, col) in cols.iter_mut().enumerate() {
            let d = layout.block_dim(perm[k]);
            let a = col.entry(k).or_insert_with(|| DMatrix::zeros(d, d));
            if lambda > 0.0 {
                for r in 0..d {
                    a[(r, r)] += lambda * a[(r, r)];
                }
            }
            original_diag.push(a.diagonal());
        }

        let mut diag = Vec::with_capacity(n);
        let mut below = Vec::with_capacity(n);
        for k in 0..n {
            let mut col = std::mem::take(&mut cols[k]);
            let akk = col.remove(&k).expect("diagonal block present");
            let fail = || MheError::Factorization {
                block: layout.key(perm[k]).to_string(),
            };
            if akk.iter().any(|x| !x.is_finite()) {
                return Err(fail());
            }
            let lkk = Cholesky::new(akk).ok_or_else(fail)?.l();
            let reference: &DVector<f64> = &original_diag[k];
            for r in 0..lkk.nrows() {
                let pivot = lkk[(r, r)] * lkk[(r, r)];
                if !(pivot > PIVOT_RATIO * reference[r].abs()) || !pivot.is_finite() {
                    return Err(fail());
                }
            }
            let mut lcol: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(col.len());
            for (i, a) in col {
                let lt = lkk
                    .solve_lower_triangular(&a.transpose())
                    .ok_or_else(fail)?;
                lcol.push((i, lt.transpose()));
            }
            for (a, (i, lik)) in lcol.iter().enumerate() {
                for (j, ljk) in &lcol[..=a] {
                    // i >= j since rows are sorted
                    let update = lik * ljk.transpose();
                    match cols[*j].get_mut(i) {
                        Some(existing) => *existing -= update,
                        None => {
                            cols[*j].insert(*i, -update);
                        }
                    }
                }
            }
            diag.push(lkk);
            below.push(lcol);
        }
        Ok(Self {
            layout,
            perm,
            inv,
            diag,
            below,
        })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    /// Number of stored off-diagonal blocks in the factor.
    pub fn fill(&self) -> usize {
        self.below.iter().map(|c| c.len()).sum()
    }

    /// Solves `(H + lambda diag(H)) x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.layout.len();
        let mut y: Vec<DVector<f64>> = (0..n)
            .map(|p| {
                let i = self.perm[p];
                rhs.rows(self.layout.offset(i), self.layout.block_dim(i))
                    .into_owned()
            })
            .collect();
        for k in 0..n {
            let yk = self.diag[k]
                .solve_lower_triangular(&y[k])
                .expect("non-singular factor");
            for (i, lik) in &self.below[k] {
                y[*i] -= lik * &yk;
            }
            y[k] = yk;
        }
        for k in (0..n).rev() {
            let mut acc = y[k].clone();
            for (i, lik) in &self.below[k] {
                acc -= lik.transpose() * &y[*i];
            }
            y[k] = self.diag[k]
                .tr_solve_lower_triangular(&acc)
                .expect("non-singular factor");
        }
        let mut out = DVector::zeros(self.layout.dim());
        for (i, p) in self.inv.iter().enumerate() {
            out.rows_mut(self.layout.offset(i), self.layout.block_dim(i))
                .copy_from(&y[*p]);
        }
        out
    }

    /// Columns of the inverse at the given scalar indices.
    pub fn inverse_columns(&self, indices: &[usize]) -> DMatrix<f64> {
        let n = self.layout.dim();
        let mut out = DMatrix::zeros(n, indices.len());
        for (c, &idx) in indices.iter().enumerate() {
            let mut e = DVector::zeros(n);
            e[idx] = 1.0;
            out.set_column(c, &self.solve(&e));
        }
        out
    }
}

/// Solves `(H + lambda diag(H)) x = b` with a block-sparse Cholesky factor.
pub fn solve_damped(neq: &SparseNormalEquations, lambda: f64) -> Result<DVector<f64>> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(MheError::InvalidInput(format!("damping {lambda} must be >= 0")));
    }
    if neq.layout.is_empty() {
        return Ok(DVector::zeros(0));
    }
    Ok(BlockCholesky::factor(neq, lambda)?.solve(&neq.b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ParamKey;
    use crate::solver::normal::LinearizedResidual;

    fn scalar_layout(n: usize) -> BlockLayout {
        BlockLayout::new((0..n).map(|i| (ParamKey::state(i as u64, 0), 1)))
    }

    fn from_dense(layout: BlockLayout, h: &DMatrix<f64>, b: &DVector<f64>) -> SparseNormalEquations {
        let mut neq = SparseNormalEquations::zeros(layout);
        let n = neq.layout.len();
        for i in 0..n {
            for j in i..n {
                let (oi, oj) = (neq.layout.offset(i), neq.layout.offset(j));
                let (di, dj) = (neq.layout.block_dim(i), neq.layout.block_dim(j));
                let m = h.view((oi, oj), (di, dj)).into_owned();
                if i == j || m.iter().any(|x| *x != 0.0) {
                    neq.add_block(i, j, &m);
                }
            }
        }
        neq.b = b.clone();
        neq
    }

    #[test]
    fn identity_system() {
        let neq = from_dense(
            scalar_layout(2),
            &DMatrix::identity(2, 2),
            &DVector::from_vec(vec![1.0, 2.0]),
        );
        let x = solve_damped(&neq, 0.0).unwrap();
        assert_eq!(x, DVector::from_vec(vec![1.0, 2.0]));
    }

    #[test]
    fn marquardt_damping() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let neq = from_dense(scalar_layout(2), &h, &DVector::from_vec(vec![4.0, 1.0]));
        let x = solve_damped(&neq, 1.0).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn singular_block_is_named() {
        let layout = BlockLayout::new([
            (ParamKey::Static("bias".into()), 1),
            (ParamKey::state(0, 0), 1),
        ]);
        let mut neq = SparseNormalEquations::zeros(layout);
        neq.add_residual(&LinearizedResidual {
            residual: DVector::from_vec(vec![1.0]),
            jacobians: vec![(1, DMatrix::from_element(1, 1, 1.0))],
        });
        neq.add_block(0, 0, &DMatrix::zeros(1, 1));
        match solve_damped(&neq, 0.0) {
            Err(MheError::Factorization { block }) => assert_eq!(block, "bias"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
