use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::problem::ParamKey;

/// Ordered active parameter blocks with their offsets in the stacked
/// tangent vector. Order follows [`ParamKey`]: statics, then states by stamp.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockLayout {
    keys: Vec<ParamKey>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    index: BTreeMap<ParamKey, usize>,
    total: usize,
}

impl BlockLayout {
    pub fn new(blocks: impl IntoIterator<Item = (ParamKey, usize)>) -> Self {
        let mut sorted: Vec<(ParamKey, usize)> = blocks.into_iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        sorted.dedup_by(|a, b| a.0 == b.0);
        let mut layout = BlockLayout::default();
        for (key, dim) in sorted {
            layout.index.insert(key.clone(), layout.keys.len());
            layout.keys.push(key);
            layout.dims.push(dim);
            layout.offsets.push(layout.total);
            layout.total += dim;
        }
        layout
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Total tangent dimension.
    pub fn dim(&self) -> usize {
        self.total
    }

    pub fn keys(&self) -> &[ParamKey] {
        &self.keys
    }

    pub fn key(&self, i: usize) -> &ParamKey {
        &self.keys[i]
    }

    pub fn block_dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn position(&self, key: &ParamKey) -> Option<usize> {
        self.index.get(key).copied()
    }
}

/// A weighted (and possibly robustified) residual block with Jacobians for
/// its active parameters, indexed into a [`BlockLayout`].
#[derive(Debug, Clone)]
pub struct LinearizedResidual {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(usize, DMatrix<f64>)>,
}

/// Block-sparse `H = J^T J` (upper triangle stored) and dense `b = -J^T e`.
#[derive(Debug, Clone)]
pub struct SparseNormalEquations {
    pub layout: BlockLayout,
    /// Blocks `(i, j)` with `i <= j` in layout order.
    pub blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub b: DVector<f64>,
}

impl SparseNormalEquations {
    pub fn zeros(layout: BlockLayout) -> Self {
        let b = DVector::zeros(layout.dim());
        Self {
            layout,
            blocks: BTreeMap::new(),
            b,
        }
    }

    /// Accumulates residuals in the given order; the result does not depend on
    /// how the residuals were computed.
    pub fn assemble(layout: BlockLayout, residuals: &[LinearizedResidual]) -> Self {
        let mut neq = Self::zeros(layout);
        for r in residuals {
            neq.add_residual(r);
        }
        neq
    }

    pub fn add_residual(&mut self, r: &LinearizedResidual) {
        for (a, (ia, ja)) in r.jacobians.iter().enumerate() {
            let off = self.layout.offset(*ia);
            let d = self.layout.block_dim(*ia);
            let g = ja.transpose() * &r.residual;
            let mut seg = self.b.rows_mut(off, d);
            seg -= g;
            for (ib, jb) in &r.jacobians[a..] {
                let (lo, hi, prod) = if ia <= ib {
                    (*ia, *ib, ja.transpose() * jb)
                } else {
                    (*ib, *ia, jb.transpose() * ja)
                };
                self.add_block(lo, hi, &prod);
            }
        }
    }

    /// Adds `m` to block `(i, j)`; `(j, i)` is implied by symmetry.
    pub fn add_block(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        let (lo, hi, m) = if i <= j {
            (i, j, m.clone())
        } else {
            (j, i, m.transpose())
        };
        match self.blocks.get_mut(&(lo, hi)) {
            Some(existing) => {
                *existing += &m;
                if lo == hi {
                    let sym = (&*existing + existing.transpose()) * 0.5;
                    *existing = sym;
                }
            }
            None => {
                let m = if lo == hi { (&m + m.transpose()) * 0.5 } else { m };
                self.blocks.insert((lo, hi), m);
            }
        }
    }

    pub fn block(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        if i <= j {
            self.blocks.get(&(i, j)).cloned()
        } else {
            self.blocks.get(&(j, i)).map(|m| m.transpose())
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.layout.dim();
        let mut h = DMatrix::zeros(n, n);
        for (&(i, j), m) in &self.blocks {
            let (oi, oj) = (self.layout.offset(i), self.layout.offset(j));
            h.view_mut((oi, oj), m.shape()).copy_from(m);
            if i != j {
                h.view_mut((oj, oi), (m.ncols(), m.nrows()))
                    .copy_from(&m.transpose());
            }
        }
        h
    }

    /// Symmetric block-level sparsity pattern.
    pub fn block_mask(&self) -> Vec<Vec<bool>> {
        let n = self.layout.len();
        let mut mask = vec![vec![false; n]; n];
        for &(i, j) in self.blocks.keys() {
            mask[i][j] = true;
            mask[j][i] = true;
        }
        mask
    }

    pub fn gradient_norm(&self) -> f64 {
        self.b.amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_assembly() {
        let layout = BlockLayout::new([(ParamKey::Static("a".into()), 1)]);
        let r = LinearizedResidual {
            residual: DVector::from_vec(vec![1.0]),
            jacobians: vec![(0, DMatrix::from_element(1, 1, 2.0))],
        };
        let neq = SparseNormalEquations::assemble(layout, &[r]);
        assert_eq!(neq.to_dense()[(0, 0)], 4.0);
        assert_eq!(neq.b[0], -2.0);
    }

    #[test]
    fn decoupled_blocks_have_no_coupling_entry() {
        let layout = BlockLayout::new([
            (ParamKey::Static("a".into()), 2),
            (ParamKey::Static("b".into()), 1),
        ]);
        let rs = vec![
            LinearizedResidual {
                residual: DVector::from_vec(vec![1.0, 2.0]),
                jacobians: vec![(0, DMatrix::identity(2, 2))],
            },
            LinearizedResidual {
                residual: DVector::from_vec(vec![3.0]),
                jacobians: vec![(1, DMatrix::from_element(1, 1, 1.0))],
            },
        ];
        let neq = SparseNormalEquations::assemble(layout, &rs);
        assert!(neq.blocks.contains_key(&(0, 0)));
        assert!(neq.blocks.contains_key(&(1, 1)));
        assert!(!neq.blocks.contains_key(&(0, 1)));
    }

    #[test]
    fn layout_orders_statics_before_states() {
        let layout = BlockLayout::new([
            (ParamKey::state(3, 0), 3),
            (ParamKey::Static("z".into()), 1),
            (ParamKey::state(1, 1), 2),
            (ParamKey::state(1, 0), 3),
        ]);
        assert_eq!(layout.key(0), &ParamKey::Static("z".into()));
        assert_eq!(layout.key(1), &ParamKey::state(1, 0));
        assert_eq!(layout.key(3), &ParamKey::state(3, 0));
        assert_eq!(layout.offset(3), 6);
        assert_eq!(layout.dim(), 9);
    }
}
