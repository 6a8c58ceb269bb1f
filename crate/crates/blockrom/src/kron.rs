//! Quadratic feature maps: compact self-Kronecker and cross-Kronecker
//! products of state vectors, plus the matching operator-column transforms.
//!
//! The compact self-product of a vector `v` of dimension `d` keeps one entry
//! `v[i]*v[j]` per unordered pair `i <= j`, ordered lexicographically, so a
//! quadratic operator stores `d*(d+1)/2` columns instead of `d^2`.
//! Off-diagonal entries are raw products (no factor-of-two convention); an
//! inferred operator absorbs the symmetry.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Index map between unordered pairs `(i, j)` with `i <= j` and positions in
/// the compact quadratic feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadIndexMap {
    dim: usize,
    pairs: Vec<(usize, usize)>,
}

impl QuadIndexMap {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(
                "quadratic index map needs dimension >= 1".into(),
            ));
        }
        let mut pairs = Vec::with_capacity(compact_len(dim));
        for i in 0..dim {
            for j in i..dim {
                pairs.push((i, j));
            }
        }
        Ok(Self { dim, pairs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Position of the pair `(i, j)`; arguments in either order.
    pub fn position(&self, i: usize, j: usize) -> usize {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        debug_assert!(hi < self.dim);
        lo * self.dim - lo * (lo + 1) / 2 + hi
    }
}

/// Number of compact quadratic features for dimension `d`.
pub fn compact_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Compact self-Kronecker product: entries `v[i]*v[j]` for `i <= j`.
pub fn compact_self_kron(v: &DVector<f64>) -> Result<DVector<f64>> {
    let d = v.len();
    if d == 0 {
        return Err(Error::InvalidDimension(
            "compact self-Kronecker of an empty vector".into(),
        ));
    }
    let mut out = DVector::zeros(compact_len(d));
    compact_self_kron_into(v.as_slice(), out.as_mut_slice());
    Ok(out)
}

pub(crate) fn compact_self_kron_into(v: &[f64], out: &mut [f64]) {
    let d = v.len();
    debug_assert_eq!(out.len(), compact_len(d));
    let mut p = 0;
    for i in 0..d {
        let vi = v[i];
        for &vj in &v[i..] {
            out[p] = vi * vj;
            p += 1;
        }
    }
}

/// Full cross-Kronecker product `a (x) b`: entry `i*len(b) + j` is `a[i]*b[j]`.
pub fn cross_kron(a: &DVector<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidDimension(
            "cross-Kronecker of an empty vector".into(),
        ));
    }
    let mut out = DVector::zeros(a.len() * b.len());
    cross_kron_into(a.as_slice(), b.as_slice(), out.as_mut_slice());
    Ok(out)
}

pub(crate) fn cross_kron_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), a.len() * b.len());
    let mut p = 0;
    for &ai in a {
        for &bj in b {
            out[p] = ai * bj;
            p += 1;
        }
    }
}

/// Column-wise compact self-Kronecker features of a `d x k` matrix.
pub fn self_kron_features(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, k) = q.shape();
    if d == 0 || k == 0 {
        return Err(Error::InvalidDimension(
            "feature map over an empty matrix".into(),
        ));
    }
    let mut out = DMatrix::zeros(compact_len(d), k);
    for t in 0..k {
        let col: Vec<f64> = q.column(t).iter().copied().collect();
        compact_self_kron_into(&col, out.column_mut(t).as_mut_slice());
    }
    Ok(out)
}

/// Column-wise cross-Kronecker features of two matrices with equal column
/// counts.
pub fn cross_kron_features(qa: &DMatrix<f64>, qb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if qa.nrows() == 0 || qb.nrows() == 0 || qa.ncols() == 0 {
        return Err(Error::InvalidDimension(
            "feature map over an empty matrix".into(),
        ));
    }
    if qa.ncols() != qb.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "cross features need equal column counts, got {} and {}",
            qa.ncols(),
            qb.ncols()
        )));
    }
    let mut out = DMatrix::zeros(qa.nrows() * qb.nrows(), qa.ncols());
    for t in 0..qa.ncols() {
        let a: Vec<f64> = qa.column(t).iter().copied().collect();
        let b: Vec<f64> = qb.column(t).iter().copied().collect();
        cross_kron_into(&a, &b, out.column_mut(t).as_mut_slice());
    }
    Ok(out)
}

/// Expand a compact product vector to the full `d^2` Kronecker layout.
///
/// Both symmetric positions receive the same product value, so expanding and
/// compacting again is lossless.
pub fn expand_compact(v: &DVector<f64>, d: usize) -> Result<DVector<f64>> {
    if v.len() != compact_len(d) {
        return Err(Error::ShapeMismatch(format!(
            "compact vector of length {} does not match dimension {}",
            v.len(),
            d
        )));
    }
    let map = QuadIndexMap::new(d)?;
    let mut out = DVector::zeros(d * d);
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = v[map.position(i, j)];
        }
    }
    Ok(out)
}

/// Compact a full `d^2` Kronecker product vector (assumes symmetric content).
pub fn compact_from_full(v: &DVector<f64>, d: usize) -> Result<DVector<f64>> {
    if v.len() != d * d {
        return Err(Error::ShapeMismatch(format!(
            "full Kronecker vector of length {} does not match dimension {}",
            v.len(),
            d
        )));
    }
    let map = QuadIndexMap::new(d)?;
    let mut out = DVector::zeros(map.len());
    for (p, &(i, j)) in map.pairs().iter().enumerate() {
        out[p] = v[i * d + j];
    }
    Ok(out)
}

/// Expand a quadratic operator acting on compact features to one acting on
/// the full `d^2` Kronecker product.
///
/// Off-diagonal compact columns are split evenly over the two symmetric full
/// positions so that `H_full * (q (x) q) == H_compact * compact(q)`.
pub fn expand_quad_operator(h: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    if h.ncols() != compact_len(d) {
        return Err(Error::ShapeMismatch(format!(
            "operator with {} columns does not act on compact features of dimension {}",
            h.ncols(),
            d
        )));
    }
    let map = QuadIndexMap::new(d)?;
    let mut out = DMatrix::zeros(h.nrows(), d * d);
    for i in 0..d {
        for j in 0..d {
            let p = map.position(i, j);
            let w = if i == j { 1.0 } else { 0.5 };
            for r in 0..h.nrows() {
                out[(r, i * d + j)] = w * h[(r, p)];
            }
        }
    }
    Ok(out)
}

/// Compact a quadratic operator acting on the full `d^2` Kronecker product:
/// symmetric column pairs are summed, so
/// `H_compact * compact(q) == H_full * (q (x) q)`.
pub fn compact_quad_operator(h: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    if h.ncols() != d * d {
        return Err(Error::ShapeMismatch(format!(
            "operator with {} columns does not act on a full Kronecker of dimension {}",
            h.ncols(),
            d
        )));
    }
    let map = QuadIndexMap::new(d)?;
    let mut out = DMatrix::zeros(h.nrows(), map.len());
    for (p, &(i, j)) in map.pairs().iter().enumerate() {
        for r in 0..h.nrows() {
            out[(r, p)] = if i == j {
                h[(r, i * d + j)]
            } else {
                h[(r, i * d + j)] + h[(r, j * d + i)]
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vecd(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn index_map_is_lexicographic_and_complete() {
        let map = QuadIndexMap::new(3).unwrap();
        assert_eq!(
            map.pairs(),
            &[(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
        );
        for (p, &(i, j)) in map.pairs().iter().enumerate() {
            assert_eq!(map.position(i, j), p);
            assert_eq!(map.position(j, i), p);
        }
    }

    #[test]
    fn compact_self_kron_matches_direct_products() {
        let out = compact_self_kron(&vecd(&[1.0, 2.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0, 4.0]);

        let zero = compact_self_kron(&vecd(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(zero.as_slice(), &[0.0; 6]);

        let scalar = compact_self_kron(&vecd(&[3.0])).unwrap();
        assert_eq!(scalar.as_slice(), &[9.0]);
    }

    #[test]
    fn compact_self_kron_rejects_empty() {
        let err = compact_self_kron(&DVector::zeros(0)).unwrap_err();
        assert!(matches!(err, Error::InvalidDimension(_)));
    }

    #[test]
    fn cross_kron_matches_direct_products() {
        let out = cross_kron(&vecd(&[1.0, 2.0]), &vecd(&[3.0, 4.0])).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 4.0, 6.0, 8.0]);

        let ident = cross_kron(&vecd(&[1.0]), &vecd(&[5.0, 6.0, 7.0])).unwrap();
        assert_eq!(ident.as_slice(), &[5.0, 6.0, 7.0]);

        let mix = cross_kron(&vecd(&[0.0, 1.0]), &vecd(&[1.0, 1.0])).unwrap();
        assert_eq!(mix.as_slice(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_kron_rejects_empty() {
        let err = cross_kron(&DVector::zeros(0), &vecd(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::InvalidDimension(_)));
    }

    #[test]
    fn columnwise_features() {
        let q = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let f = self_kron_features(&q).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 2.0, 4.0]);

        let eye = DMatrix::<f64>::identity(2, 2);
        let f = self_kron_features(&eye).unwrap();
        assert_eq!(f.column(0).as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(f.column(1).as_slice(), &[0.0, 0.0, 1.0]);

        let qs = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let qf = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let f = cross_kron_features(&qs, &qf).unwrap();
        assert_eq!(f.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn cross_features_reject_mismatched_columns() {
        let qa = DMatrix::zeros(2, 3);
        let qb = DMatrix::zeros(2, 4);
        let err = cross_kron_features(&qa, &qb).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn operator_expand_compact_round_trip() {
        let d = 4;
        let h = DMatrix::from_fn(3, compact_len(d), |r, c| (r * 31 + c) as f64 * 0.1 - 1.0);
        let full = expand_quad_operator(&h, d).unwrap();
        let back = compact_quad_operator(&full, d).unwrap();
        assert!((&back - &h).abs().max() < 1e-14);

        // Both routes evaluate identically on an arbitrary state.
        let q = vecd(&[0.3, -1.2, 0.7, 2.0]);
        let compact = compact_self_kron(&q).unwrap();
        let full_feat = expand_compact(&compact, d).unwrap();
        let via_compact = &h * compact;
        let via_full = full * full_feat;
        assert!((via_compact - via_full).abs().max() < 1e-12);
    }

    proptest! {
        #[test]
        fn expand_then_compact_is_lossless(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            let x = vecd(&v);
            let compact = compact_self_kron(&x).unwrap();
            let full = expand_compact(&compact, v.len()).unwrap();
            let back = compact_from_full(&full, v.len()).unwrap();
            prop_assert!((back - compact).abs().max() == 0.0);
        }

        #[test]
        fn full_kron_positions_hold_products(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            let x = vecd(&v);
            let compact = compact_self_kron(&x).unwrap();
            let full = expand_compact(&compact, v.len()).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    prop_assert!((full[i * v.len() + j] - v[i] * v[j]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn cross_kron_is_outer_product(
            a in prop::collection::vec(-5.0f64..5.0, 1..6),
            b in prop::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let va = vecd(&a);
            let vb = vecd(&b);
            let flat = cross_kron(&va, &vb).unwrap();
            let outer = &va * vb.transpose();
            for i in 0..a.len() {
                for j in 0..b.len() {
                    prop_assert!((flat[i * b.len() + j] - outer[(i, j)]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn compact_self_kron_is_two_homogeneous(
            v in prop::collection::vec(-5.0f64..5.0, 1..8),
            c in -4.0f64..4.0,
        ) {
            let x = vecd(&v);
            let scaled = compact_self_kron(&(&x * c)).unwrap();
            let base = compact_self_kron(&x).unwrap() * (c * c);
            prop_assert!((scaled - base).abs().max() <= 1e-9);
        }
    }
}
