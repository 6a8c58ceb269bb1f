//! Proper orthogonal decomposition: thin SVD of snapshot matrices, cumulative
//! energy, rank selection, projection/reconstruction, and the block-diagonal
//! coupled basis.
//!
//! Left singular vectors are sign-normalized so the largest-magnitude entry
//! of each basis vector is positive (ties broken by lowest row index), which
//! makes the decomposition deterministic across runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::snapshots::ByteReader;
use crate::textio;

const MAGIC: &[u8; 4] = b"OPBV";
const VERSION: u32 = 1;

/// Orthonormal column basis with the singular-value spectrum it came from.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    vectors: DMatrix<f64>,
    singular_values: DVector<f64>,
}

impl ReducedBasis {
    /// Build from explicit parts; checks orthonormality and ordering.
    pub fn new(vectors: DMatrix<f64>, singular_values: DVector<f64>) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::InvalidDimension("basis needs at least one column".into()));
        }
        let gram = vectors.tr_mul(&vectors);
        let eye = DMatrix::identity(vectors.ncols(), vectors.ncols());
        if (gram - eye).abs().max() > 1e-10 {
            return Err(Error::Numeric("basis columns are not orthonormal".into()));
        }
        for i in 1..singular_values.len() {
            if singular_values[i] > singular_values[i - 1] {
                return Err(Error::Domain("singular values are not nonincreasing".into()));
            }
        }
        if singular_values.iter().any(|s| *s < 0.0) {
            return Err(Error::Domain("singular values must be nonnegative".into()));
        }
        Ok(Self { vectors, singular_values })
    }

    /// Identity basis of dimension `n` (used when a subsystem's states are
    /// already reduced coordinates).
    pub fn identity(n: usize) -> Self {
        Self {
            vectors: DMatrix::identity(n, n),
            singular_values: DVector::from_element(n, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Full singular-value spectrum of the decomposed matrix (not truncated
    /// with the basis).
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// Basis with only the first `r` columns; keeps the full spectrum.
    pub fn truncate(&self, r: usize) -> Result<ReducedBasis> {
        if r == 0 || r > self.rank() {
            return Err(Error::InvalidDimension(format!(
                "cannot truncate rank-{} basis to {r}",
                self.rank()
            )));
        }
        Ok(ReducedBasis {
            vectors: self.vectors.columns(0, r).into_owned(),
            singular_values: self.singular_values.clone(),
        })
    }

    /// Project full states onto the reduced space: `V^T Q`.
    pub fn project(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if q.nrows() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "cannot project {} rows with a dimension-{} basis",
                q.nrows(),
                self.dim()
            )));
        }
        Ok(self.vectors.tr_mul(q))
    }

    /// Lift reduced states back to the full space: `V Q_hat`.
    pub fn reconstruct(&self, q_red: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if q_red.nrows() != self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reconstruct {} rows with a rank-{} basis",
                q_red.nrows(),
                self.rank()
            )));
        }
        Ok(&self.vectors * q_red)
    }

    pub fn project_state(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        if q.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "state of length {} does not match basis dimension {}",
                q.len(),
                self.dim()
            )));
        }
        Ok(self.vectors.tr_mul(q))
    }

    pub fn reconstruct_state(&self, q_red: &DVector<f64>) -> Result<DVector<f64>> {
        if q_red.len() != self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "reduced state of length {} does not match basis rank {}",
                q_red.len(),
                self.rank()
            )));
        }
        Ok(&self.vectors * q_red)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        w.write_all(&(self.singular_values.len() as u64).to_le_bytes())?;
        for v in self.vectors.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.singular_values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<ReducedBasis> {
        let mut r = ByteReader::open(path)?;
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.format_error(format!("unsupported basis version {version}")));
        }
        let n = r.u64()? as usize;
        let rank = r.u64()? as usize;
        let n_sigma = r.u64()? as usize;
        let mut vectors = DMatrix::zeros(n, rank);
        for v in vectors.as_mut_slice() {
            *v = r.f64()?;
        }
        let mut sigma = DVector::zeros(n_sigma);
        for i in 0..n_sigma {
            sigma[i] = r.f64()?;
        }
        r.done()?;
        ReducedBasis::new(vectors, sigma)
    }
}

/// Thin SVD of a snapshot matrix; returns the full-rank basis
/// (`r = min(n, k)`) with deterministic sign normalization.
pub fn compute_pod(data: &DMatrix<f64>) -> Result<ReducedBasis> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(Error::InvalidDimension("POD of an empty matrix".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("POD input has non-finite entries".into()));
    }
    let svd = data.clone().svd(true, true);
    let mut u = svd.u.ok_or_else(|| Error::Numeric("SVD did not produce U".into()))?;
    let sigma = DVector::from_iterator(svd.singular_values.len(), svd.singular_values.iter().copied());

    // Flip each column so its largest-magnitude entry is positive; ties take
    // the lowest row index.
    for c in 0..u.ncols() {
        let mut best_row = 0;
        let mut best_abs = f64::NEG_INFINITY;
        for r in 0..u.nrows() {
            let a = u[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best_row = r;
            }
        }
        if u[(best_row, c)] < 0.0 {
            for r in 0..u.nrows() {
                u[(r, c)] = -u[(r, c)];
            }
        }
    }
    ReducedBasis::new(u, sigma)
}

/// Cumulative energy fractions of a nonincreasing, nonnegative spectrum:
/// entry `j` is `sum_{i<=j} s_i^2 / sum_i s_i^2`.
pub fn cumulative_energy(sigma: &DVector<f64>) -> Result<DVector<f64>> {
    if sigma.is_empty() {
        return Err(Error::InvalidDimension("empty singular value vector".into()));
    }
    for i in 0..sigma.len() {
        if sigma[i] < 0.0 {
            return Err(Error::Domain("singular values must be nonnegative".into()));
        }
        if i > 0 && sigma[i] > sigma[i - 1] {
            return Err(Error::Domain("singular values are not nonincreasing".into()));
        }
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::Domain("all singular values are zero".into()));
    }
    let mut acc = 0.0;
    Ok(DVector::from_fn(sigma.len(), |i, _| {
        acc += sigma[i] * sigma[i];
        acc / total
    }))
}

/// Smallest rank whose cumulative energy reaches `threshold`.
pub fn select_rank(sigma: &DVector<f64>, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Domain(format!(
            "energy threshold must be in (0, 1], got {threshold}"
        )));
    }
    let energy = cumulative_energy(sigma)?;
    for (i, e) in energy.iter().enumerate() {
        if *e >= threshold {
            return Ok(i + 1);
        }
    }
    Ok(sigma.len())
}

/// Per-physics bases combined implicitly in block-diagonal form.
#[derive(Debug, Clone)]
pub struct CoupledBasis {
    pub structural: ReducedBasis,
    pub fluid: ReducedBasis,
}

impl CoupledBasis {
    pub fn n_s(&self) -> usize {
        self.structural.dim()
    }

    pub fn n_f(&self) -> usize {
        self.fluid.dim()
    }

    pub fn r_s(&self) -> usize {
        self.structural.rank()
    }

    pub fn r_f(&self) -> usize {
        self.fluid.rank()
    }

    /// Explicit block-diagonal basis matrix, mostly for tests.
    pub fn block_diagonal(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.n_s() + self.n_f(), self.r_s() + self.r_f());
        v.view_mut((0, 0), (self.n_s(), self.r_s()))
            .copy_from(self.structural.vectors());
        v.view_mut((self.n_s(), self.r_s()), (self.n_f(), self.r_f()))
            .copy_from(self.fluid.vectors());
        v
    }

    /// Project stacked full states by projecting each physics block.
    pub fn project(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if q.nrows() != self.n_s() + self.n_f() {
            return Err(Error::ShapeMismatch(format!(
                "stacked state has {} rows, basis expects {}",
                q.nrows(),
                self.n_s() + self.n_f()
            )));
        }
        let qs = self.structural.project(&q.rows(0, self.n_s()).into_owned())?;
        let qf = self.fluid.project(&q.rows(self.n_s(), self.n_f()).into_owned())?;
        let mut out = DMatrix::zeros(self.r_s() + self.r_f(), q.ncols());
        out.view_mut((0, 0), (self.r_s(), q.ncols())).copy_from(&qs);
        out.view_mut((self.r_s(), 0), (self.r_f(), q.ncols())).copy_from(&qf);
        Ok(out)
    }

    pub fn reconstruct(&self, q_red: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if q_red.nrows() != self.r_s() + self.r_f() {
            return Err(Error::ShapeMismatch(format!(
                "stacked reduced state has {} rows, basis expects {}",
                q_red.nrows(),
                self.r_s() + self.r_f()
            )));
        }
        let qs = self.structural.reconstruct(&q_red.rows(0, self.r_s()).into_owned())?;
        let qf = self.fluid.reconstruct(&q_red.rows(self.r_s(), self.r_f()).into_owned())?;
        let mut out = DMatrix::zeros(self.n_s() + self.n_f(), q_red.ncols());
        out.view_mut((0, 0), (self.n_s(), q_red.ncols())).copy_from(&qs);
        out.view_mut((self.n_s(), 0), (self.n_f(), q_red.ncols())).copy_from(&qf);
        Ok(out)
    }

    pub fn project_state(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.project(&DMatrix::from_column_slice(q.len(), 1, q.as_slice()))?;
        Ok(DVector::from_column_slice(m.column(0).as_slice()))
    }

    pub fn reconstruct_state(&self, q_red: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.reconstruct(&DMatrix::from_column_slice(q_red.len(), 1, q_red.as_slice()))?;
        Ok(DVector::from_column_slice(m.column(0).as_slice()))
    }
}

/// CSV export of the spectrum: `index,sigma,energy` rows.
pub fn export_singular_values_csv(basis: &ReducedBasis, path: &Path) -> Result<()> {
    let energy = cumulative_energy(basis.singular_values())?;
    let rows: Vec<String> = basis
        .singular_values()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "{},{},{}",
                i + 1,
                textio::float_field(*s),
                textio::float_field(energy[i])
            )
        })
        .collect();
    textio::write_csv(path, "index,sigma,energy", &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn pod_of_simple_matrices() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = compute_pod(&q).unwrap();
        assert!((b.singular_values()[0] - 1.0).abs() < 1e-12);
        assert!(b.singular_values()[1].abs() < 1e-12);

        let eye = DMatrix::<f64>::identity(2, 2);
        let b = compute_pod(&eye).unwrap();
        assert!((b.singular_values()[0] - 1.0).abs() < 1e-12);
        assert!((b.singular_values()[1] - 1.0).abs() < 1e-12);

        let q = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        let b = compute_pod(&q).unwrap();
        assert!((b.singular_values()[0] - 4.0).abs() < 1e-12);
        assert!((b.singular_values()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pod_reconstructs_at_full_rank() {
        let q = DMatrix::from_fn(6, 4, |r, c| ((r * 7 + c * 3) as f64).sin());
        let b = compute_pod(&q).unwrap();
        let back = b.reconstruct(&b.project(&q).unwrap()).unwrap();
        assert!(frob(&(back - &q)) / frob(&q) < 1e-10);
    }

    #[test]
    fn pod_rejects_non_finite() {
        let mut q = DMatrix::zeros(2, 2);
        q[(0, 0)] = f64::NAN;
        assert!(matches!(compute_pod(&q).unwrap_err(), Error::Numeric(_)));
    }

    #[test]
    fn cumulative_energy_examples() {
        let e = cumulative_energy(&DVector::from_column_slice(&[1.0, 0.0])).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 1.0]);

        let e = cumulative_energy(&DVector::from_column_slice(&[2.0, 2.0])).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15);

        assert!(cumulative_energy(&DVector::from_column_slice(&[3.0, 4.0])).is_err());
        assert!(cumulative_energy(&DVector::from_column_slice(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn rank_selection() {
        let sigma = DVector::from_column_slice(&[2.0, 2.0]);
        assert_eq!(select_rank(&sigma, 0.5).unwrap(), 1);
        let sigma = DVector::from_column_slice(&[1.0, 0.0]);
        assert_eq!(select_rank(&sigma, 0.9999).unwrap(), 1);
        assert!(select_rank(&sigma, 0.0).is_err());
        assert!(select_rank(&sigma, 1.5).is_err());
    }

    #[test]
    fn truncation_error_matches_discarded_sigma() {
        let q = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        let b = compute_pod(&q).unwrap().truncate(1).unwrap();
        let back = b.reconstruct(&b.project(&q).unwrap()).unwrap();
        assert!((frob(&(back - &q)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let q = DMatrix::from_fn(8, 5, |r, c| ((r as f64) - 3.0) * ((c as f64) + 0.5).cos());
        let a = compute_pod(&q).unwrap();
        let b = compute_pod(&q.clone()).unwrap();
        assert_eq!(a.vectors(), b.vectors());
        // Largest-magnitude entry of every vector is positive.
        for c in 0..a.rank() {
            let col = a.vectors().column(c);
            let mut best = 0;
            for r in 0..col.len() {
                if col[r].abs() > col[best].abs() {
                    best = r;
                }
            }
            assert!(col[best] >= 0.0);
        }
    }

    #[test]
    fn coupled_projection_matches_block_diagonal_matrix() {
        let qs = DMatrix::from_fn(5, 6, |r, c| ((r + 2 * c) as f64).sin());
        let qf = DMatrix::from_fn(7, 6, |r, c| ((2 * r + c) as f64).cos());
        let basis = CoupledBasis {
            structural: compute_pod(&qs).unwrap().truncate(3).unwrap(),
            fluid: compute_pod(&qf).unwrap().truncate(4).unwrap(),
        };
        let mut stacked = DMatrix::zeros(12, 6);
        stacked.view_mut((0, 0), (5, 6)).copy_from(&qs);
        stacked.view_mut((5, 0), (7, 6)).copy_from(&qf);

        let split = basis.project(&stacked).unwrap();
        let dense = basis.block_diagonal().tr_mul(&stacked);
        assert!((split - dense).abs().max() < 1e-14);
    }

    #[test]
    fn basis_file_round_trip() {
        let dir = std::env::temp_dir().join("blockrom_basis_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("b.opb");
        let q = DMatrix::from_fn(6, 4, |r, c| ((r * 5 + c) as f64).sin());
        let b = compute_pod(&q).unwrap().truncate(2).unwrap();
        b.write(&path).unwrap();
        let back = ReducedBasis::read(&path).unwrap();
        assert_eq!(back.vectors(), b.vectors());
        assert_eq!(back.singular_values(), b.singular_values());
    }
}
