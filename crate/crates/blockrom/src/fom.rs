//! Synthetic coupled two-physics full-order model and snapshot generation.
//!
//! The model follows the block-structured polynomial form: a linear modal
//! structural subsystem (undamped oscillators in first-order form) coupled
//! linearly to a quadratic fluid-like subsystem, the second-order
//! finite-difference discretization of 1-D viscous Burgers flow on a unit
//! interval with homogeneous boundary values. Structural displacements force
//! the first fluid grid points; a uniform average of the fluid state (also
//! the lift-like quantity of interest) forces the modal velocity equations.
//! Also provides sixth-order finite-difference time-derivative estimation
//! for snapshot matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::kron;
use crate::ode;
use crate::snapshots::{SnapshotSet, VariableLayout};

/// Default modal frequencies in Hz.
pub const DEFAULT_MODE_FREQUENCIES_HZ: [f64; 4] = [9.6, 38.2, 48.3, 91.5];

/// Modal description of the structural subsystem: `n_s = 2m` first-order
/// states `[eta, eta_dot]` with block system matrix `[[0, I], [-Omega, -Z]]`.
#[derive(Debug, Clone)]
pub struct ModalStructure {
    /// Angular frequencies in rad/s, one per mode.
    pub frequencies: Vec<f64>,
    /// Damping ratios, one per mode (zero by default).
    pub damping: Vec<f64>,
}

impl ModalStructure {
    pub fn from_frequencies_hz(freqs_hz: &[f64]) -> Self {
        Self {
            frequencies: freqs_hz.iter().map(|f| 2.0 * std::f64::consts::PI * f).collect(),
            damping: vec![0.0; freqs_hz.len()],
        }
    }

    pub fn mode_count(&self) -> usize {
        self.frequencies.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.mode_count()
    }

    fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(Error::Config("at least one structural mode is required".into()));
        }
        if self.damping.len() != self.frequencies.len() {
            return Err(Error::Config("one damping ratio per mode is required".into()));
        }
        if self.frequencies.iter().any(|w| *w <= 0.0) {
            return Err(Error::Config("modal frequencies must be positive".into()));
        }
        if self.damping.iter().any(|z| *z < 0.0) {
            return Err(Error::Config("damping ratios must be nonnegative".into()));
        }
        Ok(())
    }

    /// First-order system matrix `[[0, I], [-Omega, -Z]]` with
    /// `Omega = diag(w_i^2)` and `Z = diag(2 w_i zeta_i)`.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let m = self.mode_count();
        let mut a = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            a[(i, m + i)] = 1.0;
            a[(m + i, i)] = -self.frequencies[i] * self.frequencies[i];
            a[(m + i, m + i)] = -2.0 * self.frequencies[i] * self.damping[i];
        }
        a
    }
}

impl Default for ModalStructure {
    fn default() -> Self {
        Self::from_frequencies_hz(&DEFAULT_MODE_FREQUENCIES_HZ)
    }
}

/// Construction parameters for the synthetic model.
#[derive(Debug, Clone)]
pub struct FomConfig {
    pub modal: ModalStructure,
    /// Interior fluid grid points on (0, 1).
    pub n_f: usize,
    /// Fluid viscosity.
    pub nu: f64,
    /// Gain of the structure-to-fluid forcing.
    pub kappa_f: f64,
    /// Gain of the fluid-to-structure forcing.
    pub kappa_s: f64,
    /// Seed for the optional dense-coupling variant.
    pub seed: u64,
    /// Fill the normally-zero quadratic/bilinear coupling blocks with small
    /// seeded random entries (exercises the fully general structure).
    pub dense_coupling: bool,
}

impl Default for FomConfig {
    fn default() -> Self {
        Self {
            modal: ModalStructure::default(),
            n_f: 64,
            nu: 0.05,
            kappa_f: 0.1,
            kappa_s: 0.1,
            seed: 0,
            dense_coupling: false,
        }
    }
}

/// Full-order coupled system in block polynomial form. Quadratic blocks act
/// on compact self-products, bilinear blocks on the cross product.
#[derive(Debug, Clone)]
pub struct CoupledFom {
    pub n_s: usize,
    pub n_f: usize,
    pub c_s: DVector<f64>,
    pub c_f: DVector<f64>,
    pub a_s: DMatrix<f64>,
    pub a_f: DMatrix<f64>,
    pub e_s: DMatrix<f64>,
    pub e_f: DMatrix<f64>,
    pub h_s: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
    pub l_s: DMatrix<f64>,
    pub l_f: DMatrix<f64>,
    pub g_s: DMatrix<f64>,
    pub g_f: DMatrix<f64>,
    /// Linear functional over the fluid state emulating a lift coefficient.
    pub qoi_weights: DVector<f64>,
}

/// Build the synthetic coupled model.
pub fn build_synthetic_fom(cfg: &FomConfig) -> Result<CoupledFom> {
    cfg.modal.validate()?;
    if cfg.nu <= 0.0 {
        return Err(Error::Config(format!("viscosity must be positive, got {}", cfg.nu)));
    }
    if cfg.n_f == 0 {
        return Err(Error::Config("fluid grid needs at least one point".into()));
    }
    let m = cfg.modal.mode_count();
    if m > cfg.n_f {
        return Err(Error::Config(format!(
            "{m} modes cannot force only {} fluid grid points",
            cfg.n_f
        )));
    }
    let n_s = cfg.modal.state_dim();
    let n_f = cfg.n_f;
    let h = 1.0 / (n_f as f64 + 1.0);

    // Diffusion: nu/h^2 * tridiag(1, -2, 1).
    let mut a_f = DMatrix::zeros(n_f, n_f);
    let d = cfg.nu / (h * h);
    for i in 0..n_f {
        a_f[(i, i)] = -2.0 * d;
        if i > 0 {
            a_f[(i, i - 1)] = d;
        }
        if i + 1 < n_f {
            a_f[(i, i + 1)] = d;
        }
    }

    // Advection -q dq/dx with centered first differences, in compact
    // quadratic form: row i couples the pairs (i-1, i) and (i, i+1).
    let map_f = kron::QuadIndexMap::new(n_f)?;
    let mut h_f = DMatrix::zeros(n_f, map_f.len());
    let inv_2h = 1.0 / (2.0 * h);
    for i in 0..n_f {
        if i + 1 < n_f {
            h_f[(i, map_f.position(i, i + 1))] -= inv_2h;
        }
        if i > 0 {
            h_f[(i, map_f.position(i - 1, i))] += inv_2h;
        }
    }

    // Structural displacements force the first m fluid grid points.
    let mut e_f = DMatrix::zeros(n_f, n_s);
    for i in 0..m {
        e_f[(i, i)] = cfg.kappa_f;
    }

    // The fluid average forces every modal velocity equation.
    let qoi_weights = DVector::from_element(n_f, 1.0 / n_f as f64);
    let mut e_s = DMatrix::zeros(n_s, n_f);
    for i in 0..m {
        for j in 0..n_f {
            e_s[(m + i, j)] = cfg.kappa_s * qoi_weights[j];
        }
    }

    let map_s = kron::QuadIndexMap::new(n_s)?;
    let mut fom = CoupledFom {
        n_s,
        n_f,
        c_s: DVector::zeros(n_s),
        c_f: DVector::zeros(n_f),
        a_s: cfg.modal.system_matrix(),
        a_f,
        e_s,
        e_f,
        h_s: DMatrix::zeros(n_s, map_s.len()),
        h_f,
        l_s: DMatrix::zeros(n_s, n_s * n_f),
        l_f: DMatrix::zeros(n_f, n_s * n_f),
        g_s: DMatrix::zeros(n_s, map_f.len()),
        g_f: DMatrix::zeros(n_f, map_s.len()),
        qoi_weights,
    };

    if cfg.dense_coupling {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut fill = |vals: &mut [f64], scale: f64| {
            for v in vals {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        };
        // Small magnitudes keep trajectories bounded over the windows used
        // in tests.
        fill(fom.h_s.as_mut_slice(), 0.01);
        fill(fom.l_s.as_mut_slice(), 0.01);
        fill(fom.g_s.as_mut_slice(), 0.01);
        fill(fom.l_f.as_mut_slice(), 0.01);
        fill(fom.g_f.as_mut_slice(), 0.01);
        fill(fom.c_s.as_mut_slice(), 0.01);
        fill(fom.c_f.as_mut_slice(), 0.01);
    }

    Ok(fom)
}

impl CoupledFom {
    pub fn dim(&self) -> usize {
        self.n_s + self.n_f
    }

    pub fn mode_count(&self) -> usize {
        self.n_s / 2
    }

    /// Row layout of stacked states: generalized displacements, generalized
    /// velocities, then the fluid grid values.
    pub fn layout(&self) -> VariableLayout {
        VariableLayout::new(vec![
            ("gdisp".to_string(), self.mode_count()),
            ("gvel".to_string(), self.mode_count()),
            ("fluid".to_string(), self.n_f),
        ])
        .expect("valid built-in layout")
    }

    /// Stacked initial state with uniform modal perturbations and fluid at
    /// rest.
    pub fn initial_state(&self, gdisp: f64, gvel: f64) -> DVector<f64> {
        let m = self.mode_count();
        let mut q = DVector::zeros(self.dim());
        for i in 0..m {
            q[i] = gdisp;
            q[m + i] = gvel;
        }
        q
    }

    /// Lift-like quantity of interest of a stacked state.
    pub fn qoi(&self, q: &DVector<f64>) -> f64 {
        let fluid = q.rows(self.n_s, self.n_f);
        self.qoi_weights.dot(&fluid.into_owned())
    }

    /// Right-hand side of the coupled system at a stacked state.
    pub fn rhs(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.rhs_into(q, &mut out);
        out
    }

    pub fn rhs_into(&self, q: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(q.len(), self.dim());
        let qs = q.rows(0, self.n_s).into_owned();
        let qf = q.rows(self.n_s, self.n_f).into_owned();
        let ss = kron::compact_self_kron(&qs).expect("nonempty state");
        let ff = kron::compact_self_kron(&qf).expect("nonempty state");
        let sf = kron::cross_kron(&qs, &qf).expect("nonempty state");

        let ds = &self.c_s
            + &self.a_s * &qs
            + &self.e_s * &qf
            + &self.h_s * &ss
            + &self.l_s * &sf
            + &self.g_s * &ff;
        let df = &self.c_f
            + &self.a_f * &qf
            + &self.e_f * &qs
            + &self.g_f * &ss
            + &self.l_f * &sf
            + &self.h_f * &ff;
        out.rows_mut(0, self.n_s).copy_from(&ds);
        out.rows_mut(self.n_s, self.n_f).copy_from(&df);
    }
}

/// Integrate the full-order model with fixed-step RK4. Column `t` of the
/// result holds the state at `t0 + t*dt`; column 0 is the initial state.
pub fn integrate_fom(fom: &CoupledFom, q0: &DVector<f64>, dt: f64, cols: usize) -> Result<SnapshotSet> {
    if dt <= 0.0 {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    if cols == 0 {
        return Err(Error::InvalidDimension("at least one snapshot column is required".into()));
    }
    if q0.len() != fom.dim() {
        return Err(Error::ShapeMismatch(format!(
            "initial state of length {} does not match model dimension {}",
            q0.len(),
            fom.dim()
        )));
    }
    let out = ode::rk4_sample(|q, dq| fom.rhs_into(q, dq), q0, dt, cols);
    if let Some(step) = out.blow_up {
        return Err(Error::BlowUp { step });
    }
    SnapshotSet::new(out.states, dt, 0.0, fom.layout())
}

/// Seven-point sixth-order centered stencil, divided by `60*dt`.
const FD6_STENCIL: [f64; 7] = [-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0];

/// Sixth-order centered finite-difference time derivatives of the interior
/// snapshot columns. Returns the derivative matrix and the column index
/// range of the input it corresponds to (the first and last three columns
/// are dropped so a uniform stencil applies everywhere).
pub fn fd_time_derivative(s: &SnapshotSet) -> Result<(DMatrix<f64>, Range<usize>)> {
    let k = s.len();
    if k < 7 {
        return Err(Error::InsufficientData(format!(
            "sixth-order differencing needs at least 7 columns, got {k}"
        )));
    }
    let n = s.state_dim();
    let interior = 3..k - 3;
    let mut out = DMatrix::zeros(n, interior.len());
    let scale = 1.0 / (60.0 * s.dt);
    for (oc, t) in interior.clone().enumerate() {
        for r in 0..n {
            let mut acc = 0.0;
            for (w, c) in FD6_STENCIL.iter().zip(t - 3..=t + 3) {
                acc += w * s.data[(r, c)];
            }
            out[(r, oc)] = acc * scale;
        }
    }
    Ok((out, interior))
}

/// Exact time derivatives of snapshot columns, evaluated through the model
/// right-hand side (separates differencing error from inference error).
pub fn exact_derivatives(fom: &CoupledFom, s: &SnapshotSet) -> Result<DMatrix<f64>> {
    if s.state_dim() != fom.dim() {
        return Err(Error::ShapeMismatch(format!(
            "snapshots with {} rows do not match model dimension {}",
            s.state_dim(),
            fom.dim()
        )));
    }
    let mut out = DMatrix::zeros(s.state_dim(), s.len());
    let mut dq = DVector::zeros(s.state_dim());
    for t in 0..s.len() {
        let q = DVector::from_column_slice(s.data.column(t).as_slice());
        fom.rhs_into(&q, &mut dq);
        out.column_mut(t).copy_from(&dq);
    }
    Ok(out)
}
