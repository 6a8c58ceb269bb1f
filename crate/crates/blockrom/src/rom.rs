//! Reduced-order model evaluation: right-hand sides, time integration,
//! quantity-of-interest extraction, the range-normalized RMSE metric, and
//! the bounded-growth stability check.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inference::{BlockOperators, MonolithicOperators, OperatorSet};
use crate::kron;
use crate::ode;
use crate::pod::ReducedBasis;
use crate::snapshots::SnapshotSet;
use crate::textio;

/// Reduced trajectory with the structural/fluid partition labels.
#[derive(Debug, Clone)]
pub struct RomTrajectory {
    /// `r x k` reduced states; truncated at the blow-up step if flagged.
    pub states: DMatrix<f64>,
    pub dt: f64,
    pub t0: f64,
    pub r_s: usize,
    pub r_f: usize,
    /// Step index at which integration left the finite region, if any.
    pub blow_up: Option<usize>,
}

impl RomTrajectory {
    /// Wrap existing reduced states (e.g. projected training data).
    pub fn from_states(states: DMatrix<f64>, dt: f64, t0: f64, r_s: usize, r_f: usize) -> Self {
        Self { states, dt, t0, r_s, r_f, blow_up: None }
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }
}

/// Scratch buffers for repeated right-hand-side evaluations. Feature vectors
/// are computed only when an operator that consumes them is present, so
/// absent blocks cost nothing.
#[derive(Debug, Clone)]
pub struct RhsWorkspace {
    qs: DVector<f64>,
    qf: DVector<f64>,
    ss: DVector<f64>,
    sf: DVector<f64>,
    ff: DVector<f64>,
    quad: DVector<f64>,
    tmp_s: DVector<f64>,
    tmp_f: DVector<f64>,
}

impl RhsWorkspace {
    pub fn for_ops(ops: &OperatorSet) -> Self {
        match ops {
            OperatorSet::Block(b) => Self {
                qs: DVector::zeros(b.r_s),
                qf: DVector::zeros(b.r_f),
                ss: DVector::zeros(kron::compact_len(b.r_s)),
                sf: DVector::zeros(b.r_s * b.r_f),
                ff: DVector::zeros(kron::compact_len(b.r_f)),
                quad: DVector::zeros(0),
                tmp_s: DVector::zeros(b.r_s),
                tmp_f: DVector::zeros(b.r_f),
            },
            OperatorSet::Monolithic(m) => Self {
                qs: DVector::zeros(0),
                qf: DVector::zeros(0),
                ss: DVector::zeros(0),
                sf: DVector::zeros(0),
                ff: DVector::zeros(0),
                quad: DVector::zeros(kron::compact_len(m.dim())),
                tmp_s: DVector::zeros(0),
                tmp_f: DVector::zeros(0),
            },
        }
    }
}

fn block_rhs_into(b: &BlockOperators, q: &DVector<f64>, ws: &mut RhsWorkspace, out: &mut DVector<f64>) {
    let r_s = b.r_s;
    let r_f = b.r_f;
    ws.qs.as_mut_slice().copy_from_slice(&q.as_slice()[..r_s]);
    ws.qf.as_mut_slice().copy_from_slice(&q.as_slice()[r_s..r_s + r_f]);

    if b.h_s.is_some() || b.g_f.is_some() {
        kron::compact_self_kron_into(ws.qs.as_slice(), ws.ss.as_mut_slice());
    }
    if b.l_s.is_some() || b.l_f.is_some() {
        kron::cross_kron_into(ws.qs.as_slice(), ws.qf.as_slice(), ws.sf.as_mut_slice());
    }
    if b.g_s.is_some() || b.h_f.is_some() {
        kron::compact_self_kron_into(ws.qf.as_slice(), ws.ff.as_mut_slice());
    }

    match &b.c_s {
        Some(c) => ws.tmp_s.copy_from(c),
        None => ws.tmp_s.fill(0.0),
    }
    if let Some(m) = &b.a_s {
        ws.tmp_s.gemv(1.0, m, &ws.qs, 1.0);
    }
    if let Some(m) = &b.e_s {
        ws.tmp_s.gemv(1.0, m, &ws.qf, 1.0);
    }
    if let Some(m) = &b.h_s {
        ws.tmp_s.gemv(1.0, m, &ws.ss, 1.0);
    }
    if let Some(m) = &b.l_s {
        ws.tmp_s.gemv(1.0, m, &ws.sf, 1.0);
    }
    if let Some(m) = &b.g_s {
        ws.tmp_s.gemv(1.0, m, &ws.ff, 1.0);
    }

    match &b.c_f {
        Some(c) => ws.tmp_f.copy_from(c),
        None => ws.tmp_f.fill(0.0),
    }
    if let Some(m) = &b.e_f {
        ws.tmp_f.gemv(1.0, m, &ws.qs, 1.0);
    }
    if let Some(m) = &b.a_f {
        ws.tmp_f.gemv(1.0, m, &ws.qf, 1.0);
    }
    if let Some(m) = &b.g_f {
        ws.tmp_f.gemv(1.0, m, &ws.ss, 1.0);
    }
    if let Some(m) = &b.l_f {
        ws.tmp_f.gemv(1.0, m, &ws.sf, 1.0);
    }
    if let Some(m) = &b.h_f {
        ws.tmp_f.gemv(1.0, m, &ws.ff, 1.0);
    }

    out.as_mut_slice()[..r_s].copy_from_slice(ws.tmp_s.as_slice());
    out.as_mut_slice()[r_s..r_s + r_f].copy_from_slice(ws.tmp_f.as_slice());
}

fn monolithic_rhs_into(
    m: &MonolithicOperators,
    q: &DVector<f64>,
    ws: &mut RhsWorkspace,
    out: &mut DVector<f64>,
) {
    kron::compact_self_kron_into(q.as_slice(), ws.quad.as_mut_slice());
    out.copy_from(&m.c);
    out.gemv(1.0, &m.a, q, 1.0);
    out.gemv(1.0, &m.h, &ws.quad, 1.0);
}

/// Evaluate the model right-hand side into a preallocated output. The hot
/// path used by integrators and the timing harness.
pub fn rom_rhs_into(ops: &OperatorSet, q: &DVector<f64>, ws: &mut RhsWorkspace, out: &mut DVector<f64>) {
    debug_assert_eq!(q.len(), ops.dim());
    debug_assert_eq!(out.len(), ops.dim());
    match ops {
        OperatorSet::Block(b) => block_rhs_into(b, q, ws, out),
        OperatorSet::Monolithic(m) => monolithic_rhs_into(m, q, ws, out),
    }
}

/// Evaluate the model right-hand side, validating inputs.
pub fn rom_rhs(ops: &OperatorSet, q: &DVector<f64>) -> Result<DVector<f64>> {
    if q.len() != ops.dim() {
        return Err(Error::ShapeMismatch(format!(
            "state of length {} does not match model dimension {}",
            q.len(),
            ops.dim()
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite reduced state".into()));
    }
    let mut ws = RhsWorkspace::for_ops(ops);
    let mut out = DVector::zeros(ops.dim());
    rom_rhs_into(ops, q, &mut ws, &mut out);
    Ok(out)
}

/// Integrate the reduced model with fixed-step RK4, sampling `cols` states
/// (column 0 is the initial state). Blow-up is not an error: the trajectory
/// is truncated and flagged so a search can reject the candidate.
pub fn integrate_rom(
    ops: &OperatorSet,
    q0: &DVector<f64>,
    dt: f64,
    cols: usize,
    split: (usize, usize),
) -> Result<RomTrajectory> {
    if dt <= 0.0 {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    if cols == 0 {
        return Err(Error::InvalidDimension("at least one trajectory column is required".into()));
    }
    if q0.len() != ops.dim() {
        return Err(Error::ShapeMismatch(format!(
            "initial state of length {} does not match model dimension {}",
            q0.len(),
            ops.dim()
        )));
    }
    let (r_s, r_f) = split;
    if r_s + r_f != ops.dim() {
        return Err(Error::ShapeMismatch(format!(
            "partition {r_s}+{r_f} does not sum to model dimension {}",
            ops.dim()
        )));
    }
    let mut ws = RhsWorkspace::for_ops(ops);
    let out = ode::rk4_sample(|q, dq| rom_rhs_into(ops, q, &mut ws, dq), q0, dt, cols);
    Ok(RomTrajectory {
        states: out.states,
        dt,
        t0: 0.0,
        r_s,
        r_f,
        blow_up: out.blow_up,
    })
}

/// Scalar time series of a named quantity of interest.
#[derive(Debug, Clone)]
pub struct QoiSeries {
    pub name: String,
    pub values: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
}

/// Which partition of the reduced state a pullback reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatePart {
    Structural,
    Fluid,
}

/// Affine functional over one partition of the reduced state. Precomputes
/// the composition of basis reconstruction and preprocessing inversion, so
/// extraction never rebuilds full states.
#[derive(Debug, Clone)]
pub struct QoiPullback {
    pub name: String,
    part: StatePart,
    coeffs: DVector<f64>,
    constant: f64,
}

impl QoiPullback {
    /// Weighted functional of the physical fluid state. `affine` carries the
    /// per-row forward preprocessing map `y = gain*x + intercept` of the
    /// fluid rows, if the states were preprocessed.
    pub fn fluid_functional(
        name: &str,
        weights: &DVector<f64>,
        fluid_basis: &ReducedBasis,
        affine: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<Self> {
        if weights.len() != fluid_basis.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a fluid basis of dimension {}",
                weights.len(),
                fluid_basis.dim()
            )));
        }
        let (adjusted, constant) = pull_through_affine(weights, affine)?;
        Ok(Self {
            name: name.to_string(),
            part: StatePart::Fluid,
            coeffs: fluid_basis.vectors().tr_mul(&adjusted),
            constant,
        })
    }

    /// Physical value of one structural state row.
    pub fn structural_entry(
        name: &str,
        row: usize,
        structural_basis: &ReducedBasis,
        affine: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<Self> {
        if row >= structural_basis.dim() {
            return Err(Error::InvalidDimension(format!(
                "structural row {row} outside dimension {}",
                structural_basis.dim()
            )));
        }
        let mut weights = DVector::zeros(structural_basis.dim());
        weights[row] = 1.0;
        let (adjusted, constant) = pull_through_affine(&weights, affine)?;
        Ok(Self {
            name: name.to_string(),
            part: StatePart::Structural,
            coeffs: structural_basis.vectors().tr_mul(&adjusted),
            constant,
        })
    }

    /// Generalized displacement of mode `i` (zero-based).
    pub fn gdisp(
        i: usize,
        structural_basis: &ReducedBasis,
        affine: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<Self> {
        Self::structural_entry(&format!("gdisp_{}", i + 1), i, structural_basis, affine)
    }

    /// Generalized velocity of mode `i` (zero-based); rows `m..2m` hold the
    /// velocities.
    pub fn gvel(
        i: usize,
        mode_count: usize,
        structural_basis: &ReducedBasis,
        affine: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<Self> {
        Self::structural_entry(
            &format!("gvel_{}", i + 1),
            mode_count + i,
            structural_basis,
            affine,
        )
    }
}

fn pull_through_affine(
    weights: &DVector<f64>,
    affine: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<(DVector<f64>, f64)> {
    match affine {
        None => Ok((weights.clone(), 0.0)),
        Some((gain, intercept)) => {
            if gain.len() != weights.len() || intercept.len() != weights.len() {
                return Err(Error::ShapeMismatch(format!(
                    "affine map of length {} for {} weights",
                    gain.len(),
                    weights.len()
                )));
            }
            let mut adjusted = DVector::zeros(weights.len());
            let mut constant = 0.0;
            for i in 0..weights.len() {
                adjusted[i] = weights[i] / gain[i];
                constant -= weights[i] * intercept[i] / gain[i];
            }
            Ok((adjusted, constant))
        }
    }
}

/// Evaluate a pullback along a reduced trajectory.
pub fn extract_qoi(traj: &RomTrajectory, pullback: &QoiPullback) -> Result<QoiSeries> {
    let (offset, len) = match pullback.part {
        StatePart::Structural => (0, traj.r_s),
        StatePart::Fluid => (traj.r_s, traj.r_f),
    };
    if pullback.coeffs.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "pullback expects a partition of size {}, trajectory has {len}",
            pullback.coeffs.len()
        )));
    }
    let values = (0..traj.len())
        .map(|t| {
            let mut acc = pullback.constant;
            for i in 0..len {
                acc += pullback.coeffs[i] * traj.states[(offset + i, t)];
            }
            acc
        })
        .collect();
    Ok(QoiSeries { name: pullback.name.clone(), values, dt: traj.dt, t0: traj.t0 })
}

/// Weighted functional of full-order snapshot rows (truth series).
pub fn weighted_series(
    s: &SnapshotSet,
    rows: Range<usize>,
    weights: &DVector<f64>,
    name: &str,
) -> Result<QoiSeries> {
    if rows.end > s.state_dim() || weights.len() != rows.len() {
        return Err(Error::ShapeMismatch(format!(
            "rows {rows:?} with {} weights against {} state rows",
            weights.len(),
            s.state_dim()
        )));
    }
    let values = (0..s.len())
        .map(|t| {
            let mut acc = 0.0;
            for (w, r) in weights.iter().zip(rows.clone()) {
                acc += w * s.data[(r, t)];
            }
            acc
        })
        .collect();
    Ok(QoiSeries { name: name.to_string(), values, dt: s.dt, t0: s.t0 })
}

/// One full-order snapshot row as a truth series.
pub fn row_series(s: &SnapshotSet, row: usize, name: &str) -> Result<QoiSeries> {
    if row >= s.state_dim() {
        return Err(Error::InvalidDimension(format!(
            "row {row} outside {} state rows",
            s.state_dim()
        )));
    }
    let values = (0..s.len()).map(|t| s.data[(row, t)]).collect();
    Ok(QoiSeries { name: name.to_string(), values, dt: s.dt, t0: s.t0 })
}

/// Root-mean-square difference over the window, normalized by the reference
/// range over the same window.
pub fn relative_rmse(reference: &[f64], predicted: &[f64], window: Range<usize>) -> Result<f64> {
    if window.start >= window.end {
        return Err(Error::InvalidDimension(format!("empty window {window:?}")));
    }
    if reference.len() < window.end || predicted.len() < window.end {
        return Err(Error::ShapeMismatch(format!(
            "window {window:?} outside series of lengths {} and {}",
            reference.len(),
            predicted.len()
        )));
    }
    let mut sum_sq = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for t in window.clone() {
        let diff = reference[t] - predicted[t];
        sum_sq += diff * diff;
        min = min.min(reference[t]);
        max = max.max(reference[t]);
    }
    let range = max - min;
    if range == 0.0 {
        return Err(Error::Domain("reference series has zero range over the window".into()));
    }
    Ok((sum_sq / window.len() as f64).sqrt() / range)
}

/// Outcome of the bounded-growth stability check.
#[derive(Debug, Clone)]
pub struct GrowthReport {
    pub pass: bool,
    /// Coordinate with the largest deviation ratio when failing.
    pub offender: Option<usize>,
    /// Largest test deviation over `alpha` times the training deviation.
    pub worst_ratio: f64,
    /// Whether the test trajectory had been flagged as blown up.
    pub blew_up: bool,
}

/// Check that no reduced coordinate of the test trajectory deviates from its
/// training mean by more than `alpha` times its training deviation.
/// Coordinates with zero training deviation fall back to the largest
/// training deviation over all coordinates as their scale.
pub fn bounded_growth_check(
    train: &RomTrajectory,
    test: &RomTrajectory,
    alpha: f64,
) -> Result<GrowthReport> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let r = train.states.nrows();
    if test.states.nrows() != r {
        return Err(Error::ShapeMismatch(format!(
            "trajectories have {} and {} coordinates",
            r,
            test.states.nrows()
        )));
    }
    if test.blow_up.is_some() {
        return Ok(GrowthReport {
            pass: false,
            offender: None,
            worst_ratio: f64::INFINITY,
            blew_up: true,
        });
    }

    let k_train = train.states.ncols();
    let means = DVector::from_fn(r, |i, _| train.states.row(i).sum() / k_train as f64);
    let mut train_dev = DVector::zeros(r);
    for i in 0..r {
        let mut d = 0.0f64;
        for t in 0..k_train {
            d = d.max((train.states[(i, t)] - means[i]).abs());
        }
        train_dev[i] = d;
    }
    let fallback = train_dev.max();

    let mut worst_ratio = 0.0f64;
    let mut offender = None;
    let mut pass = true;
    for i in 0..r {
        let scale = if train_dev[i] > 0.0 { train_dev[i] } else { fallback };
        let mut dev = 0.0f64;
        for t in 0..test.states.ncols() {
            dev = dev.max((test.states[(i, t)] - means[i]).abs());
        }
        let ratio = if scale > 0.0 {
            dev / (alpha * scale)
        } else if dev > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            if ratio > 1.0 {
                offender = Some(i);
            }
        }
        if dev > alpha * scale {
            pass = false;
        }
    }
    Ok(GrowthReport { pass, offender, worst_ratio, blew_up: false })
}

/// CSV export of a quantity-of-interest series: `time,value` rows.
pub fn export_qoi_csv(series: &QoiSeries, path: &Path) -> Result<()> {
    let rows: Vec<String> = series
        .values
        .iter()
        .enumerate()
        .map(|(t, v)| {
            format!(
                "{},{}",
                textio::float_field(series.t0 + t as f64 * series.dt),
                textio::float_field(*v)
            )
        })
        .collect();
    textio::write_csv(path, "time,value", &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::BlockOperators;
    use proptest::prelude::*;

    fn ops_with_a(a: DMatrix<f64>) -> OperatorSet {
        let r = a.nrows();
        let mut b = BlockOperators::empty(r, 0);
        b.a_s = Some(a);
        // Use a pure-structural block set; fluid part is empty.
        OperatorSet::Block(BlockOperators { r_s: r, r_f: 0, ..b })
    }

    #[test]
    fn zero_model_evaluates_to_zero() {
        let b = BlockOperators::empty(2, 3);
        let ops = OperatorSet::Block(b);
        let q = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0, -1.0]);
        let out = rom_rhs(&ops, &q).unwrap();
        assert_eq!(out.abs().max(), 0.0);
    }

    #[test]
    fn identity_linear_block_returns_the_state() {
        let mut b = BlockOperators::empty(2, 2);
        b.a_s = Some(DMatrix::identity(2, 2));
        b.a_f = Some(DMatrix::identity(2, 2));
        b.e_s = Some(DMatrix::zeros(2, 2));
        b.e_f = Some(DMatrix::zeros(2, 2));
        let ops = OperatorSet::Block(b);
        let q = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0]);
        let out = rom_rhs(&ops, &q).unwrap();
        assert!((out - q).abs().max() < 1e-15);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let ops = OperatorSet::Block(BlockOperators::empty(1, 1));
        let q = DVector::from_column_slice(&[f64::NAN, 0.0]);
        assert!(matches!(rom_rhs(&ops, &q).unwrap_err(), Error::Numeric(_)));
    }

    #[test]
    fn rotation_preserves_radius() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let ops = ops_with_a(a);
        let q0 = DVector::from_column_slice(&[1.0, 0.0]);
        let traj = integrate_rom(&ops, &q0, 0.01, 629, (2, 0)).unwrap();
        assert!(traj.blow_up.is_none());
        let last = traj.states.column(628);
        let radius = (last[0] * last[0] + last[1] * last[1]).sqrt();
        assert!((radius - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn unstable_model_gets_flagged_or_fails_growth() {
        let ops = ops_with_a(DMatrix::from_element(1, 1, 1.0));
        let q0 = DVector::from_column_slice(&[1.0]);
        let traj = integrate_rom(&ops, &q0, 0.1, 300, (1, 0)).unwrap();
        assert!(traj.blow_up.is_some());

        // Against a tame training trajectory the candidate must fail.
        let train = RomTrajectory::from_states(
            DMatrix::from_fn(1, 50, |_, t| (t as f64 * 0.2).sin()),
            0.1,
            0.0,
            1,
            0,
        );
        let report = bounded_growth_check(&train, &traj, 10.0).unwrap();
        assert!(!report.pass);
        assert!(report.blew_up);
    }

    #[test]
    fn growth_check_examples() {
        let train = RomTrajectory::from_states(
            DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 1.0]),
            0.1,
            0.0,
            1,
            0,
        );
        // Test equals train: passes for any alpha >= 1.
        let report = bounded_growth_check(&train, &train, 1.0).unwrap();
        assert!(report.pass);

        // Training deviation 1, test deviation 10.5 fails at alpha = 10.
        let test = RomTrajectory::from_states(
            DMatrix::from_row_slice(1, 2, &[10.5, 0.0]),
            0.1,
            0.0,
            1,
            0,
        );
        let report = bounded_growth_check(&train, &test, 10.0).unwrap();
        assert!(!report.pass);
        assert_eq!(report.offender, Some(0));

        // Zero-deviation coordinate falls back to the global scale.
        let train = RomTrajectory::from_states(
            DMatrix::from_row_slice(2, 3, &[5.0, 5.0, 5.0, -1.0, 0.0, 1.0]),
            0.1,
            0.0,
            2,
            0,
        );
        let ok = RomTrajectory::from_states(
            DMatrix::from_row_slice(2, 2, &[5.5, 5.0, 0.5, -0.5]),
            0.1,
            0.0,
            2,
            0,
        );
        assert!(bounded_growth_check(&train, &ok, 10.0).unwrap().pass);
        let bad = RomTrajectory::from_states(
            DMatrix::from_row_slice(2, 2, &[16.0, 5.0, 0.0, 0.0]),
            0.1,
            0.0,
            2,
            0,
        );
        assert!(!bounded_growth_check(&train, &bad, 10.0).unwrap().pass);
    }

    #[test]
    fn relative_rmse_examples() {
        assert_eq!(relative_rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0..3).unwrap(), 0.0);
        let e = relative_rmse(&[0.0, 2.0], &[1.0, 1.0], 0..2).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
        let e = relative_rmse(&[0.0, 1.0, 2.0], &[0.0, 1.0, 3.0], 0..3).unwrap();
        assert!((e - (1.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert!(relative_rmse(&[1.0, 1.0], &[0.0, 0.0], 0..2).is_err());
    }

    #[test]
    fn qoi_extraction_basics() {
        let traj = RomTrajectory::from_states(
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            0.5,
            0.0,
            1,
            2,
        );
        let basis = ReducedBasis::identity(2);
        // Zero weights give the zero series.
        let zero = QoiPullback::fluid_functional("zero", &DVector::zeros(2), &basis, None).unwrap();
        let series = extract_qoi(&traj, &zero).unwrap();
        assert_eq!(series.values, vec![0.0, 0.0]);

        // Identity basis, no preprocessing: the functional reads the raw rows.
        let w = DVector::from_column_slice(&[0.5, 0.5]);
        let lift = QoiPullback::fluid_functional("lift", &w, &basis, None).unwrap();
        let series = extract_qoi(&traj, &lift).unwrap();
        assert_eq!(series.values, vec![4.0, 5.0]);

        let sb = ReducedBasis::identity(1);
        let disp = QoiPullback::gdisp(0, &sb, None).unwrap();
        let series = extract_qoi(&traj, &disp).unwrap();
        assert_eq!(series.values, vec![1.0, 2.0]);
        assert_eq!(series.name, "gdisp_1");
    }

    proptest! {
        #[test]
        fn relative_rmse_is_affine_invariant(
            base in prop::collection::vec(-10.0f64..10.0, 4..24),
            noise in prop::collection::vec(-1.0f64..1.0, 4..24),
            scale in 0.1f64..20.0,
            shift in -50.0f64..50.0,
        ) {
            let n = base.len().min(noise.len());
            prop_assume!(n >= 2);
            let fom: Vec<f64> = base[..n].to_vec();
            let range = fom.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - fom.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(range > 1e-6);
            let rom: Vec<f64> = (0..n).map(|i| fom[i] + noise[i]).collect();
            let e1 = relative_rmse(&fom, &rom, 0..n).unwrap();
            let fom2: Vec<f64> = fom.iter().map(|v| scale * v + shift).collect();
            let rom2: Vec<f64> = rom.iter().map(|v| scale * v + shift).collect();
            let e2 = relative_rmse(&fom2, &rom2, 0..n).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-9 * e1.max(1.0));
        }
    }
}
