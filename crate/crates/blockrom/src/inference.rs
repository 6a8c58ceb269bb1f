//! Operator inference: assembly and solution of the monolithic and
//! block-structured regularized least-squares problems, structure masks,
//! the intrusive (Galerkin) projection oracle, and operator entry counts.
//!
//! The block form partitions the reduced state by physics and learns each
//! physics' operator row through its own least-squares problem; blocks can
//! be marked absent (structurally zero) or known (their contribution is
//! shifted to the right-hand side), which shrinks the learning problem.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fom::CoupledFom;
use crate::kron;
use crate::pod::CoupledBasis;
use crate::snapshots::ByteReader;

const MAGIC: &[u8; 4] = b"OPOS";
const VERSION: u32 = 1;

/// Canonical labels of the twelve operator blocks, in serialization order.
pub const BLOCK_LABELS: [&str; 12] = [
    "c_s", "A_s", "E_s", "H_s", "L_s", "G_s", "c_f", "E_f", "A_f", "G_f", "L_f", "H_f",
];

/// Per-block learning directive.
#[derive(Debug, Clone)]
pub enum BlockSpec {
    /// Infer the block from data.
    Learn,
    /// Impose the block as structurally zero; it is never stored.
    Zero,
    /// Impose a known value; its contribution moves to the right-hand side.
    Known(DMatrix<f64>),
}

impl BlockSpec {
    pub fn is_learn(&self) -> bool {
        matches!(self, BlockSpec::Learn)
    }
}

/// Learning directives for all twelve blocks.
#[derive(Debug, Clone)]
pub struct StructureMask {
    pub c_s: BlockSpec,
    pub a_s: BlockSpec,
    pub e_s: BlockSpec,
    pub h_s: BlockSpec,
    pub l_s: BlockSpec,
    pub g_s: BlockSpec,
    pub c_f: BlockSpec,
    pub e_f: BlockSpec,
    pub a_f: BlockSpec,
    pub g_f: BlockSpec,
    pub l_f: BlockSpec,
    pub h_f: BlockSpec,
}

impl StructureMask {
    /// Everything learned: the fully general quadratic coupled form.
    pub fn all_learn() -> Self {
        Self {
            c_s: BlockSpec::Learn,
            a_s: BlockSpec::Learn,
            e_s: BlockSpec::Learn,
            h_s: BlockSpec::Learn,
            l_s: BlockSpec::Learn,
            g_s: BlockSpec::Learn,
            c_f: BlockSpec::Learn,
            e_f: BlockSpec::Learn,
            a_f: BlockSpec::Learn,
            g_f: BlockSpec::Learn,
            l_f: BlockSpec::Learn,
            h_f: BlockSpec::Learn,
        }
    }

    /// Aeroelastic preset: linear structural dynamics, linear two-way
    /// coupling, quadratic fluid. The structural quadratic block and all
    /// bilinear/quadratic coupling blocks are imposed as zero.
    pub fn aeroelastic() -> Self {
        Self {
            h_s: BlockSpec::Zero,
            l_s: BlockSpec::Zero,
            g_s: BlockSpec::Zero,
            l_f: BlockSpec::Zero,
            g_f: BlockSpec::Zero,
            ..Self::all_learn()
        }
    }

    pub fn spec(&self, label: &str) -> &BlockSpec {
        match label {
            "c_s" => &self.c_s,
            "A_s" => &self.a_s,
            "E_s" => &self.e_s,
            "H_s" => &self.h_s,
            "L_s" => &self.l_s,
            "G_s" => &self.g_s,
            "c_f" => &self.c_f,
            "E_f" => &self.e_f,
            "A_f" => &self.a_f,
            "G_f" => &self.g_f,
            "L_f" => &self.l_f,
            "H_f" => &self.h_f,
            other => unreachable!("unknown block label {other}"),
        }
    }

    /// Check that every known block has the dimensions implied by
    /// `(r_s, r_f)`.
    pub fn validate(&self, r_s: usize, r_f: usize) -> Result<()> {
        for label in BLOCK_LABELS {
            if let BlockSpec::Known(value) = self.spec(label) {
                let want = block_shape(label, r_s, r_f);
                if value.shape() != want {
                    return Err(Error::ShapeMismatch(format!(
                        "known block {label} has shape {:?}, expected {:?}",
                        value.shape(),
                        want
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shape of a named block for reduced dimensions `(r_s, r_f)`.
pub fn block_shape(label: &str, r_s: usize, r_f: usize) -> (usize, usize) {
    match label {
        "c_s" => (r_s, 1),
        "A_s" => (r_s, r_s),
        "E_s" => (r_s, r_f),
        "H_s" => (r_s, kron::compact_len(r_s)),
        "L_s" => (r_s, r_s * r_f),
        "G_s" => (r_s, kron::compact_len(r_f)),
        "c_f" => (r_f, 1),
        "E_f" => (r_f, r_s),
        "A_f" => (r_f, r_f),
        "G_f" => (r_f, kron::compact_len(r_s)),
        "L_f" => (r_f, r_s * r_f),
        "H_f" => (r_f, kron::compact_len(r_f)),
        other => unreachable!("unknown block label {other}"),
    }
}

/// Block-structured reduced operators; absent blocks are structurally zero
/// and never stored.
#[derive(Debug, Clone, Default)]
pub struct BlockOperators {
    pub r_s: usize,
    pub r_f: usize,
    pub c_s: Option<DVector<f64>>,
    pub a_s: Option<DMatrix<f64>>,
    pub e_s: Option<DMatrix<f64>>,
    pub h_s: Option<DMatrix<f64>>,
    pub l_s: Option<DMatrix<f64>>,
    pub g_s: Option<DMatrix<f64>>,
    pub c_f: Option<DVector<f64>>,
    pub e_f: Option<DMatrix<f64>>,
    pub a_f: Option<DMatrix<f64>>,
    pub g_f: Option<DMatrix<f64>>,
    pub l_f: Option<DMatrix<f64>>,
    pub h_f: Option<DMatrix<f64>>,
}

impl BlockOperators {
    pub fn empty(r_s: usize, r_f: usize) -> Self {
        Self { r_s, r_f, ..Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.r_s + self.r_f
    }

    /// Named copy of a block, with constants as single-column matrices.
    pub fn block(&self, label: &str) -> Option<DMatrix<f64>> {
        match label {
            "c_s" => self.c_s.as_ref().map(|c| DMatrix::from_column_slice(c.len(), 1, c.as_slice())),
            "A_s" => self.a_s.clone(),
            "E_s" => self.e_s.clone(),
            "H_s" => self.h_s.clone(),
            "L_s" => self.l_s.clone(),
            "G_s" => self.g_s.clone(),
            "c_f" => self.c_f.as_ref().map(|c| DMatrix::from_column_slice(c.len(), 1, c.as_slice())),
            "E_f" => self.e_f.clone(),
            "A_f" => self.a_f.clone(),
            "G_f" => self.g_f.clone(),
            "L_f" => self.l_f.clone(),
            "H_f" => self.h_f.clone(),
            other => unreachable!("unknown block label {other}"),
        }
    }

    fn set_block(&mut self, label: &str, value: DMatrix<f64>) {
        match label {
            "c_s" => self.c_s = Some(DVector::from_column_slice(value.column(0).as_slice())),
            "A_s" => self.a_s = Some(value),
            "E_s" => self.e_s = Some(value),
            "H_s" => self.h_s = Some(value),
            "L_s" => self.l_s = Some(value),
            "G_s" => self.g_s = Some(value),
            "c_f" => self.c_f = Some(DVector::from_column_slice(value.column(0).as_slice())),
            "E_f" => self.e_f = Some(value),
            "A_f" => self.a_f = Some(value),
            "G_f" => self.g_f = Some(value),
            "L_f" => self.l_f = Some(value),
            "H_f" => self.h_f = Some(value),
            other => unreachable!("unknown block label {other}"),
        }
    }

    /// Expand into the equivalent dense monolithic operators over the
    /// stacked reduced state. Absent blocks contribute zeros.
    pub fn to_monolithic(&self) -> MonolithicOperators {
        let r_s = self.r_s;
        let r_f = self.r_f;
        let r = r_s + r_f;
        let mut c = DVector::zeros(r);
        if let Some(cs) = &self.c_s {
            c.rows_mut(0, r_s).copy_from(cs);
        }
        if let Some(cf) = &self.c_f {
            c.rows_mut(r_s, r_f).copy_from(cf);
        }
        let mut a = DMatrix::zeros(r, r);
        if let Some(b) = &self.a_s {
            a.view_mut((0, 0), (r_s, r_s)).copy_from(b);
        }
        if let Some(b) = &self.e_s {
            a.view_mut((0, r_s), (r_s, r_f)).copy_from(b);
        }
        if let Some(b) = &self.e_f {
            a.view_mut((r_s, 0), (r_f, r_s)).copy_from(b);
        }
        if let Some(b) = &self.a_f {
            a.view_mut((r_s, r_s), (r_f, r_f)).copy_from(b);
        }

        let map = kron::QuadIndexMap::new(r).expect("r >= 1");
        let map_s = kron::QuadIndexMap::new(r_s.max(1)).expect("nonzero");
        let map_f = kron::QuadIndexMap::new(r_f.max(1)).expect("nonzero");
        let mut h = DMatrix::zeros(r, map.len());
        for (p, &(i, j)) in map.pairs().iter().enumerate() {
            if j < r_s {
                let ps = map_s.position(i, j);
                if let Some(b) = &self.h_s {
                    for row in 0..r_s {
                        h[(row, p)] += b[(row, ps)];
                    }
                }
                if let Some(b) = &self.g_f {
                    for row in 0..r_f {
                        h[(r_s + row, p)] += b[(row, ps)];
                    }
                }
            } else if i < r_s {
                let cross = i * r_f + (j - r_s);
                if let Some(b) = &self.l_s {
                    for row in 0..r_s {
                        h[(row, p)] += b[(row, cross)];
                    }
                }
                if let Some(b) = &self.l_f {
                    for row in 0..r_f {
                        h[(r_s + row, p)] += b[(row, cross)];
                    }
                }
            } else {
                let pf = map_f.position(i - r_s, j - r_s);
                if let Some(b) = &self.g_s {
                    for row in 0..r_s {
                        h[(row, p)] += b[(row, pf)];
                    }
                }
                if let Some(b) = &self.h_f {
                    for row in 0..r_f {
                        h[(r_s + row, p)] += b[(row, pf)];
                    }
                }
            }
        }
        MonolithicOperators { c, a, h }
    }
}

/// Dense monolithic reduced operators over the stacked state.
#[derive(Debug, Clone)]
pub struct MonolithicOperators {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl MonolithicOperators {
    pub fn dim(&self) -> usize {
        self.c.len()
    }
}

/// Either flavor of learned operators.
#[derive(Debug, Clone)]
pub enum OperatorSet {
    Block(BlockOperators),
    Monolithic(MonolithicOperators),
}

impl OperatorSet {
    pub fn dim(&self) -> usize {
        match self {
            OperatorSet::Block(b) => b.dim(),
            OperatorSet::Monolithic(m) => m.dim(),
        }
    }
}

/// Grouped regularization weights of the block problems: one weight for the
/// structural problem, and linear/quadratic weights for the fluid problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockRegWeights {
    pub gamma_s_linear: f64,
    pub gamma_f_linear: f64,
    pub gamma_f_quadratic: f64,
}

impl BlockRegWeights {
    pub fn zero() -> Self {
        Self { gamma_s_linear: 0.0, gamma_f_linear: 0.0, gamma_f_quadratic: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("gamma_s_linear", self.gamma_s_linear),
            ("gamma_f_linear", self.gamma_f_linear),
            ("gamma_f_quadratic", self.gamma_f_quadratic),
        ] {
            if !(g >= 0.0) {
                return Err(Error::Domain(format!("{name} must be nonnegative, got {g}")));
            }
        }
        Ok(())
    }
}

/// Per-operator regularization weights of the monolithic problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonolithicRegWeights {
    pub gamma_c: f64,
    pub gamma_a: f64,
    pub gamma_h: f64,
}

impl MonolithicRegWeights {
    pub fn zero() -> Self {
        Self { gamma_c: 0.0, gamma_a: 0.0, gamma_h: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("gamma_c", self.gamma_c),
            ("gamma_a", self.gamma_a),
            ("gamma_h", self.gamma_h),
        ] {
            if !(g >= 0.0) {
                return Err(Error::Domain(format!("{name} must be nonnegative, got {g}")));
            }
        }
        Ok(())
    }
}

/// Assemble the monolithic least-squares data: row `t` of the data matrix is
/// `[1, q_t^T, compact(q_t)^T]`; the right-hand-side matrix is the reduced
/// derivative matrix.
pub fn assemble_monolithic(
    q: &DMatrix<f64>,
    q_dot: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if q.ncols() != q_dot.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{} state columns vs {} derivative columns",
            q.ncols(),
            q_dot.ncols()
        )));
    }
    let r = q.nrows();
    let k = q.ncols();
    let quad = kron::self_kron_features(q)?;
    let p = 1 + r + quad.nrows();
    let mut d = DMatrix::zeros(k, p);
    for t in 0..k {
        d[(t, 0)] = 1.0;
        for i in 0..r {
            d[(t, 1 + i)] = q[(i, t)];
        }
        for i in 0..quad.nrows() {
            d[(t, 1 + r + i)] = quad[(i, t)];
        }
    }
    Ok((d, q_dot.clone()))
}

/// Which physics row of the block system is being learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPhysics {
    Structural,
    Fluid,
}

#[derive(Debug, Clone, Copy)]
enum Feature {
    Ones,
    States(TargetPhysics),
    SelfQuad(TargetPhysics),
    Cross,
}

/// Feature/block pairing of one target row, in assembly order.
fn target_blocks(target: TargetPhysics) -> [(&'static str, Feature); 6] {
    use Feature::*;
    match target {
        TargetPhysics::Structural => [
            ("c_s", Ones),
            ("A_s", States(TargetPhysics::Structural)),
            ("E_s", States(TargetPhysics::Fluid)),
            ("H_s", SelfQuad(TargetPhysics::Structural)),
            ("L_s", Cross),
            ("G_s", SelfQuad(TargetPhysics::Fluid)),
        ],
        TargetPhysics::Fluid => [
            ("c_f", Ones),
            ("E_f", States(TargetPhysics::Structural)),
            ("A_f", States(TargetPhysics::Fluid)),
            ("G_f", SelfQuad(TargetPhysics::Structural)),
            ("L_f", Cross),
            ("H_f", SelfQuad(TargetPhysics::Fluid)),
        ],
    }
}

fn feature_rows(feature: Feature, q_s: &DMatrix<f64>, q_f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(match feature {
        Feature::Ones => DMatrix::from_element(1, q_s.ncols(), 1.0),
        Feature::States(TargetPhysics::Structural) => q_s.clone(),
        Feature::States(TargetPhysics::Fluid) => q_f.clone(),
        Feature::SelfQuad(TargetPhysics::Structural) => kron::self_kron_features(q_s)?,
        Feature::SelfQuad(TargetPhysics::Fluid) => kron::self_kron_features(q_f)?,
        Feature::Cross => kron::cross_kron_features(q_s, q_f)?,
    })
}

/// Assemble one block subproblem. The data matrix contains exactly the
/// feature groups whose blocks are learned for this target; known blocks
/// have their contribution subtracted from the right-hand side. The
/// returned labels map data-matrix column ranges to block names.
pub fn assemble_block(
    q_s: &DMatrix<f64>,
    q_f: &DMatrix<f64>,
    q_dot_target: &DMatrix<f64>,
    mask: &StructureMask,
    target: TargetPhysics,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<(String, Range<usize>)>)> {
    let k = q_s.ncols();
    if q_f.ncols() != k || q_dot_target.ncols() != k {
        return Err(Error::ShapeMismatch(format!(
            "column counts differ: {} structural, {} fluid, {} derivative",
            k,
            q_f.ncols(),
            q_dot_target.ncols()
        )));
    }
    let r_s = q_s.nrows();
    let r_f = q_f.nrows();
    mask.validate(r_s, r_f)?;
    let target_rows = match target {
        TargetPhysics::Structural => r_s,
        TargetPhysics::Fluid => r_f,
    };
    if q_dot_target.nrows() != target_rows {
        return Err(Error::ShapeMismatch(format!(
            "derivative matrix has {} rows, target physics has {}",
            q_dot_target.nrows(),
            target_rows
        )));
    }

    let mut rhs = q_dot_target.clone();
    let mut learned: Vec<(String, DMatrix<f64>)> = Vec::new();
    for (label, feature) in target_blocks(target) {
        match mask.spec(label) {
            BlockSpec::Zero => {}
            BlockSpec::Learn => {
                learned.push((label.to_string(), feature_rows(feature, q_s, q_f)?));
            }
            BlockSpec::Known(value) => {
                rhs -= value * feature_rows(feature, q_s, q_f)?;
            }
        }
    }
    let p: usize = learned.iter().map(|(_, f)| f.nrows()).sum();
    if p == 0 {
        return Err(Error::InvalidDimension(
            "mask leaves no block to learn for this target".into(),
        ));
    }
    let mut d = DMatrix::zeros(k, p);
    let mut labels = Vec::with_capacity(learned.len());
    let mut col = 0;
    for (label, f) in learned {
        let w = f.nrows();
        d.view_mut((0, col), (k, w)).copy_from(&f.transpose());
        labels.push((label, col..col + w));
        col += w;
    }
    Ok((d, rhs, labels))
}

/// Result of a regularized least-squares solve.
#[derive(Debug, Clone)]
pub struct TikhonovSolution {
    /// Operator matrix `O` (`m x p`) minimizing
    /// `|D O^T - R^T|_F^2 + sum_g gamma_g |O_g|_F^2`.
    pub operators: DMatrix<f64>,
    /// Numerical rank of the stacked system.
    pub rank: usize,
    /// Columns of the data matrix.
    pub columns: usize,
    /// The system did not determine every coefficient; the minimum-norm
    /// solution was returned.
    pub rank_deficient: bool,
}

/// Solve the Tikhonov-regularized least-squares problem through a singular
/// value decomposition of the stacked matrix `[D; Gamma^{1/2}]` (never the
/// normal equations). Each weight applies to a contiguous column group of
/// `D`.
pub fn solve_tikhonov(
    d: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    group_weights: &[(Range<usize>, f64)],
) -> Result<TikhonovSolution> {
    let k = d.nrows();
    let p = d.ncols();
    if p == 0 || k == 0 {
        return Err(Error::InvalidDimension("empty least-squares system".into()));
    }
    if rhs.ncols() != k {
        return Err(Error::ShapeMismatch(format!(
            "right-hand side has {} columns, data matrix has {k} rows",
            rhs.ncols()
        )));
    }
    let mut gamma = vec![0.0; p];
    for (range, g) in group_weights {
        if range.end > p {
            return Err(Error::ShapeMismatch(format!(
                "weight group {range:?} outside {p} columns"
            )));
        }
        if !(*g >= 0.0) {
            return Err(Error::Domain(format!("negative regularization weight {g}")));
        }
        for c in range.clone() {
            gamma[c] = *g;
        }
    }

    let m = rhs.nrows();
    let mut stacked = DMatrix::zeros(k + p, p);
    stacked.view_mut((0, 0), (k, p)).copy_from(d);
    for c in 0..p {
        stacked[(k + c, c)] = gamma[c].sqrt();
    }
    let mut target = DMatrix::zeros(k + p, m);
    target.view_mut((0, 0), (k, m)).copy_from(&rhs.transpose());

    let svd = stacked.svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = sigma_max * (k + p) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let x = svd
        .solve(&target, eps)
        .map_err(|e| Error::Numeric(format!("least-squares solve failed: {e}")))?;
    Ok(TikhonovSolution {
        operators: x.transpose(),
        rank,
        columns: p,
        rank_deficient: rank < p,
    })
}

/// Diagnostics of an inference run.
#[derive(Debug, Clone, Copy, Default)]
pub struct InferenceDiagnostics {
    pub rank_deficient: bool,
}

/// Infer monolithic reduced operators from projected states and their time
/// derivatives.
pub fn infer_monolithic(
    q: &DMatrix<f64>,
    q_dot: &DMatrix<f64>,
    weights: &MonolithicRegWeights,
) -> Result<(MonolithicOperators, InferenceDiagnostics)> {
    weights.validate()?;
    let r = q.nrows();
    if q_dot.nrows() != r {
        return Err(Error::ShapeMismatch(format!(
            "derivatives have {} rows, states have {r}",
            q_dot.nrows()
        )));
    }
    let (d, rhs) = assemble_monolithic(q, q_dot)?;
    let quad = kron::compact_len(r);
    let groups = [
        (0..1, weights.gamma_c),
        (1..1 + r, weights.gamma_a),
        (1 + r..1 + r + quad, weights.gamma_h),
    ];
    let sol = solve_tikhonov(&d, &rhs, &groups)?;
    let ops = MonolithicOperators {
        c: DVector::from_column_slice(sol.operators.column(0).as_slice()),
        a: sol.operators.columns(1, r).into_owned(),
        h: sol.operators.columns(1 + r, quad).into_owned(),
    };
    Ok((ops, InferenceDiagnostics { rank_deficient: sol.rank_deficient }))
}

fn block_gamma(label: &str, weights: &BlockRegWeights) -> f64 {
    match label {
        // The structural problem carries a single weight; the fluid problem
        // splits linear and quadratic families.
        "c_s" | "A_s" | "E_s" | "H_s" | "L_s" | "G_s" => weights.gamma_s_linear,
        "c_f" | "E_f" | "A_f" => weights.gamma_f_linear,
        "G_f" | "L_f" | "H_f" => weights.gamma_f_quadratic,
        other => unreachable!("unknown block label {other}"),
    }
}

/// Infer block-structured reduced operators: two independent solves, one per
/// physics. Zero blocks are absent from the result; known blocks are copied.
pub fn infer_block(
    q_s: &DMatrix<f64>,
    q_f: &DMatrix<f64>,
    q_dot_s: &DMatrix<f64>,
    q_dot_f: &DMatrix<f64>,
    mask: &StructureMask,
    weights: &BlockRegWeights,
) -> Result<(BlockOperators, InferenceDiagnostics)> {
    weights.validate()?;
    let r_s = q_s.nrows();
    let r_f = q_f.nrows();
    let mut ops = BlockOperators::empty(r_s, r_f);
    let mut diag = InferenceDiagnostics::default();

    for (target, q_dot) in [
        (TargetPhysics::Structural, q_dot_s),
        (TargetPhysics::Fluid, q_dot_f),
    ] {
        let (d, rhs, labels) = assemble_block(q_s, q_f, q_dot, mask, target)?;
        let groups: Vec<(Range<usize>, f64)> = labels
            .iter()
            .map(|(label, range)| (range.clone(), block_gamma(label, weights)))
            .collect();
        let sol = solve_tikhonov(&d, &rhs, &groups)?;
        diag.rank_deficient |= sol.rank_deficient;
        for (label, range) in &labels {
            let value = sol.operators.columns(range.start, range.len()).into_owned();
            ops.set_block(label, value);
        }
    }
    // Known blocks are part of the model even though they were not learned.
    for label in BLOCK_LABELS {
        if let BlockSpec::Known(value) = mask.spec(label) {
            ops.set_block(label, value.clone());
        }
    }
    Ok((ops, diag))
}

/// Galerkin projection of the full-order operators onto a coupled basis:
/// the intrusive oracle the nonintrusive inference is checked against.
pub fn intrusive_project(fom: &CoupledFom, basis: &CoupledBasis) -> Result<BlockOperators> {
    if basis.n_s() != fom.n_s || basis.n_f() != fom.n_f {
        return Err(Error::ShapeMismatch(format!(
            "basis dimensions ({}, {}) do not match model dimensions ({}, {})",
            basis.n_s(),
            basis.n_f(),
            fom.n_s,
            fom.n_f
        )));
    }
    let vs = basis.structural.vectors();
    let vf = basis.fluid.vectors();
    let r_s = basis.r_s();
    let r_f = basis.r_f();

    let kron_ss = vs.kronecker(vs);
    let kron_sf = vs.kronecker(vf);
    let kron_ff = vf.kronecker(vf);

    let project_quad = |block: &DMatrix<f64>,
                        v_left: &DMatrix<f64>,
                        expand_dim: usize,
                        kron_right: &DMatrix<f64>,
                        compact_dim: usize|
     -> Result<DMatrix<f64>> {
        let full = kron::expand_quad_operator(block, expand_dim)?;
        let projected = v_left.tr_mul(&(full * kron_right));
        kron::compact_quad_operator(&projected, compact_dim)
    };

    let mut ops = BlockOperators::empty(r_s, r_f);
    ops.c_s = Some(vs.tr_mul(&fom.c_s));
    ops.c_f = Some(vf.tr_mul(&fom.c_f));
    ops.a_s = Some(vs.tr_mul(&(&fom.a_s * vs)));
    ops.a_f = Some(vf.tr_mul(&(&fom.a_f * vf)));
    ops.e_s = Some(vs.tr_mul(&(&fom.e_s * vf)));
    ops.e_f = Some(vf.tr_mul(&(&fom.e_f * vs)));
    ops.h_s = Some(project_quad(&fom.h_s, vs, fom.n_s, &kron_ss, r_s)?);
    ops.h_f = Some(project_quad(&fom.h_f, vf, fom.n_f, &kron_ff, r_f)?);
    ops.g_s = Some(project_quad(&fom.g_s, vs, fom.n_f, &kron_ff, r_f)?);
    ops.g_f = Some(project_quad(&fom.g_f, vf, fom.n_s, &kron_ss, r_s)?);
    ops.l_s = Some(vs.tr_mul(&(&fom.l_s * &kron_sf)));
    ops.l_f = Some(vf.tr_mul(&(&fom.l_f * &kron_sf)));
    Ok(ops)
}

/// Which operator-count formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountKind {
    Monolithic,
    Block,
}

/// Number of operator entries the inference must learn.
pub fn count_parameters(kind: CountKind, r_s: usize, r_f: usize, mask: &StructureMask) -> usize {
    match kind {
        CountKind::Monolithic => {
            let r = r_s + r_f;
            r + r * r + r * kron::compact_len(r)
        }
        CountKind::Block => BLOCK_LABELS
            .iter()
            .filter(|label| mask.spec(label).is_learn())
            .map(|label| {
                let (rows, cols) = block_shape(label, r_s, r_f);
                rows * cols
            })
            .sum(),
    }
}

fn write_section<W: Write>(w: &mut W, label: &str, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(&(label.len() as u64).to_le_bytes())?;
    w.write_all(label.as_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serialize an operator set: one named section per present block.
pub fn write_operator_set(ops: &OperatorSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    match ops {
        OperatorSet::Monolithic(m) => {
            w.write_all(&[0u8])?;
            w.write_all(&(m.dim() as u64).to_le_bytes())?;
            w.write_all(&0u64.to_le_bytes())?;
            w.write_all(&3u64.to_le_bytes())?;
            write_section(&mut w, "c", &DMatrix::from_column_slice(m.c.len(), 1, m.c.as_slice()))?;
            write_section(&mut w, "A", &m.a)?;
            write_section(&mut w, "H", &m.h)?;
        }
        OperatorSet::Block(b) => {
            w.write_all(&[1u8])?;
            w.write_all(&(b.r_s as u64).to_le_bytes())?;
            w.write_all(&(b.r_f as u64).to_le_bytes())?;
            let present: Vec<(&str, DMatrix<f64>)> = BLOCK_LABELS
                .iter()
                .filter_map(|label| b.block(label).map(|m| (*label, m)))
                .collect();
            w.write_all(&(present.len() as u64).to_le_bytes())?;
            for (label, m) in present {
                write_section(&mut w, label, &m)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_operator_set(path: &Path) -> Result<OperatorSet> {
    let mut r = ByteReader::open(path)?;
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.format_error(format!("unsupported operator version {version}")));
    }
    let kind = r.u8()?;
    let r_s = r.u64()? as usize;
    let r_f = r.u64()? as usize;
    let n_sections = r.u64()? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name = r.name()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let mut m = DMatrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            *v = r.f64()?;
        }
        sections.push((name, m));
    }
    r.done()?;
    match kind {
        0 => {
            let mut c = None;
            let mut a = None;
            let mut h = None;
            for (name, m) in sections {
                match name.as_str() {
                    "c" => c = Some(DVector::from_column_slice(m.column(0).as_slice())),
                    "A" => a = Some(m),
                    "H" => h = Some(m),
                    other => {
                        return Err(Error::Format {
                            offset: 0,
                            reason: format!("unknown monolithic section '{other}'"),
                        })
                    }
                }
            }
            let (c, a, h) = match (c, a, h) {
                (Some(c), Some(a), Some(h)) => (c, a, h),
                _ => {
                    return Err(Error::Format {
                        offset: 0,
                        reason: "monolithic operator file is missing a section".into(),
                    })
                }
            };
            if c.len() != r_s || a.shape() != (r_s, r_s) || h.shape() != (r_s, kron::compact_len(r_s))
            {
                return Err(Error::Format {
                    offset: 0,
                    reason: "monolithic operator dimensions are inconsistent".into(),
                });
            }
            Ok(OperatorSet::Monolithic(MonolithicOperators { c, a, h }))
        }
        1 => {
            let mut ops = BlockOperators::empty(r_s, r_f);
            for (name, m) in sections {
                if !BLOCK_LABELS.contains(&name.as_str()) {
                    return Err(Error::Format {
                        offset: 0,
                        reason: format!("unknown block section '{name}'"),
                    });
                }
                if m.shape() != block_shape(&name, r_s, r_f) {
                    return Err(Error::Format {
                        offset: 0,
                        reason: format!("block {name} has inconsistent dimensions"),
                    });
                }
                ops.set_block(&name, m);
            }
            Ok(OperatorSet::Block(ops))
        }
        other => Err(Error::Format { offset: 0, reason: format!("unknown operator kind {other}") }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{build_synthetic_fom, FomConfig, ModalStructure};
    use crate::pod::ReducedBasis;

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn monolithic_assembly_examples() {
        let q = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let qd = DMatrix::zeros(1, 2);
        let (d, _) = assemble_monolithic(&q, &qd).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, 1.0, 3.0, 9.0]));

        let q = DMatrix::zeros(2, 3);
        let (d, _) = assemble_monolithic(&q, &DMatrix::zeros(2, 3)).unwrap();
        for t in 0..3 {
            assert_eq!(d[(t, 0)], 1.0);
            assert_eq!(d.row(t).iter().skip(1).copied().sum::<f64>(), 0.0);
        }

        let q = DMatrix::zeros(2, 1);
        let (d, _) = assemble_monolithic(&q, &DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(d.shape(), (1, 6));
    }

    #[test]
    fn block_assembly_shapes() {
        let q_s = DMatrix::from_row_slice(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let q_f = DMatrix::from_row_slice(1, 5, &[0.5, 0.4, 0.3, 0.2, 0.1]);
        let qd = DMatrix::zeros(1, 5);
        let mask = StructureMask::aeroelastic();
        let (d_s, _, labels_s) =
            assemble_block(&q_s, &q_f, &qd, &mask, TargetPhysics::Structural).unwrap();
        assert_eq!(d_s.ncols(), 3);
        assert_eq!(
            labels_s.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>(),
            vec!["c_s", "A_s", "E_s"]
        );
        let (d_f, _, labels_f) =
            assemble_block(&q_s, &q_f, &qd, &mask, TargetPhysics::Fluid).unwrap();
        assert_eq!(d_f.ncols(), 4);
        assert_eq!(
            labels_f.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>(),
            vec!["c_f", "E_f", "A_f", "H_f"]
        );

        // Fully general mask: both targets share the same data matrix.
        let mask = StructureMask::all_learn();
        let (d_s, _, _) = assemble_block(&q_s, &q_f, &qd, &mask, TargetPhysics::Structural).unwrap();
        let (d_f, _, _) = assemble_block(&q_s, &q_f, &qd, &mask, TargetPhysics::Fluid).unwrap();
        assert_eq!(d_s, d_f);
        assert_eq!(d_s.ncols(), 6);
    }

    #[test]
    fn known_blocks_shift_to_rhs() {
        // One structural, one fluid state; fluid dynamics q_f' = 2 q_s - q_f.
        let k = 6;
        let q_s = DMatrix::from_fn(1, k, |_, t| (t as f64 * 0.7).sin());
        let q_f = DMatrix::from_fn(1, k, |_, t| (t as f64 * 0.3).cos());
        let mut q_dot_f = DMatrix::zeros(1, k);
        for t in 0..k {
            q_dot_f[(0, t)] = 2.0 * q_s[(0, t)] - q_f[(0, t)];
        }
        let mut mask = StructureMask::aeroelastic();
        mask.c_f = BlockSpec::Zero;
        mask.h_f = BlockSpec::Zero;
        mask.e_f = BlockSpec::Known(DMatrix::from_element(1, 1, 2.0));
        let (d, rhs, labels) =
            assemble_block(&q_s, &q_f, &q_dot_f, &mask, TargetPhysics::Fluid).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].0, "A_f");
        let sol = solve_tikhonov(&d, &rhs, &[(0..1, 0.0)]).unwrap();
        assert!((sol.operators[(0, 0)] - -1.0).abs() < 1e-10);
    }

    #[test]
    fn known_blocks_are_copied_into_the_result() {
        let k = 8;
        let q_s = DMatrix::from_fn(1, k, |_, t| (t as f64 * 0.7).sin());
        let q_f = DMatrix::from_fn(1, k, |_, t| (t as f64 * 0.3).cos());
        let q_dot_s = DMatrix::zeros(1, k);
        let mut q_dot_f = DMatrix::zeros(1, k);
        for t in 0..k {
            q_dot_f[(0, t)] = 2.0 * q_s[(0, t)] - q_f[(0, t)];
        }
        let mut mask = StructureMask::aeroelastic();
        mask.e_f = BlockSpec::Known(DMatrix::from_element(1, 1, 2.0));
        let (ops, _) =
            infer_block(&q_s, &q_f, &q_dot_s, &q_dot_f, &mask, &BlockRegWeights::zero()).unwrap();
        assert_eq!(ops.e_f.unwrap()[(0, 0)], 2.0);
        assert!(ops.h_s.is_none());
        assert!(ops.l_f.is_none());
    }

    #[test]
    fn negative_weight_is_rejected() {
        let d = DMatrix::from_element(2, 1, 1.0);
        let rhs = DMatrix::from_element(1, 2, 1.0);
        assert!(matches!(
            solve_tikhonov(&d, &rhs, &[(0..1, -0.5)]).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn known_block_with_wrong_shape_is_rejected() {
        let q_s = DMatrix::zeros(2, 5);
        let q_f = DMatrix::zeros(3, 5);
        let qd = DMatrix::zeros(2, 5);
        let mut mask = StructureMask::aeroelastic();
        mask.e_s = BlockSpec::Known(DMatrix::zeros(2, 2)); // should be 2x3
        assert!(matches!(
            assemble_block(&q_s, &q_f, &qd, &mask, TargetPhysics::Structural).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn tikhonov_scalar_examples() {
        let d = DMatrix::from_element(1, 1, 1.0);
        let rhs = DMatrix::from_element(1, 1, 2.0);
        let sol = solve_tikhonov(&d, &rhs, &[(0..1, 0.0)]).unwrap();
        assert!((sol.operators[(0, 0)] - 2.0).abs() < 1e-14);
        assert!(!sol.rank_deficient);

        let sol = solve_tikhonov(&d, &rhs, &[(0..1, 1.0)]).unwrap();
        assert!((sol.operators[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tikhonov_recovers_linear_decay() {
        // States sampled from q' = -q with exact derivatives.
        let k = 20;
        let q = DMatrix::from_fn(1, k, |_, t| (-0.3 * t as f64).exp());
        let q_dot = -q.clone();
        let (ops, diag) = infer_monolithic(&q, &q_dot, &MonolithicRegWeights::zero()).unwrap();
        assert!(!diag.rank_deficient);
        assert!(ops.c.abs().max() < 1e-10);
        assert!((ops.a[(0, 0)] - -1.0).abs() < 1e-10);
        assert!(ops.h.abs().max() < 1e-10);
    }

    #[test]
    fn underdetermined_system_raises_rank_flag() {
        // One sample, six unknowns.
        let q = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let q_dot = DMatrix::from_column_slice(2, 1, &[0.5, -0.5]);
        let (_, diag) = infer_monolithic(&q, &q_dot, &MonolithicRegWeights::zero()).unwrap();
        assert!(diag.rank_deficient);
    }

    #[test]
    fn intrusive_projection_with_identity_basis_returns_the_model() {
        let cfg = FomConfig {
            modal: ModalStructure::from_frequencies_hz(&[2.0, 5.0]),
            n_f: 6,
            dense_coupling: true,
            seed: 3,
            ..Default::default()
        };
        let fom = build_synthetic_fom(&cfg).unwrap();
        let basis = CoupledBasis {
            structural: ReducedBasis::identity(fom.n_s),
            fluid: ReducedBasis::identity(fom.n_f),
        };
        let ops = intrusive_project(&fom, &basis).unwrap();
        for (got, want) in [
            (ops.a_s.as_ref().unwrap(), &fom.a_s),
            (ops.a_f.as_ref().unwrap(), &fom.a_f),
            (ops.e_s.as_ref().unwrap(), &fom.e_s),
            (ops.e_f.as_ref().unwrap(), &fom.e_f),
            (ops.h_s.as_ref().unwrap(), &fom.h_s),
            (ops.h_f.as_ref().unwrap(), &fom.h_f),
            (ops.l_s.as_ref().unwrap(), &fom.l_s),
            (ops.l_f.as_ref().unwrap(), &fom.l_f),
            (ops.g_s.as_ref().unwrap(), &fom.g_s),
            (ops.g_f.as_ref().unwrap(), &fom.g_f),
        ] {
            assert!(frob(&(got - want)) < 1e-12);
        }
        assert!((ops.c_s.unwrap() - &fom.c_s).abs().max() < 1e-12);
        assert!((ops.c_f.unwrap() - &fom.c_f).abs().max() < 1e-12);
    }

    #[test]
    fn zero_constant_projects_to_zero() {
        let fom = build_synthetic_fom(&FomConfig::default()).unwrap();
        let basis = CoupledBasis {
            structural: ReducedBasis::identity(fom.n_s),
            fluid: ReducedBasis::identity(fom.n_f),
        };
        let ops = intrusive_project(&fom, &basis).unwrap();
        assert_eq!(ops.c_s.unwrap().abs().max(), 0.0);
        assert_eq!(ops.c_f.unwrap().abs().max(), 0.0);
    }

    #[test]
    fn parameter_counts_match_closed_forms() {
        let mask = StructureMask::aeroelastic();
        assert_eq!(count_parameters(CountKind::Monolithic, 8, 8, &mask), 2448);
        assert_eq!(count_parameters(CountKind::Block, 8, 8, &mask), 560);
        assert_eq!(count_parameters(CountKind::Monolithic, 8, 12, &mask), 4620);
        assert_eq!(count_parameters(CountKind::Block, 8, 12, &mask), 1356);
    }

    #[test]
    fn full_mask_count_matches_monolithic_count() {
        let mask = StructureMask::all_learn();
        for r_s in 1..=8 {
            for r_f in 1..=8 {
                assert_eq!(
                    count_parameters(CountKind::Block, r_s, r_f, &mask),
                    count_parameters(CountKind::Monolithic, r_s, r_f, &mask),
                    "r_s={r_s}, r_f={r_f}"
                );
            }
        }
    }

    #[test]
    fn larger_gamma_weakly_shrinks_the_penalized_group() {
        let k = 30;
        let q = DMatrix::from_fn(2, k, |r, t| ((t as f64) * 0.31 + r as f64).sin());
        let q_dot = DMatrix::from_fn(2, k, |r, t| ((t as f64) * 0.17 - r as f64).cos());
        let mut last = f64::INFINITY;
        for gamma in [0.0, 1e-4, 1e-2, 1.0, 1e2, 1e4] {
            let w = MonolithicRegWeights { gamma_c: 1e-6, gamma_a: gamma, gamma_h: 1e-6 };
            let (ops, _) = infer_monolithic(&q, &q_dot, &w).unwrap();
            let norm = frob(&ops.a);
            assert!(norm <= last + 1e-12, "gamma={gamma}: {norm} > {last}");
            last = norm;
        }
    }

    #[test]
    fn perturbing_the_solution_never_improves_the_objective() {
        use rand::Rng;
        use rand::SeedableRng;
        let k = 25;
        let q = DMatrix::from_fn(2, k, |r, t| ((t as f64) * 0.31 + r as f64).sin());
        let q_dot = DMatrix::from_fn(2, k, |r, t| ((t as f64) * 0.17 - r as f64).cos());
        let (d, rhs) = assemble_monolithic(&q, &q_dot).unwrap();
        let groups = [(0..1, 0.5), (1..3, 0.1), (3..6, 2.0)];
        let sol = solve_tikhonov(&d, &rhs, &groups).unwrap();

        let objective = |o: &DMatrix<f64>| -> f64 {
            let residual = &d * o.transpose() - rhs.transpose();
            let mut j = residual.iter().map(|v| v * v).sum::<f64>();
            for (range, g) in &groups {
                for c in range.clone() {
                    j += g * o.column(c).iter().map(|v| v * v).sum::<f64>();
                }
            }
            j
        };
        let base = objective(&sol.operators);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut delta =
                DMatrix::from_fn(sol.operators.nrows(), sol.operators.ncols(), |_, _| {
                    rng.gen_range(-1.0..1.0)
                });
            let norm = frob(&delta);
            delta *= 1e-3 / norm;
            let perturbed = objective(&(&sol.operators + delta));
            assert!(perturbed >= base - 1e-12, "{perturbed} < {base}");
        }
    }

    #[test]
    fn operator_files_round_trip() {
        let dir = std::env::temp_dir().join("blockrom_operator_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();

        let cfg = FomConfig {
            modal: ModalStructure::from_frequencies_hz(&[2.0]),
            n_f: 4,
            ..Default::default()
        };
        let fom = build_synthetic_fom(&cfg).unwrap();
        let basis = CoupledBasis {
            structural: ReducedBasis::identity(fom.n_s),
            fluid: ReducedBasis::identity(fom.n_f),
        };
        let mut ops = intrusive_project(&fom, &basis).unwrap();
        // Store only the populated blocks, as the aeroelastic preset would.
        ops.h_s = None;
        ops.l_s = None;
        ops.g_s = None;
        ops.l_f = None;
        ops.g_f = None;

        let path = dir.join("block.opo");
        write_operator_set(&OperatorSet::Block(ops.clone()), &path).unwrap();
        match read_operator_set(&path).unwrap() {
            OperatorSet::Block(b) => {
                assert_eq!(b.r_s, ops.r_s);
                assert!(b.h_s.is_none());
                assert_eq!(b.a_f, ops.a_f);
                assert_eq!(b.h_f, ops.h_f);
            }
            _ => panic!("expected block operators"),
        }

        let mono = ops.to_monolithic();
        let path = dir.join("mono.opo");
        write_operator_set(&OperatorSet::Monolithic(mono.clone()), &path).unwrap();
        match read_operator_set(&path).unwrap() {
            OperatorSet::Monolithic(m) => {
                assert_eq!(m.c, mono.c);
                assert_eq!(m.a, mono.a);
                assert_eq!(m.h, mono.h);
            }
            _ => panic!("expected monolithic operators"),
        }
    }
}
