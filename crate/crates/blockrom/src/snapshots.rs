//! Snapshot data model, variable lifting, shift/scale preprocessing, and
//! file I/O.
//!
//! A snapshot set is an `n x k` matrix whose columns are state vectors at
//! uniformly spaced time instants, together with a variable layout that
//! names contiguous row groups (e.g. pressure, velocities, density). The
//! preprocessor shifts each targeted group by its training mean and affinely
//! maps the shifted range onto a target interval; test data reuse the
//! training fit and are never refit, so transformed test entries may fall
//! outside the target range.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::textio;

const MAGIC: &[u8; 4] = b"OPIF";
const VERSION: u32 = 1;

/// Ordered list of named row groups making up the state vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableLayout {
    groups: Vec<(String, usize)>,
}

impl VariableLayout {
    pub fn new(groups: Vec<(String, usize)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidDimension("layout needs at least one group".into()));
        }
        for (name, size) in &groups {
            if *size == 0 {
                return Err(Error::InvalidDimension(format!("group '{name}' has size zero")));
            }
        }
        for (i, (name, _)) in groups.iter().enumerate() {
            if groups[i + 1..].iter().any(|(other, _)| other == name) {
                return Err(Error::InvalidDimension(format!("duplicate group name '{name}'")));
            }
        }
        Ok(Self { groups })
    }

    pub fn dim(&self) -> usize {
        self.groups.iter().map(|(_, s)| s).sum()
    }

    pub fn groups(&self) -> &[(String, usize)] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Row range of a named group, if present.
    pub fn row_range(&self, name: &str) -> Option<Range<usize>> {
        let mut start = 0;
        for (g, size) in &self.groups {
            if g == name {
                return Some(start..start + size);
            }
            start += size;
        }
        None
    }

    fn renamed(&self, from: &str, to: &str) -> Result<Self> {
        let groups = self
            .groups
            .iter()
            .map(|(g, s)| {
                if g == from {
                    (to.to_string(), *s)
                } else {
                    (g.clone(), *s)
                }
            })
            .collect();
        Self::new(groups)
    }
}

/// Matrix of state columns over time plus layout metadata.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub data: DMatrix<f64>,
    pub dt: f64,
    pub t0: f64,
    pub layout: VariableLayout,
}

impl SnapshotSet {
    pub fn new(data: DMatrix<f64>, dt: f64, t0: f64, layout: VariableLayout) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::InvalidDimension("snapshot set needs at least one column".into()));
        }
        if dt <= 0.0 {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        if layout.dim() != data.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "layout dimension {} does not match {} state rows",
                layout.dim(),
                data.nrows()
            )));
        }
        if let Some((r, c)) = first_non_finite(&data) {
            return Err(Error::Numeric(format!("non-finite snapshot entry at row {r}, column {c}")));
        }
        Ok(Self { data, dt, t0, layout })
    }

    pub fn state_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    /// Time of column `t`.
    pub fn time(&self, t: usize) -> f64 {
        self.t0 + t as f64 * self.dt
    }

    /// Copy of a contiguous column window, with the start time adjusted.
    pub fn window(&self, cols: Range<usize>) -> Result<SnapshotSet> {
        if cols.start >= cols.end || cols.end > self.len() {
            return Err(Error::InvalidDimension(format!(
                "window {}..{} outside 0..{}",
                cols.start,
                cols.end,
                self.len()
            )));
        }
        Ok(SnapshotSet {
            data: self.data.columns(cols.start, cols.end - cols.start).into_owned(),
            dt: self.dt,
            t0: self.time(cols.start),
            layout: self.layout.clone(),
        })
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Some((r, c));
            }
        }
    }
    None
}

/// Replace the `density` group by its elementwise reciprocal and rename it
/// `specific-volume`. Every density entry must be strictly positive.
pub fn lift_specific_volume(s: &SnapshotSet) -> Result<SnapshotSet> {
    let rows = s.layout.row_range("density").ok_or_else(|| {
        Error::Domain("layout has no 'density' group to lift".into())
    })?;
    let mut data = s.data.clone();
    for c in 0..data.ncols() {
        for r in rows.clone() {
            let value = data[(r, c)];
            if value <= 0.0 {
                return Err(Error::Domain(format!(
                    "density entry {value} at row {r}, column {c} is not strictly positive"
                )));
            }
            data[(r, c)] = 1.0 / value;
        }
    }
    Ok(SnapshotSet {
        data,
        dt: s.dt,
        t0: s.t0,
        layout: s.layout.renamed("density", "specific-volume")?,
    })
}

/// Shift strategy for the preprocessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftMode {
    /// One scalar mean per variable group (over all rows and times).
    #[default]
    PerGroup,
    /// One mean per state row (over time).
    PerRow,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub mode: ShiftMode,
    /// Accept constant groups by fixing their gain to 1 instead of erroring.
    pub constant_tolerant: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { mode: ShiftMode::PerGroup, constant_tolerant: false }
    }
}

#[derive(Debug, Clone)]
struct GroupParams {
    name: String,
    size: usize,
    /// Length 1 in per-group mode, `size` in per-row mode; zero for
    /// untargeted groups.
    shift: DVector<f64>,
    gain: f64,
    offset: f64,
    target: Option<(f64, f64)>,
}

/// Fitted shift/scale transform; apply then invert reproduces the input.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    mode: ShiftMode,
    groups: Vec<GroupParams>,
}

/// Fit a preprocessor on (training) snapshots. `targets` aligns with the
/// layout's groups; `None` leaves a group untouched.
pub fn fit_shift_scale(
    s: &SnapshotSet,
    targets: &[Option<(f64, f64)>],
    opts: &FitOptions,
) -> Result<Preprocessor> {
    if targets.len() != s.layout.group_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} layout groups",
            targets.len(),
            s.layout.group_count()
        )));
    }
    let mut groups = Vec::with_capacity(targets.len());
    for ((name, size), target) in s.layout.groups().iter().zip(targets) {
        let rows = s.layout.row_range(name).expect("group from layout");
        let params = match target {
            None => GroupParams {
                name: name.clone(),
                size: *size,
                shift: DVector::zeros(if opts.mode == ShiftMode::PerRow { *size } else { 1 }),
                gain: 1.0,
                offset: 0.0,
                target: None,
            },
            Some((lo, hi)) => {
                if !(lo < hi) {
                    return Err(Error::Domain(format!(
                        "target range [{lo}, {hi}] for group '{name}' is empty"
                    )));
                }
                let block = s.data.rows(rows.start, *size);
                let shift = match opts.mode {
                    ShiftMode::PerGroup => DVector::from_element(1, block.mean()),
                    ShiftMode::PerRow => DVector::from_fn(*size, |r, _| block.row(r).mean()),
                };
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for c in 0..block.ncols() {
                    for r in 0..*size {
                        let sh = if opts.mode == ShiftMode::PerRow { shift[r] } else { shift[0] };
                        let v = block[(r, c)] - sh;
                        min = min.min(v);
                        max = max.max(v);
                    }
                }
                let spread = max - min;
                let (gain, offset) = if spread > 0.0 {
                    let gain = (hi - lo) / spread;
                    (gain, lo - gain * min)
                } else if opts.constant_tolerant {
                    (1.0, 0.0)
                } else {
                    return Err(Error::DegenerateGroup { group: name.clone() });
                };
                GroupParams {
                    name: name.clone(),
                    size: *size,
                    shift,
                    gain,
                    offset,
                    target: Some((*lo, *hi)),
                }
            }
        };
        groups.push(params);
    }
    Ok(Preprocessor { mode: opts.mode, groups })
}

impl Preprocessor {
    pub fn mode(&self) -> ShiftMode {
        self.mode
    }

    fn check_layout(&self, layout: &VariableLayout) -> Result<()> {
        let fitted: Vec<(String, usize)> =
            self.groups.iter().map(|g| (g.name.clone(), g.size)).collect();
        if fitted != layout.groups() {
            return Err(Error::ShapeMismatch(
                "snapshot layout does not match the fitted layout".into(),
            ));
        }
        Ok(())
    }

    fn row_shift(&self, g: &GroupParams, r: usize) -> f64 {
        match self.mode {
            ShiftMode::PerGroup => g.shift[0],
            ShiftMode::PerRow => g.shift[r],
        }
    }

    /// Per-row affine coefficients of the forward transform:
    /// `y = gain*x + intercept` for every state row.
    pub fn row_affine(&self) -> (DVector<f64>, DVector<f64>) {
        let n: usize = self.groups.iter().map(|g| g.size).sum();
        let mut gain = DVector::zeros(n);
        let mut intercept = DVector::zeros(n);
        let mut row = 0;
        for g in &self.groups {
            for r in 0..g.size {
                gain[row] = g.gain;
                intercept[row] = g.offset - g.gain * self.row_shift(g, r);
                row += 1;
            }
        }
        (gain, intercept)
    }

    pub fn apply(&self, s: &SnapshotSet) -> Result<SnapshotSet> {
        self.check_layout(&s.layout)?;
        let (gain, intercept) = self.row_affine();
        let mut data = s.data.clone();
        for c in 0..data.ncols() {
            for r in 0..data.nrows() {
                data[(r, c)] = gain[r] * data[(r, c)] + intercept[r];
            }
        }
        Ok(SnapshotSet { data, dt: s.dt, t0: s.t0, layout: s.layout.clone() })
    }

    pub fn invert(&self, s: &SnapshotSet) -> Result<SnapshotSet> {
        self.check_layout(&s.layout)?;
        let (gain, intercept) = self.row_affine();
        let mut data = s.data.clone();
        for c in 0..data.ncols() {
            for r in 0..data.nrows() {
                data[(r, c)] = (data[(r, c)] - intercept[r]) / gain[r];
            }
        }
        Ok(SnapshotSet { data, dt: s.dt, t0: s.t0, layout: s.layout.clone() })
    }

    /// Forward transform of a single state vector.
    pub fn apply_state(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (gain, intercept) = self.row_affine();
        if x.len() != gain.len() {
            return Err(Error::ShapeMismatch(format!(
                "state of length {} does not match fitted dimension {}",
                x.len(),
                gain.len()
            )));
        }
        Ok(DVector::from_fn(x.len(), |r, _| gain[r] * x[r] + intercept[r]))
    }

    pub fn invert_state(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let (gain, intercept) = self.row_affine();
        if y.len() != gain.len() {
            return Err(Error::ShapeMismatch(format!(
                "state of length {} does not match fitted dimension {}",
                y.len(),
                gain.len()
            )));
        }
        Ok(DVector::from_fn(y.len(), |r, _| (y[r] - intercept[r]) / gain[r]))
    }

    /// Scalar shift of a named group (per-group mode).
    pub fn group_shift(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.name == name).map(|g| g.shift[0])
    }

    pub fn group_gain(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.name == name).map(|g| g.gain)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"OPPP")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[match self.mode {
            ShiftMode::PerGroup => 0u8,
            ShiftMode::PerRow => 1u8,
        }])?;
        w.write_all(&(self.groups.len() as u64).to_le_bytes())?;
        for g in &self.groups {
            write_name(&mut w, &g.name)?;
            w.write_all(&(g.size as u64).to_le_bytes())?;
            match g.target {
                Some((lo, hi)) => {
                    w.write_all(&[1u8])?;
                    w.write_all(&lo.to_le_bytes())?;
                    w.write_all(&hi.to_le_bytes())?;
                }
                None => {
                    w.write_all(&[0u8])?;
                    w.write_all(&0f64.to_le_bytes())?;
                    w.write_all(&0f64.to_le_bytes())?;
                }
            }
            w.write_all(&g.gain.to_le_bytes())?;
            w.write_all(&g.offset.to_le_bytes())?;
            w.write_all(&(g.shift.len() as u64).to_le_bytes())?;
            for v in g.shift.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Preprocessor> {
        let mut r = ByteReader::open(path)?;
        r.expect_magic(b"OPPP")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(r.format_error(format!("unsupported preprocessor version {version}")));
        }
        let mode = match r.u8()? {
            0 => ShiftMode::PerGroup,
            1 => ShiftMode::PerRow,
            other => return Err(r.format_error(format!("unknown shift mode {other}"))),
        };
        let n_groups = r.u64()? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let name = r.name()?;
            let size = r.u64()? as usize;
            let has_target = r.u8()? == 1;
            let lo = r.f64()?;
            let hi = r.f64()?;
            let gain = r.f64()?;
            let offset = r.f64()?;
            let shift_len = r.u64()? as usize;
            let mut shift = DVector::zeros(shift_len);
            for i in 0..shift_len {
                shift[i] = r.f64()?;
            }
            groups.push(GroupParams {
                name,
                size,
                shift,
                gain,
                offset,
                target: if has_target { Some((lo, hi)) } else { None },
            });
        }
        Ok(Preprocessor { mode, groups })
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

/// Byte stream with position tracking for format errors.
pub(crate) struct ByteReader {
    buf: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    pub(crate) fn open(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        Ok(Self { buf, pos: 0 })
    }

    pub(crate) fn format_error(&self, reason: String) -> Error {
        Error::Format { offset: self.pos as u64, reason }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!(
                    "file truncated: needed {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {:?}, expected {:?}", got, magic),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn name(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        if len > 4096 {
            return Err(self.format_error(format!("unreasonable name length {len}")));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format { offset: self.pos as u64, reason: "name is not UTF-8".into() })
    }

    pub(crate) fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Write a snapshot set in the binary container format: magic `OPIF`,
/// version, dimensions, time metadata, layout block, then column-major
/// 64-bit floats.
pub fn write_snapshots(s: &SnapshotSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(s.state_dim() as u64).to_le_bytes())?;
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(&s.dt.to_le_bytes())?;
    w.write_all(&s.t0.to_le_bytes())?;
    w.write_all(&(s.layout.group_count() as u64).to_le_bytes())?;
    for (name, size) in s.layout.groups() {
        write_name(&mut w, name)?;
        w.write_all(&(*size as u64).to_le_bytes())?;
    }
    // Column-major matches the in-memory storage order.
    for v in s.data.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshots(path: &Path) -> Result<SnapshotSet> {
    let mut r = ByteReader::open(path)?;
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.format_error(format!("unsupported version {version}")));
    }
    let n = r.u64()? as usize;
    let k = r.u64()? as usize;
    let dt = r.f64()?;
    let t0 = r.f64()?;
    let n_groups = r.u64()? as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let name = r.name()?;
        let size = r.u64()? as usize;
        groups.push((name, size));
    }
    let layout = VariableLayout::new(groups)?;
    if layout.dim() != n {
        return Err(r.format_error(format!(
            "layout dimension {} does not match declared {n} rows",
            layout.dim()
        )));
    }
    let expected = n
        .checked_mul(k)
        .and_then(|e| e.checked_mul(8))
        .ok_or_else(|| r.format_error("dimension overflow".into()))?;
    if r.remaining() < expected {
        return Err(r.format_error(format!(
            "header declares {n}x{k} values but only {} data bytes remain",
            r.remaining()
        )));
    }
    let mut data = DMatrix::zeros(n, k);
    for v in data.as_mut_slice() {
        *v = r.f64()?;
    }
    r.done()?;
    SnapshotSet::new(data, dt, t0, layout)
}

/// CSV export: header row of group names with indices, one row per time
/// instant.
pub fn export_csv(s: &SnapshotSet, path: &Path) -> Result<()> {
    let mut header = Vec::with_capacity(s.state_dim());
    for (name, size) in s.layout.groups() {
        for i in 0..*size {
            header.push(format!("{name}_{i}"));
        }
    }
    let rows: Vec<String> = (0..s.len())
        .map(|t| {
            (0..s.state_dim())
                .map(|r| textio::float_field(s.data[(r, t)]))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    textio::write_csv(path, &header.join(","), &rows)
}
