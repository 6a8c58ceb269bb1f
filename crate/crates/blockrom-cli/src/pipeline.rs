//! Pipeline stages: simulate, preprocess, pod, train, search, predict,
//! evaluate, compare, count, flutter. Stages communicate through files in
//! the output directory and record everything they produce in the manifest.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use blockrom::flutter;
use blockrom::fom::{
    build_synthetic_fom, exact_derivatives, fd_time_derivative, integrate_fom, CoupledFom,
    FomConfig, ModalStructure,
};
use blockrom::inference::{
    count_parameters, infer_block, infer_monolithic, read_operator_set, write_operator_set,
    BlockRegWeights, CountKind, MonolithicRegWeights, OperatorSet,
};
use blockrom::pod::{compute_pod, export_singular_values_csv, select_rank, CoupledBasis, ReducedBasis};
use blockrom::regsearch::{
    grid_search, AxisSpec, AxisSpacing, EvalRecord, GridSpec, ObjectiveMode, SearchError,
    TrainBundle, TrainMethod,
};
use blockrom::rom::{
    extract_qoi, integrate_rom, relative_rmse, rom_rhs_into, row_series,
    weighted_series, QoiPullback, QoiSeries, RhsWorkspace, RomTrajectory,
};
use blockrom::snapshots::{
    export_csv, fit_shift_scale, lift_specific_volume, read_snapshots, write_snapshots,
    FitOptions, Preprocessor, ShiftMode, SnapshotSet,
};
use blockrom::textio;

use crate::config::{
    DerivativeMode, EvaluateWindow, LiftMode, PipelineConfig, StructuralBasisCfg,
};
use crate::manifest::Manifest;
use crate::CliError;

/// All ten runnable stages, in dependency order where one exists.
pub const STAGE_ORDER: [&str; 10] = [
    "simulate", "preprocess", "pod", "train", "search", "predict", "evaluate", "compare",
    "count", "flutter",
];

/// Stages executed by a plain `run` invocation.
pub const DEFAULT_STAGES: [&str; 6] =
    ["simulate", "preprocess", "pod", "search", "predict", "evaluate"];

pub struct Paths {
    out: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    fn join(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn snapshots(&self) -> PathBuf {
        self.join("snapshots.opif")
    }

    pub fn preprocessed(&self) -> PathBuf {
        self.join("preprocessed.opif")
    }

    pub fn preprocessor(&self) -> PathBuf {
        self.join("preprocessor.opp")
    }

    pub fn basis_structural(&self) -> PathBuf {
        self.join("basis_structural.opb")
    }

    pub fn basis_fluid(&self) -> PathBuf {
        self.join("basis_fluid.opb")
    }

    pub fn singular_values_csv(&self) -> PathBuf {
        self.join("singular_values_fluid.csv")
    }

    pub fn operators(&self, method: TrainMethod) -> PathBuf {
        self.join(&format!("operators_{}.opo", method_name(method)))
    }

    pub fn search_log(&self, method: TrainMethod) -> PathBuf {
        self.join(&format!("search_log_{}.csv", method_name(method)))
    }

    pub fn search_best(&self, method: TrainMethod) -> PathBuf {
        self.join(&format!("search_best_{}.csv", method_name(method)))
    }

    pub fn rom_states(&self, method: TrainMethod) -> PathBuf {
        self.join(&format!("rom_states_{}.opif", method_name(method)))
    }

    pub fn qoi_csv(&self, source: &str, name: &str) -> PathBuf {
        self.join(&format!("qoi_{source}_{name}.csv"))
    }

    pub fn errors_csv(&self) -> PathBuf {
        self.join("errors.csv")
    }

    pub fn state_slice_csv(&self, method: TrainMethod, step: usize) -> PathBuf {
        self.join(&format!("state_slice_{}_{step}.csv", method_name(method)))
    }

    pub fn compare_csv(&self) -> PathBuf {
        self.join("compare.csv")
    }

    pub fn counts_csv(&self) -> PathBuf {
        self.join("counts.csv")
    }

    pub fn flutter_csv(&self) -> PathBuf {
        self.join("flutter.csv")
    }
}

pub fn method_name(method: TrainMethod) -> &'static str {
    match method {
        TrainMethod::Block => "block",
        TrainMethod::Monolithic => "monolithic",
    }
}

fn core_err(e: blockrom::Error) -> CliError {
    match e {
        blockrom::Error::Config(msg) => CliError::Config(msg),
        blockrom::Error::NoFeasiblePoint { evaluated } => CliError::NoFeasible(format!(
            "no feasible regularization candidate among {evaluated} evaluated"
        )),
        other => CliError::Runtime(other.to_string()),
    }
}

fn require(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!(
            "{} is missing; run the '{produced_by}' stage first",
            path.display()
        )));
    }
    Ok(())
}

fn fom_from_config(cfg: &PipelineConfig) -> Result<CoupledFom, CliError> {
    let mut modal = ModalStructure::from_frequencies_hz(&cfg.fom.frequencies_hz);
    if let Some(damping) = &cfg.fom.damping {
        modal.damping = damping.clone();
    }
    let fom_cfg = FomConfig {
        modal,
        n_f: cfg.fom.n_f,
        nu: cfg.fom.nu,
        kappa_f: cfg.fom.kappa_f,
        kappa_s: cfg.fom.kappa_s,
        seed: cfg.fom.seed.unwrap_or(cfg.seed),
        dense_coupling: false,
    };
    build_synthetic_fom(&fom_cfg).map_err(core_err)
}

pub fn stage_simulate(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("creating output directory: {e}")))?;
    let paths = Paths::new(&cfg.out_dir);
    let fom = fom_from_config(cfg)?;
    let q0 = fom.initial_state(cfg.fom.gdisp_perturbation, cfg.fom.gvel_perturbation);
    let snaps = integrate_fom(&fom, &q0, cfg.fom.dt, cfg.fom.steps + 1).map_err(core_err)?;
    write_snapshots(&snaps, &paths.snapshots()).map_err(core_err)?;
    manifest.record(&paths.snapshots());
    println!(
        "simulate: {} states x {} columns, dt = {:.6e} s",
        snaps.state_dim(),
        snaps.len(),
        snaps.dt
    );
    Ok(())
}

pub fn stage_preprocess(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.snapshots(), "simulate")?;
    let raw = read_snapshots(&paths.snapshots()).map_err(core_err)?;

    let lifted = match cfg.preprocess.lift {
        LiftMode::Off => raw.clone(),
        LiftMode::On => lift_specific_volume(&raw).map_err(core_err)?,
        LiftMode::Auto => {
            if raw.layout.row_range("density").is_some() {
                lift_specific_volume(&raw).map_err(core_err)?
            } else {
                raw.clone()
            }
        }
    };

    // Fit on the training columns only; apply to everything.
    let k_train = cfg.train.k_train;
    if k_train < 1 || k_train > lifted.len() {
        return Err(CliError::Config(format!(
            "k_train = {k_train} outside the {} available snapshot columns",
            lifted.len()
        )));
    }
    let train_window = lifted.window(0..k_train).map_err(core_err)?;
    let mut targets: Vec<Option<(f64, f64)>> = Vec::new();
    for (name, _) in lifted.layout.groups() {
        targets.push(
            cfg.preprocess
                .groups
                .iter()
                .find(|(g, _)| g == name)
                .map(|(_, range)| *range),
        );
    }
    for (name, _) in &cfg.preprocess.groups {
        if lifted.layout.row_range(name).is_none() {
            return Err(CliError::Config(format!(
                "preprocess group '{name}' is not in the snapshot layout"
            )));
        }
    }
    let opts = FitOptions {
        mode: if cfg.preprocess.per_row { ShiftMode::PerRow } else { ShiftMode::PerGroup },
        constant_tolerant: cfg.preprocess.constant_tolerant,
    };
    let pre = fit_shift_scale(&train_window, &targets, &opts).map_err(core_err)?;
    let processed = pre.apply(&lifted).map_err(core_err)?;

    write_snapshots(&processed, &paths.preprocessed()).map_err(core_err)?;
    pre.write(&paths.preprocessor()).map_err(core_err)?;
    manifest.record(&paths.preprocessed());
    manifest.record(&paths.preprocessor());
    println!("preprocess: fitted on {k_train} training columns, applied to {}", processed.len());
    Ok(())
}

struct Bases {
    basis: CoupledBasis,
    n_s: usize,
}

fn load_bases(paths: &Paths) -> Result<Bases, CliError> {
    require(&paths.basis_structural(), "pod")?;
    require(&paths.basis_fluid(), "pod")?;
    let structural = ReducedBasis::read(&paths.basis_structural()).map_err(core_err)?;
    let fluid = ReducedBasis::read(&paths.basis_fluid()).map_err(core_err)?;
    let n_s = structural.dim();
    Ok(Bases { basis: CoupledBasis { structural, fluid }, n_s })
}

fn structural_rows(layout: &blockrom::snapshots::VariableLayout) -> Result<Range<usize>, CliError> {
    let gdisp = layout.row_range("gdisp");
    let gvel = layout.row_range("gvel");
    match (gdisp, gvel) {
        (Some(d), Some(v)) if d.end == v.start => Ok(d.start..v.end),
        _ => Err(CliError::Config(
            "snapshot layout must carry adjacent 'gdisp' and 'gvel' groups".into(),
        )),
    }
}

pub fn stage_pod(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.preprocessed(), "preprocess")?;
    let processed = read_snapshots(&paths.preprocessed()).map_err(core_err)?;
    let k_train = cfg.train.k_train.min(processed.len());
    let train = processed.window(0..k_train).map_err(core_err)?;

    let s_rows = structural_rows(&train.layout)?;
    let fluid_rows = train
        .layout
        .row_range("fluid")
        .ok_or_else(|| CliError::Config("snapshot layout has no 'fluid' group".into()))?;

    let structural = match cfg.pod.structural_basis {
        StructuralBasisCfg::Identity => ReducedBasis::identity(s_rows.len()),
        StructuralBasisCfg::Pod => {
            let data = train.data.rows(s_rows.start, s_rows.len()).into_owned();
            let full = compute_pod(&data).map_err(core_err)?;
            let r_s = match cfg.pod.r_s {
                Some(r) => r,
                None => select_rank(full.singular_values(), cfg.pod.energy_s).map_err(core_err)?,
            };
            if r_s > full.rank() {
                return Err(CliError::Config(format!(
                    "r_s = {r_s} exceeds the available rank {}",
                    full.rank()
                )));
            }
            full.truncate(r_s).map_err(core_err)?
        }
    };

    let fluid_data = train.data.rows(fluid_rows.start, fluid_rows.len()).into_owned();
    let fluid_full = compute_pod(&fluid_data).map_err(core_err)?;
    let r_f = match cfg.pod.r_f {
        Some(r) => r,
        None => select_rank(fluid_full.singular_values(), cfg.pod.energy_f).map_err(core_err)?,
    };
    if r_f == 0 || r_f > fluid_full.rank() {
        return Err(CliError::Config(format!(
            "r_f = {r_f} outside the available rank {}",
            fluid_full.rank()
        )));
    }
    let fluid = fluid_full.truncate(r_f).map_err(core_err)?;

    structural.write(&paths.basis_structural()).map_err(core_err)?;
    fluid.write(&paths.basis_fluid()).map_err(core_err)?;
    export_singular_values_csv(&fluid, &paths.singular_values_csv()).map_err(core_err)?;
    manifest.record(&paths.basis_structural());
    manifest.record(&paths.basis_fluid());
    manifest.record(&paths.singular_values_csv());
    println!("pod: r_s = {}, r_f = {r_f}", structural.rank());
    Ok(())
}

/// Everything train and search share: reduced training states, their time
/// derivatives, and the quantities tracked by the objective.
struct TrainingData {
    states_hat: DMatrix<f64>,
    derivatives: DMatrix<f64>,
    derivative_window: Range<usize>,
    r_s: usize,
    r_f: usize,
    q0_hat: DVector<f64>,
    dt: f64,
    qois: Vec<(QoiPullback, Vec<f64>)>,
}

fn affine_slices(
    pre: &Preprocessor,
    rows: Range<usize>,
) -> (DVector<f64>, DVector<f64>) {
    let (gain, intercept) = pre.row_affine();
    (
        DVector::from_column_slice(&gain.as_slice()[rows.clone()]),
        DVector::from_column_slice(&intercept.as_slice()[rows]),
    )
}

fn build_pullback(
    name: &str,
    bases: &Bases,
    pre: &Preprocessor,
    layout: &blockrom::snapshots::VariableLayout,
) -> Result<QoiPullback, CliError> {
    let s_rows = structural_rows(layout)?;
    let fluid_rows = layout
        .row_range("fluid")
        .ok_or_else(|| CliError::Config("snapshot layout has no 'fluid' group".into()))?;
    let mode_count = layout.row_range("gdisp").expect("checked above").len();
    let (gain_s, int_s) = affine_slices(pre, s_rows);
    let (gain_f, int_f) = affine_slices(pre, fluid_rows.clone());

    if name == "lift" {
        let weights = DVector::from_element(fluid_rows.len(), 1.0 / fluid_rows.len() as f64);
        return QoiPullback::fluid_functional(
            "lift",
            &weights,
            &bases.basis.fluid,
            Some((&gain_f, &int_f)),
        )
        .map_err(core_err);
    }
    if let Some(idx) = name.strip_prefix("gdisp_") {
        let i: usize = idx
            .parse()
            .map_err(|_| CliError::Config(format!("bad quantity name '{name}'")))?;
        if i == 0 || i > mode_count {
            return Err(CliError::Config(format!("gdisp index {i} outside 1..={mode_count}")));
        }
        return QoiPullback::gdisp(i - 1, &bases.basis.structural, Some((&gain_s, &int_s)))
            .map_err(core_err);
    }
    if let Some(idx) = name.strip_prefix("gvel_") {
        let i: usize = idx
            .parse()
            .map_err(|_| CliError::Config(format!("bad quantity name '{name}'")))?;
        if i == 0 || i > mode_count {
            return Err(CliError::Config(format!("gvel index {i} outside 1..={mode_count}")));
        }
        return QoiPullback::gvel(i - 1, mode_count, &bases.basis.structural, Some((&gain_s, &int_s)))
            .map_err(core_err);
    }
    Err(CliError::Config(format!(
        "unknown quantity '{name}' (expected lift, gdisp_<i>, or gvel_<i>)"
    )))
}

fn truth_series(name: &str, raw: &SnapshotSet) -> Result<QoiSeries, CliError> {
    let s_rows = structural_rows(&raw.layout)?;
    let fluid_rows = raw
        .layout
        .row_range("fluid")
        .ok_or_else(|| CliError::Config("snapshot layout has no 'fluid' group".into()))?;
    let mode_count = raw.layout.row_range("gdisp").expect("checked above").len();
    if name == "lift" {
        let weights = DVector::from_element(fluid_rows.len(), 1.0 / fluid_rows.len() as f64);
        return weighted_series(raw, fluid_rows, &weights, "lift").map_err(core_err);
    }
    if let Some(idx) = name.strip_prefix("gdisp_") {
        let i: usize = idx
            .parse()
            .map_err(|_| CliError::Config(format!("bad quantity name '{name}'")))?;
        return row_series(raw, s_rows.start + i - 1, name).map_err(core_err);
    }
    if let Some(idx) = name.strip_prefix("gvel_") {
        let i: usize = idx
            .parse()
            .map_err(|_| CliError::Config(format!("bad quantity name '{name}'")))?;
        return row_series(raw, s_rows.start + mode_count + i - 1, name).map_err(core_err);
    }
    Err(CliError::Config(format!("unknown quantity '{name}'")))
}

fn assemble_training(cfg: &PipelineConfig, paths: &Paths, qoi_names: &[String]) -> Result<TrainingData, CliError> {
    require(&paths.preprocessed(), "preprocess")?;
    require(&paths.preprocessor(), "preprocess")?;
    require(&paths.snapshots(), "simulate")?;
    let processed = read_snapshots(&paths.preprocessed()).map_err(core_err)?;
    let raw = read_snapshots(&paths.snapshots()).map_err(core_err)?;
    let pre = Preprocessor::read(&paths.preprocessor()).map_err(core_err)?;
    let bases = load_bases(paths)?;

    let k_train = cfg.train.k_train;
    if k_train > processed.len() {
        return Err(CliError::Config(format!(
            "k_train = {k_train} outside the {} available snapshot columns",
            processed.len()
        )));
    }
    let train = processed.window(0..k_train).map_err(core_err)?;
    let s_rows = structural_rows(&train.layout)?;
    let fluid_rows = train
        .layout
        .row_range("fluid")
        .ok_or_else(|| CliError::Config("snapshot layout has no 'fluid' group".into()))?;
    if bases.n_s != s_rows.len() || bases.basis.n_f() != fluid_rows.len() {
        return Err(CliError::Config(
            "basis dimensions do not match the snapshot layout; rerun the pod stage".into(),
        ));
    }

    // Stack the per-physics projections: structural rows first.
    let mut reordered = DMatrix::zeros(train.state_dim(), train.len());
    reordered
        .view_mut((0, 0), (s_rows.len(), train.len()))
        .copy_from(&train.data.rows(s_rows.start, s_rows.len()));
    reordered
        .view_mut((s_rows.len(), 0), (fluid_rows.len(), train.len()))
        .copy_from(&train.data.rows(fluid_rows.start, fluid_rows.len()));
    let states_hat = bases.basis.project(&reordered).map_err(core_err)?;

    let (derivatives, derivative_window) = match cfg.train.derivative {
        DerivativeMode::FiniteDifference => {
            // Differencing happens in the reduced space.
            let layout = blockrom::snapshots::VariableLayout::new(vec![(
                "reduced".to_string(),
                states_hat.nrows(),
            )])
            .map_err(core_err)?;
            let reduced_set =
                SnapshotSet::new(states_hat.clone(), train.dt, train.t0, layout).map_err(core_err)?;
            fd_time_derivative(&reduced_set).map_err(core_err)?
        }
        DerivativeMode::Exact => {
            // Evaluate the model at the reconstruction, then push the
            // derivative through the preprocessing gains.
            let fom = fom_from_config(cfg)?;
            if fom.dim() != train.state_dim() {
                return Err(CliError::Config(
                    "[fom] dimensions do not match the stored snapshots".into(),
                ));
            }
            let reconstructed = bases.basis.reconstruct(&states_hat).map_err(core_err)?;
            let (gain, _) = pre.row_affine();
            let mut physical = reconstructed.clone();
            let mut preprocessed_rate = DMatrix::zeros(fom.dim(), train.len());
            // Undo the affine map (values), differentiate, redo the gains.
            let (_, intercept) = pre.row_affine();
            for t in 0..train.len() {
                for r in 0..fom.dim() {
                    // Rows here are in (structural, fluid) order = layout order.
                    physical[(r, t)] = (reconstructed[(r, t)] - intercept[r]) / gain[r];
                }
            }
            let physical_set =
                SnapshotSet::new(physical, train.dt, train.t0, train.layout.clone())
                    .map_err(core_err)?;
            let rates = exact_derivatives(&fom, &physical_set).map_err(core_err)?;
            for t in 0..train.len() {
                for r in 0..fom.dim() {
                    preprocessed_rate[(r, t)] = gain[r] * rates[(r, t)];
                }
            }
            let projected = bases.basis.project(&preprocessed_rate).map_err(core_err)?;
            (projected, 0..train.len())
        }
    };

    let q0_hat = DVector::from_column_slice(states_hat.column(0).as_slice());

    let mut qois = Vec::new();
    for name in qoi_names {
        let pullback = build_pullback(name, &bases, &pre, &train.layout)?;
        let truth = truth_series(name, &raw)?;
        if truth.values.len() < k_train {
            return Err(CliError::Config(
                "raw snapshots are shorter than the training window".into(),
            ));
        }
        qois.push((pullback, truth.values[..k_train].to_vec()));
    }

    Ok(TrainingData {
        r_s: bases.basis.r_s(),
        r_f: bases.basis.r_f(),
        q0_hat,
        dt: train.dt,
        states_hat,
        derivatives,
        derivative_window,
        qois,
    })
}

pub fn stage_train(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let paths = Paths::new(&cfg.out_dir);
    let data = assemble_training(cfg, &paths, &[])?;
    let mask = cfg.train.mask.mask();
    let trim = data.derivative_window.clone();
    let all_zero_block = cfg.train.gamma_s_linear == 0.0
        && cfg.train.gamma_f_linear == 0.0
        && cfg.train.gamma_f_quadratic == 0.0;
    let all_zero_mono =
        cfg.train.gamma_c == 0.0 && cfg.train.gamma_a == 0.0 && cfg.train.gamma_h == 0.0;

    for method in cfg.train.method.methods() {
        let (ops, rank_deficient) = match method {
            TrainMethod::Block => {
                let q_s = data.states_hat.rows(0, data.r_s).columns(trim.start, trim.len()).into_owned();
                let q_f = data
                    .states_hat
                    .rows(data.r_s, data.r_f)
                    .columns(trim.start, trim.len())
                    .into_owned();
                let d_s = data.derivatives.rows(0, data.r_s).into_owned();
                let d_f = data.derivatives.rows(data.r_s, data.r_f).into_owned();
                let weights = BlockRegWeights {
                    gamma_s_linear: cfg.train.gamma_s_linear,
                    gamma_f_linear: cfg.train.gamma_f_linear,
                    gamma_f_quadratic: cfg.train.gamma_f_quadratic,
                };
                let (ops, diag) =
                    infer_block(&q_s, &q_f, &d_s, &d_f, &mask, &weights).map_err(core_err)?;
                (OperatorSet::Block(ops), diag.rank_deficient && all_zero_block)
            }
            TrainMethod::Monolithic => {
                let q = data.states_hat.columns(trim.start, trim.len()).into_owned();
                let weights = MonolithicRegWeights {
                    gamma_c: cfg.train.gamma_c,
                    gamma_a: cfg.train.gamma_a,
                    gamma_h: cfg.train.gamma_h,
                };
                let (ops, diag) =
                    infer_monolithic(&q, &data.derivatives, &weights).map_err(core_err)?;
                (OperatorSet::Monolithic(ops), diag.rank_deficient && all_zero_mono)
            }
        };
        if rank_deficient {
            let message = format!(
                "{} inference is rank-deficient with zero regularization",
                method_name(method)
            );
            if cfg.train.strict {
                return Err(CliError::Runtime(message));
            }
            eprintln!("warning: {message}; minimum-norm solution kept");
        }
        let path = paths.operators(method);
        write_operator_set(&ops, &path).map_err(core_err)?;
        manifest.record(&path);
        println!("train: wrote {}", path.display());
    }
    Ok(())
}

fn search_log_csv(log: &[EvalRecord], method: TrainMethod, path: &Path) -> Result<(), CliError> {
    let header = match method {
        TrainMethod::Block => {
            "gamma_s_linear,gamma_f_linear,gamma_f_quadratic,objective,feasible,blow_up_step,stage,skipped"
        }
        TrainMethod::Monolithic => {
            "gamma_c,gamma_a,gamma_h,objective,feasible,blow_up_step,stage,skipped"
        }
    };
    let rows: Vec<String> = log
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                textio::float_field(r.weights[0]),
                textio::float_field(r.weights[1]),
                textio::float_field(r.weights[2]),
                textio::float_field(r.objective),
                r.feasible,
                r.blow_up_step.map(|s| s.to_string()).unwrap_or_default(),
                r.stage,
                r.skipped,
            )
        })
        .collect();
    textio::write_csv(path, header, &rows).map_err(core_err)
}

pub fn stage_search(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let paths = Paths::new(&cfg.out_dir);
    let data = assemble_training(cfg, &paths, &cfg.regsearch.qois)?;
    let mask = cfg.train.mask.mask();
    let axis = AxisSpec {
        lo: cfg.regsearch.lo,
        hi: cfg.regsearch.hi,
        count: cfg.regsearch.points,
        spacing: if cfg.regsearch.log_spacing { AxisSpacing::Log } else { AxisSpacing::Linear },
    };
    let spec = GridSpec {
        axes: [axis.clone(), axis.clone(), axis],
        alpha: cfg.regsearch.alpha,
        refinements: cfg.regsearch.refinements,
        objective_window: None,
        budget: cfg.regsearch.budget_seconds.map(Duration::from_secs_f64),
    };

    for method in cfg.train.method.methods() {
        let bundle = TrainBundle {
            method,
            states: &data.states_hat,
            derivatives: &data.derivatives,
            derivative_window: data.derivative_window.clone(),
            r_s: data.r_s,
            r_f: data.r_f,
            mask: &mask,
            q0: data.q0_hat.clone(),
            dt: data.dt,
            qois: data.qois.clone(),
            objective: if cfg.regsearch.state_objective {
                ObjectiveMode::ReducedState
            } else {
                ObjectiveMode::TrackedQois
            },
        };
        let result = match grid_search(&bundle, &spec) {
            Ok(r) => r,
            Err(SearchError::NoFeasiblePoint { log }) => {
                // Leave the log behind for diagnosis before failing.
                search_log_csv(&log, method, &paths.search_log(method))?;
                manifest.record(&paths.search_log(method));
                return Err(CliError::NoFeasible(format!(
                    "{}: no feasible regularization candidate among {} evaluated",
                    method_name(method),
                    log.len()
                )));
            }
            Err(SearchError::Invalid(e)) => return Err(core_err(e)),
        };

        search_log_csv(&result.log, method, &paths.search_log(method))?;
        manifest.record(&paths.search_log(method));

        let best_header = match method {
            TrainMethod::Block => "gamma_s_linear,gamma_f_linear,gamma_f_quadratic,objective",
            TrainMethod::Monolithic => "gamma_c,gamma_a,gamma_h,objective",
        };
        textio::write_csv(
            &paths.search_best(method),
            best_header,
            &[format!(
                "{},{},{},{}",
                textio::float_field(result.best_weights[0]),
                textio::float_field(result.best_weights[1]),
                textio::float_field(result.best_weights[2]),
                textio::float_field(result.best_objective),
            )],
        )
        .map_err(core_err)?;
        manifest.record(&paths.search_best(method));

        let (ops, _) = blockrom::regsearch::evaluate_candidate(&bundle, result.best_weights)
            .map_err(core_err)?;
        let path = paths.operators(method);
        write_operator_set(&ops, &path).map_err(core_err)?;
        manifest.record(&path);
        println!(
            "search: {} best weights ({:e}, {:e}, {:e}), objective {:.3e}",
            method_name(method),
            result.best_weights[0],
            result.best_weights[1],
            result.best_weights[2],
            result.best_objective
        );
    }
    Ok(())
}

fn predict_initial_state(cfg: &PipelineConfig, layout: &blockrom::snapshots::VariableLayout) -> Result<DVector<f64>, CliError> {
    let s_rows = structural_rows(layout)?;
    let mode_count = s_rows.len() / 2;
    let mut q0 = DVector::zeros(layout.dim());
    for i in 0..mode_count {
        q0[s_rows.start + i] = cfg.predict.gdisp_perturbation;
        q0[s_rows.start + mode_count + i] = cfg.predict.gvel_perturbation;
    }
    Ok(q0)
}

pub fn stage_predict(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.preprocessor(), "preprocess")?;
    require(&paths.preprocessed(), "preprocess")?;
    let processed = read_snapshots(&paths.preprocessed()).map_err(core_err)?;
    let pre = Preprocessor::read(&paths.preprocessor()).map_err(core_err)?;
    let bases = load_bases(&paths)?;

    let q0_physical = predict_initial_state(cfg, &processed.layout)?;
    let q0_pre = pre.apply_state(&q0_physical).map_err(core_err)?;
    let q0_hat = bases.basis.project_state(&q0_pre).map_err(core_err)?;

    for method in cfg.train.method.methods() {
        let op_path = paths.operators(method);
        require(&op_path, "train or search")?;
        let ops = read_operator_set(&op_path).map_err(core_err)?;
        if ops.dim() != q0_hat.len() {
            return Err(CliError::Config(format!(
                "operators in {} have dimension {}, bases give {}",
                op_path.display(),
                ops.dim(),
                q0_hat.len()
            )));
        }
        let traj = integrate_rom(
            &ops,
            &q0_hat,
            processed.dt,
            cfg.predict.horizon_steps + 1,
            (bases.basis.r_s(), bases.basis.r_f()),
        )
        .map_err(core_err)?;
        if let Some(step) = traj.blow_up {
            return Err(CliError::Runtime(format!(
                "{} prediction blew up at step {step}",
                method_name(method)
            )));
        }
        let layout = blockrom::snapshots::VariableLayout::new(vec![
            ("reduced_structural".to_string(), traj.r_s),
            ("reduced_fluid".to_string(), traj.r_f),
        ])
        .map_err(core_err)?;
        let out = SnapshotSet::new(traj.states.clone(), traj.dt, traj.t0, layout).map_err(core_err)?;
        let path = paths.rom_states(method);
        write_snapshots(&out, &path).map_err(core_err)?;
        manifest.record(&path);
        println!("predict: wrote {} ({} columns)", path.display(), traj.len());
    }
    Ok(())
}

fn evaluate_window(cfg: &PipelineConfig, series_len: usize) -> Result<Range<usize>, CliError> {
    let window = match cfg.evaluate.window {
        EvaluateWindow::Prediction => cfg.train.k_train..cfg.predict.horizon_steps + 1,
        EvaluateWindow::Full => 0..cfg.predict.horizon_steps + 1,
        EvaluateWindow::Explicit(a, b) => a..b,
    };
    if window.start >= window.end || window.end > series_len {
        return Err(CliError::Config(format!(
            "evaluation window {}..{} outside the {} available columns",
            window.start, window.end, series_len
        )));
    }
    Ok(window)
}

fn load_rom_trajectory(paths: &Paths, method: TrainMethod) -> Result<RomTrajectory, CliError> {
    let path = paths.rom_states(method);
    require(&path, "predict")?;
    let set = read_snapshots(&path).map_err(core_err)?;
    let r_s = set
        .layout
        .row_range("reduced_structural")
        .ok_or_else(|| CliError::Runtime("rom state file lacks the reduced layout".into()))?
        .len();
    let r_f = set
        .layout
        .row_range("reduced_fluid")
        .ok_or_else(|| CliError::Runtime("rom state file lacks the reduced layout".into()))?
        .len();
    Ok(RomTrajectory::from_states(set.data, set.dt, set.t0, r_s, r_f))
}

pub fn stage_evaluate(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.snapshots(), "simulate")?;
    require(&paths.preprocessor(), "preprocess")?;
    let raw = read_snapshots(&paths.snapshots()).map_err(core_err)?;
    let pre = Preprocessor::read(&paths.preprocessor()).map_err(core_err)?;
    let bases = load_bases(&paths)?;
    let processed_layout = read_snapshots(&paths.preprocessed()).map_err(core_err)?.layout;

    let mut error_rows = Vec::new();
    for method in cfg.train.method.methods() {
        let traj = load_rom_trajectory(&paths, method)?;
        let window = evaluate_window(cfg, traj.len().min(raw.len()))?;
        for name in &cfg.evaluate.qois {
            let truth = truth_series(name, &raw)?;
            let pullback = build_pullback(name, &bases, &pre, &processed_layout)?;
            let series = extract_qoi(&traj, &pullback).map_err(core_err)?;

            let truth_path = paths.qoi_csv("truth", name);
            blockrom::rom::export_qoi_csv(&truth, &truth_path).map_err(core_err)?;
            manifest.record(&truth_path);
            let rom_path = paths.qoi_csv(method_name(method), name);
            blockrom::rom::export_qoi_csv(&series, &rom_path).map_err(core_err)?;
            manifest.record(&rom_path);

            let eps = relative_rmse(&truth.values, &series.values, window.clone()).map_err(core_err)?;
            error_rows.push(format!(
                "{},{},{},{},{}",
                cfg.evaluate.condition_id,
                bases.basis.r_f(),
                method_name(method),
                name,
                textio::float_field(eps)
            ));
            println!(
                "evaluate: {} {} relative RMSE = {:.4e}",
                method_name(method),
                name,
                eps
            );
        }

        for &step in &cfg.evaluate.export_state_steps {
            if step >= traj.len() {
                return Err(CliError::Config(format!(
                    "export_state_steps entry {step} outside the {}-column trajectory",
                    traj.len()
                )));
            }
            let reduced = DVector::from_column_slice(traj.states.column(step).as_slice());
            let pre_state = bases.basis.reconstruct_state(&reduced).map_err(core_err)?;
            let physical = pre.invert_state(&pre_state).map_err(core_err)?;
            let slice = SnapshotSet::new(
                DMatrix::from_column_slice(physical.len(), 1, physical.as_slice()),
                traj.dt,
                traj.t0 + step as f64 * traj.dt,
                processed_layout.clone(),
            )
            .map_err(core_err)?;
            let path = paths.state_slice_csv(method, step);
            export_csv(&slice, &path).map_err(core_err)?;
            manifest.record(&path);
        }
    }

    textio::write_csv(
        &paths.errors_csv(),
        "condition,r_f,method,qoi,epsilon_rel",
        &error_rows,
    )
    .map_err(core_err)?;
    manifest.record(&paths.errors_csv());
    Ok(())
}

/// Median and interpercentile step time of repeated right-hand-side
/// evaluations, single-threaded.
fn time_rhs(ops: &OperatorSet, states: &[DVector<f64>], reps: usize, inner: usize) -> (f64, f64, f64) {
    let mut ws = RhsWorkspace::for_ops(ops);
    let mut out = DVector::zeros(ops.dim());
    // Warm-up pass so page faults and lazy allocation stay out of the data.
    for q in states {
        rom_rhs_into(ops, q, &mut ws, &mut out);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for i in 0..inner {
            rom_rhs_into(ops, &states[i % states.len()], &mut ws, &mut out);
        }
        times.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (times[reps / 2], times[reps / 4], times[3 * reps / 4])
}

pub fn stage_compare(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.snapshots(), "simulate")?;
    require(&paths.preprocessor(), "preprocess")?;
    require(&paths.operators(TrainMethod::Block), "train or search")?;
    require(&paths.operators(TrainMethod::Monolithic), "train or search")?;
    let raw = read_snapshots(&paths.snapshots()).map_err(core_err)?;
    let processed = read_snapshots(&paths.preprocessed()).map_err(core_err)?;
    let pre = Preprocessor::read(&paths.preprocessor()).map_err(core_err)?;
    let bases = load_bases(&paths)?;
    let mask = cfg.train.mask.mask();
    let r_s = bases.basis.r_s();
    let r_f = bases.basis.r_f();

    let q0_physical = predict_initial_state(cfg, &processed.layout)?;
    let q0_hat = bases
        .basis
        .project_state(&pre.apply_state(&q0_physical).map_err(core_err)?)
        .map_err(core_err)?;

    let mut rows = Vec::new();
    for method in [TrainMethod::Block, TrainMethod::Monolithic] {
        let ops = read_operator_set(&paths.operators(method)).map_err(core_err)?;
        let count = match method {
            TrainMethod::Block => count_parameters(CountKind::Block, r_s, r_f, &mask),
            TrainMethod::Monolithic => count_parameters(CountKind::Monolithic, r_s, r_f, &mask),
        };
        let traj = integrate_rom(&ops, &q0_hat, processed.dt, cfg.predict.horizon_steps + 1, (r_s, r_f))
            .map_err(core_err)?;
        if traj.blow_up.is_some() {
            return Err(CliError::Runtime(format!(
                "{} prediction blew up during comparison",
                method_name(method)
            )));
        }
        let window = evaluate_window(cfg, traj.len().min(raw.len()))?;

        // Timing states sampled from the trajectory itself.
        let sample_count = 64.min(traj.len());
        let states: Vec<DVector<f64>> = (0..sample_count)
            .map(|i| {
                let c = i * (traj.len() - 1) / sample_count.max(1);
                DVector::from_column_slice(traj.states.column(c).as_slice())
            })
            .collect();
        let (median, p25, p75) = time_rhs(&ops, &states, 50, 2000);

        for name in &cfg.evaluate.qois {
            let truth = truth_series(name, &raw)?;
            let pullback = build_pullback(name, &bases, &pre, &processed.layout)?;
            let series = extract_qoi(&traj, &pullback).map_err(core_err)?;
            let eps = relative_rmse(&truth.values, &series.values, window.clone()).map_err(core_err)?;
            rows.push(format!(
                "{},{},{},{},{},{},{}",
                name,
                method_name(method),
                textio::float_field(eps),
                count,
                textio::float_field(median),
                textio::float_field(p25),
                textio::float_field(p75),
            ));
        }
        println!(
            "compare: {} parameters = {count}, step time median = {:.3e} s",
            method_name(method),
            median
        );
    }

    textio::write_csv(
        &paths.compare_csv(),
        "qoi,method,epsilon_rel,param_count,step_seconds_median,step_seconds_p25,step_seconds_p75",
        &rows,
    )
    .map_err(core_err)?;
    manifest.record(&paths.compare_csv());
    Ok(())
}

pub fn stage_count(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("creating output directory: {e}")))?;
    let paths = Paths::new(&cfg.out_dir);
    let mask = cfg.train.mask.mask();

    // Prefer dimensions from fitted bases; fall back to the configuration.
    let (r_s, r_f) = if paths.basis_structural().exists() && paths.basis_fluid().exists() {
        let b = load_bases(&paths)?;
        (b.basis.r_s(), b.basis.r_f())
    } else {
        let r_s = cfg.pod.r_s.unwrap_or(2 * cfg.fom.m);
        let r_f = cfg.pod.r_f.ok_or_else(|| {
            CliError::Config("count needs [pod] r_f (or fitted bases on disk)".into())
        })?;
        (r_s, r_f)
    };

    let mono = count_parameters(CountKind::Monolithic, r_s, r_f, &mask);
    let block = count_parameters(CountKind::Block, r_s, r_f, &mask);
    println!("count: r_s = {r_s}, r_f = {r_f}");
    println!("  monolithic entries: {mono}");
    println!("  block entries:      {block}");
    textio::write_csv(
        &paths.counts_csv(),
        "kind,r_s,r_f,count",
        &[
            format!("monolithic,{r_s},{r_f},{mono}"),
            format!("block,{r_s},{r_f},{block}"),
        ],
    )
    .map_err(core_err)?;
    manifest.record(&paths.counts_csv());
    Ok(())
}

pub fn stage_flutter(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("creating output directory: {e}")))?;
    let paths = Paths::new(&cfg.out_dir);
    let consts = &cfg.flutter.constants;

    let conditions: Vec<(f64, f64, f64)> = match &cfg.flutter.conditions {
        Some(list) => list.clone(),
        None => flutter::REFERENCE_CONDITIONS
            .iter()
            .map(|row| (row.mach, row.q_inf, row.density()))
            .collect(),
    };

    println!(
        "{:>6} {:>8} {:>12} {:>10} {:>12} {:>10}",
        "M", "q", "u_inf", "T", "Re", "dt_nd"
    );
    let mut rows = Vec::new();
    for (mach, q_inf, rho) in conditions {
        let fc = flutter::compute_flow_condition(mach, q_inf, rho, consts).map_err(core_err)?;
        println!(
            "{:>6.3} {:>8.1} {:>12.2} {:>10.2} {:>12.4e} {:>10.5}",
            fc.mach, fc.q_inf, fc.u_inf, fc.temperature, fc.reynolds, fc.dt_nondim
        );
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{}",
            textio::float_field(fc.mach),
            textio::float_field(fc.q_inf),
            textio::float_field(fc.rho),
            textio::float_field(fc.u_inf),
            textio::float_field(fc.temperature),
            textio::float_field(fc.viscosity),
            textio::float_field(fc.reynolds),
            textio::float_field(fc.reynolds_per_length),
            textio::float_field(fc.dt_dim),
            textio::float_field(fc.dt_nondim),
        ));
    }
    println!("\nsolver input parameter names:");
    for (symbol, name) in flutter::SOLVER_PARAMETER_NAMES {
        println!("  {symbol:>10} -> {name}");
    }

    textio::write_csv(
        &paths.flutter_csv(),
        "mach,q_inf,rho,u_inf,temperature,viscosity,reynolds,reynolds_per_length,dt_dim,dt_nondim",
        &rows,
    )
    .map_err(core_err)?;
    manifest.record(&paths.flutter_csv());
    Ok(())
}

/// Run the requested stages in dependency order and write the manifest.
pub fn run_pipeline(cfg: &PipelineConfig, stages: &[String]) -> Result<(), CliError> {
    for stage in stages {
        if !STAGE_ORDER.contains(&stage.as_str()) {
            return Err(CliError::Config(format!(
                "unknown stage '{stage}' (expected one of {})",
                STAGE_ORDER.join(", ")
            )));
        }
    }
    let mut manifest = Manifest::new();
    for stage in STAGE_ORDER {
        if !stages.iter().any(|s| s == stage) {
            continue;
        }
        run_stage(stage, cfg, &mut manifest)?;
    }
    if !manifest.is_empty() {
        manifest.write(&cfg.out_dir)?;
    }
    Ok(())
}

pub fn run_stage(stage: &str, cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    match stage {
        "simulate" => stage_simulate(cfg, manifest),
        "preprocess" => stage_preprocess(cfg, manifest),
        "pod" => stage_pod(cfg, manifest),
        "train" => stage_train(cfg, manifest),
        "search" => stage_search(cfg, manifest),
        "predict" => stage_predict(cfg, manifest),
        "evaluate" => stage_evaluate(cfg, manifest),
        "compare" => stage_compare(cfg, manifest),
        "count" => stage_count(cfg, manifest),
        "flutter" => stage_flutter(cfg, manifest),
        other => Err(CliError::Config(format!("unknown stage '{other}'"))),
    }
}
