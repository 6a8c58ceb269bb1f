//! Sectioned key-value configuration with strict unknown-key rejection.
//!
//! Format: `key = value` lines grouped under `[section]` headers; lines
//! starting with `#` or `;` are comments. Keys before the first section
//! header are global. Every section and key must be known, so typos fail
//! loudly instead of silently using a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftMode {
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethodCfg {
    Block,
    Monolithic,
    Both,
}

impl TrainMethodCfg {
    pub fn methods(&self) -> Vec<blockrom::regsearch::TrainMethod> {
        use blockrom::regsearch::TrainMethod;
        match self {
            TrainMethodCfg::Block => vec![TrainMethod::Block],
            TrainMethodCfg::Monolithic => vec![TrainMethod::Monolithic],
            TrainMethodCfg::Both => vec![TrainMethod::Block, TrainMethod::Monolithic],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskCfg {
    Aeroelastic,
    AllLearn,
}

impl MaskCfg {
    pub fn mask(&self) -> blockrom::inference::StructureMask {
        match self {
            MaskCfg::Aeroelastic => blockrom::inference::StructureMask::aeroelastic(),
            MaskCfg::AllLearn => blockrom::inference::StructureMask::all_learn(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    FiniteDifference,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructuralBasisCfg {
    Identity,
    Pod,
}

#[derive(Debug, Clone)]
pub struct FomSection {
    pub m: usize,
    pub n_f: usize,
    pub nu: f64,
    pub kappa_f: f64,
    pub kappa_s: f64,
    pub dt: f64,
    pub steps: usize,
    pub seed: Option<u64>,
    pub gvel_perturbation: f64,
    pub gdisp_perturbation: f64,
    pub frequencies_hz: Vec<f64>,
    pub damping: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PreprocessSection {
    pub lift: LiftMode,
    pub per_row: bool,
    pub constant_tolerant: bool,
    /// Group names to shift and scale, with their target ranges.
    pub groups: Vec<(String, (f64, f64))>,
}

#[derive(Debug, Clone)]
pub struct PodSection {
    pub structural_basis: StructuralBasisCfg,
    pub r_s: Option<usize>,
    pub r_f: Option<usize>,
    pub energy_s: f64,
    pub energy_f: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub method: TrainMethodCfg,
    pub mask: MaskCfg,
    pub k_train: usize,
    pub derivative: DerivativeMode,
    pub strict: bool,
    pub gamma_s_linear: f64,
    pub gamma_f_linear: f64,
    pub gamma_f_quadratic: f64,
    pub gamma_c: f64,
    pub gamma_a: f64,
    pub gamma_h: f64,
}

#[derive(Debug, Clone)]
pub struct RegsearchSection {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub log_spacing: bool,
    pub alpha: f64,
    pub refinements: usize,
    pub qois: Vec<String>,
    pub state_objective: bool,
    pub budget_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictSection {
    pub horizon_steps: usize,
    pub gvel_perturbation: f64,
    pub gdisp_perturbation: f64,
}

#[derive(Debug, Clone)]
pub enum EvaluateWindow {
    Prediction,
    Full,
    Explicit(usize, usize),
}

#[derive(Debug, Clone)]
pub struct EvaluateSection {
    pub qois: Vec<String>,
    pub window: EvaluateWindow,
    pub condition_id: String,
    pub export_state_steps: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FlutterSection {
    pub constants: blockrom::flutter::FlutterConstants,
    /// Optional explicit conditions; defaults to the built-in reference set.
    pub conditions: Option<Vec<(f64, f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub fom: FomSection,
    pub preprocess: PreprocessSection,
    pub pod: PodSection,
    pub train: TrainSection,
    pub regsearch: RegsearchSection,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
    pub flutter: FlutterSection,
}

struct Section {
    name: String,
    entries: BTreeMap<String, (String, bool)>, // value, consumed
}

impl Section {
    fn take(&mut self, key: &str) -> Option<String> {
        if let Some((value, consumed)) = self.entries.get_mut(key) {
            *consumed = true;
            Some(value.clone())
        } else {
            None
        }
    }

    fn unconsumed(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, (_, consumed))| !consumed)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

fn parse_sections(text: &str) -> Result<Vec<Section>, CliError> {
    let mut sections = vec![Section { name: String::new(), entries: BTreeMap::new() }];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') {
            let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
                return Err(CliError::Config(format!(
                    "line {}: malformed section header '{line}'",
                    lineno + 1
                )));
            };
            sections.push(Section { name: name.trim().to_string(), entries: BTreeMap::new() });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let section = sections.last_mut().expect("at least the global section");
        if section.entries.insert(key.clone(), (value, false)).is_some() {
            return Err(CliError::Config(format!(
                "line {}: duplicate key '{key}' in section '[{}]'",
                lineno + 1,
                section.name
            )));
        }
    }
    Ok(sections)
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| {
        CliError::Config(format!(
            "section [{section}]: key '{key}' has unparsable value '{value}'"
        ))
    })
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>, CliError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse::<T>(section, key, part.trim()))
        .collect()
}

macro_rules! take_or {
    ($sec:expr, $name:expr, $key:expr, $default:expr) => {
        match $sec.take($key) {
            Some(v) => parse($name, $key, &v)?,
            None => $default,
        }
    };
}

macro_rules! take_opt {
    ($sec:expr, $name:expr, $key:expr) => {
        match $sec.take($key) {
            Some(v) => Some(parse($name, $key, &v)?),
            None => None,
        }
    };
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(CliError::Config(format!(
            "section [{section}]: key '{key}' expects a boolean, got '{other}'"
        ))),
    }
}

fn parse_range(section: &str, key: &str, value: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(CliError::Config(format!(
            "section [{section}]: key '{key}' expects 'lo,hi', got '{value}'"
        )));
    }
    Ok((parse(section, key, parts[0])?, parse(section, key, parts[1])?))
}

/// Parse and validate a configuration file.
pub fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let sections = parse_sections(&text)?;

    let known = [
        "", "fom", "preprocess", "pod", "train", "regsearch", "predict", "evaluate", "flutter",
    ];
    for section in &sections {
        if !known.contains(&section.name.as_str()) {
            return Err(CliError::Config(format!("unknown section '[{}]'", section.name)));
        }
    }
    let grab = |name: &str| -> Section {
        sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| Section { name: s.name.clone(), entries: s.entries.clone() })
            .unwrap_or(Section { name: name.to_string(), entries: BTreeMap::new() })
    };

    let mut global = grab("");
    let seed: u64 = take_or!(global, "", "seed", 42);
    let out_dir: String = match global.take("out_dir") {
        Some(v) => v,
        None => "out".to_string(),
    };

    let mut fom = grab("fom");
    let fom_section = FomSection {
        m: take_or!(fom, "fom", "m", 4),
        n_f: take_or!(fom, "fom", "n_f", 64),
        nu: take_or!(fom, "fom", "nu", 0.05),
        kappa_f: take_or!(fom, "fom", "kappa_f", 0.1),
        kappa_s: take_or!(fom, "fom", "kappa_s", 0.1),
        dt: take_or!(fom, "fom", "dt", 2.452182442373713e-4),
        steps: take_or!(fom, "fom", "steps", 1000),
        seed: take_opt!(fom, "fom", "seed"),
        gvel_perturbation: take_or!(fom, "fom", "gvel_perturbation", 0.1),
        gdisp_perturbation: take_or!(fom, "fom", "gdisp_perturbation", 0.0),
        frequencies_hz: match fom.take("frequencies_hz") {
            Some(v) => parse_list("fom", "frequencies_hz", &v)?,
            None => blockrom::fom::DEFAULT_MODE_FREQUENCIES_HZ.to_vec(),
        },
        damping: match fom.take("damping") {
            Some(v) => Some(parse_list("fom", "damping", &v)?),
            None => None,
        },
    };
    if fom_section.frequencies_hz.len() != fom_section.m {
        return Err(CliError::Config(format!(
            "section [fom]: {} frequencies for m = {} modes",
            fom_section.frequencies_hz.len(),
            fom_section.m
        )));
    }

    let mut pre = grab("preprocess");
    let lift = match pre.take("lift") {
        None => LiftMode::Auto,
        Some(v) => match v.as_str() {
            "auto" => LiftMode::Auto,
            "on" => LiftMode::On,
            "off" => LiftMode::Off,
            other => {
                return Err(CliError::Config(format!(
                    "section [preprocess]: lift must be auto|on|off, got '{other}'"
                )))
            }
        },
    };
    let per_row = match pre.take("mode") {
        None => false,
        Some(v) => match v.as_str() {
            "per_group" => false,
            "per_row" => true,
            other => {
                return Err(CliError::Config(format!(
                    "section [preprocess]: mode must be per_group|per_row, got '{other}'"
                )))
            }
        },
    };
    let constant_tolerant = match pre.take("constant_tolerant") {
        None => false,
        Some(v) => parse_bool("preprocess", "constant_tolerant", &v)?,
    };
    let group_names: Vec<String> = match pre.take("groups") {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => vec!["fluid".to_string()],
    };
    let mut groups = Vec::new();
    for name in &group_names {
        let default = if name == "specific-volume" { (0.0, 1.0) } else { (-1.0, 1.0) };
        let range = match pre.take(&format!("range_{name}")) {
            Some(v) => parse_range("preprocess", &format!("range_{name}"), &v)?,
            None => default,
        };
        groups.push((name.clone(), range));
    }
    let preprocess = PreprocessSection { lift, per_row, constant_tolerant, groups };

    let mut pod = grab("pod");
    let structural_basis = match pod.take("structural_basis") {
        None => StructuralBasisCfg::Identity,
        Some(v) => match v.as_str() {
            "identity" => StructuralBasisCfg::Identity,
            "pod" => StructuralBasisCfg::Pod,
            other => {
                return Err(CliError::Config(format!(
                    "section [pod]: structural_basis must be identity|pod, got '{other}'"
                )))
            }
        },
    };
    let pod_section = PodSection {
        structural_basis,
        r_s: take_opt!(pod, "pod", "r_s"),
        r_f: take_opt!(pod, "pod", "r_f"),
        energy_s: take_or!(pod, "pod", "energy_s", 0.9999),
        energy_f: take_or!(pod, "pod", "energy_f", 0.9999),
    };

    let mut train = grab("train");
    let method = match train.take("method") {
        None => TrainMethodCfg::Both,
        Some(v) => match v.as_str() {
            "block" => TrainMethodCfg::Block,
            "monolithic" => TrainMethodCfg::Monolithic,
            "both" => TrainMethodCfg::Both,
            other => {
                return Err(CliError::Config(format!(
                    "section [train]: method must be block|monolithic|both, got '{other}'"
                )))
            }
        },
    };
    let mask = match train.take("mask") {
        None => MaskCfg::Aeroelastic,
        Some(v) => match v.as_str() {
            "aeroelastic" => MaskCfg::Aeroelastic,
            "all-learn" | "all_learn" => MaskCfg::AllLearn,
            other => {
                return Err(CliError::Config(format!(
                    "section [train]: mask must be aeroelastic|all-learn, got '{other}'"
                )))
            }
        },
    };
    let derivative = match train.take("derivative") {
        None => DerivativeMode::FiniteDifference,
        Some(v) => match v.as_str() {
            "fd" => DerivativeMode::FiniteDifference,
            "exact" => DerivativeMode::Exact,
            other => {
                return Err(CliError::Config(format!(
                    "section [train]: derivative must be fd|exact, got '{other}'"
                )))
            }
        },
    };
    let strict = match train.take("strict") {
        None => false,
        Some(v) => parse_bool("train", "strict", &v)?,
    };
    let train_section = TrainSection {
        method,
        mask,
        k_train: take_or!(train, "train", "k_train", 300),
        derivative,
        strict,
        gamma_s_linear: take_or!(train, "train", "gamma_s_linear", 0.0),
        gamma_f_linear: take_or!(train, "train", "gamma_f_linear", 0.0),
        gamma_f_quadratic: take_or!(train, "train", "gamma_f_quadratic", 0.0),
        gamma_c: take_or!(train, "train", "gamma_c", 0.0),
        gamma_a: take_or!(train, "train", "gamma_a", 0.0),
        gamma_h: take_or!(train, "train", "gamma_h", 0.0),
    };

    let mut rs = grab("regsearch");
    let spacing_log = match rs.take("spacing") {
        None => true,
        Some(v) => match v.as_str() {
            "log" => true,
            "linear" => false,
            other => {
                return Err(CliError::Config(format!(
                    "section [regsearch]: spacing must be log|linear, got '{other}'"
                )))
            }
        },
    };
    let state_objective = match rs.take("objective") {
        None => false,
        Some(v) => match v.as_str() {
            "qois" => false,
            "state" => true,
            other => {
                return Err(CliError::Config(format!(
                    "section [regsearch]: objective must be qois|state, got '{other}'"
                )))
            }
        },
    };
    let regsearch_section = RegsearchSection {
        lo: take_or!(rs, "regsearch", "lo", 1e-6),
        hi: take_or!(rs, "regsearch", "hi", 1e4),
        points: take_or!(rs, "regsearch", "points", 6),
        log_spacing: spacing_log,
        alpha: take_or!(rs, "regsearch", "alpha", 10.0),
        refinements: take_or!(rs, "regsearch", "refinements", 1),
        qois: match rs.take("qois") {
            Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            None => vec!["lift".into(), "gdisp_1".into(), "gdisp_2".into()],
        },
        state_objective,
        budget_seconds: take_opt!(rs, "regsearch", "budget_seconds"),
    };

    let mut predict = grab("predict");
    let predict_section = PredictSection {
        horizon_steps: take_or!(predict, "predict", "horizon_steps", 1000),
        gvel_perturbation: take_or!(predict, "predict", "gvel_perturbation", 0.1),
        gdisp_perturbation: take_or!(predict, "predict", "gdisp_perturbation", 0.0),
    };

    let mut eval = grab("evaluate");
    let window = match eval.take("window") {
        None => EvaluateWindow::Prediction,
        Some(v) => match v.as_str() {
            "prediction" => EvaluateWindow::Prediction,
            "full" => EvaluateWindow::Full,
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                if parts.len() != 2 {
                    return Err(CliError::Config(format!(
                        "section [evaluate]: window must be prediction|full|start:end, got '{other}'"
                    )));
                }
                EvaluateWindow::Explicit(
                    parse("evaluate", "window", parts[0])?,
                    parse("evaluate", "window", parts[1])?,
                )
            }
        },
    };
    let evaluate_section = EvaluateSection {
        qois: match eval.take("qois") {
            Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            None => vec!["lift".into(), "gdisp_1".into(), "gdisp_2".into()],
        },
        window,
        condition_id: eval.take("condition_id").unwrap_or_else(|| "synthetic".to_string()),
        export_state_steps: match eval.take("export_state_steps") {
            Some(v) => parse_list("evaluate", "export_state_steps", &v)?,
            None => Vec::new(),
        },
    };

    let mut flut = grab("flutter");
    let defaults = blockrom::flutter::FlutterConstants::default();
    let constants = blockrom::flutter::FlutterConstants {
        length: take_or!(flut, "flutter", "L", defaults.length),
        length_nondim: take_or!(flut, "flutter", "L_nondim", defaults.length_nondim),
        f_char: take_or!(flut, "flutter", "f_char", defaults.f_char),
        steps_per_period: take_or!(flut, "flutter", "N", defaults.steps_per_period),
        gamma: take_or!(flut, "flutter", "gamma", defaults.gamma),
        gas_constant: take_or!(flut, "flutter", "R", defaults.gas_constant),
        sutherland_c: take_or!(flut, "flutter", "C", defaults.sutherland_c),
        t_ref: take_or!(flut, "flutter", "T_ref", defaults.t_ref),
        mu_ref: take_or!(flut, "flutter", "mu_ref", defaults.mu_ref),
    };
    let mach: Vec<f64> = match flut.take("mach") {
        Some(v) => parse_list("flutter", "mach", &v)?,
        None => Vec::new(),
    };
    let q_inf: Vec<f64> = match flut.take("q") {
        Some(v) => parse_list("flutter", "q", &v)?,
        None => Vec::new(),
    };
    let rho: Vec<f64> = match flut.take("rho") {
        Some(v) => parse_list("flutter", "rho", &v)?,
        None => Vec::new(),
    };
    let conditions = if mach.is_empty() && q_inf.is_empty() && rho.is_empty() {
        None
    } else {
        if mach.len() != q_inf.len() || mach.len() != rho.len() {
            return Err(CliError::Config(
                "section [flutter]: mach, q, and rho lists must have equal lengths".into(),
            ));
        }
        Some(
            mach.into_iter()
                .zip(q_inf)
                .zip(rho)
                .map(|((m, q), r)| (m, q, r))
                .collect(),
        )
    };
    let flutter_section = FlutterSection { constants, conditions };

    // Every key must have been consumed by now.
    let consumed_sections = [
        (&global, ""),
        (&fom, "fom"),
        (&pre, "preprocess"),
        (&pod, "pod"),
        (&train, "train"),
        (&rs, "regsearch"),
        (&predict, "predict"),
        (&eval, "evaluate"),
        (&flut, "flutter"),
    ];
    for (section, name) in consumed_sections {
        let stray = section.unconsumed();
        if let Some(key) = stray.first() {
            let place = if name.is_empty() { "global section".to_string() } else { format!("section [{name}]") };
            return Err(CliError::Config(format!("unknown key '{key}' in {place}")));
        }
    }

    Ok(PipelineConfig {
        seed,
        out_dir: PathBuf::from(out_dir),
        fom: fom_section,
        preprocess,
        pod: pod_section,
        train: train_section,
        regsearch: regsearch_section,
        predict: predict_section,
        evaluate: evaluate_section,
        flutter: flutter_section,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(text: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("blockrom_cli_config_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("{:016x}.cfg", manifest_hash(text)));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    fn manifest_hash(s: &str) -> u64 {
        crate::manifest::fnv1a64(s.as_bytes())
    }

    #[test]
    fn empty_config_uses_defaults() {
        let path = write_cfg("");
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.fom.m, 4);
        assert_eq!(cfg.fom.n_f, 64);
        assert_eq!(cfg.train.k_train, 300);
        assert_eq!(cfg.predict.horizon_steps, 1000);
        assert_eq!(cfg.preprocess.groups, vec![("fluid".to_string(), (-1.0, 1.0))]);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let path = write_cfg("[fom]\nm = 4\nmisspelled_key = 3\n");
        let err = load_config(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("misspelled_key"), "{msg}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        let path = write_cfg("[nonsense]\nx = 1\n");
        let err = load_config(&path).unwrap_err();
        assert!(format!("{err}").contains("nonsense"));
    }

    #[test]
    fn values_parse_and_override() {
        let path = write_cfg(
            "seed = 7\nout_dir = artifacts\n\n[fom]\nm = 2\nfrequencies_hz = 1.5, 3.0\nn_f = 16\n\n[train]\nmethod = block\nmask = all-learn\n\n[regsearch]\npoints = 3\nspacing = linear\n",
        );
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("artifacts"));
        assert_eq!(cfg.fom.m, 2);
        assert_eq!(cfg.fom.frequencies_hz, vec![1.5, 3.0]);
        assert_eq!(cfg.train.method, TrainMethodCfg::Block);
        assert_eq!(cfg.train.mask, MaskCfg::AllLearn);
        assert_eq!(cfg.regsearch.points, 3);
        assert!(!cfg.regsearch.log_spacing);
    }

    #[test]
    fn frequency_count_must_match_mode_count() {
        let path = write_cfg("[fom]\nm = 3\nfrequencies_hz = 1.0, 2.0\n");
        assert!(load_config(&path).is_err());
    }
}
