//! The experiment document: system matrices, noise schedule and run
//! parameters in one JSON object. Matrices are row-major nested lists.

use std::path::{Path, PathBuf};

use kfpo::{Mat, ModelSpec, NoiseSpec, Vector};
use serde::Deserialize;

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "KFPO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "kfpo-out";
pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_SAMPLES: usize = 200;
pub const DEFAULT_DUAL_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Validate,
    Simulate,
    Riccati,
    CheckGradient,
    Constants,
    OracleCompare,
    Gd,
    Sgd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Validate => "validate",
            Mode::Simulate => "simulate",
            Mode::Riccati => "riccati",
            Mode::CheckGradient => "check-gradient",
            Mode::Constants => "constants",
            Mode::OracleCompare => "oracle-compare",
            Mode::Gd => "gd",
            Mode::Sgd => "sgd",
        }
    }
}

/// A single matrix, or one matrix per time step.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MatrixSchedule {
    Single(Vec<Vec<f64>>),
    PerStep(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "M")]
    pub horizon: usize,
    #[serde(rename = "Q")]
    pub q: MatrixSchedule,
    #[serde(rename = "R")]
    pub r: MatrixSchedule,
    /// Defaults to zero.
    #[serde(rename = "P0", default)]
    pub p0: Option<Vec<Vec<f64>>>,
    /// Defaults to zero.
    #[serde(default)]
    pub x0_mean: Option<Vec<f64>>,
    /// Linear drift `Q_t = Q + t·dQ`; needs a single `Q`.
    #[serde(rename = "dQ", default)]
    pub dq: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub resample_each_iter: Option<bool>,
    #[serde(default)]
    pub timing: Option<bool>,
    #[serde(default)]
    pub dual_samples: Option<usize>,
}

/// Parse a document, reporting the JSON path of the first bad field.
pub fn parse_document(text: &str, origin: &str) -> Result<ConfigDocument, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        CliError::Config(format!("{origin}: at `{path}`: {}", err.into_inner()))
    })
}

pub fn read_document(path: &Path) -> Result<ConfigDocument, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_document(&text, &path.display().to_string())
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<Mat, CliError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(CliError::Config(format!("`{field}` must be a non-empty matrix")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(CliError::Config(format!(
            "`{field}` row {i} has {} entries, expected {ncols}",
            rows[i].len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("`{field}` has non-finite entries")));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn schedule(s: &MatrixSchedule, field: &str, len: usize) -> Result<Vec<Mat>, CliError> {
    match s {
        MatrixSchedule::Single(m) => Ok(vec![matrix(m, field)?; len]),
        MatrixSchedule::PerStep(ms) => ms
            .iter()
            .enumerate()
            .map(|(t, m)| matrix(m, &format!("{field}[{t}]")))
            .collect(),
    }
}

fn core_error(e: kfpo::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl ConfigDocument {
    pub fn build_system(&self) -> Result<(ModelSpec, NoiseSpec), CliError> {
        let a = matrix(&self.a, "A")?;
        let c = matrix(&self.c, "C")?;
        let model = ModelSpec::new(a, c, self.horizon).map_err(core_error)?;
        let n = model.state_dim();
        let len = model.trajectory_len();
        let p0 = match &self.p0 {
            Some(p) => matrix(p, "P0")?,
            None => Mat::zeros(n, n),
        };
        let x0 = match &self.x0_mean {
            Some(x) => Vector::from_column_slice(x),
            None => Vector::zeros(n),
        };
        let r = schedule(&self.r, "R", len)?;
        let q = match (&self.dq, &self.q) {
            (Some(dq), MatrixSchedule::Single(q)) => {
                let base = matrix(q, "Q")?;
                let dq = matrix(dq, "dQ")?;
                if dq.shape() != base.shape() {
                    return Err(CliError::Config(format!(
                        "`dQ` is {}×{}, expected {}×{}",
                        dq.nrows(),
                        dq.ncols(),
                        base.nrows(),
                        base.ncols()
                    )));
                }
                (0..len).map(|t| &base + &dq * t as f64).collect()
            }
            (Some(_), MatrixSchedule::PerStep(_)) => {
                return Err(CliError::Config("`dQ` needs a single `Q` matrix, not a list".into()));
            }
            (None, q) => schedule(q, "Q", len)?,
        };
        let noise = NoiseSpec::new(&model, q, r, p0, x0).map_err(core_error)?;
        Ok((model, noise))
    }
}

/// Command-line values that take precedence over the document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub eta: Option<f64>,
    pub iters: Option<usize>,
    pub samples: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub resample_each_iter: bool,
    pub timing: bool,
    pub dual_samples: Option<usize>,
}

/// A fully resolved run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub noise: NoiseSpec,
    pub mode: Mode,
    /// `None` in `gd` mode selects the step from the bound constants.
    pub eta: Option<f64>,
    pub iterations: usize,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub resample_each_iter: bool,
    pub timing: bool,
    pub dual_samples: usize,
}

impl ExperimentConfig {
    pub fn resolve(name: &str, doc: &ConfigDocument, over: &Overrides) -> Result<Self, CliError> {
        let (model, noise) = doc.build_system()?;
        let mode = over
            .mode
            .or(doc.mode)
            .ok_or_else(|| CliError::Config("no mode given (set `mode` or use a subcommand)".into()))?;
        let eta = over.eta.or(doc.eta);
        if let Some(eta) = eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(CliError::Config(format!("`eta` must be positive, got {eta}")));
            }
        }
        let seeds = over
            .seeds
            .clone()
            .or_else(|| doc.seeds.clone())
            .unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(CliError::Config("`seeds` must not be empty".into()));
        }
        let iterations = over.iters.or(doc.iters).unwrap_or(DEFAULT_ITERATIONS);
        let samples = over.samples.or(doc.samples).unwrap_or(DEFAULT_SAMPLES);
        if samples == 0 {
            return Err(CliError::Config("`samples` must be at least 1".into()));
        }
        let dual_samples = over.dual_samples.or(doc.dual_samples).unwrap_or(DEFAULT_DUAL_SAMPLES);
        let out_dir = match over.out.clone().or_else(|| doc.out.clone()) {
            Some(dir) => dir,
            None => {
                let root = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from);
                root.join(name)
            }
        };
        Ok(Self {
            name: name.to_string(),
            model,
            noise,
            mode,
            eta,
            iterations,
            samples,
            seeds,
            out_dir,
            resample_each_iter: over.resample_each_iter || doc.resample_each_iter.unwrap_or(false),
            timing: over.timing || doc.timing.unwrap_or(false),
            dual_samples,
        })
    }
}
