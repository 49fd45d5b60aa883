//! File formats for the batch CLI: long-format CSV datasets, TOML run
//! configuration, JSON estimates, and the newline-delimited iteration trace.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{ModelKind, Outcome};
use crate::em::{ChoiceObservation, EmConfig, EmTrace, EpFailurePolicy, ProbitModel};
use crate::ep::EpConfig;
use crate::error::{Error, Result};
use crate::simulate::{SigmaKind, SimSpec};

/// A dataset in memory plus the inferred covariate count.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub observations: Vec<ChoiceObservation>,
    pub n_covariates: usize,
}

/// Reads a long-format CSV: one row per observation-alternative with columns
/// `obs_id, alt_id, chosen, cov_1..cov_p`. `alt_id` is the 1-based position;
/// rows must be contiguous from 1 within each `obs_id`, so a shorter block
/// encodes a smaller choice set.
pub fn read_dataset(path: &Path, kind: &ModelKind) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 4 {
        return Err(Error::Dataset(format!(
            "{}: need at least obs_id, alt_id, chosen, cov_1 columns",
            path.display()
        )));
    }
    for (idx, want) in ["obs_id", "alt_id", "chosen"].iter().enumerate() {
        if headers.get(idx) != Some(want) {
            return Err(Error::Dataset(format!(
                "{}: column {} must be named {want}, found {:?}",
                path.display(),
                idx + 1,
                headers.get(idx).unwrap_or("")
            )));
        }
    }
    let p = headers.len() - 3;
    for j in 0..p {
        let want = format!("cov_{}", j + 1);
        if headers.get(3 + j) != Some(want.as_str()) {
            return Err(Error::Dataset(format!(
                "{}: covariate column {} must be named {want}",
                path.display(),
                j + 4
            )));
        }
    }

    struct Block {
        rows: Vec<Vec<f64>>,
        chosen: Vec<bool>,
    }
    let mut blocks: Vec<(String, Block)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = line + 2; // header is line 1
        let fail = |msg: String| Error::Dataset(format!("{}:{row_no}: {msg}", path.display()));
        let obs_id = record
            .get(0)
            .ok_or_else(|| fail("missing obs_id".into()))?
            .to_string();
        let alt_id: usize = record
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail("alt_id must be a positive integer".into()))?;
        let chosen_raw = record.get(2).unwrap_or("");
        let chosen = match chosen_raw {
            "0" => false,
            "1" => true,
            other => return Err(fail(format!("chosen must be 0 or 1, found {other:?}"))),
        };
        let mut covs = Vec::with_capacity(p);
        for j in 0..p {
            let v: f64 = record
                .get(3 + j)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| fail(format!("cov_{} is not a number", j + 1)))?;
            covs.push(v);
        }
        let is_new = blocks.last().map(|(id, _)| id != &obs_id).unwrap_or(true);
        if is_new {
            if blocks.iter().any(|(id, _)| id == &obs_id) {
                return Err(fail(format!("rows for obs_id {obs_id:?} are not contiguous")));
            }
            blocks.push((
                obs_id,
                Block {
                    rows: Vec::new(),
                    chosen: Vec::new(),
                },
            ));
        }
        let block = &mut blocks.last_mut().unwrap().1;
        if alt_id != block.rows.len() + 1 {
            return Err(fail(format!(
                "alt_id must be contiguous from 1 within an observation; expected {}, found {alt_id}",
                block.rows.len() + 1
            )));
        }
        block.rows.push(covs);
        block.chosen.push(chosen);
    }
    if blocks.is_empty() {
        return Err(Error::Dataset(format!("{}: no observations", path.display())));
    }

    let m_max = blocks.iter().map(|(_, b)| b.rows.len()).max().unwrap();
    let mut observations = Vec::with_capacity(blocks.len());
    for (obs_id, block) in blocks {
        let k = block.rows.len();
        let x = DMatrix::from_fn(k, p, |i, j| block.rows[i][j]);
        let n_chosen = block.chosen.iter().filter(|&&c| c).count();
        let outcome = match kind {
            ModelKind::Multivariate => Outcome::Binary(block.chosen.clone()),
            _ => {
                if n_chosen > 1 {
                    return Err(Error::Dataset(format!(
                        "observation {obs_id:?}: multinomial kinds allow at most one chosen row"
                    )));
                }
                match block.chosen.iter().position(|&c| c) {
                    Some(pos) => {
                        if let ModelKind::MultinomialReference { ref_index } = kind {
                            if pos == *ref_index {
                                Outcome::Chosen(0)
                            } else {
                                Outcome::Chosen(pos + 1)
                            }
                        } else {
                            Outcome::Chosen(pos + 1)
                        }
                    }
                    None => {
                        if matches!(kind, ModelKind::MultinomialReference { .. }) {
                            return Err(Error::Dataset(format!(
                                "observation {obs_id:?}: no chosen row; the reference kind has no outside option"
                            )));
                        }
                        Outcome::Chosen(0)
                    }
                }
            }
        };
        let positions = (k < m_max).then(|| (0..k).collect());
        observations.push(ChoiceObservation {
            x,
            outcome,
            positions,
        });
    }
    Ok(Dataset {
        observations,
        n_covariates: p,
    })
}

/// Writes a dataset in the long CSV format.
pub fn write_dataset(
    path: &Path,
    observations: &[ChoiceObservation],
    kind: &ModelKind,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = observations.first().map(|o| o.x.ncols()).unwrap_or(0);
    let mut header = vec!["obs_id".to_string(), "alt_id".into(), "chosen".into()];
    for j in 0..p {
        header.push(format!("cov_{}", j + 1));
    }
    w.write_record(&header)?;
    for (i, obs) in observations.iter().enumerate() {
        let k = obs.x.nrows();
        for row in 0..k {
            let chosen = match (&obs.outcome, kind) {
                (Outcome::Binary(y), _) => y[row],
                (Outcome::Chosen(0), ModelKind::MultinomialReference { ref_index }) => {
                    row == *ref_index
                }
                (Outcome::Chosen(c), _) => *c == row + 1,
            };
            let mut record = vec![
                format!("obs{i}"),
                (row + 1).to_string(),
                if chosen { "1".into() } else { "0".to_string() },
            ];
            for j in 0..p {
                record.push(format!("{:?}", obs.x[(row, j)]));
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Run configuration file; flags override these values, which override the
/// built-in defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub em: EmSection,
    pub ep: EpSection,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// "multivariate", "multinomial_outside", or "multinomial_reference".
    pub kind: String,
    pub ref_index: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: "multinomial_outside".into(),
            ref_index: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSection {
    pub trace_target: Option<f64>,
    pub tol_sigma: Option<f64>,
    pub max_iters: Option<usize>,
    pub subsample_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub ep_failure_policy: Option<EpFailurePolicy>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EpSection {
    pub tol: Option<f64>,
    pub max_sweeps: Option<usize>,
    pub damping: Option<f64>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        match self.model.kind.as_str() {
            "multivariate" => Ok(ModelKind::Multivariate),
            "multinomial_outside" => Ok(ModelKind::MultinomialOutside),
            "multinomial_reference" => Ok(ModelKind::MultinomialReference {
                ref_index: self.model.ref_index.ok_or_else(|| {
                    Error::InvalidSpec("multinomial_reference needs model.ref_index".into())
                })?,
            }),
            other => Err(Error::InvalidSpec(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn em_config(&self) -> EmConfig {
        let mut cfg = EmConfig::default();
        if let Some(v) = self.em.trace_target {
            cfg.trace_target = Some(v);
        }
        if let Some(v) = self.em.tol_sigma {
            cfg.tol_sigma = v;
        }
        if let Some(v) = self.em.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.em.subsample_fraction {
            cfg.subsample_fraction = v;
        }
        if let Some(v) = self.em.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.em.ep_failure_policy {
            cfg.ep_failure_policy = v;
        }
        let mut ep = EpConfig::default();
        if let Some(v) = self.ep.tol {
            ep.tol = v;
        }
        if let Some(v) = self.ep.max_sweeps {
            ep.max_sweeps = v;
        }
        if let Some(v) = self.ep.damping {
            ep.damping = v;
        }
        cfg.ep = ep;
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg
    }
}

/// Row-major matrix payload with an explicit dimension header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixPayload {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl MatrixPayload {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            dim: m.nrows(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.dim * self.dim {
            return Err(Error::InvalidSpec(format!(
                "matrix payload: {} entries for dim {}",
                self.data.len(),
                self.dim
            )));
        }
        Ok(DMatrix::from_row_slice(self.dim, self.dim, &self.data))
    }
}

/// Convergence block of the estimates file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceInfo {
    pub converged: bool,
    pub iterations: usize,
    pub final_max_sigma_change: Option<f64>,
}

/// The estimates document written by `fit` and read back by `predict`.
/// Floats serialize with shortest-roundtrip formatting, so the matrix
/// entries survive a write/read cycle bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatesFile {
    pub model_kind: ModelKind,
    pub dim: usize,
    pub n_covariates: usize,
    pub beta: Vec<f64>,
    pub sigma: MatrixPayload,
    pub omega: MatrixPayload,
    pub trace_target: f64,
    pub seed: u64,
    pub convergence: ConvergenceInfo,
}

impl EstimatesFile {
    pub fn from_model(model: &ProbitModel, trace: &EmTrace, cfg: &EmConfig) -> Self {
        let last_change = trace.iterations.last().map(|it| it.max_abs_sigma_change);
        Self {
            model_kind: model.kind,
            dim: model.dim(),
            n_covariates: model.n_covariates(),
            beta: model.beta.iter().copied().collect(),
            sigma: MatrixPayload::from_matrix(&model.sigma),
            omega: MatrixPayload::from_matrix(&model.omega),
            trace_target: cfg
                .trace_target
                .unwrap_or(model.dim() as f64),
            seed: cfg.seed,
            convergence: ConvergenceInfo {
                converged: trace.converged,
                iterations: trace.iterations.len(),
                final_max_sigma_change: last_change,
            },
        }
    }

    pub fn to_model(&self) -> Result<ProbitModel> {
        ProbitModel::new(
            DVector::from_row_slice(&self.beta),
            self.sigma.to_matrix()?,
            self.model_kind,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes the iteration trace as newline-delimited JSON records for external
/// plotting.
pub fn write_trace(path: &Path, trace: &EmTrace) -> Result<()> {
    #[derive(Serialize)]
    struct Record {
        iteration: usize,
        max_sigma_change: f64,
        lower_bound: f64,
        e_step_ms: f64,
        m_step_ms: f64,
        n_ep_nonconverged: usize,
    }
    let mut file = fs::File::create(path)?;
    for (i, it) in trace.iterations.iter().enumerate() {
        let line = serde_json::to_string(&Record {
            iteration: i + 1,
            max_sigma_change: it.max_abs_sigma_change,
            lower_bound: it.q_lower_bound,
            e_step_ms: it.e_step_ms,
            m_step_ms: it.m_step_ms,
            n_ep_nonconverged: it.n_ep_nonconverged,
        })?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Simulation spec file (TOML) for the `simulate` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimSpecFile {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Either a scalar replicated p times or a full vector.
    pub beta: BetaSpec,
    pub sigma: SigmaKind,
    pub model: ModelSection,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Constant(f64),
    Vector(Vec<f64>),
}

impl SimSpecFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn to_spec(&self) -> Result<SimSpec> {
        let beta = match &self.beta {
            BetaSpec::Constant(v) => DVector::from_element(self.p, *v),
            BetaSpec::Vector(v) => {
                if v.len() != self.p {
                    return Err(Error::InvalidSpec(format!(
                        "beta has {} entries, expected p = {}",
                        v.len(),
                        self.p
                    )));
                }
                DVector::from_row_slice(v)
            }
        };
        let kind = RunConfig {
            model: self.model.clone(),
            ..RunConfig::default()
        }
        .model_kind()?;
        Ok(SimSpec {
            n: self.n,
            m: self.m,
            p: self.p,
            beta_true: beta,
            sigma_kind: self.sigma.clone(),
            kind,
            seed: self.seed,
        })
    }
}

/// Region spec file (TOML) for the `ep-check` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionSpecFile {
    pub dim: usize,
    pub prior_mean: Vec<f64>,
    /// Row-major dim×dim covariance.
    pub prior_cov: Vec<f64>,
    pub region: RegionSection,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_draws() -> usize {
    200_000
}

fn default_burn_in() -> usize {
    500
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegionSection {
    /// Multinomial region for a chosen code in the identified space.
    Multinomial { chosen: usize },
    /// Explicit box bounds (entries may be ±inf).
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl RegionSpecFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}
