//! Experiment configuration: one schema for JSON and TOML, with kind-scoped
//! requirements checked up front so every run fails before any computation
//! when a field is missing or inconsistent.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use symbranch_core::infinite_rate::EFieldPair;
use symbranch_core::migration::{KernelSpec, MigrationKernel};
use symbranch_core::sbm::{FieldPair, Gamma, ModelParams};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Simulate,
    DualAudit,
    Green,
    Dichotomy,
    Exitq,
    InfRate,
    GammaStudy,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "simulate" => Ok(Self::Simulate),
            "dual_audit" => Ok(Self::DualAudit),
            "green" => Ok(Self::Green),
            "dichotomy" => Ok(Self::Dichotomy),
            "exitq" => Ok(Self::Exitq),
            "inf_rate" => Ok(Self::InfRate),
            "gamma_study" => Ok(Self::GammaStudy),
            other => Err(CliError::usage(format!(
                "unknown experiment kind `{other}` (expected simulate, dual_audit, green, \
                 dichotomy, exitq, inf_rate, or gamma_study)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(CliError::usage(format!(
                "unknown output format `{other}` (expected csv or json)"
            ))),
        }
    }
}

/// Branching rate as written in configs: a number or the string "inf".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaField {
    Rate(f64),
    Word(String),
}

impl GammaField {
    pub fn resolve(&self) -> Result<Gamma, CliError> {
        match self {
            GammaField::Rate(g) => Gamma::finite(*g).map_err(CliError::from),
            GammaField::Word(w) if w == "inf" => Ok(Gamma::Infinite),
            GammaField::Word(w) => Err(CliError::usage(format!(
                "field `model.gamma`: expected a finite rate or \"inf\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub rho: f64,
    pub gamma: GammaField,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub replicas: Option<u64>,
    pub seed: u64,
    #[serde(default)]
    pub record_times: Vec<f64>,
}

/// Initial condition preset shared by all kinds that evolve or weight
/// fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSection {
    /// u₀ = v₀ ≡ 1.
    #[default]
    Homogeneous,
    /// u₀ = 𝟙_k, v₀ = 𝟙_l.
    Localized { k: usize, l: usize },
    Explicit { u0: Vec<f64>, v0: Vec<f64> },
}

impl InitSection {
    pub fn fields(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>), CliError> {
        let pair = match self {
            InitSection::Homogeneous => FieldPair::homogeneous(n),
            InitSection::Localized { k, l } => FieldPair::localized(n, *k, *l)?,
            InitSection::Explicit { u0, v0 } => FieldPair::new(u0.clone(), v0.clone())?,
        };
        Ok((pair.u().to_vec(), pair.v().to_vec()))
    }

    pub fn field_pair(&self, n: usize) -> Result<FieldPair, CliError> {
        let (u, v) = self.fields(n)?;
        Ok(FieldPair::new(u, v)?)
    }

    /// Same presets restricted to the separated state space; `homogeneous`
    /// puts both types everywhere and is rejected.
    pub fn e_field_pair(&self, n: usize) -> Result<EFieldPair, CliError> {
        match self {
            InitSection::Homogeneous => Err(CliError::precondition(
                "field `init`: homogeneous initials carry both types at every site; \
                 inf_rate needs a separated (E-valued) preset",
            )),
            InitSection::Localized { k, l } => Ok(EFieldPair::localized(n, *k, *l)?),
            InitSection::Explicit { u0, v0 } => Ok(EFieldPair::new(u0.clone(), v0.clone())?),
        }
    }
}

/// Which (a, b) site pairs a duality table covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairSelection {
    Keyword(String),
    List(Vec<(usize, usize)>),
}

impl PairSelection {
    pub fn resolve(&self, n: usize) -> Result<Vec<(usize, usize)>, CliError> {
        match self {
            PairSelection::Keyword(w) if w == "all" => {
                Ok((0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect())
            }
            PairSelection::Keyword(w) => Err(CliError::usage(format!(
                "field `pairs`: expected \"all\" or a list of [a, b] pairs, got \"{w}\""
            ))),
            PairSelection::List(pairs) => {
                for &(a, b) in pairs {
                    if a >= n || b >= n {
                        return Err(CliError::precondition(format!(
                            "field `pairs`: site pair ({a}, {b}) out of range for {n} sites"
                        )));
                    }
                }
                Ok(pairs.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitSection {
    pub start: (f64, f64),
    pub step_dt: f64,
    /// Walk-time budget per replica; censored walks enter the exponent fit
    /// as right-censored. Required when ρ ≥ 0 (uncapped exits have infinite
    /// mean there).
    #[serde(default)]
    pub cap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub gamma_list: Vec<f64>,
    pub t_list: Vec<f64>,
}

fn default_grid_points() -> usize {
    101
}

fn default_delta_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DichotomySection {
    /// Evaluation grid size over [0, horizon], endpoints included.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Decay threshold δ as a fraction of the initial mass product.
    #[serde(default = "default_delta_fraction")]
    pub delta_fraction: f64,
    /// When positive, overlay an SDE/Trotter ensemble estimate of E[M_t].
    #[serde(default)]
    pub overlay_replicas: u64,
}

impl Default for DichotomySection {
    fn default() -> Self {
        DichotomySection {
            grid_points: default_grid_points(),
            delta_fraction: default_delta_fraction(),
            overlay_replicas: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub format: OutputFormat,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub kernel: KernelSpec,
    pub model: ModelSection,
    #[serde(default)]
    pub init: InitSection,
    /// Site pairs whose product moments `simulate`/`inf_rate` track.
    #[serde(default)]
    pub tracked_pairs: Option<Vec<(usize, usize)>>,
    /// Pair table for `dual_audit`; defaults to "all".
    #[serde(default)]
    pub pairs: Option<PairSelection>,
    #[serde(default)]
    pub exit: Option<ExitSection>,
    #[serde(default)]
    pub study: Option<StudySection>,
    #[serde(default)]
    pub dichotomy: Option<DichotomySection>,
}

impl ExperimentConfig {
    /// Parses a config file by extension (.json or .toml).
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "json" => serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {}: {e}", path.display()))),
            "toml" => toml::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {}: {e}", path.display()))),
            other => Err(CliError::usage(format!(
                "config {}: unsupported extension `{other}` (expected .json or .toml)",
                path.display()
            ))),
        }
    }

    pub fn kernel(&self) -> Result<MigrationKernel, CliError> {
        Ok(MigrationKernel::from_spec(&self.kernel)?)
    }

    fn require_f64(
        &self,
        value: Option<f64>,
        field: &str,
        kind: &str,
    ) -> Result<f64, CliError> {
        value.ok_or_else(|| {
            CliError::usage(format!("field `model.{field}` is required for kind={kind}"))
        })
    }

    fn require_replicas(&self, kind: &str) -> Result<u64, CliError> {
        self.model.replicas.ok_or_else(|| {
            CliError::usage(format!("field `model.replicas` is required for kind={kind}"))
        })
    }

    /// Full ModelParams for the ensemble kinds (`simulate`, `inf_rate`).
    pub fn model_params(&self, kind: &str) -> Result<ModelParams, CliError> {
        let record_times = if self.model.record_times.is_empty() {
            vec![self.require_f64(self.model.horizon, "horizon", kind)?]
        } else {
            self.model.record_times.clone()
        };
        Ok(ModelParams {
            rho: self.model.rho,
            gamma: self.model.gamma.resolve()?,
            dt: self.require_f64(self.model.dt, "dt", kind)?,
            horizon: self.require_f64(self.model.horizon, "horizon", kind)?,
            replicas: self.require_replicas(kind)?,
            seed: self.model.seed,
            record_times,
        })
    }

    /// Kind-scoped completeness check, run before any computation.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.kind {
            ExperimentKind::Simulate => {
                self.model_params("simulate")?;
                if self.model.gamma.resolve()? == Gamma::Infinite {
                    return Err(CliError::precondition(
                        "field `model.gamma`: kind=simulate needs a finite rate; \
                         use kind=inf_rate for gamma=\"inf\"",
                    ));
                }
            }
            ExperimentKind::InfRate => {
                self.model_params("inf_rate")?;
                if self.model.gamma.resolve()? != Gamma::Infinite {
                    return Err(CliError::precondition(
                        "field `model.gamma`: kind=inf_rate requires gamma=\"inf\"",
                    ));
                }
            }
            ExperimentKind::DualAudit => {
                if self.model.record_times.is_empty() {
                    return Err(CliError::usage(
                        "field `model.record_times` is required for kind=dual_audit",
                    ));
                }
                self.require_replicas("dual_audit")?;
                if self.model.gamma.resolve()? == Gamma::Infinite {
                    return Err(CliError::precondition(
                        "field `model.gamma`: dual_audit compares against the finite-rate \
                         oracle; gamma=\"inf\" has no Monte Carlo estimator here",
                    ));
                }
            }
            ExperimentKind::Green => {
                self.require_f64(self.model.horizon, "horizon", "green")?;
            }
            ExperimentKind::Dichotomy => {
                self.require_f64(self.model.horizon, "horizon", "dichotomy")?;
                let d = self.dichotomy.clone().unwrap_or_default();
                if d.grid_points < 2 {
                    return Err(CliError::usage(
                        "field `dichotomy.grid_points`: need at least 2 grid points",
                    ));
                }
                if !(d.delta_fraction > 0.0 && d.delta_fraction < 1.0) {
                    return Err(CliError::usage(
                        "field `dichotomy.delta_fraction`: must lie in (0, 1)",
                    ));
                }
                if d.overlay_replicas > 0 {
                    // The overlay is a full ensemble run and needs its step size.
                    self.require_f64(self.model.dt, "dt", "dichotomy (with overlay)")?;
                }
            }
            ExperimentKind::Exitq => {
                let exit = self.exit.as_ref().ok_or_else(|| {
                    CliError::usage("section `exit` is required for kind=exitq")
                })?;
                self.require_replicas("exitq")?;
                if exit.cap.is_none() && self.model.rho >= 0.0 {
                    return Err(CliError::precondition(
                        "field `exit.cap` is required when rho >= 0: uncapped exit times \
                         have infinite mean there",
                    ));
                }
            }
            ExperimentKind::GammaStudy => {
                if self.study.is_none() {
                    return Err(CliError::usage(
                        "section `study` is required for kind=gamma_study",
                    ));
                }
            }
        }
        Ok(())
    }
}
