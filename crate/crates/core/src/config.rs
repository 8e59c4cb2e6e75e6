//! Declarative run configuration loaded from TOML.
//!
//! Every section is optional and every key has a default; unknown keys are
//! rejected. Command-line flags override `seed`, `manifest`, `out`, `jobs`
//! and `budgets`.

use crate::data::{ManifestDefaults, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{Budget, Reduction};
use crate::model::ModelConfig;
use crate::rl::TrainConfig;
use crate::shots::KtsParams;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    /// Worker threads for per-video work; 0 uses every core.
    pub jobs: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub shots: ShotsConfig,
    pub synth: SynthSpec,
    pub gradcheck: GradcheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Summary lengths; numbers in (0, 1] or "P". Unset falls back to the
    /// manifest budget, then 0.15.
    #[serde(
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_opt_budgets",
        deserialize_with = "de_opt_budgets"
    )]
    pub budgets: Option<Vec<Budget>>,
    /// Overrides the manifest's reduction rule.
    pub reduction: Option<Reduction>,
    pub splits: usize,
    pub train_fraction: f64,
    /// Runs the length study over `study_budgets` after each split.
    pub length_study: bool,
    #[serde(serialize_with = "ser_budgets", deserialize_with = "de_budgets")]
    pub study_budgets: Vec<Budget>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            budgets: None,
            reduction: None,
            splits: 5,
            train_fraction: 0.8,
            length_study: false,
            study_budgets: Budget::default_study(),
        }
    }
}

/// KTS settings. An unset ratio falls back to the manifest's `shot_rate`,
/// then to the KTS default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotsConfig {
    pub max_segments_ratio: Option<f64>,
    pub penalty: f64,
}

impl Default for ShotsConfig {
    fn default() -> Self {
        ShotsConfig {
            max_segments_ratio: None,
            penalty: KtsParams::default().penalty,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Number(f64),
    Text(String),
}

fn ser_budgets<S: Serializer>(b: &[Budget], s: S) -> std::result::Result<S::Ok, S::Error> {
    let v: Vec<BudgetRepr> = b
        .iter()
        .map(|b| match b {
            Budget::Fraction(f) => BudgetRepr::Number(*f),
            Budget::Proportion => BudgetRepr::Text("P".into()),
        })
        .collect();
    v.serialize(s)
}

fn ser_opt_budgets<S: Serializer>(b: &Option<Vec<Budget>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    ser_budgets(b.as_deref().unwrap_or_default(), s)
}

fn de_opt_budgets<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<Budget>>, D::Error> {
    de_budgets(d).map(Some)
}

fn de_budgets<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Budget>, D::Error> {
    Vec::<BudgetRepr>::deserialize(d)?
        .into_iter()
        .map(|r| match r {
            BudgetRepr::Number(v) => Budget::parse(&v.to_string()),
            BudgetRepr::Text(s) => Budget::parse(&s),
        })
        .collect::<Result<_>>()
        .map_err(serde::de::Error::custom)
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: e
                .span()
                .map_or_else(|| "document".to_string(), |s| format!("byte {}", s.start)),
            detail: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text, path)?;
        // Relative manifest and output paths follow the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Ok(RunConfig {
            manifest: cfg.manifest.iter().map(|p| fix(p)).collect(),
            out: cfg.out.as_deref().map(fix),
            ..cfg
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.budgets.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::Config("eval.budgets must not be empty".into()));
        }
        if let Some(r) = self.shots.max_segments_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config("shots.max_segments_ratio must lie in (0, 1]".into()));
            }
        }
        if self.eval.splits == 0 || !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(Error::Config("eval.splits must be >= 1 and eval.train_fraction in (0, 1)".into()));
        }
        if !(self.gradcheck.eps >= 1e-7 && self.gradcheck.eps <= 1e-3) {
            return Err(Error::Config(format!(
                "gradcheck.eps {} outside [1e-7, 1e-3]",
                self.gradcheck.eps
            )));
        }
        if !(self.shots.penalty >= 0.0) {
            return Err(Error::Config("shots.penalty must be >= 0".into()));
        }
        Ok(())
    }

    pub fn kts(&self, defaults: &ManifestDefaults) -> KtsParams {
        KtsParams {
            max_segments_ratio: self
                .shots
                .max_segments_ratio
                .or(defaults.shot_rate)
                .unwrap_or(KtsParams::default().max_segments_ratio),
            penalty: self.shots.penalty,
        }
    }

    pub fn reduction(&self, defaults: &ManifestDefaults) -> Reduction {
        self.eval.reduction.or(defaults.reduction).unwrap_or(Reduction::Mean)
    }

    pub fn budgets(&self, defaults: &ManifestDefaults) -> Vec<Budget> {
        self.eval
            .budgets
            .clone()
            .or_else(|| defaults.budget.map(|b| vec![Budget::Fraction(b)]))
            .unwrap_or_else(|| vec![Budget::Fraction(0.15)])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
