//! Experiment configuration file.
//!
//! A TOML document with one table per module: `[schedule]`, `[data]`,
//! `[model]`, `[attack]`, `[training]` and `[eval]`. Every key is optional
//! and unknown keys are rejected. Radii are fractions of the pixel range,
//! so `8/255` is written `0.031372549`.
//!
//! A top-level `seed` is the root of all randomness: it becomes the schedule
//! seed and is fanned out into the data, attack and evaluation seeds by
//! named sub-streams. Without it each section keeps its own seed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackLoss, AttackSpec, Init, Norm, SquareConfig, ThreatModel};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::evaluation::{desk_ensemble, EvalAttack};
use crate::nn::NetworkConfig;
use crate::rng;
use crate::schedules::TrainConfig;
use crate::training::TrainingOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Channel width of each residual stage.
    pub widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64] }
    }
}

impl ModelSection {
    pub fn network(&self, in_channels: usize, n_classes: usize) -> NetworkConfig {
        NetworkConfig::new(in_channels, n_classes, self.widths.clone())
    }
}

/// The stand-alone attack run by the `attack` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub norm: Norm,
    pub eps: f64,
    pub steps: usize,
    /// `None` uses `2·eps/steps`.
    pub step_size: Option<f64>,
    pub loss: AttackLoss,
    pub lambda: f64,
    /// Start from a uniform draw in the ball instead of zero.
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 8.0 / 255.0,
            steps: 20,
            step_size: None,
            loss: AttackLoss::Ce,
            lambda: 0.0,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackSection {
    pub fn spec(&self) -> AttackSpec {
        let threat = ThreatModel { norm: self.norm, eps: self.eps };
        let base = AttackSpec::pgd(threat, self.steps);
        AttackSpec {
            step_size: self.step_size.unwrap_or(base.step_size),
            loss: self.loss,
            lambda: self.lambda,
            init: if self.random_init {
                Init::Uniform { radius: self.eps }
            } else {
                Init::Zero
            },
            seed: self.seed,
            ..base
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.spec().violations().into_iter().map(|m| format!("attack: {m}")).collect();
        if self.steps == 0 {
            v.push("attack.steps must be positive".into());
        }
        if matches!(self.loss, AttackLoss::CeMinusLpips | AttackLoss::CeMinusDisc) {
            v.push("attack.loss must be ce or kl; the regularised objectives need a training context".into());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub norm: Norm,
    /// Radii of the attack ensemble.
    pub eps: Vec<f64>,
    pub pgd_steps: usize,
    pub square_queries: usize,
    pub batch_size: usize,
    /// Evaluate the weight average rather than the live weights.
    pub use_ewa: bool,
    /// Radii of the masking diagnostic; 0 means clean accuracy.
    pub masking_eps: Vec<f64>,
    pub contrast_bins: usize,
    pub contrast_pooled: bool,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: vec![8.0 / 255.0, 16.0 / 255.0],
            pgd_steps: 50,
            square_queries: 500,
            batch_size: 128,
            use_ewa: true,
            masking_eps: [0.0, 4.0, 8.0, 16.0, 24.0, 32.0, 48.0, 64.0].iter().map(|v| v / 255.0).collect(),
            contrast_bins: 10,
            contrast_pooled: false,
            seed: 0,
        }
    }
}

impl EvalSection {
    /// The desk ensemble at each configured radius, with the configured
    /// step and query budgets.
    pub fn attacks(&self) -> Vec<EvalAttack> {
        let mut out = Vec::new();
        for &eps in &self.eps {
            let threat = ThreatModel { norm: self.norm, eps };
            for mut a in desk_ensemble(threat, self.seed) {
                match &mut a {
                    EvalAttack::Pgd { spec } => {
                        spec.steps = self.pgd_steps;
                        spec.step_size = 2.0 * eps / self.pgd_steps.max(1) as f64;
                    }
                    EvalAttack::Square { config, .. } => {
                        *config = SquareConfig {
                            n_queries: self.square_queries,
                            ..*config
                        };
                    }
                    _ => {}
                }
                out.push(a);
            }
        }
        out
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.eps.iter().any(|&e| !(e > 0.0)) {
            v.push("eval.eps values must be positive".into());
        }
        if self.masking_eps.iter().any(|&e| !(e >= 0.0)) {
            v.push("eval.masking_eps values must be nonnegative".into());
        }
        if self.pgd_steps == 0 {
            v.push("eval.pgd_steps must be positive".into());
        }
        if self.batch_size == 0 {
            v.push("eval.batch_size must be positive".into());
        }
        if self.contrast_bins == 0 {
            v.push("eval.contrast_bins must be positive".into());
        }
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub schedule: TrainConfig,
    pub data: DatasetSpec,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub training: TrainingOptions,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parses and validates, applying the root seed if one is given.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if let Some(root) = c.seed {
            c.apply_root_seed(root);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn apply_root_seed(&mut self, root: u64) {
        self.seed = Some(root);
        self.schedule.seed = root;
        self.data.seed = rng::derive_seed(root, rng::DATA, &[]);
        self.data.synthetic.seed = rng::derive_seed(root, "synthetic", &[]);
        self.attack.seed = rng::derive_seed(root, rng::ATTACK, &[]);
        self.eval.seed = rng::derive_seed(root, "eval", &[]);
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.schedule.violations();
        v.extend(self.data.violations());
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            v.push("model.widths must be a non-empty list of positive widths".into());
        }
        v.extend(self.attack.violations());
        v.extend(self.training.violations());
        v.extend(self.eval.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Canonical TOML text; the config hash is taken over these bytes.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml_string()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
