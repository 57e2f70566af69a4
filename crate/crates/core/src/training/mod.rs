//! Oracle-aligned adversarial training and the PGD-AT, TRADES and
//! AWP-TRADES baselines.

mod step;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use step::{
    awp_loss, awp_step, baseline_batch, convex_target, oaat_batch, training_loss, weight_perturbation, AwpObjective,
    LossOutput,
};
pub use trainer::{metrics_csv, train, EpochMetrics, TrainOutcome, TrainSetup};

use crate::attacks::AttackLoss;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkConfig, Sgd};
use crate::perceptual::EwaState;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Oaat,
    PgdAt,
    Trades,
    AwpTrades,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Oaat, Variant::PgdAt, Variant::Trades, Variant::AwpTrades];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Oaat => "oaat",
            Variant::PgdAt => "pgd_at",
            Variant::Trades => "trades",
            Variant::AwpTrades => "awp_trades",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}; expected oaat, pgd_at, trades or awp_trades")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Standard,
    /// Oracle-sensitive: attack at the reference radius, convex target.
    Os,
    /// Oracle-invariant: perceptually regularised attack, clean target.
    Oi,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Standard => "standard",
            Branch::Os => "os",
            Branch::Oi => "oi",
        }
    }
}

/// Which parameters supply LPIPS features in the oracle-invariant branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpipsModel {
    Ewa,
    Live,
}

/// Trainer switches beyond the epoch schedule, including the ablation axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingOptions {
    pub batch_size: usize,
    pub momentum: f64,
    pub label_smoothing: f64,
    /// Weight perturbation in the oracle-aligned trainer.
    pub use_awp: bool,
    pub awp_gamma: f64,
    /// Feed `x + 2δ̃` (rather than `x + δ̃`) to the weight perturbation.
    pub awp_double_delta: bool,
    pub lpips_model: LpipsModel,
    /// Objective of the standard and OS attacks (`ce` or `kl`).
    pub attack_loss: AttackLoss,
    /// Update the weight average after every optimiser step; otherwise
    /// once per epoch.
    pub ewa_per_step: bool,
    /// Use `min(τ, (1+k)/(10+k))` at update `k`.
    pub ewa_warmup: bool,
    /// `pad = 0, flip_prob = 0` disables augmentation.
    pub augment: AugmentConfig,
    /// Radius for PGD-AT and TRADES; `None` uses `eps_max`.
    pub baseline_eps: Option<f64>,
    /// Attack steps for the baselines; `None` uses `attack_steps_late`.
    pub baseline_attack_steps: Option<usize>,
    pub trades_beta: f64,
    /// Steps of the per-epoch validation PGD at `eps_max`; 0 disables it.
    pub val_attack_steps: usize,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            label_smoothing: 0.0,
            use_awp: true,
            awp_gamma: 0.005,
            awp_double_delta: true,
            lpips_model: LpipsModel::Ewa,
            attack_loss: AttackLoss::Ce,
            ewa_per_step: true,
            ewa_warmup: true,
            augment: AugmentConfig::default(),
            baseline_eps: None,
            baseline_attack_steps: None,
            trades_beta: 6.0,
            val_attack_steps: 10,
        }
    }
}

impl TrainingOptions {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push("training.batch_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("training.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            v.push(format!("training.label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.awp_gamma >= 0.0) {
            v.push(format!("training.awp_gamma must be nonnegative, got {}", self.awp_gamma));
        }
        if !matches!(self.attack_loss, AttackLoss::Ce | AttackLoss::Kl) {
            v.push("training.attack_loss must be ce or kl".into());
        }
        if let Some(e) = self.baseline_eps {
            if !(e > 0.0 && e <= 1.0) {
                v.push(format!("training.baseline_eps must lie in (0, 1], got {e}"));
            }
        }
        if !(self.trades_beta >= 0.0) {
            v.push(format!("training.trades_beta must be nonnegative, got {}", self.trades_beta));
        }
        v
    }
}

/// Classifier, weight average, optimiser state and completed-epoch count.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub network: Network<T>,
    pub ewa: EwaState<T>,
    pub optimizer: Sgd<T>,
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub step: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(config: NetworkConfig, seed: u64, tau: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let network = Network::new(config, rng::derive_seed(seed, rng::INIT, &[]))?;
        let ewa = EwaState::new(network.params(), tau)?;
        let optimizer = Sgd::new(network.params(), T::lit(momentum), T::lit(weight_decay));
        Ok(Self {
            network,
            ewa,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }

    /// The live network with its parameters replaced by the weight average
    /// (normalisation statistics are the live ones).
    pub fn shadow_network(&self) -> Network<T> {
        let mut net = self.network.clone();
        *net.params_mut() = self.ewa.shadow_params.clone();
        net
    }

    pub(crate) fn ewa_update(&mut self, warmup: bool) -> Result<()> {
        let k = self.step as f64;
        let tau = if warmup {
            self.ewa.tau.min((1.0 + k) / (10.0 + k))
        } else {
            self.ewa.tau
        };
        self.ewa.update_with_tau(self.network.params(), tau)
    }
}

/// Batch-mean loss components; `total = ce_clean + beta·l_adv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Cross-entropy of the trained input (the adversarial one for PGD-AT).
    pub ce_clean: f64,
    pub l_adv: f64,
    pub beta: f64,
    pub total: f64,
    pub branch: Branch,
}
