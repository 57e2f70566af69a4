use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::step::{baseline_batch, oaat_batch};
use super::{Branch, LossBreakdown, ModelState, TrainingOptions, Variant};
use crate::attacks::{AttackSpec, Init, ThreatModel};
use crate::data::{augment, ImageSet};
use crate::error::{Error, Result};
use crate::evaluation::{clean_accuracy, robust_accuracy, EvalAttack};
use crate::nn::NetworkConfig;
use crate::rng;
use crate::scalar::Scalar;
use crate::schedules::{coefficients_at, lr_at, Phase, ScheduleState, TrainConfig};

/// One row of the per-epoch metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub eps_tilde: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub n_batches: usize,
    pub n_standard: usize,
    pub n_os: usize,
    pub n_oi: usize,
    pub ce_clean: f64,
    pub l_adv: f64,
    pub total: f64,
    pub val_clean_acc: Option<f64>,
    pub val_robust_acc: Option<f64>,
}

const CSV_HEADER: &str = "epoch,phase,eps_tilde,alpha,lambda,beta,lr,n_batches,n_standard,n_os,n_oi,ce_clean,l_adv,total,val_clean_acc,val_robust_acc";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let phase = match r.phase {
            Phase::Standard => "standard",
            Phase::OracleAligned => "oracle_aligned",
        };
        let _ = writeln!(
            s,
            "{},{phase},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.eps_tilde,
            r.alpha,
            r.lambda,
            r.beta,
            r.lr,
            r.n_batches,
            r.n_standard,
            r.n_os,
            r.n_oi,
            r.ce_clean,
            r.l_adv,
            r.total,
            opt(r.val_clean_acc),
            opt(r.val_robust_acc)
        );
    }
    s
}

pub struct TrainSetup<'a, T> {
    pub config: &'a TrainConfig,
    pub options: &'a TrainingOptions,
    pub variant: Variant,
    pub network: NetworkConfig,
    pub train: &'a ImageSet<T>,
    pub val: &'a ImageSet<T>,
}

pub struct TrainOutcome<T> {
    pub state: ModelState<T>,
    pub metrics: Vec<EpochMetrics>,
    /// Set when training stopped before the last epoch.
    pub interrupted: bool,
}

impl<T: Scalar> TrainSetup<'_, T> {
    pub fn validate(&self) -> Result<()> {
        let mut v = self.config.violations();
        v.extend(self.options.violations());
        if let Err(e) = self.network.validate() {
            v.push(e.to_string());
        }
        if self.train.n_classes != self.network.n_classes {
            v.push(format!(
                "model.n_classes ({}) does not match the dataset ({})",
                self.network.n_classes, self.train.n_classes
            ));
        }
        if self.train.image_dim().0 != self.network.in_channels {
            v.push(format!(
                "model.in_channels ({}) does not match the dataset ({})",
                self.network.in_channels,
                self.train.image_dim().0
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn initial_state(&self) -> Result<ModelState<T>> {
        ModelState::new(
            self.network.clone(),
            self.config.seed,
            self.config.ewa_tau,
            self.options.momentum,
            self.config.weight_decay,
        )
    }

    /// Hyperparameters for `epoch`. Baselines keep a fixed radius, step
    /// count and β and share the cosine learning rate.
    pub fn schedule(&self, epoch: usize) -> Result<ScheduleState> {
        match self.variant {
            Variant::Oaat => coefficients_at(epoch, self.config),
            _ => Ok(ScheduleState {
                epoch,
                eps_tilde: self.options.baseline_eps.unwrap_or(self.config.eps_max),
                alpha: 1.0,
                lambda: 0.0,
                beta: if self.variant == Variant::PgdAt {
                    0.0
                } else {
                    self.options.trades_beta
                },
                lr: lr_at(epoch, self.config)?,
                n_attack_steps: self
                    .options
                    .baseline_attack_steps
                    .unwrap_or(self.config.attack_steps_late),
                phase: Phase::Standard,
            }),
        }
    }
}

fn mean_of(v: &[LossBreakdown], f: impl Fn(&LossBreakdown) -> f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().map(f).sum::<f64>() / v.len() as f64
}

/// Runs epochs `state.epoch + 1 ..= T`, calling `on_epoch` after each one
/// (checkpointing lives there). `stop_after` ends the run early after the
/// given epoch, as an interrupted run would.
pub fn train<T: Scalar>(
    setup: &TrainSetup<'_, T>,
    resume: Option<(ModelState<T>, Vec<EpochMetrics>)>,
    stop_after: Option<usize>,
    on_epoch: &mut dyn FnMut(&ModelState<T>, &[EpochMetrics]) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    setup.validate()?;
    let config = setup.config;
    let opts = setup.options;
    let (mut state, mut metrics) = match resume {
        Some(r) => r,
        None => (setup.initial_state()?, Vec::new()),
    };
    if metrics.len() != state.epoch {
        return Err(Error::InvalidArgument(format!(
            "resumed state has {} metric rows for {} completed epochs",
            metrics.len(),
            state.epoch
        )));
    }
    let val_attack = (opts.val_attack_steps > 0 && !setup.val.is_empty())
        .then(|| -> Result<EvalAttack> {
            let threat = ThreatModel::linf(config.eps_max)?;
            Ok(EvalAttack::Pgd {
                spec: AttackSpec {
                    init: Init::Uniform { radius: config.eps_max },
                    seed: rng::derive_seed(config.seed, "val", &[]),
                    ..AttackSpec::pgd(threat, opts.val_attack_steps)
                },
            })
        })
        .transpose()?;
    let mut interrupted = false;
    for epoch in state.epoch + 1..=config.total_epochs {
        let sched = setup.schedule(epoch)?;
        let shuffle = rng::derive_seed(config.seed, rng::DATA, &[epoch as u64]);
        let mut losses = Vec::new();
        for (b, idx) in setup
            .train
            .batch_indices(opts.batch_size, Some(shuffle))
            .into_iter()
            .enumerate()
        {
            // a single image gives degenerate batch statistics
            if idx.len() < 2 {
                continue;
            }
            let mut batch = setup.train.batch(&idx)?;
            if opts.augment.pad > 0 || opts.augment.flip_prob > 0.0 {
                let aug_seed = rng::derive_seed(config.seed, rng::AUGMENT, &[epoch as u64, b as u64]);
                batch = augment(&batch, aug_seed, &opts.augment);
            }
            let seed = rng::derive_seed(config.seed, rng::ATTACK, &[epoch as u64, b as u64]);
            let bd = match setup.variant {
                Variant::Oaat => oaat_batch(&mut state, &batch, &sched, config, opts, b, seed),
                v => baseline_batch(&mut state, &batch, v, sched.eps_tilde, sched.n_attack_steps, sched.lr, opts, b, seed),
            }
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            losses.push(bd);
        }
        if !opts.ewa_per_step {
            state.ewa_update(false)?;
        }
        if !state.network.params().all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        state.epoch = epoch;
        let (val_clean_acc, val_robust_acc) = if setup.val.is_empty() {
            (None, None)
        } else {
            let shadow = state.shadow_network();
            let clean = clean_accuracy(&shadow, setup.val, opts.batch_size)?;
            let robust = val_attack
                .as_ref()
                .map(|a| robust_accuracy(&shadow, setup.val, a, opts.batch_size))
                .transpose()?;
            (Some(clean), robust)
        };
        let count = |br: Branch| losses.iter().filter(|l| l.branch == br).count();
        let row = EpochMetrics {
            epoch,
            phase: sched.phase,
            eps_tilde: sched.eps_tilde,
            alpha: sched.alpha,
            lambda: sched.lambda,
            beta: sched.beta,
            lr: sched.lr,
            n_batches: losses.len(),
            n_standard: count(Branch::Standard),
            n_os: count(Branch::Os),
            n_oi: count(Branch::Oi),
            ce_clean: mean_of(&losses, |l| l.ce_clean),
            l_adv: mean_of(&losses, |l| l.l_adv),
            total: mean_of(&losses, |l| l.total),
            val_clean_acc,
            val_robust_acc,
        };
        log::debug!(
            "epoch {epoch}/{} {:?} eps {:.4} loss {:.4} val clean {:?} robust {:?}",
            config.total_epochs,
            row.phase,
            row.eps_tilde,
            row.total,
            row.val_clean_acc,
            row.val_robust_acc
        );
        metrics.push(row);
        on_epoch(&state, &metrics)?;
        if stop_after == Some(epoch) && epoch < config.total_epochs {
            interrupted = true;
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        interrupted,
    })
}
