//! Epoch-dependent hyperparameters of oracle-aligned training.
//!
//! Everything here is a pure function of `(epoch, TrainConfig)`. Epochs are
//! 1-indexed. The perturbation radius ramps as `max(ε_max/4, ε_max·e/T)`;
//! once it reaches `¾·ε_max` training switches to the oracle-aligned phase,
//! over which β, α and λ are interpolated linearly in the epoch index from
//! the first oracle-aligned epoch to the last epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub eps_max: f64,
    pub eps_ref: f64,
    /// `(beta_lo, beta_hi)`
    pub beta_range: (f64, f64),
    /// `(alpha_hi, alpha_lo)`: α decreases over the ramp.
    pub alpha_range: (f64, f64),
    /// `(lambda_lo, lambda_hi)`
    pub lambda_range: (f64, f64),
    pub lr_max: f64,
    pub weight_decay: f64,
    pub ewa_tau: f64,
    pub attack_steps_early: usize,
    pub attack_steps_late: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 110,
            eps_max: 16.0 / 255.0,
            eps_ref: 24.0 / 255.0,
            beta_range: (1.5, 3.0),
            alpha_range: (1.0, 0.8),
            lambda_range: (0.0, 1.0),
            lr_max: 0.2,
            weight_decay: 5e-4,
            ewa_tau: 0.995,
            attack_steps_early: 5,
            attack_steps_late: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated invariant, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.total_epochs == 0 {
            v.push("schedule.total_epochs must be positive".into());
        }
        if !(self.eps_max > 0.0 && self.eps_max <= 1.0) {
            v.push(format!("schedule.eps_max must lie in (0, 1], got {}", self.eps_max));
        }
        if !(self.eps_ref >= self.eps_max) {
            v.push(format!(
                "schedule.eps_ref ({}) must be >= eps_max ({})",
                self.eps_ref, self.eps_max
            ));
        }
        if self.eps_ref > 1.0 {
            v.push(format!("schedule.eps_ref must be <= 1, got {}", self.eps_ref));
        }
        let (blo, bhi) = self.beta_range;
        if !(blo > 0.0 && bhi >= blo) {
            v.push(format!("schedule.beta_range must satisfy beta_hi >= beta_lo > 0, got ({blo}, {bhi})"));
        }
        let (ahi, alo) = self.alpha_range;
        if !((0.0..=1.0).contains(&ahi) && (0.0..=1.0).contains(&alo)) {
            v.push(format!("schedule.alpha_range values must lie in [0, 1], got ({ahi}, {alo})"));
        }
        let (llo, lhi) = self.lambda_range;
        if !(llo >= 0.0 && lhi >= 0.0) {
            v.push(format!("schedule.lambda_range values must be nonnegative, got ({llo}, {lhi})"));
        }
        if !(self.lr_max > 0.0) {
            v.push(format!("schedule.lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("schedule.weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.ewa_tau > 0.0 && self.ewa_tau < 1.0) {
            v.push(format!("schedule.ewa_tau must lie in (0, 1), got {}", self.ewa_tau));
        }
        if self.attack_steps_early == 0 || self.attack_steps_late == 0 {
            v.push("schedule.attack_steps_early/late must be positive".into());
        }
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

    /// First epoch of the oracle-aligned phase, the smallest `e` with
    /// `e/T ≥ 3/4` (computed exactly in integers).
    pub fn transition_epoch(&self) -> usize {
        (3 * self.total_epochs).div_ceil(4).max(1)
    }

    fn check_epoch(&self, epoch: usize) -> Result<()> {
        if epoch == 0 || epoch > self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside 1..={}",
                self.total_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Standard,
    OracleAligned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub epoch: usize,
    pub eps_tilde: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub n_attack_steps: usize,
    pub phase: Phase,
}

pub fn epsilon_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    config.check_epoch(epoch)?;
    let ramp = config.eps_max * epoch as f64 / config.total_epochs as f64;
    Ok((config.eps_max / 4.0).max(ramp))
}

pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    config.check_epoch(epoch)?;
    let t = (epoch - 1) as f64 / config.total_epochs as f64;
    Ok(config.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub fn phase_at(epoch: usize, config: &TrainConfig) -> Result<Phase> {
    config.check_epoch(epoch)?;
    // ε̃ ≥ ¾ε_max  ⇔  max(¼, e/T) ≥ ¾  ⇔  4e ≥ 3T
    Ok(if 4 * epoch >= 3 * config.total_epochs {
        Phase::OracleAligned
    } else {
        Phase::Standard
    })
}

/// Position in `[0, 1]` along the oracle-aligned ramp (0 before it).
pub fn ramp_fraction(epoch: usize, config: &TrainConfig) -> Result<f64> {
    config.check_epoch(epoch)?;
    let start = config.transition_epoch();
    let end = config.total_epochs;
    Ok(if epoch < start {
        0.0
    } else if end == start {
        1.0
    } else {
        (epoch - start) as f64 / (end - start) as f64
    })
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

pub fn coefficients_at(epoch: usize, config: &TrainConfig) -> Result<ScheduleState> {
    let eps_tilde = epsilon_at(epoch, config)?;
    let t = ramp_fraction(epoch, config)?;
    let early = 4 * epoch <= config.total_epochs;
    Ok(ScheduleState {
        epoch,
        eps_tilde,
        alpha: lerp(config.alpha_range.0, config.alpha_range.1, t),
        lambda: lerp(config.lambda_range.0, config.lambda_range.1, t),
        beta: lerp(config.beta_range.0, config.beta_range.1, t),
        lr: lr_at(epoch, config)?,
        n_attack_steps: if early {
            config.attack_steps_early
        } else {
            config.attack_steps_late
        },
        phase: phase_at(epoch, config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn epsilon_examples() {
        let c = cfg();
        assert!((epsilon_at(20, &c).unwrap() - 4.0 / 255.0).abs() < 1e-15);
        assert!((epsilon_at(110, &c).unwrap() - 16.0 / 255.0).abs() < 1e-15);
        assert!((epsilon_at(55, &c).unwrap() - 8.0 / 255.0).abs() < 1e-15);
        assert!(epsilon_at(0, &c).is_err());
        assert!(epsilon_at(111, &c).is_err());
    }

    #[test]
    fn coefficient_endpoints_and_midpoint() {
        let c = cfg();
        let first = c.transition_epoch();
        assert_eq!(first, 83);
        let s = coefficients_at(first, &c).unwrap();
        assert_eq!((s.beta, s.alpha, s.lambda), (1.5, 1.0, 0.0));
        assert_eq!(s.phase, Phase::OracleAligned);
        assert_eq!(coefficients_at(first - 1, &c).unwrap().phase, Phase::Standard);
        let end = coefficients_at(110, &c).unwrap();
        assert!((end.beta - 3.0).abs() < 1e-12);
        assert!((end.alpha - 0.8).abs() < 1e-12);
        assert!((end.lambda - 1.0).abs() < 1e-12);
        // T=110 has an odd-length ramp; T=104 ramps over 78..=104
        let c104 = TrainConfig {
            total_epochs: 104,
            ..cfg()
        };
        assert_eq!(c104.transition_epoch(), 78);
        let m = coefficients_at(91, &c104).unwrap();
        assert!((m.beta - 2.25).abs() < 1e-12);
        assert!((m.alpha - 0.9).abs() < 1e-12);
        assert!((m.lambda - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lr_examples() {
        let c = cfg();
        assert!((lr_at(1, &c).unwrap() - 0.2).abs() < 1e-15);
        assert!(lr_at(110, &c).unwrap() < 1e-4);
        assert!((lr_at(56, &c).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn attack_steps_follow_the_flat_start() {
        let c = cfg();
        assert_eq!(coefficients_at(27, &c).unwrap().n_attack_steps, 5);
        assert_eq!(coefficients_at(28, &c).unwrap().n_attack_steps, 10);
        assert!((epsilon_at(27, &c).unwrap() - c.eps_max / 4.0).abs() < 1e-15);
        assert!(epsilon_at(28, &c).unwrap() > c.eps_max / 4.0);
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let c = TrainConfig {
            eps_ref: 0.01,
            alpha_range: (1.2, 0.8),
            ewa_tau: 1.0,
            ..cfg()
        };
        assert_eq!(c.violations().len(), 3);
        assert!(matches!(c.validate(), Err(Error::Config(v)) if v.len() == 3));
    }

    proptest! {
        #[test]
        fn schedule_invariants(t in 1usize..300, eps_num in 1u32..64) {
            let c = TrainConfig { total_epochs: t, eps_max: eps_num as f64 / 255.0, eps_ref: 1.0, ..cfg() };
            let mut prev = 0.0;
            let mut transitions = 0;
            let mut last_phase = Phase::Standard;
            for e in 1..=t {
                let s = coefficients_at(e, &c).unwrap();
                prop_assert!(s.eps_tilde >= prev);
                prop_assert!(s.eps_tilde >= c.eps_max / 4.0 && s.eps_tilde <= c.eps_max * (1.0 + 1e-15));
                prop_assert_eq!(s.phase == Phase::OracleAligned, 4 * e >= 3 * t);
                if s.phase != last_phase { transitions += 1; }
                last_phase = s.phase;
                prop_assert!(s.lr >= 0.0);
                prev = s.eps_tilde;
            }
            prop_assert_eq!(transitions, 1);
            prop_assert!((epsilon_at(t, &c).unwrap() - c.eps_max).abs() < 1e-15);
        }
    }
}
