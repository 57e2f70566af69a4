//! Robust accuracy under attack ensembles, gradient-masking diagnostics and
//! contrast-binned model comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    fgsm, pgd, rfgsm, square_attack, AttackLoss, AttackSpec, Aux, Init, Perturbation, SquareConfig, ThreatModel,
};
use crate::contrast::{bin_by_contrast, contrast_scores};
use crate::data::{ImageBatch, ImageSet};
use crate::error::{Error, Result};
use crate::nn::loss::{argmax_rows, cross_entropy};
use crate::nn::Differentiable;
use crate::scalar::Scalar;

/// Label attached to numbers produced by the reduced default ensemble.
pub const DESK_ENSEMBLE: &str = "desk ensemble";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalAttack {
    Pgd { spec: AttackSpec },
    Fgsm { threat: ThreatModel },
    Rfgsm { threat: ThreatModel, noise_r: f64, seed: u64 },
    Square { threat: ThreatModel, config: SquareConfig },
}

impl EvalAttack {
    pub fn eps(&self) -> f64 {
        match self {
            Self::Pgd { spec } => spec.threat.eps,
            Self::Fgsm { threat } | Self::Rfgsm { threat, .. } | Self::Square { threat, .. } => threat.eps,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Pgd { spec } => {
                let loss = match spec.loss {
                    AttackLoss::Ce => "ce",
                    AttackLoss::Kl => "kl",
                    AttackLoss::CeMinusLpips => "ce-lpips",
                    AttackLoss::CeMinusDisc => "ce-disc",
                };
                format!("pgd{}-{loss}", spec.steps)
            }
            Self::Fgsm { .. } => "fgsm".into(),
            Self::Rfgsm { .. } => "rfgsm".into(),
            Self::Square { config, .. } => format!("square{}", config.n_queries),
        }
    }

    pub fn perturb<T: Scalar, M: Differentiable<T>>(&self, model: &M, batch: &ImageBatch<T>) -> Result<Perturbation<T>> {
        match self {
            Self::Pgd { spec } => pgd(model, batch, spec, Aux::None),
            Self::Fgsm { threat } => fgsm(model, batch, threat),
            Self::Rfgsm { threat, noise_r, seed } => rfgsm(model, batch, threat, *noise_r, *seed),
            Self::Square { threat, config } => square_attack(model, batch, threat, config),
        }
    }
}

/// PGD-50 on CE and on KL, R-FGSM and a 500-query Square attack.
pub fn desk_ensemble(threat: ThreatModel, seed: u64) -> Vec<EvalAttack> {
    let ce = AttackSpec {
        init: Init::Uniform { radius: threat.eps },
        seed,
        ..AttackSpec::pgd(threat, 50)
    };
    let kl = AttackSpec {
        loss: AttackLoss::Kl,
        init: Init::Uniform {
            radius: threat.eps.min(1e-3),
        },
        ..ce
    };
    vec![
        EvalAttack::Pgd { spec: ce },
        EvalAttack::Pgd { spec: kl },
        EvalAttack::Rfgsm {
            threat,
            noise_r: threat.eps / 2.0,
            seed,
        },
        EvalAttack::Square {
            threat,
            config: SquareConfig {
                seed,
                ..SquareConfig::default()
            },
        },
    ]
}

fn correct_flags<T: Scalar>(logits: &ndarray::Array2<T>, labels: &[usize]) -> Vec<bool> {
    argmax_rows(logits).into_iter().zip(labels).map(|(p, &y)| p == y).collect()
}

pub fn clean_flags<T: Scalar, M: Differentiable<T>>(model: &M, data: &ImageSet<T>, batch_size: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(data.len());
    for b in data.batches(batch_size, None) {
        out.extend(correct_flags(&model.logits(&b.pixels)?, &b.labels));
    }
    Ok(out)
}

/// Per-sample flag: prediction on `x + δ` equals the label.
pub fn robust_flags<T: Scalar, M: Differentiable<T>>(
    model: &M,
    data: &ImageSet<T>,
    attack: &EvalAttack,
    batch_size: usize,
) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(data.len());
    for b in data.batches(batch_size, None) {
        let d = attack.perturb(model, &b)?;
        out.extend(correct_flags(&model.logits(&(&b.pixels + &d.delta))?, &b.labels));
    }
    Ok(out)
}

fn fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return f64::NAN;
    }
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

pub fn clean_accuracy<T: Scalar, M: Differentiable<T>>(model: &M, data: &ImageSet<T>, batch_size: usize) -> Result<f64> {
    Ok(fraction(&clean_flags(model, data, batch_size)?))
}

pub fn robust_accuracy<T: Scalar, M: Differentiable<T>>(
    model: &M,
    data: &ImageSet<T>,
    attack: &EvalAttack,
    batch_size: usize,
) -> Result<f64> {
    Ok(fraction(&robust_flags(model, data, attack, batch_size)?))
}

/// A sample counts as robust only if it survives every member.
pub struct EnsembleResult {
    pub member_accuracy: Vec<f64>,
    pub accuracy: f64,
    pub flags: Vec<bool>,
}

pub fn ensemble_accuracy<T: Scalar, M: Differentiable<T>>(
    model: &M,
    data: &ImageSet<T>,
    attacks: &[EvalAttack],
    batch_size: usize,
) -> Result<EnsembleResult> {
    if attacks.is_empty() {
        return Err(Error::InvalidArgument("empty attack ensemble".into()));
    }
    let mut flags = vec![true; data.len()];
    let mut member_accuracy = Vec::with_capacity(attacks.len());
    for a in attacks {
        let f = robust_flags(model, data, a, batch_size)?;
        member_accuracy.push(fraction(&f));
        for (acc, v) in flags.iter_mut().zip(f) {
            *acc &= v;
        }
    }
    Ok(EnsembleResult {
        member_accuracy,
        accuracy: fraction(&flags),
        flags,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingCurves {
    pub eps: Vec<f64>,
    /// PGD-7 accuracy per radius.
    pub pgd_accuracy: Vec<f64>,
    /// Mean cross-entropy at the FGSM point per radius.
    pub fgsm_loss: Vec<f64>,
    /// Coefficient of determination of a least-squares line through
    /// `(eps, fgsm_loss)`.
    pub loss_r_squared: f64,
    pub flags: Vec<String>,
}

/// Coefficient of determination of the least-squares line through the points.
pub fn linear_fit_r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

pub const MASKING_MAX_ACCURACY: f64 = 0.02;
pub const MASKING_MIN_R_SQUARED: f64 = 0.9;

/// Accuracy-vs-ε under PGD-7 and FGSM loss-vs-ε. Flags are raised when the
/// largest radius is at least four times `train_eps` yet accuracy there
/// exceeds 2%, and when the loss curve is not close to linear.
pub fn masking_report<T: Scalar, M: Differentiable<T>>(
    model: &M,
    data: &ImageSet<T>,
    eps_grid: &[f64],
    train_eps: f64,
    batch_size: usize,
    seed: u64,
) -> Result<MaskingCurves> {
    if eps_grid.is_empty() || eps_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("eps_grid must be non-empty and ascending".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("masking report on an empty dataset".into()));
    }
    let mut pgd_accuracy = Vec::new();
    let mut fgsm_loss = Vec::new();
    for &eps in eps_grid {
        let mut correct = 0usize;
        let mut loss = 0.0;
        for b in data.batches(batch_size, None) {
            let (adv, fg) = if eps == 0.0 {
                (b.pixels.clone(), b.pixels.clone())
            } else {
                let threat = ThreatModel::linf(eps)?;
                let spec = AttackSpec {
                    init: Init::Uniform { radius: eps },
                    seed,
                    ..AttackSpec::pgd(threat, 7)
                };
                let d = pgd(model, &b, &spec, Aux::None)?;
                let f = fgsm(model, &b, &threat)?;
                (&b.pixels + &d.delta, &b.pixels + &f.delta)
            };
            correct += correct_flags(&model.logits(&adv)?, &b.labels).iter().filter(|&&c| c).count();
            let ce = cross_entropy(&model.logits(&fg)?, &b.labels, T::zero())?;
            loss += ce.per_sample.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        pgd_accuracy.push(correct as f64 / data.len() as f64);
        fgsm_loss.push(loss / data.len() as f64);
    }
    let loss_r_squared = linear_fit_r_squared(eps_grid, &fgsm_loss);
    let mut flags = Vec::new();
    let last = *eps_grid.last().expect("non-empty");
    let last_acc = *pgd_accuracy.last().expect("non-empty");
    if last >= 4.0 * train_eps && last_acc > MASKING_MAX_ACCURACY {
        flags.push(format!(
            "accuracy {last_acc:.4} at eps {last:.4} exceeds {MASKING_MAX_ACCURACY}: possible gradient masking"
        ));
    }
    if loss_r_squared < MASKING_MIN_R_SQUARED {
        flags.push(format!("FGSM loss curve R^2 {loss_r_squared:.4} below {MASKING_MIN_R_SQUARED}"));
    }
    Ok(MaskingCurves {
        eps: eps_grid.to_vec(),
        pgd_accuracy,
        fgsm_loss,
        loss_r_squared,
        flags,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastGain {
    pub bin_index: usize,
    pub size: usize,
    pub mean_contrast: f64,
    pub model_accuracy: f64,
    pub baseline_accuracy: f64,
    pub gain: f64,
}

/// Robust accuracy of two models on each contrast bin.
pub fn contrast_subset_eval<T: Scalar, M: Differentiable<T>, B: Differentiable<T>>(
    model: &M,
    baseline: &B,
    data: &ImageSet<T>,
    attack: &EvalAttack,
    n_bins: usize,
    batch_size: usize,
    pooled: bool,
) -> Result<Vec<ContrastGain>> {
    if model.n_classes() != baseline.n_classes() {
        return Err(Error::InvalidArgument("models disagree on the class count".into()));
    }
    let bins = bin_by_contrast(&contrast_scores(data, pooled)?, n_bins)?;
    let mine = robust_flags(model, data, attack, batch_size)?;
    let theirs = robust_flags(baseline, data, attack, batch_size)?;
    Ok(bins
        .into_iter()
        .map(|b| {
            let pick = |f: &[bool]| fraction(&b.sample_indices.iter().map(|&i| f[i]).collect::<Vec<_>>());
            let (m, base) = (pick(&mine), pick(&theirs));
            ContrastGain {
                bin_index: b.bin_index,
                size: b.sample_indices.len(),
                mean_contrast: b.mean_contrast,
                model_accuracy: m,
                baseline_accuracy: base,
                gain: m - base,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustEntry {
    pub attack: String,
    pub eps: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_samples: usize,
    pub clean_acc: f64,
    pub robust_acc: Vec<RobustEntry>,
    pub masking: Option<MaskingCurves>,
    pub contrast_gains: Option<Vec<ContrastGain>>,
}

impl EvalReport {
    /// Robust accuracy keyed by `(attack, eps)`.
    pub fn robust_map(&self) -> BTreeMap<(String, String), f64> {
        self.robust_acc
            .iter()
            .map(|e| ((e.attack.clone(), format!("{:.6}", e.eps)), e.accuracy))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// One `metric,attack,eps,value` row per number in the report.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,attack,eps,value\n");
        let _ = writeln!(s, "clean_acc,,0,{}", self.clean_acc);
        for e in &self.robust_acc {
            let _ = writeln!(s, "robust_acc,{},{},{}", e.attack, e.eps, e.accuracy);
        }
        if let Some(m) = &self.masking {
            for ((eps, a), l) in m.eps.iter().zip(&m.pgd_accuracy).zip(&m.fgsm_loss) {
                let _ = writeln!(s, "masking_pgd7_acc,pgd7-ce,{eps},{a}");
                let _ = writeln!(s, "masking_fgsm_loss,fgsm,{eps},{l}");
            }
            let _ = writeln!(s, "masking_r_squared,fgsm,,{}", m.loss_r_squared);
        }
        if let Some(g) = &self.contrast_gains {
            for b in g {
                let _ = writeln!(s, "contrast_gain_bin{},,{},{}", b.bin_index, b.mean_contrast, b.gain);
            }
        }
        s
    }
}

/// Clean accuracy plus every member of `attacks` and, when there is more
/// than one, their intersection under the name `ensemble`.
pub fn evaluate<T: Scalar, M: Differentiable<T>>(
    model: &M,
    data: &ImageSet<T>,
    attacks: &[EvalAttack],
    batch_size: usize,
) -> Result<EvalReport> {
    let clean_acc = clean_accuracy(model, data, batch_size)?;
    let mut robust_acc = Vec::new();
    if !attacks.is_empty() {
        let ens = ensemble_accuracy(model, data, attacks, batch_size)?;
        for (a, acc) in attacks.iter().zip(&ens.member_accuracy) {
            robust_acc.push(RobustEntry {
                attack: a.name(),
                eps: a.eps(),
                accuracy: *acc,
            });
        }
        if attacks.len() > 1 {
            robust_acc.push(RobustEntry {
                attack: "ensemble".into(),
                eps: attacks.iter().map(EvalAttack::eps).fold(0.0, f64::max),
                accuracy: ens.accuracy,
            });
        }
    }
    Ok(EvalReport {
        label: DESK_ENSEMBLE.into(),
        n_samples: data.len(),
        clean_acc,
        robust_acc,
        masking: None,
        contrast_gains: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::nn::{Network, NetworkConfig};

    fn setup() -> (Network<f64>, ImageSet<f64>) {
        let spec = SyntheticSpec {
            height: 8,
            width: 8,
            n_pool: 40,
            n_test: 30,
            ..SyntheticSpec::default()
        };
        let (_, test) = spec.generate::<f64>().unwrap();
        (Network::new(NetworkConfig::new(3, 4, vec![4, 6]), 2).unwrap(), test)
    }

    #[test]
    fn zero_step_attack_and_singleton_ensemble() {
        let (net, data) = setup();
        let t = ThreatModel::linf(0.03).unwrap();
        let zero = EvalAttack::Pgd {
            spec: AttackSpec::pgd(t, 0),
        };
        let clean = clean_accuracy(&net, &data, 8).unwrap();
        assert_eq!(robust_accuracy(&net, &data, &zero, 8).unwrap(), clean);
        let a = EvalAttack::Fgsm { threat: t };
        let single = ensemble_accuracy(&net, &data, std::slice::from_ref(&a), 8).unwrap();
        assert_eq!(single.accuracy, robust_accuracy(&net, &data, &a, 8).unwrap());
    }

    #[test]
    fn ensemble_is_at_most_every_member_and_leaves_parameters_alone() {
        let (net, data) = setup();
        let before = net.params().checksum();
        let attacks = desk_ensemble(ThreatModel::linf(0.05).unwrap(), 1)
            .into_iter()
            .map(|a| match a {
                EvalAttack::Pgd { spec } => EvalAttack::Pgd {
                    spec: AttackSpec { steps: 5, ..spec },
                },
                EvalAttack::Square { threat, config } => EvalAttack::Square {
                    threat,
                    config: SquareConfig { n_queries: 20, ..config },
                },
                other => other,
            })
            .collect::<Vec<_>>();
        let r = ensemble_accuracy(&net, &data, &attacks, 8).unwrap();
        assert!(r.member_accuracy.iter().all(|&m| r.accuracy <= m));
        assert_eq!(net.params().checksum(), before);
        let again = ensemble_accuracy(&net, &data, &attacks, 8).unwrap();
        assert_eq!(again.flags, r.flags);
    }

    #[test]
    fn masking_zero_point_and_grid_validation() {
        let (net, data) = setup();
        let m = masking_report(&net, &data, &[0.0, 0.05, 0.1], 0.05, 16, 0).unwrap();
        assert_eq!(m.pgd_accuracy[0], clean_accuracy(&net, &data, 16).unwrap());
        let logits = net.predict(&data.pixels).unwrap();
        let ce = cross_entropy(&logits, &data.labels, 0.0).unwrap();
        assert!((m.fgsm_loss[0] - ce.mean()).abs() < 1e-12);
        assert!(masking_report(&net, &data, &[0.1, 0.05], 0.05, 16, 0).is_err());
    }

    #[test]
    fn r_squared_of_exact_line_is_one() {
        let x = [0.0, 1.0, 2.0, 3.0];
        assert!((linear_fit_r_squared(&x, &[1.0, 3.0, 5.0, 7.0]) - 1.0).abs() < 1e-15);
        assert!(linear_fit_r_squared(&x, &[1.0, -1.0, 1.0, -1.0]) < 0.5);
    }

    #[test]
    fn self_comparison_and_partition_consistency() {
        let (net, data) = setup();
        let a = EvalAttack::Fgsm {
            threat: ThreatModel::linf(0.02).unwrap(),
        };
        let gains = contrast_subset_eval(&net, &net, &data, &a, 10, 8, false).unwrap();
        assert_eq!(gains.len(), 10);
        assert!(gains.iter().all(|g| g.gain == 0.0));
        let whole = robust_accuracy(&net, &data, &a, 8).unwrap();
        let recomposed: f64 = gains.iter().map(|g| g.size as f64 * g.model_accuracy).sum::<f64>() / data.len() as f64;
        assert!((recomposed - whole).abs() < 1e-12);
    }

    #[test]
    fn report_serialises() {
        let (net, data) = setup();
        let r = evaluate(&net, &data, &[EvalAttack::Fgsm { threat: ThreatModel::linf(0.02).unwrap() }], 8).unwrap();
        let json = r.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(r.to_csv().starts_with("metric,attack,eps,value\nclean_acc"));
        assert_eq!(r.label, DESK_ENSEMBLE);
    }
}
