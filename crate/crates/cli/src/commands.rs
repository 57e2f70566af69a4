use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use oaat::attacks::{pgd, Aux};
use oaat::checkpoint::{self, Checkpoint};
use oaat::config::ExperimentConfig;
use oaat::contrast::{bin_by_contrast, contrast_scores};
use oaat::data::{load_dataset, write_byte_records, ImageSet};
use oaat::evaluation::{contrast_subset_eval, evaluate, masking_report, EvalAttack, EvalReport};
use oaat::nn::{loss::argmax_rows, Differentiable, Network};
use oaat::theory::{self, LinearClassifier, SyntheticDistribution};
use oaat::training::{metrics_csv, train as run_training, TrainSetup, Variant};
use oaat::{rng, Error, Scalar};

use crate::error::{CliError, CliResult};
use crate::run::{self, one, read_manifest, RunDir, CONFIG};
use crate::{AttackArgs, ContrastArgs, EvalArgs, Global, ModelSource, PlotdataArgs, Split, TheoryArgs, TrainArgs};

const METRICS: &str = "metrics.csv";

fn json<S: serde::Serialize>(v: &S) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::InvalidArgument(e.to_string()).into())
}

fn csv_rows(rows: &[oaat::training::EpochMetrics]) -> String {
    metrics_csv(rows).split_once('\n').map(|(_, body)| body.to_string()).unwrap_or_default()
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.apply_root_seed(s);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn split<T: Scalar>(cfg: &ExperimentConfig, which: Split) -> CliResult<ImageSet<T>> {
    let s = load_dataset::<T>(&cfg.data)?;
    Ok(match which {
        Split::Train => s.train,
        Split::Val => s.val,
        Split::Test => s.test,
    })
}

pub fn train<T: Scalar>(g: &Global, a: &TrainArgs) -> CliResult<()> {
    let (run, cfg, resume, variant) = match &a.resume {
        Some(id) => {
            if g.seed.is_some() {
                return Err(CliError::Usage("--seed cannot be combined with --resume".into()));
            }
            let (run, text) = RunDir::open(&g.out, id)?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            let recorded = read_manifest(&run.path)?
                .into_iter()
                .find_map(|m| m.variant)
                .ok_or_else(|| Error::data(run.file(run::MANIFEST), "no variant recorded"))?;
            let variant: Variant = recorded.parse()?;
            if a.variant.is_some_and(|v| v != variant) {
                return Err(CliError::Usage(format!("run {id} was started with --variant {variant}")));
            }
            let resume = match checkpoint::latest_in(&run.path)? {
                Some(p) => {
                    let c: Checkpoint<T> = checkpoint::load(&p)?;
                    if c.config_hash != run.config_hash || c.variant != variant {
                        return Err(Error::data(&p, "checkpoint belongs to a different config or variant").into());
                    }
                    log::info!("resuming {id} from {}", p.display());
                    Some((c.state, c.metrics))
                }
                None => None,
            };
            (run, cfg, resume, variant)
        }
        None => {
            let path = a.config.as_ref().expect("clap requires --config without --resume");
            let cfg = load_config(path, g.seed)?;
            let variant = a.variant.unwrap_or(Variant::Oaat);
            let run = RunDir::create(&g.out, variant.as_str(), CONFIG, &cfg.to_toml_string()?)?;
            let header = metrics_csv(&[]);
            let metrics_path = run.write_new(METRICS, header.as_bytes())?;
            let mut artifacts = one("config", run.file(CONFIG));
            artifacts.insert("metrics".into(), metrics_path);
            run.record(artifacts, Some(variant.to_string()))?;
            (run, cfg, None, variant)
        }
    };
    println!("{}", run.id);
    if let Some((_, m)) = &resume {
        let written = std::fs::read_to_string(run.file(METRICS)).map_err(|e| Error::io(run.file(METRICS), e))?;
        if written.lines().count() != m.len() + 1 {
            log::warn!("{METRICS} holds rows beyond the last checkpoint; later rows repeat those epochs");
        }
    }
    let splits = load_dataset::<T>(&cfg.data)?;
    let (c, _, _) = splits.train.image_dim();
    log::info!(
        "{variant}: {} train, {} val images, {} epochs",
        splits.train.len(),
        splits.val.len(),
        cfg.schedule.total_epochs
    );
    let setup = TrainSetup {
        config: &cfg.schedule,
        options: &cfg.training,
        variant,
        network: cfg.model.network(c, splits.train.n_classes),
        train: &splits.train,
        val: &splits.val,
    };
    let variant_name = variant.to_string();
    let mut on_epoch = |state: &oaat::training::ModelState<T>, metrics: &[oaat::training::EpochMetrics]| {
        let ck = run.file(&checkpoint::file_name(state.epoch));
        checkpoint::save(&ck, state, &run.config_hash, variant, metrics)?;
        let mp = run.append(METRICS, &csv_rows(&metrics[metrics.len() - 1..]))?;
        let mut artifacts = one(&format!("checkpoint_epoch_{}", state.epoch), ck);
        artifacts.insert("metrics".into(), mp);
        run.record(artifacts, Some(variant_name.clone()))?;
        let m = &metrics[metrics.len() - 1];
        log::info!(
            "epoch {}: eps {:.5} lr {:.5} loss {:.4} (ce {:.4}, adv {:.4}) val clean {} robust {}",
            m.epoch,
            m.eps_tilde,
            m.lr,
            m.total,
            m.ce_clean,
            m.l_adv,
            m.val_clean_acc.map_or("-".into(), |v| format!("{v:.4}")),
            m.val_robust_acc.map_or("-".into(), |v| format!("{v:.4}")),
        );
        Ok(())
    };
    let outcome = run_training(&setup, resume, a.stop_after_epoch, &mut on_epoch)?;
    if outcome.interrupted {
        log::info!("stopped after epoch {}; continue with --resume {}", outcome.state.epoch, run.id);
    } else {
        log::info!("finished {} epochs in run {}", outcome.state.epoch, run.id);
    }
    Ok(())
}

struct Loaded<T> {
    cfg: ExperimentConfig,
    model: Network<T>,
    checkpoint: PathBuf,
}

fn pick<T: Scalar>(c: &Checkpoint<T>, use_ewa: bool) -> Network<T> {
    if use_ewa {
        c.state.shadow_network()
    } else {
        c.state.network.clone()
    }
}

fn load_model<T: Scalar>(g: &Global, src: &ModelSource) -> CliResult<Loaded<T>> {
    let (run_cfg, ckpt) = match &src.run {
        Some(id) => {
            let (run, text) = RunDir::open(&g.out, id)?;
            let ck = checkpoint::latest_in(&run.path)?
                .ok_or_else(|| Error::InvalidArgument(format!("run {id} has no checkpoint yet")))?;
            (Some(ExperimentConfig::from_toml_str(&text)?), ck)
        }
        None => (None, src.checkpoint.clone().expect("clap requires --checkpoint without --run")),
    };
    let mut cfg = match (&src.config, run_cfg) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(c)) => c,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.apply_root_seed(s);
        cfg.validate()?;
    }
    let c: Checkpoint<T> = checkpoint::load(&ckpt)?;
    Ok(Loaded {
        model: pick(&c, cfg.eval.use_ewa),
        cfg,
        checkpoint: ckpt,
    })
}

fn check_classes<T: Scalar>(model: &Network<T>, data: &ImageSet<T>) -> CliResult<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("the test split is empty".into()).into());
    }
    if model.n_classes() != data.n_classes {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes but the data has {}",
            model.n_classes(),
            data.n_classes
        ))
        .into());
    }
    Ok(())
}

pub fn eval<T: Scalar>(g: &Global, a: &EvalArgs) -> CliResult<()> {
    let l = load_model::<T>(g, &a.source)?;
    let cfg = &l.cfg;
    let test = split::<T>(cfg, Split::Test)?;
    check_classes(&l.model, &test)?;
    let run = RunDir::create(&g.out, "eval", CONFIG, &cfg.to_toml_string()?)?;
    println!("{}", run.id);
    let attacks = cfg.eval.attacks();
    let bs = cfg.eval.batch_size;
    log::info!("evaluating {} on {} test images", l.checkpoint.display(), test.len());
    let mut report = evaluate(&l.model, &test, &attacks, bs)?;
    if !cfg.eval.masking_eps.is_empty() {
        report.masking = Some(masking_report(
            &l.model,
            &test,
            &cfg.eval.masking_eps,
            cfg.schedule.eps_max,
            bs,
            cfg.eval.seed,
        )?);
    }
    if let Some(bp) = &a.baseline {
        let base = pick(&checkpoint::load::<T>(bp)?, cfg.eval.use_ewa);
        check_classes(&base, &test)?;
        let attack = attacks
            .iter()
            .find(|a| matches!(a, EvalAttack::Pgd { .. }))
            .ok_or_else(|| Error::Config(vec!["eval.eps must name at least one radius".into()]))?;
        report.contrast_gains = Some(contrast_subset_eval(
            &l.model,
            &base,
            &test,
            attack,
            cfg.eval.contrast_bins,
            bs,
            cfg.eval.contrast_pooled,
        )?);
    }
    for e in &report.robust_acc {
        log::info!("{:<28} eps {:.5}: {:.4}", e.attack, e.eps, e.accuracy);
    }
    if let Some(m) = &report.masking {
        for f in &m.flags {
            log::warn!("{f}");
        }
    }
    let mut artifacts = BTreeMap::new();
    artifacts.insert("config".into(), run.file(CONFIG));
    artifacts.insert("model_checkpoint".into(), l.checkpoint.clone());
    artifacts.insert("report_json".into(), run.write_new("report.json", report.to_json()?.as_bytes())?);
    artifacts.insert("report_csv".into(), run.write_new("report.csv", report.to_csv().as_bytes())?);
    run.record(artifacts, None)?;
    Ok(())
}

pub fn attack<T: Scalar>(g: &Global, a: &AttackArgs) -> CliResult<()> {
    let l = load_model::<T>(g, &a.source)?;
    let cfg = &l.cfg;
    let test = split::<T>(cfg, Split::Test)?;
    check_classes(&l.model, &test)?;
    let run = RunDir::create(&g.out, "attack", CONFIG, &cfg.to_toml_string()?)?;
    println!("{}", run.id);
    let base = cfg.attack.spec();
    let mut adv = test.pixels.clone();
    let mut csv = String::from("index,label,clean_pred,adv_pred,clean_correct,success,linf,l2\n");
    let mut n_success = 0usize;
    let mut start = 0usize;
    for (bi, idx) in test.batch_indices(cfg.eval.batch_size, None).into_iter().enumerate() {
        let b = test.batch(&idx)?;
        let spec = oaat::attacks::AttackSpec {
            seed: rng::derive_seed(base.seed, rng::ATTACK, &[bi as u64]),
            ..base
        };
        let d = pgd(&l.model, &b, &spec, Aux::None)?;
        let x_adv = &b.pixels + &d.delta;
        let clean = argmax_rows(&l.model.logits(&b.pixels)?);
        let pred = argmax_rows(&l.model.logits(&x_adv)?);
        for (k, row) in d.delta.axis_iter(Axis(0)).enumerate() {
            let linf = row.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy().abs()));
            let l2 = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            let y = b.labels[k];
            let success = pred[k] != y;
            n_success += usize::from(success);
            let _ = writeln!(
                csv,
                "{},{y},{},{},{},{success},{linf},{l2}",
                start + k,
                clean[k],
                pred[k],
                clean[k] == y
            );
        }
        adv.slice_mut(ndarray::s![start..start + idx.len(), .., .., ..]).assign(&x_adv);
        start += idx.len();
    }
    log::info!("attack succeeded on {n_success} of {} images", test.len());
    let archive = run.file("adversarial.bin");
    write_byte_records(&archive, &adv, &test.labels)?;
    let (c, h, w) = test.image_dim();
    let sidecar = serde_json::json!({
        "format": "one label byte, then C*H*W pixel bytes (value*255 rounded) per image",
        "n_images": test.len(),
        "channels": c, "height": h, "width": w,
        "attack": base,
    });
    let mut artifacts = BTreeMap::new();
    artifacts.insert("config".into(), run.file(CONFIG));
    artifacts.insert("model_checkpoint".into(), l.checkpoint.clone());
    artifacts.insert("adversarial_archive".into(), archive);
    artifacts.insert("adversarial_layout".into(), run.write_new("adversarial.json", json(&sidecar)?.as_bytes())?);
    artifacts.insert("summary_csv".into(), run.write_new("attack.csv", csv.as_bytes())?);
    run.record(artifacts, None)?;
    Ok(())
}

pub fn theory(g: &Global, a: &TheoryArgs) -> CliResult<()> {
    let dist = SyntheticDistribution::new(a.p, a.alpha, a.d)?;
    let eps = a.eps.unwrap_or(2.0 * a.alpha);
    let seed = g.seed.unwrap_or(0);
    let args = serde_json::json!({ "args": a, "eps": eps, "seed": seed });
    let run = RunDir::create(&g.out, "theory", "args.json", &json(&args)?)?;
    println!("{}", run.id);
    let (x, y) = dist.sample(a.n, rng::derive_seed(seed, "theory-eval", &[]))?;
    let (xt, yt) = dist.sample(a.n, rng::derive_seed(seed, "theory-fit", &[]))?;
    let erm = theory::train_logistic(&xt, &yt, &theory::ErmConfig::default())?;
    let spurious = LinearClassifier::spurious(&dist);
    let oracle = LinearClassifier::oracle(&dist);
    let rows: Vec<(&str, f64, Option<f64>, Option<f64>)> = vec![
        ("spurious_accuracy", 0.0, Some(theory::spurious_classifier_accuracy(&dist)), Some(spurious.accuracy(&x, &y))),
        (
            "spurious_robust_accuracy",
            eps,
            Some(theory::spurious_classifier_robust_accuracy(&dist, eps)?),
            Some(spurious.robust_accuracy(&x, &y, eps)),
        ),
        ("oracle_accuracy", 0.0, Some(theory::oracle_classifier_accuracy(&dist)), Some(oracle.accuracy(&x, &y))),
        (
            "oracle_robust_accuracy",
            eps,
            Some(theory::oracle_classifier_robust_accuracy(&dist, eps)?),
            Some(oracle.robust_accuracy(&x, &y, eps)),
        ),
        ("erm_accuracy", 0.0, None, Some(erm.accuracy(&x, &y))),
        ("erm_robust_accuracy", eps, None, Some(erm.robust_accuracy(&x, &y, eps))),
    ];
    let mut rows = rows;
    if let Some(gamma) = a.gamma {
        rows.push(("robust_accuracy_bound", eps, Some(theory::tsipras_bound(a.p, gamma)?), None));
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut table = String::from("quantity,eps,closed_form,monte_carlo,abs_error\n");
    for (name, e, closed, mc) in &rows {
        let err = closed.zip(*mc).map(|(c, m)| (c - m).abs());
        let _ = writeln!(table, "{name},{e},{},{},{}", opt(*closed), opt(*mc), opt(err));
    }
    let mut mass = String::from("classifier,eps,frac_feature0,frac_spurious\n");
    let profile_seed = rng::derive_seed(seed, "theory-mass", &[]);
    for (name, c) in [("spurious", &spurious), ("oracle", &oracle), ("erm", &erm)] {
        let (f0, fs) = theory::perturbation_mass_profile(c, &dist, eps, a.n, profile_seed)?;
        let _ = writeln!(mass, "{name},{eps},{f0},{fs}");
    }
    print!("{table}");
    let mut artifacts = one("args", run.file("args.json"));
    artifacts.insert("theory_csv".into(), run.write_new("theory.csv", table.as_bytes())?);
    artifacts.insert("mass_profile_csv".into(), run.write_new("mass_profile.csv", mass.as_bytes())?);
    run.record(artifacts, None)?;
    Ok(())
}

pub fn contrast(g: &Global, a: &ContrastArgs) -> CliResult<()> {
    let cfg = load_config(&a.config, g.seed)?;
    let set = split::<f64>(&cfg, a.split)?;
    let n_bins = a.bins.unwrap_or(cfg.eval.contrast_bins);
    let scores = contrast_scores(&set, a.pooled)?;
    let bins = bin_by_contrast(&scores, n_bins)?;
    let mut bin_of = vec![0usize; scores.len()];
    for b in &bins {
        for &i in &b.sample_indices {
            bin_of[i] = b.bin_index;
        }
    }
    let mut csv = String::from("index,label,score,bin\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{s},{}", set.labels[i], bin_of[i]);
    }
    let run = RunDir::create(&g.out, "contrast", CONFIG, &cfg.to_toml_string()?)?;
    println!("{}", run.id);
    let mut artifacts = one("config", run.file(CONFIG));
    artifacts.insert("contrast_csv".into(), run.write_new("contrast.csv", csv.as_bytes())?);
    run.record(artifacts, None)?;
    Ok(())
}

pub fn plotdata(g: &Global, a: &PlotdataArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.report).map_err(|e| Error::io(&a.report, e))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::data(&a.report, e.to_string()))?;
    let args = serde_json::json!({ "report": a.report });
    let run = RunDir::create(&g.out, "plotdata", "args.json", &json(&args)?)?;
    println!("{}", run.id);
    let mut artifacts = one("report", a.report.clone());
    match &report.masking {
        Some(m) => {
            let mut csv = String::from("eps,pgd7_accuracy,fgsm_loss\n");
            for ((e, acc), loss) in m.eps.iter().zip(&m.pgd_accuracy).zip(&m.fgsm_loss) {
                let _ = writeln!(csv, "{e},{acc},{loss}");
            }
            artifacts.insert("masking_csv".into(), run.write_new("masking.csv", csv.as_bytes())?);
        }
        None => log::warn!("report has no masking curves"),
    }
    match &report.contrast_gains {
        Some(gains) => {
            let mut csv = String::from("bin,size,mean_contrast,model_accuracy,baseline_accuracy,gain\n");
            for b in gains {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    b.bin_index, b.size, b.mean_contrast, b.model_accuracy, b.baseline_accuracy, b.gain
                );
            }
            artifacts.insert("contrast_gains_csv".into(), run.write_new("contrast_gains.csv", csv.as_bytes())?);
        }
        None => log::warn!("report has no contrast gains"),
    }
    run.record(artifacts, None)?;
    Ok(())
}
