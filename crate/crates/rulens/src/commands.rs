//! Command implementations behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Result};
use rulens_core::cmapss::{normalize_units, UnitFeatures};
use rulens_core::ensemble::{
    dataset_uncertainty_profile, member_seed, predict_ensemble, train_member, window_uncertainty_profile,
};
use rulens_core::metrics::{evaluate_on_test, interval_bounds};
use rulens_core::nn::{PnnParams, TrainHistory};
use serde::Serialize;

use crate::archive::{self, read_cmapss, Dataset};
use crate::checkpoint::{self, reusable_member, write_member, Checkpoint, MemberSpec};
use crate::cli::Split;
use crate::config::RunConfig;
use crate::report::{self, DatasetUncertainty};
use crate::util::{id_ranges, write_atomic, write_json, Provenance, Tsv, UserError};

pub struct Context {
    pub config: RunConfig,
    pub force: bool,
    pub resume: bool,
}

impl Context {
    fn out(&self, sub: &str) -> PathBuf {
        self.config.output.dir.join(sub)
    }

    fn archive_dir(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.out("dataset"))
    }

    fn checkpoint_dir(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.out("checkpoint"))
    }

    fn provenance(&self, command: &'static str, fingerprints: Vec<(&'static str, String)>) -> Provenance {
        Provenance {
            command,
            fingerprints,
            config_toml: self.config.to_toml(),
        }
    }
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Machine-readable output with the resolved config and fingerprints.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'static str,
    version: u32,
    command: &'static str,
    fingerprints: std::collections::BTreeMap<&'static str, &'a str>,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn envelope<'a, T: Serialize>(
    command: &'static str,
    prov: &'a Provenance,
    config: &'a RunConfig,
    body: T,
) -> Envelope<'a, T> {
    Envelope {
        schema: "rulens-output",
        version: 1,
        command,
        fingerprints: prov.fingerprints.iter().map(|(k, v)| (*k, v.as_str())).collect(),
        config,
        body,
    }
}

pub fn ingest(
    ctx: &Context,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    rul: Option<PathBuf>,
    archive: Option<PathBuf>,
) -> Result<()> {
    let data = &ctx.config.data;
    let train = train
        .or_else(|| data.train.clone())
        .ok_or_else(|| anyhow!(UserError::new("no training file: pass --train or set data.train")))?;
    let test = test.or_else(|| data.test.clone());
    let rul = rul.or_else(|| data.rul.clone());
    let dir = ctx.archive_dir(archive);
    if dir.join(archive::MANIFEST).exists() || is_nonempty_dir(&dir) {
        if !ctx.force {
            bail!(UserError::new(format!(
                "{} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    let mut ds = Dataset::ingest(&train, test.as_deref(), rul.as_deref(), &ctx.config.preprocess)?;
    ds.manifest.config = Some(ctx.config.clone());
    ds.write(&dir)?;
    let m = &ds.manifest;
    println!(
        "{} train units, {} test units, {} training windows, {} features ({})",
        m.train_units.len(),
        m.test_units.len(),
        m.train_windows,
        m.feature_names.len(),
        m.feature_names.join(", ")
    );
    if !m.skipped_train_units.is_empty() {
        println!(
            "skipped training units shorter than {} cycles: {}",
            m.preprocess.window_length,
            id_ranges(&m.skipped_train_units)
        );
    }
    println!("archive {} (fingerprint {})", dir.display(), m.fingerprint);
    Ok(())
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let n = if requested == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        requested
    };
    n.clamp(1, jobs.max(1))
}

fn log_member(index: usize, seed: u64, h: &TrainHistory, reused: bool) {
    log::info!(
        "member {index} (seed {seed}){}: best loss {:.6} at epoch {}, stopped after epoch {} ({:?}), {} clipped steps",
        if reused { " reused" } else { "" },
        h.best_loss(),
        h.best_epoch,
        h.stop_epoch,
        h.stop_reason,
        h.clipped_steps
    );
}

pub fn train(ctx: &Context, archive: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    let ds = Dataset::read(&ctx.archive_dir(archive))?;
    let architecture = cfg.model.architecture(ds.layout().len())?;
    let dir = ctx.checkpoint_dir(checkpoint);
    if is_nonempty_dir(&dir) {
        if ctx.force {
            fs::remove_dir_all(&dir)?;
        } else if !ctx.resume {
            bail!(UserError::new(format!(
                "{} already exists; pass --resume to continue it or --force to replace it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir)?;
    let manifest_path = dir.join(checkpoint::ENSEMBLE_MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }

    let m = cfg.ensemble.members;
    let specs: Vec<MemberSpec> = (0..m)
        .map(|index| MemberSpec {
            index,
            seed: member_seed(cfg.ensemble.base_seed, index),
            architecture: architecture.clone(),
            training: cfg.training.clone(),
            data_fingerprint: ds.fingerprint().to_string(),
        })
        .collect();
    // Members beyond the requested count belong to an earlier, larger run.
    for entry in fs::read_dir(&dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix("member_").and_then(|k| k.parse::<usize>().ok()) {
            if k >= m {
                fs::remove_dir_all(dir.join(&name))?;
            }
        }
    }

    let mut results: Vec<Option<(PnnParams, TrainHistory)>> = specs
        .iter()
        .map(|s| if ctx.resume { reusable_member(&dir, s) } else { None })
        .collect();
    for (s, r) in specs.iter().zip(&results) {
        if let Some((_, h)) = r {
            log_member(s.index, s.seed, h, true);
        }
    }
    let todo: Vec<usize> = (0..m).filter(|&k| results[k].is_none()).collect();
    let workers = worker_count(cfg.ensemble.threads, todo.len());
    log::info!(
        "training {} of {m} members ({} windows, {} parameters each) on {workers} thread(s)",
        todo.len(),
        ds.split.train.spans.len(),
        architecture.param_count()
    );

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let done = Mutex::new(Vec::new());
    let errors = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&k) = todo.get(i) else { break };
                let spec = &specs[k];
                let outcome = train_member(&architecture, &ds.split.train, &cfg.training, cfg.ensemble.base_seed, k)
                    .map_err(anyhow::Error::from)
                    .and_then(|(p, h)| {
                        write_member(&dir, spec, &p, &h)?;
                        Ok((p, h))
                    });
                match outcome {
                    Ok((p, h)) => {
                        log_member(k, spec.seed, &h, false);
                        done.lock().unwrap().push((k, p, h));
                    }
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        errors.lock().unwrap().push((k, e));
                    }
                }
            });
        }
    });
    let mut errors = errors.into_inner().unwrap();
    if !errors.is_empty() {
        errors.sort_by_key(|(k, _)| *k);
        let (k, e) = errors.remove(0);
        return Err(e.context(format!(
            "member {k} failed; finished members are kept in {}, rerun with --resume",
            dir.display()
        )));
    }
    for (k, p, h) in done.into_inner().unwrap() {
        results[k] = Some((p, h));
    }
    let members: Vec<(PnnParams, TrainHistory)> = results.into_iter().map(|r| r.expect("every member trained")).collect();

    let ck = Checkpoint::write(
        &dir,
        cfg,
        &architecture,
        &ds.split.norm_stats,
        &ds.manifest.norm_fingerprint,
        ds.fingerprint(),
        members,
    )?;
    let prov = ctx.provenance(
        "train",
        vec![
            ("checkpoint_fingerprint", ck.fingerprint().to_string()),
            ("data_fingerprint", ds.fingerprint().to_string()),
        ],
    );
    let mut hist = Tsv::new(&prov, &["member", "seed", "epoch", "loss"]);
    for (k, h) in ck.histories.iter().enumerate() {
        for (e, loss) in h.epoch_losses.iter().enumerate() {
            hist.row(&[k.to_string(), ck.model.member_seeds[k].to_string(), (e + 1).to_string(), loss.to_string()]);
        }
    }
    hist.write(&dir.join("history.tsv"))?;
    println!(
        "{} members (seeds {}..={}) in {} (fingerprint {})",
        ck.model.len(),
        ck.model.member_seeds[0],
        ck.model.member_seeds[ck.model.len() - 1],
        dir.display(),
        ck.fingerprint()
    );
    Ok(())
}

/// Loads checkpoint and archive and refuses when the archive was normalized
/// with different statistics than the checkpoint was trained on.
fn load_pair(ctx: &Context, archive: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<(Checkpoint, Dataset)> {
    let ck = Checkpoint::read(&ctx.checkpoint_dir(checkpoint))?;
    let ds = Dataset::read(&ctx.archive_dir(archive))?;
    if ck.manifest.norm_fingerprint != ds.manifest.norm_fingerprint {
        bail!(UserError::new(format!(
            "the archive was normalized with different statistics than the checkpoint was trained on \
             (archive {}, checkpoint {}); ingest the test data together with the training file used for the checkpoint",
            ds.manifest.norm_fingerprint, ck.manifest.norm_fingerprint
        )));
    }
    Ok((ck, ds))
}

pub fn evaluate(ctx: &Context, archive: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let (ck, ds) = load_pair(ctx, archive, checkpoint)?;
    let units = &ds.split.test_units;
    if units.is_empty() {
        bail!(UserError::new("the archive has no test units; ingest with --test and --rul"));
    }
    if units.iter().any(|u| u.true_final_rul.is_none()) {
        bail!(UserError::new("the archive's test units have no true RUL; ingest with --rul"));
    }
    let eval_cfg = ctx.config.evaluation.metrics();
    let ev = evaluate_on_test(&ck.model, units, &eval_cfg)?;
    let prov = ctx.provenance(
        "evaluate",
        vec![
            ("checkpoint_fingerprint", ck.fingerprint().to_string()),
            ("data_fingerprint", ds.fingerprint().to_string()),
        ],
    );
    let out = ctx.out("evaluation");
    let reference = ctx.config.evaluation.reference.as_ref();
    let text = report::metric_report_text(&prov, &ev.report, reference);
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    #[derive(Serialize)]
    struct Body<'a> {
        report: &'a rulens_core::metrics::MetricReport,
        reference: Option<&'a crate::config::ReferenceRow>,
    }
    write_json(
        &out.join("report.json"),
        &envelope("evaluate", &prov, &ctx.config, Body { report: &ev.report, reference }),
    )?;
    report::predictions_table(&prov, &ev).write(&out.join("predictions.tsv"))?;
    let r = &ev.report;
    println!(
        "n={} rmse={:.4} score={:.2} ({} convention) picp={:.4} nmpiw={} alpha={}",
        r.n,
        r.rmse,
        r.score,
        r.score_convention.name(),
        r.picp,
        r.nmpiw.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}")),
        r.alpha
    );
    if let Some(row) = reference {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        println!(
            "reference ({}): rmse={} score={} picp={} nmpiw={}",
            row.label,
            f(row.rmse),
            f(row.score),
            f(row.picp),
            f(row.nmpiw)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_named(item: &str) -> Result<(String, PathBuf)> {
    match item.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            if name.contains(['/', '\\']) {
                bail!(UserError::new(format!("dataset name `{name}` may not contain path separators")));
            }
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => bail!(UserError::new(format!("`--test {item}` is not NAME=PATH"))),
    }
}

pub fn uncertainty(
    ctx: &Context,
    checkpoint: Option<PathBuf>,
    tests: &[String],
    archive: Option<PathBuf>,
    per_window: bool,
) -> Result<()> {
    let cfg = &ctx.config;
    let per_window = per_window || cfg.evaluation.per_window;
    let mut fingerprints = Vec::new();
    let (ck, datasets): (Checkpoint, Vec<(String, Vec<UnitFeatures>)>) = if tests.is_empty() {
        let (ck, ds) = load_pair(ctx, archive, checkpoint)?;
        fingerprints.push(("data_fingerprint", ds.fingerprint().to_string()));
        (ck, vec![("test".to_string(), ds.split.test_units)])
    } else {
        let ck = Checkpoint::read(&ctx.checkpoint_dir(checkpoint))?;
        let selection = ck.manifest.preprocess.selection();
        let mut sets = Vec::new();
        for item in tests {
            let (name, path) = parse_named(item)?;
            if sets.iter().any(|(n, _)| n == &name) {
                bail!(UserError::new(format!("dataset name `{name}` given twice")));
            }
            let (raw, sha) = read_cmapss(&path)?;
            let units = normalize_units(&raw, &selection, &ck.manifest.norm_stats)?;
            log::info!("{name}: {} units from {}", units.len(), path.display());
            fingerprints.push(("input_sha256", format!("{name} {sha}")));
            sets.push((name, units));
        }
        (ck, sets)
    };
    fingerprints.insert(0, ("checkpoint_fingerprint", ck.fingerprint().to_string()));
    let prov = ctx.provenance("uncertainty", fingerprints);
    let out = ctx.out("uncertainty");
    let pre = &ck.manifest.preprocess;

    let mut summaries: Vec<DatasetUncertainty> = Vec::new();
    for (name, units) in &datasets {
        let profile = if per_window {
            window_uncertainty_profile(&ck.model, units, pre.window_length, pre.stride)?
        } else {
            dataset_uncertainty_profile(&ck.model, units)?
        };
        report::profile_table(&prov, &profile).write(&out.join(format!("{name}_values.tsv")))?;
        let curves = report::summarize(name, &profile, cfg.evaluation.kde_grid);
        if let Some(c) = &curves.aleatoric {
            report::density_table(&prov, c).write(&out.join(format!("{name}_kde_aleatoric.tsv")))?;
        }
        if let Some(c) = &curves.epistemic {
            report::density_table(&prov, c).write(&out.join(format!("{name}_kde_epistemic.tsv")))?;
        }
        let s = &curves.summary;
        println!(
            "{name}: {} samples, mean u_al {:.6}, mean u_ep {:.6}",
            s.samples, s.mean_u_al, s.mean_u_ep
        );
        summaries.push(curves.summary);
    }
    report::summary_table(&prov, &summaries).write(&out.join("summary.tsv"))?;
    let ordering = report::ordering_lines(&summaries);
    #[derive(Serialize)]
    struct Body<'a> {
        per_window: bool,
        datasets: &'a [DatasetUncertainty],
        ordering: &'a [String],
    }
    write_json(
        &out.join("summary.json"),
        &envelope(
            "uncertainty",
            &prov,
            cfg,
            Body {
                per_window,
                datasets: &summaries,
                ordering: &ordering,
            },
        ),
    )?;
    let ordering_path = out.join("ordering.txt");
    if ordering.is_empty() {
        if ordering_path.exists() {
            fs::remove_file(&ordering_path)?;
        }
    } else {
        let mut text = prov.comment_block();
        for line in &ordering {
            println!("{line}");
            text.push_str(line);
            text.push('\n');
        }
        write_atomic(&ordering_path, text.as_bytes())?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn predict(
    ctx: &Context,
    unit_id: u32,
    split: Split,
    archive: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let (ck, ds) = load_pair(ctx, archive, checkpoint)?;
    let (units, truth): (&[UnitFeatures], Box<dyn Fn(&UnitFeatures) -> Option<Vec<f64>>>) = match split {
        Split::Test => (&ds.split.test_units, Box::new(|u: &UnitFeatures| u.true_rul_trace())),
        Split::Train => (
            &ds.split.train.units,
            Box::new(|u: &UnitFeatures| Some((0..u.len()).map(|t| (u.len() - 1 - t) as f64).collect())),
        ),
    };
    let Some(unit) = units.iter().find(|u| u.unit_id == unit_id) else {
        let ids: Vec<u32> = units.iter().map(|u| u.unit_id).collect();
        bail!(UserError::new(format!(
            "no {} unit {unit_id}; available: {}",
            split.name(),
            if ids.is_empty() { "none".to_string() } else { id_ranges(&ids) }
        )));
    };
    let pred = predict_ensemble(&ck.model, &unit.values)?;
    let decomp = pred.decompositions()?;
    let truth = truth(unit);
    let cap = ck.manifest.preprocess.rul_cap as f64;
    let alpha = ctx.config.evaluation.alpha;
    let prov = ctx.provenance(
        "predict",
        vec![
            ("checkpoint_fingerprint", ck.fingerprint().to_string()),
            ("data_fingerprint", ds.fingerprint().to_string()),
        ],
    );
    let mut t = Tsv::new(
        &prov,
        &["step", "rul_true", "rul_target", "mu_star", "sigma_star", "lower", "upper", "u_al", "u_ep"],
    );
    for step in 0..pred.len() {
        let b = interval_bounds(pred.mu_star[step], pred.var_star[step], alpha)?;
        let (y, target) = match &truth {
            Some(tr) => (tr[step].to_string(), tr[step].min(cap).to_string()),
            None => (String::new(), String::new()),
        };
        t.row(&[
            (step + 1).to_string(),
            y,
            target,
            pred.mu_star[step].to_string(),
            pred.var_star[step].sqrt().to_string(),
            b.lower.to_string(),
            b.upper.to_string(),
            decomp[step].u_al.to_string(),
            decomp[step].u_ep.to_string(),
        ]);
    }
    let path = ctx.out("predict").join(format!("{}_unit_{unit_id}.tsv", split.name()));
    t.write(&path)?;
    let last = pred.len() - 1;
    println!(
        "{} unit {unit_id}: {} cycles, final mu* {:.3}, sigma* {:.3}{}",
        split.name(),
        pred.len(),
        pred.mu_star[last],
        pred.var_star[last].sqrt(),
        truth
            .as_ref()
            .map_or_else(String::new, |tr| format!(", true RUL {}", tr[last]))
    );
    println!("wrote {}", path.display());
    Ok(())
}
