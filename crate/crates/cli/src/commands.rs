use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dfkit::discworld::{correlated_q, generate_dataset, Dataset, DatasetConfig, NoiseRegime, SceneSpec};
use dfkit::filters::{FilterConfig, FilterKind};
use dfkit::harness::{
    compare, evaluate, from_scratch_config, load_models, noise_only_config, pretrain_sensor, save_models, train,
    EvalConfig, EvalReport, FilterChoice, NoiseChoice, Prepared, PretrainConfig, TrainConfig,
};
use dfkit::models::Models;
use dfkit::verify;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{Command, CompareArgs, EvalArgs, GenDataArgs, GradcheckArgs, OracleArgs, TrainArgs};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    let common = command.common();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    let out = common.out.clone();
    let name = command.name();
    match command {
        Command::GenData(a) => gen_data(&a, &out, name),
        Command::Train(a) => train_cmd(&a, &out, name),
        Command::Eval(a) => eval_cmd(&a, &out, name),
        Command::Compare(a) => compare_cmd(&a, &out, name),
        Command::Gradcheck(a) => gradcheck_cmd(&a, &out, name),
        Command::OracleCheck(a) => oracle_cmd(&a, &out, name),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// `run-manifest.json`: the command, its resolved flags and any resolved
/// library configuration. No timestamps, so reruns compare equal.
fn write_manifest(out: &Path, command: &str, flags: &impl Serialize, resolved: Value) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "flags": flags,
        "resolved": resolved,
    });
    write_json(&out.join("run-manifest.json"), &manifest)
}

fn read_split(dir: &Path, split: &str) -> Result<Dataset> {
    let path = dir.join(format!("{split}.dfds"));
    if !path.exists() {
        return Err(dfkit::Error::Data(format!("missing dataset split {}", path.display())).into());
    }
    Ok(Dataset::read(&path)?)
}

fn gen_data(a: &GenDataArgs, out: &Path, name: &str) -> Result<()> {
    if a.correlated_q && a.hetero_q {
        return Err(CliError::Usage("--correlated-q and --hetero-q cannot be combined".into()));
    }
    let regime = if a.correlated_q {
        NoiseRegime::Correlated { q: correlated_q() }
    } else if a.hetero_q {
        NoiseRegime::Heteroscedastic { sigma_p: a.sigma_p, sigma_v: a.sigma_v }
    } else {
        NoiseRegime::Constant { sigma_p: a.sigma_p, sigma_v: a.sigma_v }
    };
    let mut config = if a.desk_scale {
        DatasetConfig::desk_scale(regime, a.common.seed)
    } else {
        DatasetConfig::paper(a.distractors.unwrap_or(5), regime, a.common.seed)
    };
    let size = a.image_size.unwrap_or(config.scene.image_size);
    let distractors = a.distractors.unwrap_or(config.scene.num_distractors);
    config.scene = SceneSpec::new(size, distractors);
    config.steps = a.steps.unwrap_or(config.steps);
    config.train = a.train.unwrap_or(config.train);
    config.val = a.val.unwrap_or(config.val);
    config.test = a.test.unwrap_or(config.test);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    write_manifest(out, name, a, serde_json::to_value(&config)?)?;
    let manifests = generate_dataset(&config, out)?;
    for m in &manifests {
        println!(
            "{}: {} sequences × {} steps, {}×{} px, {} distractors, seed {}",
            m.split, m.count, m.steps, m.image_size, m.image_size, m.scene.num_distractors, m.seed
        );
    }
    Ok(())
}

/// Filter configuration from the training flags, rejecting flags that do
/// not apply to the chosen filter.
fn train_filter(a: &TrainArgs) -> Result<FilterConfig> {
    let choice = a.filter;
    let mut f = choice.filter_config();
    let sampling = matches!(f.kind, FilterKind::Mcukf | FilterKind::Pf);
    let usage = |flag: &str| CliError::Usage(format!("--{flag} does not apply to --filter {}", choice.name()));
    if let Some(n) = a.particles {
        if !sampling {
            return Err(usage("particles"));
        }
        f.samples_train = n;
    }
    if let Some(x) = a.alpha_re {
        if !choice.is_particle() {
            return Err(usage("alpha-re"));
        }
        f.alpha_re = x;
    }
    if let Some(r) = a.resample_every {
        if !choice.is_particle() {
            return Err(usage("resample-every"));
        }
        f.resample_every = r;
    }
    if let Some(s) = a.gmm_sigma {
        if !matches!(choice, FilterChoice::PfM | FilterChoice::PfMLrn) {
            return Err(usage("gmm-sigma"));
        }
        f.gmm_sigma = s;
    }
    f.validate(4).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(f)
}

fn train_cmd(a: &TrainArgs, out: &Path, name: &str) -> Result<()> {
    let filter = train_filter(a)?;
    let cfg = TrainConfig {
        loss: a.loss,
        seq_len: a.seq_len,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        sigma_init: a.sigma_init,
        seed: a.common.seed,
        max_batches: a.max_batches,
        clip_norm: a.clip_norm,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let pre = (a.pretrain_epochs > 0).then(|| PretrainConfig {
        loss: a.pretrain_loss,
        epochs: a.pretrain_epochs,
        lr: a.pretrain_lr,
        seed: a.common.seed,
        clip_norm: a.clip_norm,
        ..PretrainConfig::default()
    });
    if a.init.as_ref().is_some_and(|p| !p.join("manifest.json").exists()) {
        return Err(CliError::Usage(format!("no checkpoint at {}", a.init.as_ref().unwrap().display())));
    }

    let train_data = read_split(&a.data, "train")?;
    let val_data = read_split(&a.data, "val")?;
    let noise = NoiseChoice {
        hetero_q: a.hetero_q,
        hetero_r: a.hetero_r,
        full_cov: a.full_cov,
    };
    let size = train_data.image_size();
    let mut model_config = if a.analytic_process {
        noise_only_config(size, noise)
    } else {
        from_scratch_config(size, noise)
    };
    model_config.learned_likelihood = a.filter.learned_likelihood();
    let (models, mut store) = Models::build(&model_config, a.common.seed)?;

    write_manifest(
        out,
        name,
        a,
        json!({ "train": cfg, "filter": filter, "models": model_config, "pretrain": pre }),
    )?;

    if let Some(init) = &a.init {
        let (_, init_store, _) = load_models(init)?;
        let copied = store.copy_matching(&init_store, "")?;
        log::info!("initialized {copied} parameters from {}", init.display());
    }
    if let Some(pre) = &pre {
        // Only the sensor keeps its pretrained weights; the noise models
        // start filter training from their configured initial values.
        let outcome = pretrain_sensor(&models, store.clone(), &train_data, &val_data, pre)?;
        outcome.write_logs(&out.join("pretrain"))?;
        store.copy_matching(&outcome.store, "sensor.")?;
        println!("pretrained sensor: best epoch {}, val loss {}", outcome.best_epoch, outcome.best_val);
    }
    if a.freeze_sensor {
        store.set_trainable("sensor.", false);
    }
    if a.freeze_process {
        store.set_trainable("process.", false);
    }

    let train_prep = Prepared::new(&models, &store, &train_data)?;
    let val_prep = Prepared::new(&models, &store, &val_data)?;
    let outcome = train(&models, store, &train_prep, &val_prep, &filter, &cfg)?;
    outcome.write_logs(out)?;
    let step = outcome.log.iter().find(|r| r.epoch == outcome.best_epoch).map_or(0, |r| r.step);
    save_models(
        &out.join("checkpoint"),
        &models,
        &outcome.store,
        a.common.seed,
        step,
        json!({ "filter": a.filter, "filter_config": filter, "train": cfg }),
    )?;
    println!(
        "best epoch {} of {}: val loss {}{}",
        outcome.best_epoch,
        cfg.epochs,
        outcome.best_val,
        if outcome.skipped_updates > 0 {
            format!(" ({} non-finite updates skipped)", outcome.skipped_updates)
        } else {
            String::new()
        }
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &Path, name: &str) -> Result<()> {
    let checkpoint = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs --checkpoint".into()))?;
    if !checkpoint.join("manifest.json").exists() {
        return Err(CliError::Usage(format!("no checkpoint at {}", checkpoint.display())));
    }
    let (models, mut store, manifest) = load_models(checkpoint)?;
    let mut filter = match a.filter {
        Some(choice) => choice.filter_config(),
        None => match manifest.model.get("filter_config") {
            Some(v) => serde_json::from_value::<FilterConfig>(v.clone())?,
            None => FilterChoice::Ekf.filter_config(),
        },
    };
    if let Some(n) = a.particles {
        if !matches!(filter.kind, FilterKind::Mcukf | FilterKind::Pf) {
            return Err(CliError::Usage("--particles applies to mcukf and particle filters only".into()));
        }
        filter.samples_eval = n;
    }
    filter.validate(models.config.state_dim).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = EvalConfig {
        perturbation_seeds: (1..=a.perturbations as u64).collect(),
        sigma_init: a.sigma_init,
        seed: a.common.seed,
    };
    write_manifest(out, name, a, json!({ "eval": cfg, "filter": filter }))?;

    let data = read_split(&a.data, &a.split)?;
    store.set_trainable("", false);
    let prepared = Prepared::new(&models, &store, &data)?;
    let mut report: EvalReport = evaluate(&models, &store, &prepared, &filter, &cfg)?;
    report.config = json!({
        "checkpoint": checkpoint,
        "split": a.split,
        "filter": filter,
        "eval": cfg,
    });
    write_json(&out.join("eval_report.json"), &report)?;
    std::fs::write(out.join("trace.csv"), report.trace_csv())?;
    let corr = report.corr_r_visibility.map_or("undefined".to_string(), |c| format!("{c:.4}"));
    println!(
        "rmse {:.4}  nll {:.4}  nll_2pi {:.4}  obs_rmse {:.4}  corr(R, visible) {corr}  d_q {:.4}",
        report.rmse, report.nll, report.nll_2pi, report.obs_rmse, report.d_q
    );
    Ok(())
}

/// `label=path` or a bare path labelled by its directory.
fn split_report_arg(s: &str) -> (String, PathBuf) {
    if let Some((label, path)) = s.split_once('=') {
        if !label.is_empty() && !label.contains(['/', '\\']) {
            return (label.to_string(), PathBuf::from(path));
        }
    }
    let path = PathBuf::from(s);
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map_or_else(|| s.to_string(), |n| n.to_string_lossy().into_owned());
    (label, path)
}

fn compare_cmd(a: &CompareArgs, out: &Path, name: &str) -> Result<()> {
    let mut reports: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
    for arg in &a.reports {
        let (label, path) = split_report_arg(arg);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| dfkit::Error::Data(format!("cannot read report {}: {e}", path.display())))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| dfkit::Error::Data(format!("{} is not an evaluation report: {e}", path.display())))?;
        reports.push((label, report.metrics()));
    }
    let table = compare(&reports)?;
    write_manifest(out, name, a, Value::Null)?;
    std::fs::write(out.join("comparison.csv"), table.to_csv())?;
    write_json(&out.join("comparison.json"), &table)?;
    print!("{}", render_table(&table));
    Ok(())
}

fn render_table(table: &dfkit::harness::ComparisonTable) -> String {
    let mut header = vec!["label".to_string(), "runs".to_string()];
    header.extend(table.metrics.iter().cloned());
    let mut rows = vec![header];
    for r in &table.rows {
        let mut row = vec![r.label.clone(), r.runs.to_string()];
        for m in &table.metrics {
            row.push(match (r.mean.get(m), r.stderr.get(m)) {
                (Some(mu), Some(se)) => format!("{mu:.4} ± {se:.4}"),
                (Some(mu), None) => format!("{mu:.4}"),
                _ => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    s
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &Path, name: &str) -> Result<()> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    write_manifest(out, name, a, json!({ "tolerance": verify::GRADCHECK_TOL }))?;
    let ops = verify::gradcheck_ops(a.trials, a.common.seed)?;
    let filters = verify::gradcheck_filters()?;
    let pass = ops.iter().chain(&filters).all(|e| e.pass);
    for e in ops.iter().chain(&filters) {
        println!("{:<5} {:<28} max rel error {:.3e}", if e.pass { "ok" } else { "FAIL" }, e.name, e.max_rel_error);
    }
    write_json(
        &out.join("gradcheck.json"),
        &json!({ "tolerance": verify::GRADCHECK_TOL, "pass": pass, "ops": ops, "filters": filters }),
    )?;
    if !pass {
        let failed: Vec<_> = ops.iter().chain(&filters).filter(|e| !e.pass).map(|e| e.name.as_str()).collect();
        return Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn oracle_cmd(a: &OracleArgs, out: &Path, name: &str) -> Result<()> {
    let kinds: Vec<FilterKind> = match a.filter.as_str() {
        "all" => vec![FilterKind::Ekf, FilterKind::Ukf, FilterKind::Mcukf, FilterKind::Pf],
        "ekf" => vec![FilterKind::Ekf],
        "ukf" => vec![FilterKind::Ukf],
        "mcukf" => vec![FilterKind::Mcukf],
        "pf" => vec![FilterKind::Pf],
        other => {
            return Err(CliError::Usage(format!("unknown filter '{other}', expected ekf, ukf, mcukf, pf or all")))
        }
    };
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    if a.samples.is_some() && kinds.iter().all(|k| matches!(k, FilterKind::Ekf | FilterKind::Ukf)) {
        return Err(CliError::Usage("--samples applies to mcukf and pf only".into()));
    }
    write_manifest(out, name, a, Value::Null)?;
    let mut reports = Vec::new();
    for kind in kinds {
        let samples = match kind {
            FilterKind::Ekf | FilterKind::Ukf => None,
            FilterKind::Mcukf => Some(a.samples.unwrap_or(100_000)),
            FilterKind::Pf => Some(a.samples.unwrap_or(10_000)),
        };
        let r = verify::oracle_check(kind, a.trials, samples, a.common.seed)?;
        let kind_name = serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string();
        match samples {
            None => println!(
                "{:<5} {kind_name:<6} max |Δμ| {:.3e}  max |ΔΣ| {:.3e}",
                if r.pass { "ok" } else { "FAIL" },
                r.max_mean_dev,
                r.max_cov_dev
            ),
            Some(n) => println!(
                "{:<5} {kind_name:<6} {n} samples: {:.0}% of trials within the Monte-Carlo bound, max |Δμ| {:.3e}",
                if r.pass { "ok" } else { "FAIL" },
                100.0 * r.pass_rate,
                r.max_mean_dev
            ),
        }
        reports.push(r);
    }
    write_json(&out.join("oracle.json"), &reports)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| serde_json::to_value(r.filter).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Check(format!("oracle check failed for {}", failed.join(", "))));
    }
    Ok(())
}
