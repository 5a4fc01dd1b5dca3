use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use readmit_core::claims::parse_claims_file;
use readmit_core::cohort::{build_cohort, read_cohort_file, write_cohort_file, CohortConfig};
use readmit_core::features::{
    encode_dataset, fit_schema, read_dataset_file, write_dataset_file, CciTable, EventSpec, FeatureSchema,
    DEFAULT_BUCKET_DAYS, DEFAULT_N_BUCKETS,
};
use readmit_core::metrics::{auprc, auroc, ece};
use readmit_core::neural::{gradient_check, load_model, save_model, GradCheckConfig};
use readmit_core::pipeline::{
    default_grid, folds_from_indices, grid_search, platt_calibrate, predict_scores, stratified_split, Hyperparameters,
    SplitIndices, SplitSpec,
};
use readmit_core::synth::{generate_site, reference_profile, shift_profile, write_site, ShiftSpec, SiteProfile};
use readmit_core::transfer::{
    ban_transfer, default_experiment_config, predict_soft, prepare_sites, run_two_site_experiment,
    write_experiment_outputs, ExperimentConfig, FineTuneOptions,
};
use readmit_core::{Error, Result};

use crate::{Cli, Command, GlobalArgs};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("input file {} does not exist", path.display())))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Site profile JSON; the built-in reference profile is used when absent.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Shift JSON applied on top of the profile.
    #[arg(long)]
    pub shift: Option<PathBuf>,
    #[arg(long, default_value = "site_a")]
    pub site_name: String,
    #[arg(long, default_value_t = 5000)]
    pub n_patients: usize,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    #[arg(long)]
    pub claims: PathBuf,
    #[arg(long)]
    pub demographics: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub claims: PathBuf,
    #[arg(long)]
    pub demographics: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub site_name: String,
    /// Reuse an existing schema instead of fitting one on this cohort.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub vocab_cap: usize,
    #[arg(long, default_value_t = DEFAULT_N_BUCKETS)]
    pub n_buckets: usize,
    #[arg(long, default_value_t = DEFAULT_BUCKET_DAYS)]
    pub bucket_days: i64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Restrict to one fold of this split file.
    #[arg(long, requires = "fold")]
    pub splits: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "valid", "calib", "test"], requires = "splits")]
    pub fold: Option<String>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub local: PathBuf,
    #[arg(long)]
    pub remote: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_ft: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
}

/// Persisted fold assignment produced by `train`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub fractions: [f64; 4],
    #[serde(flatten)]
    pub indices: SplitIndices,
}

/// One line of a predictions CSV.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub discharge_date: String,
    pub label: u8,
    pub score: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let threads = match g.threads {
        Some(0) => return Err(Error::Config("--threads must be >= 1".into())),
        Some(n) => n,
        None => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&g, cli.command))
}

fn dispatch(g: &GlobalArgs, cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(g, a),
        Command::Cohort(a) => cohort(g, a),
        Command::Featurize(a) => featurize(g, a),
        Command::Train(a) => train(g, a),
        Command::Calibrate(a) => calibrate(g, a),
        Command::Predict(a) => predict(g, a),
        Command::Transfer(a) => transfer(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Experiment(a) => experiment(g, a),
        Command::Gradcheck(a) => gradcheck(g, a),
    }
}

fn synth(g: &GlobalArgs, a: SynthArgs) -> Result<()> {
    let mut profile: SiteProfile = match (&a.profile, &g.config) {
        (Some(p), _) | (None, Some(p)) => {
            require_file(p)?;
            SiteProfile::from_json_file(p)?
        }
        (None, None) => reference_profile(&a.site_name, a.n_patients),
    };
    if let Some(s) = &a.shift {
        require_file(s)?;
        let shift: ShiftSpec = read_json(s)?;
        profile = shift_profile(&profile, &shift)?;
    }
    let site = generate_site(&profile, g.seed.unwrap_or(0))?;
    write_site(&g.out, &site)?;
    println!(
        "wrote {} patients, {} planted index events ({:.4} positive) to {}",
        site.histories.len(),
        site.labels.len(),
        site.positive_rate(),
        g.out.display()
    );
    Ok(())
}

fn cohort_config(g: &GlobalArgs) -> Result<CohortConfig> {
    let cfg = match &g.config {
        Some(p) => {
            require_file(p)?;
            read_json(p)?
        }
        None => CohortConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cohort(g: &GlobalArgs, a: CohortArgs) -> Result<()> {
    let cfg = cohort_config(g)?;
    require_file(&a.claims)?;
    require_file(&a.demographics)?;
    let parsed = parse_claims_file(&a.claims, &a.demographics)?;
    let c = build_cohort(&parsed.histories, &cfg);
    write_cohort_file(&g.out.join("cohort.csv"), &c.events)?;
    write_json(
        &g.out.join("audit.json"),
        &serde_json::json!({ "cohort": c.audit, "parse": parsed.report }),
    )?;
    println!(
        "{} index events ({} positive) from {} patients",
        c.audit.n_events, c.audit.n_positive, c.audit.n_patients
    );
    Ok(())
}

fn featurize(g: &GlobalArgs, a: FeaturizeArgs) -> Result<()> {
    for p in [&a.claims, &a.demographics, &a.cohort] {
        require_file(p)?;
    }
    let parsed = parse_claims_file(&a.claims, &a.demographics)?;
    let events: Vec<EventSpec> = read_cohort_file(&a.cohort)?.iter().map(EventSpec::from).collect();
    let schema: FeatureSchema = match &a.schema {
        Some(p) => {
            require_file(p)?;
            read_json(p)?
        }
        None => {
            let by_id: std::collections::HashMap<&str, _> =
                parsed.histories.iter().map(|h| (h.patient_id(), h)).collect();
            let mut pairs = Vec::with_capacity(events.len());
            for e in &events {
                let h = by_id
                    .get(e.patient_id.as_str())
                    .ok_or_else(|| Error::Data(format!("cohort patient {} has no claims history", e.patient_id)))?;
                pairs.push((e, *h));
            }
            fit_schema(pairs, a.vocab_cap, a.n_buckets, a.bucket_days, CciTable::default())?
        }
    };
    let ds = encode_dataset(&events, &parsed.histories, &schema, &a.site_name)?;
    write_dataset_file(&g.out.join("dataset.bin"), &ds)?;
    write_json(&g.out.join("schema.json"), &schema)?;
    println!("encoded {} examples, schema {}", ds.len(), schema.version_hash());
    Ok(())
}

fn train(g: &GlobalArgs, a: TrainArgs) -> Result<()> {
    let grid: Vec<Hyperparameters> = match &g.config {
        Some(p) => {
            require_file(p)?;
            read_json(p)?
        }
        None => default_grid(),
    };
    require_file(&a.dataset)?;
    let ds = read_dataset_file(&a.dataset)?;
    let spec = SplitSpec {
        seed: g.seed.unwrap_or(0),
        ..Default::default()
    };
    let indices = stratified_split(&ds.labels(), &spec)?;
    let folds = folds_from_indices(&ds, &indices)?;
    let result = grid_search(&folds.train, &folds.valid, &grid, spec.seed)?;
    save_model(&g.out.join("model.bin"), &result.model)?;
    result.log.write_jsonl_file(&g.out.join("train_log.jsonl"))?;
    write_json(&g.out.join("grid.json"), &result.scores)?;
    write_json(
        &g.out.join("splits.json"),
        &SplitFile {
            seed: spec.seed,
            fractions: spec.fractions,
            indices,
        },
    )?;
    println!(
        "selected setting {} (valid auprc {:.4}, auroc {:.4})",
        result.best_index, result.log.best_valid_auprc, result.log.best_valid_auroc
    );
    Ok(())
}

fn load_split(path: &Path) -> Result<SplitIndices> {
    require_file(path)?;
    let f: SplitFile = read_json(path)?;
    Ok(f.indices)
}

fn calibrate(g: &GlobalArgs, a: CalibrateArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.dataset)?;
    let mut model = load_model(&a.model)?;
    let ds = read_dataset_file(&a.dataset)?;
    let folds = folds_from_indices(&ds, &load_split(&a.splits)?)?;
    let c = platt_calibrate(&model, &folds.calib)?;
    model.calibrator = Some(c);
    save_model(&g.out.join("model.bin"), &model)?;
    println!("calibrator a={} b={}", c.a, c.b);
    Ok(())
}

fn predict(g: &GlobalArgs, a: PredictArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.dataset)?;
    let model = load_model(&a.model)?;
    let mut ds = read_dataset_file(&a.dataset)?;
    if let (Some(splits), Some(fold)) = (&a.splits, &a.fold) {
        let folds = folds_from_indices(&ds, &load_split(splits)?)?;
        ds = match fold.as_str() {
            "train" => folds.train,
            "valid" => folds.valid,
            "calib" => folds.calib,
            _ => folds.test.open(),
        };
    }
    let scores = predict_scores(&model, &ds)?;
    let path = g.out.join("predictions.csv");
    fs::create_dir_all(&g.out).map_err(|e| Error::io(&g.out, e))?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for (e, s) in ds.examples.iter().zip(&scores) {
        w.serialize(PredictionRow {
            patient_id: e.patient_id.clone(),
            discharge_date: e.discharge_date.to_string(),
            label: e.label as u8,
            score: *s,
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("scored {} examples", scores.len());
    Ok(())
}

fn transfer(g: &GlobalArgs, a: TransferArgs) -> Result<()> {
    for p in [&a.local, &a.remote, &a.dataset] {
        require_file(p)?;
    }
    let local = load_model(&a.local)?;
    let remote = load_model(&a.remote)?;
    let ds = read_dataset_file(&a.dataset)?;
    local.check_schema(ds.schema.version_hash())?;
    let folds = folds_from_indices(&ds, &load_split(&a.splits)?)?;
    let soft = predict_soft(&remote, &folds.train)?;
    let opts = FineTuneOptions {
        lr_ft: a.lr_ft,
        batch_size: a.batch_size,
        max_epochs_ft: a.epochs,
        patience_ft: a.patience,
        lambda: a.lambda,
    };
    let out = ban_transfer(&local, &folds.train, &soft, &folds.valid, &opts, g.seed.unwrap_or(0))?;
    if let Some(w) = &out.warning {
        eprintln!("warning: {w}");
    }
    save_model(&g.out.join("transferred.bin"), &out.model)?;
    if let Some(log) = &out.log {
        log.write_jsonl_file(&g.out.join("transfer_log.jsonl"))?;
        println!("best fine-tune epoch {} (valid auprc {:.4})", log.best_epoch, log.best_valid_auprc);
    }
    Ok(())
}

fn evaluate(g: &GlobalArgs, a: EvaluateArgs) -> Result<()> {
    require_file(&a.predictions)?;
    let mut r = csv::Reader::from_path(&a.predictions)?;
    let rows: Vec<PredictionRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
    let report = serde_json::json!({
        "n": rows.len(),
        "n_positive": labels.iter().filter(|&&l| l).count(),
        "auroc": auroc(&scores, &labels)?,
        "auprc": auprc(&scores, &labels)?,
        "ece": ece(&scores, &labels, a.bins)?,
    });
    write_json(&g.out.join("metrics.json"), &report)?;
    println!("{report}");
    Ok(())
}

fn experiment(g: &GlobalArgs, _a: ExperimentArgs) -> Result<()> {
    let (mut cfg, base_dir) = match &g.config {
        Some(p) => {
            require_file(p)?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (ExperimentConfig::from_json_file(p)?, dir)
        }
        None => (default_experiment_config(), PathBuf::from(".")),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let (a, b) = prepare_sites(&cfg, &base_dir)?;
    let (report, models) = run_two_site_experiment(&a, &b, &cfg)?;
    write_experiment_outputs(&g.out, &report)?;
    let models_dir = g.out.join("models");
    for (name, m) in [
        ("local_a.bin", &models.local_a),
        ("local_b.bin", &models.local_b),
        ("transferred_into_a.bin", &models.transferred_into_a),
        ("transferred_into_b.bin", &models.transferred_into_b),
    ] {
        save_model(&models_dir.join(name), m)?;
    }
    for d in &report.directions {
        for r in &d.rows {
            println!(
                "{} -> {} {:?}: auroc {:.4} ({:+.2}%) auprc {:.4} ({:+.2}%)",
                d.remote_site, d.target_site, r.condition, r.auroc, r.auroc_lift_pct, r.auprc, r.auprc_lift_pct
            );
        }
    }
    for s in &report.bootstrap.report.summary {
        println!(
            "bootstrap {:?}: mean lift {:+.3}% over {} folds, {} positive",
            s.metric,
            s.mean_lift_pct.unwrap_or(f64::NAN),
            s.n_folds,
            s.folds_with_positive_lift
        );
    }
    Ok(())
}

fn gradcheck(g: &GlobalArgs, a: GradcheckArgs) -> Result<()> {
    let cfg: GradCheckConfig = match &g.config {
        Some(p) => {
            require_file(p)?;
            read_json(p)?
        }
        None => GradCheckConfig::default(),
    };
    let report = gradient_check(&cfg, a.trials, g.seed.unwrap_or(0))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.passed {
        println!("PASS max_rel_err={:e}", report.max_rel_err);
        Ok(())
    } else {
        println!("FAIL max_rel_err={:e}", report.max_rel_err);
        Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:e} >= {:e}",
            report.max_rel_err, cfg.tolerance
        )))
    }
}
