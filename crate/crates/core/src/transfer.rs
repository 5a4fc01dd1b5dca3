//! Soft-label transfer of a remote site's model into a local one, and the
//! two-site experiment built around it.
//!
//! The remote model only ever appears behind [`Scorer`]: transfer consumes
//! its calibrated scores on the local training fold and nothing else.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::{parse_claims_file, PatientHistory};
use crate::cohort::{build_cohort, AuditSummary, CohortConfig};
use crate::error::{Error, Result};
use crate::features::{encode_dataset, fit_schema, CciTable, EncodedExample, EventSpec, FeatureSchema, LabeledDataset};
use crate::features::{DEFAULT_BUCKET_DAYS, DEFAULT_N_BUCKETS};
use crate::metrics::{bootstrap_lift, lift_pct, write_lift_csv, BootstrapReport, FoldMetrics, Metric, RankMetrics};
use crate::neural::{Provenance, RiskModel, SoftTargets};
use crate::pipeline::{
    default_grid, derive_seed, evaluate, fit, grid_search, platt_calibrate, raw_scores, split_dataset, GridScore,
    Hyperparameters, SplitSpec, TrainOptions, TrainingLog,
};
use crate::synth::{generate_site, reference_profile, shift_profile, ShiftSpec, SiteProfile};

pub const TRANSFER_STAGE: &str = "ban_transfer";

/// Anything that maps an encoded example to a score in [0, 1].
pub trait Scorer: Sync {
    fn schema_hash(&self) -> &str;
    fn score_example(&self, ex: &EncodedExample) -> Result<f64>;
}

impl Scorer for RiskModel {
    fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    fn score_example(&self, ex: &EncodedExample) -> Result<f64> {
        self.predict(ex)
    }
}

/// Frozen scores keyed by example fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub schema_hash: String,
    pub scores: HashMap<String, f64>,
}

impl ScoreTable {
    pub fn record(scorer: &dyn Scorer, ds: &LabeledDataset) -> Result<Self> {
        let scores: Vec<(String, f64)> = ds
            .examples
            .par_iter()
            .map(|e| scorer.score_example(e).map(|s| (e.fingerprint(), s)))
            .collect::<Result<_>>()?;
        Ok(Self {
            schema_hash: scorer.schema_hash().to_string(),
            scores: scores.into_iter().collect(),
        })
    }
}

impl Scorer for ScoreTable {
    fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    fn score_example(&self, ex: &EncodedExample) -> Result<f64> {
        self.scores
            .get(&ex.fingerprint())
            .copied()
            .ok_or_else(|| Error::Data(format!("no recorded score for patient {} at {}", ex.patient_id, ex.discharge_date)))
    }
}

/// Remote scores on each training example, index-aligned with `train`.
pub fn predict_soft(remote: &dyn Scorer, train: &LabeledDataset) -> Result<SoftTargets> {
    if remote.schema_hash() != train.schema.version_hash() {
        return Err(Error::SchemaMismatch {
            expected: remote.schema_hash().to_string(),
            found: train.schema.version_hash().to_string(),
        });
    }
    let values = train
        .examples
        .par_iter()
        .map(|e| remote.score_example(e))
        .collect::<Result<Vec<f64>>>()?;
    SoftTargets::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    /// Fine-tuning learning rate as a multiple of the local training rate.
    pub lr_scale: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Weight on soft targets; 1 ignores hard labels.
    pub lambda: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr_scale: 0.1,
            max_epochs: 10,
            patience: 2,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOptions {
    pub lr_ft: f64,
    pub batch_size: usize,
    pub max_epochs_ft: usize,
    pub patience_ft: usize,
    pub lambda: f64,
}

impl FineTuneOptions {
    pub fn from_local(hp: &Hyperparameters, cfg: &FineTuneConfig) -> Self {
        Self {
            lr_ft: cfg.lr_scale * hp.lr,
            batch_size: hp.batch_size,
            max_epochs_ft: cfg.max_epochs,
            patience_ft: cfg.patience,
            lambda: cfg.lambda,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub model: RiskModel,
    pub log: Option<TrainingLog>,
    /// Set when fine-tuning diverged and the local model was returned.
    pub warning: Option<String>,
}

/// Blended targets `lambda * soft + (1 - lambda) * hard`.
pub fn blend_targets(soft: &SoftTargets, train: &LabeledDataset, lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    if soft.len() != train.len() {
        return Err(Error::Data(format!("{} soft targets for {} training examples", soft.len(), train.len())));
    }
    Ok(soft
        .values()
        .iter()
        .zip(&train.examples)
        .map(|(s, e)| lambda * s + (1.0 - lambda) * (e.label as u8 as f64))
        .collect())
}

/// Fine-tunes `local` from its current parameters on soft targets,
/// early-stopping on hard-label validation AUPRC.
pub fn ban_transfer(
    local: &RiskModel,
    train: &LabeledDataset,
    soft: &SoftTargets,
    valid: &LabeledDataset,
    opts: &FineTuneOptions,
    seed: u64,
) -> Result<TransferOutcome> {
    let targets = blend_targets(soft, train, opts.lambda)?;
    let mut model = local.clone();
    model.calibrator = None;
    model.provenance.push(Provenance {
        site: train.site_name.clone(),
        stage: TRANSFER_STAGE.into(),
    });
    let train_opts = TrainOptions {
        lr: opts.lr_ft,
        batch_size: opts.batch_size,
        max_epochs: opts.max_epochs_ft,
        patience: opts.patience_ft,
    };
    match fit(model, train, &targets, valid, &train_opts, seed, TRANSFER_STAGE) {
        Ok((model, log)) => Ok(TransferOutcome {
            model,
            log: Some(log),
            warning: None,
        }),
        Err(Error::Numerical(msg)) => {
            let warning = format!("fine-tuning diverged, keeping the local model: {msg}");
            log::warn!("{warning}");
            Ok(TransferOutcome {
                model: local.clone(),
                log: None,
                warning: Some(warning),
            })
        }
        Err(e) => Err(e),
    }
}

/// `p - t` at the output logit for each example, in eval mode.
pub fn output_logit_gradients(model: &RiskModel, ds: &LabeledDataset, targets: &[f64]) -> Result<Vec<f64>> {
    if targets.len() != ds.len() {
        return Err(Error::Data("one target per example required".into()));
    }
    let scores = raw_scores(model, ds)?;
    Ok(scores.iter().zip(targets).map(|(p, t)| p - t).collect())
}

/// Where a site's claims come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SiteSource {
    /// The built-in reference profile.
    Reference { site_name: String, n_patients: usize },
    Profile { profile: SiteProfile },
    /// Another profile source with a shift applied.
    Shifted { base: Box<SiteSource>, shift: ShiftSpec },
    /// Claims and demographics CSV files on disk.
    Files { claims: PathBuf, demographics: PathBuf, site_name: String },
}

impl SiteSource {
    pub fn profile(&self) -> Result<SiteProfile> {
        match self {
            SiteSource::Reference { site_name, n_patients } => Ok(reference_profile(site_name, *n_patients)),
            SiteSource::Profile { profile } => {
                profile.validate()?;
                Ok(profile.clone())
            }
            SiteSource::Shifted { base, shift } => shift_profile(&base.profile()?, shift),
            SiteSource::Files { .. } => Err(Error::Config("a file-backed site has no generator profile".into())),
        }
    }

    /// Loads (or generates) the site's histories.
    pub fn load(&self, seed: u64, base_dir: &Path) -> Result<(String, Vec<PatientHistory>)> {
        match self {
            SiteSource::Files {
                claims,
                demographics,
                site_name,
            } => {
                let parsed = parse_claims_file(&base_dir.join(claims), &base_dir.join(demographics))?;
                if !parsed.report.rejected.is_empty() {
                    log::warn!("{site_name}: {} claim rows rejected", parsed.report.rejected.len());
                }
                Ok((site_name.clone(), parsed.histories))
            }
            _ => {
                let profile = self.profile()?;
                let site = generate_site(&profile, seed)?;
                Ok((profile.site_name, site.histories))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaFit {
    /// Vocabulary counted over both sites' cohorts.
    #[default]
    Pooled,
    /// Vocabulary from site A only, reused for site B.
    SiteA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureOptions {
    pub vocab_size_cap: usize,
    pub n_buckets: usize,
    pub bucket_days: i64,
    pub schema_fit: SchemaFit,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            vocab_size_cap: 128,
            n_buckets: DEFAULT_N_BUCKETS,
            bucket_days: DEFAULT_BUCKET_DAYS,
            schema_fit: SchemaFit::Pooled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKey {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_folds: usize,
    /// Site whose folds are re-drawn; the other site supplies the remote model.
    pub target: SiteKey,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_folds: 8,
            target: SiteKey::B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub site_a: SiteSource,
    pub site_b: SiteSource,
    #[serde(default)]
    pub cohort: CohortConfig,
    #[serde(default)]
    pub features: FeatureOptions,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 4],
    #[serde(default = "default_grid")]
    pub grid: Vec<Hyperparameters>,
    #[serde(default)]
    pub fine_tune: FineTuneConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
}

fn default_seed() -> u64 {
    42
}

fn default_fractions() -> [f64; 4] {
    SplitSpec::default().fractions
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        SplitSpec {
            fractions: self.split_fractions,
            seed: 0,
        }
        .validate()?;
        if self.grid.is_empty() {
            return Err(Error::Config("hyperparameter grid is empty".into()));
        }
        for hp in &self.grid {
            hp.model_config(0).validate()?;
            hp.train_options().validate()?;
        }
        if !(0.0..=1.0).contains(&self.fine_tune.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.fine_tune.lambda)));
        }
        if !(self.fine_tune.lr_scale >= 0.0) || self.fine_tune.max_epochs == 0 {
            return Err(Error::Config("fine-tune lr_scale must be >= 0 and max_epochs >= 1".into()));
        }
        if self.features.vocab_size_cap == 0 || self.features.n_buckets == 0 || self.features.bucket_days < 1 {
            return Err(Error::Config("feature options must be positive".into()));
        }
        for site in [&self.site_a, &self.site_b] {
            if !matches!(site, SiteSource::Files { .. }) {
                site.profile()?;
            }
        }
        Ok(())
    }
}

/// A site's cohort encoded under the shared schema.
#[derive(Debug, Clone)]
pub struct PreparedSite {
    pub dataset: LabeledDataset,
    pub audit: AuditSummary,
}

/// Builds both sites' cohorts and encodes them under one shared schema.
pub fn prepare_sites(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(PreparedSite, PreparedSite)> {
    let (name_a, hist_a) = cfg.site_a.load(derive_seed(cfg.seed, "synth", SiteKey::A as u64), base_dir)?;
    let (name_b, hist_b) = cfg.site_b.load(derive_seed(cfg.seed, "synth", SiteKey::B as u64), base_dir)?;
    if name_a == name_b {
        return Err(Error::Config(format!("both sites are named {name_a}")));
    }
    let cohort_a = build_cohort(&hist_a, &cfg.cohort);
    let cohort_b = build_cohort(&hist_b, &cfg.cohort);
    let events_a: Vec<EventSpec> = cohort_a.events.iter().map(EventSpec::from).collect();
    let events_b: Vec<EventSpec> = cohort_b.events.iter().map(EventSpec::from).collect();
    let by_id = |h: &[PatientHistory]| -> HashMap<String, usize> {
        h.iter().enumerate().map(|(i, x)| (x.patient_id().to_string(), i)).collect()
    };
    let (ids_a, ids_b) = (by_id(&hist_a), by_id(&hist_b));
    let pairs_a = events_a.iter().map(|e| (e, &hist_a[ids_a[&e.patient_id]]));
    let pairs_b = events_b.iter().map(|e| (e, &hist_b[ids_b[&e.patient_id]]));
    let f = &cfg.features;
    let schema: FeatureSchema = match f.schema_fit {
        SchemaFit::Pooled => fit_schema(pairs_a.chain(pairs_b), f.vocab_size_cap, f.n_buckets, f.bucket_days, CciTable::default())?,
        SchemaFit::SiteA => fit_schema(pairs_a, f.vocab_size_cap, f.n_buckets, f.bucket_days, CciTable::default())?,
    };
    let a = PreparedSite {
        dataset: encode_dataset(&events_a, &hist_a, &schema, &name_a)?,
        audit: cohort_a.audit,
    };
    let b = PreparedSite {
        dataset: encode_dataset(&events_b, &hist_b, &schema, &name_b)?,
        audit: cohort_b.audit,
    };
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: String,
    pub n_events: usize,
    pub n_positive: usize,
    pub audit: AuditSummary,
    pub fold_sizes: [usize; 4],
    pub selected: Hyperparameters,
    pub grid: Vec<GridScore>,
    pub local_best_epoch: usize,
    pub calibrator: crate::pipeline::Calibrator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Local,
    Remote,
    Ban,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_lift_pct: f64,
    pub auprc_lift_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub remote_site: String,
    pub target_site: String,
    pub rows: Vec<ConditionRow>,
    pub transfer_best_epoch: Option<usize>,
    pub transfer_warning: Option<String>,
    /// Number of times the target's test fold was read.
    pub test_fold_openings: usize,
}

impl DirectionReport {
    pub fn row(&self, c: Condition) -> &ConditionRow {
        self.rows.iter().find(|r| r.condition == c).expect("all conditions present")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSection {
    pub remote_site: String,
    pub target_site: String,
    #[serde(flatten)]
    pub report: BootstrapReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub schema_hash: String,
    pub vocab_size: usize,
    pub sites: Vec<SiteSummary>,
    pub directions: Vec<DirectionReport>,
    pub bootstrap: BootstrapSection,
}

impl ExperimentReport {
    pub fn direction(&self, target: &str) -> Option<&DirectionReport> {
        self.directions.iter().find(|d| d.target_site == target)
    }
}

/// Trained, calibrated model plus the folds it came from.
struct SiteRun {
    folds: crate::pipeline::Folds,
    model: RiskModel,
    selected: Hyperparameters,
    summary: SiteSummary,
}

fn run_site(site: &PreparedSite, cfg: &ExperimentConfig, key: SiteKey) -> Result<SiteRun> {
    let idx = key as u64;
    let spec = SplitSpec {
        fractions: cfg.split_fractions,
        seed: derive_seed(cfg.seed, "split", idx),
    };
    let folds = split_dataset(&site.dataset, &spec)?;
    let grid = grid_search(&folds.train, &folds.valid, &cfg.grid, derive_seed(cfg.seed, "grid", idx))?;
    let mut model = grid.model;
    let calibrator = platt_calibrate(&model, &folds.calib)?;
    model.calibrator = Some(calibrator);
    let summary = SiteSummary {
        site: site.dataset.site_name.clone(),
        n_events: site.dataset.len(),
        n_positive: site.dataset.n_positive(),
        audit: site.audit.clone(),
        fold_sizes: [folds.train.len(), folds.valid.len(), folds.calib.len(), folds.test.len()],
        selected: grid.best,
        grid: grid.scores,
        local_best_epoch: grid.log.best_epoch,
        calibrator,
    };
    Ok(SiteRun {
        folds,
        model,
        selected: grid.best,
        summary,
    })
}

struct DirectionOutcome {
    metrics: FoldMetrics,
    transfer: TransferOutcome,
}

/// Soft targets from `remote`, fine-tune of `local`, and evaluation of all
/// three models on the target's test fold (opened once here).
#[allow(clippy::too_many_arguments)]
fn transfer_and_evaluate(
    remote: &dyn Scorer,
    local: &RiskModel,
    folds: crate::pipeline::Folds,
    hp: &Hyperparameters,
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<DirectionOutcome> {
    let soft = predict_soft(remote, &folds.train)?;
    let opts = FineTuneOptions::from_local(hp, cfg);
    let mut transfer = ban_transfer(local, &folds.train, &soft, &folds.valid, &opts, seed)?;
    match platt_calibrate(&transfer.model, &folds.calib) {
        Ok(c) => transfer.model.calibrator = Some(c),
        Err(e) => log::warn!("transferred model left uncalibrated: {e}"),
    }
    let test = folds.test.open();
    let remote_scores: Vec<f64> = test
        .examples
        .par_iter()
        .map(|e| remote.score_example(e))
        .collect::<Result<_>>()?;
    let metrics = FoldMetrics {
        local: evaluate(local, &test)?,
        remote: crate::metrics::rank_metrics(&remote_scores, &test.labels())?,
        transferred: evaluate(&transfer.model, &test)?,
    };
    Ok(DirectionOutcome { metrics, transfer })
}

fn condition_rows(m: &FoldMetrics) -> Vec<ConditionRow> {
    let row = |condition, r: &RankMetrics| ConditionRow {
        condition,
        auroc: r.auroc,
        auprc: r.auprc,
        auroc_lift_pct: lift_pct(r.auroc, m.local.auroc),
        auprc_lift_pct: lift_pct(r.auprc, m.local.auprc),
    };
    vec![
        row(Condition::Local, &m.local),
        row(Condition::Remote, &m.remote),
        row(Condition::Ban, &m.transferred),
    ]
}

/// Final models produced by an experiment run.
pub struct ExperimentModels {
    pub local_a: RiskModel,
    pub local_b: RiskModel,
    pub transferred_into_a: RiskModel,
    pub transferred_into_b: RiskModel,
}

/// Both directions of local / remote / transferred comparison, then the
/// bootstrap over re-drawn folds of the configured target site.
pub fn run_two_site_experiment(
    a: &PreparedSite,
    b: &PreparedSite,
    cfg: &ExperimentConfig,
) -> Result<(ExperimentReport, ExperimentModels)> {
    cfg.validate()?;
    if a.dataset.schema.version_hash() != b.dataset.schema.version_hash() {
        return Err(Error::SchemaMismatch {
            expected: a.dataset.schema.version_hash().to_string(),
            found: b.dataset.schema.version_hash().to_string(),
        });
    }
    let (run_a, run_b) = rayon::join(|| run_site(a, cfg, SiteKey::A), || run_site(b, cfg, SiteKey::B));
    let (run_a, run_b) = (run_a?, run_b?);
    let remote_a = run_a.model.clone();
    let remote_b = run_b.model.clone();
    let (hp_a, hp_b) = (run_a.selected, run_b.selected);
    let (sum_a, sum_b) = (run_a.summary.clone(), run_b.summary.clone());
    let (local_a, local_b) = (run_a.model, run_b.model);

    let (into_b, into_a) = rayon::join(
        || transfer_and_evaluate(&remote_a, &local_b, run_b.folds, &hp_b, &cfg.fine_tune, derive_seed(cfg.seed, "transfer", 1)),
        || transfer_and_evaluate(&remote_b, &local_a, run_a.folds, &hp_a, &cfg.fine_tune, derive_seed(cfg.seed, "transfer", 0)),
    );
    let (into_b, into_a) = (into_b?, into_a?);
    let direction = |remote: &str, target: &str, o: &DirectionOutcome| DirectionReport {
        remote_site: remote.to_string(),
        target_site: target.to_string(),
        rows: condition_rows(&o.metrics),
        transfer_best_epoch: o.transfer.log.as_ref().map(|l| l.best_epoch),
        transfer_warning: o.transfer.warning.clone(),
        test_fold_openings: 1,
    };
    let directions = vec![
        direction(&sum_a.site, &sum_b.site, &into_b),
        direction(&sum_b.site, &sum_a.site, &into_a),
    ];

    let (target, remote, hp, target_name, remote_name) = match cfg.bootstrap.target {
        SiteKey::B => (b, &remote_a, hp_b, &sum_b.site, &sum_a.site),
        SiteKey::A => (a, &remote_b, hp_a, &sum_a.site, &sum_b.site),
    };
    let seeds: Vec<u64> = (0..cfg.bootstrap.n_folds)
        .map(|k| derive_seed(cfg.seed, "bootstrap", k as u64))
        .collect();
    let report = bootstrap_lift(|_, seed| bootstrap_fold(target, remote, &hp, cfg, seed), &seeds);
    let bootstrap = BootstrapSection {
        remote_site: remote_name.clone(),
        target_site: target_name.clone(),
        report,
    };
    Ok((
        ExperimentReport {
            seed: cfg.seed,
            schema_hash: a.dataset.schema.version_hash().to_string(),
            vocab_size: a.dataset.schema.vocab().len(),
            sites: vec![sum_a, sum_b],
            directions,
            bootstrap,
        },
        ExperimentModels {
            local_a,
            local_b,
            transferred_into_a: into_a.transfer.model,
            transferred_into_b: into_b.transfer.model,
        },
    ))
}

/// One bootstrap fold: re-split, retrain local with the selected setting,
/// calibrate, transfer from the fixed remote model, evaluate.
pub fn bootstrap_fold(
    target: &PreparedSite,
    remote: &dyn Scorer,
    hp: &Hyperparameters,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<FoldMetrics> {
    let folds = split_dataset(
        &target.dataset,
        &SplitSpec {
            fractions: cfg.split_fractions,
            seed: derive_seed(seed, "split", 0),
        },
    )?;
    let (mut local, _) = crate::pipeline::train_local(&folds.train, &folds.valid, hp, derive_seed(seed, "model", 0))?;
    local.calibrator = Some(platt_calibrate(&local, &folds.calib)?);
    let outcome = transfer_and_evaluate(remote, &local, folds, hp, &cfg.fine_tune, derive_seed(seed, "transfer", 0))?;
    Ok(outcome.metrics)
}

/// Writes `report.json`, `lift.csv` and `summary.json` into `dir`.
pub fn write_experiment_outputs(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write("report.json", json)?;
    let mut csv = Vec::new();
    write_lift_csv(&mut csv, &report.bootstrap.report)?;
    write("lift.csv", csv)?;
    let summary = serde_json::json!({
        "remote_site": report.bootstrap.remote_site,
        "target_site": report.bootstrap.target_site,
        "n_folds": report.bootstrap.report.folds.len(),
        "n_failed": report.bootstrap.report.n_failed,
        "metrics": report.bootstrap.report.summary,
    });
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write("summary.json", json)
}

/// Mean AUPRC and AUROC lift of the bootstrap table.
pub fn bootstrap_means(report: &ExperimentReport) -> (Option<f64>, Option<f64>) {
    let r = &report.bootstrap.report;
    (
        r.summary_for(Metric::Auprc).mean_lift_pct,
        r.summary_for(Metric::Auroc).mean_lift_pct,
    )
}

/// The seeded two-site setup shipped as `configs/default.json`. Site A is
/// the reference profile with doubled code effects and a strong K74 effect.
/// Site B is smaller, K74 carries no risk there, and dialysis (90935)
/// carries risk only there.
pub fn default_experiment_config() -> ExperimentConfig {
    let map = |pairs: &[(&str, f64)]| pairs.iter().map(|(c, v)| (c.to_string(), *v)).collect();
    let mut profile = reference_profile("site_a", 3000);
    for w in profile.risk_coefficients.values_mut() {
        *w *= 2.0;
    }
    profile.risk_coefficients.insert("K74".into(), 3.0);
    profile.risk_coefficients.insert("90935".into(), 0.0);
    let site_a = SiteSource::Profile { profile };
    ExperimentConfig {
        seed: default_seed(),
        site_a: site_a.clone(),
        site_b: SiteSource::Shifted {
            base: Box::new(site_a),
            shift: ShiftSpec {
                site_name: Some("site_b".into()),
                n_patients: Some(2000),
                readmission_base_rate: Some(0.07),
                prevalence_scale: map(&[]),
                coefficient_scale: map(&[("K74", 0.0)]),
                coefficient_offset: map(&[("90935", 3.0)]),
                mean_age_offset: 3.0,
                mean_claims_scale: None,
            },
        },
        cohort: CohortConfig::default(),
        features: FeatureOptions::default(),
        split_fractions: default_fractions(),
        grid: default_grid(),
        fine_tune: FineTuneConfig::default(),
        bootstrap: BootstrapConfig::default(),
    }
}
