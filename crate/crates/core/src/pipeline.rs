//! Local model production: stratified folds, minibatch training with early
//! stopping, grid search and Platt calibration.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{ExpertStats, LabeledDataset};
use crate::metrics::{rank_metrics, RankMetrics};
use crate::neural::{bce, Adam, ModelConfig, Provenance, RiskModel};

/// Stable 64-bit seed for a named sub-task of a seeded run.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation, calibration and test shares.
    pub fractions: [f64; 4],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.70, 0.10, 0.05, 0.15],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::Config(format!("split fractions {:?} must all be positive", self.fractions)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Rounds `quotas` to integers summing to `total`, giving leftover units to
/// the largest fractional parts (earlier entries win ties).
pub fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn folds(&self) -> [&[usize]; 4] {
        [&self.train, &self.valid, &self.calib, &self.test]
    }
}

pub const FOLD_NAMES: [&str; 4] = ["train", "valid", "calib", "test"];

/// Stratified four-way split.
///
/// Fold sizes are apportioned from the fractions first, then each fold's
/// positive count is apportioned from size times the global positive rate,
/// so both sizes and positive counts are within one example of exact.
pub fn stratified_split(labels: &[bool], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = labels.len();
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("stratified split needs both classes".into()));
    }
    let sizes = largest_remainder(&spec.fractions.map(|f| f * n as f64), n);
    let rate = pos.len() as f64 / n as f64;
    let pos_quota: Vec<f64> = sizes.iter().map(|&s| s as f64 * rate).collect();
    let pos_counts = largest_remainder(&pos_quota, pos.len());
    for (k, &s) in sizes.iter().enumerate() {
        if s == 0 {
            return Err(Error::Data(format!(
                "the {} fold would be empty with {n} examples; supply more data",
                FOLD_NAMES[k]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds: Vec<Vec<usize>> = Vec::with_capacity(4);
    let (mut pi, mut ni) = (0, 0);
    for k in 0..4 {
        let p = pos_counts[k];
        let q = sizes[k] - p;
        let mut fold: Vec<usize> = pos[pi..pi + p].iter().chain(&neg[ni..ni + q]).copied().collect();
        pi += p;
        ni += q;
        fold.sort_unstable();
        folds.push(fold);
    }
    let test = folds.pop().expect("four folds");
    let calib = folds.pop().expect("four folds");
    let valid = folds.pop().expect("four folds");
    let train = folds.pop().expect("four folds");
    Ok(SplitIndices {
        train,
        valid,
        calib,
        test,
    })
}

/// The held-out test fold. It can be opened exactly once.
#[derive(Debug)]
pub struct SealedFold {
    data: LabeledDataset,
}

impl SealedFold {
    pub fn seal(data: LabeledDataset) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn open(self) -> LabeledDataset {
        self.data
    }
}

#[derive(Debug)]
pub struct Folds {
    pub train: LabeledDataset,
    pub valid: LabeledDataset,
    pub calib: LabeledDataset,
    pub test: SealedFold,
}

pub fn split_dataset(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Folds> {
    let idx = stratified_split(&ds.labels(), spec)?;
    folds_from_indices(ds, &idx)
}

pub fn folds_from_indices(ds: &LabeledDataset, idx: &SplitIndices) -> Result<Folds> {
    if let Some(&i) = idx.folds().iter().flat_map(|f| f.iter()).find(|&&i| i >= ds.len()) {
        return Err(Error::Data(format!("split index {i} out of range for {} examples", ds.len())));
    }
    Ok(Folds {
        train: ds.subset(&idx.train),
        valid: ds.subset(&idx.valid),
        calib: ds.subset(&idx.calib),
        test: SealedFold::seal(ds.subset(&idx.test)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub dense_dim: usize,
    pub dropout_rate: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            embed_dim: 16,
            hidden_dim: 32,
            attn_dim: 16,
            dense_dim: 16,
            dropout_rate: 0.0,
        }
    }
}

impl Hyperparameters {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attn_dim: self.attn_dim,
            dense_dim: self.dense_dim,
            dropout_rate: self.dropout_rate,
            seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
        }
    }
}

/// lr {1e-3, 3e-4} x hidden {32, 64} x dropout {0, 0.2}.
pub fn default_grid() -> Vec<Hyperparameters> {
    let mut grid = Vec::new();
    for lr in [1e-3, 3e-4] {
        for hidden_dim in [32, 64] {
            for dropout_rate in [0.0, 0.2] {
                grid.push(Hyperparameters {
                    lr,
                    hidden_dim,
                    dropout_rate,
                    ..Default::default()
                });
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log. Epoch 0 records the loss before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auroc: Option<f64>,
    pub valid_auprc: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub site: String,
    pub stage: String,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_auprc: f64,
    pub best_valid_auroc: f64,
}

impl TrainingLog {
    pub fn initial_train_loss(&self) -> f64 {
        self.records[0].train_loss
    }

    pub fn final_train_loss(&self) -> f64 {
        self.records.last().expect("nonempty log").train_loss
    }

    /// Number of training epochs run, not counting the initial record.
    pub fn epochs_run(&self) -> usize {
        self.records.len() - 1
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(w, "{line}").map_err(|e| Error::Format(format!("training log: {e}")))?;
        }
        Ok(())
    }

    pub fn write_jsonl_file(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(crate::claims::create(path)?))
    }
}

/// Raw (uncalibrated) scores for every example, in dataset order.
pub fn raw_scores(model: &RiskModel, ds: &LabeledDataset) -> Result<Vec<f64>> {
    model.check_schema(ds.schema.version_hash())?;
    ds.examples.par_iter().map(|e| model.score(e)).collect()
}

/// Calibrated scores when the model carries a calibrator.
pub fn predict_scores(model: &RiskModel, ds: &LabeledDataset) -> Result<Vec<f64>> {
    model.check_schema(ds.schema.version_hash())?;
    ds.examples.par_iter().map(|e| model.predict(e)).collect()
}

pub fn evaluate(model: &RiskModel, ds: &LabeledDataset) -> Result<RankMetrics> {
    rank_metrics(&predict_scores(model, ds)?, &ds.labels())
}

fn mean_loss(model: &RiskModel, ds: &LabeledDataset, targets: &[f64]) -> Result<f64> {
    let losses: Vec<f64> = ds
        .examples
        .par_iter()
        .zip(targets)
        .map(|(e, &t)| model.score(e).map(|p| bce(p, t)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minibatch Adam from the model's current parameters against `targets`,
/// early-stopped on validation AUPRC against hard labels.
///
/// Validation runs after every epoch; training stops once more than
/// `patience` epochs have passed without a strict improvement, and the best
/// checkpoint is returned.
pub fn fit(
    mut model: RiskModel,
    train: &LabeledDataset,
    targets: &[f64],
    valid: &LabeledDataset,
    opts: &TrainOptions,
    seed: u64,
    stage: &str,
) -> Result<(RiskModel, TrainingLog)> {
    opts.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation folds must be nonempty".into()));
    }
    if targets.len() != train.len() {
        return Err(Error::Data(format!("{} targets for {} training examples", targets.len(), train.len())));
    }
    model.check_schema(train.schema.version_hash())?;
    model.check_schema(valid.schema.version_hash())?;
    let valid_labels = valid.labels();
    if valid.n_positive() == 0 || valid.n_positive() == valid.len() {
        return Err(Error::Data("validation fold needs both classes".into()));
    }

    let mut log = TrainingLog {
        site: train.site_name.clone(),
        stage: stage.to_string(),
        records: vec![EpochRecord {
            epoch: 0,
            train_loss: mean_loss(&model, train, targets)?,
            valid_auroc: None,
            valid_auprc: None,
            improved: false,
        }],
        best_epoch: 0,
        best_valid_auprc: f64::NEG_INFINITY,
        best_valid_auroc: f64::NEG_INFINITY,
    };
    let diverged = |log: &TrainingLog, what: String| {
        log::error!("{} {} training diverged: {what}", log.site, log.stage);
        Error::Numerical(format!("{} {} training diverged: {what}", log.site, log.stage))
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(1);
    let mut opt = Adam::new(model.n_params(), opts.lr);
    let mut best_params = model.params().to_vec();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let batch_targets: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grad) = model
                .loss_and_grad(&batch, &batch_targets, Some(&mut dropout_rng))
                .map_err(|e| diverged(&log, e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(&log, format!("loss {loss} in epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
            opt.step(model.params_mut(), &grad)
                .map_err(|e| diverged(&log, e.to_string()))?;
        }
        let scores = raw_scores(&model, valid).map_err(|e| diverged(&log, e.to_string()))?;
        let m = rank_metrics(&scores, &valid_labels)?;
        let improved = m.auprc > log.best_valid_auprc;
        if improved {
            log.best_epoch = epoch;
            log.best_valid_auprc = m.auprc;
            log.best_valid_auroc = m.auroc;
            best_params.copy_from_slice(model.params());
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_auroc: Some(m.auroc),
            valid_auprc: Some(m.auprc),
            improved,
        });
        log::debug!(
            "{} {} epoch {epoch}: loss {:.5} valid auprc {:.4} auroc {:.4}",
            log.site,
            log.stage,
            loss_sum / train.len() as f64,
            m.auprc,
            m.auroc
        );
        if epoch - log.best_epoch > opts.patience {
            break;
        }
    }
    model.params_mut().copy_from_slice(&best_params);
    Ok((model, log))
}

/// Trains a fresh model on hard labels. Expert statistics are fitted on the
/// training fold and stored in the model.
pub fn train_local(
    train: &LabeledDataset,
    valid: &LabeledDataset,
    hp: &Hyperparameters,
    model_seed: u64,
) -> Result<(RiskModel, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::Data("training fold is empty".into()));
    }
    let mut model = RiskModel::new(hp.model_config(model_seed), &train.schema)?;
    model.expert_stats = ExpertStats::fit(&train.examples)?;
    model.provenance.push(Provenance {
        site: train.site_name.clone(),
        stage: "local".into(),
    });
    let targets: Vec<f64> = train.examples.iter().map(|e| e.label as u8 as f64).collect();
    fit(model, train, &targets, valid, &hp.train_options(), model_seed, "local")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub hyperparameters: Hyperparameters,
    pub valid_auprc: Option<f64>,
    pub valid_auroc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best_index: usize,
    pub best: Hyperparameters,
    pub model: RiskModel,
    pub log: TrainingLog,
    pub scores: Vec<GridScore>,
}

/// Index of the winning score: highest AUPRC, then highest AUROC, then
/// earliest position.
pub fn select_best(scores: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(p, r)) in scores.iter().enumerate() {
        if p.is_nan() || r.is_nan() {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                let (bp, br) = scores[b];
                if p > bp || (p == bp && r > br) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Trains one model per setting (in parallel) and keeps the best by
/// validation AUPRC. Setting `i` uses model seed `derive_seed(seed, "grid", i)`.
pub fn grid_search(
    train: &LabeledDataset,
    valid: &LabeledDataset,
    grid: &[Hyperparameters],
    seed: u64,
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let runs: Vec<Result<(RiskModel, TrainingLog)>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, hp)| train_local(train, valid, hp, derive_seed(seed, "grid", i as u64)))
        .collect();
    let mut scores = Vec::with_capacity(grid.len());
    let mut keys = Vec::with_capacity(grid.len());
    for (hp, run) in grid.iter().zip(&runs) {
        match run {
            Ok((_, log)) => {
                keys.push((log.best_valid_auprc, log.best_valid_auroc));
                scores.push(GridScore {
                    hyperparameters: *hp,
                    valid_auprc: Some(log.best_valid_auprc),
                    valid_auroc: Some(log.best_valid_auroc),
                    best_epoch: Some(log.best_epoch),
                    error: None,
                });
            }
            Err(e) => {
                if !matches!(e, Error::Numerical(_)) {
                    return Err(Error::Data(e.to_string()));
                }
                keys.push((f64::NAN, f64::NAN));
                scores.push(GridScore {
                    hyperparameters: *hp,
                    valid_auprc: None,
                    valid_auroc: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let best_index = select_best(&keys)
        .ok_or_else(|| Error::Numerical("every grid setting diverged".into()))?;
    let (model, log) = runs.into_iter().nth(best_index).expect("index in range")?;
    Ok(GridResult {
        best_index,
        best: grid[best_index],
        model,
        log,
        scores,
    })
}

/// Monotone map `s -> sigmoid(a * logit(s) + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub a: f64,
    pub b: f64,
}

impl Calibrator {
    pub const IDENTITY: Calibrator = Calibrator { a: 1.0, b: 0.0 };

    pub fn apply(&self, s: f64) -> f64 {
        sigmoid(self.a * logit(s) + self.b)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds, finite for every score in [0, 1].
pub fn logit(s: f64) -> f64 {
    let s = s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    s.ln() - (-s).ln_1p()
}

pub const PLATT_MAX_ITER: usize = 100;
pub const PLATT_TOLERANCE: f64 = 1e-8;

/// Maximum-likelihood fit of `(a, b)` by damped Newton steps with
/// backtracking, starting from the identity.
///
/// When the fitted slope is not positive, the slope is pinned to 1 and only
/// the intercept is refit, so the map stays strictly increasing.
pub fn platt_fit(scores: &[f64], labels: &[bool]) -> Result<Calibrator> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data("calibration needs equally many scores and labels".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Data("calibration fold contains a single class".into()));
    }
    let x: Vec<f64> = scores.iter().map(|&s| logit(s)).collect();
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let (a, b) = newton_fit(&x, &y, true);
    let (a, b) = if a.is_finite() && a <= 0.0 {
        log::warn!("calibration slope a={a} is not positive; refitting the intercept with a=1");
        newton_fit(&x, &y, false)
    } else {
        (a, b)
    };
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numerical(format!("calibration fit diverged (a={a}, b={b})")));
    }
    Ok(Calibrator { a, b })
}

/// Minimizes the mean logistic loss of `sigmoid(a x + b)` from `(1, 0)`.
/// With `fit_slope` false, `a` stays at 1.
fn newton_fit(x: &[f64], y: &[f64], fit_slope: bool) -> (f64, f64) {
    let n = x.len() as f64;
    let nll = |a: f64, b: f64| -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| {
                let z = a * xi + b;
                // log(1 + e^z) - y z, computed stably
                let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                softplus - yi * z
            })
            .sum::<f64>()
            / n
    };
    let (mut a, mut b) = (1.0, 0.0);
    let mut f = nll(a, b);
    for _ in 0..PLATT_MAX_ITER {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (xi, yi) in x.iter().zip(y) {
            let p = sigmoid(a * xi + b);
            let r = p - yi;
            let w = p * (1.0 - p);
            ga += r * xi;
            gb += r;
            haa += w * xi * xi;
            hab += w * xi;
            hbb += w;
        }
        let (ga, gb, haa, hab, hbb) = (ga / n, gb / n, haa / n + 1e-12, hab / n, hbb / n + 1e-12);
        let (da, db) = if !fit_slope {
            (0.0, gb / hbb)
        } else {
            let det = haa * hbb - hab * hab;
            if det > 1e-300 {
                ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
            } else {
                (ga, gb)
            }
        };
        let norm = if fit_slope { (ga * ga + gb * gb).sqrt() } else { gb.abs() };
        if norm < PLATT_TOLERANCE {
            break;
        }
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-10 {
            let (na, nb) = (a - step * da, b - step * db);
            let nf = nll(na, nb);
            if nf <= f {
                a = na;
                b = nb;
                f = nf;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (a, b)
}

/// Fits a calibrator on the model's raw scores over the calibration fold.
pub fn platt_calibrate(model: &RiskModel, calib: &LabeledDataset) -> Result<Calibrator> {
    let scores = raw_scores(model, calib)?;
    platt_fit(&scores, &calib.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn platt_reversed_scores_keep_order() {
        let scores = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
        let labels = [false, false, false, true, true, false];
        let c = platt_fit(&scores, &labels).unwrap();
        assert_eq!(c.a, 1.0);
        assert!(c.apply(0.9) > c.apply(0.1));
        let base_rate = 2.0 / 6.0;
        let mean: f64 = scores.iter().map(|&s| c.apply(s)).sum::<f64>() / 6.0;
        assert!((mean - base_rate).abs() < 1e-6);
    }

    #[test]
    fn largest_remainder_basic() {
        assert_eq!(largest_remainder(&[1.4, 0.2, 0.1, 0.3], 2), vec![2, 0, 0, 0]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 1), vec![1, 0]);
        assert_eq!(largest_remainder(&[14.0, 2.0, 1.0, 3.0], 20), vec![14, 2, 1, 3]);
    }

    #[test]
    fn thousand_examples_split_exactly() {
        let labels: Vec<bool> = (0..1000).map(|i| i % 10 == 0).collect();
        let s = stratified_split(&labels, &SplitSpec::default()).unwrap();
        let sizes: Vec<usize> = s.folds().iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![700, 100, 50, 150]);
        let pos: Vec<usize> = s.folds().iter().map(|f| f.iter().filter(|&&i| labels[i]).count()).collect();
        assert_eq!(pos, vec![70, 10, 5, 15]);
    }

    #[test]
    fn twenty_examples_two_positives() {
        let labels: Vec<bool> = (0..20).map(|i| i < 2).collect();
        let s = stratified_split(&labels, &SplitSpec::default()).unwrap();
        let sizes: Vec<usize> = s.folds().iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![14, 2, 1, 3]);
        assert!(s.folds().iter().all(|f| !f.is_empty()));
        assert_eq!(s.train.iter().filter(|&&i| labels[i]).count(), 2);
    }

    #[test]
    fn tiny_dataset_errors() {
        let labels = vec![true, false, false];
        let err = stratified_split(&labels, &SplitSpec::default()).unwrap_err();
        assert!(err.to_string().contains("supply more data"));
    }

    #[test]
    fn single_class_rejected() {
        assert!(stratified_split(&[false; 50], &SplitSpec::default()).is_err());
    }

    #[test]
    fn select_best_tie_rules() {
        assert_eq!(select_best(&[(0.5, 0.7)]), Some(0));
        assert_eq!(select_best(&[(0.5, 0.7), (0.5, 0.7)]), Some(0));
        assert_eq!(select_best(&[(0.5, 0.7), (0.5, 0.8)]), Some(1));
        assert_eq!(select_best(&[(0.4, 0.9), (0.5, 0.1)]), Some(1));
        assert_eq!(select_best(&[(f64::NAN, f64::NAN)]), None);
    }

    #[test]
    fn default_grid_has_eight_settings() {
        let g = default_grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0].lr, 1e-3);
        assert_eq!(g[7].hidden_dim, 64);
        assert_eq!(g[7].dropout_rate, 0.2);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for s in [1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((sigmoid(logit(s)) - s).abs() < 1e-12);
        }
        assert!(logit(0.0).is_finite() && logit(1.0).is_finite());
    }

    #[test]
    fn platt_single_class_is_error() {
        assert!(platt_fit(&[0.2, 0.3], &[true, true]).is_err());
    }

    #[test]
    fn derive_seed_is_stable_and_distinct() {
        assert_eq!(derive_seed(42, "a", 0), derive_seed(42, "a", 0));
        assert_ne!(derive_seed(42, "a", 0), derive_seed(42, "a", 1));
        assert_ne!(derive_seed(42, "a", 0), derive_seed(42, "b", 0));
    }
}
