//! Model inputs: a bucketed code-count sequence plus expert features.
//!
//! The lookback window covers `n_buckets * bucket_days` days strictly before
//! the index discharge date. A claim whose admit date lies `k` days before
//! discharge (`1 <= k < n_buckets * bucket_days`) lands in bucket
//! `k / bucket_days`, so bucket 0 is the most recent window.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claims::{days_between, ClaimRecord, PatientHistory, Setting, Sex};
use crate::cohort::{CohortRow, IndexEvent};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"PRSK";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_N_BUCKETS: usize = 12;
pub const DEFAULT_BUCKET_DAYS: i64 = 30;

pub const EXPERT_FEATURES: [&str; 7] = [
    "age_years",
    "sex_f",
    "sex_m",
    "sex_u",
    "cci",
    "claim_count",
    "inpatient_days",
];

/// Charlson-style comorbidity weights keyed by category, plus each
/// category's diagnosis-code prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CciTable {
    pub weights: BTreeMap<String, u32>,
    pub prefixes: BTreeMap<String, Vec<String>>,
}

impl Default for CciTable {
    fn default() -> Self {
        serde_json::from_str(include_str!("../assets/cci_charlson.json"))
            .expect("bundled Charlson table parses")
    }
}

impl CciTable {
    pub fn score<'a>(&self, dx_codes: impl IntoIterator<Item = &'a str>) -> u32 {
        compute_cci(dx_codes, &self.weights, &self.prefixes)
    }
}

/// Sums the weights of distinct matched categories.
pub fn compute_cci<'a>(
    dx_codes: impl IntoIterator<Item = &'a str>,
    weights: &BTreeMap<String, u32>,
    category_prefixes: &BTreeMap<String, Vec<String>>,
) -> u32 {
    let mut hit: BTreeSet<&str> = BTreeSet::new();
    for code in dx_codes {
        for (category, prefixes) in category_prefixes {
            if prefixes.iter().any(|p| code.starts_with(p.as_str())) {
                hit.insert(category);
            }
        }
    }
    hit.into_iter().map(|c| weights.get(c).copied().unwrap_or(0)).sum()
}

#[derive(Serialize, Deserialize)]
struct SchemaFields {
    vocab: Vec<String>,
    n_buckets: usize,
    bucket_days: i64,
    expert_feature_names: Vec<String>,
    cci: CciTable,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    #[serde(flatten)]
    fields: SchemaFields,
    version_hash: String,
}

/// Vocabulary, bucket layout and expert feature list shared by every
/// example, identified by a digest over all of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FeatureSchema {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    n_buckets: usize,
    bucket_days: i64,
    expert_feature_names: Vec<String>,
    cci: CciTable,
    version_hash: String,
}

fn digest(fields: &SchemaFields) -> String {
    let bytes = serde_json::to_vec(fields).expect("schema serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl TryFrom<SchemaRepr> for FeatureSchema {
    type Error = String;

    fn try_from(repr: SchemaRepr) -> std::result::Result<Self, String> {
        let expected = digest(&repr.fields);
        if expected != repr.version_hash {
            return Err(format!(
                "schema version_hash {} does not match contents ({expected})",
                repr.version_hash
            ));
        }
        let f = repr.fields;
        FeatureSchema::new(f.vocab, f.n_buckets, f.bucket_days, f.cci).map_err(|e| e.to_string())
    }
}

impl From<FeatureSchema> for SchemaRepr {
    fn from(s: FeatureSchema) -> Self {
        SchemaRepr {
            fields: SchemaFields {
                vocab: s.vocab,
                n_buckets: s.n_buckets,
                bucket_days: s.bucket_days,
                expert_feature_names: s.expert_feature_names,
                cci: s.cci,
            },
            version_hash: s.version_hash,
        }
    }
}

impl FeatureSchema {
    pub fn new(vocab: Vec<String>, n_buckets: usize, bucket_days: i64, cci: CciTable) -> Result<Self> {
        if n_buckets == 0 || bucket_days < 1 {
            return Err(Error::Config("n_buckets and bucket_days must be positive".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, code) in vocab.iter().enumerate() {
            if index.insert(code.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary code {code}")));
            }
        }
        let fields = SchemaFields {
            vocab,
            n_buckets,
            bucket_days,
            expert_feature_names: EXPERT_FEATURES.iter().map(|s| s.to_string()).collect(),
            cci,
        };
        let version_hash = digest(&fields);
        Ok(Self {
            vocab: fields.vocab,
            index,
            n_buckets,
            bucket_days,
            expert_feature_names: fields.expert_feature_names,
            cci: fields.cci,
            version_hash,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn code_index(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn bucket_days(&self) -> i64 {
        self.bucket_days
    }

    pub fn lookback_days(&self) -> i64 {
        self.n_buckets as i64 * self.bucket_days
    }

    pub fn expert_feature_names(&self) -> &[String] {
        &self.expert_feature_names
    }

    pub fn n_expert(&self) -> usize {
        self.expert_feature_names.len()
    }

    pub fn cci(&self) -> &CciTable {
        &self.cci
    }

    pub fn version_hash(&self) -> &str {
        &self.version_hash
    }

    /// Claims whose admit date falls inside the lookback window, with their bucket.
    fn lookback<'a>(
        &'a self,
        h: &'a PatientHistory,
        discharge: NaiveDate,
    ) -> impl Iterator<Item = (usize, &'a ClaimRecord)> + 'a {
        let horizon = self.lookback_days();
        h.claims.iter().filter_map(move |c| {
            let offset = days_between(c.admit_date, discharge);
            (offset >= 1 && offset < horizon).then(|| ((offset / self.bucket_days) as usize, c))
        })
    }
}

/// The identity and label of one index event, independent of where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSpec {
    pub patient_id: String,
    pub discharge_date: NaiveDate,
    pub label: bool,
}

impl From<&IndexEvent> for EventSpec {
    fn from(e: &IndexEvent) -> Self {
        Self {
            patient_id: e.patient_id.clone(),
            discharge_date: e.discharge_date,
            label: e.label_30d,
        }
    }
}

impl From<&CohortRow> for EventSpec {
    fn from(r: &CohortRow) -> Self {
        Self {
            patient_id: r.patient_id.clone(),
            discharge_date: r.discharge_date,
            label: r.label_30d != 0,
        }
    }
}

/// Builds the vocabulary: top `vocab_size_cap` codes by the number of
/// lookback windows they occur in, ties broken lexicographically.
pub fn fit_schema<'a>(
    events: impl IntoIterator<Item = (&'a EventSpec, &'a PatientHistory)>,
    vocab_size_cap: usize,
    n_buckets: usize,
    bucket_days: i64,
    cci: CciTable,
) -> Result<FeatureSchema> {
    if vocab_size_cap == 0 {
        return Err(Error::Config("vocab_size_cap must be positive".into()));
    }
    let probe = FeatureSchema::new(vec![], n_buckets, bucket_days, cci.clone())?;
    let mut doc_freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n_events = 0usize;
    for (event, h) in events {
        n_events += 1;
        let codes: BTreeSet<&str> = probe
            .lookback(h, event.discharge_date)
            .flat_map(|(_, c)| c.all_codes())
            .collect();
        for code in codes {
            *doc_freq.entry(code).or_default() += 1;
        }
    }
    if n_events == 0 {
        return Err(Error::Data("cannot fit a feature schema on an empty cohort".into()));
    }
    let mut ranked: Vec<(&str, usize)> = doc_freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let vocab = ranked
        .into_iter()
        .take(vocab_size_cap)
        .map(|(c, _)| c.to_string())
        .collect();
    FeatureSchema::new(vocab, n_buckets, bucket_days, cci)
}

/// Sparse `n_buckets x n_codes` count matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CountMatrix {
    n_buckets: usize,
    n_codes: usize,
    row_offsets: Vec<usize>,
    entries: Vec<(u32, u32)>,
}

impl CountMatrix {
    /// Builds from `(bucket, code, count)` triples in any order; duplicates are summed.
    pub fn from_triples(n_buckets: usize, n_codes: usize, triples: impl IntoIterator<Item = (usize, usize, u32)>) -> Result<Self> {
        let mut cells: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for (b, c, n) in triples {
            if b >= n_buckets || c >= n_codes {
                return Err(Error::Format(format!(
                    "cell ({b}, {c}) outside {n_buckets}x{n_codes} matrix"
                )));
            }
            if n > 0 {
                *cells.entry((b, c)).or_default() += n;
            }
        }
        let mut row_offsets = vec![0usize; n_buckets + 1];
        let mut entries = Vec::with_capacity(cells.len());
        for ((b, c), n) in cells {
            row_offsets[b + 1] += 1;
            entries.push((c as u32, n));
        }
        for b in 0..n_buckets {
            row_offsets[b + 1] += row_offsets[b];
        }
        Ok(Self {
            n_buckets,
            n_codes,
            row_offsets,
            entries,
        })
    }

    pub fn zeros(n_buckets: usize, n_codes: usize) -> Self {
        Self::from_triples(n_buckets, n_codes, std::iter::empty()).expect("empty is valid")
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    /// Nonzero `(code, count)` pairs of one bucket, ascending by code.
    pub fn row(&self, bucket: usize) -> &[(u32, u32)] {
        &self.entries[self.row_offsets[bucket]..self.row_offsets[bucket + 1]]
    }

    pub fn get(&self, bucket: usize, code: usize) -> u32 {
        self.row(bucket)
            .binary_search_by_key(&(code as u32), |e| e.0)
            .map(|i| self.row(bucket)[i].1)
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.1 as u64).sum()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// All nonzero cells as `(bucket, code, count)` in row-major order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.n_buckets).flat_map(move |b| self.row(b).iter().map(move |&(c, n)| (b, c as usize, n)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub patient_id: String,
    pub discharge_date: NaiveDate,
    pub sequence: CountMatrix,
    pub expert: Vec<f64>,
    pub label: bool,
}

impl EncodedExample {
    /// Content digest used to key score lookups.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.patient_id.as_bytes());
        h.update(self.discharge_date.num_days_from_ce().to_le_bytes());
        for (b, c, n) in self.sequence.triples() {
            h.update((b as u32).to_le_bytes());
            h.update((c as u32).to_le_bytes());
            h.update(n.to_le_bytes());
        }
        for x in &self.expert {
            h.update(x.to_le_bytes());
        }
        h.update([self.label as u8]);
        hex::encode(h.finalize())
    }
}

pub fn encode_example(event: &EventSpec, h: &PatientHistory, schema: &FeatureSchema) -> EncodedExample {
    let mut triples = Vec::new();
    let mut claim_count = 0usize;
    let mut inpatient_days = 0i64;
    let mut dx: Vec<&str> = Vec::new();
    for (bucket, c) in schema.lookback(h, event.discharge_date) {
        claim_count += 1;
        if c.setting == Setting::Inpatient {
            inpatient_days += c.duration_days();
        }
        dx.extend(c.dx_codes.iter().map(String::as_str));
        dx.push(&c.primary_dx);
        for code in c.all_codes() {
            if let Some(i) = schema.code_index(code) {
                triples.push((bucket, i, 1));
            }
        }
    }
    let sequence = CountMatrix::from_triples(schema.n_buckets(), schema.vocab().len(), triples)
        .expect("bucket and code indices are in range");
    let d = &h.demographics;
    let age = (event.discharge_date.year() - d.birth_year) as f64;
    let sex = |s: Sex| if d.sex == s { 1.0 } else { 0.0 };
    let expert = vec![
        age,
        sex(Sex::F),
        sex(Sex::M),
        sex(Sex::U),
        schema.cci().score(dx) as f64,
        claim_count as f64,
        inpatient_days as f64,
    ];
    EncodedExample {
        patient_id: event.patient_id.clone(),
        discharge_date: event.discharge_date,
        sequence,
        expert,
        label: event.label,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<EncodedExample>,
    pub schema: FeatureSchema,
    pub site_name: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn n_positive(&self) -> usize {
        self.examples.iter().filter(|e| e.label).count()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            schema: self.schema.clone(),
            site_name: self.site_name.clone(),
        }
    }
}

/// Encodes every event against `schema`. Events whose patient is missing
/// from `histories` are a data error.
pub fn encode_dataset(
    events: &[EventSpec],
    histories: &[PatientHistory],
    schema: &FeatureSchema,
    site_name: &str,
) -> Result<LabeledDataset> {
    let by_id: HashMap<&str, &PatientHistory> = histories.iter().map(|h| (h.patient_id(), h)).collect();
    for e in events {
        if !by_id.contains_key(e.patient_id.as_str()) {
            return Err(Error::Data(format!("cohort patient {} has no claims history", e.patient_id)));
        }
    }
    let examples = events
        .par_iter()
        .map(|e| encode_example(e, by_id[e.patient_id.as_str()], schema))
        .collect();
    Ok(LabeledDataset {
        examples,
        schema: schema.clone(),
        site_name: site_name.to_string(),
    })
}

/// Per-feature mean and population standard deviation of expert features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
    /// Features whose variance was zero. They pass through unchanged
    /// (mean 0, stdev 1).
    pub clamped: Vec<bool>,
}

impl ExpertStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            stdev: vec![1.0; n],
            clamped: vec![false; n],
        }
    }

    pub fn fit(examples: &[EncodedExample]) -> Result<Self> {
        let n = examples.first().map(|e| e.expert.len()).ok_or_else(|| {
            Error::Data("cannot fit expert statistics on an empty dataset".into())
        })?;
        let count = examples.len() as f64;
        let mut mean = vec![0.0; n];
        for e in examples {
            for (m, x) in mean.iter_mut().zip(&e.expert) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for e in examples {
            for ((v, x), m) in var.iter_mut().zip(&e.expert).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut clamped = vec![false; n];
        let stdev = var
            .iter()
            .zip(clamped.iter_mut())
            .map(|(v, flag)| {
                let sd = (v / count).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    *flag = true;
                    1.0
                }
            })
            .collect();
        for (m, flag) in mean.iter_mut().zip(&clamped) {
            if *flag {
                *m = 0.0;
            }
        }
        Ok(Self { mean, stdev, clamped })
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.stdev))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Standardizes expert features with `stats`, fitting them on this dataset when absent.
pub fn standardize_expert(
    dataset: &LabeledDataset,
    stats: Option<&ExpertStats>,
) -> Result<(LabeledDataset, ExpertStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ExpertStats::fit(&dataset.examples)?,
    };
    if let Some(e) = dataset.examples.iter().find(|e| e.expert.len() != stats.mean.len()) {
        return Err(Error::Data(format!(
            "expert vector of length {} does not match {} statistics",
            e.expert.len(),
            stats.mean.len()
        )));
    }
    let mut out = dataset.clone();
    for e in &mut out.examples {
        e.expert = stats.apply(&e.expert);
    }
    Ok((out, stats))
}

fn io_err(e: std::io::Error) -> Error {
    Error::Format(format!("dataset container: {e}"))
}

/// Writes the binary dataset container (layout documented in the README).
pub fn write_dataset<W: Write>(mut w: W, ds: &LabeledDataset) -> Result<()> {
    let schema_json = serde_json::to_vec(&ds.schema)?;
    w.write_all(DATASET_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(DATASET_FORMAT_VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(schema_json.len() as u32).map_err(io_err)?;
    w.write_all(&schema_json).map_err(io_err)?;
    w.write_u32::<LittleEndian>(ds.site_name.len() as u32).map_err(io_err)?;
    w.write_all(ds.site_name.as_bytes()).map_err(io_err)?;
    w.write_u64::<LittleEndian>(ds.examples.len() as u64).map_err(io_err)?;
    let n_expert = ds.schema.n_expert();
    for e in &ds.examples {
        if e.expert.len() != n_expert {
            return Err(Error::Data("expert vector length does not match schema".into()));
        }
        w.write_u32::<LittleEndian>(e.patient_id.len() as u32).map_err(io_err)?;
        w.write_all(e.patient_id.as_bytes()).map_err(io_err)?;
        w.write_i32::<LittleEndian>(e.discharge_date.num_days_from_ce()).map_err(io_err)?;
        w.write_u8(e.label as u8).map_err(io_err)?;
        for x in &e.expert {
            w.write_f64::<LittleEndian>(*x).map_err(io_err)?;
        }
        w.write_u32::<LittleEndian>(e.sequence.nnz() as u32).map_err(io_err)?;
        for (b, c, n) in e.sequence.triples() {
            w.write_u32::<LittleEndian>(b as u32).map_err(io_err)?;
            w.write_u32::<LittleEndian>(c as u32).map_err(io_err)?;
            w.write_u32::<LittleEndian>(n).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_string<R: Read>(r: &mut R, max: usize) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if len > max {
        return Err(Error::Format(format!("string length {len} exceeds limit {max}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(io_err)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<LabeledDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format version {version}")));
    }
    let schema_json = read_string(&mut r, 1 << 28)?;
    let schema: FeatureSchema = serde_json::from_str(&schema_json)?;
    let site_name = read_string(&mut r, 1 << 16)?;
    let count = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let n_expert = schema.n_expert();
    let (n_buckets, n_codes) = (schema.n_buckets(), schema.vocab().len());
    let mut examples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let patient_id = read_string(&mut r, 1 << 16)?;
        let days = r.read_i32::<LittleEndian>().map_err(io_err)?;
        let discharge_date = NaiveDate::from_num_days_from_ce_opt(days)
            .ok_or_else(|| Error::Format(format!("invalid date ordinal {days}")))?;
        let label = match r.read_u8().map_err(io_err)? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("invalid label byte {other}"))),
        };
        let mut expert = Vec::with_capacity(n_expert);
        for _ in 0..n_expert {
            expert.push(r.read_f64::<LittleEndian>().map_err(io_err)?);
        }
        let nnz = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut triples = Vec::with_capacity(nnz.min(1 << 16));
        for _ in 0..nnz {
            let b = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let c = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let n = r.read_u32::<LittleEndian>().map_err(io_err)?;
            triples.push((b, c, n));
        }
        examples.push(EncodedExample {
            patient_id,
            discharge_date,
            sequence: CountMatrix::from_triples(n_buckets, n_codes, triples)?,
            expert,
            label,
        });
    }
    Ok(LabeledDataset {
        examples,
        schema,
        site_name,
    })
}

pub fn write_dataset_file(path: &Path, ds: &LabeledDataset) -> Result<()> {
    write_dataset(std::io::BufWriter::new(crate::claims::create(path)?), ds)
}

pub fn read_dataset_file(path: &Path) -> Result<LabeledDataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{DischargeStatus, PatientDemographics};

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn claim(pid: &str, admit: &str, codes: &[&str]) -> ClaimRecord {
        ClaimRecord {
            patient_id: pid.into(),
            admit_date: d(admit),
            discharge_date: d(admit),
            setting: Setting::Outpatient,
            discharge_status: DischargeStatus::Home,
            dx_codes: codes.iter().map(|s| s.to_string()).collect(),
            proc_codes: vec![],
            drug_codes: vec![],
            primary_dx: codes.first().map(|s| s.to_string()).unwrap_or_default(),
            planned_flag: false,
        }
    }

    fn history(pid: &str, claims: Vec<ClaimRecord>) -> PatientHistory {
        PatientHistory::new(
            PatientDemographics {
                patient_id: pid.into(),
                birth_year: 1950,
                sex: Sex::F,
                region: "r".into(),
            },
            claims,
        )
    }

    fn event(pid: &str, date: &str) -> EventSpec {
        EventSpec {
            patient_id: pid.into(),
            discharge_date: d(date),
            label: false,
        }
    }

    fn schema(vocab: &[&str]) -> FeatureSchema {
        FeatureSchema::new(vocab.iter().map(|s| s.to_string()).collect(), 12, 30, CciTable::default()).unwrap()
    }

    #[test]
    fn vocab_ranks_by_document_frequency() {
        let mut hs = Vec::new();
        let mut evs = Vec::new();
        for i in 0..5 {
            let pid = format!("P{i}");
            let mut codes = vec!["A"];
            if i < 3 {
                codes.push("B");
            }
            if i == 0 {
                codes.push("C");
            }
            hs.push(history(&pid, vec![claim(&pid, "2018-05-01", &codes), claim(&pid, "2018-05-02", &codes)]));
            evs.push(event(&pid, "2018-06-01"));
        }
        let pairs: Vec<_> = evs.iter().zip(&hs).collect();
        let s = fit_schema(pairs.iter().copied(), 2, 12, 30, CciTable::default()).unwrap();
        assert_eq!(s.vocab(), ["A", "B"]);
        let s = fit_schema(pairs.iter().copied(), 10, 12, 30, CciTable::default()).unwrap();
        assert_eq!(s.vocab(), ["A", "B", "C"]);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let hs = vec![history("P", vec![claim("P", "2018-05-01", &["Y", "X"])])];
        let evs = vec![event("P", "2018-06-01")];
        let s = fit_schema(evs.iter().zip(&hs), 1, 12, 30, CciTable::default()).unwrap();
        assert_eq!(s.vocab(), ["X"]);
    }

    #[test]
    fn empty_cohort_cannot_fit() {
        let r = fit_schema(std::iter::empty(), 5, 12, 30, CciTable::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn cci_counts_distinct_categories() {
        let weights: BTreeMap<String, u32> = [("A".to_string(), 1), ("B".to_string(), 2)].into();
        let prefixes: BTreeMap<String, Vec<String>> =
            [("A".to_string(), vec!["I50".to_string()]), ("B".to_string(), vec!["N18".to_string()])].into();
        assert_eq!(compute_cci(["Z00"], &weights, &prefixes), 0);
        assert_eq!(compute_cci(["I50", "N18"], &weights, &prefixes), 3);
        assert_eq!(compute_cci(["I500", "I501", "I50"], &weights, &prefixes), 1);
    }

    #[test]
    fn default_charlson_table_scores_common_codes() {
        let cci = CciTable::default();
        assert_eq!(cci.score(["I50"]), 1);
        assert_eq!(cci.score(["N18", "C78"]), 8);
    }

    #[test]
    fn empty_lookback_gives_zero_features() {
        let s = schema(&["A"]);
        let h = history("P", vec![claim("P", "2016-01-01", &["A"])]);
        let e = encode_example(&event("P", "2018-06-01"), &h, &s);
        assert_eq!(e.sequence.total(), 0);
        assert_eq!(e.expert[4], 0.0);
        assert_eq!(e.expert[5], 0.0);
    }

    #[test]
    fn claim_ten_days_out_lands_in_bucket_zero() {
        let s = schema(&["A", "B"]);
        let h = history("P", vec![claim("P", "2018-05-22", &["B"])]);
        let e = encode_example(&event("P", "2018-06-01"), &h, &s);
        assert_eq!(e.sequence.total(), 1);
        assert_eq!(e.sequence.get(0, 1), 1);
        assert_eq!(e.expert[5], 1.0);
    }

    #[test]
    fn lookback_boundary_is_exclusive() {
        let s = schema(&["A"]);
        let discharge = d("2018-12-31");
        let at_edge = discharge - chrono::Duration::days(360);
        let inside = discharge - chrono::Duration::days(359);
        let h = history(
            "P",
            vec![
                claim("P", &at_edge.to_string(), &["A"]),
                claim("P", &inside.to_string(), &["A"]),
                claim("P", "2018-12-31", &["A"]),
            ],
        );
        let e = encode_example(&event("P", "2018-12-31"), &h, &s);
        assert_eq!(e.sequence.total(), 1);
        assert_eq!(e.sequence.get(11, 0), 1);
    }

    #[test]
    fn age_and_sex_features() {
        let s = schema(&[]);
        let h = history("P", vec![]);
        let e = encode_example(&event("P", "2018-06-01"), &h, &s);
        assert_eq!(&e.expert[..4], &[68.0, 1.0, 0.0, 0.0]);
    }

    fn dataset_with_expert(values: &[f64]) -> LabeledDataset {
        let s = schema(&[]);
        LabeledDataset {
            examples: values
                .iter()
                .map(|&v| EncodedExample {
                    patient_id: "P".into(),
                    discharge_date: d("2018-01-01"),
                    sequence: CountMatrix::zeros(12, 0),
                    expert: vec![v, 5.0, v, v, v, v, v],
                    label: false,
                })
                .collect(),
            schema: s,
            site_name: "t".into(),
        }
    }

    #[test]
    fn standardize_two_points() {
        let ds = dataset_with_expert(&[1.0, 3.0]);
        let (out, stats) = standardize_expert(&ds, None).unwrap();
        assert_eq!(out.examples[0].expert[0], -1.0);
        assert_eq!(out.examples[1].expert[0], 1.0);
        assert!(stats.clamped[1]);
        assert_eq!(out.examples[0].expert[1], 5.0);
        assert!(!stats.clamped[0]);
    }

    #[test]
    fn foreign_stats_need_not_center() {
        let (_, stats) = standardize_expert(&dataset_with_expert(&[1.0, 3.0]), None).unwrap();
        let (out, _) = standardize_expert(&dataset_with_expert(&[10.0, 12.0]), Some(&stats)).unwrap();
        let mean = (out.examples[0].expert[0] + out.examples[1].expert[0]) / 2.0;
        assert_eq!(mean, 9.0);
    }

    #[test]
    fn schema_json_roundtrip_and_tamper_detection() {
        let s = schema(&["A", "B"]);
        let json = serde_json::to_string(&s).unwrap();
        let back: FeatureSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let tampered = json.replace("\"A\"", "\"Q\"");
        assert!(serde_json::from_str::<FeatureSchema>(&tampered).is_err());
        assert_ne!(schema(&["A"]).version_hash(), s.version_hash());
    }

    #[test]
    fn dataset_container_rejects_bad_magic() {
        let err = read_dataset(&b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
