//! Seeded synthetic claims populations with controllable inter-site shift.
//!
//! Every patient gets a set of planted codes drawn from per-code
//! prevalences. Readmission labels come from a logistic model over those
//! codes plus age, so the signal is learnable, and the intercept is solved
//! for so that the fraction of positive index events matches the profile's
//! base rate. Each patient draws from its own ChaCha stream keyed by
//! (seed, patient index), which makes output independent of thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::{
    ClaimRecord, DischargeStatus, PatientDemographics, PatientHistory, Setting, Sex,
};
use crate::error::{Error, Result};

/// Hard ceiling on the base rate: the cohort is expected to stay below 10% positives.
pub const MAX_BASE_RATE: f64 = 0.10;

const MAX_EPISODES: usize = 4;
const CALIBRATION_DRAWS: usize = 50_000;
const CALIBRATION_SEED: u64 = 0x5EED_CA11_B4A7_E000;
const CANCER_CODES: [&str; 4] = ["C18", "C34", "C50", "C61"];
const REHAB_DX: &str = "Z50";
const FILLER_DX: &str = "Z00";
const INPATIENT_PROC: &str = "99223";
const REFERENCE_AGE: f64 = 65.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    #[default]
    Dx,
    Proc,
    Drug,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSpec {
    pub code: String,
    #[serde(default)]
    pub kind: CodeKind,
    /// Fraction of patients carrying the code.
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicMix {
    pub mean_age: f64,
    pub sd_age: f64,
    pub female_fraction: f64,
    #[serde(default)]
    pub regions: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionRates {
    pub long_stay: f64,
    pub death_or_transfer_or_ama: f64,
    pub cancer: f64,
    pub rehab: f64,
}

impl ExclusionRates {
    fn iter(&self) -> [(&'static str, f64); 4] {
        [
            ("long_stay", self.long_stay),
            ("death_or_transfer_or_ama", self.death_or_transfer_or_ama),
            ("cancer", self.cancer),
            ("rehab", self.rehab),
        ]
    }
}

fn default_planned_rate() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub site_name: String,
    pub n_patients: usize,
    pub code_vocab: Vec<CodeSpec>,
    pub mean_claims_per_patient: f64,
    pub readmission_base_rate: f64,
    /// Log-odds contribution of carrying each code.
    pub risk_coefficients: BTreeMap<String, f64>,
    /// Log-odds per decade of age above 65.
    #[serde(default)]
    pub age_coefficient: f64,
    pub demographic_mix: DemographicMix,
    pub exclusion_rates: ExclusionRates,
    /// Share of readmissions flagged as scheduled.
    #[serde(default = "default_planned_rate")]
    pub planned_readmission_rate: f64,
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl SiteProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("profile {}: {msg}", self.site_name)));
        let r = self.readmission_base_rate;
        if !(r > 0.0 && r < MAX_BASE_RATE) {
            return bad(format!("readmission_base_rate {r} must lie in (0, {MAX_BASE_RATE})"));
        }
        if !(self.mean_claims_per_patient > 0.0 && self.mean_claims_per_patient.is_finite()) {
            return bad("mean_claims_per_patient must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.code_vocab {
            if !in_unit(c.prevalence) {
                return bad(format!("prevalence of {} is {} (outside [0,1])", c.code, c.prevalence));
            }
            if c.code.is_empty() || !seen.insert(c.code.as_str()) {
                return bad(format!("empty or duplicate code {:?}", c.code));
            }
        }
        for (code, w) in &self.risk_coefficients {
            if !seen.contains(code.as_str()) {
                return bad(format!("risk coefficient for unknown code {code}"));
            }
            if !w.is_finite() {
                return bad(format!("risk coefficient for {code} is not finite"));
            }
        }
        for (name, rate) in self.exclusion_rates.iter() {
            if !in_unit(rate) {
                return bad(format!("exclusion rate {name} = {rate} outside [0,1]"));
            }
        }
        let mix = &self.demographic_mix;
        if !in_unit(mix.female_fraction) || !(mix.sd_age >= 0.0) || !mix.mean_age.is_finite() {
            return bad("invalid demographic_mix".into());
        }
        if !in_unit(self.planned_readmission_rate) || !self.age_coefficient.is_finite() {
            return bad("invalid planned_readmission_rate or age_coefficient".into());
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: SiteProfile = serde_json::from_str(&text)?;
        profile.validate()?;
        Ok(profile)
    }

    fn coefficient(&self, code: &str) -> f64 {
        self.risk_coefficients.get(code).copied().unwrap_or(0.0)
    }
}

/// Per-site perturbation of a base profile. An empty shift is the identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub site_name: Option<String>,
    pub n_patients: Option<usize>,
    pub readmission_base_rate: Option<f64>,
    pub prevalence_scale: BTreeMap<String, f64>,
    pub coefficient_scale: BTreeMap<String, f64>,
    pub coefficient_offset: BTreeMap<String, f64>,
    pub mean_age_offset: f64,
    pub mean_claims_scale: Option<f64>,
}

/// Applies a [`ShiftSpec`] to a copy of `base`.
pub fn shift_profile(base: &SiteProfile, shift: &ShiftSpec) -> Result<SiteProfile> {
    let mut p = base.clone();
    let known: BTreeSet<String> = base.code_vocab.iter().map(|c| c.code.clone()).collect();
    let check_known = |code: &String| -> Result<()> {
        if known.contains(code) {
            Ok(())
        } else {
            Err(Error::Config(format!("shift references unknown code {code}")))
        }
    };
    if let Some(name) = &shift.site_name {
        p.site_name = name.clone();
    }
    if let Some(n) = shift.n_patients {
        p.n_patients = n;
    }
    if let Some(r) = shift.readmission_base_rate {
        p.readmission_base_rate = r;
    }
    if let Some(s) = shift.mean_claims_scale {
        p.mean_claims_per_patient *= s;
    }
    p.demographic_mix.mean_age += shift.mean_age_offset;
    for (code, scale) in &shift.prevalence_scale {
        check_known(code)?;
        let spec = p.code_vocab.iter_mut().find(|c| &c.code == code).expect("known code");
        let shifted = spec.prevalence * scale;
        if !in_unit(shifted) {
            return Err(Error::Config(format!(
                "shift pushes prevalence of {code} to {shifted} (outside [0,1])"
            )));
        }
        spec.prevalence = shifted;
    }
    for (code, scale) in &shift.coefficient_scale {
        check_known(code)?;
        if let Some(w) = p.risk_coefficients.get_mut(code) {
            *w *= scale;
        }
    }
    for (code, offset) in &shift.coefficient_offset {
        check_known(code)?;
        *p.risk_coefficients.entry(code.clone()).or_insert(0.0) += offset;
    }
    p.validate()?;
    Ok(p)
}

/// One ground-truth label planted by the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedLabel {
    pub patient_id: String,
    pub index_discharge_date: NaiveDate,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSite {
    pub histories: Vec<PatientHistory>,
    pub labels: Vec<PlantedLabel>,
}

impl SyntheticSite {
    pub fn positive_rate(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| l.label).count() as f64 / self.labels.len() as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Draw {
    age: f64,
    codes: Vec<usize>,
}

fn draw_patient_core<R: Rng>(profile: &SiteProfile, age_dist: &Normal<f64>, rng: &mut R) -> Draw {
    let age = age_dist.sample(rng).round().clamp(18.0, 95.0);
    let codes = profile
        .code_vocab
        .iter()
        .enumerate()
        .filter(|(_, c)| rng.random_bool(c.prevalence))
        .map(|(i, _)| i)
        .collect();
    Draw { age, codes }
}

fn linear_risk(profile: &SiteProfile, draw: &Draw) -> f64 {
    let codes: f64 = draw
        .codes
        .iter()
        .map(|&i| profile.coefficient(&profile.code_vocab[i].code))
        .sum();
    codes + profile.age_coefficient * (draw.age - REFERENCE_AGE) / 10.0
}

/// Expected positives and episodes for a patient whose per-episode
/// readmission probability is `q`, given the capped episode chain.
fn chain_expectations(q: f64) -> (f64, f64) {
    let mut pos = 0.0;
    let mut eps = 0.0;
    let mut reach = 1.0;
    for k in 0..MAX_EPISODES {
        eps += reach;
        if k + 1 < MAX_EPISODES {
            pos += reach * q;
            reach *= q;
        }
    }
    (pos, eps)
}

/// Solves for the intercept so the expected share of positive index events
/// equals the base rate. Depends only on the profile.
fn solve_intercept(profile: &SiteProfile, age_dist: &Normal<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let risks: Vec<f64> = (0..CALIBRATION_DRAWS)
        .map(|_| linear_risk(profile, &draw_patient_core(profile, age_dist, &mut rng)))
        .collect();
    let rate = |b: f64| {
        let (pos, eps) = risks.iter().fold((0.0, 0.0), |(p, e), r| {
            let (dp, de) = chain_expectations(sigmoid(b + r));
            (p + dp, e + de)
        });
        pos / eps
    };
    let (mut lo, mut hi) = (-30.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < profile.readmission_base_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct PatientPlan<'a> {
    id: String,
    rng: ChaCha8Rng,
    codes_by_kind: [Vec<&'a str>; 3],
}

impl<'a> PatientPlan<'a> {
    fn pick<'b>(&mut self, items: &'b [&'a str]) -> Option<&'a str> {
        if items.is_empty() {
            None
        } else {
            Some(items[self.rng.random_range(0..items.len())])
        }
    }

    fn los(&mut self, poisson: &Poisson<f64>) -> i64 {
        (1.0 + poisson.sample(&mut self.rng)).min(14.0) as i64
    }

    fn inpatient(&mut self, admit: NaiveDate, discharge: NaiveDate, planned: bool) -> ClaimRecord {
        let dx_pool = self.codes_by_kind[0].clone();
        let primary = self.pick(&dx_pool).unwrap_or(FILLER_DX).to_string();
        ClaimRecord {
            patient_id: self.id.clone(),
            admit_date: admit,
            discharge_date: discharge,
            setting: Setting::Inpatient,
            discharge_status: if self.rng.random_bool(0.1) {
                DischargeStatus::Other
            } else {
                DischargeStatus::Home
            },
            dx_codes: vec![primary.clone()],
            proc_codes: vec![INPATIENT_PROC.to_string()],
            drug_codes: vec![],
            primary_dx: primary,
            planned_flag: planned,
        }
    }
}

fn add_code(claim: &mut ClaimRecord, code: &str, kind: CodeKind) {
    let list = match kind {
        CodeKind::Dx => &mut claim.dx_codes,
        CodeKind::Proc => &mut claim.proc_codes,
        CodeKind::Drug => &mut claim.drug_codes,
    };
    list.push(code.to_string());
}

fn index_date_range() -> (NaiveDate, i64) {
    let start = NaiveDate::from_ymd_opt(2018, 1, 15).expect("valid date");
    let end = NaiveDate::from_ymd_opt(2019, 10, 31).expect("valid date");
    (start, (end - start).num_days())
}

fn generate_patient(
    profile: &SiteProfile,
    intercept: f64,
    age_dist: &Normal<f64>,
    seed: u64,
    index: usize,
) -> (PatientHistory, Vec<PlantedLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let draw = draw_patient_core(profile, age_dist, &mut rng);
    let id = format!("{}-{index:06}", profile.site_name);

    let mix = &profile.demographic_mix;
    let sex = if rng.random_bool(0.01) {
        Sex::U
    } else if rng.random_bool(mix.female_fraction) {
        Sex::F
    } else {
        Sex::M
    };
    let region = if mix.regions.is_empty() {
        profile.site_name.clone()
    } else {
        mix.regions[rng.random_range(0..mix.regions.len())].clone()
    };

    let mut codes_by_kind: [Vec<&str>; 3] = Default::default();
    for &i in &draw.codes {
        let c = &profile.code_vocab[i];
        let slot = match c.kind {
            CodeKind::Dx => 0,
            CodeKind::Proc => 1,
            CodeKind::Drug => 2,
        };
        codes_by_kind[slot].push(&c.code);
    }
    let mut plan = PatientPlan {
        id: id.clone(),
        rng,
        codes_by_kind,
    };
    let los_dist = Poisson::new(3.0).expect("positive rate");
    let claims_dist = Poisson::new(profile.mean_claims_per_patient).expect("positive rate");

    let (range_start, range_days) = index_date_range();
    let first_discharge = range_start + Duration::days(plan.rng.random_range(0..=range_days));
    let first_los = plan.los(&los_dist);
    let first_admit = first_discharge - Duration::days(first_los);
    let birth_year = first_discharge.year() - draw.age as i32;
    let demographics = PatientDemographics {
        patient_id: id.clone(),
        birth_year,
        sex,
        region,
    };

    let mut claims = Vec::new();

    // Ambulatory background claims carrying the planted codes, all inside the lookback.
    let n_background = (claims_dist.sample(&mut plan.rng) as usize).max(1);
    for _ in 0..n_background {
        let offset = plan.rng.random_range(1..=300);
        let date = first_admit - Duration::days(offset);
        let setting = if plan.rng.random_bool(0.15) {
            Setting::Emergency
        } else {
            Setting::Outpatient
        };
        claims.push(ClaimRecord {
            patient_id: id.clone(),
            admit_date: date,
            discharge_date: date,
            setting,
            discharge_status: DischargeStatus::Home,
            dx_codes: vec![],
            proc_codes: vec![],
            drug_codes: vec![],
            primary_dx: String::new(),
            planned_flag: false,
        });
    }
    for &i in &draw.codes {
        let c = &profile.code_vocab[i];
        let copies = 1 + plan.rng.random_range(0..2usize);
        for _ in 0..copies {
            let k = plan.rng.random_range(0..n_background);
            add_code(&mut claims[k], &c.code, c.kind);
        }
    }

    let q = sigmoid(intercept + linear_risk(profile, &draw));
    let mut labels = Vec::new();
    let mut admit = first_admit;
    let mut discharge = first_discharge;
    let mut planned = false;
    for k in 0..MAX_EPISODES {
        claims.push(plan.inpatient(admit, discharge, planned));
        let positive = k + 1 < MAX_EPISODES && plan.rng.random_bool(q);
        labels.push(PlantedLabel {
            patient_id: id.clone(),
            index_discharge_date: discharge,
            label: positive,
        });
        if !positive {
            break;
        }
        let gap = plan.rng.random_range(3..=30);
        admit = discharge + Duration::days(gap);
        discharge = admit + Duration::days(plan.los(&los_dist));
        planned = plan.rng.random_bool(profile.planned_readmission_rate);
    }

    let rates = profile.exclusion_rates;
    if plan.rng.random_bool(rates.long_stay) {
        let los = plan.rng.random_range(31..=60);
        let end = first_admit - Duration::days(plan.rng.random_range(40..=120));
        let mut c = plan.inpatient(end - Duration::days(los), end, false);
        c.discharge_status = DischargeStatus::Home;
        claims.push(c);
    }
    if plan.rng.random_bool(rates.death_or_transfer_or_ama) {
        let status = [
            DischargeStatus::InHospitalDeath,
            DischargeStatus::TransferAcute,
            DischargeStatus::LeftAma,
        ][plan.rng.random_range(0..3)];
        let last = claims
            .iter_mut()
            .rev()
            .find(|c| c.setting == Setting::Inpatient)
            .expect("index stay exists");
        last.discharge_status = status;
    }
    if plan.rng.random_bool(rates.cancer) {
        let code = CANCER_CODES[plan.rng.random_range(0..CANCER_CODES.len())];
        let k = plan.rng.random_range(0..n_background);
        claims[k].dx_codes.push(code.to_string());
    }
    if plan.rng.random_bool(rates.rehab) {
        let date = first_admit - Duration::days(plan.rng.random_range(1..=300));
        let mut c = ClaimRecord {
            patient_id: id.clone(),
            admit_date: date,
            discharge_date: date,
            setting: Setting::Outpatient,
            discharge_status: DischargeStatus::Home,
            dx_codes: vec![REHAB_DX.to_string()],
            proc_codes: vec![],
            drug_codes: vec![],
            primary_dx: REHAB_DX.to_string(),
            planned_flag: false,
        };
        if plan.rng.random_bool(0.5) {
            c.setting = Setting::Rehab;
            c.dx_codes = vec![FILLER_DX.to_string()];
            c.primary_dx = FILLER_DX.to_string();
        }
        claims.push(c);
    }

    for c in &mut claims {
        if c.dx_codes.is_empty() {
            c.dx_codes.push(FILLER_DX.to_string());
        }
        if !c.dx_codes.contains(&c.primary_dx) {
            c.primary_dx = c.dx_codes[0].clone();
        }
    }
    (PatientHistory::new(demographics, claims), labels)
}

/// Generates one synthetic site. Output is a pure function of `(profile, seed)`.
pub fn generate_site(profile: &SiteProfile, seed: u64) -> Result<SyntheticSite> {
    profile.validate()?;
    if profile.n_patients == 0 {
        return Ok(SyntheticSite {
            histories: vec![],
            labels: vec![],
        });
    }
    let mix = &profile.demographic_mix;
    let age_dist = Normal::new(mix.mean_age, mix.sd_age)
        .map_err(|e| Error::Config(format!("age distribution: {e}")))?;
    let intercept = solve_intercept(profile, &age_dist);
    let per_patient: Vec<_> = (0..profile.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(profile, intercept, &age_dist, seed, i))
        .collect();
    let mut histories = Vec::with_capacity(per_patient.len());
    let mut labels = Vec::new();
    for (h, l) in per_patient {
        histories.push(h);
        labels.extend(l);
    }
    Ok(SyntheticSite { histories, labels })
}

pub fn write_labels<W: Write>(out: W, labels: &[PlantedLabel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "index_discharge_date", "label"])?;
    for l in labels {
        w.write_record([
            l.patient_id.clone(),
            l.index_discharge_date.format("%Y-%m-%d").to_string(),
            if l.label { "1" } else { "0" }.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<labels writer>", e))?;
    Ok(())
}

/// Writes `claims.csv`, `demographics.csv` and `labels.csv` into `dir`.
pub fn write_site(dir: &Path, site: &SyntheticSite) -> Result<()> {
    crate::claims::write_claims_file(&dir.join("claims.csv"), &site.histories)?;
    crate::claims::write_demographics_file(&dir.join("demographics.csv"), &site.histories)?;
    let f = crate::claims::create(&dir.join("labels.csv"))?;
    write_labels(std::io::BufWriter::new(f), &site.labels)
}

fn code(code: &str, kind: CodeKind, prevalence: f64) -> CodeSpec {
    CodeSpec {
        code: code.to_string(),
        kind,
        prevalence,
    }
}

/// The baseline profile the shipped experiment config is derived from.
pub fn reference_profile(site_name: &str, n_patients: usize) -> SiteProfile {
    use CodeKind::{Drug, Dx, Proc};
    let code_vocab = vec![
        code("I50", Dx, 0.15),
        code("N18", Dx, 0.12),
        code("J44", Dx, 0.14),
        code("E11", Dx, 0.22),
        code("I21", Dx, 0.06),
        code("F03", Dx, 0.05),
        code("K74", Dx, 0.05),
        code("I48", Dx, 0.10),
        code("D63", Dx, 0.08),
        code("R54", Dx, 0.10),
        code("I10", Dx, 0.35),
        code("E78", Dx, 0.30),
        code("K21", Dx, 0.18),
        code("M54", Dx, 0.20),
        code("R07", Dx, 0.12),
        code("J06", Dx, 0.15),
        code("F32", Dx, 0.12),
        code("G47", Dx, 0.10),
        code("93000", Proc, 0.25),
        code("71046", Proc, 0.15),
        code("90935", Proc, 0.04),
        code("80053", Proc, 0.30),
        code("00093-7180", Drug, 0.20),
        code("00378-0208", Drug, 0.15),
        code("00006-0277", Drug, 0.08),
        code("00310-0751", Drug, 0.10),
    ];
    let risk_coefficients = [
        ("I50", 1.1),
        ("N18", 0.9),
        ("J44", 0.8),
        ("E11", 0.4),
        ("I21", 0.9),
        ("F03", 0.7),
        ("K74", 0.8),
        ("I48", 0.5),
        ("D63", 0.6),
        ("R54", 0.6),
        ("90935", 1.0),
        ("00006-0277", 0.7),
    ]
    .into_iter()
    .map(|(c, w)| (c.to_string(), w))
    .collect();
    SiteProfile {
        site_name: site_name.to_string(),
        n_patients,
        code_vocab,
        mean_claims_per_patient: 4.0,
        readmission_base_rate: 0.08,
        risk_coefficients,
        age_coefficient: 0.15,
        demographic_mix: DemographicMix {
            mean_age: 63.0,
            sd_age: 14.0,
            female_fraction: 0.52,
            regions: vec!["northeast".into(), "south".into(), "midwest".into(), "west".into()],
        },
        exclusion_rates: ExclusionRates {
            long_stay: 0.02,
            death_or_transfer_or_ama: 0.03,
            cancer: 0.05,
            rehab: 0.03,
        },
        planned_readmission_rate: default_planned_rate(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::validate_history;

    fn serialize(site: &SyntheticSite) -> Vec<u8> {
        let mut buf = Vec::new();
        crate::claims::write_claims(&mut buf, &site.histories).unwrap();
        crate::claims::write_demographics(&mut buf, &site.histories).unwrap();
        write_labels(&mut buf, &site.labels).unwrap();
        buf
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let p = reference_profile("A", 300);
        let a = generate_site(&p, 7).unwrap();
        let b = generate_site(&p, 7).unwrap();
        assert_eq!(serialize(&a), serialize(&b));
        let c = generate_site(&p, 8).unwrap();
        assert_ne!(serialize(&a), serialize(&c));
    }

    #[test]
    fn output_independent_of_thread_count() {
        let p = reference_profile("A", 200);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| generate_site(&p, 3).unwrap());
        let b = four.install(|| generate_site(&p, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_patients_is_empty() {
        let site = generate_site(&reference_profile("A", 0), 1).unwrap();
        assert!(site.histories.is_empty() && site.labels.is_empty());
    }

    #[test]
    fn generated_histories_validate() {
        let site = generate_site(&reference_profile("A", 500), 11).unwrap();
        for h in &site.histories {
            assert!(validate_history(h).is_empty(), "{:?}", validate_history(h));
        }
    }

    #[test]
    fn positive_rate_tracks_base_rate() {
        let site = generate_site(&reference_profile("A", 10_000), 42).unwrap();
        let rate = site.positive_rate();
        assert!((0.06..=0.10).contains(&rate), "rate {rate}");
    }

    #[test]
    fn no_exclusion_markers_when_rates_zero() {
        let mut p = reference_profile("A", 1000);
        p.exclusion_rates = ExclusionRates::default();
        let site = generate_site(&p, 5).unwrap();
        for c in site.histories.iter().flat_map(|h| &h.claims) {
            assert_ne!(c.setting, Setting::Rehab);
            assert!(matches!(c.discharge_status, DischargeStatus::Home | DischargeStatus::Other));
            assert!(c.dx_codes.iter().all(|d| !d.starts_with('C') && d != REHAB_DX));
            assert!(c.setting != Setting::Inpatient || c.duration_days() <= 30);
        }
    }

    #[test]
    fn invalid_profile_rejected() {
        let mut p = reference_profile("A", 10);
        p.readmission_base_rate = 0.12;
        assert!(matches!(generate_site(&p, 1), Err(Error::Config(_))));
        let mut p = reference_profile("A", 10);
        p.exclusion_rates.cancer = 1.5;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_shift_is_identity() {
        let base = reference_profile("A", 100);
        assert_eq!(shift_profile(&base, &ShiftSpec::default()).unwrap(), base);
    }

    #[test]
    fn negating_one_coefficient_changes_only_it() {
        let base = reference_profile("A", 100);
        let shift = ShiftSpec {
            coefficient_scale: [("I50".to_string(), -1.0)].into(),
            ..Default::default()
        };
        let shifted = shift_profile(&base, &shift).unwrap();
        for (code, w) in &base.risk_coefficients {
            let expected = if code == "I50" { -w } else { *w };
            assert_eq!(shifted.risk_coefficients[code], expected);
        }
        assert_eq!(shifted.code_vocab, base.code_vocab);
        assert_eq!(base.risk_coefficients["I50"], 1.1);
    }

    #[test]
    fn prevalence_shift_shows_in_generated_data() {
        let mut base = reference_profile("A", 10_000);
        base.code_vocab.iter_mut().find(|c| c.code == "R07").unwrap().prevalence = 0.1;
        let shift = ShiftSpec {
            prevalence_scale: [("R07".to_string(), 3.0)].into(),
            ..Default::default()
        };
        let shifted = shift_profile(&base, &shift).unwrap();
        let site = generate_site(&shifted, 9).unwrap();
        let carriers = site
            .histories
            .iter()
            .filter(|h| h.claims.iter().any(|c| c.dx_codes.iter().any(|d| d == "R07")))
            .count();
        let frac = carriers as f64 / site.histories.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "empirical prevalence {frac}");
    }

    #[test]
    fn shift_outside_unit_interval_rejected() {
        let base = reference_profile("A", 100);
        let shift = ShiftSpec {
            prevalence_scale: [("I10".to_string(), 5.0)].into(),
            ..Default::default()
        };
        assert!(matches!(shift_profile(&base, &shift), Err(Error::Config(_))));
    }

    #[test]
    fn chain_expectation_matches_enumeration() {
        let q: f64 = 0.3;
        // enumerate chain outcomes: stop after 1..=MAX_EPISODES episodes
        let mut pos = 0.0;
        let mut eps = 0.0;
        for len in 1..=MAX_EPISODES {
            let prob = if len < MAX_EPISODES {
                q.powi(len as i32 - 1) * (1.0 - q)
            } else {
                q.powi(len as i32 - 1)
            };
            pos += prob * (len - 1) as f64;
            eps += prob * len as f64;
        }
        let (p, e) = chain_expectations(q);
        assert!((p - pos).abs() < 1e-12 && (e - eps).abs() < 1e-12);
    }
}
