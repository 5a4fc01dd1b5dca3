//! Cohort construction: patient exclusions, contiguous-stay merging, index
//! events and 30-day readmission labels.
//!
//! Exclusions are checked per patient in a fixed order (long stay, then
//! death/transfer/AMA, then cancer, then rehab) and the first hit wins.
//! Inpatient claims whose admit date falls within `merge_gap_days` of the
//! running episode's discharge are merged; every resulting episode is an
//! index event labeled by whether the next inpatient admission starts
//! 1..=`readmission_window_days` days after its discharge.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::{days_between, ClaimRecord, DischargeStatus, PatientHistory, Setting};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub long_stay_threshold_days: i64,
    pub cancer_dx_prefixes: Vec<String>,
    pub rehab_dx_prefixes: Vec<String>,
    pub merge_gap_days: i64,
    pub readmission_window_days: i64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            long_stay_threshold_days: 30,
            cancer_dx_prefixes: vec!["C".into()],
            rehab_dx_prefixes: vec!["Z50".into()],
            merge_gap_days: 2,
            readmission_window_days: 30,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("long_stay_threshold_days", self.long_stay_threshold_days),
            ("merge_gap_days", self.merge_gap_days),
            ("readmission_window_days", self.readmission_window_days),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    LongStay,
    DeathTransferAma,
    Cancer,
    Rehab,
}

impl ExclusionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExclusionReason::LongStay => "long_stay",
            ExclusionReason::DeathTransferAma => "death_transfer_ama",
            ExclusionReason::Cancer => "cancer",
            ExclusionReason::Rehab => "rehab",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Kept,
    Excluded(ExclusionReason),
}

fn matches_prefix(code: &str, prefixes: &[String]) -> bool {
    prefixes.iter().any(|p| code.starts_with(p.as_str()))
}

fn any_dx_matches(c: &ClaimRecord, prefixes: &[String]) -> bool {
    matches_prefix(&c.primary_dx, prefixes) || c.dx_codes.iter().any(|d| matches_prefix(d, prefixes))
}

pub fn apply_exclusions(h: &PatientHistory, cfg: &CohortConfig) -> Decision {
    let claims = &h.claims;
    let long_stay = claims
        .iter()
        .any(|c| c.setting == Setting::Inpatient && c.duration_days() > cfg.long_stay_threshold_days);
    if long_stay {
        return Decision::Excluded(ExclusionReason::LongStay);
    }
    let bad_discharge = claims.iter().any(|c| {
        matches!(
            c.discharge_status,
            DischargeStatus::InHospitalDeath | DischargeStatus::TransferAcute | DischargeStatus::LeftAma
        )
    });
    if bad_discharge {
        return Decision::Excluded(ExclusionReason::DeathTransferAma);
    }
    if claims.iter().any(|c| any_dx_matches(c, &cfg.cancer_dx_prefixes)) {
        return Decision::Excluded(ExclusionReason::Cancer);
    }
    let rehab = claims
        .iter()
        .any(|c| c.setting == Setting::Rehab || any_dx_matches(c, &cfg.rehab_dx_prefixes));
    if rehab {
        return Decision::Excluded(ExclusionReason::Rehab);
    }
    Decision::Kept
}

/// A run of contiguous inpatient care.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub patient_id: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub merged_claims: Vec<ClaimRecord>,
}

/// Merges inpatient claims into episodes. Claims must be sorted by admit date.
pub fn merge_contiguous_claims(h: &PatientHistory, cfg: &CohortConfig) -> Vec<Episode> {
    let mut episodes: Vec<Episode> = Vec::new();
    for c in h.claims.iter().filter(|c| c.setting == Setting::Inpatient) {
        match episodes.last_mut() {
            Some(ep) if days_between(ep.end_date, c.admit_date) <= cfg.merge_gap_days => {
                ep.end_date = ep.end_date.max(c.discharge_date);
                ep.merged_claims.push(c.clone());
            }
            _ => episodes.push(Episode {
                patient_id: c.patient_id.clone(),
                start_date: c.admit_date,
                end_date: c.discharge_date,
                merged_claims: vec![c.clone()],
            }),
        }
    }
    episodes
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndexEvent {
    pub patient_id: String,
    pub discharge_date: NaiveDate,
    pub label_30d: bool,
    pub unplanned_flag: bool,
    pub source_episode: Episode,
}

/// True iff the readmission is acute and not scheduled.
pub fn flag_unplanned(event: &IndexEvent, readmitting_claim: Option<&ClaimRecord>) -> bool {
    match readmitting_claim {
        Some(c) if event.label_30d => {
            matches!(c.setting, Setting::Inpatient | Setting::Emergency) && !c.planned_flag
        }
        _ => false,
    }
}

pub fn label_index_events(
    episodes: &[Episode],
    _h: &PatientHistory,
    cfg: &CohortConfig,
) -> Vec<IndexEvent> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let readmit = episodes.get(i + 1).filter(|next| {
                let gap = days_between(ep.end_date, next.start_date);
                (1..=cfg.readmission_window_days).contains(&gap)
            });
            let mut event = IndexEvent {
                patient_id: ep.patient_id.clone(),
                discharge_date: ep.end_date,
                label_30d: readmit.is_some(),
                unplanned_flag: false,
                source_episode: ep.clone(),
            };
            let claim = readmit.map(|next| &next.merged_claims[0]);
            event.unplanned_flag = flag_unplanned(&event, claim);
            event
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub long_stay: usize,
    pub death_transfer_ama: usize,
    pub cancer: usize,
    pub rehab: usize,
}

impl ExclusionCounts {
    fn bump(&mut self, reason: ExclusionReason) {
        match reason {
            ExclusionReason::LongStay => self.long_stay += 1,
            ExclusionReason::DeathTransferAma => self.death_transfer_ama += 1,
            ExclusionReason::Cancer => self.cancer += 1,
            ExclusionReason::Rehab => self.rehab += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.long_stay + self.death_transfer_ama + self.cancer + self.rehab
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub n_patients: usize,
    pub n_kept: usize,
    pub excluded: ExclusionCounts,
    pub n_events: usize,
    pub n_positive: usize,
    pub n_unplanned: usize,
    pub positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub events: Vec<IndexEvent>,
    /// Per-patient decisions in patient-id order.
    pub decisions: Vec<(String, Decision)>,
    pub audit: AuditSummary,
}

pub fn build_cohort(histories: &[PatientHistory], cfg: &CohortConfig) -> Cohort {
    let mut per_patient: Vec<(String, Decision, Vec<IndexEvent>)> = histories
        .par_iter()
        .map(|h| {
            let decision = apply_exclusions(h, cfg);
            let events = match decision {
                Decision::Kept => label_index_events(&merge_contiguous_claims(h, cfg), h, cfg),
                Decision::Excluded(_) => vec![],
            };
            (h.patient_id().to_string(), decision, events)
        })
        .collect();
    per_patient.sort_by(|a, b| a.0.cmp(&b.0));

    let mut audit = AuditSummary {
        n_patients: histories.len(),
        ..Default::default()
    };
    let mut events = Vec::new();
    let mut decisions = Vec::with_capacity(per_patient.len());
    for (pid, decision, evs) in per_patient {
        match decision {
            Decision::Kept => audit.n_kept += 1,
            Decision::Excluded(r) => audit.excluded.bump(r),
        }
        decisions.push((pid, decision));
        events.extend(evs);
    }
    audit.n_events = events.len();
    audit.n_positive = events.iter().filter(|e| e.label_30d).count();
    audit.n_unplanned = events.iter().filter(|e| e.unplanned_flag).count();
    audit.positive_rate = if events.is_empty() {
        0.0
    } else {
        audit.n_positive as f64 / events.len() as f64
    };
    Cohort {
        events,
        decisions,
        audit,
    }
}

/// A cohort row as persisted in the cohort CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRow {
    pub patient_id: String,
    pub discharge_date: NaiveDate,
    pub label_30d: u8,
    pub unplanned_flag: u8,
}

impl From<&IndexEvent> for CohortRow {
    fn from(e: &IndexEvent) -> Self {
        Self {
            patient_id: e.patient_id.clone(),
            discharge_date: e.discharge_date,
            label_30d: e.label_30d as u8,
            unplanned_flag: e.unplanned_flag as u8,
        }
    }
}

pub fn write_cohort<W: Write>(out: W, events: &[IndexEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(CohortRow::from(e))?;
    }
    if events.is_empty() {
        w.write_record(["patient_id", "discharge_date", "label_30d", "unplanned_flag"])?;
    }
    w.flush().map_err(|e| Error::io("<cohort writer>", e))?;
    Ok(())
}

pub fn write_cohort_file(path: &Path, events: &[IndexEvent]) -> Result<()> {
    write_cohort(std::io::BufWriter::new(crate::claims::create(path)?), events)
}

pub fn read_cohort_file(path: &Path) -> Result<Vec<CohortRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let rows = r.deserialize().collect::<std::result::Result<Vec<CohortRow>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{PatientDemographics, Sex};

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn inpatient(admit: &str, discharge: &str) -> ClaimRecord {
        ClaimRecord {
            patient_id: "P1".into(),
            admit_date: d(admit),
            discharge_date: d(discharge),
            setting: Setting::Inpatient,
            discharge_status: DischargeStatus::Home,
            dx_codes: vec!["I50".into()],
            proc_codes: vec![],
            drug_codes: vec![],
            primary_dx: "I50".into(),
            planned_flag: false,
        }
    }

    fn history(claims: Vec<ClaimRecord>) -> PatientHistory {
        PatientHistory::new(
            PatientDemographics {
                patient_id: "P1".into(),
                birth_year: 1950,
                sex: Sex::M,
                region: "x".into(),
            },
            claims,
        )
    }

    fn labels_for(claims: Vec<ClaimRecord>) -> Vec<IndexEvent> {
        let cfg = CohortConfig::default();
        let h = history(claims);
        label_index_events(&merge_contiguous_claims(&h, &cfg), &h, &cfg)
    }

    #[test]
    fn long_stay_excluded() {
        let h = history(vec![inpatient("2018-01-01", "2018-02-15")]);
        assert_eq!(
            apply_exclusions(&h, &CohortConfig::default()),
            Decision::Excluded(ExclusionReason::LongStay)
        );
    }

    #[test]
    fn left_ama_excluded() {
        let mut c = inpatient("2018-01-01", "2018-01-05");
        c.discharge_status = DischargeStatus::LeftAma;
        let h = history(vec![inpatient("2017-06-01", "2017-06-02"), c]);
        assert_eq!(
            apply_exclusions(&h, &CohortConfig::default()),
            Decision::Excluded(ExclusionReason::DeathTransferAma)
        );
    }

    #[test]
    fn first_matching_reason_wins() {
        let mut c = inpatient("2018-01-01", "2018-03-01");
        c.dx_codes = vec!["C50".into(), "Z50".into()];
        c.primary_dx = "Z50".into();
        c.discharge_status = DischargeStatus::TransferAcute;
        let cfg = CohortConfig::default();
        assert_eq!(apply_exclusions(&history(vec![c.clone()]), &cfg), Decision::Excluded(ExclusionReason::LongStay));
        c.discharge_date = d("2018-01-04");
        assert_eq!(apply_exclusions(&history(vec![c.clone()]), &cfg), Decision::Excluded(ExclusionReason::DeathTransferAma));
        c.discharge_status = DischargeStatus::Home;
        assert_eq!(apply_exclusions(&history(vec![c.clone()]), &cfg), Decision::Excluded(ExclusionReason::Cancer));
        c.dx_codes = vec!["Z50".into()];
        assert_eq!(apply_exclusions(&history(vec![c]), &cfg), Decision::Excluded(ExclusionReason::Rehab));
    }

    #[test]
    fn ordinary_patient_kept() {
        let h = history(vec![inpatient("2018-01-01", "2018-01-05")]);
        assert_eq!(apply_exclusions(&h, &CohortConfig::default()), Decision::Kept);
    }

    #[test]
    fn one_day_gap_merges() {
        let h = history(vec![inpatient("2018-01-01", "2018-01-05"), inpatient("2018-01-06", "2018-01-10")]);
        let eps = merge_contiguous_claims(&h, &CohortConfig::default());
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start_date, eps[0].end_date), (d("2018-01-01"), d("2018-01-10")));
        assert_eq!(eps[0].merged_claims.len(), 2);
    }

    #[test]
    fn single_claim_single_episode() {
        let h = history(vec![inpatient("2018-01-01", "2018-01-05")]);
        let eps = merge_contiguous_claims(&h, &CohortConfig::default());
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start_date, eps[0].end_date), (d("2018-01-01"), d("2018-01-05")));
    }

    #[test]
    fn four_day_gap_splits() {
        let h = history(vec![inpatient("2018-01-01", "2018-01-05"), inpatient("2018-01-09", "2018-01-12")]);
        assert_eq!(merge_contiguous_claims(&h, &CohortConfig::default()).len(), 2);
    }

    #[test]
    fn contained_claim_does_not_shrink_episode() {
        let h = history(vec![inpatient("2018-01-01", "2018-01-10"), inpatient("2018-01-03", "2018-01-04")]);
        let eps = merge_contiguous_claims(&h, &CohortConfig::default());
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].end_date, d("2018-01-10"));
    }

    #[test]
    fn readmission_at_29_days_is_positive() {
        let events = labels_for(vec![inpatient("2018-01-05", "2018-01-10"), inpatient("2018-02-08", "2018-02-09")]);
        assert!(events[0].label_30d);
        assert!(!events[1].label_30d);
    }

    #[test]
    fn readmission_at_31_days_is_negative() {
        let events = labels_for(vec![inpatient("2018-01-05", "2018-01-10"), inpatient("2018-02-10", "2018-02-12")]);
        assert!(!events[0].label_30d);
    }

    #[test]
    fn no_subsequent_claims_is_negative() {
        let events = labels_for(vec![inpatient("2018-01-05", "2018-01-10")]);
        assert_eq!(events.len(), 1);
        assert!(!events[0].label_30d);
    }

    fn labeled_event(label: bool) -> IndexEvent {
        let ep = Episode {
            patient_id: "P1".into(),
            start_date: d("2018-01-01"),
            end_date: d("2018-01-05"),
            merged_claims: vec![],
        };
        IndexEvent {
            patient_id: "P1".into(),
            discharge_date: ep.end_date,
            label_30d: label,
            unplanned_flag: false,
            source_episode: ep,
        }
    }

    #[test]
    fn unplanned_emergency_readmission_flagged() {
        let mut c = inpatient("2018-01-10", "2018-01-12");
        c.setting = Setting::Emergency;
        assert!(flag_unplanned(&labeled_event(true), Some(&c)));
    }

    #[test]
    fn planned_inpatient_readmission_not_flagged() {
        let mut c = inpatient("2018-01-10", "2018-01-12");
        c.planned_flag = true;
        assert!(!flag_unplanned(&labeled_event(true), Some(&c)));
    }

    #[test]
    fn unlabeled_event_never_flagged() {
        let c = inpatient("2018-01-10", "2018-01-12");
        assert!(!flag_unplanned(&labeled_event(false), Some(&c)));
        assert!(!flag_unplanned(&labeled_event(true), None));
    }

    #[test]
    fn empty_input_gives_zeroed_audit() {
        let cohort = build_cohort(&[], &CohortConfig::default());
        assert!(cohort.events.is_empty());
        assert_eq!(cohort.audit, AuditSummary::default());
    }

    #[test]
    fn all_excluded_counts_sum_to_patients() {
        let mut a = inpatient("2018-01-01", "2018-03-01");
        a.patient_id = "A".into();
        let mut b = inpatient("2018-01-01", "2018-01-02");
        b.patient_id = "B".into();
        b.setting = Setting::Rehab;
        let mk = |pid: &str, c: ClaimRecord| {
            PatientHistory::new(
                PatientDemographics {
                    patient_id: pid.into(),
                    birth_year: 1960,
                    sex: Sex::F,
                    region: "r".into(),
                },
                vec![c],
            )
        };
        let cohort = build_cohort(&[mk("A", a), mk("B", b)], &CohortConfig::default());
        assert!(cohort.events.is_empty());
        assert_eq!(cohort.audit.excluded.total(), 2);
        assert_eq!(cohort.audit.n_kept, 0);
    }

    #[test]
    fn zero_day_config_rejected() {
        let cfg = CohortConfig {
            merge_gap_days: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
