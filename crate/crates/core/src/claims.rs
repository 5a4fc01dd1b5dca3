//! Normalized claims data model plus CSV parsing and validation.
//!
//! A claims file holds one row per (pre-consolidated) claim line; a
//! demographics file holds one row per patient. Parsing joins the two into
//! [`PatientHistory`] values sorted by patient id.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLAIMS_HEADER: [&str; 10] = [
    "patient_id",
    "admit_date",
    "discharge_date",
    "setting",
    "discharge_status",
    "dx_codes",
    "proc_codes",
    "drug_codes",
    "primary_dx",
    "planned_flag",
];

pub const DEMOGRAPHICS_HEADER: [&str; 4] = ["patient_id", "birth_year", "sex", "region"];

const MIN_BIRTH_YEAR: i32 = 1900;
const DATE_FORMAT: &str = "%Y-%m-%d";

/// Calendar-day difference `to - from` (Jan 1 -> Jan 3 is 2).
pub fn days_between(from: NaiveDate, to: NaiveDate) -> i64 {
    (to - from).num_days()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Inpatient,
    Outpatient,
    Emergency,
    Rehab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DischargeStatus {
    Home,
    InHospitalDeath,
    TransferAcute,
    LeftAma,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
    U,
}

macro_rules! string_enum {
    ($ty:ty, $($variant:path => $text:literal),+ $(,)?) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($variant => $text),+
                }
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(format!("unknown {} value {other:?}", stringify!($ty))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(Setting,
    Setting::Inpatient => "inpatient",
    Setting::Outpatient => "outpatient",
    Setting::Emergency => "emergency",
    Setting::Rehab => "rehab",
);

string_enum!(DischargeStatus,
    DischargeStatus::Home => "home",
    DischargeStatus::InHospitalDeath => "in_hospital_death",
    DischargeStatus::TransferAcute => "transfer_acute",
    DischargeStatus::LeftAma => "left_ama",
    DischargeStatus::Other => "other",
);

string_enum!(Sex,
    Sex::F => "F",
    Sex::M => "M",
    Sex::U => "U",
);

/// One normalized claim line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub patient_id: String,
    pub admit_date: NaiveDate,
    pub discharge_date: NaiveDate,
    pub setting: Setting,
    pub discharge_status: DischargeStatus,
    pub dx_codes: Vec<String>,
    pub proc_codes: Vec<String>,
    pub drug_codes: Vec<String>,
    pub primary_dx: String,
    pub planned_flag: bool,
}

impl ClaimRecord {
    /// Length of stay in calendar days.
    pub fn duration_days(&self) -> i64 {
        days_between(self.admit_date, self.discharge_date)
    }

    /// Every code on the claim: diagnoses, procedures, then drugs.
    pub fn all_codes(&self) -> impl Iterator<Item = &str> {
        self.dx_codes
            .iter()
            .chain(&self.proc_codes)
            .chain(&self.drug_codes)
            .map(String::as_str)
    }

    fn to_row(&self) -> [String; 10] {
        [
            self.patient_id.clone(),
            self.admit_date.format(DATE_FORMAT).to_string(),
            self.discharge_date.format(DATE_FORMAT).to_string(),
            self.setting.to_string(),
            self.discharge_status.to_string(),
            self.dx_codes.join(";"),
            self.proc_codes.join(";"),
            self.drug_codes.join(";"),
            self.primary_dx.clone(),
            if self.planned_flag { "1" } else { "0" }.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientDemographics {
    pub patient_id: String,
    pub birth_year: i32,
    pub sex: Sex,
    pub region: String,
}

/// A patient's demographics plus claims sorted by admit date.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientHistory {
    pub demographics: PatientDemographics,
    pub claims: Vec<ClaimRecord>,
}

impl PatientHistory {
    /// Sorts claims by admit date, then discharge date, then input order.
    pub fn new(demographics: PatientDemographics, mut claims: Vec<ClaimRecord>) -> Self {
        claims.sort_by_key(|c| (c.admit_date, c.discharge_date));
        Self {
            demographics,
            claims,
        }
    }

    pub fn patient_id(&self) -> &str {
        &self.demographics.patient_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    EmptyPatientId { claim: Option<usize> },
    PatientIdMismatch { claim: usize },
    AdmitAfterDischarge { claim: usize },
    PrimaryDxNotListed { claim: usize },
    OrderViolation { claim: usize },
    BirthYearOutOfRange { birth_year: i32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPatientId { claim: None } => write!(f, "empty patient_id in demographics"),
            Violation::EmptyPatientId { claim: Some(i) } => write!(f, "empty patient_id on claim {i}"),
            Violation::PatientIdMismatch { claim } => write!(f, "claim {claim} belongs to another patient"),
            Violation::AdmitAfterDischarge { claim } => write!(f, "claim {claim} admits after discharge"),
            Violation::PrimaryDxNotListed { claim } => write!(f, "claim {claim} primary_dx not among dx_codes"),
            Violation::OrderViolation { claim } => write!(f, "order violation at claim {claim}"),
            Violation::BirthYearOutOfRange { birth_year } => write!(f, "birth_year {birth_year} out of range"),
        }
    }
}

fn current_year() -> i32 {
    chrono::Utc::now().year()
}

/// Checks every type invariant of a history; an empty report means valid.
pub fn validate_history(h: &PatientHistory) -> Vec<Violation> {
    let mut report = Vec::new();
    let pid = &h.demographics.patient_id;
    if pid.is_empty() {
        report.push(Violation::EmptyPatientId { claim: None });
    }
    let by = h.demographics.birth_year;
    if !(MIN_BIRTH_YEAR..=current_year()).contains(&by) {
        report.push(Violation::BirthYearOutOfRange { birth_year: by });
    }
    for (i, c) in h.claims.iter().enumerate() {
        if c.patient_id.is_empty() {
            report.push(Violation::EmptyPatientId { claim: Some(i) });
        } else if !pid.is_empty() && &c.patient_id != pid {
            report.push(Violation::PatientIdMismatch { claim: i });
        }
        if c.admit_date > c.discharge_date {
            report.push(Violation::AdmitAfterDischarge { claim: i });
        }
        if !c.dx_codes.is_empty() && !c.dx_codes.contains(&c.primary_dx) {
            report.push(Violation::PrimaryDxNotListed { claim: i });
        }
    }
    for (i, pair) in h.claims.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if (a.admit_date, a.discharge_date) > (b.admit_date, b.discharge_date) {
            report.push(Violation::OrderViolation { claim: i + 1 });
        }
    }
    report
}

/// A claims or demographics row that failed validation during parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowRejection {
    pub file: &'static str,
    /// 1-based line number including the header.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub rejected: Vec<RowRejection>,
    /// Patients with claims but no demographics row.
    pub dropped_patients: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedClaims {
    pub histories: Vec<PatientHistory>,
    pub report: ParseReport,
}

fn split_codes(cell: &str) -> Vec<String> {
    cell.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_date(cell: &str, column: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(cell.trim(), DATE_FORMAT)
        .map_err(|e| format!("bad {column} {cell:?}: {e}"))
}

fn check_header(found: &csv::StringRecord, expected: &[&str], file: &str) -> Result<()> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::Format(format!(
            "{file} header mismatch: expected {}, found {}",
            expected.join(","),
            found.join(",")
        )));
    }
    Ok(())
}

fn claim_from_row(row: &csv::StringRecord) -> std::result::Result<ClaimRecord, String> {
    if row.len() != CLAIMS_HEADER.len() {
        return Err(format!("expected {} fields, found {}", CLAIMS_HEADER.len(), row.len()));
    }
    let patient_id = row[0].trim().to_string();
    if patient_id.is_empty() {
        return Err("empty patient_id".into());
    }
    let admit_date = parse_date(&row[1], "admit_date")?;
    let discharge_date = parse_date(&row[2], "discharge_date")?;
    if admit_date > discharge_date {
        return Err(format!("admit_date {admit_date} after discharge_date {discharge_date}"));
    }
    let setting = row[3].trim().parse()?;
    let discharge_status = row[4].trim().parse()?;
    let dx_codes = split_codes(&row[5]);
    let primary_dx = row[8].trim().to_string();
    if !dx_codes.is_empty() && !dx_codes.contains(&primary_dx) {
        return Err(format!("primary_dx {primary_dx:?} not among dx_codes"));
    }
    let planned_flag = match row[9].trim() {
        "0" => false,
        "1" => true,
        other => return Err(format!("planned_flag must be 0 or 1, found {other:?}")),
    };
    Ok(ClaimRecord {
        patient_id,
        admit_date,
        discharge_date,
        setting,
        discharge_status,
        dx_codes,
        proc_codes: split_codes(&row[6]),
        drug_codes: split_codes(&row[7]),
        primary_dx,
        planned_flag,
    })
}

fn demographics_from_row(row: &csv::StringRecord) -> std::result::Result<PatientDemographics, String> {
    if row.len() != DEMOGRAPHICS_HEADER.len() {
        return Err(format!("expected {} fields, found {}", DEMOGRAPHICS_HEADER.len(), row.len()));
    }
    let patient_id = row[0].trim().to_string();
    if patient_id.is_empty() {
        return Err("empty patient_id".into());
    }
    let birth_year: i32 = row[1]
        .trim()
        .parse()
        .map_err(|e| format!("bad birth_year {:?}: {e}", &row[1]))?;
    if !(MIN_BIRTH_YEAR..=current_year()).contains(&birth_year) {
        return Err(format!("birth_year {birth_year} out of range"));
    }
    Ok(PatientDemographics {
        patient_id,
        birth_year,
        sex: row[2].trim().parse()?,
        region: row[3].trim().to_string(),
    })
}

/// Parses claims and demographics from in-memory readers.
pub fn parse_claims<C: Read, D: Read>(claims: C, demographics: D) -> Result<ParsedClaims> {
    let mut report = ParseReport::default();

    let mut demo_reader = csv::ReaderBuilder::new().flexible(true).from_reader(demographics);
    check_header(demo_reader.headers()?, &DEMOGRAPHICS_HEADER, "demographics")?;
    let mut demos: BTreeMap<String, PatientDemographics> = BTreeMap::new();
    for (i, row) in demo_reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        match demographics_from_row(&row) {
            Ok(d) => {
                if demos.contains_key(&d.patient_id) {
                    report.rejected.push(RowRejection {
                        file: "demographics",
                        line,
                        reason: format!("duplicate patient_id {:?}", d.patient_id),
                    });
                } else {
                    demos.insert(d.patient_id.clone(), d);
                }
            }
            Err(reason) => report.rejected.push(RowRejection {
                file: "demographics",
                line,
                reason,
            }),
        }
    }

    let mut claim_reader = csv::ReaderBuilder::new().flexible(true).from_reader(claims);
    check_header(claim_reader.headers()?, &CLAIMS_HEADER, "claims")?;
    let mut grouped: BTreeMap<String, Vec<ClaimRecord>> = BTreeMap::new();
    for (i, row) in claim_reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        match claim_from_row(&row) {
            Ok(c) => grouped.entry(c.patient_id.clone()).or_default().push(c),
            Err(reason) => report.rejected.push(RowRejection {
                file: "claims",
                line,
                reason,
            }),
        }
    }

    let mut histories = Vec::with_capacity(grouped.len());
    for (pid, claims) in grouped {
        match demos.remove(&pid) {
            Some(d) => histories.push(PatientHistory::new(d, claims)),
            None => {
                log::warn!("patient {pid} has claims but no demographics row; dropped");
                report.dropped_patients.push(pid);
            }
        }
    }
    Ok(ParsedClaims { histories, report })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Reads a claims CSV and a demographics CSV into sorted patient histories.
pub fn parse_claims_file(path: &Path, demo_path: &Path) -> Result<ParsedClaims> {
    let claims = open(path)?;
    let demos = open(demo_path)?;
    parse_claims(claims, demos)
}

pub fn write_claims<W: Write>(out: W, histories: &[PatientHistory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CLAIMS_HEADER)?;
    for c in histories.iter().flat_map(|h| &h.claims) {
        w.write_record(c.to_row())?;
    }
    w.flush().map_err(|e| Error::io("<claims writer>", e))?;
    Ok(())
}

pub fn write_demographics<W: Write>(out: W, histories: &[PatientHistory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DEMOGRAPHICS_HEADER)?;
    for h in histories {
        let d = &h.demographics;
        w.write_record([
            d.patient_id.clone(),
            d.birth_year.to_string(),
            d.sex.to_string(),
            d.region.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<demographics writer>", e))?;
    Ok(())
}

pub(crate) fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_claims_file(path: &Path, histories: &[PatientHistory]) -> Result<()> {
    write_claims(std::io::BufWriter::new(create(path)?), histories)
}

pub fn write_demographics_file(path: &Path, histories: &[PatientHistory]) -> Result<()> {
    write_demographics(std::io::BufWriter::new(create(path)?), histories)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = "patient_id,birth_year,sex,region\nP1,1950,F,north\n";

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, DATE_FORMAT).unwrap()
    }

    fn claim(pid: &str, admit: &str, discharge: &str) -> ClaimRecord {
        ClaimRecord {
            patient_id: pid.into(),
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

    fn demo(pid: &str) -> PatientDemographics {
        PatientDemographics {
            patient_id: pid.into(),
            birth_year: 1950,
            sex: Sex::F,
            region: "north".into(),
        }
    }

    #[test]
    fn day_difference_is_calendar_days() {
        assert_eq!(days_between(d("2018-01-01"), d("2018-01-03")), 2);
    }

    #[test]
    fn out_of_order_rows_are_sorted() {
        let claims = "patient_id,admit_date,discharge_date,setting,discharge_status,dx_codes,proc_codes,drug_codes,primary_dx,planned_flag\n\
            P1,2018-03-01,2018-03-04,inpatient,home,I50;E11,99223,,I50,0\n\
            P1,2018-01-01,2018-01-02,outpatient,home,E11,,00093,E11,0\n";
        let parsed = parse_claims(claims.as_bytes(), DEMO.as_bytes()).unwrap();
        assert_eq!(parsed.histories.len(), 1);
        let h = &parsed.histories[0];
        assert_eq!(h.claims[0].admit_date, d("2018-01-01"));
        assert_eq!(h.claims[1].admit_date, d("2018-03-01"));
        assert_eq!(h.claims[1].dx_codes, vec!["I50", "E11"]);
        assert!(validate_history(h).is_empty());
    }

    #[test]
    fn empty_claims_file_gives_no_histories() {
        let claims = CLAIMS_HEADER.join(",") + "\n";
        let parsed = parse_claims(claims.as_bytes(), DEMO.as_bytes()).unwrap();
        assert!(parsed.histories.is_empty());
        assert!(parsed.report.rejected.is_empty());
    }

    #[test]
    fn admit_after_discharge_row_is_rejected() {
        let claims = CLAIMS_HEADER.join(",")
            + "\nP1,2018-02-05,2018-02-01,inpatient,home,I50,,,I50,0\n";
        let parsed = parse_claims(claims.as_bytes(), DEMO.as_bytes()).unwrap();
        assert!(parsed.histories.is_empty());
        assert_eq!(parsed.report.rejected.len(), 1);
        assert_eq!(parsed.report.rejected[0].line, 2);
    }

    #[test]
    fn patient_without_demographics_is_dropped() {
        let claims = CLAIMS_HEADER.join(",")
            + "\nP2,2018-02-01,2018-02-03,inpatient,home,I50,,,I50,0\n";
        let parsed = parse_claims(claims.as_bytes(), DEMO.as_bytes()).unwrap();
        assert!(parsed.histories.is_empty());
        assert_eq!(parsed.report.dropped_patients, vec!["P2".to_string()]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_claims_file(Path::new("/nonexistent/claims.csv"), Path::new("/nonexistent/d.csv"))
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn bad_header_is_format_error() {
        let err = parse_claims("a,b\n".as_bytes(), DEMO.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn valid_history_has_empty_report() {
        let h = PatientHistory::new(demo("P1"), vec![claim("P1", "2018-01-01", "2018-01-03")]);
        assert!(validate_history(&h).is_empty());
    }

    #[test]
    fn empty_patient_id_reported_once() {
        let h = PatientHistory::new(demo("P1"), vec![claim("", "2018-01-01", "2018-01-03")]);
        assert_eq!(validate_history(&h), vec![Violation::EmptyPatientId { claim: Some(0) }]);
    }

    #[test]
    fn unsorted_claims_report_one_order_violation() {
        let h = PatientHistory {
            demographics: demo("P1"),
            claims: vec![
                claim("P1", "2018-03-01", "2018-03-02"),
                claim("P1", "2018-01-01", "2018-01-02"),
                claim("P1", "2018-04-01", "2018-04-02"),
            ],
        };
        assert_eq!(validate_history(&h), vec![Violation::OrderViolation { claim: 1 }]);
    }

    #[test]
    fn ties_keep_input_order() {
        let mut a = claim("P1", "2018-01-01", "2018-01-05");
        a.primary_dx = "E11".into();
        a.dx_codes = vec!["E11".into()];
        let b = claim("P1", "2018-01-01", "2018-01-05");
        let c = claim("P1", "2018-01-01", "2018-01-03");
        let h = PatientHistory::new(demo("P1"), vec![a.clone(), b.clone(), c.clone()]);
        assert_eq!(h.claims, vec![c, a, b]);
    }
}
