use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::jsonl;
use crate::error::{Error, Result};
use crate::model::Target;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub patient_id: String,
    #[serde(serialize_with = "write_timestamp", deserialize_with = "read_timestamp")]
    pub timestamp: NaiveDateTime,
    pub note_type: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discharge_status: Option<String>,
    /// Task-specific gold labels attached to this record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Target>,
}

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Accepts `YYYY-MM-DD`, `YYYY-MM-DDTHH:MM:SS[.f]`, the same with a space
/// separator, or RFC 3339 (offset dropped).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_local());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

fn write_timestamp<S: Serializer>(t: &NaiveDateTime, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&t.format(TIMESTAMP_FORMAT).to_string())
}

fn read_timestamp<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<NaiveDateTime, D::Error> {
    let s = String::deserialize(d)?;
    parse_timestamp(&s).ok_or_else(|| serde::de::Error::custom(format!("unparseable timestamp {s:?}")))
}

/// Statuses that mark an in-hospital death.
const DEATH_STATUSES: [&str; 5] = ["death", "dead", "died", "deceased", "expired"];

impl ClinicalNote {
    /// `Some(true)` when the discharge status records a death.
    pub fn mortality(&self) -> Option<bool> {
        self.discharge_status
            .as_deref()
            .map(|s| DEATH_STATUSES.contains(&s.trim().to_lowercase().as_str()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientHistory {
    pub patient_id: String,
    /// Ordered by timestamp, then note type, then input order.
    pub notes: Vec<ClinicalNote>,
}

/// Groups notes by patient (sorted by id) and orders each patient's notes.
pub fn group_histories(notes: Vec<ClinicalNote>) -> Vec<PatientHistory> {
    let mut by_patient: std::collections::BTreeMap<String, Vec<ClinicalNote>> = Default::default();
    for n in notes {
        by_patient.entry(n.patient_id.clone()).or_default().push(n);
    }
    by_patient
        .into_iter()
        .map(|(patient_id, mut notes)| {
            notes.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.note_type.cmp(&b.note_type)));
            PatientHistory { patient_id, notes }
        })
        .collect()
}

pub fn read_notes(path: &Path) -> Result<Vec<ClinicalNote>> {
    let notes: Vec<ClinicalNote> = jsonl::read(path)?;
    if let Some((i, _)) = notes.iter().enumerate().find(|(_, n)| n.patient_id.is_empty()) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: "empty patient_id".into(),
        });
    }
    Ok(notes)
}

pub fn write_notes(path: &Path, notes: &[ClinicalNote]) -> Result<()> {
    jsonl::write(path, notes)
}
