use std::collections::BTreeSet;
use std::path::Path;

use chrono::Datelike;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::concat::{concatenate_notes, header_tokens};
use super::jsonl;
use super::notes::{parse_timestamp, ClinicalNote, PatientHistory, TIMESTAMP_FORMAT};
use super::taxonomy::LabelTaxonomy;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::Target;

/// Target fields read from the record that follows the prior notes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordTarget {
    pub diagnosis_code: Option<String>,
    pub discharge_status: Option<String>,
    pub labels: Option<Target>,
    pub mortality: Option<bool>,
}

impl RecordTarget {
    fn from_note(n: &ClinicalNote) -> Self {
        Self {
            diagnosis_code: n.diagnosis_code.clone(),
            discharge_status: n.discharge_status.clone(),
            labels: n.labels.clone(),
            mortality: n.mortality(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub patient_id: String,
    /// Number of prior notes (1-based index of the newest one).
    pub t: usize,
    pub prior_notes: Vec<ClinicalNote>,
    pub target: RecordTarget,
}

/// One example per prefix of the history: example `t` holds notes `1..=t`
/// and the targets of note `t + 1`.
pub fn build_autoregressive_examples(history: &PatientHistory) -> Result<Vec<LabeledExample>> {
    let n = history.notes.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "patient {} has {n} note(s); at least 2 are needed",
            history.patient_id
        )));
    }
    Ok((1..n)
        .map(|t| LabeledExample {
            patient_id: history.patient_id.clone(),
            t,
            prior_notes: history.notes[..t].to_vec(),
            target: RecordTarget::from_note(&history.notes[t]),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Grouped diagnosis class of the next record.
    Diagnosis,
    /// Whether the next record ends in death.
    Mortality,
    /// Explicit `labels` attached to the next record.
    Labels,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagnosis" => Ok(Task::Diagnosis),
            "mortality" => Ok(Task::Mortality),
            "labels" => Ok(Task::Labels),
            _ => Err(Error::Config(format!("unknown task {s:?} (diagnosis, mortality, labels)"))),
        }
    }
}

/// A cached, tokenized example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub patient_id: String,
    pub t: usize,
    /// Timestamps of the prior notes, oldest first.
    pub note_timestamps: Vec<String>,
    pub tokens: Vec<usize>,
    /// Source note per position; `None` for CLS.
    pub note_index: Vec<Option<usize>>,
    pub diagnosis: Option<usize>,
    pub mortality: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Target>,
}

impl EncodedExample {
    pub fn target(&self, task: Task) -> Result<Target> {
        let missing = || Error::Label(format!("example {}#{} has no {task:?} target", self.patient_id, self.t));
        match task {
            Task::Diagnosis => self.diagnosis.map(Target::Class).ok_or_else(missing),
            Task::Mortality => self.mortality.map(Target::Flag).ok_or_else(missing),
            Task::Labels => self.labels.clone().ok_or_else(missing),
        }
    }

    /// Calendar year of the note that produced position `pos`.
    pub fn year_at(&self, pos: usize) -> Option<i32> {
        let note = self.note_index.get(pos).copied().flatten()?;
        parse_timestamp(self.note_timestamps.get(note)?).map(|t| t.year())
    }
}

pub fn encode_example(
    ex: &LabeledExample,
    vocab: &Vocab,
    taxonomy: Option<&LabelTaxonomy>,
    max_tokens: usize,
) -> Result<EncodedExample> {
    let c = concatenate_notes(&ex.prior_notes, vocab, max_tokens)?;
    let diagnosis = match (taxonomy, &ex.target.diagnosis_code) {
        (Some(tx), Some(code)) => Some(tx.group(code)),
        _ => None,
    };
    Ok(EncodedExample {
        patient_id: ex.patient_id.clone(),
        t: ex.t,
        note_timestamps: ex
            .prior_notes
            .iter()
            .map(|n| n.timestamp.format(TIMESTAMP_FORMAT).to_string())
            .collect(),
        tokens: c.ids,
        note_index: c.note_index,
        diagnosis,
        mortality: ex.target.mortality,
        labels: ex.target.labels.clone(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub max_tokens: usize,
    /// Keep only the example with the longest history per patient.
    pub final_only: bool,
}

/// Encodes every eligible history; patients with fewer than two notes are
/// skipped. Output order is by patient id, then `t`, for any thread count.
pub fn build_examples(
    histories: &[PatientHistory],
    vocab: &Vocab,
    taxonomy: Option<&LabelTaxonomy>,
    opts: BuildOptions,
) -> Result<Vec<EncodedExample>> {
    let mut sorted: Vec<&PatientHistory> = histories.iter().filter(|h| h.notes.len() >= 2).collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let per_patient: Vec<Result<Vec<EncodedExample>>> = sorted
        .par_iter()
        .map(|h| {
            let mut exs = build_autoregressive_examples(h)?;
            if opts.final_only {
                exs.drain(..exs.len() - 1);
            }
            exs.iter()
                .map(|e| encode_example(e, vocab, taxonomy, opts.max_tokens))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_patient {
        out.extend(r?);
    }
    Ok(out)
}

/// Vocabulary over note texts and timestamp headers.
pub fn build_vocab<'a>(histories: impl IntoIterator<Item = &'a PatientHistory>, min_count: usize) -> Vocab {
    let texts = histories.into_iter().flat_map(|h| {
        h.notes
            .iter()
            .flat_map(|n| [n.text.clone(), header_tokens(&n.timestamp).join(" ")])
    });
    Vocab::build(texts, min_count)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatientSplit {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl PatientSplit {
    /// Seeded shuffle of the sorted ids, cut by fractions; the test split
    /// takes the remainder.
    pub fn new<'a>(ids: impl IntoIterator<Item = &'a str>, train_frac: f64, valid_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&valid_frac) || train_frac + valid_frac > 1.0 {
            return Err(Error::Config(format!(
                "split fractions {train_frac} + {valid_frac} must lie in [0, 1]"
            )));
        }
        let mut ids: Vec<String> = ids.into_iter().map(str::to_string).collect::<BTreeSet<_>>().into_iter().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len();
        let n_train = (train_frac * n as f64).round() as usize;
        let n_valid = ((valid_frac * n as f64).round() as usize).min(n - n_train);
        let mut split = Self::default();
        for (i, id) in ids.into_iter().enumerate() {
            let bucket = if i < n_train {
                &mut split.train
            } else if i < n_train + n_valid {
                &mut split.valid
            } else {
                &mut split.test
            };
            bucket.insert(id);
        }
        Ok(split)
    }
}

pub fn read_examples(path: &Path) -> Result<Vec<EncodedExample>> {
    let exs: Vec<EncodedExample> = jsonl::read(path)?;
    for (i, e) in exs.iter().enumerate() {
        if e.tokens.len() != e.note_index.len() || e.tokens.is_empty() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: "tokens and note_index lengths differ".into(),
            });
        }
    }
    Ok(exs)
}

pub fn write_examples(path: &Path, examples: &[EncodedExample]) -> Result<()> {
    jsonl::write(path, examples)
}
