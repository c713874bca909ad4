//! Seeded synthetic corpora with planted, annotated signals.
//!
//! Each patient gets a disease class and a binary outcome:
//!
//! * the disease class is carried by `dz{c}_{j}` tokens planted in older
//!   notes, at distances from the end of the patient's final example (its
//!   concatenation of all prior notes) drawn from `disease_distance`;
//! * the outcome is carried by marker words planted in the last
//!   `recent_notes` prior notes, and is written into the final note's
//!   discharge status.
//!
//! Every other token is filler from a fixed clinical word list.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::notes::{parse_timestamp, ClinicalNote};
use super::taxonomy::{normalize_code, CancerSite, LabelTaxonomy};
use crate::error::{Error, Result};

pub const POSITIVE_MARKERS: [&str; 2] = ["deteriorating", "critical"];
pub const NEGATIVE_MARKERS: [&str; 2] = ["stable", "improving"];

const FILLER: &[&str] = &[
    "patient", "admitted", "with", "history", "of", "reports", "denies", "noted", "on", "exam", "the", "and", "was",
    "given", "plan", "continue", "monitor", "review", "follow", "up", "clinic", "ward", "bed", "rest", "fluids",
    "oral", "intake", "appetite", "sleep", "mobility", "assisted", "walking", "physio", "assessment", "nursing",
    "chart", "vitals", "recorded", "temperature", "pulse", "pressure", "saturation", "oxygen", "room", "air",
    "breath", "sounds", "clear", "bilateral", "chest", "abdomen", "soft", "nontender", "bowel", "urine", "output",
    "adequate", "skin", "intact", "wound", "dressing", "changed", "drain", "removed", "line", "site", "dry",
    "medication", "dose", "daily", "twice", "tablet", "infusion", "antibiotic", "course", "completed", "analgesia",
    "pain", "score", "mild", "moderate", "headache", "nausea", "vomiting", "cough", "sputum", "fever", "chills",
    "fatigue", "weakness", "dizziness", "swelling", "ankle", "knee", "hip", "back", "neck", "arm", "left", "right",
    "blood", "test", "results", "pending", "sent", "culture", "imaging", "xray", "scan", "ultrasound", "report",
    "discussed", "family", "consent", "obtained", "team", "doctor", "nurse", "social", "worker", "dietitian",
    "discharge", "planning", "home", "support", "arranged", "transport", "booked", "letter", "copy", "gp",
    "morning", "evening", "overnight", "today", "yesterday", "week", "month", "routine", "check", "normal",
    "range", "within", "limits", "slightly", "raised", "lower", "than", "previous", "repeat", "tomorrow",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_patients: usize,
    /// Inclusive range of notes per patient.
    pub notes_per_patient: [usize; 2],
    /// Inclusive range of text tokens per note.
    pub note_length: [usize; 2],
    /// One diagnosis code per disease class.
    pub disease_codes: Vec<String>,
    /// Relative class frequencies; uniform when empty.
    pub disease_weights: Vec<f64>,
    /// Disease tokens planted per patient.
    pub disease_signal_tokens: usize,
    /// Distinct tokens per disease pattern.
    pub disease_pattern_size: usize,
    /// Inclusive distance range, in tokens from the end of the final example.
    pub disease_distance: [usize; 2],
    /// Prior notes (counted back from the last) that carry outcome markers.
    pub recent_notes: usize,
    pub recent_signal_tokens: usize,
    pub mortality_rate: f64,
    pub end_date: String,
    /// Inclusive day gaps between consecutive notes inside the recent window.
    pub recent_gap_days: [u32; 2],
    /// Inclusive day gaps between older notes.
    pub older_gap_days: [u32; 2],
    /// Probability that a filler slot ends a sentence with `.`.
    pub sentence_break_rate: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_patients: 300,
            notes_per_patient: [10, 13],
            note_length: [200, 260],
            disease_codes: ["C34.1", "J18.9", "I21.0", "E11.9"].map(String::from).to_vec(),
            disease_weights: Vec::new(),
            disease_signal_tokens: 24,
            disease_pattern_size: 3,
            disease_distance: [600, 1800],
            recent_notes: 2,
            recent_signal_tokens: 6,
            mortality_rate: 0.5,
            end_date: "2019-12-20".into(),
            recent_gap_days: [3, 20],
            older_gap_days: [45, 200],
            sentence_break_rate: 0.08,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Disease,
    Recent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSignal {
    pub patient_id: String,
    pub kind: SignalKind,
    /// 0-based index of the note in the patient's time-ordered history.
    pub note: usize,
    /// Token offset within the note text.
    pub offset: usize,
    pub token: String,
    /// Tokens between this one and the end of the final example.
    pub distance_from_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub disease_class: usize,
    pub diagnosis_code: String,
    pub mortality: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    /// Grouped by patient (sorted id), time-ordered within a patient.
    pub notes: Vec<ClinicalNote>,
    pub truths: Vec<PatientTruth>,
    pub signals: Vec<PlantedSignal>,
}

/// Content tokens a note contributes to a concatenation besides its text:
/// separator plus a three-token timestamp header.
const BLOCK_OVERHEAD: usize = 4;

pub fn disease_token(class: usize, j: usize) -> String {
    format!("dz{class}_{j}")
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let [nmin, nmax] = self.notes_per_patient;
        let [lmin, lmax] = self.note_length;
        let [dmin, dmax] = self.disease_distance;
        if self.n_patients == 0 {
            return fail("n_patients must be positive".into());
        }
        if nmin < 2 || nmin > nmax || lmin == 0 || lmin > lmax || dmin > dmax {
            return fail("ranges must be ordered, with >= 2 notes and >= 1 token per note".into());
        }
        if self.disease_codes.len() < 2 {
            return fail("at least two disease codes are needed".into());
        }
        if !self.disease_weights.is_empty()
            && (self.disease_weights.len() != self.disease_codes.len()
                || self.disease_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || self.disease_weights.iter().sum::<f64>() <= 0.0)
        {
            return fail("disease_weights must be one non-negative weight per code".into());
        }
        if self.disease_pattern_size == 0 {
            return fail("disease_pattern_size must be positive".into());
        }
        if self.recent_notes + 1 >= nmin && (self.recent_signal_tokens > 0 || self.disease_signal_tokens > 0) {
            return fail(format!(
                "{} recent notes leave no older note to carry the disease signal with {nmin} notes",
                self.recent_notes
            ));
        }
        if self.recent_signal_tokens > lmin {
            return fail(format!(
                "recent signal of {} tokens is longer than the shortest note ({lmin})",
                self.recent_signal_tokens
            ));
        }
        // Shortest possible history: the older notes must reach past dmax.
        let older = nmin - 1 - self.recent_notes;
        let recent_span = self.recent_notes * (BLOCK_OVERHEAD + lmax);
        if self.disease_signal_tokens > 0 {
            if recent_span > dmin {
                return fail(format!(
                    "recent notes can span {recent_span} tokens, overlapping the disease window starting at {dmin}"
                ));
            }
            if self.recent_notes * (BLOCK_OVERHEAD + lmin) + older * (BLOCK_OVERHEAD + lmin) <= dmax {
                return fail(format!(
                    "shortest history cannot reach {dmax} tokens back from the end"
                ));
            }
            if self.disease_signal_tokens > (dmax - dmin + 1) / 2 {
                return fail("disease signal is longer than the distance window can hold".into());
            }
        }
        if !(0.0..=1.0).contains(&self.mortality_rate) || !(0.0..1.0).contains(&self.sentence_break_rate) {
            return fail("rates must be probabilities".into());
        }
        if self.recent_gap_days[0] > self.recent_gap_days[1] || self.older_gap_days[0] > self.older_gap_days[1] {
            return fail("gap ranges must be ordered".into());
        }
        self.end()?;
        Ok(())
    }

    fn end(&self) -> Result<NaiveDateTime> {
        parse_timestamp(&self.end_date).ok_or_else(|| Error::Config(format!("bad end_date {:?}", self.end_date)))
    }

    /// Taxonomy giving each disease code its own class: `C` codes become
    /// cancer sites, the rest prefix classes; the catch-all stays unused.
    pub fn taxonomy(&self) -> LabelTaxonomy {
        let mut t = LabelTaxonomy {
            cancer_sites: Vec::new(),
            prefix_rule: true,
            prefix_length: 3,
            classes: Vec::new(),
            other: "other".into(),
        };
        for code in &self.disease_codes {
            let prefix: String = normalize_code(code).chars().take(3).collect();
            if prefix.starts_with('C') {
                t.cancer_sites.push(CancerSite {
                    name: format!("site_{prefix}"),
                    prefixes: vec![prefix],
                });
            } else {
                t.classes.push(prefix);
            }
        }
        t
    }

    pub fn generate(&self, seed: u64) -> Result<SyntheticCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let end = self.end()?;
        let mut corpus = SyntheticCorpus {
            notes: Vec::new(),
            truths: Vec::new(),
            signals: Vec::new(),
        };
        for p in 0..self.n_patients {
            let patient_id = format!("p{p:05}");
            self.patient(&mut rng, &patient_id, end, &mut corpus)?;
        }
        Ok(corpus)
    }

    fn pick_class(&self, rng: &mut ChaCha8Rng) -> usize {
        if self.disease_weights.is_empty() {
            return rng.gen_range(0..self.disease_codes.len());
        }
        let total: f64 = self.disease_weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in self.disease_weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.disease_weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    fn patient(&self, rng: &mut ChaCha8Rng, pid: &str, end: NaiveDateTime, out: &mut SyntheticCorpus) -> Result<()> {
        let class = self.pick_class(rng);
        let mortality = rng.gen_bool(self.mortality_rate);
        let n_notes = rng.gen_range(self.notes_per_patient[0]..=self.notes_per_patient[1]);
        let lens: Vec<usize> = (0..n_notes)
            .map(|_| rng.gen_range(self.note_length[0]..=self.note_length[1]))
            .collect();
        let n_prior = n_notes - 1;
        let mut slots: Vec<Vec<Option<String>>> = lens.iter().map(|&l| vec![None; l]).collect();
        let mut signals = Vec::new();

        // Distance of every text slot of the prior notes from the final example's end.
        let mut after = vec![0usize; n_prior];
        for j in (0..n_prior.saturating_sub(1)).rev() {
            after[j] = after[j + 1] + BLOCK_OVERHEAD + lens[j + 1];
        }
        let distance = |j: usize, o: usize| after[j] + lens[j] - 1 - o;

        let recent_from = n_prior - self.recent_notes;
        let markers = if mortality { POSITIVE_MARKERS } else { NEGATIVE_MARKERS };
        for (j, note_slots) in slots.iter_mut().enumerate().take(n_prior).skip(recent_from) {
            for o in index::sample(rng, lens[j], self.recent_signal_tokens).into_vec() {
                let tok = markers.choose(rng).expect("nonempty").to_string();
                note_slots[o] = Some(tok.clone());
                signals.push((SignalKind::Recent, j, o, tok));
            }
        }

        let [dmin, dmax] = self.disease_distance;
        let candidates: Vec<(usize, usize)> = (0..recent_from)
            .flat_map(|j| (0..lens[j]).map(move |o| (j, o)))
            .filter(|&(j, o)| (dmin..=dmax).contains(&distance(j, o)))
            .collect();
        if candidates.len() < self.disease_signal_tokens {
            return Err(Error::Config(format!(
                "patient {pid}: only {} slots in the disease distance window",
                candidates.len()
            )));
        }
        for i in index::sample(rng, candidates.len(), self.disease_signal_tokens).into_vec() {
            let (j, o) = candidates[i];
            let tok = disease_token(class, rng.gen_range(0..self.disease_pattern_size));
            slots[j][o] = Some(tok.clone());
            signals.push((SignalKind::Disease, j, o, tok));
        }
        signals.sort_by_key(|s| (s.1, s.2));

        let timestamps = self.timestamps(rng, end, n_notes);
        let code = self.disease_codes[class].clone();
        for (j, note_slots) in slots.into_iter().enumerate() {
            let last = j + 1 == n_notes;
            out.notes.push(ClinicalNote {
                patient_id: pid.into(),
                timestamp: timestamps[j],
                note_type: if last { "discharge" } else { "progress" }.into(),
                text: self.render(rng, note_slots),
                diagnosis_code: Some(code.clone()),
                discharge_status: Some(if last && mortality { "death" } else { "discharged" }.into()),
                labels: None,
            });
        }
        out.signals.extend(signals.into_iter().map(|(kind, j, o, token)| PlantedSignal {
            patient_id: pid.into(),
            kind,
            note: j,
            offset: o,
            token,
            distance_from_end: distance(j, o),
        }));
        out.truths.push(PatientTruth {
            patient_id: pid.into(),
            disease_class: class,
            diagnosis_code: code,
            mortality,
        });
        Ok(())
    }

    /// Dates counted back from `end`: short gaps inside the recent window,
    /// long gaps before it.
    fn timestamps(&self, rng: &mut ChaCha8Rng, end: NaiveDateTime, n: usize) -> Vec<NaiveDateTime> {
        let day = |t: NaiveDateTime| NaiveDate::from(t).and_hms_opt(0, 0, 0).expect("midnight");
        let mut ts = vec![day(end); n];
        for j in (0..n - 1).rev() {
            let recent = j + 1 + self.recent_notes >= n;
            let [lo, hi] = if recent { self.recent_gap_days } else { self.older_gap_days };
            ts[j] = ts[j + 1] - Duration::days(rng.gen_range(lo..=hi).max(1) as i64);
        }
        ts
    }

    fn render(&self, rng: &mut ChaCha8Rng, slots: Vec<Option<String>>) -> String {
        let mut text = String::new();
        for slot in slots {
            let word = match slot {
                Some(w) => w,
                None if !text.is_empty() && rng.gen_bool(self.sentence_break_rate) => {
                    text.push('.');
                    continue;
                }
                None => FILLER.choose(rng).expect("nonempty").to_string(),
            };
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&word);
        }
        text
    }
}

/// Re-derives the outcome of a patient from the text of their last
/// `recent_notes` prior notes.
pub fn derive_mortality(prior_notes: &[ClinicalNote], recent_notes: usize) -> Option<bool> {
    let from = prior_notes.len().saturating_sub(recent_notes);
    let words: Vec<String> = prior_notes[from..]
        .iter()
        .flat_map(|n| super::vocab::split_words(&n.text))
        .collect();
    let pos = words.iter().any(|w| POSITIVE_MARKERS.contains(&w.as_str()));
    let neg = words.iter().any(|w| NEGATIVE_MARKERS.contains(&w.as_str()));
    match (pos, neg) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}
