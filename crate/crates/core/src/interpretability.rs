//! Input-gradient saliency and its aggregation into per-year importance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, Task};
use crate::error::{Error, Result};
use crate::evaluation::predict;
use crate::model::ModelCheckpoint;

pub const DEFAULT_N_TOP: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// L2 norm, per position, of the gradient of logit `output` with respect to
/// the input embeddings.
pub fn token_saliency(ckpt: &ModelCheckpoint, token_ids: &[usize], output: usize) -> Result<Vec<f64>> {
    let (_, grad) = ckpt.input_gradient(token_ids, output)?;
    Ok((0..grad.rows())
        .map(|i| grad.row(i).iter().map(|g| g * g).sum::<f64>().sqrt())
        .collect())
}

/// What a kept token contributes to the year counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// One count per kept token.
    #[default]
    PerToken,
    /// One count per note with at least one kept token.
    PerNote,
}

/// Saliency of one example with the note and year behind every position.
/// Positions without a note (CLS, padding) carry `None` and are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSaliency {
    pub saliency: Vec<f64>,
    pub note: Vec<Option<usize>>,
    pub year: Vec<Option<i32>>,
}

impl SampleSaliency {
    /// Positions whose saliency exceeds `threshold` times the example total.
    pub fn kept(&self, threshold: f64) -> Vec<usize> {
        let total: f64 = self.positions().map(|i| self.saliency[i]).sum();
        let cut = threshold * total;
        self.positions().filter(|&i| self.saliency[i] > cut).collect()
    }

    fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.saliency.len()).filter(|&i| self.note[i].is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeImportance {
    pub model_id: String,
    pub threshold: f64,
    pub count_mode: CountMode,
    /// Samples requested and actually analyzed.
    pub n_requested: usize,
    pub n_samples: usize,
    pub kept_tokens: u64,
    pub counts: BTreeMap<i32, u64>,
    pub fractions: BTreeMap<i32, f64>,
}

impl TimeImportance {
    /// Counts kept positions per year and normalizes. An example with no
    /// year-resolvable kept position contributes nothing.
    pub fn aggregate(samples: &[SampleSaliency], threshold: f64, mode: CountMode) -> Result<Self> {
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::Config(format!("threshold {threshold} must be >= 0")));
        }
        let mut counts: BTreeMap<i32, u64> = BTreeMap::new();
        let mut kept_tokens = 0u64;
        for s in samples {
            if s.saliency.len() != s.note.len() || s.note.len() != s.year.len() {
                return Err(Error::Dimension("saliency, note and year lengths differ".into()));
            }
            let kept = s.kept(threshold);
            kept_tokens += kept.len() as u64;
            match mode {
                CountMode::PerToken => {
                    for i in kept {
                        if let Some(y) = s.year[i] {
                            *counts.entry(y).or_default() += 1;
                        }
                    }
                }
                CountMode::PerNote => {
                    let notes: BTreeSet<(usize, i32)> =
                        kept.iter().filter_map(|&i| Some((s.note[i]?, s.year[i]?))).collect();
                    for (_, y) in notes {
                        *counts.entry(y).or_default() += 1;
                    }
                }
            }
        }
        let total: u64 = counts.values().sum();
        let fractions = counts.iter().map(|(&y, &c)| (y, c as f64 / total as f64)).collect();
        Ok(Self {
            model_id: String::new(),
            threshold,
            count_mode: mode,
            n_requested: samples.len(),
            n_samples: samples.len(),
            kept_tokens,
            counts,
            fractions,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("year,fraction\n");
        for (y, f) in &self.fractions {
            writeln!(s, "{y},{f}").expect("string write");
        }
        s
    }

    /// Line chart of fraction by year. The generation time is embedded in a
    /// comment unless `timestamp` is `None`.
    pub fn to_svg(&self, timestamp: Option<&str>) -> String {
        const W: f64 = 640.0;
        const H: f64 = 360.0;
        const M: f64 = 48.0;
        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        )
        .unwrap();
        if let Some(ts) = timestamp {
            writeln!(s, "<!-- generated {ts} -->").unwrap();
        }
        writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">Time importance ({}, n={})</text>"#,
            W / 2.0,
            escape(&self.model_id),
            self.n_samples
        )
        .unwrap();
        let (x0, x1, y0, y1) = (M, W - M / 2.0, H - M, M);
        writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
        writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
        for tick in [0.0, 0.5, 1.0] {
            let y = y0 - tick * (y0 - y1);
            writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{tick:.1}</text>"#,
                x0 - 6.0,
                y + 4.0
            )
            .unwrap();
        }
        if self.fractions.is_empty() {
            writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">no token passed the threshold</text>"#,
                W / 2.0,
                H / 2.0
            )
            .unwrap();
        } else {
            let n = self.fractions.len();
            let step = if n > 1 { (x1 - x0) / (n - 1) as f64 } else { 0.0 };
            let points: Vec<(f64, f64, i32)> = self
                .fractions
                .iter()
                .enumerate()
                .map(|(i, (&year, &f))| {
                    let x = if n > 1 { x0 + i as f64 * step } else { (x0 + x1) / 2.0 };
                    (x, y0 - f * (y0 - y1), year)
                })
                .collect();
            let path: Vec<String> = points.iter().map(|(x, y, _)| format!("{x:.2},{y:.2}")).collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            )
            .unwrap();
            for (x, y, year) in points {
                writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="steelblue"/>"#).unwrap();
                writeln!(
                    s,
                    r#"<text x="{x:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{year}</text>"#,
                    y0 + 16.0
                )
                .unwrap();
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_svg(&self, path: &Path, timestamp: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_svg(timestamp)).map_err(|e| Error::io(path, e))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Indices of correctly predicted examples, most confident first (ties by
/// index), at most `n_top` of them.
pub fn select_confident(correct_conf: &[(bool, f64)], n_top: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..correct_conf.len()).filter(|&i| correct_conf[i].0).collect();
    idx.sort_by(|&a, &b| correct_conf[b].1.total_cmp(&correct_conf[a].1).then(a.cmp(&b)));
    idx.truncate(n_top);
    idx
}

#[derive(Clone, Debug)]
pub struct ImportanceOptions {
    pub task: Task,
    pub n_top: usize,
    pub threshold: f64,
    pub count_mode: CountMode,
    pub model_id: String,
}

/// Saliency of the predicted output for the `n_top` most confident correct
/// predictions, aggregated by note year.
pub fn time_importance(
    ckpt: &ModelCheckpoint,
    examples: &[EncodedExample],
    opts: &ImportanceOptions,
) -> Result<TimeImportance> {
    if opts.n_top == 0 {
        return Err(Error::Config("n_top must be >= 1".into()));
    }
    let inputs = examples
        .iter()
        .map(|e| Ok((e.tokens.as_slice(), e.target(opts.task)?)))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict(ckpt, &inputs)?;
    let outcomes: Vec<_> = preds.rows.iter().map(|r| preds.outcome(r)).collect();
    let cc: Vec<(bool, f64)> = outcomes.iter().map(|o| (o.correct, o.confidence)).collect();
    let chosen = select_confident(&cc, opts.n_top);
    let samples = chosen
        .par_iter()
        .map(|&i| {
            let e = &examples[i];
            Ok(SampleSaliency {
                saliency: token_saliency(ckpt, &e.tokens, outcomes[i].output)?,
                note: e.note_index.clone(),
                year: (0..e.tokens.len()).map(|p| e.year_at(p)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ti = TimeImportance::aggregate(&samples, opts.threshold, opts.count_mode)?;
    ti.model_id = opts.model_id.clone();
    ti.n_requested = opts.n_top;
    Ok(ti)
}
