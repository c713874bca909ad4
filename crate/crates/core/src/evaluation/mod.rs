//! Metrics, prediction sets and evaluation reports.

pub mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadSpec, ModelCheckpoint, Target};
use crate::tensor::sigmoid;

pub use metrics::{auc, gold_rank, macro_f1, micro_f1, top_k_accuracy, Counts};

/// Default decision threshold on the probability scale for sigmoid heads.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Converts flat logits to probabilities: softmax per class group, sigmoid
/// per binary output.
pub fn probabilities(head: &HeadSpec, logits: &[f64]) -> Vec<f64> {
    match *head {
        HeadSpec::SingleLabel { .. } => softmax(logits),
        HeadSpec::MultiLabelMulticlass { n_classes, .. } => logits.chunks(n_classes).flat_map(softmax).collect(),
        HeadSpec::MultiLabelBinary { .. } | HeadSpec::Binary => logits.iter().map(|&z| sigmoid(z)).collect(),
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    /// Probabilities, flat, in head output order.
    pub scores: Vec<f64>,
    pub gold: Target,
}

/// What the model predicted for one row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    /// Every label decision matches the gold.
    pub correct: bool,
    /// Probability of the predicted class (mean over labels for multi-label heads).
    pub confidence: f64,
    /// Flat output index whose logit scores the prediction.
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub head: HeadSpec,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub rows: Vec<PredictionRow>,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl PredictionSet {
    pub fn new(head: HeadSpec) -> Self {
        Self {
            head,
            threshold: DEFAULT_THRESHOLD,
            rows: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.head.n_outputs();
        for (i, r) in self.rows.iter().enumerate() {
            if r.scores.len() != n {
                return Err(Error::Dimension(format!("row {i}: {} scores for {n} outputs", r.scores.len())));
            }
            self.head.check_target(&r.gold)?;
        }
        Ok(())
    }

    /// Binary decision units per row, as `(gold, predicted)`.
    ///
    /// Units: every class for single-label heads, every (label, class) pair
    /// for multi-label multi-class heads, the positive class of each label
    /// for multi-label binary heads, and both classes for binary heads.
    pub fn decisions(&self) -> Vec<Vec<(bool, bool)>> {
        let thr = self.threshold;
        self.rows
            .iter()
            .map(|r| match (&self.head, &r.gold) {
                (HeadSpec::SingleLabel { n_classes }, Target::Class(g)) => {
                    let p = argmax(&r.scores);
                    (0..*n_classes).map(|c| (c == *g, c == p)).collect()
                }
                (HeadSpec::MultiLabelMulticlass { n_classes, .. }, Target::LabelClasses(gs)) => r
                    .scores
                    .chunks(*n_classes)
                    .zip(gs)
                    .flat_map(|(s, &g)| {
                        let p = argmax(s);
                        (0..*n_classes).map(move |c| (c == g, c == p))
                    })
                    .collect(),
                (HeadSpec::MultiLabelBinary { .. }, Target::LabelFlags(fs)) => {
                    r.scores.iter().zip(fs).map(|(&s, &g)| (g, s >= thr)).collect()
                }
                (HeadSpec::Binary, Target::Flag(g)) => {
                    let p = r.scores[0] >= thr;
                    vec![(!g, !p), (*g, p)]
                }
                _ => panic!("row gold does not match head; call validate first"),
            })
            .collect()
    }

    pub fn outcome(&self, row: &PredictionRow) -> Outcome {
        let thr = self.threshold;
        match (&self.head, &row.gold) {
            (HeadSpec::SingleLabel { .. }, Target::Class(g)) => {
                let p = argmax(&row.scores);
                Outcome {
                    correct: p == *g,
                    confidence: row.scores[p],
                    output: p,
                }
            }
            (HeadSpec::MultiLabelMulticlass { n_classes, .. }, Target::LabelClasses(gs)) => {
                let mut correct = true;
                let mut conf = 0.0;
                let mut best = (f64::NEG_INFINITY, 0);
                for (l, (s, &g)) in row.scores.chunks(*n_classes).zip(gs).enumerate() {
                    let p = argmax(s);
                    correct &= p == g;
                    conf += s[p];
                    if s[p] > best.0 {
                        best = (s[p], l * n_classes + p);
                    }
                }
                Outcome {
                    correct,
                    confidence: conf / gs.len() as f64,
                    output: best.1,
                }
            }
            (HeadSpec::MultiLabelBinary { .. }, Target::LabelFlags(fs)) => {
                let correct = row.scores.iter().zip(fs).all(|(&s, &g)| (s >= thr) == g);
                let conf = row.scores.iter().map(|&s| s.max(1.0 - s)).sum::<f64>() / fs.len() as f64;
                Outcome {
                    correct,
                    confidence: conf,
                    output: argmax(&row.scores.iter().map(|&s| (s - 0.5).abs()).collect::<Vec<_>>()),
                }
            }
            (HeadSpec::Binary, Target::Flag(g)) => {
                let s = row.scores[0];
                Outcome {
                    correct: (s >= thr) == *g,
                    confidence: s.max(1.0 - s),
                    output: 0,
                }
            }
            _ => panic!("row gold does not match head; call validate first"),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(Error::Contract("accuracy over zero examples".into()));
        }
        let hits = self.rows.iter().filter(|r| self.outcome(r).correct).count();
        Ok(hits as f64 / self.rows.len() as f64)
    }

    /// Macro-F1 for class heads, AUC for binary heads.
    pub fn primary_metric(&self) -> Result<(&'static str, f64)> {
        let value = match self.head {
            HeadSpec::Binary => self.binary_auc()?,
            _ => macro_f1(&self.decisions(), false)?,
        };
        Ok((self.primary_metric_name(), value))
    }

    /// Mean negative log-likelihood of the golds, probabilities clamped
    /// away from 0.
    pub fn mean_log_loss(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(Error::Contract("log loss over zero examples".into()));
        }
        let nll = |p: f64| -p.max(1e-15).ln();
        let total: f64 = self
            .rows
            .iter()
            .map(|r| match (&self.head, &r.gold) {
                (HeadSpec::SingleLabel { .. }, Target::Class(g)) => nll(r.scores[*g]),
                (HeadSpec::MultiLabelMulticlass { n_classes, .. }, Target::LabelClasses(gs)) => {
                    let s: f64 = r.scores.chunks(*n_classes).zip(gs).map(|(s, &g)| nll(s[g])).sum();
                    s / gs.len() as f64
                }
                (HeadSpec::MultiLabelBinary { .. }, Target::LabelFlags(fs)) => {
                    let s: f64 = r
                        .scores
                        .iter()
                        .zip(fs)
                        .map(|(&p, &g)| nll(if g { p } else { 1.0 - p }))
                        .sum();
                    s / fs.len() as f64
                }
                (HeadSpec::Binary, Target::Flag(g)) => nll(if *g { r.scores[0] } else { 1.0 - r.scores[0] }),
                _ => panic!("row gold does not match head; call validate first"),
            })
            .sum();
        Ok(total / self.rows.len() as f64)
    }

    pub fn primary_metric_name(&self) -> &'static str {
        match self.head {
            HeadSpec::Binary => "auc",
            _ => "macro_f1",
        }
    }

    fn binary_auc(&self) -> Result<f64> {
        let scores: Vec<f64> = self.rows.iter().map(|r| r.scores[0]).collect();
        let golds: Vec<bool> = self.rows.iter().map(|r| r.gold == Target::Flag(true)).collect();
        auc(&scores, &golds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("predictions serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }
}

/// Runs inference over `inputs` (token ids, gold) in parallel; row order
/// follows input order.
pub fn predict(ckpt: &ModelCheckpoint, inputs: &[(&[usize], Target)]) -> Result<PredictionSet> {
    let head = ckpt.config.head.clone();
    let rows: Vec<Result<PredictionRow>> = inputs
        .par_iter()
        .map(|(ids, gold)| {
            head.check_target(gold)?;
            let logits = ckpt.forward(ids)?;
            Ok(PredictionRow {
                scores: probabilities(&head, logits.data()),
                gold: gold.clone(),
            })
        })
        .collect();
    let mut set = PredictionSet::new(head);
    set.rows = rows.into_iter().collect::<Result<_>>()?;
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitMetrics {
    pub unit: String,
    pub support: u64,
    pub predicted: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: HeadSpec,
    pub n_examples: usize,
    pub threshold: f64,
    /// Exact-match accuracy.
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Macro-F1 leaving out units absent from gold and predictions.
    pub macro_f1_present: f64,
    /// `(k, accuracy)` for k in 1, 3, 5; single-label heads only.
    pub top_k: Vec<(usize, f64)>,
    /// Binary heads: overall AUC. Multi-label binary heads: mean over labels with both classes present.
    pub auc: Option<f64>,
    pub primary_metric: String,
    pub primary_value: f64,
    pub per_unit: Vec<UnitMetrics>,
}

impl EvalReport {
    /// `unit_names`, when given, labels the decision units in order.
    pub fn from_predictions(set: &PredictionSet, unit_names: Option<&[String]>) -> Result<Self> {
        set.validate()?;
        let decisions = set.decisions();
        let counts = metrics::per_unit_counts(&decisions)?;
        let top_k = match set.head {
            HeadSpec::SingleLabel { .. } => {
                let scores: Vec<Vec<f64>> = set.rows.iter().map(|r| r.scores.clone()).collect();
                let golds: Vec<usize> = set
                    .rows
                    .iter()
                    .map(|r| match r.gold {
                        Target::Class(c) => c,
                        _ => unreachable!("validated"),
                    })
                    .collect();
                [1, 3, 5]
                    .iter()
                    .map(|&k| Ok((k, top_k_accuracy(&scores, &golds, k)?)))
                    .collect::<Result<_>>()?
            }
            _ => Vec::new(),
        };
        let auc = match set.head {
            HeadSpec::Binary => set.binary_auc().ok(),
            HeadSpec::MultiLabelBinary { n_labels } => {
                let per: Vec<f64> = (0..n_labels)
                    .filter_map(|l| {
                        let scores: Vec<f64> = set.rows.iter().map(|r| r.scores[l]).collect();
                        let golds: Vec<bool> = set
                            .rows
                            .iter()
                            .map(|r| matches!(&r.gold, Target::LabelFlags(f) if f[l]))
                            .collect();
                        auc(&scores, &golds).ok()
                    })
                    .collect();
                (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
            }
            _ => None,
        };
        let names = default_unit_names(&set.head);
        let per_unit = counts
            .iter()
            .enumerate()
            .map(|(i, c)| UnitMetrics {
                unit: unit_names
                    .and_then(|n| n.get(i).cloned())
                    .unwrap_or_else(|| names[i].clone()),
                support: c.tp + c.fn_,
                predicted: c.tp + c.fp,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
            })
            .collect();
        let (primary_metric, primary_value) = match set.head {
            HeadSpec::Binary => ("auc", auc.unwrap_or(f64::NAN)),
            _ => ("macro_f1", macro_f1(&decisions, false)?),
        };
        Ok(Self {
            head: set.head.clone(),
            n_examples: set.rows.len(),
            threshold: set.threshold,
            accuracy: set.accuracy()?,
            micro_f1: micro_f1(&decisions)?,
            macro_f1: macro_f1(&decisions, false)?,
            macro_f1_present: macro_f1(&decisions, true)?,
            top_k,
            auc,
            primary_metric: primary_metric.into(),
            primary_value,
            per_unit,
        })
    }

    pub fn to_json(&self) -> String {
        // NaN is not representable in JSON; an undefined AUC is written as null.
        let mut v = serde_json::to_value(self).expect("report serializes");
        if self.primary_value.is_nan() {
            v["primary_value"] = serde_json::Value::Null;
        }
        serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
    }

    pub const CSV_HEADER: &'static str = "n_examples,accuracy,micro_f1,macro_f1,top1,top3,top5,auc";

    /// Header plus one summary row; missing metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let top = |k: usize| opt(self.top_k.iter().find(|(kk, _)| *kk == k).map(|p| p.1));
        let mut s = String::new();
        writeln!(s, "{}", Self::CSV_HEADER).expect("string write");
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            self.n_examples,
            self.accuracy,
            self.micro_f1,
            self.macro_f1,
            top(1),
            top(3),
            top(5),
            opt(self.auc)
        )
        .expect("string write");
        s
    }
}

fn default_unit_names(head: &HeadSpec) -> Vec<String> {
    match *head {
        HeadSpec::SingleLabel { n_classes } => (0..n_classes).map(|c| format!("class_{c}")).collect(),
        HeadSpec::MultiLabelMulticlass { n_labels, n_classes } => (0..n_labels)
            .flat_map(|l| (0..n_classes).map(move |c| format!("label_{l}/class_{c}")))
            .collect(),
        HeadSpec::MultiLabelBinary { n_labels } => (0..n_labels).map(|l| format!("label_{l}")).collect(),
        HeadSpec::Binary => vec!["negative".into(), "positive".into()],
    }
}
