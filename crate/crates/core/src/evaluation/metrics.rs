use crate::error::{Error, Result};

/// Per-unit confusion counts over binary decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn add(&mut self, gold: bool, pred: bool) {
        match (gold, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// `2TP / (2TP + FP + FN)`, or `None` when the unit never occurs in
    /// gold or predictions.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| (2 * self.tp) as f64 / denom as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

/// Binary decision matrix: `decisions[example][unit] = (gold, predicted)`.
pub type Decisions = [Vec<(bool, bool)>];

fn unit_counts(decisions: &Decisions) -> Result<Vec<Counts>> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::Contract("metric over zero examples".into()))?;
    let units = first.len();
    let mut counts = vec![Counts::default(); units];
    for row in decisions {
        if row.len() != units {
            return Err(Error::Dimension(format!("{} decisions where {units} were expected", row.len())));
        }
        for (c, &(g, p)) in counts.iter_mut().zip(row) {
            c.add(g, p);
        }
    }
    Ok(counts)
}

/// F1 over globally pooled TP/FP/FN; 0 when nothing is positive anywhere.
pub fn micro_f1(decisions: &Decisions) -> Result<f64> {
    let mut pooled = Counts::default();
    for c in unit_counts(decisions)? {
        pooled.tp += c.tp;
        pooled.fp += c.fp;
        pooled.fn_ += c.fn_;
    }
    Ok(pooled.f1().unwrap_or(0.0))
}

/// Unweighted mean of per-unit F1.
///
/// A unit absent from both gold and predictions scores 0, or is left out
/// of the mean when `exclude_absent` is set.
pub fn macro_f1(decisions: &Decisions, exclude_absent: bool) -> Result<f64> {
    let scores: Vec<f64> = unit_counts(decisions)?
        .iter()
        .filter_map(|c| match c.f1() {
            Some(f) => Some(f),
            None if exclude_absent => None,
            None => Some(0.0),
        })
        .collect();
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn per_unit_counts(decisions: &Decisions) -> Result<Vec<Counts>> {
    unit_counts(decisions)
}

/// Position of `gold` when classes are ordered by descending score, ties
/// broken toward the lower class index.
pub fn gold_rank(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s > g || (s == g && c < gold))
        .count()
}

/// Fraction of examples whose gold class ranks within the top `k`.
///
/// `k` larger than the class count is clipped to it.
pub fn top_k_accuracy(scores: &[Vec<f64>], golds: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("top-k needs k >= 1".into()));
    }
    if scores.is_empty() || scores.len() != golds.len() {
        return Err(Error::Contract(format!(
            "top-k over {} score rows and {} golds",
            scores.len(),
            golds.len()
        )));
    }
    let mut hits = 0usize;
    for (row, &g) in scores.iter().zip(golds) {
        if g >= row.len() {
            return Err(Error::Label(format!("gold class {g} outside {} classes", row.len())));
        }
        if gold_rank(row, g) < k.min(row.len()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / golds.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Exact: pair counts are accumulated as integers.
pub fn auc(scores: &[f64], golds: &[bool]) -> Result<f64> {
    if scores.len() != golds.len() {
        return Err(Error::Dimension(format!("{} scores for {} golds", scores.len(), golds.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateInput("NaN score".into()));
    }
    let n_pos = golds.iter().filter(|&&g| g).count() as u128;
    let n_neg = golds.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateInput(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U statistic.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if golds[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}
