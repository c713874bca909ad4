//! Dense attention and the sliding-window + global attention pattern.
//!
//! Both modes share one kernel driven by an [`AttentionPlan`]: for each query
//! row, the plan lists the key positions the row is scored against and says
//! which projection set (window path or global path) the row uses. Dense mode
//! scores every row against every key. Windowed mode gives a regular row its
//! clipped band `[i-w, i+w]` plus every global position, and gives a global
//! row the whole sequence. The per-row key lists are stored as bands, so
//! memory is `O(L·(2w+1+|G|) + |G|·L)` and no `L×L` matrix is materialized.
//!
//! Heads are independent column slices of the model dimension; the pair
//! count is reported per head and summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_slice, CustomOp, Tape, Tensor, Var};

/// Half window used when none is configured.
pub const DEFAULT_HALF_WINDOW: usize = 128;

/// Sliding-window + global attention layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// One-sided half window: token `i` sees `[i-w, i+w]`, clipped.
    pub half_window: usize,
    /// Sorted, deduplicated positions with symmetric global attention.
    pub global_positions: Vec<usize>,
}

impl WindowConfig {
    pub fn new(half_window: usize, mut global_positions: Vec<usize>) -> Self {
        global_positions.sort_unstable();
        global_positions.dedup();
        Self {
            half_window,
            global_positions,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if let Some(&g) = self.global_positions.iter().find(|&&g| g >= len) {
            return Err(Error::Config(format!(
                "global position {g} outside sequence of length {len}"
            )));
        }
        if self.global_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("global positions must be sorted and unique".into()));
        }
        Ok(())
    }

    /// Copy restricted to positions that exist in a sequence of length `len`.
    pub fn clipped_to(&self, len: usize) -> Self {
        Self {
            half_window: self.half_window,
            global_positions: self
                .global_positions
                .iter()
                .copied()
                .filter(|&g| g < len)
                .collect(),
        }
    }

    fn window(&self, i: usize, len: usize) -> (usize, usize) {
        (
            i.saturating_sub(self.half_window),
            (i + self.half_window).min(len - 1),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Dense,
    Windowed(WindowConfig),
}

impl AttentionMode {
    pub fn is_windowed(&self) -> bool {
        matches!(self, AttentionMode::Windowed(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Number of (query, key) score evaluations, summed over heads.
    pub scored_pairs: u64,
}

impl std::ops::AddAssign for AttentionStats {
    fn add_assign(&mut self, rhs: Self) {
        self.scored_pairs += rhs.scored_pairs;
    }
}

/// `mask[i][j]` is true iff `|i-j| <= w`, or `i` or `j` is a global position.
///
/// Quadratic in `len`; meant for tests and inspection only.
pub fn attendance_mask(len: usize, cfg: &WindowConfig) -> Result<Vec<Vec<bool>>> {
    cfg.validate(len)?;
    let mut is_global = vec![false; len];
    for &g in &cfg.global_positions {
        is_global[g] = true;
    }
    Ok((0..len)
        .map(|i| {
            (0..len)
                .map(|j| i.abs_diff(j) <= cfg.half_window || is_global[i] || is_global[j])
                .collect()
        })
        .collect())
}

/// Exact number of single-head score evaluations windowed attention performs.
///
/// Regular rows score their clipped band plus the global positions outside
/// it; global rows score all `len` keys. Always at most
/// `len·(2w+1) + 2·|G|·len`.
pub fn windowed_pair_count(len: usize, cfg: &WindowConfig) -> u64 {
    let g = &cfg.global_positions;
    let mut total = (g.len() * len) as u64;
    for i in 0..len {
        if g.binary_search(&i).is_ok() {
            continue;
        }
        let (lo, hi) = cfg.window(i, len);
        let inside = g.partition_point(|&p| p <= hi) - g.partition_point(|&p| p < lo);
        total += (hi - lo + 1 + g.len() - inside) as u64;
    }
    total
}

/// Upper bound `len·(2w+1) + 2·|G|·len` on single-head score evaluations.
pub fn windowed_pair_bound(len: usize, cfg: &WindowConfig) -> u64 {
    (len * (2 * cfg.half_window + 1) + 2 * cfg.global_positions.len() * len) as u64
}

/// Row-wise key lists for one sequence.
pub(crate) struct AttentionPlan {
    len: usize,
    /// `0..len`, shared by every row that sees the whole sequence.
    all: Vec<u32>,
    /// Flat band keys of regular rows; empty in dense mode.
    band_keys: Vec<u32>,
    /// Per row: `Some(range into band_keys)` for regular windowed rows.
    band_ranges: Vec<Option<(usize, usize)>>,
    /// Per row: true when the row uses the global projection set.
    global_row: Vec<bool>,
    /// Prefix sums of row key counts; row `i` owns `prob_offsets[i]..prob_offsets[i+1]`.
    prob_offsets: Vec<usize>,
}

impl AttentionPlan {
    pub(crate) fn dense(len: usize) -> Self {
        Self {
            len,
            all: (0..len as u32).collect(),
            band_keys: Vec::new(),
            band_ranges: vec![None; len],
            global_row: vec![false; len],
            prob_offsets: (0..=len).map(|i| i * len).collect(),
        }
    }

    pub(crate) fn windowed(len: usize, cfg: &WindowConfig) -> Result<Self> {
        cfg.validate(len)?;
        let g = &cfg.global_positions;
        let mut global_row = vec![false; len];
        for &p in g {
            global_row[p] = true;
        }
        let mut band_keys = Vec::with_capacity(len * (2 * cfg.half_window + 1 + g.len()));
        let mut band_ranges = Vec::with_capacity(len);
        let mut prob_offsets = Vec::with_capacity(len + 1);
        prob_offsets.push(0);
        for i in 0..len {
            if global_row[i] {
                band_ranges.push(None);
                prob_offsets.push(prob_offsets[i] + len);
                continue;
            }
            let (lo, hi) = cfg.window(i, len);
            let start = band_keys.len();
            band_keys.extend(g.iter().filter(|&&p| p < lo).map(|&p| p as u32));
            band_keys.extend(lo as u32..=hi as u32);
            band_keys.extend(g.iter().filter(|&&p| p > hi).map(|&p| p as u32));
            band_ranges.push(Some((start, band_keys.len())));
            prob_offsets.push(prob_offsets[i] + band_keys.len() - start);
        }
        Ok(Self {
            len,
            all: (0..len as u32).collect(),
            band_keys,
            band_ranges,
            global_row,
            prob_offsets,
        })
    }

    fn keys(&self, i: usize) -> &[u32] {
        match self.band_ranges[i] {
            Some((a, b)) => &self.band_keys[a..b],
            None => &self.all,
        }
    }

    fn pairs(&self) -> usize {
        self.prob_offsets[self.len]
    }
}

struct Qkv<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
}

struct Geometry {
    len: usize,
    d: usize,
    heads: usize,
}

impl Geometry {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Returns the attention output `[len, d]` and row probabilities laid out
/// head-major: `probs[h * pairs + prob_offsets[i] + slot]`.
fn attend(
    plan: &AttentionPlan,
    geo: &Geometry,
    local: &Qkv,
    global: &Qkv,
    key_mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let (d, dh, scale) = (geo.d, geo.head_dim(), geo.scale());
    let pairs = plan.pairs();
    let mut out = vec![0.0; geo.len * d];
    let mut probs = vec![0.0; geo.heads * pairs];
    for i in 0..geo.len {
        let p = if plan.global_row[i] { global } else { local };
        let keys = plan.keys(i);
        let off = plan.prob_offsets[i];
        for h in 0..geo.heads {
            let c = h * dh;
            let qi = &p.q[i * d + c..i * d + c + dh];
            let row = &mut probs[h * pairs + off..h * pairs + off + keys.len()];
            for (s, &j) in row.iter_mut().zip(keys) {
                let j = j as usize;
                *s = match key_mask {
                    Some(m) if !m[j] => f64::NEG_INFINITY,
                    _ => scale * dot(qi, &p.k[j * d + c..j * d + c + dh]),
                };
            }
            softmax_slice(row);
            let oi = &mut out[i * d + c..i * d + c + dh];
            for (&w, &j) in row.iter().zip(keys) {
                if w == 0.0 {
                    continue;
                }
                let vj = &p.v[j as usize * d + c..j as usize * d + c + dh];
                for (o, v) in oi.iter_mut().zip(vj) {
                    *o += w * v;
                }
            }
        }
    }
    (out, probs)
}

struct AttentionBackward {
    plan: AttentionPlan,
    geo: Geometry,
    probs: Vec<f64>,
    /// Inputs are `[q, k, v]` or `[q, k, v, gq, gk, gv]`.
    split: bool,
}

impl CustomOp for AttentionBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, dout: &[f64], in_grads: &mut [Vec<f64>]) {
        let (d, dh, scale) = (self.geo.d, self.geo.head_dim(), self.geo.scale());
        let pairs = self.plan.pairs();
        let mut dp = Vec::new();
        for i in 0..self.geo.len {
            let base = if self.split && self.plan.global_row[i] { 3 } else { 0 };
            let (q, k, v) = (inputs[base].data(), inputs[base + 1].data(), inputs[base + 2].data());
            let keys = self.plan.keys(i);
            let off = self.plan.prob_offsets[i];
            for h in 0..self.geo.heads {
                let c = h * dh;
                let row = &self.probs[h * pairs + off..h * pairs + off + keys.len()];
                let di = &dout[i * d + c..i * d + c + dh];
                dp.clear();
                dp.extend(keys.iter().map(|&j| dot(di, &v[j as usize * d + c..j as usize * d + c + dh])));
                let weighted: f64 = row.iter().zip(&dp).map(|(p, g)| p * g).sum();
                {
                    let dv = &mut in_grads[base + 2];
                    for (&w, &j) in row.iter().zip(keys) {
                        if w == 0.0 {
                            continue;
                        }
                        let j = j as usize;
                        for (o, g) in dv[j * d + c..j * d + c + dh].iter_mut().zip(di) {
                            *o += w * g;
                        }
                    }
                }
                let qi = &q[i * d + c..i * d + c + dh];
                for ((&w, &j), &g) in row.iter().zip(keys).zip(&dp) {
                    let ds = w * (g - weighted);
                    if ds == 0.0 {
                        continue;
                    }
                    let j = j as usize;
                    let kj = &k[j * d + c..j * d + c + dh];
                    for (o, kv) in in_grads[base][i * d + c..i * d + c + dh].iter_mut().zip(kj) {
                        *o += scale * ds * kv;
                    }
                    for (o, qv) in in_grads[base + 1][j * d + c..j * d + c + dh].iter_mut().zip(qi) {
                        *o += scale * ds * qv;
                    }
                }
            }
        }
    }
}

fn check_qkv(ts: &[&Tensor], heads: usize) -> Result<Geometry> {
    let shape = ts[0].shape();
    let [len, d] = shape else {
        return Err(Error::Dimension(format!("attention inputs must be [L, d], got {shape:?}")));
    };
    if let Some(bad) = ts.iter().find(|t| t.shape() != shape) {
        return Err(Error::Dimension(format!(
            "attention input shapes differ: {shape:?} vs {:?}",
            bad.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!("model width {d} not divisible into {heads} heads")));
    }
    Ok(Geometry {
        len: *len,
        d: *d,
        heads,
    })
}

fn check_mask(mask: Option<&[bool]>, len: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(Error::Dimension(format!(
            "padding mask has {} entries for sequence of length {len}",
            m.len()
        ))),
        _ => Ok(()),
    }
}

/// Scaled dot-product attention over all pairs, single head.
///
/// `key_mask[j] == false` excludes key `j` from every row's softmax.
pub fn dense_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: Option<&[bool]>,
) -> Result<(Tensor, AttentionStats)> {
    multi_head_attention(&AttentionMode::Dense, [q, k, v], None, key_mask, 1)
}

/// Windowed + global attention with the same projections on both paths, single head.
pub fn windowed_global_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &WindowConfig,
    key_mask: Option<&[bool]>,
) -> Result<(Tensor, AttentionStats)> {
    multi_head_attention(&AttentionMode::Windowed(cfg.clone()), [q, k, v], None, key_mask, 1)
}

/// General form: separate global-path projections and several heads.
///
/// `global` is ignored in dense mode; in windowed mode `None` reuses `local`.
pub fn multi_head_attention(
    mode: &AttentionMode,
    local: [&Tensor; 3],
    global: Option<[&Tensor; 3]>,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<(Tensor, AttentionStats)> {
    let mut all: Vec<&Tensor> = local.to_vec();
    if let Some(g) = global {
        all.extend(g);
    }
    let geo = check_qkv(&all, heads)?;
    check_mask(key_mask, geo.len)?;
    let plan = match mode {
        AttentionMode::Dense => AttentionPlan::dense(geo.len),
        AttentionMode::Windowed(cfg) => AttentionPlan::windowed(geo.len, cfg)?,
    };
    let l = Qkv {
        q: local[0].data(),
        k: local[1].data(),
        v: local[2].data(),
    };
    let g = match (mode, global) {
        (AttentionMode::Windowed(_), Some(g)) => Qkv {
            q: g[0].data(),
            k: g[1].data(),
            v: g[2].data(),
        },
        _ => Qkv { q: l.q, k: l.k, v: l.v },
    };
    let (out, _) = attend(&plan, &geo, &l, &g, key_mask);
    let stats = AttentionStats {
        scored_pairs: (plan.pairs() * heads) as u64,
    };
    Ok((Tensor::new(vec![geo.len, geo.d], out)?, stats))
}

/// Records multi-head attention on a tape.
///
/// `global` carries the global-path `[q, k, v]` in windowed mode; it must be
/// `None` in dense mode.
pub fn attention_on_tape(
    tape: &mut Tape,
    mode: &AttentionMode,
    local: [Var; 3],
    global: Option<[Var; 3]>,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<(Var, AttentionStats)> {
    if global.is_some() && !mode.is_windowed() {
        return Err(Error::Contract("dense attention takes a single projection set".into()));
    }
    let mut inputs: Vec<Var> = local.to_vec();
    if let Some(g) = global {
        inputs.extend(g);
    }
    let tensors: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
    let geo = check_qkv(&tensors, heads)?;
    check_mask(key_mask, geo.len)?;
    let plan = match mode {
        AttentionMode::Dense => AttentionPlan::dense(geo.len),
        AttentionMode::Windowed(cfg) => AttentionPlan::windowed(geo.len, cfg)?,
    };
    let l = Qkv {
        q: tensors[0].data(),
        k: tensors[1].data(),
        v: tensors[2].data(),
    };
    let g = if tensors.len() == 6 {
        Qkv {
            q: tensors[3].data(),
            k: tensors[4].data(),
            v: tensors[5].data(),
        }
    } else {
        Qkv { q: l.q, k: l.k, v: l.v }
    };
    let (out, probs) = attend(&plan, &geo, &l, &g, key_mask);
    let stats = AttentionStats {
        scored_pairs: (plan.pairs() * heads) as u64,
    };
    let output = Tensor::new(vec![geo.len, geo.d], out)?;
    let split = inputs.len() == 6;
    let var = tape.custom(
        inputs,
        output,
        Box::new(AttentionBackward {
            plan,
            geo,
            probs,
            split,
        }),
    );
    Ok((var, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_token_returns_its_value() {
        let q = t(&[vec![0.3, -1.0]]);
        let v = t(&[vec![4.0, 5.0]]);
        let (out, stats) = dense_attention(&q, &q, &v, None).unwrap();
        assert_eq!(out.data(), v.data());
        assert_eq!(stats.scored_pairs, 1);
    }

    #[test]
    fn orthonormal_queries_with_identity_values() {
        // Q = K = I_2, V = I_2: row i scores [1/sqrt2 on i, 0 elsewhere].
        let e = Tensor::identity(2);
        let (out, _) = dense_attention(&e, &e, &e, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let hi = s.exp() / (s.exp() + 1.0);
        let lo = 1.0 / (s.exp() + 1.0);
        let expect = [hi, lo, lo, hi];
        for (g, e) in out.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn only_unmasked_key_wins() {
        let q = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        let v = t(&[vec![7.0, 8.0], vec![1.0, 1.0], vec![3.0, 3.0]]);
        let mask = [true, false, false];
        let (out, stats) = dense_attention(&q, &q, &v, Some(&mask)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[7.0, 8.0]);
        }
        assert_eq!(stats.scored_pairs, 9);
    }

    #[test]
    fn zero_window_is_self_attention() {
        let q = t(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]);
        let v = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]);
        let (out, stats) = windowed_global_attention(&q, &q, &v, &WindowConfig::new(0, vec![]), None).unwrap();
        assert_eq!(out, v);
        assert_eq!(stats.scored_pairs, 3);
    }

    #[test]
    fn mask_enumerations() {
        let id = attendance_mask(3, &WindowConfig::new(0, vec![])).unwrap();
        for (i, row) in id.iter().enumerate() {
            for (j, &m) in row.iter().enumerate() {
                assert_eq!(m, i == j);
            }
        }
        let full = attendance_mask(4, &WindowConfig::new(3, vec![])).unwrap();
        assert!(full.iter().flatten().all(|&m| m));

        let m = attendance_mask(4, &WindowConfig::new(1, vec![3])).unwrap();
        let expect = [
            [true, true, false, true],
            [true, true, true, true],
            [false, true, true, true],
            [true, true, true, true],
        ];
        for i in 0..4 {
            assert_eq!(m[i], expect[i]);
        }
    }

    #[test]
    fn out_of_range_global_is_config_error() {
        let q = Tensor::zeros(&[4, 2]);
        let err = windowed_global_attention(&q, &q, &q, &WindowConfig::new(1, vec![4]), None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn pair_count_matches_plan_and_bound() {
        for (len, w, g) in [(10, 2, vec![0]), (7, 0, vec![]), (16, 3, vec![0, 5, 15]), (5, 9, vec![2])] {
            let cfg = WindowConfig::new(w, g);
            let plan = AttentionPlan::windowed(len, &cfg).unwrap();
            assert_eq!(plan.pairs() as u64, windowed_pair_count(len, &cfg));
            assert!(windowed_pair_count(len, &cfg) <= windowed_pair_bound(len, &cfg));
            let mask = attendance_mask(len, &cfg).unwrap();
            let per_row: usize = mask.iter().map(|r| r.iter().filter(|&&b| b).count()).sum();
            assert_eq!(per_row, plan.pairs());
        }
    }

    #[test]
    fn rows_of_probabilities_sum_to_one() {
        let len = 9;
        let mut data = Vec::new();
        for i in 0..len * 4 {
            data.push(((i * 37 % 11) as f64 - 5.0) / 3.0);
        }
        let x = Tensor::new(vec![len, 4], data).unwrap();
        let cfg = WindowConfig::new(1, vec![0, 4]);
        let plan = AttentionPlan::windowed(len, &cfg).unwrap();
        let geo = Geometry { len, d: 4, heads: 2 };
        let qkv = Qkv {
            q: x.data(),
            k: x.data(),
            v: x.data(),
        };
        let (_, probs) = attend(&plan, &geo, &qkv, &qkv, None);
        for h in 0..2 {
            for i in 0..len {
                let (a, b) = (plan.prob_offsets[i], plan.prob_offsets[i + 1]);
                let s: f64 = probs[h * plan.pairs() + a..h * plan.pairs() + b].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    fn seq(len: usize, d: usize, salt: usize) -> Tensor {
        let data = (0..len * d)
            .map(|i| (((i * 7919 + salt * 104729) % 23) as f64 - 11.0) / 9.0)
            .collect();
        Tensor::new(vec![len, d], data).unwrap()
    }

    fn loss_of(mode: &AttentionMode, ins: &[Tensor], mask: Option<&[bool]>) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let global = (vars.len() == 6).then(|| [vars[3], vars[4], vars[5]]);
        let (out, _) = attention_on_tape(&mut tape, mode, [vars[0], vars[1], vars[2]], global, mask, 2).unwrap();
        let w = tape.constant(seq(ins[0].shape()[0], ins[0].shape()[1], 99));
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        (tape.value(loss).data()[0], grads)
    }

    fn check_gradients(mode: AttentionMode, n_inputs: usize, mask: Option<&[bool]>) {
        let (len, d) = (6, 4);
        let ins: Vec<Tensor> = (0..n_inputs).map(|s| seq(len, d, s + 1)).collect();
        let (_, grads) = loss_of(&mode, &ins, mask);
        let h = 1e-6;
        for (a, g) in grads.iter().enumerate() {
            for e in 0..len * d {
                let mut plus = ins.clone();
                plus[a].data_mut()[e] += h;
                let mut minus = ins.clone();
                minus[a].data_mut()[e] -= h;
                let fd = (loss_of(&mode, &plus, mask).0 - loss_of(&mode, &minus, mask).0) / (2.0 * h);
                assert!((fd - g[e]).abs() < 1e-6, "input {a} entry {e}: fd {fd} vs {}", g[e]);
            }
        }
    }

    #[test]
    fn dense_tape_gradients_match_finite_differences() {
        check_gradients(AttentionMode::Dense, 3, Some(&[true, true, true, false, true, false]));
    }

    #[test]
    fn split_windowed_tape_gradients_match_finite_differences() {
        let mode = AttentionMode::Windowed(WindowConfig::new(1, vec![0, 4]));
        check_gradients(mode.clone(), 6, None);
        check_gradients(mode, 3, Some(&[true, true, false, true, true, true]));
    }
}
