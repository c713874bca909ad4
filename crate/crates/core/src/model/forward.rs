use crate::attention::{attention_on_tape, AttentionMode, AttentionStats};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::model::{HeadSpec, ModelCheckpoint, Target};
use crate::tensor::{Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct GraphMode {
    /// Record parameters as differentiable leaves.
    pub track_params: bool,
    /// `Some(seed)` enables dropout with masks derived from `seed`.
    pub dropout_seed: Option<u64>,
}

impl GraphMode {
    pub(crate) fn inference() -> Self {
        Self {
            track_params: false,
            dropout_seed: None,
        }
    }
}

pub(crate) struct Graph {
    /// Parameter leaves, in checkpoint order.
    pub params: Vec<Var>,
    /// Token + position embedding, before normalization.
    pub embedded: Var,
    /// `[1, n_outputs]`.
    pub logits: Var,
    pub stats: AttentionStats,
}

struct Builder<'a> {
    ckpt: &'a ModelCheckpoint,
    vars: Vec<Var>,
    dropout_seed: Option<u64>,
    dropout_site: u64,
}

impl Builder<'_> {
    fn p(&self, name: &str) -> Var {
        let i = self
            .ckpt
            .params()
            .get_index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from validated checkpoint"));
        self.vars[i]
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        tape.linear(x, self.p(&format!("{prefix}.weight")), self.p(&format!("{prefix}.bias")))
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        tape.layer_norm(
            x,
            self.p(&format!("{prefix}.gain")),
            self.p(&format!("{prefix}.bias")),
            LN_EPS,
        )
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(seed) = self.dropout_seed else {
            return Ok(x);
        };
        self.dropout_site += 1;
        let site_seed = seed ^ self.dropout_site.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        tape.dropout(x, self.ckpt.config.dropout_p, site_seed)
    }
}

pub(crate) fn build_graph(
    ckpt: &ModelCheckpoint,
    tape: &mut Tape,
    token_ids: &[usize],
    mode: GraphMode,
) -> Result<Graph> {
    let cfg = &ckpt.config;
    let len = token_ids.len();
    if len == 0 {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if len > cfg.max_positions {
        return Err(Error::Length(format!(
            "sequence of {len} tokens exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let vars = ckpt
        .params()
        .values()
        .map(|t| {
            if mode.track_params {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let mut b = Builder {
        ckpt,
        vars,
        dropout_seed: mode.dropout_seed,
        dropout_site: 0,
    };

    let positions: Vec<usize> = (0..len).collect();
    let tok = tape.embedding(b.p("embeddings.token"), token_ids)?;
    let pos = tape.embedding(b.p("embeddings.position"), &positions)?;
    let embedded = tape.add(tok, pos)?;
    let mut x = b.norm(tape, embedded, "embeddings.norm")?;
    x = b.dropout(tape, x)?;

    let key_mask: Vec<bool> = token_ids.iter().map(|&t| t != PAD).collect();
    let key_mask = key_mask.iter().any(|&m| !m).then_some(key_mask);
    let attn_mode = match &cfg.attention_mode {
        AttentionMode::Dense => AttentionMode::Dense,
        AttentionMode::Windowed(w) => AttentionMode::Windowed(w.clipped_to(len)),
    };
    let mut stats = AttentionStats::default();

    for i in 0..cfg.n_layers {
        let p = format!("layers.{i}.attention");
        let q = b.linear(tape, x, &format!("{p}.query"))?;
        let k = b.linear(tape, x, &format!("{p}.key"))?;
        let v = b.linear(tape, x, &format!("{p}.value"))?;
        let global = if attn_mode.is_windowed() {
            Some([
                b.linear(tape, x, &format!("{p}.global_query"))?,
                b.linear(tape, x, &format!("{p}.global_key"))?,
                b.linear(tape, x, &format!("{p}.global_value"))?,
            ])
        } else {
            None
        };
        let (att, s) = attention_on_tape(tape, &attn_mode, [q, k, v], global, key_mask.as_deref(), cfg.n_heads)?;
        stats += s;
        let a = b.linear(tape, att, &format!("{p}.output"))?;
        let a = b.dropout(tape, a)?;
        let r = tape.add(x, a)?;
        x = b.norm(tape, r, &format!("layers.{i}.attention_norm"))?;

        let h = b.linear(tape, x, &format!("layers.{i}.ffn.inner"))?;
        let h = tape.gelu(h);
        let f = b.linear(tape, h, &format!("layers.{i}.ffn.outer"))?;
        let f = b.dropout(tape, f)?;
        let r = tape.add(x, f)?;
        x = b.norm(tape, r, &format!("layers.{i}.ffn_norm"))?;
    }

    let cls = tape.row(x, 0)?;
    let logits = b.linear(tape, cls, "head")?;
    Ok(Graph {
        params: b.vars,
        embedded,
        logits,
        stats,
    })
}

/// Scalar training loss for `[1, n_outputs]` logits.
pub(crate) fn head_loss(tape: &mut Tape, logits: Var, head: &HeadSpec, target: &Target) -> Result<Var> {
    match (head, target) {
        (HeadSpec::SingleLabel { .. }, Target::Class(c)) => tape.cross_entropy(logits, &[*c]),
        (HeadSpec::MultiLabelMulticlass { n_labels, n_classes }, Target::LabelClasses(cs)) => {
            let grouped = tape.reshape(logits, vec![*n_labels, *n_classes])?;
            tape.cross_entropy(grouped, cs)
        }
        (HeadSpec::MultiLabelBinary { .. }, Target::LabelFlags(fs)) => {
            let ys: Vec<f64> = fs.iter().map(|&f| f as u8 as f64).collect();
            tape.binary_cross_entropy(logits, &ys)
        }
        (HeadSpec::Binary, Target::Flag(f)) => tape.binary_cross_entropy(logits, &[*f as u8 as f64]),
        _ => Err(Error::Label(format!("target {target:?} does not fit head {head:?}"))),
    }
}
