//! Post-LN transformer encoder with a leading classification token.
//!
//! Parameters live in an ordered name → tensor map whose key set is fully
//! determined by [`ModelConfig`]; see [`parameter_layout`].

mod extend;
mod forward;

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::attention::{AttentionMode, AttentionStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use extend::extend_context;
pub(crate) use forward::{build_graph, head_loss, GraphMode};

/// Archive kind tag for encoder checkpoints.
pub const CHECKPOINT_KIND: &str = "encoder";

/// Context-length presets.
pub const CONTEXT_PRESETS: [usize; 5] = [512, 1024, 2048, 4096, 8192];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    SingleLabel { n_classes: usize },
    /// Independent softmax group per label.
    MultiLabelMulticlass { n_labels: usize, n_classes: usize },
    /// Independent sigmoid per label.
    MultiLabelBinary { n_labels: usize },
    Binary,
}

impl HeadSpec {
    pub fn n_outputs(&self) -> usize {
        match *self {
            HeadSpec::SingleLabel { n_classes } => n_classes,
            HeadSpec::MultiLabelMulticlass { n_labels, n_classes } => n_labels * n_classes,
            HeadSpec::MultiLabelBinary { n_labels } => n_labels,
            HeadSpec::Binary => 1,
        }
    }

    /// Shape of the logits returned by the forward pass.
    pub fn logits_shape(&self) -> Vec<usize> {
        match *self {
            HeadSpec::MultiLabelMulticlass { n_labels, n_classes } => vec![n_labels, n_classes],
            _ => vec![self.n_outputs()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadSpec::SingleLabel { n_classes } if n_classes < 2 => {
                Err(Error::Config(format!("single-label head needs >= 2 classes, got {n_classes}")))
            }
            HeadSpec::MultiLabelMulticlass { n_labels, n_classes } if n_labels == 0 || n_classes < 2 => {
                Err(Error::Config(format!(
                    "multi-label head needs >= 1 label and >= 2 classes, got {n_labels}x{n_classes}"
                )))
            }
            HeadSpec::MultiLabelBinary { n_labels: 0 } => {
                Err(Error::Config("multi-label binary head needs >= 1 label".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn check_target(&self, target: &Target) -> Result<()> {
        let ok = match (self, target) {
            (HeadSpec::SingleLabel { n_classes }, Target::Class(c)) => c < n_classes,
            (HeadSpec::MultiLabelMulticlass { n_labels, n_classes }, Target::LabelClasses(cs)) => {
                cs.len() == *n_labels && cs.iter().all(|c| c < n_classes)
            }
            (HeadSpec::MultiLabelBinary { n_labels }, Target::LabelFlags(fs)) => fs.len() == *n_labels,
            (HeadSpec::Binary, Target::Flag(_)) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Label(format!("target {target:?} does not fit head {self:?}")))
        }
    }
}

/// Gold value(s) for one example, shaped per [`HeadSpec`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    LabelClasses(Vec<usize>),
    LabelFlags(Vec<bool>),
    Flag(bool),
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub attention_mode: AttentionMode,
    pub head: HeadSpec,
    pub dropout_p: f64,
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, d_model and ffn_dim must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_positions < 2 {
            return fail(format!("max_positions must be >= 2, got {}", self.max_positions));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return fail(format!("init_std {} must be finite and >= 0", self.init_std));
        }
        if let AttentionMode::Windowed(w) = &self.attention_mode {
            w.validate(self.max_positions)?;
            if w.global_positions.first() != Some(&0) {
                return fail("windowed mode requires global attention on position 0".into());
            }
        }
        self.head.validate()
    }
}

/// Every parameter name and shape implied by `config`, in canonical order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, n_out) = (config.d_model, config.ffn_dim, config.head.n_outputs());
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("embeddings.token".into(), vec![config.vocab_size, d]),
        ("embeddings.position".into(), vec![config.max_positions, d]),
        ("embeddings.norm.gain".into(), vec![d]),
        ("embeddings.norm.bias".into(), vec![d]),
    ];
    let mut projections = vec!["query", "key", "value"];
    if config.attention_mode.is_windowed() {
        projections.extend(["global_query", "global_key", "global_value"]);
    }
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        for proj in projections.iter().chain(&["output"]) {
            out.push((format!("{p}.attention.{proj}.weight"), vec![d, d]));
            out.push((format!("{p}.attention.{proj}.bias"), vec![d]));
        }
        out.push((format!("{p}.attention_norm.gain"), vec![d]));
        out.push((format!("{p}.attention_norm.bias"), vec![d]));
        out.push((format!("{p}.ffn.inner.weight"), vec![d, f]));
        out.push((format!("{p}.ffn.inner.bias"), vec![f]));
        out.push((format!("{p}.ffn.outer.weight"), vec![f, d]));
        out.push((format!("{p}.ffn.outer.bias"), vec![d]));
        out.push((format!("{p}.ffn_norm.gain"), vec![d]));
        out.push((format!("{p}.ffn_norm.bias"), vec![d]));
    }
    out.push(("head.weight".into(), vec![d, n_out]));
    out.push(("head.bias".into(), vec![n_out]));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    params: IndexMap<String, Tensor>,
}

impl ModelCheckpoint {
    /// Seeded initialization: weights and embeddings ~ N(0, init_std²),
    /// biases 0, norm gains 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::ones(&shape)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, config.init_std, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a checkpoint from explicit tensors, enforcing the layout.
    pub fn from_parts(config: ModelConfig, params: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        archive::check_layout(&params, &parameter_layout(&config))?;
        let layout = parameter_layout(&config);
        let mut ordered = IndexMap::with_capacity(layout.len());
        for (name, _) in layout {
            let t = params.get(&name).expect("layout checked").clone();
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor {name} has non-finite values")));
            }
            ordered.insert(name, t);
        }
        Ok(Self { config, params: ordered })
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces one parameter; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Logits for one sequence in inference mode, shaped per the head.
    ///
    /// PAD positions are excluded from attention.
    pub fn forward(&self, token_ids: &[usize]) -> Result<Tensor> {
        Ok(self.forward_with_stats(token_ids)?.0)
    }

    pub fn forward_with_stats(&self, token_ids: &[usize]) -> Result<(Tensor, AttentionStats)> {
        let mut tape = crate::tensor::Tape::new();
        let g = build_graph(self, &mut tape, token_ids, GraphMode::inference())?;
        let logits = tape.value(g.logits).clone().reshape(self.config.head.logits_shape())?;
        Ok((logits, g.stats))
    }

    /// Training loss and per-parameter gradients (canonical order).
    ///
    /// `dropout_seed = None` disables dropout.
    pub fn loss_and_grads(
        &self,
        token_ids: &[usize],
        target: &Target,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.config.head.check_target(target)?;
        let mut tape = crate::tensor::Tape::new();
        let mode = GraphMode {
            track_params: true,
            dropout_seed,
        };
        let g = build_graph(self, &mut tape, token_ids, mode)?;
        let loss = forward::head_loss(&mut tape, g.logits, &self.config.head, target)?;
        tape.backward(loss)?;
        let grads = g
            .params
            .iter()
            .zip(self.params.values())
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }

    /// Logits and the gradient of flat logit `output` with respect to the
    /// embedded input (token + position embedding), shape `[L, d]`.
    pub fn input_gradient(&self, token_ids: &[usize], output: usize) -> Result<(Tensor, Tensor)> {
        let n_out = self.config.head.n_outputs();
        if output >= n_out {
            return Err(Error::Contract(format!("output {output} outside {n_out} logits")));
        }
        let mut tape = crate::tensor::Tape::new();
        let mode = GraphMode {
            track_params: true,
            dropout_seed: None,
        };
        let g = build_graph(self, &mut tape, token_ids, mode)?;
        let flat = tape.reshape(g.logits, vec![n_out])?;
        let mut pick = vec![0.0; n_out];
        pick[output] = 1.0;
        let selector = tape.constant(Tensor::new(vec![n_out], pick)?);
        let picked = tape.mul(flat, selector)?;
        let score = tape.sum(picked);
        tape.backward(score)?;
        let (l, d) = (token_ids.len(), self.config.d_model);
        let grad = tape
            .take_grad(g.embedded)
            .unwrap_or_else(|| vec![0.0; l * d]);
        let logits = tape.value(g.logits).clone().reshape(self.config.head.logits_shape())?;
        Ok((logits, Tensor::new(vec![l, d], grad)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        archive::write(dir, CHECKPOINT_KIND, config, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let a = archive::read(dir)?;
        if a.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "{} holds a {} archive, not an encoder checkpoint",
                dir.display(),
                a.kind
            )));
        }
        let config: ModelConfig = serde_json::from_value(a.config)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        archive::check_layout(&a.tensors, &parameter_layout(&config))?;
        Self::from_parts(config, a.tensors)
    }
}
