//! Tabular baseline: per-encounter one-hot features, summed per patient,
//! classified by a ReLU feed-forward network.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::data::jsonl;
use crate::error::{Error, Result};
use crate::model::{head_loss, HeadSpec, Target};
use crate::tensor::{Tape, Tensor};
use crate::training::Trainable;

pub const CHECKPOINT_KIND: &str = "ehr_ffn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    /// One slot per code; the last slot collects unknown codes.
    Categorical { dim: usize },
    /// Single 0/1 slot fed by the emergency flag.
    Flag,
    /// Bucketed length of stay in days. `bounds` are inclusive upper edges.
    LengthOfStay { bounds: Vec<u32> },
    /// Bucketed age in years. `bounds` are inclusive upper edges.
    Age { bounds: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub name: String,
    #[serde(flatten)]
    pub kind: BlockKind,
}

impl FeatureBlock {
    pub fn dim(&self) -> usize {
        match &self.kind {
            BlockKind::Categorical { dim } => *dim,
            BlockKind::Flag => 1,
            BlockKind::LengthOfStay { bounds } | BlockKind::Age { bounds } => bounds.len() + 1,
        }
    }
}

fn categorical(name: &str, dim: usize) -> FeatureBlock {
    FeatureBlock {
        name: name.into(),
        kind: BlockKind::Categorical { dim },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularFeatureSpec {
    pub blocks: Vec<FeatureBlock>,
}

impl Default for TabularFeatureSpec {
    fn default() -> Self {
        Self {
            blocks: vec![
                categorical("diagnosis", 1699),
                categorical("procedure", 127),
                categorical("prescription", 1271),
                categorical("prescription_bnf", 73),
                FeatureBlock {
                    name: "emergency".into(),
                    kind: BlockKind::Flag,
                },
                FeatureBlock {
                    name: "length_of_stay".into(),
                    kind: BlockKind::LengthOfStay {
                        bounds: vec![0, 3, 7, 30],
                    },
                },
                FeatureBlock {
                    name: "age_group".into(),
                    kind: BlockKind::Age {
                        bounds: vec![17, 40, 60, 80],
                    },
                },
                categorical("ward", 4),
                categorical("ward_sub_care", 6),
            ],
        }
    }
}

impl TabularFeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("feature spec has no blocks".into()));
        }
        let mut names = BTreeSet::new();
        for b in &self.blocks {
            if !names.insert(b.name.as_str()) {
                return Err(Error::Config(format!("duplicate feature block {:?}", b.name)));
            }
            match &b.kind {
                BlockKind::Categorical { dim: 0 } => {
                    return Err(Error::Config(format!("block {:?} has dimension 0", b.name)))
                }
                BlockKind::LengthOfStay { bounds } | BlockKind::Age { bounds } => {
                    if bounds.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Config(format!("block {:?} bounds must increase strictly", b.name)));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(FeatureBlock::dim).sum()
    }

    /// Start index of every block, in order.
    pub fn offsets(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, b| {
                let o = *acc;
                *acc += b.dim();
                Some(o)
            })
            .collect()
    }

    pub fn offset_of(&self, name: &str) -> Option<usize> {
        let i = self.blocks.iter().position(|b| b.name == name)?;
        Some(self.offsets()[i])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn bucket(bounds: &[u32], value: u32) -> usize {
    bounds.iter().filter(|&&b| b < value).count()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncounterRecord {
    pub patient_id: String,
    /// Code indices per categorical block name.
    #[serde(default)]
    pub codes: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub emergency: bool,
    #[serde(default)]
    pub length_of_stay: u32,
    #[serde(default)]
    pub age: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Target>,
}

/// One-hot encoding of a single encounter. Codes at or past a block's last
/// slot land in that slot.
pub fn encode_encounter(rec: &EncounterRecord, spec: &TabularFeatureSpec) -> Result<Vec<f64>> {
    for name in rec.codes.keys() {
        if !spec
            .blocks
            .iter()
            .any(|b| &b.name == name && matches!(b.kind, BlockKind::Categorical { .. }))
        {
            return Err(Error::Contract(format!("encounter codes name unknown block {name:?}")));
        }
    }
    let mut v = vec![0.0; spec.dim()];
    for (b, off) in spec.blocks.iter().zip(spec.offsets()) {
        match &b.kind {
            BlockKind::Categorical { dim } => {
                for &c in rec.codes.get(&b.name).into_iter().flatten() {
                    v[off + c.min(dim - 1)] = 1.0;
                }
            }
            BlockKind::Flag => v[off] = rec.emergency as u8 as f64,
            BlockKind::LengthOfStay { bounds } => v[off + bucket(bounds, rec.length_of_stay)] = 1.0,
            BlockKind::Age { bounds } => v[off + bucket(bounds, rec.age)] = 1.0,
        }
    }
    Ok(v)
}

/// Elementwise sum of encounter vectors.
pub fn aggregate_patient(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Contract("no encounters to aggregate".into()))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != out.len() {
            return Err(Error::Contract(format!(
                "feature vectors of length {} and {}",
                out.len(),
                v.len()
            )));
        }
        out.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientFeatures {
    pub patient_id: String,
    pub features: Vec<f64>,
    pub target: Target,
}

/// Per patient (sorted by id): features summed over every encounter but the
/// last, target taken from the last one. Patients with fewer than two
/// encounters or an unlabeled final encounter are skipped.
pub fn patient_dataset(encounters: &[EncounterRecord], spec: &TabularFeatureSpec) -> Result<Vec<PatientFeatures>> {
    let mut by_patient: BTreeMap<&str, Vec<&EncounterRecord>> = BTreeMap::new();
    for e in encounters {
        by_patient.entry(&e.patient_id).or_default().push(e);
    }
    let mut out = Vec::new();
    for (pid, encs) in by_patient {
        let Some((last, prior)) = encs.split_last() else { continue };
        let Some(target) = &last.label else { continue };
        if prior.is_empty() {
            continue;
        }
        let vs = prior.iter().map(|e| encode_encounter(e, spec)).collect::<Result<Vec<_>>>()?;
        out.push(PatientFeatures {
            patient_id: pid.to_string(),
            features: aggregate_patient(&vs)?,
            target: target.clone(),
        });
    }
    Ok(out)
}

pub fn read_encounters(path: &Path) -> Result<Vec<EncounterRecord>> {
    jsonl::read(path)
}

pub fn write_encounters(path: &Path, encounters: &[EncounterRecord]) -> Result<()> {
    jsonl::write(path, encounters)
}

/// Encounters for a task where the class equals the diagnosis code that
/// appears in every prior encounter; other codes are noise.
pub fn separable_encounters(
    spec: &TabularFeatureSpec,
    n_patients: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<EncounterRecord>> {
    let (block, dim) = spec
        .blocks
        .iter()
        .find_map(|b| match b.kind {
            BlockKind::Categorical { dim } => Some((b.name.clone(), dim)),
            _ => None,
        })
        .ok_or_else(|| Error::Config("spec has no categorical block".into()))?;
    if n_classes < 2 || dim < 2 * n_classes {
        return Err(Error::Config(format!(
            "need 2 <= n_classes and 2 * n_classes <= {dim} codes in block {block:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in 0..n_patients {
        let pid = format!("E{p:05}");
        let class = rng.gen_range(0..n_classes);
        let n_prior = rng.gen_range(1..=3);
        for _ in 0..n_prior {
            let mut codes = vec![class];
            for _ in 0..rng.gen_range(0..4) {
                codes.push(rng.gen_range(n_classes..dim));
            }
            out.push(EncounterRecord {
                patient_id: pid.clone(),
                codes: BTreeMap::from([(block.clone(), codes)]),
                emergency: rng.gen_bool(0.3),
                length_of_stay: rng.gen_range(0..40),
                age: rng.gen_range(1..95),
                label: None,
            });
        }
        out.push(EncounterRecord {
            patient_id: pid,
            label: Some(Target::Class(class)),
            ..Default::default()
        });
    }
    Ok(out)
}

fn default_hidden() -> Vec<usize> {
    vec![1024, 512, 256]
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrFfnConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub head: HeadSpec,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
}

impl EhrFfnConfig {
    pub fn new(input_dim: usize, head: HeadSpec) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            head,
            dropout_p: default_dropout(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("input and hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("layer{i}.weight"), vec![fan_in, h]));
            out.push((format!("layer{i}.bias"), vec![h]));
            fan_in = h;
        }
        let n_out = self.head.n_outputs();
        out.push(("head.weight".into(), vec![fan_in, n_out]));
        out.push(("head.bias".into(), vec![n_out]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EhrFfn {
    pub config: EhrFfnConfig,
    params: IndexMap<String, Tensor>,
}

impl EhrFfn {
    /// He-normal weights, zero biases.
    pub fn init(config: EhrFfnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, (2.0 / shape[0] as f64).sqrt(), &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} where {:?} is required",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn graph(&self, tape: &mut Tape, features: &[f64], dropout_seed: Option<u64>) -> Result<(Vec<crate::Var>, crate::Var)> {
        if features.len() != self.config.input_dim {
            return Err(Error::Contract(format!(
                "{} features where the model expects {}",
                features.len(),
                self.config.input_dim
            )));
        }
        let vars: Vec<_> = self.params.values().map(|t| tape.param(t.clone())).collect();
        let mut x = tape.constant(Tensor::new(vec![1, features.len()], features.to_vec())?);
        let n_hidden = self.config.hidden.len();
        for i in 0..n_hidden {
            x = tape.linear(x, vars[2 * i], vars[2 * i + 1])?;
            x = tape.relu(x);
            if let Some(seed) = dropout_seed {
                let site = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                x = tape.dropout(x, self.config.dropout_p, seed ^ site)?;
            }
        }
        let logits = tape.linear(x, vars[2 * n_hidden], vars[2 * n_hidden + 1])?;
        Ok((vars, logits))
    }

    /// Flat logits, inference mode.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, logits) = self.graph(&mut tape, features, None)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        archive::write(dir, CHECKPOINT_KIND, config, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let a = archive::read(dir)?;
        if a.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "{} holds a {} archive, not an {CHECKPOINT_KIND} checkpoint",
                dir.display(),
                a.kind
            )));
        }
        let config: EhrFfnConfig =
            serde_json::from_value(a.config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let layout = config.layout();
        archive::check_layout(&a.tensors, &layout)?;
        let params = layout
            .into_iter()
            .map(|(name, _)| {
                let t = a.tensors[&name].clone();
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }
}

impl Trainable for EhrFfn {
    type Input = Vec<f64>;

    fn head(&self) -> &HeadSpec {
        &self.config.head
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.values_mut().collect()
    }

    fn loss_and_grads(&self, input: &Vec<f64>, target: &Target, dropout_seed: Option<u64>) -> Result<(f64, Vec<Vec<f64>>)> {
        self.config.head.check_target(target)?;
        let mut tape = Tape::new();
        let (vars, logits) = self.graph(&mut tape, input, dropout_seed)?;
        let loss = head_loss(&mut tape, logits, &self.config.head, target)?;
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.params.values())
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }

    fn logits(&self, input: &Vec<f64>) -> Result<Vec<f64>> {
        self.forward(input)
    }
}
