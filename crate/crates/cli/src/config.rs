use std::path::Path;

use longnote::data::{LabelTaxonomy, Task, Vocab};
use longnote::model::{HeadSpec, ModelConfig};
use longnote::training::TrainConfig;
use longnote::Error;
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn model_defaults() -> Map<String, Value> {
    let Value::Object(m) = json!({
        "max_positions": 512,
        "d_model": 16,
        "n_layers": 1,
        "n_heads": 2,
        "ffn_dim": 32,
        "attention_mode": "dense",
        "dropout_p": 0.1,
        "seed": 0,
        "init_std": 0.02
    }) else {
        unreachable!()
    };
    m
}

/// Model config from defaults, then the file, then values derived from the
/// vocabulary and task when the file leaves them out.
pub fn model_config(
    file: Option<&Path>,
    vocab: Option<&Path>,
    taxonomy: Option<&Path>,
    task: Task,
) -> Result<ModelConfig, Error> {
    let mut merged = model_defaults();
    if let Some(path) = file {
        match read_json::<Value>(path)? {
            Value::Object(m) => merged.extend(m),
            _ => {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "model config must be a JSON object".into(),
                })
            }
        }
    }
    if !merged.contains_key("vocab_size") {
        let path = vocab.ok_or_else(|| Error::Config("model config lacks vocab_size and no --vocab was given".into()))?;
        merged.insert("vocab_size".into(), json!(Vocab::load(path)?.len()));
    }
    if !merged.contains_key("head") {
        let head = match task {
            Task::Mortality => HeadSpec::Binary,
            Task::Diagnosis => {
                let path = taxonomy
                    .ok_or_else(|| Error::Config("model config lacks head and no --taxonomy was given".into()))?;
                HeadSpec::SingleLabel {
                    n_classes: LabelTaxonomy::load(path)?.n_classes(),
                }
            }
            Task::Labels => return Err(Error::Config("the labels task needs an explicit head in the model config".into())),
        };
        merged.insert("head".into(), serde_json::to_value(head).expect("head serializes"));
    }
    let cfg: ModelConfig = serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::Config(format!("model config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

pub fn train_config(file: Option<&Path>, o: TrainOverrides) -> Result<TrainConfig, Error> {
    let mut cfg: TrainConfig = match file {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
