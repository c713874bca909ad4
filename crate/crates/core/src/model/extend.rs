use indexmap::IndexMap;

use crate::attention::{AttentionMode, WindowConfig};
use crate::error::{Error, Result};
use crate::model::{ModelCheckpoint, ModelConfig};
use crate::tensor::Tensor;

/// Builds a windowed checkpoint with `new_max_positions` positions from `src`.
///
/// * position row `p` is a copy of source row `p mod old_max`;
/// * both projection paths start from the source projections: a dense
///   source's query/key/value are copied into the global path as well, a
///   windowed source keeps each path's own weights;
/// * every other tensor is copied unchanged.
pub fn extend_context(src: &ModelCheckpoint, new_max_positions: usize, window: WindowConfig) -> Result<ModelCheckpoint> {
    let old_max = src.config.max_positions;
    if new_max_positions < old_max {
        return Err(Error::Contract(format!(
            "cannot shrink context from {old_max} to {new_max_positions} positions"
        )));
    }
    let config = ModelConfig {
        max_positions: new_max_positions,
        attention_mode: AttentionMode::Windowed(window),
        ..src.config.clone()
    };
    config.validate()?;

    let d = src.config.d_model;
    let mut params: IndexMap<String, Tensor> = IndexMap::new();
    for (name, t) in src.params() {
        if name == "embeddings.position" {
            let rows: Vec<f64> = (0..new_max_positions)
                .flat_map(|p| t.row(p % old_max).iter().copied())
                .collect();
            params.insert(name.clone(), Tensor::new(vec![new_max_positions, d], rows)?);
        } else {
            params.insert(name.clone(), t.clone());
        }
    }
    if !src.config.attention_mode.is_windowed() {
        for i in 0..src.config.n_layers {
            for proj in ["query", "key", "value"] {
                for part in ["weight", "bias"] {
                    let from = format!("layers.{i}.attention.{proj}.{part}");
                    let to = format!("layers.{i}.attention.global_{proj}.{part}");
                    let t = params[&from].clone();
                    params.insert(to, t);
                }
            }
        }
    }
    ModelCheckpoint::from_parts(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::HeadSpec;

    #[test]
    fn position_rows_tile() {
        let mut cfg = tiny_config(AttentionMode::Dense, HeadSpec::Binary);
        cfg.max_positions = 4;
        let src = ModelCheckpoint::init(cfg).unwrap();
        let ext = extend_context(&src, 10, WindowConfig::new(2, vec![0])).unwrap();
        let old = src.param("embeddings.position").unwrap();
        let new = ext.param("embeddings.position").unwrap();
        let expect = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
        for (p, &q) in expect.iter().enumerate() {
            assert_eq!(new.row(p), old.row(q));
        }
    }

    #[test]
    fn same_length_changes_only_mode_and_adds_global_copies() {
        let src = ModelCheckpoint::init(tiny_config(AttentionMode::Dense, HeadSpec::Binary)).unwrap();
        let ext = extend_context(&src, 8, WindowConfig::new(3, vec![0])).unwrap();
        assert_eq!(ext.config.max_positions, src.config.max_positions);
        assert!(ext.config.attention_mode.is_windowed());
        for (name, t) in src.params() {
            assert_eq!(ext.param(name).unwrap(), t, "{name}");
        }
        assert_eq!(
            ext.param("layers.1.attention.global_value.weight"),
            src.param("layers.1.attention.value.weight")
        );
    }

    #[test]
    fn windowed_source_keeps_both_paths() {
        let src = ModelCheckpoint::init(tiny_config(
            AttentionMode::Windowed(WindowConfig::new(1, vec![0])),
            HeadSpec::Binary,
        ))
        .unwrap();
        let ext = extend_context(&src, 16, WindowConfig::new(1, vec![0])).unwrap();
        for (name, t) in src.params().iter().filter(|(n, _)| n.contains("attention.")) {
            assert_eq!(ext.param(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn shrinking_is_contract_error() {
        let src = ModelCheckpoint::init(tiny_config(AttentionMode::Dense, HeadSpec::Binary)).unwrap();
        assert!(matches!(
            extend_context(&src, 4, WindowConfig::new(1, vec![0])),
            Err(Error::Contract(_))
        ));
    }
}
