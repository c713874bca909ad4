use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use longnote::attention::WindowConfig;
use longnote::data::synthetic::GeneratorSpec;
use longnote::data::{
    build_examples as build_encoded, build_vocab, group_histories, jsonl, read_examples, read_notes, write_examples,
    BuildOptions, EncodedExample, LabelTaxonomy, PatientSplit, Task, Vocab,
};
use longnote::ehr_ffn::{
    patient_dataset, read_encounters, separable_encounters, write_encounters, EhrFfn, EhrFfnConfig, PatientFeatures,
    TabularFeatureSpec,
};
use longnote::evaluation::{predict, EvalReport, PredictionSet};
use longnote::interpretability::{time_importance, CountMode, ImportanceOptions};
use longnote::model::{extend_context, HeadSpec, ModelCheckpoint, Target, CONTEXT_PRESETS};
use longnote::training::{predict_set, train as run_training, write_log};
use longnote::Error;
use serde_json::json;

use crate::config::{self, read_json, TrainOverrides};
use crate::manifest::ManifestBuilder;
use crate::{BaselineArgs, BuildArgs, EvaluateArgs, ExtendArgs, GenerateArgs, ImportanceArgs, TrainArgs};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn write_pretty(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn parse_task(s: &str) -> Result<Task> {
    Ok(s.parse::<Task>()?)
}

pub fn generate_data(a: GenerateArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("generate-data");
    let mut spec: GeneratorSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => GeneratorSpec::default(),
    };
    if let Some(n) = a.n_patients {
        spec.n_patients = n;
    }
    let corpus = spec.generate(a.seed)?;
    create_dir(&a.out)?;
    let out = |name: &str| a.out.join(name);
    longnote::data::write_notes(&out("notes.jsonl"), &corpus.notes)?;
    jsonl::write(&out("truth.jsonl"), &corpus.truths)?;
    jsonl::write(&out("signals.jsonl"), &corpus.signals)?;
    spec.taxonomy().save(&out("taxonomy.json"))?;
    write_pretty(&out("generator_spec.json"), &spec)?;
    for f in ["notes.jsonl", "truth.jsonl", "signals.jsonl", "taxonomy.json", "generator_spec.json"] {
        m.output(out(f));
    }
    if let Some(n) = a.tabular_patients {
        let tab = TabularFeatureSpec::default();
        let encs = separable_encounters(&tab, n, 4, a.seed)?;
        write_encounters(&out("encounters.jsonl"), &encs)?;
        tab.save(&out("feature_spec.json"))?;
        m.output(out("encounters.jsonl")).output(out("feature_spec.json"));
    }
    if let Some(p) = &a.spec {
        m.input(p)?;
    }
    m.config(serde_json::to_value(&spec)?).seed(a.seed).write(&a.out)
}

pub fn build_examples(a: BuildArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("build-examples");
    if !CONTEXT_PRESETS.contains(&a.max_tokens) {
        eprintln!(
            "note: --max-tokens {} is not one of the presets {:?}",
            a.max_tokens, CONTEXT_PRESETS
        );
    }
    let notes = read_notes(&a.notes)?;
    let taxonomy = a.taxonomy.as_deref().map(LabelTaxonomy::load).transpose()?;
    let histories = group_histories(notes);
    let split = PatientSplit::new(
        histories.iter().map(|h| h.patient_id.as_str()),
        a.train_frac,
        a.valid_frac,
        a.split_seed,
    )?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => build_vocab(
            histories.iter().filter(|h| split.train.contains(&h.patient_id)),
            a.min_count,
        ),
    };
    let examples = build_encoded(
        &histories,
        &vocab,
        taxonomy.as_ref(),
        BuildOptions {
            max_tokens: a.max_tokens,
            final_only: a.final_only,
        },
    )?;
    create_dir(&a.out)?;
    let subset = |ids: &BTreeSet<String>| -> Vec<EncodedExample> {
        examples.iter().filter(|e| ids.contains(&e.patient_id)).cloned().collect()
    };
    let parts = [("train", &split.train), ("valid", &split.valid), ("test", &split.test)];
    let mut counts = serde_json::Map::new();
    for (name, ids) in parts {
        let part = subset(ids);
        counts.insert(name.into(), json!(part.len()));
        let path = a.out.join(format!("{name}.jsonl"));
        write_examples(&path, &part)?;
        m.output(path);
    }
    vocab.save(&a.out.join("vocab.json"))?;
    write_pretty(
        &a.out.join("split.json"),
        &json!({"train": split.train, "valid": split.valid, "test": split.test}),
    )?;
    m.output(a.out.join("vocab.json")).output(a.out.join("split.json"));
    m.input(&a.notes)?;
    for p in [&a.taxonomy, &a.vocab].into_iter().flatten() {
        m.input(p)?;
    }
    m.config(json!({
        "max_tokens": a.max_tokens,
        "final_only": a.final_only,
        "min_count": a.min_count,
        "train_frac": a.train_frac,
        "valid_frac": a.valid_frac,
        "vocab_size": vocab.len(),
        "examples": counts,
    }))
    .seed(a.split_seed)
    .write(&a.out)
}

fn labeled(examples: &[EncodedExample], task: Task) -> Result<Vec<(Vec<usize>, Target)>> {
    Ok(examples
        .iter()
        .map(|e| Ok((e.tokens.clone(), e.target(task)?)))
        .collect::<Result<Vec<_>, Error>>()?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("train");
    let task = parse_task(&a.task)?;
    let tc = config::train_config(
        a.train_config.as_deref(),
        TrainOverrides {
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: a.seed,
        },
    )?;
    let model = match &a.init_checkpoint {
        Some(p) => ModelCheckpoint::load(p)?,
        None => ModelCheckpoint::init(config::model_config(
            a.model_config.as_deref(),
            a.vocab.as_deref(),
            a.taxonomy.as_deref(),
            task,
        )?)?,
    };
    let train_set = labeled(&read_examples(&a.examples)?, task)?;
    let valid_set = labeled(&read_examples(&a.valid_examples)?, task)?;
    let outcome = run_training(&model, &train_set, &valid_set, &tc)?;
    create_dir(&a.out)?;
    let ckpt_dir = a.out.join("checkpoint");
    outcome.best.save(&ckpt_dir)?;
    write_log(&a.out.join("train_log.csv"), &outcome.log)?;
    write_pretty(
        &a.out.join("selection.json"),
        &json!({
            "metric": outcome.metric_name,
            "best_epoch": outcome.best_epoch,
            "best_metric": outcome.best_metric,
        }),
    )?;
    m.output(&ckpt_dir)
        .output(a.out.join("train_log.csv"))
        .output(a.out.join("selection.json"));
    m.input(&a.examples)?.input(&a.valid_examples)?;
    for p in [&a.init_checkpoint, &a.model_config, &a.train_config, &a.vocab, &a.taxonomy]
        .into_iter()
        .flatten()
    {
        m.input(p)?;
    }
    m.config(json!({"task": a.task, "model": outcome.best.config, "train": tc}))
        .seed(tc.seed)
        .write(&a.out)?;
    eprintln!(
        "best epoch {} with {} = {:.4}",
        outcome.best_epoch, outcome.metric_name, outcome.best_metric
    );
    Ok(())
}

pub fn extend(a: ExtendArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("extend");
    let src = ModelCheckpoint::load(&a.checkpoint)?;
    let window = WindowConfig::new(a.window, a.global.clone());
    let ext = extend_context(&src, a.new_max_positions, window)?;
    ext.save(&a.out)?;
    m.input(&a.checkpoint)?;
    m.output(&a.out)
        .config(json!({"new_max_positions": a.new_max_positions, "model": ext.config}))
        .write(&a.out)
}

fn unit_names(taxonomy: Option<&Path>, task: Task) -> Result<Option<Vec<String>>> {
    match (taxonomy, task) {
        (Some(p), Task::Diagnosis) => Ok(Some(
            LabelTaxonomy::load(p)?.class_names().iter().map(|s| s.to_string()).collect(),
        )),
        _ => Ok(None),
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("evaluate");
    let task = parse_task(&a.task)?;
    let set = match (&a.predictions, &a.checkpoint, &a.examples) {
        (Some(p), _, _) => PredictionSet::load(p)?,
        (None, Some(c), Some(e)) => {
            let model = ModelCheckpoint::load(c)?;
            let examples = read_examples(e)?;
            let inputs = examples
                .iter()
                .map(|x| Ok((x.tokens.as_slice(), x.target(task)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            predict(&model, &inputs)?
        }
        _ => return Err(Error::Config("give --predictions, or --checkpoint with --examples".into()).into()),
    };
    let names = unit_names(a.taxonomy.as_deref(), task)?;
    let report = EvalReport::from_predictions(&set, names.as_deref())?;
    create_dir(&a.out)?;
    write_text(&a.out.join("report.json"), &report.to_json())?;
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    m.output(a.out.join("report.json")).output(a.out.join("report.csv"));
    if a.predictions.is_none() {
        set.save(&a.out.join("predictions.json"))?;
        m.output(a.out.join("predictions.json"));
    }
    for p in [&a.predictions, &a.checkpoint, &a.examples, &a.taxonomy].into_iter().flatten() {
        m.input(p)?;
    }
    m.config(json!({"task": a.task, "threshold": set.threshold})).write(&a.out)?;
    eprintln!(
        "{} examples, accuracy {:.4}, {} {:.4}",
        report.n_examples, report.accuracy, report.primary_metric, report.primary_value
    );
    Ok(())
}

pub fn analyze_importance(a: ImportanceArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("analyze-importance");
    let task = parse_task(&a.task)?;
    let model = ModelCheckpoint::load(&a.checkpoint)?;
    let examples = read_examples(&a.examples)?;
    let opts = ImportanceOptions {
        task,
        n_top: a.n_top,
        threshold: a.threshold,
        count_mode: if a.per_note { CountMode::PerNote } else { CountMode::PerToken },
        model_id: a
            .checkpoint
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into()),
    };
    let ti = time_importance(&model, &examples, &opts)?;
    create_dir(&a.out)?;
    ti.write_csv(&a.out.join("importance.csv"))?;
    let stamp = (!a.no_timestamp).then(|| chrono::Local::now().to_rfc3339());
    ti.write_svg(&a.out.join("importance.svg"), stamp.as_deref())?;
    write_pretty(&a.out.join("importance.json"), &ti)?;
    if ti.n_samples < a.n_top {
        eprintln!("note: only {} correct predictions available (asked for {})", ti.n_samples, a.n_top);
    }
    for f in ["importance.csv", "importance.svg", "importance.json"] {
        m.output(a.out.join(f));
    }
    m.input(&a.checkpoint)?.input(&a.examples)?;
    m.config(json!({
        "task": a.task,
        "n_top": a.n_top,
        "threshold": a.threshold,
        "count_mode": opts.count_mode,
    }))
    .write(&a.out)
}

/// Head implied by the targets present in the data.
fn infer_head(data: &[PatientFeatures]) -> Result<HeadSpec> {
    let first = data
        .first()
        .ok_or_else(|| Error::Config("no patient has a labeled final encounter and a prior history".into()))?;
    let head = match &first.target {
        Target::Class(_) => HeadSpec::SingleLabel {
            n_classes: data
                .iter()
                .map(|p| match &p.target {
                    Target::Class(c) => c + 1,
                    _ => 0,
                })
                .max()
                .unwrap_or(1)
                .max(2),
        },
        Target::Flag(_) => HeadSpec::Binary,
        Target::LabelFlags(fs) => HeadSpec::MultiLabelBinary { n_labels: fs.len() },
        Target::LabelClasses(cs) => HeadSpec::MultiLabelMulticlass {
            n_labels: cs.len(),
            n_classes: data
                .iter()
                .flat_map(|p| match &p.target {
                    Target::LabelClasses(cs) => cs.clone(),
                    _ => Vec::new(),
                })
                .max()
                .unwrap_or(0)
                .max(1)
                + 1,
        },
    };
    for p in data {
        head.check_target(&p.target)
            .with_context(|| format!("patient {}", p.patient_id))?;
    }
    Ok(head)
}

pub fn baseline(a: BaselineArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("baseline");
    let spec = match &a.spec {
        Some(p) => TabularFeatureSpec::load(p)?,
        None => TabularFeatureSpec::default(),
    };
    let tc = config::train_config(
        a.train_config.as_deref(),
        TrainOverrides {
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            batch_size: None,
            seed: a.seed,
        },
    )?;
    let encounters = read_encounters(&a.encounters)?;
    let data = patient_dataset(&encounters, &spec)?;
    let head = infer_head(&data)?;
    let split = PatientSplit::new(data.iter().map(|p| p.patient_id.as_str()), 0.6, 0.2, a.split_seed)?;
    let pick = |ids: &BTreeSet<String>| -> Vec<(Vec<f64>, Target)> {
        data.iter()
            .filter(|p| ids.contains(&p.patient_id))
            .map(|p| (p.features.clone(), p.target.clone()))
            .collect()
    };
    let (tr, va, te) = (pick(&split.train), pick(&split.valid), pick(&split.test));
    let mut cfg = EhrFfnConfig::new(spec.dim(), head);
    cfg.hidden = a.hidden.clone();
    cfg.seed = tc.seed;
    let model = EhrFfn::init(cfg)?;
    let outcome = run_training(&model, &tr, &va, &tc)?;
    let eval_set = if te.is_empty() { &va } else { &te };
    let report = EvalReport::from_predictions(&predict_set(&outcome.best, eval_set)?, None)?;
    create_dir(&a.out)?;
    outcome.best.save(&a.out.join("checkpoint"))?;
    write_log(&a.out.join("train_log.csv"), &outcome.log)?;
    write_text(&a.out.join("report.json"), &report.to_json())?;
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    spec.save(&a.out.join("feature_spec.json"))?;
    for f in ["checkpoint", "train_log.csv", "report.json", "report.csv", "feature_spec.json"] {
        m.output(a.out.join(f));
    }
    m.input(&a.encounters)?;
    for p in [&a.spec, &a.train_config].into_iter().flatten() {
        m.input(p)?;
    }
    m.config(json!({
        "model": outcome.best.config,
        "train": tc,
        "n_parameters": outcome.best.n_parameters(),
        "input_dim": spec.dim(),
        "patients": {"train": tr.len(), "valid": va.len(), "test": te.len()},
    }))
    .seed(tc.seed)
    .write(&a.out)?;
    eprintln!(
        "{} parameters; test accuracy {:.4}, {} {:.4}",
        outcome.best.n_parameters(),
        report.accuracy,
        report.primary_metric,
        report.primary_value
    );
    Ok(())
}
