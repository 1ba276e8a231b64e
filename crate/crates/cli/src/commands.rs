//! Subcommand implementations.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dspert_core::analysis::{
    collect_prelogits, pca_project, prelogit_report, PrelogitSample, ReportOptions,
};
use dspert_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dspert_core::data::save_corpus;
use dspert_core::train::{encode_split, train, EpochRecord, Example, TrainOutcome};
use dspert_core::{Model, Prf, RunConfig, SplitMix64, Vocab};
use log::info;
use serde::{Deserialize, Serialize};

use crate::ablate;
use crate::args::{AnalyzeArgs, Command, EvalArgs, GenSynthArgs, PredictArgs, TrainArgs};
use crate::output::{
    split_metrics, write_breakdowns, write_csv, write_json, write_jsonl, SplitMetrics,
};
use crate::splits::{load_config, load_splits, read_corpus, synthetic_splits, Splits};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::GenSynth(a) => gen_synth_cmd(a),
    }
}

/// A finished run with its encoded evaluation splits.
pub struct Trained {
    pub model: Model,
    pub vocab: Vocab,
    pub outcome: TrainOutcome,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

/// Builds the vocabulary from the training split, initialises the model
/// from `cfg.seed` and trains it.
pub fn train_model(cfg: &RunConfig, splits: &Splits) -> Result<Trained> {
    cfg.check()?;
    let vocab = Vocab::build(&splits.train);
    let train_set = encode_split(&vocab, &splits.train).context("encoding train split")?;
    let dev = encode_split(&vocab, &splits.dev).context("encoding dev split")?;
    let test = encode_split(&vocab, &splits.test).context("encoding test split")?;
    let mut model = Model::new(cfg.model_config(vocab.len(), vocab.num_types()), cfg.seed)?;
    info!(
        "training {} ({} parameters) on {} sentences, seed {}",
        model.config.head,
        model.store.scalar_count(),
        train_set.len(),
        cfg.seed
    );
    let outcome = train(&mut model, &train_set, &dev, &cfg.train_config())?;
    Ok(Trained {
        model,
        vocab,
        outcome,
        dev,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub parameters: usize,
    pub best_epoch: Option<usize>,
    pub dev: SplitMetrics,
    pub test: Option<SplitMetrics>,
}

/// Everything `train` writes: `history.jsonl`, `metrics.json`, `best.ckpt`,
/// `config.toml` and the per-split breakdown CSVs.
pub fn write_train_outputs(dir: &Path, cfg: &RunConfig, t: &Trained) -> Result<TrainMetrics> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let history: &[EpochRecord] = &t.outcome.history;
    write_jsonl(&dir.join("history.jsonl"), history)?;
    let dev = split_metrics(&t.model, &t.dev)?;
    write_breakdowns(dir, "dev_", &dev)?;
    let test = if t.test.is_empty() {
        None
    } else {
        let m = split_metrics(&t.model, &t.test)?;
        write_breakdowns(dir, "test_", &m)?;
        Some(m)
    };
    let metrics = TrainMetrics {
        seed: cfg.seed,
        parameters: t.model.store.scalar_count(),
        best_epoch: t.outcome.best_epoch,
        dev,
        test,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let ck = Checkpoint {
        model: t.model.clone(),
        vocab: t.vocab.clone(),
        run: cfg.clone(),
        rng: SplitMix64::at(cfg.train_config().seed, t.outcome.rng_position),
    };
    save_checkpoint(&dir.join("best.ckpt"), &ck)?;
    Ok(metrics)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let splits = load_splits(&cfg, a.data.as_deref(), a.format)?;
    let trained = train_model(&cfg, &splits)?;
    let m = write_train_outputs(&a.out, &cfg, &trained)?;
    info!(
        "best dev F1 {:.4} at epoch {:?}; outputs in {}",
        m.dev.micro.f1,
        m.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn load_split(
    ck: &Checkpoint,
    data: &Path,
    format: Option<dspert_core::Format>,
) -> Result<Vec<Example>> {
    let sentences = read_corpus(data, format)?;
    Ok(encode_split(&ck.vocab, &sentences)?)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let split = load_split(&ck, &a.data, a.format)?;
    let m = split_metrics(&ck.model, &split)?;
    match &a.out {
        Some(dir) => {
            write_json(&dir.join("metrics.json"), &m)?;
            write_breakdowns(dir, "", &m)?;
        }
        None => writeln!(
            std::io::stdout().lock(),
            "{}",
            serde_json::to_string_pretty(&m)?
        )?,
    }
    let Prf {
        precision,
        recall,
        f1,
        ..
    } = m.micro;
    info!("P {precision:.4} R {recall:.4} F1 {f1:.4}");
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tokens: Vec<String>,
    pub entities: Vec<PredictedEntity>,
}

pub fn predict_records(ck: &Checkpoint, tokens: &[Vec<String>]) -> Result<Vec<PredictionRecord>> {
    tokens
        .iter()
        .map(|toks| {
            let entities = ck
                .model
                .predict_entities(&ck.vocab.encode(toks))?
                .into_iter()
                .map(|p| PredictedEntity {
                    start: p.start,
                    end: p.end,
                    label: ck.vocab.type_name(p.type_index).unwrap_or("?").to_string(),
                    score: p.probs[p.type_index],
                })
                .collect();
            Ok(PredictionRecord {
                tokens: toks.clone(),
                entities,
            })
        })
        .collect()
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let sentences = read_corpus(&a.data, a.format)?;
    let tokens: Vec<_> = sentences.into_iter().map(|s| s.tokens).collect();
    let records = predict_records(&ck, &tokens)?;
    match &a.out {
        Some(path) => write_jsonl(path, &records)?,
        None => {
            let mut out = std::io::stdout().lock();
            for r in &records {
                writeln!(out, "{}", serde_json::to_string(r)?)?;
            }
        }
    }
    Ok(())
}

/// Number of PCA components written by `analyze`.
pub const PCA_COMPONENTS: usize = 2;

/// Entity pre-logits plus at most as many non-entity ones, drawn without
/// replacement with `seed`.
pub fn pca_sample(samples: &[PrelogitSample], seed: u64) -> Vec<&PrelogitSample> {
    let (mut entities, mut negatives): (Vec<_>, Vec<_>) =
        samples.iter().partition(|s| s.label != 0);
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut negatives);
    negatives.truncate(entities.len());
    negatives.sort_by_key(|s| (s.sentence, s.start, s.end));
    entities.extend(negatives);
    entities
}

/// Rows of the output weight: one template per class, non-entity first.
pub fn templates(model: &Model) -> Result<Vec<Vec<f64>>> {
    let Some(head) = &model.classifier else {
        bail!(
            "head `{}` has no classifier templates to analyse",
            model.config.head
        );
    };
    let w = model.store.value(head.w);
    Ok((0..w.rows()).map(|r| w.row(r).to_vec()).collect())
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let templates = templates(&ck.model)?;
    let split = load_split(&ck, &a.data, a.format)?;
    let samples = collect_prelogits(&ck.model, &split)?;
    let opts = ReportOptions {
        negative_ratio: a.negatives,
        seed: a.seed,
        ..ReportOptions::default()
    };
    let report = prelogit_report(&samples, &templates, opts)?;
    write_json(&a.out.join("prelogit_report.json"), &report)?;

    let chosen = pca_sample(&samples, a.seed);
    let vectors: Vec<Vec<f64>> = chosen.iter().map(|s| s.vector.clone()).collect();
    let pca = pca_project(&vectors, PCA_COMPONENTS)?;
    write_json(&a.out.join("pca.json"), &pca)?;
    let label = |i: usize| ck.vocab.type_name(i).unwrap_or("?").to_string();
    let mut header = vec!["sentence", "start", "end", "label"];
    let pc_names: Vec<String> = (1..=pca.points.first().map_or(0, Vec::len))
        .map(|i| format!("pc{i}"))
        .collect();
    header.extend(pc_names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = chosen
        .iter()
        .zip(&pca.points)
        .map(|(s, p)| {
            let mut row = vec![
                s.sentence.to_string(),
                s.start.to_string(),
                s.end.to_string(),
                label(s.label),
            ];
            row.extend(p.iter().map(f64::to_string));
            row
        })
        .collect();
    write_csv(&a.out.join("pca.csv"), &header, &rows)?;
    let d = vectors.first().map_or(0, Vec::len);
    let z_names: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
    let mut header = vec!["sentence", "start", "end", "label"];
    header.extend(z_names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = chosen
        .iter()
        .map(|s| {
            let mut row = vec![
                s.sentence.to_string(),
                s.start.to_string(),
                s.end.to_string(),
                label(s.label),
            ];
            row.extend(s.vector.iter().map(f64::to_string));
            row
        })
        .collect();
    write_csv(&a.out.join("prelogits.csv"), &header, &rows)?;
    info!(
        "{} entities, {} sampled negatives; PCA on {} vectors",
        report.entities,
        report.sampled_negatives,
        vectors.len()
    );
    Ok(())
}

fn gen_synth_cmd(a: GenSynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut s = cfg.data.synthetic.unwrap_or_default();
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    let splits = synthetic_splits(&s)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, part) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        let path = a.out.join(format!("{name}.{}", a.format));
        save_corpus(&path, part, a.format)?;
    }
    info!(
        "wrote {} sentences to {}",
        splits.train.len() + splits.dev.len() + splits.test.len(),
        a.out.display()
    );
    Ok(())
}
