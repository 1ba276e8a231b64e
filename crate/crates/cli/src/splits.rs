//! Run configuration and corpus loading.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dspert_core::config::SyntheticSection;
use dspert_core::data::{gen_synthetic, load_corpus};
use dspert_core::{Format, RunConfig, Sentence};

/// Loads the config file (or the defaults). Relative data paths are
/// resolved against the file's directory.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let mut cfg =
        RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.data.train, &mut cfg.data.dev, &mut cfg.data.test]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    /// Empty when no test split is configured.
    pub test: Vec<Sentence>,
}

pub fn synthetic_splits(s: &SyntheticSection) -> Result<Splits> {
    let total = s.train_sentences + s.dev_sentences + s.test_sentences;
    let mut all = gen_synthetic(s.seed, total, s.vocab_size, s.nest_rate, s.max_len)?;
    let test = all.split_off(s.train_sentences + s.dev_sentences);
    let dev = all.split_off(s.train_sentences);
    Ok(Splits {
        train: all,
        dev,
        test,
    })
}

/// Reads one corpus file; `format` wins over the extension.
pub fn read_corpus(path: &Path, format: Option<Format>) -> Result<Vec<Sentence>> {
    let format = format.unwrap_or_else(|| Format::from_path(path));
    load_corpus(path, format).with_context(|| format!("loading {}", path.display()))
}

/// `dir/{name}.jsonl` or `dir/{name}.bio`, whichever exists.
fn split_file(dir: &Path, name: &str) -> Option<PathBuf> {
    ["jsonl", "bio"]
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.exists())
}

/// Training splits from, in order of preference: a `--data` directory, the
/// config's paths, or the synthetic generator.
pub fn load_splits(
    cfg: &RunConfig,
    data_dir: Option<&Path>,
    format: Option<Format>,
) -> Result<Splits> {
    let format = format.or(cfg.data.format);
    let (train, dev, test) = match data_dir {
        Some(dir) => {
            let need = |name| {
                split_file(dir, name)
                    .with_context(|| format!("no {name}.jsonl or {name}.bio in {}", dir.display()))
            };
            (
                Some(need("train")?),
                Some(need("dev")?),
                split_file(dir, "test"),
            )
        }
        None => (
            cfg.data.train.clone(),
            cfg.data.dev.clone(),
            cfg.data.test.clone(),
        ),
    };
    match (train, dev) {
        (Some(train), Some(dev)) => Ok(Splits {
            train: read_corpus(&train, format)?,
            dev: read_corpus(&dev, format)?,
            test: match test {
                Some(t) => read_corpus(&t, format)?,
                None => Vec::new(),
            },
        }),
        (None, None) => synthetic_splits(&cfg.data.synthetic.clone().unwrap_or_default()),
        _ => bail!("data.train and data.dev must be given together"),
    }
}
