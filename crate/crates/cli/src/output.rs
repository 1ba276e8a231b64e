//! Metrics documents and plot-data files. Nothing written here depends on
//! wall-clock time, so repeated runs produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use dspert_core::eval::{f1_by_length, f1_by_nestedness, length_bucket, micro_prf};
use dspert_core::train::{predict_split, Example};
use dspert_core::{Model, Prf};
use serde::{Deserialize, Serialize};

/// Widths above this share one length bucket.
pub const LENGTH_MERGE_ABOVE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub micro: Prf,
    /// Keyed by width; `">10"` holds the merged long spans.
    pub by_length: BTreeMap<String, Prf>,
    /// Keyed by `nested`, `covering`, `both`, `flat`.
    pub by_nestedness: BTreeMap<String, Prf>,
}

fn length_key(bucket: usize) -> String {
    if bucket > LENGTH_MERGE_ABOVE {
        format!(">{LENGTH_MERGE_ABOVE}")
    } else {
        // Zero-padded so the map orders numerically.
        format!("{bucket:02}")
    }
}

pub fn split_metrics(model: &Model, split: &[Example]) -> Result<SplitMetrics> {
    let preds = predict_split(model, split)?;
    let golds: Vec<&[(usize, usize, usize)]> = split.iter().map(|e| e.gold.as_slice()).collect();
    Ok(SplitMetrics {
        micro: micro_prf(&preds, &golds),
        by_length: f1_by_length(&preds, &golds, Some(LENGTH_MERGE_ABOVE))
            .into_iter()
            .map(|(k, v)| (length_key(length_bucket(k, Some(LENGTH_MERGE_ABOVE))), v))
            .collect(),
        by_nestedness: f1_by_nestedness(&preds, &golds)
            .into_iter()
            .map(|(k, v)| (k.name().to_string(), v))
            .collect(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn prf_row(key: &str, p: &Prf) -> Vec<String> {
    vec![
        key.to_string(),
        p.precision.to_string(),
        p.recall.to_string(),
        p.f1.to_string(),
        p.tp.to_string(),
        p.fp.to_string(),
        p.fn_.to_string(),
    ]
}

/// `{prefix}f1_by_length.csv` and `{prefix}f1_by_nestedness.csv` in `dir`.
pub fn write_breakdowns(dir: &Path, prefix: &str, m: &SplitMetrics) -> Result<()> {
    let rows: Vec<_> = m
        .by_length
        .iter()
        .map(|(k, p)| prf_row(k.trim_start_matches('0'), p))
        .collect();
    write_csv(
        &dir.join(format!("{prefix}f1_by_length.csv")),
        &["length", "precision", "recall", "f1", "tp", "fp", "fn"],
        &rows,
    )?;
    let rows: Vec<_> = m.by_nestedness.iter().map(|(k, p)| prf_row(k, p)).collect();
    write_csv(
        &dir.join(format!("{prefix}f1_by_nestedness.csv")),
        &["structure", "precision", "recall", "f1", "tp", "fp", "fn"],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_keys_sort_numerically() {
        let keys: Vec<String> = [1, 2, 10, 11, 40]
            .iter()
            .map(|&w| length_key(length_bucket(w, Some(LENGTH_MERGE_ABOVE))))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys[3], ">10");
        assert_eq!(keys[3], keys[4]);
    }
}
