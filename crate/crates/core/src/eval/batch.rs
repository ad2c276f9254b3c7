use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, ManifestEntry};
use crate::debias::{
    predict_with_provider, ConditionProvider, ConditionRecord, DebiasConfig, GeneratedConditions,
};
use crate::image::{load_png, EncodedImage};
use crate::oracle::{OracleBackend, ResponseCache};

/// One line of a predictions file. `mos` is joined from the manifest and is
/// not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub score: f64,
    pub vanilla_score: Option<f64>,
    pub per_condition: Vec<ConditionRecord>,
    pub config_digest: String,
    #[serde(skip)]
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchOutput {
    /// Successful predictions in manifest order.
    pub records: Vec<PredictionRecord>,
    pub skipped: Vec<SkippedEntry>,
}

pub fn run_batch(
    backend: &dyn OracleBackend,
    cache: Option<&ResponseCache>,
    entries: &[ManifestEntry],
    cfg: &DebiasConfig,
    parallelism: usize,
) -> Result<BatchOutput, EvalError> {
    run_batch_with_provider(backend, cache, entries, cfg, parallelism, &GeneratedConditions)
}

/// Predicts every entry. Per-entry failures are collected in
/// [`BatchOutput::skipped`]; output order never depends on `parallelism`.
pub fn run_batch_with_provider(
    backend: &dyn OracleBackend,
    cache: Option<&ResponseCache>,
    entries: &[ManifestEntry],
    cfg: &DebiasConfig,
    parallelism: usize,
    provider: &dyn ConditionProvider,
) -> Result<BatchOutput, EvalError> {
    if entries.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    if parallelism == 0 {
        return Err(EvalError::InvalidParallelism);
    }
    cfg.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let digest = cfg.digest();

    let predict_one = |e: &ManifestEntry| -> Result<PredictionRecord, SkippedEntry> {
        let skip = |reason: String| SkippedEntry {
            image_id: e.image_id.clone(),
            path: e.path.clone(),
            reason,
        };
        let image = load_png(&e.path).map_err(|err| skip(err.to_string()))?;
        let x = EncodedImage::new(image).map_err(|err| skip(err.to_string()))?;
        let pred = predict_with_provider(backend, cache, &x, cfg, provider)
            .map_err(|err| skip(err.to_string()))?;
        Ok(PredictionRecord {
            image_id: e.image_id.clone(),
            score: pred.score,
            vanilla_score: pred.vanilla_score,
            per_condition: pred.per_condition,
            config_digest: digest.clone(),
            mos: e.mos,
        })
    };

    let results: Vec<Result<PredictionRecord, SkippedEntry>> = if parallelism == 1 {
        entries.iter().map(predict_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| EvalError::Config(e.to_string()))?;
        pool.install(|| entries.par_iter().map(predict_one).collect())
    };

    let mut out = BatchOutput::default();
    for r in results {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(skip) => {
                log::warn!("skipping {}: {}", skip.image_id, skip.reason);
                out.skipped.push(skip);
            }
        }
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a predictions file; `mos` is left at zero until joined.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Pairs predictions with manifest MOS, in manifest order. Returns the
/// joined records and the number of manifest entries with no prediction.
pub fn join_predictions(
    manifest: &[ManifestEntry],
    predictions: Vec<PredictionRecord>,
) -> Result<(Vec<PredictionRecord>, usize), EvalError> {
    let mut by_id: std::collections::HashMap<String, PredictionRecord> =
        std::collections::HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.contains_key(&p.image_id) {
            return Err(EvalError::DuplicatePrediction(p.image_id));
        }
        by_id.insert(p.image_id.clone(), p);
    }
    let mut joined = Vec::with_capacity(manifest.len());
    let mut missing = 0;
    for e in manifest {
        match by_id.remove(&e.image_id) {
            Some(mut p) => {
                p.mos = e.mos;
                joined.push(p);
            }
            None => missing += 1,
        }
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(EvalError::UnknownPrediction(extra.clone()));
    }
    Ok((joined, missing))
}
