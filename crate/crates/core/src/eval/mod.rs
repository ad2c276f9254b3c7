//! Manifests, batch prediction, correlation metrics and reports.

mod batch;
mod manifest;
pub mod metrics;
mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use batch::{
    join_predictions, read_predictions, run_batch, run_batch_with_provider, write_predictions,
    BatchOutput, PredictionRecord, SkippedEntry,
};
pub use manifest::{load_manifest, write_manifest, ManifestEntry, ManifestError};
pub use metrics::{plcc, plcc_logistic, srcc, MetricError, PlccMode};
pub use report::{
    read_report_json, report, vanilla_report, write_report_json, write_summary_csv,
    CorrelationReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("parallelism must be >= 1")]
    InvalidParallelism,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("need at least 3 usable records, got {0}")]
    TooFewSamples(usize),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image_id `{0}` predicted twice")]
    DuplicatePrediction(String),
    #[error("prediction for `{0}` has no manifest entry")]
    UnknownPrediction(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::debias::DebiasConfig;
    use crate::distortions::test_util::random_image;
    use crate::image::save_png;
    use crate::oracle::{CountingBackend, MockBackend, MockBiasConfig, ResponseCache};
    use std::path::Path;

    fn dataset(dir: &Path, n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| {
                let path = dir.join(format!("{i}.png"));
                save_png(&random_image(24, 24, i as u64), &path).unwrap();
                ManifestEntry {
                    image_id: format!("img{i}"),
                    path,
                    mos: i as f64,
                    class_tag: None,
                    latent_q: None,
                }
            })
            .collect()
    }

    fn mock() -> MockBackend {
        MockBackend::new(MockBiasConfig::default()).unwrap()
    }

    #[test]
    fn order_is_independent_of_parallelism() {
        let dir = tempfile::tempdir().unwrap();
        let entries = dataset(dir.path(), 5);
        let b = mock();
        let cfg = DebiasConfig::default();
        let one = run_batch(&b, None, &entries, &cfg, 1).unwrap();
        let eight = run_batch(&b, None, &entries, &cfg, 8).unwrap();
        assert_eq!(one.records.len(), 5);
        assert_eq!(one, eight);
        let ids: Vec<_> = one.records.iter().map(|r| r.image_id.clone()).collect();
        assert_eq!(ids, ["img0", "img1", "img2", "img3", "img4"]);
    }

    #[test]
    fn missing_file_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = dataset(dir.path(), 5);
        entries[2].path = dir.path().join("gone.png");
        let out = run_batch(&mock(), None, &entries, &DebiasConfig::default(), 2).unwrap();
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].image_id, "img2");
        assert!(out.skipped[0].reason.contains("gone.png"), "{}", out.skipped[0].reason);
    }

    #[test]
    fn empty_manifest_and_zero_parallelism_are_fatal() {
        let cfg = DebiasConfig::default();
        assert!(matches!(run_batch(&mock(), None, &[], &cfg, 1), Err(EvalError::EmptyManifest)));
        let dir = tempfile::tempdir().unwrap();
        let entries = dataset(dir.path(), 1);
        assert!(matches!(
            run_batch(&mock(), None, &entries, &cfg, 0),
            Err(EvalError::InvalidParallelism)
        ));
    }

    #[test]
    fn warm_cache_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let entries = dataset(dir.path(), 4);
        let b = CountingBackend::new(mock());
        let cache = ResponseCache::in_memory();
        let cfg = DebiasConfig::default();
        let cold = run_batch(&b, Some(&cache), &entries, &cfg, 3).unwrap();
        assert!(b.calls() > 0);
        b.reset();
        let warm = run_batch(&b, Some(&cache), &entries, &cfg, 3).unwrap();
        assert_eq!(b.calls(), 0);
        assert_eq!(cold, warm);
    }

    #[test]
    fn predictions_round_trip_and_join() {
        let dir = tempfile::tempdir().unwrap();
        let entries = dataset(dir.path(), 4);
        let out = run_batch(&mock(), None, &entries, &DebiasConfig::default(), 1).unwrap();
        let p = dir.path().join("pred.jsonl");
        write_predictions(&p, &out.records).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["config_digest", "image_id", "per_condition", "score", "vanilla_score"]);
        let cond = &first["per_condition"][0];
        for k in ["kind", "prob", "weight", "w_raw"] {
            assert!(cond.get(k).is_some(), "{k}");
        }

        let mut back = read_predictions(&p).unwrap();
        back.reverse();
        assert!(matches!(
            join_predictions(&entries[..3], back.clone()),
            Err(EvalError::UnknownPrediction(id)) if id == "img3"
        ));
        let (joined, missing) = join_predictions(&entries, back).unwrap();
        assert_eq!(missing, 0);
        assert_eq!(joined, out.records);
    }

    fn rec(score: f64, vanilla: Option<f64>, mos: f64) -> PredictionRecord {
        PredictionRecord {
            image_id: format!("{mos}"),
            score,
            vanilla_score: vanilla,
            per_condition: Vec::new(),
            config_digest: String::new(),
            mos,
        }
    }

    #[test]
    fn reports() {
        let records: Vec<_> = (0..6)
            .map(|i| rec(i as f64 / 5.0, Some(((i * 7) % 6) as f64), i as f64 * 20.0))
            .collect();
        let r = report(&records, "debiased", 2, PlccMode::Raw).unwrap();
        assert!((r.srcc - 1.0).abs() < 1e-12 && (r.plcc - 1.0).abs() < 1e-12);
        assert_eq!((r.n, r.n_skipped), (6, 2));
        let v = vanilla_report(&records, 2, PlccMode::Raw).unwrap().unwrap();
        assert_eq!(v.label, "vanilla");
        assert_eq!(Some(v.srcc), r.srcc_vanilla);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        write_report_json(&p, &r).unwrap();
        assert_eq!(read_report_json(&p).unwrap(), r);
        write_summary_csv(dir.path().join("s.csv"), &[r, v]).unwrap();

        let no_vanilla: Vec<_> = records.iter().map(|r| rec(r.score, None, r.mos)).collect();
        let r = report(&no_vanilla, "x", 0, PlccMode::Raw).unwrap();
        assert!(r.srcc_vanilla.is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("srcc_vanilla").is_none());
        assert!(matches!(
            report(&no_vanilla[..2], "x", 0, PlccMode::Raw),
            Err(EvalError::TooFewSamples(2))
        ));
    }
}
