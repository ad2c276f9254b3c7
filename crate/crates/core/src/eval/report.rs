use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{plcc_with, srcc, PlccMode};
use super::{EvalError, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub label: String,
    pub n: usize,
    pub n_skipped: usize,
    pub srcc: f64,
    pub plcc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub srcc_vanilla: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plcc_vanilla: Option<f64>,
}

fn correlate(pred: &[f64], mos: &[f64], mode: PlccMode) -> Result<(f64, f64), EvalError> {
    if pred.len() < 3 {
        return Err(EvalError::TooFewSamples(pred.len()));
    }
    Ok((srcc(pred, mos)?, plcc_with(mode, pred, mos)?))
}

/// Correlations of `score` against MOS. When every record carries a
/// vanilla score, its correlations are filled in alongside.
pub fn report(
    records: &[PredictionRecord],
    label: &str,
    n_skipped: usize,
    mode: PlccMode,
) -> Result<CorrelationReport, EvalError> {
    let mos: Vec<f64> = records.iter().map(|r| r.mos).collect();
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let (s, p) = correlate(&scores, &mos, mode)?;
    let vanilla = match vanilla_scores(records) {
        Some(v) => Some(correlate(&v, &mos, mode)?),
        None => None,
    };
    Ok(CorrelationReport {
        label: label.to_owned(),
        n: records.len(),
        n_skipped,
        srcc: s,
        plcc: p,
        srcc_vanilla: vanilla.map(|v| v.0),
        plcc_vanilla: vanilla.map(|v| v.1),
    })
}

/// A stand-alone report labeled `vanilla` over the vanilla scores.
pub fn vanilla_report(
    records: &[PredictionRecord],
    n_skipped: usize,
    mode: PlccMode,
) -> Result<Option<CorrelationReport>, EvalError> {
    let Some(v) = vanilla_scores(records) else {
        return Ok(None);
    };
    let mos: Vec<f64> = records.iter().map(|r| r.mos).collect();
    let (s, p) = correlate(&v, &mos, mode)?;
    Ok(Some(CorrelationReport {
        label: "vanilla".into(),
        n: records.len(),
        n_skipped,
        srcc: s,
        plcc: p,
        srcc_vanilla: None,
        plcc_vanilla: None,
    }))
}

fn vanilla_scores(records: &[PredictionRecord]) -> Option<Vec<f64>> {
    records.iter().map(|r| r.vanilla_score).collect()
}

pub fn write_report_json(path: impl AsRef<Path>, report: &CorrelationReport) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<CorrelationReport, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// `label,n,n_skipped,srcc,plcc`, one row per report.
pub fn write_summary_csv(path: impl AsRef<Path>, reports: &[CorrelationReport]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = |e: csv::Error| io(std::io::Error::other(e));
    w.write_record(["label", "n", "n_skipped", "srcc", "plcc"]).map_err(row_err)?;
    for r in reports {
        w.write_record([
            r.label.clone(),
            r.n.to_string(),
            r.n_skipped.to_string(),
            r.srcc.to_string(),
            r.plcc.to_string(),
        ])
        .map_err(row_err)?;
    }
    let bytes = w.into_inner().map_err(|e| io(std::io::Error::other(e.to_string())))?;
    std::fs::write(path, bytes).map_err(io)
}
