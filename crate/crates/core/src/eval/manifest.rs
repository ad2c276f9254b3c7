use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}:{line}: duplicate image_id `{id}`")]
    DuplicateId { path: PathBuf, line: u64, id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Absolute, or relative to the working directory; manifest-relative
    /// paths are resolved on load.
    pub path: PathBuf,
    pub mos: f64,
    pub class_tag: Option<String>,
    pub latent_q: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct Row {
    image_id: String,
    path: String,
    mos: String,
    #[serde(default)]
    class_tag: Option<String>,
    #[serde(default)]
    latent_q: Option<String>,
}

/// Reads `image_id,path,mos[,class_tag,latent_q]`. Empty optional cells
/// are `None`. Line numbers in errors are 1-based file lines.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ManifestError> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: u64, message: String| ManifestError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    for required in ["image_id", "path", "mos"] {
        if !headers.iter().any(|h| h == required) {
            return Err(parse_err(1, format!("missing column `{required}`")));
        }
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row: Row = rec
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        if row.image_id.is_empty() {
            return Err(parse_err(line, "empty image_id".into()));
        }
        let mos: f64 = row
            .mos
            .parse()
            .map_err(|_| parse_err(line, format!("mos `{}` is not a number", row.mos)))?;
        if !mos.is_finite() {
            return Err(parse_err(line, format!("mos `{}` is not finite", row.mos)));
        }
        let latent_q = match row.latent_q.as_deref() {
            None | Some("") => None,
            Some(s) => {
                let q: f64 = s
                    .parse()
                    .map_err(|_| parse_err(line, format!("latent_q `{s}` is not a number")))?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(parse_err(line, format!("latent_q {q} outside [0, 1]")));
                }
                Some(q)
            }
        };
        if !seen.insert(row.image_id.clone()) {
            return Err(ManifestError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: row.image_id,
            });
        }
        let p = PathBuf::from(&row.path);
        out.push(ManifestEntry {
            image_id: row.image_id,
            path: if p.is_absolute() { p } else { base.join(p) },
            mos,
            class_tag: row.class_tag.filter(|s| !s.is_empty()),
            latent_q,
        });
    }
    Ok(out)
}

/// Writes a manifest with paths made relative to the manifest's directory
/// where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| io(std::io::Error::other(e));
    w.write_record(["image_id", "path", "mos", "class_tag", "latent_q"])
        .map_err(csv_err)?;
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        let rel = rel.to_string_lossy().replace('\\', "/");
        w.write_record([
            e.image_id.as_str(),
            rel.as_str(),
            &e.mos.to_string(),
            e.class_tag.as_deref().unwrap_or(""),
            &e.latent_q.map(|q| q.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| io(std::io::Error::other(e.to_string())))?;
    std::fs::write(path, bytes).map_err(io)
}
