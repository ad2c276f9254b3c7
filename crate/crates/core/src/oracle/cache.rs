//! Append-only JSON-lines store of backend responses.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{OracleBackend, OracleError, OracleRequest, TokenLogits};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache record at {path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key_hash: String,
    pub backend_id: String,
    pub prompt_kind: String,
    pub image_hashes: Vec<String>,
    pub tokens: [String; 2],
    pub logits: [f64; 2],
    /// Seconds since the Unix epoch at insertion.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: usize,
    pub misses: usize,
}

/// Hex SHA-256 over the key fields, newline separated.
pub fn key_hash(backend_id: &str, req: &OracleRequest<'_>) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update(b"\n");
    h.update(req.kind().as_str().as_bytes());
    for img in req.images() {
        h.update(b"\n");
        h.update(img.hash().as_bytes());
    }
    for tok in req.candidate_tokens() {
        h.update(b"\n");
        h.update(tok.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Response cache. Reads are concurrent; appends are serialized.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, TokenLogits>>,
    writer: Mutex<Option<BufWriter<File>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ResponseCache {
    /// Opens (creating if absent) the cache file and loads every record.
    /// Later records override earlier ones with the same key. A truncated
    /// final line, as left by an interrupted write, is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut entries = HashMap::new();
        let mut keep_len = None;
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io)?;
            let mut offset = 0;
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, raw) in lines.iter().enumerate() {
                let start = offset;
                offset += raw.len();
                let line = raw.trim();
                if line.is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(line) {
                    Ok(rec) => {
                        entries.insert(
                            rec.key_hash,
                            TokenLogits {
                                first: rec.logits[0],
                                second: rec.logits[1],
                            },
                        );
                    }
                    Err(e) if i + 1 == lines.len() => {
                        log::warn!("dropping truncated final cache line in {}: {e}", path.display());
                        keep_len = Some(start as u64);
                    }
                    Err(e) => {
                        return Err(CacheError::Corrupt {
                            path,
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            if keep_len.is_none() && !text.is_empty() && !text.ends_with('\n') {
                // A complete record without its newline: terminate it.
                OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .and_then(|mut f| f.write_all(b"\n"))
                    .map_err(io)?;
            }
        }
        if let Some(len) = keep_len {
            OpenOptions::new()
                .write(true)
                .open(&path)
                .and_then(|f| f.set_len(len))
                .map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    /// A cache that never touches disk.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.len(),
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }

    pub fn get(&self, backend_id: &str, req: &OracleRequest<'_>) -> Option<TokenLogits> {
        self.get_by_key(&key_hash(backend_id, req))
    }

    fn get_by_key(&self, key: &str) -> Option<TokenLogits> {
        self.entries.read().expect("cache lock").get(key).copied()
    }

    pub fn insert(
        &self,
        backend_id: &str,
        req: &OracleRequest<'_>,
        logits: TokenLogits,
    ) -> Result<(), CacheError> {
        let key = key_hash(backend_id, req);
        let [t0, t1] = req.candidate_tokens();
        let record = CacheRecord {
            key_hash: key.clone(),
            backend_id: backend_id.to_owned(),
            prompt_kind: req.kind().as_str().to_owned(),
            image_hashes: req.image_hashes(),
            tokens: [t0.to_owned(), t1.to_owned()],
            logits: [logits.first, logits.second],
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        {
            let mut guard = self.writer.lock().expect("cache writer lock");
            if let Some(w) = guard.as_mut() {
                let path = self.path.clone().unwrap_or_default();
                let mut line = serde_json::to_string(&record).expect("record serializes");
                line.push('\n');
                w.write_all(line.as_bytes())
                    .and_then(|_| w.flush())
                    .map_err(|source| CacheError::Io { path, source })?;
            }
        }
        self.entries.write().expect("cache lock").insert(key, logits);
        Ok(())
    }

    /// Every record currently on disk, in file order.
    pub fn records(&self) -> Result<Vec<CacheRecord>, CacheError> {
        let Some(path) = &self.path else {
            return Ok(Vec::new());
        };
        let io = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        let file = File::open(path).map_err(io)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| CacheError::Corrupt {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// Returns the cached logits for `req`, or queries `backend` and stores the
/// result. Backend errors are returned and never stored.
pub fn cached_query(
    cache: &ResponseCache,
    backend: &dyn OracleBackend,
    req: &OracleRequest<'_>,
) -> Result<TokenLogits, OracleError> {
    let key = key_hash(backend.id(), req);
    if let Some(hit) = cache.get_by_key(&key) {
        cache.hits.fetch_add(1, Ordering::SeqCst);
        return Ok(hit);
    }
    cache.misses.fetch_add(1, Ordering::SeqCst);
    let logits = backend.query(req).map_err(|source| OracleError::Backend {
        kind: req.kind(),
        source,
    })?;
    cache.insert(backend.id(), req, logits)?;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{EncodedImage, ImageRgb};
    use crate::oracle::{BackendError, CountingBackend, OfflineBackend, PromptKind};

    struct Fixed(f64, f64);

    impl OracleBackend for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn query(&self, _req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError> {
            Ok(TokenLogits {
                first: self.0,
                second: self.1,
            })
        }
    }

    fn img(v: f64) -> EncodedImage {
        EncodedImage::new(ImageRgb::filled(8, 8, [v; 3]).unwrap()).unwrap()
    }

    #[test]
    fn key_covers_every_field() {
        let (a, b) = (img(0.1), img(0.2));
        let base = key_hash("m", &OracleRequest::vanilla(&a));
        assert_ne!(base, key_hash("n", &OracleRequest::vanilla(&a)));
        assert_ne!(base, key_hash("m", &OracleRequest::vanilla(&b)));
        let c1 = OracleRequest::conditional(PromptKind::ConditionalQuality, &a, &b).unwrap();
        let c2 = OracleRequest::conditional(PromptKind::ConditionalQuality, &b, &a).unwrap();
        let c3 = OracleRequest::conditional(PromptKind::ConditionalQualityT1, &a, &b).unwrap();
        let keys = [key_hash("m", &c1), key_hash("m", &c2), key_hash("m", &c3)];
        assert_ne!(keys[0], keys[1]);
        assert_ne!(keys[0], keys[2]);
        assert_eq!(key_hash("m", &c1), keys[0]);
    }

    #[test]
    fn hit_skips_backend() {
        let cache = ResponseCache::in_memory();
        let backend = CountingBackend::new(Fixed(0.25, -1.0));
        let x = img(0.3);
        let req = OracleRequest::vanilla(&x);
        let first = cached_query(&cache, &backend, &req).unwrap();
        let second = cached_query(&cache, &backend, &req).unwrap();
        assert_eq!(first, second);
        assert_eq!(backend.calls(), 1);
        assert_eq!(
            cache.stats(),
            CacheStats {
                entries: 1,
                hits: 1,
                misses: 1
            }
        );
    }

    #[test]
    fn errors_are_not_cached() {
        let cache = ResponseCache::in_memory();
        let x = img(0.3);
        let req = OracleRequest::vanilla(&x);
        assert!(cached_query(&cache, &OfflineBackend::new("fixed"), &req).is_err());
        assert!(cache.is_empty());
    }

    #[test]
    fn persists_bit_identical_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("cache.jsonl");
        let x = img(0.7);
        let req = OracleRequest::vanilla(&x);
        let tricky = Fixed(0.1 + 0.2, -1.0 / 3.0);
        {
            let cache = ResponseCache::open(&path).unwrap();
            cached_query(&cache, &tricky, &req).unwrap();
        }
        let cache = ResponseCache::open(&path).unwrap();
        let offline = OfflineBackend::new("fixed");
        let l = cached_query(&cache, &offline, &req).unwrap();
        assert_eq!(l.first.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(l.second.to_bits(), (-1.0f64 / 3.0).to_bits());

        let recs = cache.records().unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].backend_id, "fixed");
        assert_eq!(recs[0].prompt_kind, "vanilla_quality");
        assert_eq!(recs[0].image_hashes, vec![x.hash().to_owned()]);
        assert_eq!(recs[0].tokens, ["good".to_owned(), "poor".to_owned()]);
    }

    #[test]
    fn truncated_tail_is_tolerated_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let x = img(0.7);
        {
            let cache = ResponseCache::open(&path).unwrap();
            cached_query(&cache, &Fixed(1.0, 0.0), &OracleRequest::vanilla(&x)).unwrap();
        }
        let good = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, format!("{good}{{\"key_hash\":\"ab")).unwrap();
        {
            let cache = ResponseCache::open(&path).unwrap();
            assert_eq!(cache.len(), 1);
            let y = img(0.1);
            cached_query(&cache, &Fixed(2.0, 0.0), &OracleRequest::vanilla(&y)).unwrap();
        }
        assert_eq!(ResponseCache::open(&path).unwrap().len(), 2);

        std::fs::write(&path, format!("garbage\n{good}")).unwrap();
        assert!(matches!(
            ResponseCache::open(&path),
            Err(CacheError::Corrupt { line: 1, .. })
        ));
    }
}
