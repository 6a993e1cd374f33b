//! Client for a remote embedding provider with a local vector cache.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{l2_normalize, Mode, VectorStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedProviderConfig {
    pub endpoint: String,
    pub model: String,
    /// Prefix prepended to every input text, per mode.
    pub mode_instructions: BTreeMap<Mode, String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub batch_size: usize,
    pub parallelism: usize,
    /// Expected vector dimension; taken from the cache when unset.
    pub dim: Option<usize>,
}

impl Default for EmbedProviderConfig {
    fn default() -> Self {
        EmbedProviderConfig {
            endpoint: "http://127.0.0.1:8080/embed".into(),
            model: "default".into(),
            mode_instructions: BTreeMap::new(),
            token_env: "EMBED_API_TOKEN".into(),
            timeout_secs: 30,
            max_retries: 3,
            backoff_ms: 200,
            batch_size: 32,
            parallelism: 4,
            dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub input: Vec<String>,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

/// One request/response exchange with a provider. Implementations report
/// connection-level failures as [`Error::Transport`] and non-success
/// responses as [`Error::Provider`] carrying the raw body.
pub trait EmbeddingTransport: Send + Sync {
    fn send(&self, request: &EmbedRequest) -> Result<EmbedResponse>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &EmbedProviderConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpTransport {
            client,
            endpoint: cfg.endpoint.clone(),
            token: std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty()),
        })
    }
}

impl EmbeddingTransport for HttpTransport {
    fn send(&self, request: &EmbedRequest) -> Result<EmbedResponse> {
        let transport = |e: reqwest::Error| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        };
        let mut req = self
            .client
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(serde_json::to_vec(request)?);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let body = resp.text().map_err(transport)?;
        if !status.is_success() {
            return Err(Error::Provider {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&body).map_err(|e| Error::Provider {
            status: status.as_u16(),
            body: format!("unparseable response ({e}): {body}"),
        })
    }
}

fn retryable(e: &Error) -> bool {
    match e {
        Error::Transport { .. } => true,
        Error::Provider { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

/// Fetches vectors through a transport, caching them by
/// `(sha256(text), mode, model)`.
pub struct RemoteEmbedder {
    cfg: EmbedProviderConfig,
    transport: Box<dyn EmbeddingTransport>,
    cache: Mutex<Option<VectorStore>>,
    cache_path: Option<PathBuf>,
    calls: AtomicUsize,
}

impl RemoteEmbedder {
    /// Creates an embedder. An existing cache file is loaded; a missing one
    /// is created on the first successful fetch.
    pub fn new(
        cfg: EmbedProviderConfig,
        transport: Box<dyn EmbeddingTransport>,
        cache_path: Option<PathBuf>,
    ) -> Result<Self> {
        let cache = match &cache_path {
            Some(p) if p.exists() => Some(VectorStore::load(p)?),
            _ => None,
        };
        if let (Some(dim), Some(c)) = (cfg.dim, &cache) {
            if c.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.dim(),
                    context: "embedding cache".into(),
                });
            }
        }
        Ok(RemoteEmbedder {
            cfg,
            transport,
            cache: Mutex::new(cache),
            cache_path,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of requests sent to the transport, retries included.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &EmbedProviderConfig {
        &self.cfg
    }

    fn cache_id(&self, text: &str) -> String {
        let digest = Sha256::digest(text.as_bytes());
        format!("{}/{}", self.cfg.model, hex::encode(digest))
    }

    fn cached(&self, text: &str, mode: Mode) -> Option<Vec<f64>> {
        let guard = self.cache.lock().expect("cache lock poisoned");
        guard
            .as_ref()
            .and_then(|c| c.get(&self.cache_id(text), mode).ok())
            .map(<[f64]>::to_vec)
    }

    fn send_with_retries(&self, request: &EmbedRequest) -> Result<EmbedResponse> {
        let mut attempt = 0;
        loop {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.send(request) {
                Ok(r) => return Ok(r),
                Err(e) if retryable(&e) && attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("embedding request failed ({e}); retry {} in {wait} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn fetch_batch(&self, texts: &[&str], mode: Mode) -> Result<Vec<Vec<f64>>> {
        let prefix = self.cfg.mode_instructions.get(&mode).map(String::as_str).unwrap_or("");
        let request = EmbedRequest {
            model: self.cfg.model.clone(),
            input: texts.iter().map(|t| format!("{prefix}{t}")).collect(),
            mode,
        };
        let resp = self.send_with_retries(&request)?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Provider {
                status: 200,
                body: format!("expected {} vectors, got {}", texts.len(), resp.vectors.len()),
            });
        }
        Ok(resp.vectors)
    }

    /// One normalized vector per input text, order-aligned with `texts`.
    /// Only cache misses reach the provider.
    pub fn fetch(&self, texts: &[String], mode: Mode) -> Result<Vec<Vec<f64>>> {
        let mut misses: Vec<&str> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for t in texts {
            if self.cached(t, mode).is_none() && seen.insert(t.as_str()) {
                misses.push(t);
            }
        }

        if !misses.is_empty() {
            let batches: Vec<&[&str]> = misses.chunks(self.cfg.batch_size.max(1)).collect();
            let mut fetched: Vec<Result<Vec<Vec<f64>>>> = Vec::with_capacity(batches.len());
            for group in batches.chunks(self.cfg.parallelism.max(1)) {
                let results: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
                    let handles: Vec<_> = group
                        .iter()
                        .map(|b| s.spawn(move || self.fetch_batch(b, mode)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("embedding worker panicked"))
                        .collect()
                });
                fetched.extend(results);
            }

            let mut fresh: HashMap<&str, Vec<f64>> = HashMap::new();
            for (batch, result) in batches.iter().zip(fetched) {
                for (text, mut v) in batch.iter().zip(result?) {
                    l2_normalize(&mut v).map_err(|_| Error::NonFinite(format!("provider vector for {mode} text")))?;
                    fresh.insert(text, v);
                }
            }
            self.store_in_cache(&fresh, mode)?;
        }

        texts
            .iter()
            .map(|t| {
                self.cached(t, mode)
                    .ok_or_else(|| Error::MissingEmbedding {
                        id: self.cache_id(t),
                        mode,
                    })
            })
            .collect()
    }

    fn store_in_cache(&self, fresh: &HashMap<&str, Vec<f64>>, mode: Mode) -> Result<()> {
        let mut guard = self.cache.lock().expect("cache lock poisoned");
        let expected = self
            .cfg
            .dim
            .or_else(|| guard.as_ref().map(VectorStore::dim))
            .or_else(|| fresh.values().next().map(Vec::len));
        let Some(dim) = expected else { return Ok(()) };
        for v in fresh.values() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                    context: format!("provider response for model '{}'", self.cfg.model),
                });
            }
        }
        let store = guard.get_or_insert_with(|| VectorStore::new(dim));
        let mut ordered: Vec<_> = fresh.iter().collect();
        ordered.sort_by(|a, b| a.0.cmp(b.0));
        for (text, v) in ordered {
            store.insert(self.cache_id(text), mode, v.clone())?;
        }
        if let Some(path) = &self.cache_path {
            if let Err(e) = store.save(path) {
                log::warn!("could not write embedding cache {}: {e}", path.display());
            }
        }
        Ok(())
    }
}
