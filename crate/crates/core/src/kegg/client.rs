//! Cached fetcher for KEGG REST entries.
//!
//! Every entry lives as one raw-text file under the cache directory, so a
//! populated cache (or a committed fixture directory used as one) makes the
//! whole pipeline runnable with the network disabled.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::parse::is_disease_code;
use super::KeggError;
use crate::ingest::is_kegg_drug_code;

pub const DEFAULT_BASE_URL: &str = "https://rest.kegg.jp";
pub const DEFAULT_MIN_DELAY: Duration = Duration::from_millis(350);

pub struct KeggClient {
    cache_dir: PathBuf,
    base_url: String,
    allow_network: bool,
    min_delay: Duration,
    /// Instant of the last request start. Held across the courtesy sleep so
    /// fetches are serialized even from multiple threads.
    last_request: Mutex<Option<Instant>>,
    agent: ureq::Agent,
}

impl KeggClient {
    pub fn new(cache_dir: impl Into<PathBuf>, allow_network: bool) -> Self {
        KeggClient {
            cache_dir: cache_dir.into(),
            base_url: DEFAULT_BASE_URL.to_string(),
            allow_network,
            min_delay: DEFAULT_MIN_DELAY,
            last_request: Mutex::new(None),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(30))
                .build(),
        }
    }

    /// Points the client at a different REST endpoint (tests use a local
    /// fixture server).
    pub fn with_base_url(mut self, base_url: impl Into<String>) -> Self {
        self.base_url = base_url.into();
        self
    }

    pub fn with_min_delay(mut self, min_delay: Duration) -> Self {
        self.min_delay = min_delay;
        self
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    pub fn cache_path(&self, code: &str) -> PathBuf {
        self.cache_dir.join(format!("{code}.txt"))
    }

    /// Returns the raw flat-file text for one D- or H-number. Cache hits
    /// never touch the network; misses fetch once and populate the cache,
    /// so n calls make at most one request per code.
    pub fn fetch_entry(&self, code: &str) -> Result<String, KeggError> {
        if !is_kegg_drug_code(code) && !is_disease_code(code) {
            return Err(KeggError::BadCode(code.to_string()));
        }
        let path = self.cache_path(code);
        if path.exists() {
            return std::fs::read_to_string(&path).map_err(|source| KeggError::Io {
                path: path.clone(),
                source,
            });
        }
        if !self.allow_network {
            return Err(KeggError::OfflineMiss {
                code: code.to_string(),
            });
        }
        let body = self.http_get(code)?;
        std::fs::create_dir_all(&self.cache_dir).map_err(|source| KeggError::Io {
            path: self.cache_dir.clone(),
            source,
        })?;
        std::fs::write(&path, &body).map_err(|source| KeggError::Io { path, source })?;
        Ok(body)
    }

    fn http_get(&self, code: &str) -> Result<String, KeggError> {
        let mut last = self
            .last_request
            .lock()
            .expect("kegg fetch lock never poisoned");
        if let Some(previous) = *last {
            let elapsed = previous.elapsed();
            if elapsed < self.min_delay {
                std::thread::sleep(self.min_delay - elapsed);
            }
        }
        *last = Some(Instant::now());

        let url = format!("{}/get/{}", self.base_url.trim_end_matches('/'), code);
        let response = match self.agent.get(&url).call() {
            Ok(response) => response,
            Err(ureq::Error::Status(status, _)) => {
                return Err(KeggError::HttpStatus {
                    code: code.to_string(),
                    status,
                })
            }
            Err(other) => {
                return Err(KeggError::Network {
                    code: code.to_string(),
                    source: Box::new(other),
                })
            }
        };
        let body = response.into_string().map_err(|source| KeggError::Io {
            path: PathBuf::from(&url),
            source,
        })?;
        if body.trim().is_empty() {
            return Err(KeggError::EmptyBody {
                code: code.to_string(),
            });
        }
        Ok(body)
    }
}
