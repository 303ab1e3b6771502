//! HTTP encoder client.
//!
//! `POST {base_url}/embed/text` with `{"text": ...}` and
//! `POST {base_url}/embed/image` with `{"content_hash": hex, "data": base64}`;
//! both answer `{"dims": n, "values": [...]}`. Results are cached by content
//! hash so a repeated input never reaches the network.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{AssetSource, EmbedError, EmbeddingStore, EmbeddingVector, Encoder};
use crate::data::Frame;
use crate::hash::{fnv1a64, to_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    fn path(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::Image => "image",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    pub dims: usize,
    /// Maximum number of concurrent in-flight requests.
    pub max_in_flight: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dims: usize,
    values: Vec<f32>,
}

struct Gate {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut used = self.used.lock().expect("gate lock");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("gate lock");
        }
        *used += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("gate lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteEncoder {
    endpoint: EncoderEndpoint,
    agent: ureq::Agent,
    assets: Arc<dyn AssetSource>,
    cache: Mutex<HashMap<String, Arc<Mutex<Option<Vec<f32>>>>>>,
    gate: Gate,
    network_calls: AtomicUsize,
}

impl RemoteEncoder {
    pub fn new(endpoint: EncoderEndpoint, assets: Arc<dyn AssetSource>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .build()
            .into();
        let cap = endpoint.max_in_flight.max(1);
        Self {
            endpoint,
            agent,
            assets,
            cache: Mutex::new(HashMap::new()),
            gate: Gate {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap,
            },
            network_calls: AtomicUsize::new(0),
        }
    }

    /// Seeds the cache from a previously saved store.
    pub fn with_cache(self, store: &EmbeddingStore) -> Result<Self, EmbedError> {
        if !store.is_empty() && store.dims() != self.endpoint.dims {
            return Err(EmbedError::DimsMismatch {
                expected: self.endpoint.dims,
                found: store.dims(),
            });
        }
        {
            let mut cache = self.cache.lock().expect("cache lock");
            for (id, v) in store.iter() {
                cache.insert(id.to_owned(), Arc::new(Mutex::new(Some(v.to_vec()))));
            }
        }
        Ok(self)
    }

    /// Snapshot of every cached result, ordered by key.
    pub fn cache_store(&self) -> EmbeddingStore {
        let cache = self.cache.lock().expect("cache lock");
        let mut pairs: Vec<(String, Vec<f32>)> = cache
            .iter()
            .filter_map(|(k, slot)| slot.lock().expect("slot lock").clone().map(|v| (k.clone(), v)))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        EmbeddingStore::from_pairs(self.endpoint.dims, pairs).expect("cached vectors share dims")
    }

    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn endpoint(&self) -> &EncoderEndpoint {
        &self.endpoint
    }

    fn cached_or_fetch(
        &self,
        key: String,
        modality: Modality,
        body: impl FnOnce() -> Result<serde_json::Value, EmbedError>,
    ) -> Result<EmbeddingVector<f32>, EmbedError> {
        let slot = self
            .cache
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_default()
            .clone();
        // Holding the per-key slot serializes concurrent fetches of the same content.
        let mut slot = slot.lock().expect("slot lock");
        if let Some(v) = slot.as_ref() {
            return Ok(EmbeddingVector::raw(v.clone()));
        }
        let body = body()?;
        let values = self.post(modality, &body)?;
        *slot = Some(values.clone());
        Ok(EmbeddingVector::raw(values))
    }

    fn post(&self, modality: Modality, body: &serde_json::Value) -> Result<Vec<f32>, EmbedError> {
        let _permit = self.gate.acquire();
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}/embed/{}", self.endpoint.base_url.trim_end_matches('/'), modality.path());
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| EmbedError::ProviderUnavailable(format!("{url}: {e}")))?;
        let parsed: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::ProviderUnavailable(format!("{url}: bad response: {e}")))?;
        if parsed.dims != self.endpoint.dims || parsed.values.len() != self.endpoint.dims {
            return Err(EmbedError::DimsMismatch {
                expected: self.endpoint.dims,
                found: if parsed.dims != self.endpoint.dims { parsed.dims } else { parsed.values.len() },
            });
        }
        Ok(parsed.values)
    }
}

impl Encoder for RemoteEncoder {
    fn dims(&self) -> usize {
        self.endpoint.dims
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector<f32>, EmbedError> {
        let key = format!("text:{}", to_hex(fnv1a64(text.as_bytes())));
        self.cached_or_fetch(key, Modality::Text, || Ok(serde_json::json!({ "text": text })))
    }

    fn encode_image(&self, frame: &Frame) -> Result<EmbeddingVector<f32>, EmbedError> {
        let key = format!("image:{}", frame.hash_hex());
        self.cached_or_fetch(key, Modality::Image, || {
            let bytes = self.assets.load(frame)?;
            Ok(serde_json::json!({
                "content_hash": frame.hash_hex(),
                "data": base64::engine::general_purpose::STANDARD.encode(bytes),
            }))
        })
    }
}
