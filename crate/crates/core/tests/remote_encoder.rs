use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dial_core::data::Frame;
use dial_core::embed::{EmbedError, Encoder, EncoderEndpoint, MemoryAssets, RemoteEncoder};
use dial_core::EmbeddingStore;

const DIMS: usize = 4;

/// Serves `/embed/text` and `/embed/image` with vectors derived from the
/// request body length; counts requests.
fn spawn_server() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let json: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let key = if request_line.contains("/embed/text") {
                json["text"].as_str().unwrap().len() as f32
            } else {
                assert!(json["content_hash"].is_string());
                100.0 + json["data"].as_str().unwrap().len() as f32
            };
            let reply = serde_json::json!({ "dims": DIMS, "values": [key, 1.0, 0.0, 0.0] }).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            );
        }
    });
    (format!("http://{addr}"), hits)
}

fn endpoint(base_url: String) -> EncoderEndpoint {
    EncoderEndpoint { base_url, timeout: Duration::from_secs(5), dims: DIMS, max_in_flight: 2 }
}

#[test]
fn repeated_inputs_hit_the_network_once() {
    let (url, hits) = spawn_server();
    let mut assets = MemoryAssets::default();
    let bytes = b"png bytes".to_vec();
    assets.insert(bytes.clone());
    let frame = Frame::from_bytes("a.png", &bytes);
    let enc = RemoteEncoder::new(endpoint(url), Arc::new(assets));

    let t = enc.encode_text("pick coke can").unwrap();
    assert_eq!(t.values(), [13.0, 1.0, 0.0, 0.0]);
    assert_eq!(enc.encode_text("pick coke can").unwrap(), t);
    let i = enc.encode_image(&frame).unwrap();
    assert_eq!(enc.encode_image(&frame).unwrap(), i);
    assert_eq!(enc.network_calls(), 2);
    assert_eq!(hits.load(Ordering::SeqCst), 2);

    let store = enc.cache_store();
    assert_eq!(store.len(), 2);
    let restored = EmbeddingStore::from_bytes(&store.to_bytes()).unwrap();
    assert_eq!(restored.to_bytes(), store.to_bytes());
}

#[test]
fn a_seeded_cache_needs_no_network() {
    let (url, hits) = spawn_server();
    let warm = RemoteEncoder::new(endpoint(url), Arc::new(MemoryAssets::default()));
    warm.encode_text("open top drawer").unwrap();
    warm.encode_text("close top drawer").unwrap();
    let store = warm.cache_store();
    let before = hits.load(Ordering::SeqCst);

    // Dead endpoint: any network call would fail.
    let cold = RemoteEncoder::new(endpoint("http://127.0.0.1:9".into()), Arc::new(MemoryAssets::default()))
        .with_cache(&store)
        .unwrap();
    assert_eq!(cold.encode_text("open top drawer").unwrap().values(), [15.0, 1.0, 0.0, 0.0]);
    assert_eq!(cold.encode_text("close top drawer").unwrap().values(), [16.0, 1.0, 0.0, 0.0]);
    assert_eq!(cold.network_calls(), 0);
    assert_eq!(hits.load(Ordering::SeqCst), before);
    assert_eq!(cold.cache_store().to_bytes(), store.to_bytes());
}

#[test]
fn unreachable_provider_is_retryable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let enc = RemoteEncoder::new(endpoint(format!("http://127.0.0.1:{port}")), Arc::new(MemoryAssets::default()));
    let err = enc.encode_text("pick apple").unwrap_err();
    assert!(matches!(err, EmbedError::ProviderUnavailable(_)), "{err:?}");
    assert!(err.is_retryable());
}

#[test]
fn cache_dims_must_match() {
    let mut store = EmbeddingStore::empty(8);
    store.insert("text:00".into(), &[0.0; 8]).unwrap();
    let enc = RemoteEncoder::new(endpoint("http://127.0.0.1:9".into()), Arc::new(MemoryAssets::default()));
    assert!(matches!(enc.with_cache(&store), Err(EmbedError::DimsMismatch { expected: 4, found: 8 })));
}
