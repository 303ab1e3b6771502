use std::collections::BTreeSet;
use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dial_core::data::{
    parse_manifest, write_manifest, Frame, InstructionRecord, InstructionSource, ManifestEntry, Partition, RelabelMeta,
    SelectionMethod, Trajectory,
};
use dial_core::eval::compute_rank_accuracy;
use dial_core::world::{generate_world, WorldConfig};
use dial_core::DatasetManifest;
use dial_service::{router, AppState, ServiceConfig, DATASET_FILE, LOG_FILE, RELABELS_FILE};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn trajectory(dir: &Path, id: &str) -> Trajectory {
    let assets = dir.join("assets");
    std::fs::create_dir_all(&assets).unwrap();
    let frame = |name: &str| {
        let bytes = format!("frame {id} {name}").into_bytes();
        let rel = format!("assets/{id}_{name}.png");
        std::fs::write(dir.join(&rel), &bytes).unwrap();
        Frame::from_bytes(rel, &bytes)
    };
    Trajectory { episode_id: id.to_owned(), first: frame("first"), last: frame("last"), actions: None }
}

fn relabeled(id: &str, rank: usize, prob: f64) -> InstructionRecord {
    let mut r = InstructionRecord::new(id, format!("candidate {id}"), InstructionSource::Relabeled);
    r.relabel = Some(RelabelMeta {
        cosine: 0.5,
        prob,
        rank,
        method: SelectionMethod::TopK,
        k: Some(3),
        p: None,
        checkpoint_hash: "00".into(),
        pool_source: InstructionSource::Crowd,
    });
    r
}

/// A data directory with `episodes` structured episodes and a relabeled set
/// of three ranked candidates each.
fn data_dir(episodes: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut plain = Vec::new();
    let mut relabels = Vec::new();
    for i in 0..episodes {
        let t = trajectory(dir.path(), &format!("ep{i}"));
        plain.push(ManifestEntry::new(t.clone(), vec![]));
        let recs = (1..=3).map(|r| relabeled(&format!("c{r}"), r, 0.6 / r as f64)).collect();
        relabels.push(ManifestEntry::new(t, recs));
    }
    std::fs::write(dir.path().join(DATASET_FILE), write_manifest(&DatasetManifest::new(Partition::B, plain))).unwrap();
    std::fs::write(dir.path().join(RELABELS_FILE), write_manifest(&DatasetManifest::new(Partition::C, relabels))).unwrap();
    dir
}

fn app(dir: &Path) -> Router {
    router(AppState::open(dir, 2).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, if b.is_empty() { Value::Null } else { serde_json::from_slice(&b).unwrap() })
}

async fn annotate(app: &Router, ep: &str, text: &str, who: &str) -> (StatusCode, Value) {
    json_call(app, "POST", "/annotations", Some(json!({"episode_id": ep, "text": text, "annotator_id": who}))).await
}

async fn rate(app: &Router, ep: &str, ins: &str, accurate: bool, who: &str) -> (StatusCode, Value) {
    let body = json!({"episode_id": ep, "instruction_id": ins, "accurate": accurate, "annotator_id": who});
    json_call(app, "POST", "/ratings", Some(body)).await
}

#[tokio::test]
async fn successive_annotation_tasks_are_distinct() {
    let dir = data_dir(2);
    let app = app(dir.path());
    let (s1, t1) = json_call(&app, "GET", "/tasks/annotation?annotator=ann", None).await;
    let (s2, t2) = json_call(&app, "GET", "/tasks/annotation?annotator=ann", None).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_ne!(t1["episode_id"], t2["episode_id"]);
    assert!(t1["first_frame_url"].as_str().unwrap().starts_with("/assets/"));
    assert_eq!(t1["prompt"], "describe how a robot should be commanded to go from the start to the end");
}

#[tokio::test]
async fn annotator_never_sees_their_own_episode_again() {
    let dir = data_dir(3);
    let app = app(dir.path());
    assert_eq!(annotate(&app, "ep1", "pick the can", "ann").await.0, StatusCode::OK);
    for _ in 0..6 {
        let (_, t) = json_call(&app, "GET", "/tasks/annotation?annotator=ann", None).await;
        assert_ne!(t["episode_id"], "ep1");
    }
}

#[tokio::test]
async fn quota_exhausts_the_task_queue() {
    let dir = data_dir(2);
    let app = app(dir.path());
    for ep in ["ep0", "ep1"] {
        for who in ["a", "b"] {
            assert_eq!(annotate(&app, ep, "open the drawer", who).await.0, StatusCode::OK);
        }
    }
    let (s, _) = call(&app, "GET", "/tasks/annotation?annotator=c", None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, body) = annotate(&app, "ep0", "close the drawer", "c").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"], "QuotaReached");
}

#[tokio::test]
async fn submitted_annotation_appears_in_export() {
    let dir = data_dir(2);
    let app = app(dir.path());
    let (s, ack) = annotate(&app, "ep0", "  Pick the GREEN can!  ", "ann").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ack["stored"], true);
    let (s, bytes) = call(&app, "GET", "/export/manifest", None).await;
    assert_eq!(s, StatusCode::OK);
    let m = parse_manifest(&bytes).unwrap();
    assert_eq!(m.partition, Some(Partition::A));
    assert_eq!(m.len(), 1);
    let rec = &m.entries[0].instructions[0];
    assert_eq!(rec.text, "pick the green can");
    assert_eq!(rec.source, InstructionSource::Crowd);
    assert_eq!(rec.annotator_id.as_deref(), Some("ann"));
    m.validate().unwrap();
}

#[tokio::test]
async fn replayed_submission_is_stored_once() {
    let dir = data_dir(1);
    let app = app(dir.path());
    let (_, first) = annotate(&app, "ep0", "pick the can", "ann").await;
    let (s, again) = annotate(&app, "ep0", "pick the can", "ann").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["stored"], false);
    assert_eq!(again["seq"], first["seq"]);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let (_, bytes) = call(&app, "GET", "/export/manifest", None).await;
    assert_eq!(parse_manifest(&bytes).unwrap().instruction_count(), 1);
}

#[tokio::test]
async fn punctuation_only_text_is_rejected() {
    let dir = data_dir(1);
    let app = app(dir.path());
    let (s, body) = annotate(&app, "ep0", "!!!", "ann").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "EmptyInstruction");
    let (s, body) = annotate(&app, "ep9", "pick the can", "ann").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "NotFound");
    assert!(!dir.path().join(LOG_FILE).exists() || std::fs::read(dir.path().join(LOG_FILE)).unwrap().is_empty());
}

#[tokio::test]
async fn missing_dataset_is_not_ready() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, body) = json_call(&app, "GET", "/tasks/annotation?annotator=ann", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "NotReady");
    assert_eq!(json_call(&app, "GET", "/tasks/rating?annotator=ann", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn rating_task_lists_ranked_candidates() {
    let dir = data_dir(2);
    let app = app(dir.path());
    let (s, t) = json_call(&app, "GET", "/tasks/rating?annotator=r", None).await;
    assert_eq!(s, StatusCode::OK);
    let ranks: Vec<u64> = t["candidates"].as_array().unwrap().iter().map(|c| c["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, [1, 2, 3]);
    assert_eq!(t["candidates"][0]["confidence"], 0.6);
    let ep = t["episode_id"].as_str().unwrap().to_owned();
    for c in ["c1", "c2", "c3"] {
        rate(&app, &ep, c, true, "r").await;
    }
    let (_, t2) = json_call(&app, "GET", "/tasks/rating?annotator=r", None).await;
    assert_ne!(t2["episode_id"].as_str().unwrap(), ep);
}

#[tokio::test]
async fn report_reflects_exactly_the_votes() {
    let dir = data_dir(2);
    let app = app(dir.path());
    let (s, body) = json_call(&app, "GET", "/reports/accuracy", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "EmptyReport");
    rate(&app, "ep0", "c1", true, "r").await;
    rate(&app, "ep0", "c2", false, "r").await;
    rate(&app, "ep0", "c3", true, "r").await;
    let (s, report) = json_call(&app, "GET", "/reports/accuracy", None).await;
    assert_eq!(s, StatusCode::OK);
    let rows = report["ranks"]["rows"].as_array().unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r["accuracy"].as_f64().unwrap()).collect();
    assert_eq!(acc, [1.0, 0.0, 1.0]);
    assert_eq!(rows[1]["mean_confidence"], 0.3);
    assert_eq!(report["ranks"]["labels"], 3);
    assert_eq!(report["ranks"]["episodes"], 1);
}

#[tokio::test]
async fn conflicting_votes_average() {
    let dir = data_dir(1);
    let app = app(dir.path());
    assert_eq!(rate(&app, "ep0", "c1", true, "a").await.1["stored"], true);
    assert_eq!(rate(&app, "ep0", "c1", false, "b").await.1["stored"], true);
    let (_, report) = json_call(&app, "GET", "/reports/accuracy", None).await;
    assert_eq!(report["ranks"]["rows"][0]["accuracy"], 0.5);
    assert_eq!(report["ranks"]["rows"][0]["count"], 2);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[tokio::test]
async fn rating_an_unknown_candidate_is_not_found() {
    let dir = data_dir(1);
    let app = app(dir.path());
    let (s, body) = rate(&app, "ep0", "c9", true, "r").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "NotFound");
    assert_eq!(rate(&app, "ep5", "c1", true, "r").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn all_accurate_votes_give_full_accuracy() {
    let dir = data_dir(4);
    let app = app(dir.path());
    for ep in 0..4 {
        for c in ["c1", "c2", "c3"] {
            rate(&app, &format!("ep{ep}"), c, true, "r").await;
        }
    }
    let (_, report) = json_call(&app, "GET", "/reports/accuracy", None).await;
    for row in report["ranks"]["rows"].as_array().unwrap() {
        assert_eq!(row["accuracy"], 1.0);
        assert_eq!(row["cumulative_any"], 1.0);
    }
}

#[tokio::test]
async fn one_bad_vote_in_ten_gives_point_nine() {
    let dir = data_dir(10);
    let app = app(dir.path());
    for ep in 0..10 {
        rate(&app, &format!("ep{ep}"), "c1", ep != 3, "r").await;
    }
    let (_, report) = json_call(&app, "GET", "/reports/accuracy", None).await;
    assert_eq!(report["ranks"]["rows"][0]["accuracy"], 0.9);
    assert_eq!(report["ranks"]["rows"][0]["count"], 10);
}

fn key_paths(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = format!("{prefix}.{k}");
                out.insert(p.clone());
                key_paths(x, &p, out);
            }
        }
        Value::Array(a) => {
            for x in a {
                key_paths(x, &format!("{prefix}[]"), out);
            }
        }
        _ => {}
    }
}

#[tokio::test]
async fn human_report_shares_the_evaluation_schema() {
    let dir = data_dir(1);
    let app = app(dir.path());
    rate(&app, "ep0", "c1", true, "r").await;
    let (_, human) = json_call(&app, "GET", "/reports/accuracy", None).await;

    let world = generate_world(&WorldConfig { episode_count: 20, seed: 1, eval_per_category: 0, ..Default::default() }).unwrap();
    let ep = &world.episodes[0];
    let mut rec = relabeled("x", 1, 0.9);
    rec.text = ep.structured.clone();
    let m = DatasetManifest::new(Partition::C, vec![ManifestEntry::new(ep.trajectory(), vec![rec])]);
    let oracle = dial_core::eval::EvalReport {
        ranks: Some(compute_rank_accuracy(&m, &world.episodes).unwrap()),
        ..Default::default()
    };
    let oracle = serde_json::to_value(&oracle).unwrap();
    let (mut a, mut b) = (BTreeSet::new(), BTreeSet::new());
    key_paths(&human["ranks"], "", &mut a);
    key_paths(&oracle["ranks"], "", &mut b);
    assert_eq!(a, b);
    let round: dial_core::eval::EvalReport = serde_json::from_value(human).unwrap();
    assert_eq!(round.ranks.unwrap().rows.len(), 1);
}

#[tokio::test]
async fn assets_are_served_by_hash() {
    let dir = data_dir(1);
    let app = app(dir.path());
    let (_, t) = json_call(&app, "GET", "/tasks/annotation?annotator=a", None).await;
    let (s, bytes) = call(&app, "GET", t["last_frame_url"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, b"frame ep0 last");
    let resp = app
        .clone()
        .oneshot(Request::get(t["first_frame_url"].as_str().unwrap()).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(call(&app, "GET", "/assets/0000000000000000", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn replaying_the_log_rebuilds_the_same_state() {
    let dir = data_dir(3);
    let state = AppState::open(dir.path(), 2).unwrap();
    let app = router(state.clone());
    annotate(&app, "ep0", "pick the can", "a").await;
    annotate(&app, "ep0", "lift the can", "b").await;
    annotate(&app, "ep1", "open the drawer", "a").await;
    rate(&app, "ep2", "c1", true, "a").await;
    rate(&app, "ep2", "c1", false, "b").await;
    rate(&app, "ep2", "c2", false, "a").await;
    let before = state.snapshot();
    let (_, report_before) = json_call(&app, "GET", "/reports/accuracy", None).await;
    drop(app);
    drop(state);

    let reopened = AppState::open(dir.path(), 2).unwrap();
    assert_eq!(reopened.snapshot(), before);
    let app = router(reopened);
    let (_, report_after) = json_call(&app, "GET", "/reports/accuracy", None).await;
    assert_eq!(report_after, report_before);
    // Keys survive the restart.
    assert_eq!(annotate(&app, "ep0", "pick the can", "a").await.1["stored"], false);
    assert_eq!(annotate(&app, "ep0", "grab it", "c").await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn torn_and_duplicated_log_lines_are_harmless() {
    let dir = data_dir(2);
    let state = AppState::open(dir.path(), 2).unwrap();
    let app = router(state.clone());
    annotate(&app, "ep0", "pick the can", "a").await;
    let before = state.snapshot();
    drop(app);
    drop(state);
    let path = dir.path().join(LOG_FILE);
    let line = std::fs::read_to_string(&path).unwrap();
    // A duplicated record and an interrupted write.
    std::fs::write(&path, format!("{line}{line}{{\"seq\":3,\"kind\":\"annot")).unwrap();
    let reopened = AppState::open(dir.path(), 2).unwrap();
    assert_eq!(reopened.snapshot(), before);
    let app = router(reopened);
    assert_eq!(annotate(&app, "ep1", "open the drawer", "a").await.0, StatusCode::OK);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.ends_with('\n'));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(AppState::open(dir.path(), 2).unwrap().snapshot().annotations.len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submissions_never_exceed_the_quota() {
    let dir = data_dir(3);
    let app = app(dir.path());
    let mut handles = Vec::new();
    for who in 0..12 {
        for ep in 0..3 {
            let app = app.clone();
            handles.push(tokio::spawn(async move {
                annotate(&app, &format!("ep{ep}"), &format!("text from {who}"), &format!("w{who}")).await.0
            }));
        }
    }
    let mut ok = 0;
    for h in handles {
        let s = h.await.unwrap();
        assert!(s == StatusCode::OK || s == StatusCode::CONFLICT, "{s}");
        ok += usize::from(s == StatusCode::OK);
    }
    assert_eq!(ok, 6);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 6);
    let seqs: BTreeSet<u64> =
        log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=6).collect());
}

#[tokio::test]
async fn serves_over_tcp() {
    let dir = data_dir(1);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = ServiceConfig { data_dir: dir.path().to_owned(), port, quota: 2 };
    let server = tokio::spawn(async move { dial_service::serve(&config).await });
    let mut reply = String::new();
    for _ in 0..50 {
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        if let Ok(mut s) = tokio::net::TcpStream::connect(("127.0.0.1", port)).await {
            use tokio::io::{AsyncReadExt, AsyncWriteExt};
            s.write_all(b"GET /tasks/annotation?annotator=a HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
            s.read_to_string(&mut reply).await.unwrap();
            break;
        }
    }
    server.abort();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"episode_id\":\"ep0\""));
}

#[test]
fn config_reads_the_environment() {
    std::env::set_var("DIAL_DATA_DIR", "/tmp/dial-data");
    std::env::set_var("DIAL_PORT", "9123");
    let c = ServiceConfig::from_env().unwrap();
    assert_eq!((c.data_dir.to_str().unwrap(), c.port, c.quota), ("/tmp/dial-data", 9123, 2));
    std::env::set_var("DIAL_PORT", "nope");
    assert!(ServiceConfig::from_env().is_err());
    std::env::remove_var("DIAL_PORT");
    std::env::remove_var("DIAL_DATA_DIR");
    assert_eq!(ServiceConfig::from_env().unwrap().port, 8080);
}
