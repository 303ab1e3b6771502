use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dial_cli::artifact::{content_hash, read_stamp, stamp_path, Stamp};
use dial_cli::stages::{files, ANNOTATED_FILE, EVAL_FILE, GENERATIONS_FILE, STRUCTURED_FILE, TRUTH_FILE};
use dial_core::data::parse_manifest;
use dial_core::embed::store_read;
use dial_core::{InstructionSource, Partition};

fn dial(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dial")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dial(args);
    assert!(
        out.status.success(),
        "dial {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_pipeline(dir: &Path, seed: &str) {
    ok(&[
        "pipeline", "--out", s(dir), "--seed", seed, "--episodes", "240", "--distinct-tasks", "24", "--fraction", "0.5",
        "--steps", "200",
    ]);
}

const PIPELINE_OUTPUTS: &[&str] = &[
    ANNOTATED_FILE,
    STRUCTURED_FILE,
    TRUTH_FILE,
    EVAL_FILE,
    GENERATIONS_FILE,
    files::DATASET_A,
    files::DATASET_B,
    files::GENERATED,
    files::WORD,
    files::GAUSSIAN,
    files::CHECKPOINT,
    files::TRAIN_REPORT,
    files::DATASET_C,
    files::RELABEL_STATS,
    files::RANK_REPORT,
    files::RANK_CSV,
    files::POLICY_REPORT,
];

#[test]
fn pipeline_writes_every_artifact_with_a_verifiable_stamp() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), "3");
    let mut stamps: BTreeMap<String, Stamp> = BTreeMap::new();
    for name in PIPELINE_OUTPUTS {
        let path = dir.path().join(name);
        let bytes = std::fs::read(&path).unwrap_or_else(|_| panic!("{name} missing"));
        let stamp = read_stamp(&path).unwrap().unwrap_or_else(|| panic!("{name} has no stamp"));
        assert_eq!(stamp.output, content_hash(&bytes), "{name}");
        assert_eq!(stamp.seed, 3);
        stamps.insert(path.display().to_string(), stamp);
    }
    // Every recorded input is an output of an earlier stage with the same hash.
    for (out, stamp) in &stamps {
        if stamp.stage == "gen-world" {
            assert!(stamp.inputs.is_empty());
            continue;
        }
        assert!(!stamp.inputs.is_empty(), "{out} has no inputs");
        for (input, hash) in &stamp.inputs {
            let producer = stamps.get(input).unwrap_or_else(|| panic!("{out}: input {input} was not produced by the pipeline"));
            assert_eq!(&producer.output, hash, "{out} <- {input}");
            assert_ne!(producer.stage, stamp.stage);
        }
    }
    let c = parse_manifest(&std::fs::read(dir.path().join(files::DATASET_C)).unwrap()).unwrap();
    assert_eq!(c.partition, Some(Partition::C));
    assert!(!c.is_empty());
    assert!(c.entries.iter().flat_map(|e| &e.instructions).all(|r| r.source == InstructionSource::Relabeled));
    let stamp = &stamps[&dir.path().join(files::DATASET_C).display().to_string()];
    assert_eq!(stamp.stage, "relabel");
    assert_eq!(stamp.inputs.len(), 4, "partition B, checkpoint and two pools");
}

#[test]
fn pipeline_rerun_reproduces_relabeled_dataset_bytes() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    run_pipeline(first.path(), "5");
    let c1 = std::fs::read(first.path().join(files::DATASET_C)).unwrap();
    let ck1 = std::fs::read(first.path().join(files::CHECKPOINT)).unwrap();
    run_pipeline(second.path(), "5");
    assert_eq!(c1, std::fs::read(second.path().join(files::DATASET_C)).unwrap());
    assert_eq!(ck1, std::fs::read(second.path().join(files::CHECKPOINT)).unwrap());
    run_pipeline(first.path(), "5");
    assert_eq!(c1, std::fs::read(first.path().join(files::DATASET_C)).unwrap());
    let stamp = std::fs::read(stamp_path(&first.path().join(files::DATASET_C))).unwrap();
    run_pipeline(first.path(), "5");
    assert_eq!(stamp, std::fs::read(stamp_path(&first.path().join(files::DATASET_C))).unwrap());

    let other = tempfile::tempdir().unwrap();
    run_pipeline(other.path(), "6");
    assert_ne!(c1, std::fs::read(other.path().join(files::DATASET_C)).unwrap());
}

fn world_and_split(dir: &Path) -> (PathBuf, PathBuf) {
    ok(&["gen-world", "--out", s(dir), "--episodes", "120", "--distinct-tasks", "12", "--eval-per-category", "5"]);
    let (a, b) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    ok(&[
        "ingest", "--annotated", s(&dir.join(ANNOTATED_FILE)), "--structured", s(&dir.join(STRUCTURED_FILE)), "--fraction",
        "0.5", "--out-a", s(&a), "--out-b", s(&b),
    ]);
    (a, b)
}

#[test]
fn relabel_before_train_fusion_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = world_and_split(dir.path());
    let ckpt = dir.path().join("fusion.ckpt");
    let out = dial(&[
        "relabel", "--in", s(&b), "--checkpoint", s(&ckpt), "--pool", s(&a), "--out", s(&dir.path().join("c.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing checkpoint"), "{err}");
    assert!(err.contains("train-fusion"), "{err}");
    assert!(!dir.path().join("c.jsonl").exists());
}

#[test]
fn missing_upstream_manifest_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dial(&["train-fusion", "--dataset-a", s(&dir.path().join("nope.jsonl")), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing partition A manifest"));
}

#[test]
fn an_input_edited_after_its_stage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = world_and_split(dir.path());
    let mut bytes = std::fs::read(&a).unwrap();
    bytes.extend_from_slice(b"\n");
    std::fs::write(&a, bytes).unwrap();
    let out = dial(&["train-fusion", "--dataset-a", s(&a), "--out", s(&dir.path().join("f.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed after its stage wrote it"));
}

#[test]
fn ingest_partitions_are_valid_and_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = world_and_split(dir.path());
    let a = parse_manifest(&std::fs::read(a).unwrap()).unwrap();
    let b = parse_manifest(&std::fs::read(b).unwrap()).unwrap();
    a.validate().unwrap();
    b.validate().unwrap();
    assert_eq!((a.len(), b.len()), (60, 60));
    assert!(a.entries.iter().all(|e| b.get(e.episode_id()).is_none()));
    assert!(b.entries.iter().all(|e| e.instructions[0].source == InstructionSource::Structured));
}

#[test]
fn augment_stages_write_parseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = world_and_split(dir.path());
    let gen = dir.path().join("gen.jsonl");
    ok(&["augment", "sentence", "--in", s(&b), "--canned", s(&dir.path().join(GENERATIONS_FILE)), "--n", "3", "--out", s(&gen)]);
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&gen).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l["source"] == "generated"));
    let texts: std::collections::HashSet<&str> = lines.iter().map(|l| l["text"].as_str().unwrap()).collect();
    assert_eq!(texts.len(), lines.len(), "variants are deduplicated");

    let word = dir.path().join("word.jsonl");
    ok(&["augment", "word", "--in", s(&a), "--in", s(&b), "--variants", "2", "--out", s(&word)]);
    let w = parse_manifest(&std::fs::read(&word).unwrap()).unwrap();
    assert_eq!(w.len(), 120);
    assert!(w.entries.iter().all(|e| e.instructions.len() <= 2 * 2));

    let store = dir.path().join("noise.store");
    ok(&["augment", "gaussian", "--in", s(&a), "--copies", "2", "--sigma", "0.1", "--dims", "96", "--out", s(&store)]);
    let st = store_read(&std::fs::read(&store).unwrap()).unwrap();
    let a_m = parse_manifest(&std::fs::read(&a).unwrap()).unwrap();
    assert_eq!(st.dims(), 96);
    assert_eq!(st.len(), 2 * a_m.instruction_count());
}

#[test]
fn stages_run_one_at_a_time_produce_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (a, b) = world_and_split(d);
    let ckpt = d.join("f.ckpt");
    let out = ok(&["train-fusion", "--dataset-a", s(&a), "--out", s(&ckpt), "--steps", "150", "--batch-size", "16", "--eval-every", "50", "--report", s(&d.join("train.json"))]);
    assert!(out.contains("held-out top-1"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("train.json")).unwrap()).unwrap();
    assert_eq!(report["evaluations"].as_array().unwrap().len(), 4);

    let c = d.join("c.jsonl");
    ok(&["relabel", "--in", s(&b), "--checkpoint", s(&ckpt), "--pool", s(&a), "--method", "top-k", "--k", "3", "--out", s(&c), "--stats", s(&d.join("stats.json"))]);
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["total_rows"], 3 * 60);
    let c_m = parse_manifest(&std::fs::read(&c).unwrap()).unwrap();
    assert!(c_m.entries.iter().all(|e| e.instructions.len() == 3));

    ok(&["eval-relabels", "--relabels", s(&c), "--truth", s(&d.join(TRUTH_FILE)), "--out", s(&d.join("ranks.json")), "--csv", s(&d.join("ranks.csv"))]);
    let ranks: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ranks.json")).unwrap()).unwrap();
    assert_eq!(ranks["ranks"]["rows"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(d.join("ranks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let arm_base = format!("base={},{}", s(&a), s(&b));
    let arm_c = format!("dial={},{},{}", s(&a), s(&b), s(&c));
    ok(&["eval-policy", "--arm", &arm_base, "--arm", &arm_c, "--truth", s(&d.join(TRUTH_FILE)), "--eval", s(&d.join(EVAL_FILE)), "--seeds", "0,1", "--out", s(&d.join("policy.json"))]);
    let policy: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("policy.json")).unwrap()).unwrap();
    let arms = policy["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 2);
    assert_eq!(arms[0]["reports"].as_array().unwrap().len(), 2);
    assert!(arms[1]["train_examples"][0].as_u64() > arms[0]["train_examples"][0].as_u64());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dial.toml");
    std::fs::write(&cfg, "seed = 9\n[world]\nepisode_count = 30\ndistinct_tasks = 5\neval_per_category = 2\n").unwrap();
    let w1 = dir.path().join("w1");
    ok(&["--config", s(&cfg), "gen-world", "--out", s(&w1)]);
    let truth = std::fs::read_to_string(w1.join(TRUTH_FILE)).unwrap();
    assert_eq!(truth.lines().count(), 30);
    let stamp = read_stamp(&w1.join(TRUTH_FILE)).unwrap().unwrap();
    assert_eq!(stamp.seed, 9);
    assert_eq!(stamp.config["world"]["distinct_tasks"], 5);

    let w2 = dir.path().join("w2");
    ok(&["gen-world", "--config", s(&cfg), "--out", s(&w2), "--episodes", "12", "--seed", "2"]);
    let stamp = read_stamp(&w2.join(TRUTH_FILE)).unwrap().unwrap();
    assert_eq!(std::fs::read_to_string(w2.join(TRUTH_FILE)).unwrap().lines().count(), 12);
    assert_eq!(stamp.seed, 2);

    std::fs::write(&cfg, "[world]\nepisodes = 3\n").unwrap();
    let out = dial(&["--config", s(&cfg), "gen-world", "--out", s(&dir.path().join("w3"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn planted_experiment_reports_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dial.toml");
    std::fs::write(&cfg, "[planted]\nepisodes = 120\ntasks = 20\n[planted.train]\nmax_steps = 100\neval_every = 50\n").unwrap();
    let out = dir.path().join("planted.json");
    let stdout = ok(&["--config", s(&cfg), "eval-policy", "--experiment", "planted", "--seeds", "0,1", "--out", s(&out)]);
    assert_eq!(stdout.matches("trained top-1").count(), 2);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(summary["outcomes"].as_array().unwrap().len(), 2);
    assert!(summary["means"]["trained_top1"].as_f64().unwrap() > summary["means"]["untrained_top1"].as_f64().unwrap());
}

fn http_get(port: u16, path: &str) -> Option<(u16, String)> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).ok()?;
    let buf = String::from_utf8_lossy(&raw).into_owned();
    let status = buf.split_whitespace().nth(1)?.parse().ok()?;
    Some((status, buf))
}

#[test]
fn serve_exposes_a_generated_world() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-world", "--out", s(d), "--episodes", "6", "--distinct-tasks", "3", "--eval-per-category", "0"]);
    std::fs::copy(d.join(ANNOTATED_FILE), d.join(dial_service::DATASET_FILE)).unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dial"))
        .args(["serve", "--data-dir", s(d), "--port", &port.to_string()])
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let got = loop {
        if let Some(r) = http_get(port, "/tasks/annotation?annotator=t1") {
            break Some(r);
        }
        if Instant::now() > deadline {
            break None;
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    let asset = got.as_ref().and_then(|(_, body)| {
        let v: serde_json::Value = serde_json::from_str(body.split("\r\n\r\n").nth(1)?).ok()?;
        v["first_frame_url"].as_str().map(str::to_owned)
    });
    let asset_status = asset.as_deref().and_then(|url| http_get(port, url)).map(|(st, _)| st);
    child.kill().unwrap();
    child.wait().unwrap();
    let (status, _) = got.expect("service answered");
    assert_eq!(status, 200);
    assert_eq!(asset_status, Some(200));
}
