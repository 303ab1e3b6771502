use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};

use dial_core::augment::{
    gaussian_noise_augment, sentence_synonym_augment, word_synonym_augment, GaussianAugmentConfig, GeneratorEndpoint,
    SynonymMap,
};
use dial_core::data::{normalize_instruction, parse_manifest, split_dataset, write_manifest};
use dial_core::embed::{embed_frames, store_read, store_write, STORE_MAGIC};
use dial_core::eval::{
    compute_rank_accuracy, evaluate_policy, examples_from_manifests, run_downstream, run_planted, scene_features,
    train_proxy_policy, EvalReport, PolicyExample, ProxyConfig, SuccessReport, ARM_BASE, ARM_DIAL,
};
use dial_core::fusion::{read_checkpoint, train_fusion as fit_fusion, write_checkpoint, Evaluation, FusionCheckpoint};
use dial_core::hash::fnv1a64;
use dial_core::relabel::{relabel_dataset, CandidatePool, RelabelConfig, Selection, TemperatureSource};
use dial_core::world::{generate_world, EvalInstructionSet, SyntheticEpisode, WorldConfig};
use dial_core::{DatasetManifest, InstructionRecord, InstructionSource, ManifestEntry, Partition};
use serde::Serialize;

use crate::artifact::{parse_jsonl, to_json_bytes, to_jsonl_bytes, write_atomic, StageRun};
use crate::config::{EncoderKind, EncoderSection, Method, RelabelSection};
use crate::encoder::StageEncoder;
use crate::{
    AugmentCommand, CliError, Context, EncoderArgs, EvalPolicyArgs, EvalRelabelsArgs, Experiment, GaussianArgs,
    GenWorldArgs, IngestArgs, PipelineArgs, RelabelArgs, SentenceArgs, ServeArgs, TrainFusionArgs, WordArgs,
};

pub const ANNOTATED_FILE: &str = "annotated.jsonl";
pub const STRUCTURED_FILE: &str = "structured.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const GENERATIONS_FILE: &str = "generations.json";

fn stage_err<E: Display>(stage: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Stage { stage, message: e.to_string() }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => PathBuf::from("."),
    }
}

fn encoder_section(ctx: &Context, args: &EncoderArgs) -> EncoderSection {
    let mut s = ctx.config.encoder.clone();
    if let Some(url) = &args.encoder_url {
        s.kind = EncoderKind::Remote;
        s.base_url = Some(url.clone());
    }
    if let Some(d) = args.dims {
        s.dims = d;
    }
    if let Some(c) = &args.embed_cache {
        s.cache = Some(c.clone());
    }
    if let Some(r) = &args.assets_root {
        s.assets_root = Some(r.clone());
    }
    s
}

fn manifest_input(
    run: &mut StageRun,
    path: &Path,
    artifact: &'static str,
    producer: &'static str,
) -> Result<DatasetManifest, CliError> {
    let bytes = run.input(path, artifact, producer)?;
    parse_manifest(&bytes).map_err(|e| CliError::Stage { stage: run.stage(), message: format!("{}: {e}", path.display()) })
}

#[derive(Serialize)]
struct GenWorldConfig<'a> {
    world: &'a WorldConfig,
}

/// Returns the number of episodes written.
pub fn gen_world(ctx: &Context, args: &GenWorldArgs) -> Result<usize, CliError> {
    const STAGE: &str = "gen-world";
    let mut cfg = ctx.config.world.clone();
    cfg.seed = ctx.seed;
    if let Some(n) = args.episodes {
        cfg.episode_count = n;
    }
    if let Some(n) = args.eval_per_category {
        cfg.eval_per_category = n;
    }
    if let Some(n) = args.distinct_tasks {
        cfg.distinct_tasks = Some(n);
    }
    if let Some(n) = args.proposals_per_command {
        cfg.proposals_per_command = n;
    }
    let world = generate_world(&cfg).map_err(stage_err(STAGE))?;
    let run = StageRun::new(STAGE, ctx.seed, &GenWorldConfig { world: &cfg });

    let mut written = HashSet::new();
    for frame in world.episodes.iter().flat_map(|e| [&e.first, &e.last]) {
        if !written.insert(frame.content_hash) {
            continue;
        }
        let bytes = world
            .assets
            .get(frame.content_hash)
            .ok_or_else(|| CliError::Stage { stage: STAGE, message: format!("no bytes for {}", frame.asset_ref) })?;
        let path = args.out.join(&frame.asset_ref);
        if std::fs::read(&path).ok().as_deref() != Some(bytes) {
            write_atomic(&path, bytes)?;
        }
    }
    run.output(&args.out.join(ANNOTATED_FILE), &write_manifest(&world.annotated_manifest()))?;
    run.output(&args.out.join(STRUCTURED_FILE), &write_manifest(&world.structured_manifest()))?;
    run.output(&args.out.join(TRUTH_FILE), &to_jsonl_bytes(&world.episodes))?;
    run.output(&args.out.join(EVAL_FILE), &to_json_bytes(&world.eval))?;
    run.output(&args.out.join(GENERATIONS_FILE), &to_json_bytes(&world.canned_generations()))?;
    println!("gen-world: {} episodes, {} eval items -> {}", world.episodes.len(), world.eval.items.len(), args.out.display());
    Ok(world.episodes.len())
}

pub fn ingest(ctx: &Context, args: &IngestArgs) -> Result<(), CliError> {
    const STAGE: &str = "ingest";
    let fraction = args.fraction.unwrap_or(ctx.config.ingest.annotated_fraction);
    let mut run = StageRun::new(STAGE, ctx.seed, &serde_json::json!({ "annotated_fraction": fraction }));
    let mut annotated = manifest_input(&mut run, &args.annotated, "annotated manifest", "gen-world")?;
    let structured = manifest_input(&mut run, &args.structured, "structured manifest", "gen-world")?;
    for entry in annotated.entries.iter_mut() {
        let id = entry.trajectory.episode_id.clone();
        for rec in entry.instructions.iter_mut() {
            rec.text = normalize_instruction(&rec.text)
                .map_err(|e| CliError::Stage { stage: STAGE, message: format!("episode {id}, {}: {e}", rec.instruction_id) })?;
        }
    }
    let (a, rest) = split_dataset(&annotated, fraction, ctx.seed).map_err(stage_err(STAGE))?;
    let b_entries = rest
        .entries
        .iter()
        .map(|e| {
            let mut s = structured.get(e.episode_id()).cloned().ok_or_else(|| CliError::Stage {
                stage: STAGE,
                message: format!("episode {} has no structured command", e.episode_id()),
            })?;
            for rec in s.instructions.iter_mut() {
                rec.text = normalize_instruction(&rec.text).map_err(stage_err(STAGE))?;
            }
            Ok(s)
        })
        .collect::<Result<Vec<ManifestEntry>, CliError>>()?;
    let b = DatasetManifest::new(Partition::B, b_entries);
    a.validate().map_err(stage_err(STAGE))?;
    b.validate().map_err(stage_err(STAGE))?;
    run.output(&args.out_a, &write_manifest(&a))?;
    run.output(&args.out_b, &write_manifest(&b))?;
    println!("ingest: {} annotated, {} unannotated episodes", a.len(), b.len());
    Ok(())
}

pub fn augment(ctx: &Context, cmd: &AugmentCommand) -> Result<(), CliError> {
    match cmd {
        AugmentCommand::Sentence(a) => augment_sentence(ctx, a),
        AugmentCommand::Word(a) => augment_word(ctx, a),
        AugmentCommand::Gaussian(a) => augment_gaussian(ctx, a),
    }
}

pub fn augment_sentence(ctx: &Context, args: &SentenceArgs) -> Result<(), CliError> {
    const STAGE: &str = "augment sentence";
    let n = args.n.unwrap_or(ctx.config.augment.sentence_variants);
    let url = args.generator_url.clone().or_else(|| ctx.config.augment.generator_url.clone());
    let mut run = StageRun::new(
        STAGE,
        ctx.seed,
        &serde_json::json!({ "n": n, "generator_url": if args.canned.is_some() { None } else { url.clone() } }),
    );
    let manifest = manifest_input(&mut run, &args.input, "input manifest", "ingest")?;
    let endpoint = match (&args.canned, url) {
        (Some(path), _) => {
            let bytes = run.input(path, "canned generations", "gen-world")?;
            let text = String::from_utf8(bytes).map_err(stage_err(STAGE))?;
            GeneratorEndpoint::canned_from_json(&text).map_err(stage_err(STAGE))?
        }
        (None, Some(url)) => GeneratorEndpoint::remote(url, std::time::Duration::from_secs(60)),
        (None, None) => return Err(CliError::Config("augment sentence needs --canned or --generator-url".into())),
    };
    let mut seen_in = HashSet::new();
    let mut seen_out = HashSet::new();
    let mut records = Vec::new();
    for text in manifest.texts() {
        if !seen_in.insert(text) {
            continue;
        }
        for v in sentence_synonym_augment(text, &endpoint, n).map_err(stage_err(STAGE))? {
            if seen_out.insert(v.clone()) {
                records.push(InstructionRecord::new(format!("gen-{:05}", records.len()), v, InstructionSource::Generated));
            }
        }
    }
    run.output(&args.out, &to_jsonl_bytes(&records))?;
    println!("augment sentence: {} generated instructions from {} inputs", records.len(), seen_in.len());
    Ok(())
}

fn load_synonyms(run: &mut StageRun, path: Option<&Path>) -> Result<SynonymMap, CliError> {
    match path {
        None => Ok(SynonymMap::builtin()),
        Some(p) => {
            let bytes = run.input(p, "synonym map", "a hand-written map")?;
            let text = String::from_utf8(bytes).map_err(stage_err(run.stage()))?;
            SynonymMap::from_json(&text).map_err(stage_err(run.stage()))
        }
    }
}

pub fn augment_word(ctx: &Context, args: &WordArgs) -> Result<(), CliError> {
    const STAGE: &str = "augment word";
    let variants = args.variants.unwrap_or(ctx.config.augment.word_variants);
    let map_path = args.map.clone().or_else(|| ctx.config.augment.synonym_map.clone());
    let mut run = StageRun::new(STAGE, ctx.seed, &serde_json::json!({ "variants": variants }));
    let map = load_synonyms(&mut run, map_path.as_deref())?;
    let mut entries = Vec::new();
    for path in &args.inputs {
        let manifest = manifest_input(&mut run, path, "input manifest", "ingest")?;
        for e in &manifest.entries {
            let mut recs = Vec::new();
            for (i, r) in e.instructions.iter().enumerate() {
                let seed = ctx.seed ^ fnv1a64(r.instruction_id.as_bytes());
                for (v, text) in word_synonym_augment(&r.text, &map, seed, variants).into_iter().enumerate() {
                    let mut rec = InstructionRecord::new(format!("{}-w{i}-{v}", e.episode_id()), text, InstructionSource::Generated);
                    rec.episode_id = Some(e.episode_id().to_owned());
                    recs.push(rec);
                }
            }
            if !recs.is_empty() {
                entries.push(ManifestEntry::new(e.trajectory.clone(), recs));
            }
        }
    }
    let out = DatasetManifest { partition: None, entries };
    out.validate().map_err(stage_err(STAGE))?;
    run.output(&args.out, &write_manifest(&out))?;
    println!("augment word: {} variants over {} episodes", out.instruction_count(), out.len());
    Ok(())
}

pub fn augment_gaussian(ctx: &Context, args: &GaussianArgs) -> Result<(), CliError> {
    const STAGE: &str = "augment gaussian";
    let sigma = args.sigma.unwrap_or(ctx.config.augment.sigma);
    let copies = args.copies.unwrap_or(ctx.config.augment.copies);
    let section = encoder_section(ctx, &args.encoder);
    let mut run = StageRun::new(
        STAGE,
        ctx.seed,
        &serde_json::json!({ "sigma": sigma, "copies": copies, "encoder": &section }),
    );
    let encoder = StageEncoder::build(&section, &parent_dir(&args.inputs[0]), STAGE)?;
    let mut seen = HashSet::new();
    let mut pairs: Vec<(String, Vec<f32>)> = Vec::new();
    for path in &args.inputs {
        let manifest = manifest_input(&mut run, path, "input manifest", "ingest")?;
        for rec in manifest.entries.iter().flat_map(|e| &e.instructions) {
            if !seen.insert(rec.instruction_id.clone()) {
                continue;
            }
            let z = encoder.get().encode_text(&rec.text).map_err(stage_err(STAGE))?.into_values();
            for c in 0..copies {
                let cfg = GaussianAugmentConfig {
                    sigma,
                    dims: z.len(),
                    seed: ctx.seed ^ fnv1a64(rec.instruction_id.as_bytes()) ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                };
                let noisy = gaussian_noise_augment(&z, &cfg).map_err(stage_err(STAGE))?;
                pairs.push((format!("{}#{c}", rec.instruction_id), noisy));
            }
        }
    }
    let bytes = store_write(&pairs, encoder.get().dims()).map_err(stage_err(STAGE))?;
    encoder.finish()?;
    run.output(&args.out, &bytes)?;
    println!("augment gaussian: {} noisy embeddings", pairs.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    best_step: u64,
    holdout_top1: f64,
    temperature: f64,
    evaluations: &'a [Evaluation],
}

pub fn train_fusion(ctx: &Context, args: &TrainFusionArgs) -> Result<(), CliError> {
    const STAGE: &str = "train-fusion";
    let mut cfg = ctx.config.train.clone();
    cfg.seed = ctx.seed;
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.steps {
        cfg.max_steps = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.holdout {
        cfg.holdout_fraction = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    let section = encoder_section(ctx, &args.encoder);
    let mut run = StageRun::new(STAGE, ctx.seed, &serde_json::json!({ "train": &cfg, "encoder": &section }));
    let a = manifest_input(&mut run, &args.dataset_a, "partition A manifest", "ingest")?;
    let encoder = StageEncoder::build(&section, &parent_dir(&args.dataset_a), STAGE)?;
    let outcome = fit_fusion::<f64>(&a, encoder.get(), &cfg).map_err(stage_err(STAGE))?;
    encoder.finish()?;
    let ckpt = &outcome.checkpoint;
    run.output(&args.out, &write_checkpoint(ckpt))?;
    if let Some(report) = &args.report {
        let body = TrainReport {
            best_step: ckpt.step,
            holdout_top1: ckpt.holdout_top1,
            temperature: ckpt.params.temperature(),
            evaluations: &outcome.evaluations,
        };
        run.output(report, &to_json_bytes(&body))?;
    }
    println!(
        "train-fusion: step {} kept, held-out top-1 {:.3} (untrained {:.3})",
        ckpt.step,
        ckpt.holdout_top1,
        outcome.evaluations.first().map_or(0.0, |e| e.top1)
    );
    Ok(())
}

fn relabel_config(section: &RelabelSection) -> RelabelConfig {
    RelabelConfig {
        selection: match section.method {
            Method::TopK => Selection::TopK { k: section.k },
            Method::MinP => Selection::MinP { p: section.p },
        },
        temperature: match section.alpha {
            Some(alpha) => TemperatureSource::Override { alpha },
            None => TemperatureSource::Checkpoint,
        },
    }
}

/// A pool file is either a manifest (all its instructions) or one
/// instruction record per line.
fn parse_pool(bytes: &[u8], path: &Path) -> Result<Vec<InstructionRecord>, CliError> {
    match parse_manifest(bytes) {
        Ok(m) => Ok(m.entries.into_iter().flat_map(|e| e.instructions).collect()),
        Err(_) => parse_jsonl(bytes, path),
    }
}

pub fn relabel(ctx: &Context, args: &RelabelArgs) -> Result<(), CliError> {
    const STAGE: &str = "relabel";
    let mut section = ctx.config.relabel.clone();
    if let Some(m) = args.method {
        section.method = m;
    }
    if let Some(k) = args.k {
        section.k = k;
    }
    if let Some(p) = args.p {
        section.p = p;
    }
    if args.alpha.is_some() {
        section.alpha = args.alpha;
    }
    let config = relabel_config(&section);
    let enc_section = encoder_section(ctx, &args.encoder);
    let mut run = StageRun::new(STAGE, ctx.seed, &serde_json::json!({ "relabel": &config, "encoder": &enc_section }));
    let b = manifest_input(&mut run, &args.input, "partition B manifest", "ingest")?;
    let ckpt_bytes = run.input(&args.checkpoint, "checkpoint", "train-fusion")?;
    let ckpt: FusionCheckpoint<f64> = read_checkpoint(&ckpt_bytes).map_err(stage_err(STAGE))?;
    let mut sources = Vec::with_capacity(args.pool.len());
    for path in &args.pool {
        let bytes = run.input(path, "candidate pool", "augment sentence")?;
        sources.push(parse_pool(&bytes, path)?);
    }
    let encoder = StageEncoder::build(&enc_section, &parent_dir(&args.input), STAGE)?;
    let pool = CandidatePool::build(&sources, encoder.get()).map_err(stage_err(STAGE))?;
    let frames = embed_frames(b.entries.iter().flat_map(|e| [&e.trajectory.first, &e.trajectory.last]), encoder.get())
        .map_err(stage_err(STAGE))?;
    let out = relabel_dataset(&b, &frames, &pool, &ckpt, &config).map_err(stage_err(STAGE))?;
    encoder.finish()?;
    run.output(&args.out, &write_manifest(&out.dataset))?;
    if let Some(stats) = &args.stats {
        run.output(stats, &to_json_bytes(&out.stats))?;
    }
    println!(
        "relabel: {} rows over {} of {} episodes ({} omitted, {} failed), pool {}",
        out.stats.total_rows,
        out.stats.episodes_relabeled,
        out.stats.episodes_in,
        out.stats.episodes_omitted,
        out.stats.failures.len(),
        pool.len()
    );
    Ok(())
}

fn read_truth(run: &mut StageRun, path: &Path) -> Result<Vec<SyntheticEpisode>, CliError> {
    let bytes = run.input(path, "ground truth", "gen-world")?;
    parse_jsonl(&bytes, path)
}

pub fn eval_relabels(ctx: &Context, args: &EvalRelabelsArgs) -> Result<(), CliError> {
    const STAGE: &str = "eval-relabels";
    let mut run = StageRun::new(STAGE, ctx.seed, &serde_json::json!({}));
    let relabels = manifest_input(&mut run, &args.relabels, "relabeled dataset", "relabel")?;
    let truth = read_truth(&mut run, &args.truth)?;
    let ranks = compute_rank_accuracy(&relabels, &truth).map_err(stage_err(STAGE))?;
    let csv = ranks.to_csv();
    let sizes = BTreeMap::from([
        ("relabeled_episodes".to_owned(), relabels.len()),
        ("relabeled_rows".to_owned(), relabels.instruction_count()),
    ]);
    let report = EvalReport { ranks: Some(ranks), success: None, dataset_sizes: sizes };
    run.output(&args.out, &to_json_bytes(&report))?;
    if let Some(path) = &args.csv {
        run.output(path, csv.as_bytes())?;
    }
    let ranks = report.ranks.as_ref().expect("set above");
    for row in ranks.rows.iter().take(10) {
        println!("rank {:>2}: accuracy {:.3}, confidence {:.3}, n = {}", row.rank, row.accuracy, row.mean_confidence, row.count);
    }
    Ok(())
}

#[derive(Serialize)]
struct ArmSummary {
    name: String,
    inputs: Vec<String>,
    train_examples: Vec<usize>,
    reports: Vec<SuccessReport>,
    mean_overall: f64,
}

#[derive(Serialize)]
struct PolicySummary {
    seeds: Vec<u64>,
    eval_items: usize,
    arms: Vec<ArmSummary>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

fn parse_arm(arg: &str) -> Result<(String, Vec<PathBuf>), CliError> {
    let (name, paths) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("arm {arg:?} is not NAME=PATH[,PATH...]")))?;
    let paths: Vec<PathBuf> = paths.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
    if name.is_empty() || paths.is_empty() {
        return Err(CliError::Config(format!("arm {arg:?} is not NAME=PATH[,PATH...]")));
    }
    Ok((name.to_owned(), paths))
}

enum ArmInput {
    Manifest(DatasetManifest),
    Store(dial_core::EmbeddingStore),
}

/// Examples for noisy embeddings keyed `<instruction_id>#<copy>`; the
/// instruction must appear in one of the arm's manifests.
fn store_examples(
    store: &dial_core::EmbeddingStore,
    manifests: &[&DatasetManifest],
    episodes: &HashMap<&str, &SyntheticEpisode>,
    noise: f64,
    seed: u64,
) -> Result<Vec<PolicyExample>, CliError> {
    let owner: HashMap<&str, &str> = manifests
        .iter()
        .flat_map(|m| &m.entries)
        .flat_map(|e| e.instructions.iter().map(move |r| (r.instruction_id.as_str(), e.episode_id())))
        .collect();
    let mut out = Vec::with_capacity(store.len());
    for (key, values) in store.iter() {
        let id = key.rsplit_once('#').map_or(key, |(id, _)| id);
        let ep = owner
            .get(id)
            .and_then(|ep| episodes.get(ep))
            .ok_or_else(|| CliError::Stage { stage: "eval-policy", message: format!("noisy embedding {key} has no episode in its arm") })?;
        let noise_seed = seed ^ fnv1a64(ep.episode_id.as_bytes()) ^ fnv1a64(key.as_bytes()).rotate_left(7);
        out.push(PolicyExample {
            instruction: values.iter().map(|&x| f64::from(x)).collect(),
            scene: scene_features(&ep.scene, noise, noise_seed),
            label: ep.action_class(),
        });
    }
    Ok(out)
}

pub fn eval_policy(ctx: &Context, args: &EvalPolicyArgs) -> Result<(), CliError> {
    let seeds = if args.seeds.is_empty() { vec![ctx.seed] } else { args.seeds.clone() };
    if args.arm.is_empty() {
        return run_experiment(ctx, args.experiment, &seeds, args.out.as_deref());
    }
    const STAGE: &str = "eval-policy";
    let section = encoder_section(ctx, &args.encoder);
    let proxy = ctx.config.downstream.proxy.clone();
    let arms: Vec<(String, Vec<PathBuf>)> = args.arm.iter().map(|s| parse_arm(s)).collect::<Result<_, _>>()?;
    let mut run = StageRun::new(
        STAGE,
        ctx.seed,
        &serde_json::json!({ "seeds": &seeds, "proxy": &proxy, "encoder": &section, "arms": arms.iter().map(|a| &a.0).collect::<Vec<_>>() }),
    );
    let truth_path = args.truth.as_deref().ok_or_else(|| CliError::Config("--arm needs --truth".into()))?;
    let eval_path = args.eval.as_deref().ok_or_else(|| CliError::Config("--arm needs --eval".into()))?;
    let truth = read_truth(&mut run, truth_path)?;
    let eval_bytes = run.input(eval_path, "evaluation set", "gen-world")?;
    let eval: EvalInstructionSet = serde_json::from_slice(&eval_bytes).map_err(stage_err(STAGE))?;

    let mut loaded: HashMap<PathBuf, ArmInput> = HashMap::new();
    for path in arms.iter().flat_map(|a| &a.1) {
        if loaded.contains_key(path) {
            continue;
        }
        let bytes = run.input(path, "training data", "ingest, relabel or augment")?;
        let input = if bytes.starts_with(STORE_MAGIC) {
            ArmInput::Store(store_read(&bytes).map_err(stage_err(STAGE))?)
        } else {
            ArmInput::Manifest(parse_manifest(&bytes).map_err(|e| CliError::Stage { stage: STAGE, message: format!("{}: {e}", path.display()) })?)
        };
        loaded.insert(path.clone(), input);
    }
    let texts: Vec<&str> = loaded
        .values()
        .filter_map(|i| match i {
            ArmInput::Manifest(m) => Some(m.texts()),
            ArmInput::Store(_) => None,
        })
        .flatten()
        .collect();
    let eval = eval.filter_disjoint(texts.iter().copied());
    let episodes: HashMap<&str, &SyntheticEpisode> = truth.iter().map(|e| (e.episode_id.as_str(), e)).collect();

    let root = args.encoder.assets_root.clone().unwrap_or_else(|| parent_dir(truth_path));
    let encoder = StageEncoder::build(&section, &root, STAGE)?;
    let mut summaries = Vec::with_capacity(arms.len());
    for (name, paths) in &arms {
        let manifests: Vec<&DatasetManifest> = paths
            .iter()
            .filter_map(|p| match &loaded[p] {
                ArmInput::Manifest(m) => Some(m),
                ArmInput::Store(_) => None,
            })
            .collect();
        let mut summary = ArmSummary {
            name: name.clone(),
            inputs: paths.iter().map(|p| p.display().to_string()).collect(),
            train_examples: Vec::new(),
            reports: Vec::new(),
            mean_overall: 0.0,
        };
        for &seed in &seeds {
            let mut examples = examples_from_manifests(&manifests, &truth, encoder.get(), proxy.scene_noise, seed)
                .map_err(stage_err(STAGE))?;
            for p in paths {
                if let ArmInput::Store(store) = &loaded[p] {
                    examples.extend(store_examples(store, &manifests, &episodes, proxy.scene_noise, seed)?);
                }
            }
            let policy = train_proxy_policy(&examples, &ProxyConfig { seed, ..proxy.clone() }).map_err(stage_err(STAGE))?;
            let report = evaluate_policy(&policy, &eval, encoder.get(), proxy.scene_noise).map_err(stage_err(STAGE))?;
            summary.train_examples.push(examples.len());
            summary.reports.push(report);
        }
        summary.mean_overall = mean(summary.reports.iter().map(|r| r.overall));
        println!("{:<16} success {:.3} ({} eval items)", summary.name, summary.mean_overall, eval.items.len());
        summaries.push(summary);
    }
    encoder.finish()?;
    let summary = PolicySummary { seeds, eval_items: eval.items.len(), arms: summaries };
    if let Some(out) = &args.out {
        run.output(out, &to_json_bytes(&summary))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ExperimentSummary<T: Serialize> {
    experiment: &'static str,
    seeds: Vec<u64>,
    outcomes: Vec<T>,
    means: BTreeMap<String, f64>,
}

fn run_experiment(ctx: &Context, experiment: Experiment, seeds: &[u64], out: Option<&Path>) -> Result<(), CliError> {
    const STAGE: &str = "eval-policy";
    match experiment {
        Experiment::Downstream => {
            let cfg = &ctx.config.downstream;
            let run = StageRun::new(STAGE, ctx.seed, &serde_json::json!({ "downstream": cfg, "seeds": seeds }));
            let mut outcomes = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let o = run_downstream(cfg, seed).map_err(stage_err(STAGE))?;
                let line: Vec<String> = o.arms.iter().map(|a| format!("{} {:.3}", a.name, a.report.overall)).collect();
                println!("seed {seed}: {}", line.join(", "));
                outcomes.push(o);
            }
            let mut means = BTreeMap::new();
            if let Some(first) = outcomes.first() {
                for arm in &first.arms {
                    let m = mean(outcomes.iter().filter_map(|o| o.arm(&arm.name)).map(|a| a.report.overall));
                    means.insert(arm.name.clone(), m);
                }
            }
            let gain = means.get(ARM_DIAL).copied().unwrap_or(0.0) - means.get(ARM_BASE).copied().unwrap_or(0.0);
            means.insert("gain".into(), gain);
            println!("mean gain of {ARM_DIAL} over {ARM_BASE}: {:.1} points", 100.0 * gain);
            if let Some(out) = out {
                let summary = ExperimentSummary { experiment: "downstream", seeds: seeds.to_vec(), outcomes, means };
                run.output(out, &to_json_bytes(&summary))?;
            }
        }
        Experiment::Planted => {
            let cfg = &ctx.config.planted;
            let run = StageRun::new(STAGE, ctx.seed, &serde_json::json!({ "planted": cfg, "seeds": seeds }));
            let mut outcomes = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let o = run_planted(cfg, seed).map_err(stage_err(STAGE))?;
                println!("seed {seed}: trained top-1 {:.3}, untrained {:.3}", o.trained_top1, o.untrained_top1);
                outcomes.push(o);
            }
            let means = BTreeMap::from([
                ("trained_top1".to_owned(), mean(outcomes.iter().map(|o| o.trained_top1))),
                ("untrained_top1".to_owned(), mean(outcomes.iter().map(|o| o.untrained_top1))),
            ]);
            if let Some(out) = out {
                let summary = ExperimentSummary { experiment: "planted", seeds: seeds.to_vec(), outcomes, means };
                run.output(out, &to_json_bytes(&summary))?;
            }
        }
    }
    Ok(())
}

pub fn serve(ctx: &Context, args: &ServeArgs) -> Result<(), CliError> {
    let mut cfg = dial_service::ServiceConfig::from_env().map_err(|e| CliError::Config(e.to_string()))?;
    let section = &ctx.config.serve;
    if let Some(d) = args.data_dir.clone().or_else(|| section.data_dir.clone()) {
        cfg.data_dir = d;
    }
    if let Some(p) = args.port.or(section.port) {
        cfg.port = p;
    }
    if let Some(q) = args.quota.or(section.quota) {
        cfg.quota = q;
    }
    let rt = tokio::runtime::Runtime::new().map_err(stage_err("serve"))?;
    println!("serve: {} on port {}", cfg.data_dir.display(), cfg.port);
    rt.block_on(dial_service::serve(&cfg)).map_err(stage_err("serve"))
}

/// File names written by `pipeline`, relative to its output directory.
pub mod files {
    pub const DATASET_A: &str = "dataset_a.jsonl";
    pub const DATASET_B: &str = "dataset_b.jsonl";
    pub const GENERATED: &str = "generated.jsonl";
    pub const WORD: &str = "word.jsonl";
    pub const GAUSSIAN: &str = "gaussian.store";
    pub const CHECKPOINT: &str = "fusion.ckpt";
    pub const TRAIN_REPORT: &str = "fusion_report.json";
    pub const DATASET_C: &str = "dataset_c.jsonl";
    pub const RELABEL_STATS: &str = "relabel_stats.json";
    pub const RANK_REPORT: &str = "rank_report.json";
    pub const RANK_CSV: &str = "rank_report.csv";
    pub const POLICY_REPORT: &str = "policy_report.json";
}

pub fn pipeline(ctx: &Context, args: &PipelineArgs) -> Result<(), CliError> {
    let dir = &args.out;
    let p = |name: &str| dir.join(name);
    gen_world(
        ctx,
        &GenWorldArgs {
            out: dir.clone(),
            episodes: args.episodes,
            eval_per_category: None,
            distinct_tasks: args.distinct_tasks,
            proposals_per_command: None,
        },
    )?;
    ingest(
        ctx,
        &IngestArgs {
            annotated: p(ANNOTATED_FILE),
            structured: p(STRUCTURED_FILE),
            fraction: args.fraction,
            out_a: p(files::DATASET_A),
            out_b: p(files::DATASET_B),
        },
    )?;
    augment_sentence(
        ctx,
        &SentenceArgs {
            input: p(files::DATASET_B),
            out: p(files::GENERATED),
            canned: Some(p(GENERATIONS_FILE)),
            generator_url: None,
            n: None,
        },
    )?;
    augment_word(
        ctx,
        &WordArgs { inputs: vec![p(files::DATASET_A), p(files::DATASET_B)], out: p(files::WORD), variants: None, map: None },
    )?;
    augment_gaussian(
        ctx,
        &GaussianArgs {
            inputs: vec![p(files::DATASET_A), p(files::DATASET_B)],
            out: p(files::GAUSSIAN),
            sigma: None,
            copies: None,
            encoder: args.encoder.clone(),
        },
    )?;
    train_fusion(
        ctx,
        &TrainFusionArgs {
            dataset_a: p(files::DATASET_A),
            out: p(files::CHECKPOINT),
            report: Some(p(files::TRAIN_REPORT)),
            batch_size: None,
            steps: args.steps,
            lr: None,
            holdout: None,
            eval_every: None,
            hidden: None,
            encoder: args.encoder.clone(),
        },
    )?;
    relabel(
        ctx,
        &RelabelArgs {
            input: p(files::DATASET_B),
            checkpoint: p(files::CHECKPOINT),
            pool: vec![p(files::DATASET_A), p(files::GENERATED)],
            method: args.method,
            k: args.k,
            p: args.p,
            alpha: None,
            out: p(files::DATASET_C),
            stats: Some(p(files::RELABEL_STATS)),
            encoder: args.encoder.clone(),
        },
    )?;
    eval_relabels(
        ctx,
        &EvalRelabelsArgs {
            relabels: p(files::DATASET_C),
            truth: p(TRUTH_FILE),
            out: p(files::RANK_REPORT),
            csv: Some(p(files::RANK_CSV)),
        },
    )?;
    let arm = |name: &str, extra: &[&str]| {
        let mut paths = vec![p(files::DATASET_A), p(files::DATASET_B)];
        paths.extend(extra.iter().map(|f| p(f)));
        let joined: Vec<String> = paths.iter().map(|x| x.display().to_string()).collect();
        format!("{name}={}", joined.join(","))
    };
    eval_policy(
        ctx,
        &EvalPolicyArgs {
            seeds: Vec::new(),
            experiment: Experiment::Downstream,
            arm: vec![
                arm(ARM_BASE, &[]),
                arm(ARM_DIAL, &[files::DATASET_C]),
                arm(dial_core::eval::ARM_GAUSSIAN, &[files::GAUSSIAN]),
                arm(dial_core::eval::ARM_WORD, &[files::WORD]),
            ],
            truth: Some(p(TRUTH_FILE)),
            eval: Some(p(EVAL_FILE)),
            out: Some(p(files::POLICY_REPORT)),
            encoder: args.encoder.clone(),
        },
    )
}
