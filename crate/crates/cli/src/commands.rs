use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sitqa_core::analysis::{self, LengthOptions};
use sitqa_core::annotation::{
    build_study, AnnotationStore, GroundTruthExport, GroundTruthLabel, Mode, ModeMix, Task,
};
use sitqa_core::datapoint::{
    read_jsonl, write_jsonl, Blocklist, QueryClassifier, SituationalDatapoint, Validator,
    ValidityVerdict,
};
use sitqa_core::decomposition::{decompose, genericize_room};
use sitqa_core::embedding::{
    CachedEmbedder, EmbeddingProvider, EmbeddingRecord, HashedBowEmbedder,
};
use sitqa_core::evaluation::{
    answer_all, compute_flags, compute_report, render_reports, Answerer, EvalReport, LlmAnswerer,
    RecordedAnswerer, RecordedPrediction, SceneOracle,
};
use sitqa_core::pge::PgeEngine;
use sitqa_core::provider::{
    ChatProvider, CompletionParams, LlmClassifier, RecordingProvider, ReplayProvider,
};
use sitqa_core::scene_graph::{load_scene, SceneGraph};

use crate::remote::{HttpChatProvider, HttpEmbeddingProvider, RetryPolicy};
use crate::rundir::RunDir;
use crate::settings::{resolve, FlagLayer, Settings};
use crate::{
    exit_code, AnalyzeArgs, Cli, Command, DecomposeArgs, EvaluateArgs, ExportArgs, GenerateArgs,
    ProviderArgs, ServeArgs, UsageError, ValidateArgs,
};

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let mut flags = FlagLayer::default();
    collect_flags(&cli.command, &mut flags);
    let settings = resolve(cli.config.as_deref(), flags)?;
    let mut run = RunDir::create(cli.out.as_deref(), cli.command.name())?;
    run.snapshot(&settings)?;
    let result = match &cli.command {
        Command::Generate(a) => generate(&settings, a, cli.debug, &mut run),
        Command::Validate(a) => validate(&settings, a, cli.debug, &mut run),
        Command::Decompose(a) => decompose_cmd(a, &mut run),
        Command::AnnotateServe(a) => annotate_serve(&settings, a, &mut run),
        Command::Evaluate(a) => evaluate(&settings, a, cli.debug, &mut run),
        Command::Analyze(a) => analyze(&settings, a, cli.debug, &mut run),
        Command::ExportEmbeddings(a) => export_embeddings(&settings, a, cli.debug, &mut run),
    };
    match &result {
        Ok(()) => run.finish(0, None),
        Err(e) => run.finish(exit_code(e), Some(format!("{e:#}"))),
    }
    result
}

fn provider_flags(p: &ProviderArgs, f: &mut FlagLayer) {
    f.set("scene", p.scene.as_ref())
        .set("chat_endpoint", p.chat_endpoint.as_ref())
        .set("chat_replay", p.chat_replay.as_ref())
        .set("generation.model_id", p.model.as_ref())
        .set("generation.temperature", p.temperature)
        .set("generation.seed", p.seed)
        .set("embedding_endpoint", p.embedding_endpoint.as_ref())
        .set("embedding_model", p.embedding_model.as_ref())
        .set("embedding_replay", p.embedding_replay.as_ref())
        .set("embedding_dim", p.embedding_dim)
        .set("classifier_replay", p.classifier_replay.as_ref())
        .flag("classify_with_chat", p.classify_with_chat);
}

fn collect_flags(cmd: &Command, f: &mut FlagLayer) {
    match cmd {
        Command::Generate(a) => {
            provider_flags(&a.providers, f);
            f.set("generation.n", a.n)
                .set("generation.m", a.m)
                .set("generation.k", a.k)
                .set("generation.tau", a.tau)
                .set("generation.x", a.x)
                .set("generation.max_regen", a.max_regen)
                .set("generation.target_size", a.target_size)
                .flag("record_transcript", a.record_transcript);
        }
        Command::Validate(a) => provider_flags(&a.providers, f),
        Command::Evaluate(a) => provider_flags(&a.providers, f),
        Command::Analyze(a) => provider_flags(&a.providers, f),
        Command::ExportEmbeddings(a) => provider_flags(&a.providers, f),
        Command::AnnotateServe(a) => {
            f.set("study.annotators_per_task", a.annotators);
            if let Some(mix) = &a.mix {
                match parse_mix(mix) {
                    Some(m) => {
                        f.set("study.mode_mix", Some(m));
                    }
                    // surfaces as a usage error during resolution
                    None => {
                        f.set("study.mode_mix", Some(mix));
                    }
                }
            }
        }
        Command::Decompose(_) => {}
    }
}

fn parse_mix(s: &str) -> Option<ModeMix> {
    let (a, b) = s.split_once(':')?;
    Some(ModeMix {
        situational: a.trim().parse().ok()?,
        consensus: b.trim().parse().ok()?,
    })
}

// ---------------------------------------------------------------------------
// inputs and providers
// ---------------------------------------------------------------------------

fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn read_datapoints(path: &Path) -> anyhow::Result<Vec<SituationalDatapoint>> {
    let ds: Vec<SituationalDatapoint> = read_jsonl_file(path)?;
    let mut seen = BTreeSet::new();
    let dups: Vec<&str> = ds
        .iter()
        .filter(|d| !seen.insert(&d.id))
        .map(|d| d.id.as_str())
        .collect();
    if !dups.is_empty() {
        bail!(
            "{}: duplicate datapoint ids {}",
            path.display(),
            dups.join(", ")
        );
    }
    Ok(ds)
}

fn require_scene(settings: &Settings) -> anyhow::Result<SceneGraph> {
    let path = settings.scene.as_ref().ok_or_else(|| {
        UsageError("a scene graph is required (--scene or \"scene\" in the config file)".into())
    })?;
    read_scene(path)
}

fn read_scene(path: &Path) -> anyhow::Result<SceneGraph> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading scene {}", path.display()))?;
    load_scene(&text).with_context(|| format!("loading scene {}", path.display()))
}

fn retry(settings: &Settings) -> RetryPolicy {
    RetryPolicy {
        max_retries: settings.retries,
        ..RetryPolicy::default()
    }
}

fn chat_provider(settings: &Settings, debug: bool) -> anyhow::Result<Box<dyn ChatProvider>> {
    match (&settings.chat_replay, &settings.chat_endpoint) {
        (Some(_), Some(_)) => {
            Err(UsageError("set either chat_replay or chat_endpoint, not both".into()).into())
        }
        (Some(path), None) => {
            Ok(Box::new(ReplayProvider::load(path).with_context(|| {
                format!("loading transcript {}", path.display())
            })?))
        }
        (None, Some(url)) => Ok(Box::new(HttpChatProvider::new(
            url,
            retry(settings),
            debug,
        )?)),
        (None, None) => Err(UsageError(
            "no chat model configured (--chat-replay or --chat-endpoint)".into(),
        )
        .into()),
    }
}

fn embedder(settings: &Settings, debug: bool) -> anyhow::Result<Box<dyn EmbeddingProvider>> {
    match (&settings.embedding_replay, &settings.embedding_endpoint) {
        (Some(_), Some(_)) => Err(UsageError(
            "set either embedding_replay or embedding_endpoint, not both".into(),
        )
        .into()),
        (Some(path), None) => {
            Ok(Box::new(CachedEmbedder::load(path).map_err(|e| {
                anyhow!("loading embeddings {}: {e}", path.display())
            })?))
        }
        (None, Some(url)) => Ok(Box::new(HttpEmbeddingProvider::new(
            url,
            &settings.embedding_model,
            settings.embedding_dim,
            retry(settings),
            debug,
        )?)),
        (None, None) => Ok(Box::new(HashedBowEmbedder::new(settings.embedding_dim))),
    }
}

fn params(settings: &Settings) -> CompletionParams {
    CompletionParams {
        model_id: settings.generation.model_id.clone(),
        temperature: settings.generation.temperature,
        seed: settings.generation.seed,
    }
}

fn classifier(
    settings: &Settings,
    debug: bool,
) -> anyhow::Result<Option<Box<dyn QueryClassifier>>> {
    if let Some(path) = &settings.classifier_replay {
        if settings.classify_with_chat {
            return Err(UsageError(
                "set either classifier_replay or classify_with_chat, not both".into(),
            )
            .into());
        }
        let replay = ReplayProvider::load(path)
            .with_context(|| format!("loading transcript {}", path.display()))?;
        return Ok(Some(Box::new(LlmClassifier::new(replay, params(settings)))));
    }
    if settings.classify_with_chat {
        let url = settings.chat_endpoint.as_ref().ok_or_else(|| {
            UsageError("classify_with_chat needs a live chat_endpoint; use classifier_replay for transcripts".into())
        })?;
        let http = HttpChatProvider::new(url, retry(settings), debug)?;
        return Ok(Some(Box::new(LlmClassifier::new(http, params(settings)))));
    }
    Ok(None)
}

fn as_dyn(c: &mut Option<Box<dyn QueryClassifier>>) -> Option<&mut dyn QueryClassifier> {
    match c {
        Some(b) => Some(b.as_mut()),
        None => None,
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn generate(
    settings: &Settings,
    _args: &GenerateArgs,
    debug: bool,
    run: &mut RunDir,
) -> anyhow::Result<()> {
    let scene = require_scene(settings)?;
    let mut chat = RecordingProvider::new(chat_provider(settings, debug)?);
    let mut embed = embedder(settings, debug)?;
    let mut cls = classifier(settings, debug)?;
    let engine = PgeEngine::new(&scene, settings.generation.clone());
    let (outcome, failure) = match engine.run(&mut chat, embed.as_mut(), as_dyn(&mut cls)) {
        Ok(o) => (o, None),
        Err(e) => (*e.partial, Some(e.failure)),
    };

    for rec in &outcome.log {
        run.event(
            "iteration",
            json!({
                "iteration": rec.iteration,
                "attempts": rec.attempts.len(),
                "regenerations": rec.regenerations,
                "accepted": rec.accepted_ids.len(),
                "dropped_similar": rec.dropped_similar.len(),
                "db_size": rec.db_size_after,
                "error": rec.error,
            }),
        );
    }
    run.write("datapoints.jsonl", &write_jsonl(&outcome.datapoints))?;
    run.write_json("generation_log.json", &outcome.log)?;
    let records: Vec<EmbeddingRecord> = outcome
        .db
        .entries()
        .iter()
        .map(|e| EmbeddingRecord {
            id: e.id.clone(),
            text: e.text.clone(),
            vector: e.embedding.clone(),
            labels: None,
        })
        .collect();
    run.write("embeddings.jsonl", &write_jsonl(&records))?;
    if settings.record_transcript {
        let (_, transcript) = chat.into_parts();
        run.write("transcript.jsonl", &write_jsonl(&transcript))?;
    }

    let regens: usize = outcome.log.iter().map(|r| r.regenerations).sum();
    println!(
        "generated {} datapoints in {} iterations ({} regenerations) -> {}",
        outcome.datapoints.len(),
        outcome.log.len(),
        regens,
        run.root().display()
    );
    match failure {
        Some(f) => Err(anyhow!(f).context(format!(
            "generation stopped at iteration {}; partial output kept",
            outcome.log.len()
        ))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ValidationRow {
    pub id: String,
    pub query: String,
    pub accepted: bool,
    pub verdict: ValidityVerdict,
}

fn validate(
    settings: &Settings,
    args: &ValidateArgs,
    debug: bool,
    run: &mut RunDir,
) -> anyhow::Result<()> {
    let scene = require_scene(settings)?;
    let datapoints = read_datapoints(&args.input)?;
    let validator = Validator::new(Blocklist::from_scene(&scene, &args.synonyms));
    let mut cls = classifier(settings, debug)?;
    let mut rows = Vec::with_capacity(datapoints.len());
    for d in &datapoints {
        let verdict = validator.validate(d, &scene, as_dyn(&mut cls))?;
        rows.push(ValidationRow {
            id: d.id.clone(),
            query: d.query_text.clone(),
            accepted: verdict.accepted(),
            verdict,
        });
    }
    let accepted: Vec<&SituationalDatapoint> = datapoints
        .iter()
        .zip(&rows)
        .filter(|(_, r)| r.accepted)
        .map(|(d, _)| d)
        .collect();
    run.write("validation.jsonl", &write_jsonl(&rows))?;
    run.write("accepted.jsonl", &write_jsonl(&accepted))?;
    let rejected: Vec<&ValidationRow> = rows.iter().filter(|r| !r.accepted).collect();
    run.event(
        "validated",
        json!({ "total": rows.len(), "rejected": rejected.len() }),
    );
    println!(
        "{} of {} datapoints accepted -> {}",
        accepted.len(),
        rows.len(),
        run.root().display()
    );
    for r in &rejected {
        println!("  rejected {}: {}", r.id, r.verdict.reasons.join("; "));
    }
    if !rejected.is_empty() {
        let ids: Vec<&str> = rejected.iter().map(|r| r.id.as_str()).collect();
        bail!(
            "{} datapoints failed validation: {}",
            ids.len(),
            ids.join(", ")
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

fn decompose_cmd(args: &DecomposeArgs, run: &mut RunDir) -> anyhow::Result<()> {
    let datapoints = read_datapoints(&args.input)?;
    let empty: Vec<&str> = datapoints
        .iter()
        .filter(|d| d.consensus_states.is_empty())
        .map(|d| d.id.as_str())
        .collect();
    if !empty.is_empty() {
        bail!("datapoints without consensus states: {}", empty.join(", "));
    }
    let queries: Vec<_> = datapoints.iter().flat_map(decompose).collect();
    run.write("consensus_queries.jsonl", &write_jsonl(&queries))?;
    if args.genericize {
        let generic: Vec<SituationalDatapoint> = datapoints
            .iter()
            .map(|d| SituationalDatapoint {
                query_text: genericize_room(&d.query_text),
                ..d.clone()
            })
            .collect();
        run.write("genericized.jsonl", &write_jsonl(&generic))?;
    }
    println!(
        "{} consensus queries from {} datapoints -> {}",
        queries.len(),
        datapoints.len(),
        run.root().display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// annotate-serve
// ---------------------------------------------------------------------------

fn annotate_serve(settings: &Settings, args: &ServeArgs, run: &mut RunDir) -> anyhow::Result<()> {
    if let Some(mix) = &args.mix {
        if parse_mix(mix).is_none() {
            return Err(UsageError(format!("--mix expects S:C, got `{mix}`")).into());
        }
    }
    let tasks: Vec<Task> = match (&args.tasks, &args.input) {
        (Some(p), _) => read_jsonl_file(p)?,
        (None, Some(p)) => build_study(&read_datapoints(p)?, settings.study.mode_mix),
        (None, None) => return Err(UsageError("--input or --tasks is required".into()).into()),
    };
    if tasks.is_empty() {
        bail!("the study has no tasks");
    }
    run.write("tasks.jsonl", &write_jsonl(&tasks))?;
    let log_path: PathBuf = args
        .log
        .clone()
        .unwrap_or_else(|| run.path("annotations.jsonl"));
    let store = AnnotationStore::open(tasks, settings.study, &log_path)?;
    let store = Arc::new(RwLock::new(store));

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    let served = Arc::clone(&store);
    let bind = args.bind.clone();
    let ui = args.ui_dir.clone();
    let exit_when_complete = args.exit_when_complete;
    let addr = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| UsageError(format!("cannot bind {bind}: {e}")))?;
        let addr = listener.local_addr()?;
        println!("annotation service listening on http://{addr}");
        let watch = Arc::clone(&served);
        let shutdown = async move {
            let complete = async {
                loop {
                    tokio::time::sleep(Duration::from_millis(200)).await;
                    let done = watch
                        .read()
                        .map(|s| s.progress().completed_tasks == s.tasks().count())
                        .unwrap_or(true);
                    if done {
                        break;
                    }
                }
            };
            if exit_when_complete {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = complete => {}
                }
            } else {
                let _ = tokio::signal::ctrl_c().await;
            }
        };
        crate::server::serve(listener, served, ui, shutdown).await?;
        Ok::<_, anyhow::Error>(addr)
    })?;
    run.event("served", json!({ "addr": addr.to_string() }));

    let store = store.read().map_err(|_| anyhow!("store lock poisoned"))?;
    run.write("groundtruth.jsonl", &store.export_ground_truth_jsonl())?;
    let summary = store.summary();
    run.write_json("summary.json", &summary)?;
    println!(
        "stopped: {}/{} tasks complete; ground truth -> {}",
        summary.completed_tasks,
        summary.total_tasks,
        run.path("groundtruth.jsonl").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Accepts either the study export (`votes`, `mode`) or bare labels.
pub fn read_ground_truth(path: &Path) -> anyhow::Result<Vec<(GroundTruthLabel, Option<Mode>)>> {
    let values: Vec<Value> = read_jsonl_file(path)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let parsed = if v.get("votes").is_some() {
                serde_json::from_value::<GroundTruthExport>(v).map(|e| {
                    let mode = e.mode;
                    (GroundTruthLabel::from(e), Some(mode))
                })
            } else {
                serde_json::from_value::<GroundTruthLabel>(v).map(|g| (g, None))
            };
            parsed.with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn parse_recorded(entry: &str) -> anyhow::Result<(String, PathBuf)> {
    let (name, path) = entry
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--recorded expects NAME=FILE, got `{entry}`")))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn evaluate(
    settings: &Settings,
    args: &EvaluateArgs,
    debug: bool,
    run: &mut RunDir,
) -> anyhow::Result<()> {
    let datapoints = read_datapoints(&args.input)?;
    let gt: Vec<GroundTruthLabel> = read_ground_truth(&args.ground_truth)?
        .into_iter()
        .filter(|(_, mode)| *mode != Some(Mode::Consensus))
        .map(|(g, _)| g)
        .collect();

    let mut reports: Vec<EvalReport> = Vec::new();
    for kind in &args.answerer {
        match kind.as_str() {
            "oracle" => {
                let oracle = SceneOracle::new(require_scene(settings)?, args.apply_consensus);
                let preds = oracle.predict_all(&datapoints)?;
                run.write("predictions-oracle.jsonl", &write_jsonl(&preds))?;
                let mut r = compute_report("oracle", &preds, &gt, None)?;
                r.config = json!({ "answerer": "oracle", "apply_consensus": args.apply_consensus });
                reports.push(r);
            }
            "llm" => {
                let scene = require_scene(settings)?;
                let mut answerer =
                    LlmAnswerer::new(chat_provider(settings, debug)?, params(settings), scene)
                        .with_reasoning(args.reasoning)
                        .applying_consensus(args.apply_consensus);
                let preds = answer_all(&mut answerer, &datapoints)?;
                let name = format!("llm:{}", settings.generation.model_id);
                run.write("predictions-llm.jsonl", &write_jsonl(&preds))?;
                let mut r = compute_report(&name, &preds, &gt, None)?;
                r.config = json!({
                    "answerer": "llm",
                    "model_id": settings.generation.model_id,
                    "temperature": settings.generation.temperature,
                    "seed": settings.generation.seed,
                    "apply_consensus": args.apply_consensus,
                    "reasoning": args.reasoning,
                });
                reports.push(r);
            }
            "recorded" => {
                if args.recorded.is_empty() {
                    return Err(UsageError(
                        "--answerer recorded needs at least one --recorded NAME=FILE".into(),
                    )
                    .into());
                }
                for entry in &args.recorded {
                    let (name, path) = parse_recorded(entry)?;
                    let records: Vec<RecordedPrediction> = read_jsonl_file(&path)?;
                    let mut answerer = RecordedAnswerer::new(name.clone(), &records);
                    let preds = answer_all(&mut answerer, &datapoints)?;
                    let flags = compute_flags(&records, &gt);
                    run.write(&format!("predictions-{name}.jsonl"), &write_jsonl(&preds))?;
                    let mut r = compute_report(answerer.name(), &preds, &gt, Some(&flags))?;
                    r.config = json!({ "answerer": "recorded", "source": path });
                    reports.push(r);
                }
            }
            other => {
                return Err(UsageError(format!(
                    "unknown answerer `{other}` (oracle, llm, recorded)"
                ))
                .into())
            }
        }
    }
    run.write_json("report.json", &reports)?;
    let table = render_reports(&reports);
    run.write("report.txt", &table)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze / export-embeddings
// ---------------------------------------------------------------------------

fn optional_scene(settings: &Settings) -> anyhow::Result<Option<SceneGraph>> {
    settings.scene.as_deref().map(read_scene).transpose()
}

fn analyze(
    settings: &Settings,
    args: &AnalyzeArgs,
    debug: bool,
    run: &mut RunDir,
) -> anyhow::Result<()> {
    let scene = optional_scene(settings)?;
    let mut datapoints = read_datapoints(&args.input)?;
    let mut cls = classifier(settings, debug)?;
    for d in datapoints.iter_mut() {
        d.labels = Some(analysis::label(d, scene.as_ref(), as_dyn(&mut cls))?);
    }
    let opts = LengthOptions {
        strip_question_mark: !args.keep_question_mark,
        char_bin: args.char_bin,
    };
    let report = analysis::stats_report(&datapoints, &opts)?;
    run.write("labelled.jsonl", &write_jsonl(&datapoints))?;
    let mut stats = serde_json::to_value(&report)?;
    stats["labelled_by"] = json!({
        "room": if scene.is_some() { "keywords+scene" } else { "keywords" },
        "situational_temporal": if cls.is_some() { "classifier" } else { "deferred" },
    });
    run.write_json("stats.json", &stats)?;
    println!(
        "{} queries; median {} chars, {} words",
        report.total, report.median_chars, report.median_words
    );
    for (room, pct) in &report.room_pct {
        println!("  {room:<11} {pct:6.2}%");
    }
    if let Some(p) = report.situational_pct {
        println!("  situational {p:.2}%");
    }
    if let Some(p) = report.spatial_pct {
        println!("  spatial     {p:.2}%");
    }
    Ok(())
}

fn export_embeddings(
    settings: &Settings,
    args: &ExportArgs,
    debug: bool,
    run: &mut RunDir,
) -> anyhow::Result<()> {
    let datapoints = read_datapoints(&args.input)?;
    let mut embed = embedder(settings, debug)?;
    let texts: Vec<String> = datapoints.iter().map(|d| d.query_text.clone()).collect();
    let vectors = if texts.is_empty() {
        Vec::new()
    } else {
        embed.embed(&texts)?
    };
    let records: Vec<EmbeddingRecord> = datapoints
        .iter()
        .zip(vectors)
        .map(|(d, v)| EmbeddingRecord {
            id: d.id.clone(),
            text: d.query_text.clone(),
            vector: v,
            labels: d.labels,
        })
        .collect();
    run.write("embeddings.jsonl", &write_jsonl(&records))?;
    println!(
        "{} embeddings -> {}",
        records.len(),
        run.path("embeddings.jsonl").display()
    );
    Ok(())
}
