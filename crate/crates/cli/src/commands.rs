use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use vlnmp::alignment::CandidateSetRecord;
use vlnmp::dataset_eval::{
    phrase_set_prf, GoldRecord, PhraseMatchReport, PhraseTally, ViewpointTally,
};
use vlnmp::instruction::{restrict_setting, MultiModalInstruction, Setting, TextInstruction};
use vlnmp::io::{read_json, read_jsonl, write_jsonl};
use vlnmp::nav::{
    aggregate, evaluate_episode, EpisodeResult, GraphRecord, NavGraph, TrajectoryRecord,
};
use vlnmp::pipeline::{
    pre_explore_build, AugmentRecord, AugmentStore, CaptionFixtureRecord, CaptionerClient,
    DatasetOutput, DetectorClient, ExtractorClient, FixtureCaptioner, FixtureDetector,
    FixtureExtractor, MissRecord, PhraseFixtureRecord, Pipeline, PipelineConfig, RemoteEndpoint,
};

use crate::config::FileConfig;
use crate::{
    AlignArgs, BuildArgs, Cli, CliError, Command, EvalNavArgs, EvalPhrasesArgs, EvalViewpointsArgs,
    PreExploreArgs, StatsArgs,
};

const DEFAULT_SETTINGS: [Setting; 3] = [Setting::Aligned, Setting::Related, Setting::Terminal];

struct Ctx<'a> {
    file: FileConfig,
    pool: rayon::ThreadPool,
    summary: bool,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn emit(&mut self, value: serde_json::Value) -> Result<(), CliError> {
        if self.summary {
            writeln!(self.stdout, "{value:#}").map_err(|e| CliError::Environment(e.to_string()))?;
        }
        Ok(())
    }

    fn note(&mut self, msg: &str) {
        let _ = writeln!(self.stderr, "{msg}");
    }
}

pub(crate) fn dispatch(
    cli: &Cli,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let jobs = cli.jobs.or(file.jobs);
    if jobs == Some(0) {
        return Err(CliError::Invalid("--jobs must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Environment(e.to_string()))?;
    let mut ctx = Ctx {
        file,
        pool,
        summary: cli.summary,
        stdout,
        stderr,
    };
    match &cli.command {
        Command::Align(a) => align(a, &mut ctx),
        Command::Build(a) => build(a, &mut ctx),
        Command::EvalNav(a) => eval_nav(a, &mut ctx),
        Command::EvalPhrases(a) => eval_phrases(a, &mut ctx),
        Command::EvalViewpoints(a) => eval_viewpoints(a, &mut ctx),
        Command::PreExplore(a) => pre_explore(a, &mut ctx),
        Command::Stats(a) => stats(a, &mut ctx),
    }
}

fn settings_or_default(requested: &[Setting]) -> Vec<Setting> {
    if requested.is_empty() {
        DEFAULT_SETTINGS.to_vec()
    } else {
        let mut s: Vec<Setting> = Vec::new();
        for r in requested {
            if !s.contains(r) {
                s.push(*r);
            }
        }
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn setting_summary(records: &[MultiModalInstruction]) -> serde_json::Value {
    json!({
        "records": records.len(),
        "with_prompts": records.iter().filter(|m| !m.prompts().is_empty()).count(),
        "mean_prompts": mean(records.iter().map(|m| m.prompts().len() as f64)),
        "mean_s_all": mean(records.iter().filter_map(|m| m.scores()).map(|s| s.s_all)),
    })
}

/// Writes the requested settings and the miss log; returns the summary.
fn write_output(
    out: &DatasetOutput,
    dir: &Path,
    settings: &[Setting],
) -> Result<serde_json::Value, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Environment(format!("{}: {e}", dir.display())))?;
    let mut per_setting = serde_json::Map::new();
    for &s in settings {
        let records: Vec<MultiModalInstruction> = match s {
            Setting::TextOnly => out
                .aligned
                .iter()
                .map(|m| restrict_setting(m, Setting::TextOnly, None, 0).with_scores(None))
                .collect(),
            _ => out.records(s).to_vec(),
        };
        write_jsonl(dir.join(format!("{s}.jsonl")), &records)?;
        per_setting.insert(s.to_string(), setting_summary(&records));
    }
    write_jsonl(dir.join("misses.jsonl"), &out.misses)?;
    Ok(json!({
        "instructions": out.aligned.len(),
        "misses": out.misses.len(),
        "settings": per_setting,
    }))
}

fn align(a: &AlignArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = a.overrides.resolve(&ctx.file)?;
    let instructions: Vec<TextInstruction> = read_jsonl(&a.instructions)?;
    let candidates: Vec<CandidateSetRecord> = read_jsonl(&a.candidates)?;
    let detector = FixtureDetector::new(candidates);
    let pipeline = Pipeline::new(&detector, cfg);
    let out = ctx.pool.install(|| pipeline.run(&instructions))?;
    let summary = write_output(&out, &a.out, &settings_or_default(&a.setting))?;
    ctx.note(&format!(
        "aligned {} instructions into {} ({} misses)",
        out.aligned.len(),
        a.out.display(),
        out.misses.len()
    ));
    ctx.emit(summary)
}

fn endpoint(flag: &Option<String>, file: &Option<String>) -> Option<String> {
    flag.clone().or_else(|| file.clone())
}

fn detector(
    candidates: Option<&Path>,
    flag: &Option<String>,
    file: &FileConfig,
) -> Result<Box<dyn DetectorClient>, CliError> {
    if let Some(path) = candidates {
        let records: Vec<CandidateSetRecord> = read_jsonl(path)?;
        return Ok(Box::new(FixtureDetector::new(records)));
    }
    match endpoint(flag, &file.detect_endpoint) {
        Some(url) => Ok(Box::new(RemoteEndpoint::new(url, file.remote_options()))),
        None => Err(CliError::Invalid(
            "no detector: pass --candidates or configure detect_endpoint".into(),
        )),
    }
}

fn build(a: &BuildArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let mut cfg: PipelineConfig = a.overrides.resolve(&ctx.file)?;
    if let Some(g) = a.gamma {
        cfg.gamma = g;
        cfg.validate()?;
    }
    let instructions: Vec<TextInstruction> = read_jsonl(&a.instructions)?;
    let detector = detector(a.candidates.as_deref(), &a.detect_endpoint, &ctx.file)?;

    let extractor: Option<Box<dyn ExtractorClient>> = match (
        &a.phrases,
        endpoint(&a.extract_endpoint, &ctx.file.extract_endpoint),
    ) {
        (Some(path), _) => Some(Box::new(FixtureExtractor::new(read_jsonl::<
            PhraseFixtureRecord,
        >(path)?))),
        (None, Some(url)) => Some(Box::new(RemoteEndpoint::new(
            url,
            ctx.file.remote_options(),
        ))),
        (None, None) => None,
    };
    let captioner: Option<Box<dyn CaptionerClient>> = match (
        &a.captions,
        endpoint(&a.caption_endpoint, &ctx.file.caption_endpoint),
    ) {
        (Some(path), _) => Some(Box::new(FixtureCaptioner::new(read_jsonl::<
            CaptionFixtureRecord,
        >(path)?))),
        (None, Some(url)) => Some(Box::new(RemoteEndpoint::new(
            url,
            ctx.file.remote_options(),
        ))),
        (None, None) => None,
    };
    let store = match &a.augment {
        Some(path) => Some(AugmentStore::new(read_jsonl::<AugmentRecord>(path)?)?),
        None => None,
    };

    let pipeline = Pipeline {
        extractor: extractor.as_deref(),
        detector: detector.as_ref(),
        captioner: captioner.as_deref(),
        augment: store.as_ref(),
        config: cfg,
    };
    let out = ctx.pool.install(|| pipeline.run(&instructions))?;
    let summary = write_output(&out, &a.out, &settings_or_default(&a.setting))?;
    ctx.note(&format!(
        "built {} instructions into {}",
        out.aligned.len(),
        a.out.display()
    ));
    ctx.emit(summary)
}

fn load_graph(path: &Path) -> Result<NavGraph, CliError> {
    let record: GraphRecord = read_json(path)?;
    NavGraph::from_record(record).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    instruction_id: &'a str,
    #[serde(flatten)]
    result: EpisodeResult,
}

fn eval_nav(a: &EvalNavArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let graph = load_graph(&a.graph)?;
    let trajectories: Vec<TrajectoryRecord> = read_jsonl(&a.trajectories)?;
    let mut results = Vec::with_capacity(trajectories.len());
    for t in &trajectories {
        let reference = t.reference.as_deref().ok_or_else(|| {
            CliError::Invalid(format!(
                "trajectory {} has no reference path",
                t.instruction_id
            ))
        })?;
        let r = evaluate_episode(&graph, &t.nodes, &t.start, &t.goal, reference, a.threshold)
            .map_err(|e| CliError::Invalid(format!("trajectory {}: {e}", t.instruction_id)))?;
        results.push(r);
    }
    let summary = aggregate(&results).map_err(|e| CliError::Invalid(e.to_string()))?;
    if let Some(out) = &a.out {
        let lines: Vec<_> = trajectories
            .iter()
            .zip(&results)
            .map(|(t, &result)| EpisodeLine {
                instruction_id: &t.instruction_id,
                result,
            })
            .collect();
        write_jsonl(out, &lines)?;
    }
    ctx.note(&format!(
        "{} episodes: SR {:.2} SPL {:.4} nDTW {:.4} GP {:.4}",
        summary.episodes, summary.sr, summary.spl, summary.ndtw, summary.gp
    ));
    ctx.emit(serde_json::to_value(summary).expect("summary serializes"))
}

#[derive(Deserialize)]
struct PredictionRecord {
    instruction_id: String,
    phrases: Vec<String>,
}

#[derive(Serialize)]
struct PhraseLine<'a> {
    instruction_id: &'a str,
    #[serde(flatten)]
    report: PhraseMatchReport,
}

fn eval_phrases(a: &EvalPhrasesArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let predictions: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    let gold: Vec<GoldRecord> = read_jsonl(&a.gold)?;
    let threshold = a.threshold.unwrap_or_else(|| a.scorer.default_threshold());
    let predicted: HashMap<&str, &[String]> = predictions
        .iter()
        .map(|p| (p.instruction_id.as_str(), p.phrases.as_slice()))
        .collect();
    let mut tally = PhraseTally::default();
    let mut lines = Vec::with_capacity(gold.len());
    for g in &gold {
        // instructions without a prediction count as predicting nothing
        let pred = predicted
            .get(g.instruction_id.as_str())
            .copied()
            .unwrap_or(&[]);
        let report = phrase_set_prf(pred, &g.phrases, a.scorer, threshold);
        tally.add(&report);
        lines.push(PhraseLine {
            instruction_id: &g.instruction_id,
            report,
        });
    }
    if let Some(out) = &a.out {
        write_jsonl(out, &lines)?;
    }
    let r = tally.report();
    ctx.note(&format!(
        "{} instructions: P {:.4} R {:.4} F1 {:.4}",
        gold.len(),
        r.precision,
        r.recall,
        r.f1
    ));
    ctx.emit(json!({
        "instructions": gold.len(),
        "scorer": a.scorer,
        "threshold": threshold,
        "precision": r.precision,
        "recall": r.recall,
        "f1": r.f1,
        "hits": r.hits,
        "predicted": r.predicted,
        "gold": r.gold,
    }))
}

fn eval_viewpoints(a: &EvalViewpointsArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let graph = load_graph(&a.graph)?;
    let selections: Vec<MultiModalInstruction> = read_jsonl(&a.selections)?;
    let gold: Vec<GoldRecord> = read_jsonl(&a.gold)?;
    let gold: HashMap<&str, &GoldRecord> = gold
        .iter()
        .map(|g| (g.instruction_id.as_str(), g))
        .collect();
    let mut tally = ViewpointTally::default();
    for m in selections.iter().filter(|m| !m.prompts().is_empty()) {
        let g = gold
            .get(m.id())
            .ok_or_else(|| CliError::Invalid(format!("no gold record for {}", m.id())))?;
        for p in m.prompts() {
            let selected = p.node_id.as_deref().ok_or_else(|| {
                CliError::Invalid(format!(
                    "{}: prompt for phrase {} has no node_id",
                    m.id(),
                    p.phrase_index
                ))
            })?;
            let want = g.viewpoints.get(p.phrase_index).ok_or_else(|| {
                CliError::Invalid(format!(
                    "{}: no gold viewpoint for phrase {}",
                    m.id(),
                    p.phrase_index
                ))
            })?;
            tally
                .add(selected, want, &graph)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", m.id())))?;
        }
    }
    let r = tally.report();
    ctx.note(&format!(
        "{} prompts: matching {:.4} neighboring {:.4}",
        r.total, r.matching, r.neighboring
    ));
    ctx.emit(serde_json::to_value(r).expect("report serializes"))
}

fn pre_explore(a: &PreExploreArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = a.overrides.resolve(&ctx.file)?;
    let graph = load_graph(&a.graph)?;
    let instructions: Vec<TextInstruction> = read_jsonl(&a.instructions)?;
    let trajectories: Vec<TrajectoryRecord> = read_jsonl(&a.trajectories)?;
    let paths: HashMap<&str, &[String]> = trajectories
        .iter()
        .map(|t| (t.instruction_id.as_str(), t.nodes.as_slice()))
        .collect();
    let detector = detector(a.candidates.as_deref(), &a.detect_endpoint, &ctx.file)?;

    use rayon::prelude::*;
    let detector = detector.as_ref();
    let mut built: Vec<(MultiModalInstruction, Vec<MissRecord>)> = ctx.pool.install(|| {
        instructions
            .par_iter()
            .map(|instr| {
                let path = paths.get(instr.id()).ok_or_else(|| {
                    CliError::Invalid(format!("no pseudo path for {}", instr.id()))
                })?;
                let out = pre_explore_build(instr, path, &graph, detector, &cfg)
                    .map_err(|e| CliError::from(e).context(instr.id()))?;
                Ok((out.record, out.misses))
            })
            .collect::<Result<_, CliError>>()
    })?;
    built.sort_by(|x, y| x.0.id().cmp(y.0.id()));

    let (records, misses): (Vec<_>, Vec<_>) = built.into_iter().unzip();
    let misses: Vec<MissRecord> = misses.into_iter().flatten().collect();
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Environment(format!("{}: {e}", a.out.display())))?;
    write_jsonl(a.out.join("aligned.jsonl"), &records)?;
    write_jsonl(a.out.join("misses.jsonl"), &misses)?;
    ctx.note(&format!(
        "pre-explored {} instructions into {}",
        records.len(),
        a.out.display()
    ));
    ctx.emit(json!({
        "instructions": records.len(),
        "misses": misses.len(),
        "settings": { "aligned": setting_summary(&records) },
    }))
}

/// Either record shape, told apart by the `setting` field.
fn landmark_counts(path: &Path) -> Result<(Vec<usize>, BTreeMap<String, usize>), CliError> {
    let values: Vec<serde_json::Value> = read_jsonl(path)?;
    let mut counts = Vec::with_capacity(values.len());
    let mut settings: BTreeMap<String, usize> = BTreeMap::new();
    for (i, v) in values.into_iter().enumerate() {
        let bad =
            |e: serde_json::Error| CliError::Invalid(format!("{}:{}: {e}", path.display(), i + 1));
        if v.get("setting").is_some() {
            let m: MultiModalInstruction = serde_json::from_value(v).map_err(bad)?;
            *settings.entry(m.setting().to_string()).or_default() += 1;
            counts.push(m.prompts().len());
        } else {
            let t: TextInstruction = serde_json::from_value(v).map_err(bad)?;
            counts.push(t.phrases().len());
        }
    }
    Ok((counts, settings))
}

fn stats(a: &StatsArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (counts, settings) = landmark_counts(&a.input)?;
    let total: usize = counts.iter().sum();
    let mean = if counts.is_empty() {
        0.0
    } else {
        total as f64 / counts.len() as f64
    };
    let max = counts.iter().copied().max().unwrap_or(0);
    let line = format!(
        "{} instructions, {} landmarks, mean {:.2}, max {}",
        counts.len(),
        total,
        mean,
        max
    );
    if ctx.summary {
        ctx.emit(json!({
            "instructions": counts.len(),
            "landmarks": total,
            "mean_landmarks": mean,
            "max_landmarks": max,
            "settings": settings,
        }))
    } else {
        writeln!(ctx.stdout, "{line}").map_err(|e| CliError::Environment(e.to_string()))
    }
}

impl CliError {
    fn context(self, id: &str) -> Self {
        match self {
            CliError::Invalid(m) => CliError::Invalid(format!("instruction {id}: {m}")),
            CliError::Environment(m) => CliError::Environment(format!("instruction {id}: {m}")),
        }
    }
}
