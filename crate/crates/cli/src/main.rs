//! `motalk`: dataset generation, two-stage training, evaluation, selection
//! inspection, attention cost reports, gradient checks, and judging.

mod http;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use motalk::checks::{stable_grad_check, GraphShape};
use motalk::data::{
    build_vocabulary, generate_dataset, load_jsonl, save_jsonl, template_words, DatasetParams, MotionSample,
    QueryFamily,
};
use motalk::generator::{flop_report, Vocabulary};
use motalk::judge::{evaluate_batch, JudgeEndpoint, JudgeRequest, OfflineTransport, SubmitOptions, Transport};
use motalk::metrics::EvalSummary;
use motalk::training::{Checkpoint, Trainer};
use motalk::{Error, Model, ModelDims, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "motalk", version, about = "Text-guided motion understanding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cyclic-motion dataset (JSONL) and its vocabulary.
    GenData(GenDataArgs),
    /// Train one stage and write checkpoint, loss log, and effective config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a JSON report.
    Eval(EvalArgs),
    /// Print the viewpoint selection for one sample as JSON.
    Select(SelectArgs),
    /// Print analytic and measured decoder-attention MACs.
    Flops(FlopsArgs),
    /// Compare analytic and finite-difference gradients of the full graph.
    GradCheck(GradCheckArgs),
    /// Submit answers to the judge and write verdicts as JSONL.
    Judge(JudgeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Family {
    BodyPart,
    Sequence,
    Direction,
    Counting,
}

impl From<Family> for QueryFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::BodyPart => QueryFamily::BodyPart,
            Family::Sequence => QueryFamily::Sequence,
            Family::Direction => QueryFamily::Direction,
            Family::Counting => QueryFamily::Counting,
        }
    }
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inclusive repetition range, `a..b`.
    #[arg(long, default_value = "1..4")]
    cycles_range: String,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 6)]
    d_motion: usize,
    /// Paired video feature width; 0 writes motion only.
    #[arg(long, default_value_t = 8)]
    d_video: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0.01)]
    video_noise: f64,
    /// Query families to rotate through (default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    families: Vec<Family>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Flat TOML config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint (typically the stage-1 output).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue an interrupted run from `<out>/checkpoint.json`.
    #[arg(long, conflicts_with = "init")]
    resume: bool,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Frame tolerance when matching selections to key frames.
    #[arg(long, default_value_t = 2)]
    tolerance: usize,
}

#[derive(clap::Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id: String,
    /// Viewpoint count (default: the checkpoint's `k`).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct FlopsArgs {
    #[arg(long, default_value_t = 16)]
    lt: usize,
    #[arg(long, default_value_t = 256)]
    t: usize,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    h: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    text_len: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    segment_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Scale analytic gradients by `1 + x` (harness self-test).
    #[arg(long, hide = true)]
    inject_error: Option<f64>,
}

#[derive(clap::Args, Debug)]
struct JudgeArgs {
    /// JSONL of `{"id", "question", "answer"}`.
    #[arg(long)]
    answers: PathBuf,
    /// JSONL of `{"id", "ground_truth"}`.
    #[arg(long)]
    gt: PathBuf,
    /// Read replies from `<dir>/<prompt sha256>.txt`; no network access.
    #[arg(long)]
    offline: Option<PathBuf>,
    /// Verdict JSONL (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Confidence-0 records for human review (default: `<out>.review.jsonl`).
    #[arg(long)]
    review: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 validation/config, 2 runtime, 3 transport.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Validation(_) | Error::Parse(_) | Error::ParseLine { .. }) => 1,
        Some(Error::Transport { .. }) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Select(a) => select(a),
        Command::Flops(a) => flops(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Judge(a) => judge(a),
    }
}

fn vocab_path(data: &Path) -> PathBuf {
    data.with_extension("vocab.txt")
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Writes via a sibling temp file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let parsed = s
        .split_once("..")
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
    match parsed {
        Some((a, b)) if a >= 1 && a <= b => Ok((a, b)),
        _ => Err(Error::Config(format!("cycle range {s:?} must be a..b with 1 <= a <= b")).into()),
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let (cycles_min, cycles_max) = parse_range(&a.cycles_range)?;
    let families = if a.families.is_empty() {
        QueryFamily::ALL.to_vec()
    } else {
        a.families.iter().map(|&f| f.into()).collect()
    };
    let params = DatasetParams {
        seed: a.seed,
        samples: a.samples,
        frames: a.frames,
        d_motion: a.d_motion,
        d_video: a.d_video,
        cycles_min,
        cycles_max,
        noise: a.noise,
        video_noise: a.video_noise,
        families,
    };
    let data = generate_dataset(&params)?;
    save_jsonl(&a.out, &data).with_context(|| format!("writing {}", a.out.display()))?;
    let mut vocab = Vocabulary::new();
    for w in template_words(params.frames, params.cycles_max) {
        vocab.insert(&w);
    }
    vocab.save(&vocab_path(&a.out))?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    Ok(RunConfig::from_toml_with_overrides(&text, overrides)?)
}

fn load_data(path: &Path) -> Result<Vec<MotionSample>> {
    let data = load_jsonl(path).with_context(|| format!("loading {}", path.display()))?;
    if data.is_empty() {
        bail!(Error::Validation(format!("{} holds no samples", path.display())));
    }
    Ok(data)
}

fn check_dims(model: &Model, data: &[MotionSample]) -> Result<()> {
    let dims = ModelDims::of(data)?;
    if dims.d_motion != model.dims.d_motion || (data[0].video.is_some() && dims.d_video != model.dims.d_video) {
        bail!(Error::Validation(format!(
            "data widths {dims:?} do not match the model's {:?}",
            model.dims
        )));
    }
    Ok(())
}

fn loss_csv(trainer: &Trainer) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for r in &trainer.history {
        s += &format!("{},{},{}\n", r.epoch, r.mean_loss, r.lr);
    }
    s
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let stage = Stage::from_number(a.stage)?;
    let data = load_data(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt_path = a.out.join("checkpoint.json");

    let mut trainer = if a.resume {
        let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        if ckpt.stage != a.stage || ckpt.config != cfg {
            bail!(Error::Config(
                "checkpoint to resume was written with a different stage or config".into()
            ));
        }
        Trainer::resume(&ckpt)?
    } else {
        let model = match &a.init {
            Some(p) => {
                let (mut model, _) = Checkpoint::load(p)
                    .with_context(|| format!("loading {}", p.display()))?
                    .restore()?;
                model.reconfigure(&cfg)?;
                model
            }
            None => {
                if stage == Stage::Instruct {
                    log::warn!("stage 2 without --init starts from untrained enhancer and talker");
                }
                let vp = vocab_path(&a.data);
                let vocab = if vp.exists() {
                    Vocabulary::load(&vp)?
                } else {
                    build_vocabulary(&data)
                };
                Model::new(&cfg, ModelDims::of(&data)?, vocab)?
            }
        };
        Trainer::new(model, stage)?
    };
    check_dims(&trainer.model, &data)?;

    write_atomic(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    while !trainer.is_finished() {
        let r = trainer.run_epoch(&data)?;
        write_atomic(&ckpt_path, trainer.checkpoint().to_json()?.as_bytes())?;
        write_atomic(&a.out.join("loss.csv"), loss_csv(&trainer).as_bytes())?;
        println!(
            "stage {} epoch {} mean_loss {:.6} lr {:.3e}",
            a.stage, r.epoch, r.mean_loss, r.lr
        );
    }
    write_atomic(&a.out.join("loss.csv"), loss_csv(&trainer).as_bytes())?;
    write_atomic(&ckpt_path, trainer.checkpoint().to_json()?.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (model, _) = ckpt.restore()?;
    Ok((model, ckpt))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    schema: &'static str,
    version: u32,
    config: &'a RunConfig,
    stage: u8,
    epoch: usize,
    summary: EvalSummary,
    outcomes: Vec<motalk::metrics::SampleOutcome>,
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (model, ckpt) = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    check_dims(&model, &data)?;
    let outcomes = data
        .iter()
        .map(|s| model.outcome(s))
        .collect::<motalk::Result<Vec<_>>>()?;
    let summary = motalk::metrics::summarize(&outcomes, a.tolerance)?;
    let report = EvalReport {
        schema: "motalk.eval",
        version: 1,
        config: &model.config,
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        summary,
        outcomes,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(&a.report, text.as_bytes())?;
    println!(
        "mean_nll {:.6} exact_match {:.4} selection_recall {:.4}",
        report.summary.mean_nll, report.summary.exact_match, report.summary.selection.recall
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SelectOutput {
    id: String,
    k: usize,
    clamped: bool,
    frames: usize,
    scores: Vec<f64>,
    selected: Vec<usize>,
    receptive_fields: Vec<f64>,
    windows: Vec<Vec<usize>>,
    key_frames: Vec<usize>,
}

fn select(a: SelectArgs) -> Result<ExitCode> {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    check_dims(&model, &data)?;
    let sample = data
        .iter()
        .find(|s| s.id == a.id)
        .ok_or_else(|| Error::Validation(format!("no sample with id {:?}", a.id)))?;
    let (sel, diag) = model.select(sample, a.k)?;
    print_json(&SelectOutput {
        id: sample.id.clone(),
        k: sel.k,
        clamped: sel.clamped,
        frames: sample.motion.frames(),
        scores: diag.scores,
        selected: sel.indices,
        receptive_fields: diag.receptive_fields,
        windows: diag.windows,
        key_frames: sample.labels.key_frames.clone(),
    })?;
    Ok(ExitCode::SUCCESS)
}

fn flops(a: FlopsArgs) -> Result<ExitCode> {
    print_json(&flop_report(a.lt, a.t, a.k, a.h, a.seed)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradCheckOutput {
    seed: u64,
    rejected: usize,
    coordinates: usize,
    max_rel_err: f64,
    tolerance: f64,
    passed: bool,
    worst_param: Option<String>,
    worst_module: Option<String>,
    worst_index: Option<(usize, usize)>,
    worst_analytic: Option<f64>,
    worst_numeric: Option<f64>,
}

fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    let shape = GraphShape {
        frames: a.frames,
        hidden: a.hidden,
        text_len: a.text_len,
        k: a.k,
        segment_size: a.segment_size,
    };
    let c = stable_grad_check(a.seed, shape, a.inject_error)?;
    let w = c.report.worst.as_ref();
    let passed = c.report.max_rel_err <= a.tolerance;
    print_json(&GradCheckOutput {
        seed: c.seed,
        rejected: c.rejected,
        coordinates: c.report.coordinates,
        max_rel_err: c.report.max_rel_err,
        tolerance: a.tolerance,
        passed,
        worst_param: w.map(|w| w.param.clone()),
        worst_module: w.map(|w| w.module.clone()),
        worst_index: w.map(|w| (w.row, w.col)),
        worst_analytic: w.map(|w| w.analytic),
        worst_numeric: w.map(|w| w.numeric),
    })?;
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradient check failed: max relative error {:.3e} > {:.1e}",
            c.report.max_rel_err, a.tolerance
        );
        Ok(ExitCode::from(2))
    }
}

#[derive(serde::Deserialize)]
struct AnswerLine {
    id: String,
    question: String,
    answer: String,
}

#[derive(serde::Deserialize)]
struct TruthLine {
    id: String,
    ground_truth: String,
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| Error::ParseLine {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(v);
    }
    Ok(out)
}

fn judge(a: JudgeArgs) -> Result<ExitCode> {
    let endpoint = JudgeEndpoint::resolve(a.offline.clone(), |k| std::env::var(k).ok())?;
    let answers: Vec<AnswerLine> = read_lines(&a.answers)?;
    let truths: Vec<TruthLine> = read_lines(&a.gt)?;
    let requests = answers
        .into_iter()
        .map(|ans| {
            let gt = truths
                .iter()
                .find(|t| t.id == ans.id)
                .ok_or_else(|| Error::Validation(format!("no ground truth for answer {:?}", ans.id)))?;
            Ok(JudgeRequest {
                id: ans.id,
                question: ans.question,
                answer: ans.answer,
                ground_truth: gt.ground_truth.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let transport: Box<dyn Transport> = match endpoint {
        JudgeEndpoint::Offline(dir) => Box::new(OfflineTransport::new(dir)),
        JudgeEndpoint::Remote { url, api_key, model } => Box::new(http::ChatTransport::new(
            url,
            api_key,
            model,
            Duration::from_secs(a.timeout_secs),
        )),
    };
    let opts = SubmitOptions {
        concurrency: a.concurrency,
        ..Default::default()
    };
    let records = evaluate_batch(&requests, transport.as_ref(), &opts)?;

    let to_jsonl = |recs: &mut dyn Iterator<Item = &motalk::judge::VerdictRecord>| -> Result<String> {
        let mut s = String::new();
        for r in recs {
            s += &serde_json::to_string(r)?;
            s.push('\n');
        }
        Ok(s)
    };
    let all = to_jsonl(&mut records.iter())?;
    let review = to_jsonl(&mut records.iter().filter(|r| r.verdict.needs_review()))?;
    let flagged = records.iter().filter(|r| r.verdict.needs_review()).count();
    match &a.out {
        Some(out) => {
            write_atomic(out, all.as_bytes())?;
            let review_path = a.review.clone().unwrap_or_else(|| out.with_extension("review.jsonl"));
            write_atomic(&review_path, review.as_bytes())?;
            eprintln!(
                "{} verdicts written to {}; {flagged} need review ({})",
                records.len(),
                out.display(),
                review_path.display()
            );
        }
        None => {
            std::io::stdout().write_all(all.as_bytes())?;
            if let Some(p) = &a.review {
                write_atomic(p, review.as_bytes())?;
            }
            for r in records.iter().filter(|r| r.verdict.needs_review()) {
                eprintln!("needs review: {}", r.id);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
