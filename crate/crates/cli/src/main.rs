use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use drive_align::corpus::{generate_corpus, Corpus, GenerationParams, ScenarioKind, Split};
use drive_align::curves::{export_curves, CurveKind};
use drive_align::decision::render_consistency_table;
use drive_align::io::{read_json, write_atomic, write_json_atomic};
use drive_align::pipeline::{
    build_dataset, consistency_table, evaluate_closed_loop, evaluate_open_loop, render_ablation,
    run_all, train_stage, write_jsonl, Checkpoint, Perturbation, PlanSource, StageConfig,
};
use drive_align::scenario::Scenario;
use drive_align::sim::{rollout, DecisionSource, RolloutLog};
use drive_align::{Decision, Error};

const ROOT_VAR: &str = "DRIVE_ALIGN_ROOT";

#[derive(Parser)]
#[command(name = "drive-align", version, about = "Decision/planning alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario corpus and its manifest.
    GenerateCorpus(GenerateArgs),
    /// Run one training stage, or all three.
    Train(TrainArgs),
    /// Open-loop FDE/ADE and collision rates.
    EvalOpenLoop(EvalArgs),
    /// Closed-loop CR, AF-CR and Safety@k.
    EvalClosedLoop(EvalArgs),
    /// Per-class decision/plan consistency F1.
    ConsistencyReport(EvalArgs),
    /// Roll out one scenario and write its log as CSV.
    Rollout(RolloutArgs),
    /// Speed, mileage or relative-speed data for plotting.
    ExportCurves(CurveArgs),
    /// Train all stages and tabulate each checkpoint.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus directory [default: $DRIVE_ALIGN_ROOT/corpus]
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory [default: $DRIVE_ALIGN_ROOT/corpus]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability of background traffic per adjacent lane.
    #[arg(long)]
    density: Option<f64>,
    /// Comma-separated `kind=count` pairs replacing the default mix.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Args)]
struct ConfigArgs {
    /// StageConfig JSON; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add the accelerating keep-speed offset to the stage-1 planner.
    #[arg(long)]
    perturb: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to continue from [default: <out>/stage<N-1>.ckpt.json]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory [default: $DRIVE_ALIGN_ROOT/runs]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "expert")]
    checkpoint: Option<PathBuf>,
    /// Plan with the expert future itself (open-loop only).
    #[arg(long)]
    expert: bool,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    /// Comma-separated scenario kinds to keep.
    #[arg(long)]
    kinds: Option<String>,
    /// Frame stride for open-loop samples.
    #[arg(long, default_value_t = 2)]
    stride: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Constant `speed,direction` decision for the whole rollout.
    #[arg(long)]
    fix_decision: Option<String>,
    /// Sample decisions with this seed instead of taking the argmax.
    #[arg(long)]
    sample: Option<u64>,
    /// CSV destination [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// speed_curve, mileage_curve or relative_speed_histogram
    #[arg(long)]
    kind: String,
    #[arg(long)]
    fix_decision: Option<String>,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    #[arg(long)]
    kinds: Option<String>,
    /// CSV destination; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for checkpoints, reports and the table [default: $DRIVE_ALIGN_ROOT/runs]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn root() -> PathBuf {
    std::env::var_os(ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(p: Option<&Path>, default: &str) -> PathBuf {
    let root = root();
    match p {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => root.join(p),
        None => root.join(default),
    }
}

fn load_corpus(arg: &CorpusArg) -> drive_align::Result<Corpus> {
    Corpus::load(&resolve(arg.corpus.as_deref(), "corpus"))
}

fn load_checkpoint(p: &Path) -> drive_align::Result<Checkpoint> {
    Checkpoint::load(&resolve(Some(p), ""))
}

fn stage_config(args: &ConfigArgs) -> drive_align::Result<StageConfig> {
    let mut cfg: StageConfig = match &args.config {
        Some(p) => read_json(&resolve(Some(p), ""), "stage config")?,
        None => StageConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.perturb {
        cfg.perturbation = Some(Perturbation::accelerating_keep());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_kinds(s: &str) -> drive_align::Result<Vec<ScenarioKind>> {
    s.split(',')
        .map(|k| ScenarioKind::parse(k.trim()).ok_or_else(|| Error::invalid(format!("unknown scenario kind '{k}'"))))
        .collect()
}

fn select<'a>(corpus: &'a Corpus, split: SplitArg, kinds: Option<&str>) -> drive_align::Result<Vec<&'a Scenario>> {
    let kinds = kinds.map(parse_kinds).transpose()?;
    let in_split = |id: &str| {
        let entry = corpus.manifest.scenarios.iter().find(|e| e.id == id);
        match (split, entry) {
            (SplitArg::All, _) => true,
            (SplitArg::Train, Some(e)) => e.split == Split::Train,
            (SplitArg::Eval, Some(e)) => e.split == Split::Eval,
            (_, None) => false,
        }
    };
    let out: Vec<&Scenario> = corpus
        .scenarios
        .iter()
        .filter(|s| in_split(&s.id))
        .filter(|s| {
            kinds
                .as_ref()
                .is_none_or(|ks| ScenarioKind::parse(&s.kind).is_some_and(|k| ks.contains(&k)))
        })
        .collect();
    if out.is_empty() {
        return Err(Error::invalid("no scenarios match the requested split and kinds"));
    }
    Ok(out)
}

fn emit(report: &Value, out: Option<&Path>) -> drive_align::Result<()> {
    if let Some(p) = out {
        write_json_atomic(&resolve(Some(p), ""), report)?;
    }
    println!("{}", serde_json::to_string_pretty(report).expect("values serialise"));
    Ok(())
}

fn generate(args: &GenerateArgs) -> drive_align::Result<()> {
    let mut params = GenerationParams::default();
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    if let Some(d) = args.density {
        params.agent_density = d;
    }
    if let Some(d) = args.duration {
        params.duration_s = d;
    }
    if let Some(mix) = &args.mix {
        params.mix.clear();
        for pair in mix.split(',') {
            let (k, n) = pair
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("mix entry '{pair}' is not kind=count")))?;
            let kind = parse_kinds(k)?[0];
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("mix count '{n}' is not a nonnegative integer")))?;
            params.mix.insert(kind, n);
        }
    }
    let dir = resolve(args.out.as_deref(), "corpus");
    let manifest = generate_corpus(&params, &dir)?;
    let train = manifest.scenarios.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "{}",
        json!({"corpus": dir, "scenarios": manifest.scenarios.len(), "train": train, "eval": manifest.scenarios.len() - train})
    );
    Ok(())
}

fn save_stage(dir: &Path, ckpt: &Checkpoint, reports: &[Value]) -> drive_align::Result<()> {
    ckpt.save(&dir.join(format!("stage{}.ckpt.json", ckpt.stage)))?;
    write_jsonl(&dir.join(format!("stage{}.report.jsonl", ckpt.stage)), reports)
}

fn train(args: &TrainArgs) -> drive_align::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let cfg = stage_config(&args.config)?;
    let dir = resolve(args.out.as_deref(), "runs");
    let mut written = Vec::new();
    match args.stage {
        StageArg::All => {
            let outcome = run_all(&corpus, &cfg)?;
            for (c, r) in outcome.checkpoints.iter().zip(&outcome.reports) {
                save_stage(&dir, c, r)?;
                written.push(c.stage);
            }
        }
        one => {
            let stage = match one {
                StageArg::One => 1,
                StageArg::Two => 2,
                _ => 3,
            };
            let prev = if stage > 1 {
                let p = match &args.checkpoint {
                    Some(p) => resolve(Some(p), ""),
                    None => dir.join(format!("stage{}.ckpt.json", stage - 1)),
                };
                Some(Checkpoint::load(&p)?)
            } else {
                None
            };
            let (c, r) = train_stage(&corpus, stage, prev.as_ref(), &cfg)?;
            save_stage(&dir, &c, &r)?;
            written.push(stage);
        }
    }
    println!("{}", json!({"out": dir, "stages": written}));
    Ok(())
}

fn eval_open_loop(args: &EvalArgs) -> drive_align::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let scenarios = select(&corpus, args.split, args.kinds.as_deref())?;
    let sim = StageConfig::default().sim;
    let report = match (&args.checkpoint, args.expert) {
        (_, true) => evaluate_open_loop(PlanSource::Expert, &scenarios, args.stride, &sim)?,
        (Some(p), false) => {
            let c = load_checkpoint(p)?;
            evaluate_open_loop(PlanSource::Model { policy: &c.policy, planner: &c.planner }, &scenarios, args.stride, &sim)?
        }
        (None, false) => return Err(Error::invalid("a checkpoint or --expert is required")),
    };
    emit(&serde_json::to_value(report).expect("report serialises"), args.out.as_deref())
}

fn require_checkpoint(p: &Option<PathBuf>) -> drive_align::Result<Checkpoint> {
    match p {
        Some(p) => load_checkpoint(p),
        None => Err(Error::invalid("--checkpoint is required")),
    }
}

fn eval_closed_loop(args: &EvalArgs) -> drive_align::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let scenarios = select(&corpus, args.split, args.kinds.as_deref())?;
    let c = require_checkpoint(&args.checkpoint)?;
    let (report, _) = evaluate_closed_loop(&c.policy, &c.planner, &scenarios, &StageConfig::default().sim)?;
    emit(&serde_json::to_value(report).expect("report serialises"), args.out.as_deref())
}

fn consistency_report(args: &EvalArgs) -> drive_align::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let scenarios = select(&corpus, args.split, args.kinds.as_deref())?;
    let c = require_checkpoint(&args.checkpoint)?;
    let samples = build_dataset(&scenarios, args.stride, &StageConfig::default().sim)?;
    let table = consistency_table(&c.policy, &c.planner, &samples)?;
    if let Some(p) = &args.out {
        write_json_atomic(&resolve(Some(p), ""), &table.to_json())?;
    }
    print!("{}", render_consistency_table(&[(&format!("stage {}", c.stage), &table)]));
    Ok(())
}

fn fixed(s: &Option<String>) -> drive_align::Result<Option<Decision>> {
    s.as_deref().map(|d| Decision::parse(d).map(|d| d.to_coarse())).transpose()
}

fn rollouts(
    scenarios: &[&Scenario],
    checkpoint: Option<&Checkpoint>,
    decision: Option<Decision>,
    sample: Option<u64>,
) -> drive_align::Result<Vec<RolloutLog>> {
    let base = StageConfig::default().sim;
    let zero = Checkpoint::initial();
    let c = checkpoint.unwrap_or(&zero);
    if checkpoint.is_none() && decision.is_none() {
        return Err(Error::invalid("--checkpoint is required unless --fix-decision is given"));
    }
    scenarios
        .iter()
        .map(|s| {
            let sim = drive_align::sim::SimConfig { seed: sample.unwrap_or(base.seed), ..base };
            let source = match (decision, sample) {
                (Some(d), _) => DecisionSource::Fixed(d),
                (None, Some(_)) => DecisionSource::Sample(&c.policy),
                (None, None) => DecisionSource::Argmax(&c.policy),
            };
            rollout(s, source, &c.planner, &sim)
        })
        .collect()
}

fn rollout_cmd(args: &RolloutArgs) -> drive_align::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let scn = corpus
        .scenarios
        .iter()
        .find(|s| s.id == args.scenario)
        .ok_or_else(|| Error::NotFound(PathBuf::from(format!("scenario {}", args.scenario))))?;
    let ckpt = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let logs = rollouts(&[scn], ckpt.as_ref(), fixed(&args.fix_decision)?, args.sample)?;
    let csv = logs[0].to_csv();
    match &args.out {
        Some(p) => write_atomic(&resolve(Some(p), ""), csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn export_curves_cmd(args: &CurveArgs) -> drive_align::Result<()> {
    let kind = CurveKind::parse(&args.kind).ok_or_else(|| Error::invalid(format!("unknown curve kind '{}'", args.kind)))?;
    let corpus = load_corpus(&args.corpus)?;
    let scenarios = select(&corpus, args.split, args.kinds.as_deref())?;
    let ckpt = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let logs = rollouts(&scenarios, ckpt.as_ref(), fixed(&args.fix_decision)?, None)?;
    let export = export_curves(&logs, kind)?;
    let out = resolve(Some(&args.out), "");
    write_atomic(&out, export.to_csv().as_bytes())?;
    write_json_atomic(&out.with_extension("json"), &export.sidecar())?;
    println!("{}", export.sidecar());
    Ok(())
}

fn ablation(args: &AblationArgs) -> drive_align::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let cfg = stage_config(&args.config)?;
    let dir = resolve(args.out.as_deref(), "runs");
    let outcome = run_all(&corpus, &cfg)?;
    for (c, r) in outcome.checkpoints.iter().zip(&outcome.reports) {
        save_stage(&dir, c, r)?;
    }
    let table = render_ablation(&outcome.ablation);
    write_json_atomic(&dir.join("ablation.json"), &outcome.ablation)?;
    write_atomic(&dir.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Schema { .. } | Error::Version { .. } | Error::Json { .. } => 3,
        Error::NotFound(_) => 4,
        Error::InvalidInput(_) | Error::Config(_) | Error::UndefinedRatio(_) => 5,
        Error::Generation { .. } | Error::Io { .. } => 1,
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message, "exit_code": code}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string(), 2),
    };
    let result = match &cli.command {
        Command::GenerateCorpus(a) => generate(a),
        Command::Train(a) => train(a),
        Command::EvalOpenLoop(a) => eval_open_loop(a),
        Command::EvalClosedLoop(a) => eval_closed_loop(a),
        Command::ConsistencyReport(a) => consistency_report(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::ExportCurves(a) => export_curves_cmd(a),
        Command::Ablation(a) => ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), exit_code(&e)),
    }
}
