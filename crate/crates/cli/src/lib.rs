//! The `embedkit` command line: training, mining, evaluation, compression,
//! gradient checks, embedding export and the pooling ablation sweep.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use embedkit::checkpoint::Checkpoint;
use embedkit::compress::{magnitude_prune, quantize_weights, CompressionReport, PrunePattern, QuantFormat};
use embedkit::curation::{mine_dataset, CheckpointTeacher, Dataset, MiningConfig, ScoreTable, Teacher, TrainingExample};
use embedkit::eval::{
    embed_texts, load_classification_dir, load_retrieval_dir, load_sts_dir, run_classification_eval,
    run_retrieval_eval, run_sts_eval, EvalReport,
};
use embedkit::gradcheck::{check_model_gradients, check_gradients, ParamCheck, Tolerance};
use embedkit::synthetic::{ablation_sweep, sweep_table, toy_retrieval};
use embedkit::trainer::{Distillation, LossConfig, StageExtras, StageRunner};
use embedkit::{ModelCheckpoint, OpKind};

pub use config::RunConfig;

/// Caps internal parallelism; unset means one thread.
pub const THREADS_ENV: &str = "EMBK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "embedkit", version, about = "Train, mine, evaluate and compress small text embedding models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageChoice {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Retrieval,
    Sts,
    Classification,
}

impl EvalTask {
    fn default_instruction(self) -> &'static str {
        match self {
            EvalTask::Retrieval => "retrieve passages",
            EvalTask::Sts => "match similar text",
            EvalTask::Classification => "classify",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastive training, one or both stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageChoice,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Positive-aware hard-negative mining with a teacher model.
    Mine {
        /// Training examples, one JSON object per line.
        #[arg(long)]
        pairs: PathBuf,
        /// Candidate documents, one per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Teacher checkpoint, or a `query<TAB>doc<TAB>score` table ending in `.tsv`.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = MiningConfig::default().top_k)]
        top_k: usize,
        #[arg(long, default_value_t = MiningConfig::default().percentage_margin)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval, STS or classification metrics for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Instruction for queries; a per-task default otherwise.
        #[arg(long)]
        instruction: Option<String>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune, quantize and optionally retrain with distillation.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        /// `none`, `unstructured:P`, or `N:M` such as `2:4`.
        #[arg(long, default_value = "none")]
        prune: String,
        /// `none`, `int8`, `fp8e4m3` or `fp8e5m2`.
        #[arg(long, default_value = "none")]
        quant: String,
        /// Retrain the compressed model against a teacher.
        #[arg(long)]
        kd: bool,
        /// Distillation teacher; the uncompressed input by default.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Run config supplying data and schedule for retraining (stage 2 keys).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, requires = "eval_data")]
        eval_task: Option<EvalTask>,
        #[arg(long, requires = "eval_task")]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Report path; next to `--out` by default.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter of the configured model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Corrupt the backward pass of one op, to see the check fail.
        #[arg(long, hide = true)]
        fault: Option<OpKind>,
    },
    /// Write one embedding per input line.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Format lines as instructed queries.
        #[arg(long, requires = "task")]
        as_query: bool,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every pooling × mask cell on the toy retrieval task.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Table path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn classify(err: anyhow::Error) -> Self {
        let runtime = err.chain().any(|e| {
            e.downcast_ref::<embedkit::Error>().is_some_and(|e| !e.is_validation())
                || e.downcast_ref::<std::io::Error>().is_some()
        });
        if runtime {
            Failure::Runtime(err)
        } else {
            Failure::Validation(err)
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (Failure::Validation(e) | Failure::Runtime(e)) = self;
        write!(f, "{e:#}")
    }
}

/// Parses `args` (program name first) and runs the command, printing
/// errors to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn thread_count() -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        },
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let threads = thread_count().map_err(Failure::Validation)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Runtime(e.into()))?;
    pool.install(|| dispatch(cli.command)).map_err(Failure::classify)
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, stage, resume } => cmd_train(&config, stage, resume.as_deref()),
        Command::Mine { pairs, corpus, teacher, top_k, margin, out } => {
            cmd_mine(&pairs, &corpus, &teacher, MiningConfig { top_k, percentage_margin: margin }, &out)
        }
        Command::Eval { ckpt, task, data, k, instruction, out } => {
            let report = cmd_eval(&ckpt, task, &data, k, instruction.as_deref())?;
            emit(out.as_deref(), &report.to_text())
        }
        Command::Compress { ckpt, prune, quant, kd, teacher, alpha, config, eval_task, eval_data, out, report } => {
            let opts = CompressOptions {
                prune: parse_optional(&prune)?,
                quant: parse_optional(&quant)?,
                kd: kd.then_some(KdOptions { teacher, alpha, config }),
                eval: eval_task.zip(eval_data),
            };
            cmd_compress(&ckpt, &opts, &out, report.as_deref())
        }
        Command::Gradcheck { config, fault } => cmd_gradcheck(&config, fault),
        Command::Embed { ckpt, input, as_query, task, out } => {
            cmd_embed(&ckpt, &input, as_query.then_some(task.as_deref()).flatten(), &out)
        }
        Command::Sweep { config, out } => {
            let table = cmd_sweep(&config)?;
            emit(out.as_deref(), &table)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        bail!("{what} {} is not a directory", path.display());
    }
    Ok(())
}

fn parse_optional<T: std::str::FromStr<Err = embedkit::Error>>(s: &str) -> anyhow::Result<Option<T>> {
    Ok(if s == "none" { None } else { Some(s.parse()?) })
}

fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> anyhow::Result<()> {
    write_file(path, &ckpt.to_bytes()?)
}

// ---- train ------------------------------------------------------------------

/// Files written by `train` for one stage.
pub fn stage_outputs(output_dir: &Path, stage: u8) -> (PathBuf, PathBuf) {
    (output_dir.join(format!("stage{stage}.ckpt")), output_dir.join(format!("stage{stage}.loss.csv")))
}

pub fn cmd_train(config: &Path, stage: StageChoice, resume: Option<&Path>) -> anyhow::Result<()> {
    require_file(config, "config")?;
    let cfg = RunConfig::load(config)?;
    let stages: &[u8] = match stage {
        StageChoice::One => &[1],
        StageChoice::Two => &[2],
        StageChoice::Both => &[1, 2],
    };
    if let Some(r) = resume {
        require_file(r, "resume checkpoint")?;
    }
    // every input is read before any compute or output
    let mut plans = Vec::new();
    for &s in stages {
        let sc = cfg.stage(s);
        if sc.datasets.is_empty() {
            bail!("stage{s}_datasets is empty");
        }
        for d in &sc.datasets {
            require_file(d, &format!("stage {s} dataset"))?;
        }
        let data = sc.datasets.iter().map(|p| Dataset::load(p)).collect::<embedkit::Result<Vec<_>>>()?;
        plans.push((sc, data));
    }
    let mut ckpt = match resume {
        Some(r) => Checkpoint::load(r)?,
        None => Checkpoint::init(cfg.model()?, cfg.seed)?,
    };

    for (sc, data) in plans {
        let s = sc.stage;
        let out = StageRunner::with_datasets(sc, ckpt, data, StageExtras::default())?.run()?;
        let (ckpt_path, trace_path) = stage_outputs(&cfg.output_dir, s);
        // the next stage starts from exactly what was saved
        ckpt = out.ckpt;
        ckpt.round_to_f32();
        save_checkpoint(&ckpt, &ckpt_path)?;
        write_file(&trace_path, out.trace.to_csv().as_bytes())?;
        eprintln!("stage {s}: {} steps, final loss {:.6}", out.trace.steps.len(), out.trace.steps.last().map_or(f64::NAN, |r| r.loss));
    }
    Ok(())
}

// ---- mine -------------------------------------------------------------------

pub fn cmd_mine(pairs: &Path, corpus: &Path, teacher: &Path, mining: MiningConfig, out: &Path) -> anyhow::Result<()> {
    require_file(pairs, "pairs file")?;
    require_file(corpus, "corpus file")?;
    require_file(teacher, "teacher")?;
    mining.validate()?;
    let mut data = Dataset::load(pairs)?;
    let docs: Vec<String> = fs::read_to_string(corpus)
        .with_context(|| format!("reading {}", corpus.display()))
        .map_err(|e| anyhow::anyhow!(embedkit::Error::Input(format!("{e:#}"))))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect();
    if docs.is_empty() {
        return Err(embedkit::Error::Validation(format!("corpus {} is empty", corpus.display())).into());
    }
    let teacher: Box<dyn Teacher> = if teacher.extension().is_some_and(|e| e == "tsv") {
        Box::new(ScoreTable::load(teacher)?)
    } else {
        Box::new(CheckpointTeacher::new(Checkpoint::load(teacher)?))
    };
    let short = mine_dataset(&mut data.examples, &docs, teacher.as_ref(), &mining)?;
    let mut text = String::new();
    for ex in &data.examples {
        text += &serde_json::to_string(ex)?;
        text.push('\n');
    }
    write_file(out, text.as_bytes())?;
    eprintln!("mined {} queries, {short} with fewer than {} negatives", data.examples.len(), mining.top_k);
    Ok(())
}

// ---- eval -------------------------------------------------------------------

pub fn cmd_eval(ckpt: &Path, task: EvalTask, data: &Path, k: usize, instruction: Option<&str>) -> anyhow::Result<EvalReport> {
    require_file(ckpt, "checkpoint")?;
    require_dir(data, "data directory")?;
    if k == 0 {
        bail!("--k must be positive");
    }
    let ckpt = Checkpoint::load(ckpt)?;
    evaluate(&ckpt, task, data, k, instruction)
}

fn evaluate(ckpt: &ModelCheckpoint, task: EvalTask, data: &Path, k: usize, instruction: Option<&str>) -> anyhow::Result<EvalReport> {
    let instruction = instruction.unwrap_or(task.default_instruction());
    Ok(match task {
        EvalTask::Retrieval => run_retrieval_eval(&load_retrieval_dir(data)?, ckpt, instruction, k)?,
        EvalTask::Sts => run_sts_eval(&load_sts_dir(data)?, ckpt, instruction)?,
        EvalTask::Classification => {
            let (train, test) = load_classification_dir(data)?;
            run_classification_eval(&train, &test, ckpt, instruction, k)?
        }
    })
}

// ---- compress ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct KdOptions {
    pub teacher: Option<PathBuf>,
    pub alpha: f64,
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct CompressOptions {
    pub prune: Option<PrunePattern>,
    pub quant: Option<QuantFormat>,
    pub kd: Option<KdOptions>,
    pub eval: Option<(EvalTask, PathBuf)>,
}

/// Prune, then quantize, then retrain; quantization is reapplied after
/// retraining so the output stays on the format's grid.
pub fn cmd_compress(ckpt_path: &Path, opts: &CompressOptions, out: &Path, report: Option<&Path>) -> anyhow::Result<()> {
    require_file(ckpt_path, "checkpoint")?;
    if let Some(p) = opts.prune {
        p.validate()?;
    }
    let kd_plan = match &opts.kd {
        Some(kd) => {
            if !(kd.alpha >= 0.0) {
                bail!("--alpha must be non-negative, got {}", kd.alpha);
            }
            let Some(cfg_path) = &kd.config else { bail!("--kd needs --config for retraining data") };
            require_file(cfg_path, "config")?;
            let cfg = RunConfig::load(cfg_path)?;
            let sc = cfg.stage(2);
            if sc.datasets.is_empty() {
                bail!("stage2_datasets is empty; retraining needs data");
            }
            for d in &sc.datasets {
                require_file(d, "retraining dataset")?;
            }
            if let Some(t) = &kd.teacher {
                require_file(t, "teacher")?;
            }
            let data = sc.datasets.iter().map(|p| Dataset::load(p)).collect::<embedkit::Result<Vec<_>>>()?;
            Some((sc, data))
        }
        None => None,
    };
    if let Some((_, dir)) = &opts.eval {
        require_dir(dir, "eval data directory")?;
    }

    let original = Checkpoint::load(ckpt_path)?;
    let (mut ckpt, mask) = match opts.prune {
        Some(p) => {
            let (c, m) = magnitude_prune(&original, p)?;
            (c, Some(m))
        }
        None => (original.clone(), None),
    };
    if let Some(fmt) = opts.quant {
        ckpt = quantize_weights(&ckpt, fmt);
    }
    if let (Some((sc, data)), Some(kd)) = (kd_plan, &opts.kd) {
        let teacher = match &kd.teacher {
            Some(t) => Checkpoint::load(t)?,
            None => original.clone(),
        };
        let extras = StageExtras {
            distill: Some(Distillation { teacher, alpha: kd.alpha, mapping: None }),
            prune: mask.clone(),
        };
        ckpt = StageRunner::with_datasets(sc, ckpt, data, extras)?.run()?.ckpt;
        if let Some(fmt) = opts.quant {
            ckpt = quantize_weights(&ckpt, fmt);
        }
    }
    ckpt.round_to_f32();

    let mut rep = CompressionReport {
        pattern: opts.prune,
        format: opts.quant,
        kept: mask.as_ref().map(|m| m.masks.keys().filter_map(|n| Some((n.clone(), m.kept_fraction(n)?))).collect()).unwrap_or_default(),
        ..CompressionReport::default()
    };
    if let Some((task, dir)) = &opts.eval {
        rep.before = evaluate(&original, *task, dir, 10, None)?.metrics;
        rep.after = evaluate(&ckpt, *task, dir, 10, None)?.metrics;
    }
    save_checkpoint(&ckpt, out)?;
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("report.txt"));
    write_file(&report_path, rep.to_text().as_bytes())
}

// ---- gradcheck --------------------------------------------------------------

/// Two examples that reuse each other's documents, so the probe exercises
/// in-batch negatives with few distinct sequences.
pub fn probe_batch() -> Vec<TrainingExample> {
    vec![
        TrainingExample::new("m", "a", "a1", vec!["b2".into()]),
        TrainingExample::new("m", "b", "b2", vec!["a1".into()]),
    ]
}

pub fn gradcheck_report(cfg: &RunConfig, fault: Option<OpKind>) -> anyhow::Result<Vec<ParamCheck>> {
    let ckpt = Checkpoint::init(cfg.model()?, cfg.seed)?;
    let tol = Tolerance { step: cfg.gradcheck_step, relative: cfg.gradcheck_tolerance, ..Tolerance::default() };
    let loss = LossConfig::new(cfg.stage1_temperature, true);
    Ok(match &cfg.gradcheck_params {
        None => check_model_gradients(&ckpt, &probe_batch(), 1, &loss, tol, fault)?,
        Some(prefixes) if prefixes.is_empty() => check_gradients(&[], tol, fault, |g, _| Ok(g.constant(embedkit::Tensor64::scalar(0.0))))?,
        Some(prefixes) => {
            let keep = |n: &str| prefixes.iter().any(|p| n.starts_with(p.as_str()));
            check_model_gradients(&ckpt, &probe_batch(), 1, &loss, tol, fault)?
                .into_iter()
                .filter(|c| keep(&c.name))
                .collect()
        }
    })
}

pub fn cmd_gradcheck(config: &Path, fault: Option<OpKind>) -> anyhow::Result<()> {
    require_file(config, "config")?;
    let cfg = RunConfig::load(config)?;
    let report = gradcheck_report(&cfg, fault)?;
    let mut text = String::new();
    for c in &report {
        let status = if c.passed() { "pass" } else { "FAIL" };
        writeln!(text, "{status} {} checked={} failures={} max_abs_err={:.3e}", c.name, c.checked, c.failures, c.max_abs_err)?;
    }
    let failed: Vec<&str> = report.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    writeln!(text, "result={}", if failed.is_empty() { "pass" } else { "fail" })?;
    print!("{text}");
    if !failed.is_empty() {
        return Err(embedkit::Error::Numeric(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

// ---- embed ------------------------------------------------------------------

/// One line per input: the zero-based line number, then the vector with
/// nine significant digits.
pub fn cmd_embed(ckpt: &Path, input: &Path, task: Option<&str>, out: &Path) -> anyhow::Result<()> {
    require_file(ckpt, "checkpoint")?;
    require_file(input, "input")?;
    let ckpt = Checkpoint::load(ckpt)?;
    let text = fs::read_to_string(input).map_err(|e| embedkit::Error::io(input, e))?;
    let texts: Vec<String> = text.lines().map(String::from).collect();
    let ids: Vec<String> = (0..texts.len()).map(|i| i.to_string()).collect();
    let m = embed_texts(&ids, &texts, &ckpt, task)?;
    let mut body = String::new();
    for (id, v) in m.ids.iter().zip(&m.vectors) {
        body += id;
        for x in v {
            write!(body, " {x:.8e}")?;
        }
        body.push('\n');
    }
    write_file(out, body.as_bytes())
}

// ---- sweep ------------------------------------------------------------------

pub fn cmd_sweep(config: &Path) -> anyhow::Result<String> {
    require_file(config, "config")?;
    let cfg = RunConfig::load(config)?;
    let task = toy_retrieval(cfg.sweep_pairs, cfg.sweep_negatives, cfg.seed);
    let rows = ablation_sweep(&cfg.model()?, &cfg.stage(1), &task, cfg.seed)?;
    Ok(sweep_table(&rows))
}
