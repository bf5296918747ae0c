//! The `abscl` command line tool.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use abscl_core::eval::{ResultMatrix, ScoreTable};
use abscl_core::pipeline::{
    build_prototypes, desk_options, matrix_file, metric_names, order_dir, run_sequence, Base, EvalMode, Prepared,
    RunOptions, TrainedRun, PROTOTYPES, STATE_DIR,
};
use abscl_core::positioning::save_prototypes;
use abscl_core::tasks::{expand_for_task, load_dataset, synth_generate, Corpus, Instance, SynthSpec, Task};
use abscl_core::trainer::{gradient_suite, load_run, save_run, warmup};
use abscl_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A check ran to completion and failed its tolerance.
    Check(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Usage(_) => EXIT_USAGE,
                Error::Format(_) | Error::Degenerate(_) | Error::Length { .. } | Error::Io { .. } => EXIT_DATA,
                Error::Shape { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
            },
            CliError::Check(_) => EXIT_NUMERIC,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "abscl", version, about = "Continual aspect-based sentiment analysis with decoupled adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-domain corpus.
    Synth(SynthArgs),
    /// Train and evaluate every domain order.
    Run(Box<RunArgs>),
    /// (Re)run warmup on saved run state.
    Warmup(TargetArgs),
    /// Rebuild domain prototypes from training sentences.
    Prototypes(PrototypeArgs),
    /// Evaluate a trained order.
    Eval(EvalArgs),
    /// Export a forgetting matrix as CSV.
    Heatmap(HeatmapArgs),
    /// Finite-difference checks of the training gradients.
    Gradcheck(GradcheckArgs),
    /// Rank-sensitivity scores of a metric table.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator spec; the built-in 4-domain spec otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_per_domain: Option<usize>,
    #[arg(long)]
    pub test_per_domain: Option<usize>,
    #[arg(long)]
    pub general_sentences: Option<usize>,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct DataSource {
    /// Corpus directory written by `synth` (or converted real data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator spec; the corpus is generated in memory.
    #[arg(long)]
    pub synth: Option<PathBuf>,
}

impl DataSource {
    fn corpus(&self) -> CliResult<Corpus> {
        match (&self.data, &self.synth) {
            (Some(d), None) => Ok(Corpus::load(d)?),
            (None, Some(s)) => Ok(synth_generate(&read_spec(s)?)?),
            _ => Err(Error::Usage("give exactly one of --data and --synth".into()).into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Every hyperparameter at its documented default.
    Default,
    /// The recipe tuned for the synthetic benchmark on a CPU.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Sequence,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Flat key=value file applied after every flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// Comma-separated order seeds.
    #[arg(long)]
    pub orders: Option<String>,
    #[arg(long)]
    pub eval_mode: Option<String>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub model_seed: Option<String>,
    #[arg(long)]
    pub vocab_cap: Option<String>,
    #[arg(long)]
    pub eps_scale: Option<String>,
    #[arg(long)]
    pub pooled_covariance: bool,
    #[arg(long)]
    pub max_new: Option<String>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub pretrain_epochs: Option<String>,
    #[arg(long)]
    pub pretrain_rank: Option<String>,
    #[arg(long)]
    pub pretrain_lr: Option<String>,
    #[arg(long)]
    pub lambda_decouple: Option<String>,
    #[arg(long)]
    pub lambda_warmup: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub beta1: Option<String>,
    #[arg(long)]
    pub beta2: Option<String>,
    #[arg(long)]
    pub adam_eps: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub invariant_lr_scale: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub warmup_epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub replay_capacity: Option<String>,
    #[arg(long)]
    pub rank: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub warmup_mode: Option<String>,
    /// Comma-separated, e.g. `q,v` or `q,k,v,o,ff_up,ff_down`.
    #[arg(long)]
    pub projections: Option<String>,
    /// Extra `key=value` overrides, applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl RunArgs {
    fn flag_pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("task", self.task.clone()),
            ("orders", self.orders.clone()),
            ("eval_mode", self.eval_mode.clone()),
            ("baseline", self.baseline.map(|_| "sequence".to_string())),
            ("model_seed", self.model_seed.clone()),
            ("vocab_cap", self.vocab_cap.clone()),
            ("eps_scale", self.eps_scale.clone()),
            ("pooled_covariance", self.pooled_covariance.then(|| "true".into())),
            ("max_new", self.max_new.clone()),
            ("resume", self.resume.then(|| "true".into())),
            ("pretrain_epochs", self.pretrain_epochs.clone()),
            ("pretrain_rank", self.pretrain_rank.clone()),
            ("pretrain_lr", self.pretrain_lr.clone()),
            ("lambda_decouple", self.lambda_decouple.clone()),
            ("lambda_warmup", self.lambda_warmup.clone()),
            ("lr", self.lr.clone()),
            ("beta1", self.beta1.clone()),
            ("beta2", self.beta2.clone()),
            ("adam_eps", self.adam_eps.clone()),
            ("weight_decay", self.weight_decay.clone()),
            ("invariant_lr_scale", self.invariant_lr_scale.clone()),
            ("epochs", self.epochs.clone()),
            ("warmup_epochs", self.warmup_epochs.clone()),
            ("batch_size", self.batch_size.clone()),
            ("replay_capacity", self.replay_capacity.clone()),
            ("rank", self.rank.clone()),
            ("seed", self.seed.clone()),
            ("warmup_mode", self.warmup_mode.clone()),
            ("projections", self.projections.clone()),
        ]
    }

    /// Preset, then flags, then `--set`, then the config file.
    pub fn options(&self) -> CliResult<RunOptions> {
        let task = match &self.task {
            Some(t) => t.parse::<Task>()?,
            None => RunOptions::default().task,
        };
        let mut opts = match self.preset {
            Preset::Default => RunOptions::default(),
            Preset::Desk => desk_options(task),
        };
        for (k, v) in self.flag_pairs() {
            if let Some(v) = v {
                opts.set(k, &v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            opts.set(k, v)?;
        }
        if let Some(path) = &self.config {
            opts.apply_kv(&read_text(path)?)?;
        }
        opts.train.validate()?;
        Ok(opts)
    }
}

#[derive(Args, Debug)]
pub struct TargetArgs {
    /// An order directory, or a run directory holding `order_*`.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrototypeArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub eps_scale: Option<f64>,
    #[arg(long)]
    pub pooled_covariance: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// An order directory, or a run directory together with `--order`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub order: usize,
    /// JSON-lines test sentences; the corpus test splits otherwise.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synth: Option<PathBuf>,
    #[arg(long, default_value = "positioned")]
    pub mode: String,
    /// Use the raw invariant adapter instead of the warmed clones.
    #[arg(long)]
    pub no_warmup: bool,
    /// Shuffle seed; the run's own evaluation seed by default.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write per-sample predictions as JSON lines.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub order: usize,
    /// Metric name; the task's primary metric by default.
    #[arg(long)]
    pub metric: Option<String>,
    /// Output file; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// CSV with a `rank` column followed by metric columns.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn read_spec(path: &Path) -> CliResult<SynthSpec> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

fn is_order_dir(p: &Path) -> bool {
    p.join("run.json").is_file()
}

/// Every order directory under `path`, or `path` itself.
fn order_dirs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if is_order_dir(path) {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found = Vec::new();
    for k in 1.. {
        let d = order_dir(path, k);
        if !is_order_dir(&d) {
            break;
        }
        found.push(d);
    }
    if found.is_empty() {
        return Err(Error::Usage(format!("{} holds no trained orders", path.display())).into());
    }
    Ok(found)
}

fn one_order(path: &Path, order: usize) -> CliResult<PathBuf> {
    if is_order_dir(path) {
        return Ok(path.to_path_buf());
    }
    let d = order_dir(path, order);
    if !is_order_dir(&d) {
        return Err(Error::Usage(format!("{} has no order {order}", path.display())).into());
    }
    Ok(d)
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.train_per_domain {
        spec.train_per_domain = n;
    }
    if let Some(n) = a.test_per_domain {
        spec.test_per_domain = n;
    }
    if let Some(n) = a.general_sentences {
        spec.general_sentences = n;
    }
    let corpus = synth_generate(&spec)?;
    corpus.save(&a.out, Some(&spec))?;
    let _ = writeln!(
        out,
        "wrote {} domains ({} general sentences) to {}",
        corpus.domains.len(),
        corpus.general.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let opts = a.options()?;
    let corpus = a.source.corpus()?;
    let prepared = Prepared::new(&corpus, opts.task, opts.vocab_cap)?;
    let base = Base::build(&prepared, opts.model_seed, &opts.pretrain)?;
    let (_, rows) = run_sequence(&prepared, &opts, &base, &a.out)?;
    for r in rows {
        let _ = writeln!(out, "{:<8} {:<6} {:<9} {:.4}", r.order_id, r.task, r.metric, r.value);
    }
    Ok(())
}

fn cmd_warmup(a: &TargetArgs, out: &mut dyn Write) -> CliResult<()> {
    for dir in order_dirs(&a.run)? {
        let run = TrainedRun::load(&dir)?;
        if run.state().is_none() {
            return Err(Error::Usage(format!("{} is a sequence baseline; it has no warmup", dir.display())).into());
        }
        let state_dir = dir.join(STATE_DIR);
        let (mut state, config) = load_run(&state_dir)?;
        warmup(&run.model, &run.tokenizer, &mut state, &config)?;
        save_run(&state, &config, &state_dir)?;
        let _ = writeln!(out, "warmed {} clones in {}", state.warmed.len(), dir.display());
    }
    Ok(())
}

fn cmd_prototypes(a: &PrototypeArgs, out: &mut dyn Write) -> CliResult<()> {
    let corpus = a.source.corpus()?;
    for dir in order_dirs(&a.run)? {
        let run = TrainedRun::load(&dir)?;
        let mut header = run.header.clone();
        if let Some(e) = a.eps_scale {
            header.eps_scale = e;
        }
        header.pooled_covariance |= a.pooled_covariance;
        let sentences = header
            .order
            .iter()
            .map(|name| {
                corpus
                    .domains
                    .iter()
                    .find(|d| &d.name == name)
                    .map(|d| d.train.clone())
                    .ok_or_else(|| Error::Usage(format!("corpus has no domain `{name}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let set = build_prototypes(&run.model, &run.tokenizer, &sentences, header.eps_scale, header.pooled_covariance)?;
        save_prototypes(&set, &dir.join(PROTOTYPES))?;
        write_text(&dir.join("run.json"), &to_json(&header)?)?;
        let _ = writeln!(out, "{} prototypes written to {}", set.len(), dir.display());
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()).into())
}

fn eval_instances(a: &EvalArgs, task: Task) -> CliResult<Vec<Instance>> {
    let sentences: Vec<Instance> = match (&a.test, &a.data, &a.synth) {
        (Some(p), None, None) => load_dataset(p)?,
        (None, Some(_), None) | (None, None, Some(_)) => {
            let source = DataSource {
                data: a.data.clone(),
                synth: a.synth.clone(),
            };
            source
                .corpus()?
                .domains
                .iter()
                .flat_map(|d| {
                    d.test.iter().map(|i| Instance {
                        domain: Some(d.name.clone()),
                        ..i.clone()
                    })
                })
                .collect()
        }
        _ => return Err(Error::Usage("give exactly one of --test, --data and --synth".into()).into()),
    };
    Ok(expand_for_task(&sentences, task)?)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let dir = one_order(&a.run, a.order)?;
    let run = TrainedRun::load(&dir)?;
    let mode: EvalMode = a.mode.parse()?;
    let test = eval_instances(a, run.header.task)?;
    let warmed = !a.no_warmup && run.state().is_some_and(|s| s.is_warmed());
    let seed = a.seed.unwrap_or(run.header.order_seed ^ 0x5eed);
    let (report, preds) = run.evaluate(&test, mode, warmed, seed)?;
    if let Some(p) = &a.predictions {
        let mut text = String::new();
        for pr in &preds {
            text.push_str(&serde_json::to_string(pr).map_err(|e| Error::Format(e.to_string()))?);
            text.push('\n');
        }
        write_text(p, &text)?;
    }
    let _ = writeln!(out, "{}", to_json(&report)?);
    Ok(())
}

fn cmd_heatmap(a: &HeatmapArgs, out: &mut dyn Write) -> CliResult<()> {
    let dir = one_order(&a.run, a.order)?;
    let run = TrainedRun::load(&dir)?;
    let metric = match &a.metric {
        Some(m) => m.clone(),
        None => metric_names(run.header.task)[0].to_string(),
    };
    let path = dir.join(matrix_file(&metric));
    if !path.is_file() {
        return Err(Error::Usage(format!("no `{metric}` matrix in {}", dir.display())).into());
    }
    let csv = ResultMatrix::from_csv(&read_text(&path)?)?.to_csv();
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => {
            let _ = out.write_all(csv.as_bytes());
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()).into());
    }
    let mut worst = 0.0f64;
    for seed in a.first_seed..a.first_seed + a.seeds {
        let r = gradient_suite(seed, a.eps)?;
        let _ = writeln!(
            out,
            "seed {seed:>3}  lml {:.2e}  orthogonal {:.2e}  combined {:.2e}",
            r.lml, r.orthogonal, r.combined
        );
        worst = worst.max(r.worst());
    }
    let _ = writeln!(out, "worst {worst:.2e} (tolerance {:.0e})", a.tol);
    if !(worst <= a.tol) {
        return Err(CliError::Check(format!("gradient error {worst:.2e} exceeds {:.0e}", a.tol)));
    }
    Ok(())
}

fn cmd_score(a: &ScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    let table = ScoreTable::from_csv(&read_text(&a.table)?)?;
    let csv = table.to_csv_with_scores()?;
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => {
            let _ = out.write_all(csv.as_bytes());
        }
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::Warmup(a) => cmd_warmup(a, out),
        Command::Prototypes(a) => cmd_prototypes(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Heatmap(a) => cmd_heatmap(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Score(a) => cmd_score(a, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("abscl: {e}");
            e.exit_code()
        }
    }
}
