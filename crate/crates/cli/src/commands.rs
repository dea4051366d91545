//! Subcommands of the `apa` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use apa_core::diffusion::SamplerMode;
use apa_core::editops::{edit, sdedit_baseline, write_result, EditRequest, Model};
use apa_core::synthdata::{generate_records, read_dataset, read_grids, write_dataset, SpecPins, Task};
use apa_core::training::{pretrain_base, train_adapter, write_log_csv, Checkpoint, LogEntry};
use apa_core::ApaError;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{write_run_record, RunConfig};
use crate::harness::{evaluate, held_out_requests, sweep_grid, write_sweep, EvalOptions, Method, SweepAxis, SweepFixed};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "apa", version, about = "Audio prompt adapters on a small spectrogram diffusion model")]
pub struct Cli {
    /// TOML run configuration (default: $APA_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the caption-conditioned base model.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the audio adapters on a frozen base.
    TrainAdapter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Audio-prompted edit of one clip.
    Edit(EditArgs),
    /// Partial-noising baseline edit of one clip.
    Sdedit(EditArgs),
    /// Edit a held-out request set and score it.
    Eval(EvalArgs),
    /// Sweep one inference hyperparameter over a held-out request set.
    Sweep(SweepArgs),
    /// Checkpoint-free algebra and metric checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Timbre,
    Texture,
    Accomp,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Timbre => Task::Timbre,
            TaskArg::Texture => Task::Texture,
            TaskArg::Accomp => Task::Accomp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplerArg {
    Deterministic,
    Ancestral,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Required by `edit`, ignored by `sdedit`.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Dataset or grid file holding the input clip.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Target class, by name or index.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub omega: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    /// Reference clips for Fréchet distances; skipped when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "timbre")]
    pub task: TaskArg,
    #[arg(long)]
    pub requests: Option<usize>,
    /// Also run the adapter with the null caption as negative prompt.
    #[arg(long)]
    pub negative_ablation: bool,
    /// Unconditional samples scored against the reference (0 skips).
    #[arg(long)]
    pub unconditional: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated ascending values (default: the configured grid).
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub requests: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Short category for a failure, printed as `error[<category>]`.
pub fn error_category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ApaError>() {
            return match e {
                ApaError::Io(_) => "io",
                ApaError::Format(_) | ApaError::Corrupt(_) => "format",
                ApaError::Contract(_) | ApaError::Dimension(_) => "contract",
                ApaError::Diverged(_) => "numeric",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
    }
    "runtime"
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {:#}", error_category(&e), e);
            1
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::GenData { n, out } => {
            if let Some(n) = n {
                config.data.clips = n;
            }
            config.validate()?;
            let records = generate_records(config.data.clips, config.seed, &SpecPins::default())?;
            write_dataset(&out, &records).with_context(|| format!("writing {}", out.display()))?;
            write_run_record(&out, "gen-data", &config)?;
            println!("wrote {} clips to {}", records.len(), out.display());
        }
        Command::Pretrain { data, out, steps } => {
            if let Some(s) = steps {
                config.base.steps = s;
            }
            config.validate()?;
            let records = load_dataset(&data)?;
            let ckpt = pretrain_base(&config.base_train(), &config.model, &records, &mut print_progress("base"))?;
            save_checkpoint(&ckpt, &out, "pretrain", &config)?;
        }
        Command::TrainAdapter { data, base, out, steps } => {
            if let Some(s) = steps {
                config.adapter.steps = s;
            }
            config.validate()?;
            let records = load_dataset(&data)?;
            let base = load_checkpoint(&base)?;
            let ckpt = train_adapter(&base, &config.adapter_train(), &records, &mut print_progress("adapter"))?;
            save_checkpoint(&ckpt, &out, "train-adapter", &config)?;
        }
        Command::Edit(args) => run_edit(args, &mut config, false)?,
        Command::Sdedit(args) => run_edit(args, &mut config, true)?,
        Command::Eval(args) => {
            if let Some(n) = args.requests {
                config.eval.requests = n;
            }
            if let Some(n) = args.unconditional {
                config.eval.unconditional_samples = n;
            }
            config.validate()?;
            let model = load_model(&args.base, Some(&args.adapter))?;
            let mut requests = held_out_requests(args.task.into(), config.eval.requests, config.eval.request_seed)?;
            for r in &mut requests {
                r.steps = config.edit.steps;
                r.sampler = sampler(&config, None);
            }
            let mut methods = vec![Method::Adapter, Method::Sdedit];
            if args.negative_ablation {
                methods.push(Method::AdapterNullNegative);
            }
            let reference = match &args.data {
                Some(p) => Some(load_dataset(p)?.into_iter().map(|r| r.spectrogram).collect()),
                None => None,
            };
            let opts = EvalOptions {
                methods,
                unconditional: if reference.is_some() { config.eval.unconditional_samples } else { 0 },
                reference,
                seed: config.seed,
                steps: config.edit.steps,
            };
            let report = evaluate(&requests, &model, &opts)?;
            let fd_path = report.write(&args.out)?;
            write_run_record(&args.out, "eval", &config)?;
            for m in &opts.methods {
                let chroma = report.mean(*m, |r| r.chroma_similarity).unwrap_or(f64::NAN);
                let transfer = report.mean(*m, |r| r.transfer_score).unwrap_or(f64::NAN);
                println!("{m:?}: mean chroma {chroma:.4}, mean transfer {transfer:.4}");
            }
            for f in &report.frechet {
                println!("frechet {}: {:.4}", f.set, f.frechet_distance);
            }
            println!("wrote {} and {}", args.out.display(), fd_path.display());
        }
        Command::Sweep(args) => {
            if let Some(n) = args.requests {
                config.sweep.requests = n;
            }
            config.validate()?;
            let s = &config.sweep;
            let values = args.values.clone().unwrap_or_else(|| match args.axis {
                SweepAxis::Omega => s.omega_values.iter().map(|&w| w as f64).collect(),
                SweepAxis::Alpha => s.alpha_values.iter().map(|&a| a as f64).collect(),
                SweepAxis::Lambda => s.lambda_values.iter().map(|&l| l as f64).collect(),
            });
            let model = load_model(&args.base, Some(&args.adapter))?;
            let mut requests = held_out_requests(Task::Timbre, s.requests, s.request_seed)?;
            for r in &mut requests {
                r.steps = config.edit.steps;
                r.sampler = sampler(&config, None);
            }
            let fixed = SweepFixed { omega: s.omega, alpha: s.alpha, lambda: s.lambda };
            let rows = sweep_grid(args.axis, &values, fixed, &requests, &model)?;
            let plot = write_sweep(&args.out, args.axis, &rows)?;
            write_run_record(&args.out, "sweep", &config)?;
            for r in &rows {
                println!(
                    "{:>6}: transfer {:.4} ± {:.4}, chroma {:.4} ± {:.4}",
                    r.value, r.mean_transfer, r.std_transfer, r.mean_chroma, r.std_chroma
                );
            }
            println!("wrote {} and {}", args.out.display(), plot.display());
        }
        Command::Selftest => {
            let report = selftest::run();
            for c in report.failed() {
                eprintln!("FAIL {}: {}", c.name, c.outcome.as_ref().err().map(String::as_str).unwrap_or(""));
            }
            println!("selftest: {} of {} checks passed", report.passed(), report.checks.len());
            ensure!(report.passed() == report.checks.len(), "{} selftest checks failed", report.checks.len() - report.passed());
        }
    }
    Ok(())
}

fn run_edit(args: EditArgs, config: &mut RunConfig, baseline: bool) -> Result<()> {
    if let Some(s) = args.steps {
        config.edit.steps = s;
    }
    if args.omega.is_some() {
        config.edit.omega = args.omega;
    }
    if args.alpha.is_some() {
        config.edit.alpha = args.alpha;
    }
    if args.lambda.is_some() {
        config.edit.lambda = args.lambda;
    }
    config.validate()?;
    let base = load_checkpoint(&args.base)?;
    let adapter = match (&args.adapter, baseline) {
        (_, true) => None,
        (Some(p), false) => Some(load_checkpoint(p)?),
        (None, false) => return Err(ApaError::Contract("edit needs --adapter".into()).into()),
    };
    let model = Model::from_checkpoints(&base, adapter.as_ref())?;
    let (clip, spec) = load_input(&args.input, args.index)?;
    let task: Task = args.task.into();
    let target = match args.target.parse::<usize>() {
        Ok(i) => i,
        Err(_) => task.class_from_name(&args.target)?,
    };
    let mut request = EditRequest::new(clip, spec, task, target, config.seed);
    request.omega = config.edit.omega.unwrap_or(request.omega);
    request.alpha = config.edit.alpha.unwrap_or(request.alpha);
    request.lambda = config.edit.lambda.unwrap_or(request.lambda);
    request.steps = config.edit.steps;
    request.sampler = sampler(config, args.sampler);
    config.edit.sampler = request.sampler;
    let result = if baseline { sdedit_baseline(&request, &model)? } else { edit(&request, &model)? };
    write_result(&args.out, &result).with_context(|| format!("writing {}", args.out.display()))?;
    write_run_record(&args.out, if baseline { "sdedit" } else { "edit" }, config)?;
    println!("wrote {}", args.out.display());
    eprintln!("{} steps in {:.0} ms", result.metadata.timesteps.len(), result.wall_time_ms);
    Ok(())
}

fn sampler(config: &RunConfig, flag: Option<SamplerArg>) -> SamplerMode {
    match flag {
        Some(SamplerArg::Deterministic) => SamplerMode::Deterministic,
        Some(SamplerArg::Ancestral) => SamplerMode::Ancestral,
        None => config.edit.sampler,
    }
}

fn print_progress(stage: &'static str) -> impl FnMut(&LogEntry) {
    move |e| eprintln!("{stage} step {:>6}  loss {:.5}", e.step, e.loss)
}

fn load_dataset(path: &Path) -> Result<Vec<apa_core::synthdata::Record>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_model(base: &Path, adapter: Option<&Path>) -> Result<Model> {
    let base = load_checkpoint(base)?;
    let adapter = adapter.map(load_checkpoint).transpose()?;
    Ok(Model::from_checkpoints(&base, adapter.as_ref())?)
}

fn save_checkpoint(ckpt: &Checkpoint, out: &Path, command: &str, config: &RunConfig) -> Result<()> {
    ckpt.save(out).with_context(|| format!("writing {}", out.display()))?;
    write_log_csv(crate::harness::sibling(out, ".log.csv"), &ckpt.manifest.metric_log)?;
    write_run_record(out, command, config)?;
    println!("wrote {} ({} steps)", out.display(), ckpt.manifest.step);
    Ok(())
}

/// Clip `index` of a dataset file (with its spec) or of a grid file.
fn load_input(path: &Path, index: usize) -> Result<(apa_core::synthdata::Spectrogram, Option<apa_core::synthdata::ClipSpec>)> {
    match read_dataset(path) {
        Ok(records) => {
            let n = records.len();
            let rec = records.into_iter().nth(index).with_context(|| format!("index {index} out of range ({n} clips)"))?;
            Ok((rec.spectrogram, Some(rec.spec)))
        }
        Err(ApaError::Format(_)) => {
            let grids = read_grids(path).with_context(|| format!("reading {}", path.display()))?;
            let n = grids.len();
            match grids.into_iter().nth(index) {
                Some(g) => Ok((g, None)),
                None => bail!("index {index} out of range ({n} grids)"),
            }
        }
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}
