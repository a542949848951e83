//! `tempt` command-line interface. Machine-readable JSON goes to stdout,
//! progress and diagnostics to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use tempt::adapt::{adapt_video, write_trace_csv, Method};
use tempt::benchmark::{benchmark_videos, run_benchmark};
use tempt::config::RunConfig;
use tempt::data::{derive_seed, generate_video, streams::VIDEO_STREAM, ClassTemplates, SyntheticVideo};
use tempt::gradcheck::{gradcheck, tiny_model, CheckLoss, GradcheckConfig};
use tempt::metrics::macro_f1;
use tempt::model::ModelParams;
use tempt::training::{pretrain, write_log_jsonl};
use tempt::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_ABORTED: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "tempt", version, about = "Test-time adaptation of frame-wise video classifiers")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training, adaptation and the benchmark.
    #[arg(long, global = true, env = "TEMPT_SEED")]
    seed: Option<u64>,
    /// Worker threads for cross-video parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on the synthetic training stream and write TWGT weights.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (default: weights path with .jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write shifted test videos (TTEN + JSON sidecar).
    Generate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Adapt a model to one video and report before/after metrics.
    Adapt {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        /// Per-frame logits before/after as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score the un-adapted model on one video.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        video: PathBuf,
    },
    /// Static vs TENT vs TempT over the configured test videos.
    Benchmark {
        /// Base weights; pretrained from the config when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Check this model instead of the built-in tiny one.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// One loss; all four when omitted.
        #[arg(long)]
        loss: Option<CheckLoss>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// A failed command: exit code plus what to tell the user.
struct Failure {
    code: u8,
    message: String,
    /// Still printed to stdout (aborted adaptation, failed gradcheck).
    output: Option<Value>,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_)
            | Error::InvalidSpec(_)
            | Error::InvalidRange(_)
            | Error::EvenWindow(_)
            | Error::WindowTooLarge { .. }
            | Error::Json(_) => EXIT_CONFIG,
            Error::DivergedLoss { .. } => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Failure { code, message: e.to_string(), output: None }
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("tempt: cannot size thread pool: {e}");
        }
    }
    let result = load_config(&cli).and_then(|cfg| run(cli.command, cfg));
    let (output, code) = match result {
        Ok(v) => (Some(v), 0),
        Err(f) => {
            eprintln!("tempt: {}", f.message);
            (f.output, f.code)
        }
    };
    if let Some(v) = output {
        let mut out = std::io::stdout().lock();
        let written = serde_json::to_writer_pretty(&mut out, &v).map_err(std::io::Error::from).and_then(|_| writeln!(out));
        if let Err(e) = written {
            eprintln!("tempt: writing output: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    ExitCode::from(code)
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let cfg = match &cli.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure {
                code: EXIT_CONFIG,
                message: format!("cannot read config {}: {e}", path.display()),
                output: None,
            })?;
            RunConfig::from_json(&text).map_err(|e| Failure {
                code: EXIT_CONFIG,
                message: format!("invalid config {}: {e}", path.display()),
                output: None,
            })?
        }
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn run(command: Command, cfg: RunConfig) -> CmdResult {
    match command {
        Command::Train { out, log } => cmd_train(&cfg, &out, log),
        Command::Generate { out_dir, count } => cmd_generate(&cfg, &out_dir, count),
        Command::Adapt { weights, video, method, trace } => cmd_adapt(cfg, &weights, &video, method, trace.as_deref()),
        Command::Eval { weights, video } => cmd_eval(&cfg, &weights, &video),
        Command::Benchmark { weights, out_dir } => cmd_benchmark(&cfg, weights.as_deref(), &out_dir),
        Command::Gradcheck { weights, loss, inject_fault } => cmd_gradcheck(&cfg, weights.as_deref(), loss, inject_fault),
    }
}

fn load_weights(path: &Path) -> Result<ModelParams, Failure> {
    ModelParams::load(path).map_err(|e| Failure { code: EXIT_FAILURE, message: format!("{}: {e}", path.display()), output: None })
}

fn load_video(path: &Path) -> Result<SyntheticVideo, Failure> {
    SyntheticVideo::load(path).map_err(|e| Failure { code: EXIT_FAILURE, message: format!("{}: {e}", path.display()), output: None })
}

fn cmd_train(cfg: &RunConfig, out: &Path, log: Option<PathBuf>) -> CmdResult {
    eprintln!("training {} epochs", cfg.train.epochs);
    let trained = pretrain(&cfg.model, &cfg.train, &cfg.data)?;
    for rec in &trained.log {
        eprintln!("epoch {:>3}  loss {:.5}  f1 {:.4}  lr {:.1e}", rec.epoch, rec.loss, rec.f1, rec.lr);
    }
    trained.params.save(out)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("jsonl"));
    let mut f = std::io::BufWriter::new(fs::File::create(&log_path).map_err(Error::from)?);
    write_log_jsonl(&mut f, &trained.log)?;
    f.flush().map_err(Error::from)?;
    Ok(json!({
        "weights": out,
        "log": log_path,
        "val_macro_f1": trained.val.macro_f1,
        "val": trained.val,
        "epochs": trained.log,
        "config": cfg,
    }))
}

fn cmd_generate(cfg: &RunConfig, out_dir: &Path, count: usize) -> CmdResult {
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let templates = ClassTemplates::generate(cfg.model.num_classes, cfg.data.patch, cfg.data.template_seed);
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let seed = derive_seed(cfg.benchmark.master_seed, VIDEO_STREAM, i as u64);
        let video = generate_video(&templates, cfg.model.input_hw, &cfg.data, &cfg.data.test_shift, seed)?;
        let path = out_dir.join(format!("video_{i:03}.tten"));
        video.save(&path)?;
        files.push(json!({ "path": path, "seed": seed, "frames": video.len(), "shift": video.meta.shift }));
    }
    Ok(json!({ "videos": files, "config": cfg }))
}

fn cmd_adapt(mut cfg: RunConfig, weights: &Path, video: &Path, method: Option<Method>, trace: Option<&Path>) -> CmdResult {
    if let Some(m) = method {
        cfg.adapt.method = m;
    }
    let params = load_weights(weights)?;
    let video = load_video(video)?;
    let out = adapt_video(&params, &video.frames, Some(video.labels()), &cfg.adapt)?;
    if let Some(path) = trace {
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(Error::from)?);
        write_trace_csv(&mut f, &out.logits_before, &out.logits_after)?;
        f.flush().map_err(Error::from)?;
    }
    let value = json!({ "report": out.report, "config": cfg });
    match &out.report.aborted {
        Some(reason) => Err(Failure { code: EXIT_ABORTED, message: format!("adaptation aborted: {reason}"), output: Some(value) }),
        None => Ok(value),
    }
}

fn cmd_eval(cfg: &RunConfig, weights: &Path, video: &Path) -> CmdResult {
    let params = load_weights(weights)?;
    let video = load_video(video)?;
    let preds = params.predict(&video.frames, 64)?.argmax_rows();
    let result = macro_f1(&preds, video.labels(), params.spec().num_classes)?;
    Ok(json!({ "eval": result, "config": cfg }))
}

fn cmd_benchmark(cfg: &RunConfig, weights: Option<&Path>, out_dir: &Path) -> CmdResult {
    let params = match weights {
        Some(p) => load_weights(p)?,
        None => {
            eprintln!("no weights given, pretraining {} epochs", cfg.train.epochs);
            let trained = pretrain(&cfg.model, &cfg.train, &cfg.data)?;
            eprintln!("validation macro-F1 {:.4}", trained.val.macro_f1);
            trained.params
        }
    };
    let spec = params.spec();
    let templates = ClassTemplates::generate(spec.num_classes, cfg.data.patch, cfg.data.template_seed);
    let videos = benchmark_videos(&templates, spec.input_hw, &cfg.data, &cfg.benchmark)?;
    eprintln!("adapting {} videos x {} repeats", videos.len(), cfg.benchmark.repeats);
    let table = run_benchmark(&params, &videos, &cfg.adapt, &cfg.benchmark)?;
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let value = json!({ "table": table, "config": cfg });
    fs::write(out_dir.join("benchmark.json"), serde_json::to_vec_pretty(&value).map_err(Error::from)?).map_err(Error::from)?;
    fs::write(out_dir.join("benchmark.csv"), table.to_csv()).map_err(Error::from)?;
    Ok(json!({ "summary": table.summary, "csv": out_dir.join("benchmark.csv"), "config": cfg }))
}

fn cmd_gradcheck(cfg: &RunConfig, weights: Option<&Path>, loss: Option<CheckLoss>, inject_fault: bool) -> CmdResult {
    let seed = cfg.train.seed;
    let params = match weights {
        Some(p) => load_weights(p)?,
        None => tiny_model(seed)?,
    };
    let check_cfg = GradcheckConfig { seed, inject_fault, ..GradcheckConfig::default() };
    let losses = loss.map_or(CheckLoss::ALL.to_vec(), |l| vec![l]);
    let mut reports = Vec::with_capacity(losses.len());
    for l in losses {
        let r = gradcheck(&params, l, &check_cfg)?;
        eprintln!("{:<8} max rel err {:.3e}  {}", l.as_str(), r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
        reports.push(r);
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| {
            let w = r.worst().expect("at least one tensor");
            format!("{}: worst {} (rel err {:.3e})", r.loss.as_str(), w.name, w.max_rel_err)
        })
        .collect();
    let value = json!({ "gradcheck": reports, "config": cfg });
    if failed.is_empty() {
        Ok(value)
    } else {
        Err(Failure { code: EXIT_GRADCHECK, message: format!("gradient check failed: {}", failed.join("; ")), output: Some(value) })
    }
}
