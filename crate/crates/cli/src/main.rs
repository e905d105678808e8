//! `scorelab`: data generation, training, attacks, purification and the
//! evaluation suite from the command line.
//!
//! Every command prints the resolved configuration as one JSON line on
//! stdout before running. Failures print one JSON line on stderr and exit
//! with 2 (usage), 3 (missing artifact), 4 (schedule fingerprint mismatch),
//! 5 (numeric failure) or 1 (anything else).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scorelab_core::attacks::{save_outcome, Norm};
use scorelab_core::data::{export_image, generate, load_batch, save_batch};
use scorelab_core::diffusion::Sampler;
use scorelab_core::evaluation::{
    benchmark_attacks, run_experiment_suite, EvalReport, Manifest, SuiteModels, Table, CSV_HEADER,
};
use scorelab_core::models::{
    save_params, Architecture, ClassifierParams, DenoiserHyper, DenoiserParams,
    TimeClassifierHyper, TimeClassifierParams, TrainConfig,
};
use scorelab_core::numeric::io::{load_tensor, save_tensor};
use scorelab_core::numeric::RandomSource;
use scorelab_core::purification::{purify, SeedPolicy};
use scorelab_core::Error;

const LOCK_FILE: &str = ".scorelab.lock";
const DEFAULT_MANIFEST: &str = "configs/default.json";

#[derive(Parser, Debug)]
#[command(name = "scorelab", version, about = "Score-guided attacks against purified classifiers")]
struct Cli {
    /// Manifest JSON. Defaults to configs/default.json when present.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    artifact_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint.
    Train(TrainArgs),
    /// Run one tagged attack from the manifest on the evaluation images.
    Attack(AttackArgs),
    /// Purify a tensor file of images.
    Purify(PurifyArgs),
    /// Run the experiment suite and write the four result tables.
    Eval(SuiteArgs),
    /// Write only the runtime table.
    Bench(SuiteArgs),
    /// Print the result tables as markdown.
    Report,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Classifier,
    TimeClassifier,
    Denoiser,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(value_enum)]
    kind: Kind,
    /// Classifier architecture: conv-small or mlp.
    #[arg(long, default_value = "conv-small")]
    arch: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    tag: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eval_images: Option<usize>,
}

#[derive(Args, Debug)]
struct PurifyArgs {
    /// `[B, C, H, W]` tensor file in `[0, 1]`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    t_star: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Draw a fresh purification key per call instead of the fixed seed.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_images: Option<usize>,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::InvalidConfig(_) => (2, "usage"),
            Error::MissingArtifact { .. } => (3, "missing-artifact"),
            Error::FingerprintMismatch { .. } => (4, "fingerprint-mismatch"),
            Error::NonFinite(_) | Error::Divergence(_) | Error::NoConvergence(_) | Error::EmptyDenominator => {
                (5, "numeric")
            }
            _ => (1, "error"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        kind: "usage",
        message: message.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            return fail(usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    if let Err(f) = configure_threads() {
        return fail(f);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", json!({"error": f.kind, "code": f.code, "message": f.message}));
    ExitCode::from(f.code)
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("SCORELAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("SCORELAB_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Manifest from `--manifest`, else `configs/default.json`, else defaults,
/// then global flag overrides.
fn load_manifest(cli: &Cli) -> std::result::Result<Manifest, Failure> {
    let path = match &cli.manifest {
        Some(p) => Some(p.clone()),
        None => Some(PathBuf::from(DEFAULT_MANIFEST)).filter(|p| p.exists()),
    };
    let mut m = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|_| {
                Failure::from(Error::MissingArtifact {
                    name: "manifest".into(),
                    path: p.clone(),
                })
            })?;
            serde_json::from_str(&text).map_err(|e| usage(format!("manifest {}: {e}", p.display())))?
        }
        None => Manifest::default(),
    };
    if let Some(d) = &cli.artifact_dir {
        m.artifact_dir = d.clone();
    }
    if let Some(d) = &cli.output_dir {
        m.output_dir = d.clone();
    }
    Ok(m)
}

/// Advisory lock on the output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> std::result::Result<Lock, Failure> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure {
                code: 1,
                kind: "locked",
                message: format!("{} exists; another scorelab process owns this directory", path.display()),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn print_config(command: &str, manifest: &Manifest, args: serde_json::Value) {
    println!("{}", json!({"command": command, "manifest": manifest, "args": args}));
}

fn run(cli: Cli) -> Outcome {
    let mut m = load_manifest(&cli)?;
    match cli.command {
        Command::GenData(a) => gen_data(&mut m, a),
        Command::Train(a) => train(&mut m, a),
        Command::Attack(a) => attack(&mut m, a),
        Command::Purify(a) => purify_cmd(&mut m, a),
        Command::Eval(a) => suite(&mut m, a, false),
        Command::Bench(a) => suite(&mut m, a, true),
        Command::Report => report(&m),
    }
}

fn gen_data(m: &mut Manifest, a: GenDataArgs) -> Outcome {
    if let Some(k) = a.classes {
        m.dataset.num_classes = k;
    }
    if let Some(r) = a.res {
        m.dataset.resolution = r;
    }
    if let Some(n) = a.per_class {
        m.dataset.samples_per_class = n;
    }
    if let Some(s) = a.seed {
        m.dataset.seed = s;
    }
    print_config("gen-data", m, json!({}));
    let _lock = Lock::acquire(&m.output_dir)?;
    std::fs::create_dir_all(&m.artifact_dir)?;
    let (train, test) = generate(&m.dataset)?;
    save_batch(&m.train_data_path(), &m.dataset, &train)?;
    save_batch(&m.test_data_path(), &m.dataset, &test)?;
    Ok(())
}

fn train(m: &mut Manifest, a: TrainArgs) -> Outcome {
    if let Some(s) = a.seed {
        m.seed = s;
    }
    let arch: Architecture = a.arch.parse()?;
    let base = match a.kind {
        Kind::Classifier => TrainConfig::for_classifier(arch),
        Kind::TimeClassifier => TrainConfig::for_time_classifier(),
        Kind::Denoiser => TrainConfig::for_denoiser(),
    };
    let cfg = TrainConfig {
        seed: m.seed,
        epochs: a.epochs.unwrap_or(base.epochs),
        ..base
    };
    cfg.validate()?;
    print_config(
        "train",
        m,
        json!({"kind": format!("{:?}", a.kind), "arch": arch.tag(), "train_config": cfg}),
    );
    let _lock = Lock::acquire(&m.output_dir)?;
    let (spec, data) = load_batch(&m.train_data_path())?;
    let sched = m.schedule.build()?;
    let k = spec.num_classes;
    let (path, losses) = match a.kind {
        Kind::Classifier => {
            let (model, rep) = ClassifierParams::train(&data, arch, k, &cfg)?;
            let p = m.victim_path(arch);
            save_params(&model, &p)?;
            (p, rep.epoch_losses)
        }
        Kind::TimeClassifier => {
            let (model, rep) = TimeClassifierParams::train(&data, &sched, k, TimeClassifierHyper::default(), &cfg)?;
            let p = m.time_classifier_path();
            save_params(&model, &p)?;
            (p, rep.epoch_losses)
        }
        Kind::Denoiser => {
            let (model, rep) = DenoiserParams::train(&data, &sched, DenoiserHyper::default(), &cfg)?;
            let p = m.denoiser_path();
            save_params(&model, &p)?;
            (p, rep.epoch_losses)
        }
    };
    println!("{}", json!({"checkpoint": path, "epoch_losses": losses}));
    Ok(())
}

fn attack(m: &mut Manifest, a: AttackArgs) -> Outcome {
    if let Some(s) = a.seed {
        m.seed = s;
    }
    if let Some(n) = a.eval_images {
        m.eval_images = n;
    }
    let mut entry = m.attack(&a.tag)?.clone();
    if a.gamma.is_some() {
        entry.gamma = a.gamma;
        entry.eta = None;
    }
    if let Some(norm) = &a.norm {
        entry.norm = Some(norm.parse::<Norm>()?);
    }
    if a.n.is_some() {
        entry.n = a.n;
    }
    let sched = m.schedule.build()?;
    let cfg = entry.resolve(&sched, m.seed);
    cfg.validate(sched.steps())?;
    print_config("attack", m, json!({"tag": a.tag, "entry": entry, "attack_config": cfg}));
    let _lock = Lock::acquire(&m.output_dir)?;
    let models = SuiteModels::load(m)?;
    let eval = models.test.head(m.eval_images.min(models.test.len()))?;
    let out = models.run_attack(entry.method, &m.purify, &eval.images, &eval.labels, &cfg)?;
    let dir = m.output_dir.join("attacks").join(&entry.tag);
    save_outcome(&dir, entry.method.tag(), &cfg, &out)?;
    println!("{}", json!({"outcome": dir, "wall_time_s": out.wall_time}));
    Ok(())
}

fn purify_cmd(m: &mut Manifest, a: PurifyArgs) -> Outcome {
    let mut cfg = m.purify.clone();
    if let Some(t) = a.t_star {
        cfg.t_star = t;
    }
    if let Some(s) = a.stride {
        cfg.ddim_stride = s;
    }
    if let Some(s) = &a.sampler {
        cfg.sampler = s.parse::<Sampler>()?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.fresh {
        cfg.seed_policy = SeedPolicy::FreshPerCall;
    }
    let sched = m.schedule.build()?;
    cfg.validate(&sched)?;
    m.purify = cfg.clone();
    print_config("purify", m, json!({"input": a.input}));
    let _lock = Lock::acquire(&m.output_dir)?;
    if !a.input.exists() {
        return Err(Error::MissingArtifact {
            name: "input tensor".into(),
            path: a.input.clone(),
        }
        .into());
    }
    let x = load_tensor(&a.input)?;
    let den = scorelab_core::models::load_for_schedule::<DenoiserParams>(&m.denoiser_path(), &sched)?;
    let mut rng = RandomSource::new(m.seed, 0);
    let out = purify(&cfg, &den, &sched, &x, &mut rng)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let dir = m.output_dir.join("purified");
    std::fs::create_dir_all(&dir)?;
    let file = dir.join(format!("{stem}.stns"));
    save_tensor(&file, &out)?;
    for i in 0..out.batch_len() {
        export_image(&out.batch_item(i)?, &dir.join(format!("{stem}-{i}.pgm")))?;
    }
    println!("{}", json!({"purified": file, "images": out.batch_len()}));
    Ok(())
}

fn suite(m: &mut Manifest, a: SuiteArgs, bench_only: bool) -> Outcome {
    if let Some(s) = a.seed {
        m.seed = s;
    }
    if let Some(n) = a.eval_images {
        m.eval_images = n;
    }
    m.validate()?;
    print_config(if bench_only { "bench" } else { "eval" }, m, json!({}));
    let _lock = Lock::acquire(&m.output_dir)?;
    let files: Vec<PathBuf> = if bench_only {
        let models = SuiteModels::load(m)?;
        let report = EvalReport {
            rows: benchmark_attacks(m, &models)?,
            kl: Vec::new(),
        };
        vec![report.write_table(&m.output_dir, Table::Runtime)?]
    } else {
        run_experiment_suite(m)?;
        Table::ALL.iter().map(|t| m.output_dir.join(t.file_name())).collect()
    };
    println!("{}", json!({"tables": files}));
    Ok(())
}

fn report(m: &Manifest) -> Outcome {
    print_config("report", m, json!({}));
    let mut text = String::new();
    for t in Table::ALL {
        let path = m.output_dir.join(t.file_name());
        let body = std::fs::read_to_string(&path).map_err(|_| {
            Failure::from(Error::MissingArtifact {
                name: t.file_name().into(),
                path: path.clone(),
            })
        })?;
        text.push_str(&format!("## {}\n\n", t.file_name()));
        text.push_str(&markdown_table(&body));
        text.push('\n');
    }
    print!("{text}");
    Ok(())
}

fn markdown_table(csv_text: &str) -> String {
    let mut lines = csv_text.lines();
    let mut out = String::new();
    let header = lines.next().unwrap_or_default();
    let cols = header.split(',').count().max(CSV_HEADER.len());
    out.push_str(&format!("| {} |\n", header.replace(',', " | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(cols)));
    for l in lines {
        out.push_str(&format!("| {} |\n", l.replace(',', " | ")));
    }
    out
}
