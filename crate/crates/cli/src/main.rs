mod config;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use toml::Value;

use infomax3d::checkpoint::{write_atomic, Checkpoint};
use infomax3d::losses::LossKind;
use infomax3d::molgraph::{featurize, parse_dataset, Dataset, FeatureScheme};
use infomax3d::selftest::run_selftest;
use infomax3d::training::{
    embed, finetune, format_embeddings, pretrain, pretrain_distance, EpochRecord, FinetuneConfig, FinetuneInit,
    PretrainConfig, PretrainOutcome,
};
use infomax3d::Error;

const THREADS_ENV: &str = "INFOMAX3D_THREADS";

/// Contrastive 2D/3D molecular pre-training, fine-tuning and embedding.
#[derive(Parser, Debug)]
#[command(name = "infomax3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive pre-training of the 2D and 3D encoders.
    Pretrain(PretrainArgs),
    /// Pre-training by regressing interatomic distances from 2D node features.
    PretrainDistance(PretrainArgs),
    /// Fine-tune a pre-trained (or randomly initialized) 2D encoder on a target.
    Finetune(FinetuneArgs),
    /// Write eval-mode 2D embeddings, one line per molecule.
    Embed(EmbedArgs),
    /// Run the invariant suite and print pass/fail per property.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with configuration keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override any configuration key, e.g. `--set net2d.hidden=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// ntxent_eq1, multi3d_eq2, multi2d_simall or multi2d_simmax.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    num_conformers: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pre-trained checkpoint whose 2D encoder is transferred.
    #[arg(long, conflicts_with = "rand_init")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    target: String,
    /// Train from random initialization instead of a checkpoint.
    #[arg(long)]
    rand_init: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit code 1 for configuration problems, 2 for failures while running.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string().lines().collect::<Vec<_>>().join(" ");
        match e {
            Error::ConfigMismatch(_) | Error::InvalidArgument(_) => Self::config(message),
            _ => Self::runtime(message),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::runtime(format!("cannot start worker threads: {e}")))?;
    match cli.command {
        Command::Pretrain(a) => run_pretrain(&pool, a, false),
        Command::PretrainDistance(a) => run_pretrain(&pool, a, true),
        Command::Finetune(a) => run_finetune(&pool, a),
        Command::Embed(a) => run_embed(&pool, a),
        Command::Selftest(a) => run_selftest_cmd(a),
    }
}

fn apply_common(table: &mut toml::Table, c: &Common) -> CliResult<()> {
    if let Some(s) = c.seed {
        config::set_path(table, "seed", Value::Integer(to_i64(s)?))?;
    }
    if let Some(e) = c.max_epochs {
        config::set_path(table, "max_epochs", Value::Integer(to_i64(e)?))?;
    }
    if let Some(b) = c.batch_size {
        config::set_path(table, "batch_size", Value::Integer(to_i64(b)?))?;
    }
    for raw in &c.set {
        let (k, v) = config::parse_assignment(raw)?;
        config::set_path(table, &k, v)?;
    }
    Ok(())
}

fn to_i64<T: TryInto<i64>>(v: T) -> CliResult<i64> {
    v.try_into().map_err(|_| CliError::config("numeric flag out of range"))
}

/// Exclusive use of an output directory for the lifetime of the guard.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::config(format!(
                "output directory {} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::runtime(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn load_data(pool: &rayon::ThreadPool, path: &Path, scheme: FeatureScheme) -> CliResult<Dataset> {
    let mut data = parse_dataset(path)?;
    pool.install(|| {
        data.molecules
            .par_iter_mut()
            .for_each(|m| m.graph = featurize(&m.graph, scheme));
    });
    Ok(data)
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes()).map_err(CliError::from)
}

fn json_line<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string(value).map_err(|e| CliError::runtime(format!("cannot serialize metrics: {e}")))
}

fn metrics_text<S: Serialize>(records: &[EpochRecord], summary: &S) -> CliResult<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&json_line(r)?);
        s.push('\n');
    }
    s.push_str(&json_line(&serde_json::json!({ "summary": summary }))?);
    s.push('\n');
    Ok(s)
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> CliResult<()> {
    ckpt.save(path).map_err(CliError::from)
}

fn run_pretrain(pool: &rayon::ThreadPool, a: PretrainArgs, distance: bool) -> CliResult<()> {
    let mut table = config::load_table(a.common.config.as_deref())?;
    if let Some(loss) = &a.loss {
        let kind = LossKind::parse(loss).ok_or_else(|| {
            CliError::config(format!(
                "unknown loss '{loss}'; expected ntxent_eq1, multi3d_eq2, multi2d_simall or multi2d_simmax"
            ))
        })?;
        config::set_path(&mut table, "loss.kind", Value::String(kind.name().into()))?;
    }
    if let Some(t) = a.tau {
        config::set_path(&mut table, "loss.tau", Value::Float(t))?;
    }
    if let Some(c) = a.num_conformers {
        config::set_path(&mut table, "loss.num_conformers", Value::Integer(to_i64(c)?))?;
    }
    apply_common(&mut table, &a.common)?;
    let mut cfg: PretrainConfig = config::into_config(table)?;
    if distance {
        cfg.loss.kind = LossKind::DistanceMse;
        cfg.net2d.num_outputs = 1;
    } else {
        cfg = cfg.resolved();
    }
    cfg.validate()?;

    let _lock = OutputLock::acquire(&a.out)?;
    write_file(&a.out.join("config.toml"), &config::to_toml(&cfg)?)?;
    let train = load_data(pool, &a.data, cfg.net2d.features)?;
    let val = a
        .val_data
        .as_deref()
        .map(|p| load_data(pool, p, cfg.net2d.features))
        .transpose()?;
    let outcome: PretrainOutcome = if distance {
        pretrain_distance(&cfg, &train, val.as_ref())?
    } else {
        pretrain(&cfg, &train, val.as_ref())?
    };
    save_checkpoint(&outcome.best, &a.out.join("best.ckpt"))?;
    save_checkpoint(&outcome.last, &a.out.join("last.ckpt"))?;
    let last = outcome.records.last();
    let summary = serde_json::json!({
        "best_epoch": outcome.best.epoch,
        "epochs": outcome.records.len(),
        "steps": outcome.last.step,
        "final_train_loss": last.map(|r| r.train_loss),
        "final_val_loss": last.and_then(|r| r.val_loss),
    });
    write_file(&a.out.join("metrics.jsonl"), &metrics_text(&outcome.records, &summary)?)?;
    println!("{}", json_line(&summary)?);
    Ok(())
}

fn run_finetune(pool: &rayon::ThreadPool, a: FinetuneArgs) -> CliResult<()> {
    let mut table = config::load_table(a.common.config.as_deref())?;
    apply_common(&mut table, &a.common)?;
    let init = match (&a.checkpoint, a.rand_init) {
        (Some(path), false) => {
            let ckpt = Checkpoint::load(path).map_err(|e| match e {
                Error::Io { .. } => CliError::runtime(e.to_string()),
                other => CliError::config(format!("{}: {other}", path.display())),
            })?;
            if !table.contains_key("net2d") {
                let net2d = Value::try_from(&ckpt.net2d.config)
                    .map_err(|e| CliError::runtime(format!("cannot convert checkpoint config: {e}")))?;
                table.insert("net2d".into(), net2d);
            }
            FinetuneInit::Pretrained(Box::new(ckpt))
        }
        (None, true) => FinetuneInit::RandInit,
        _ => return Err(CliError::config("finetune needs either --checkpoint PATH or --rand-init")),
    };
    let cfg: FinetuneConfig = config::into_config(table)?;
    cfg.validate()?;

    let _lock = OutputLock::acquire(&a.out)?;
    write_file(&a.out.join("config.toml"), &config::to_toml(&cfg)?)?;
    let data = load_data(pool, &a.data, cfg.net2d.features)?;
    let outcome = finetune(&cfg, &init, &data, &a.target)?;
    save_checkpoint(&outcome.best, &a.out.join("best.ckpt"))?;
    write_file(&a.out.join("metrics.jsonl"), &metrics_text(&outcome.records, &outcome.report)?)?;
    let summary = json_line(&outcome.report)?;
    write_file(&a.out.join("summary.json"), &format!("{summary}\n"))?;
    println!("{summary}");
    Ok(())
}

fn run_embed(pool: &rayon::ThreadPool, a: EmbedArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| match e {
        Error::Io { .. } => CliError::runtime(e.to_string()),
        other => CliError::config(format!("{}: {other}", a.checkpoint.display())),
    })?;
    let data = load_data(pool, &a.data, ckpt.net2d.config.features)?;
    let rows = embed(&ckpt, &data)?;
    let path = if a.out.extension().is_some() {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
        a.out.clone()
    } else {
        std::fs::create_dir_all(&a.out)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", a.out.display())))?;
        a.out.join("embeddings.tsv")
    };
    write_file(&path, &format_embeddings(&rows))?;
    println!("wrote {} embeddings to {}", rows.len(), path.display());
    Ok(())
}

fn run_selftest_cmd(a: SelftestArgs) -> CliResult<()> {
    let checks = run_selftest(a.seed)?;
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(CliError::runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
