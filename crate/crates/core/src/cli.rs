//! The `fpcm` command line: training, evaluation, attacks and analyses.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advtrain::{self, evaluate, fgsm, pgd, EpochRecord, EvalSpec};
use crate::analysis::{self, AttackResult, RobustnessReport};
use crate::config::{ConfigBuilder, RunConfig};
use crate::data::{Dataset, Split, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::model::{BnMode, Model, Network, EVAL_BETA};
use crate::persist::{self, write_atomic, write_json, CheckpointMeta};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const EPOCH_LOG: &str = "epoch_log.jsonl";
pub const CHECKPOINT: &str = "checkpoint.fpcm";

#[derive(Debug, Parser)]
#[command(name = "fpcm", version, about = "Frequency preference control: training, attacks and spectral analyses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint and an epoch log.
    Train(RunArgs),
    /// Clean and PGD accuracy with weighted robust accuracy.
    Eval(RunArgs),
    /// Accuracy under FGSM and PGD.
    Attack(RunArgs),
    /// High-frequency norm of every layer output.
    Profile(RunArgs),
    /// Success rate of low-passed random noise across cutoffs.
    Sweep(RunArgs),
    /// Statistics of the learned channel weights per stage.
    AlphaStats(RunArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Data root directory; overrides the config and the environment.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Parses arguments and runs the subcommand, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AlphaStats(a) => cmd_alpha_stats(a),
    };
    exit_code(result)
}

/// Maps a result to an exit code, reporting errors on stderr.
pub fn exit_code(r: Result<()>) -> i32 {
    match r {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Resolves the configuration: defaults, then the file, then `--set`, then
/// `--seed` and the data directory (`--data` over the environment).
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut b = ConfigBuilder::default();
    if let Some(path) = &args.config {
        b.merge_file(path)?;
    }
    for o in &args.overrides {
        b.set_str(o)?;
    }
    if let Some(seed) = args.seed {
        b.set("seed", toml::Value::Integer(seed as i64))?;
    }
    let dir = args
        .data
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
    if let Some(dir) = dir {
        b.set("data.dir", toml::Value::String(dir.to_string_lossy().into_owned()))?;
    }
    b.build()
}

/// Resolves the config, creates the output directory and writes the
/// resolved snapshot into it.
fn prepare(args: &RunArgs) -> Result<RunConfig> {
    let cfg = resolve_config(args)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_atomic(&args.out.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
    Ok(cfg)
}

fn checkpoint_path(args: &RunArgs) -> Result<&Path> {
    args.checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("this subcommand needs --checkpoint"))
}

/// Loads the checkpoint with the evaluation cutoff applied.
fn load_eval_model(args: &RunArgs) -> Result<(Model, String)> {
    let path = checkpoint_path(args)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut model = persist::decode(&bytes)?.model;
    if model.scheduled_beta().is_some() {
        model.set_scheduled_beta(EVAL_BETA)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((model, format!("{name}@{:08x}", crc32fast::hash(&bytes))))
}

fn config_hash(model: &Model) -> String {
    let json = serde_json::to_vec(model.config()).expect("config serializes");
    format!("{:08x}", crc32fast::hash(&json))
}

fn analysis_subset(cfg: &RunConfig, data: &Dataset) -> Result<(crate::Tensor, Vec<usize>)> {
    let n = if cfg.analysis.samples == 0 {
        data.len()
    } else {
        cfg.analysis.samples.min(data.len())
    };
    let b = data.head(n)?;
    Ok((b.images, b.labels))
}

fn write_pair<T: Serialize>(out: &Path, stem: &str, value: &T, csv: &str) -> Result<()> {
    write_json(&out.join(format!("{stem}.json")), value)?;
    write_atomic(&out.join(format!("{stem}.csv")), csv.as_bytes())
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let train_data = cfg.load_data(Split::Train)?;
    let test_data = if cfg.train.eval_each_epoch {
        Some(cfg.load_data(Split::Test)?)
    } else {
        None
    };
    let mut model = Model::build(&cfg.model_config()?, cfg.seed)?;
    let tc = cfg.train_config()?;
    let attack = cfg.attack_config(cfg.attack.train_steps);
    let eval = test_data.as_ref().map(|d| EvalSpec {
        data: d,
        attack: cfg.attack_config(cfg.attack.eval_steps),
        batch_size: cfg.eval.batch_size,
    });
    let log_path = args.out.join(EPOCH_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let report = advtrain::train_with(&mut model, &train_data, &tc, &attack, eval, |rec: &EpochRecord| {
        advtrain::write_epoch_log(std::slice::from_ref(rec), &mut log)
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        eprintln!(
            "epoch {} beta {:.4} lr {:.2e} loss {:.4} train acc {:.3}",
            rec.epoch, rec.beta, rec.lr, rec.train_loss, rec.train_robust_acc
        );
        Ok(())
    })?;
    let meta = CheckpointMeta {
        epoch: report.epochs.len(),
        beta: model.scheduled_beta(),
        seed: cfg.seed,
    };
    persist::save(&model, &meta, Some(&report.optimizer), &args.out.join(CHECKPOINT))?;
    Ok(())
}

pub fn cmd_eval(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let (model, model_id) = load_eval_model(args)?;
    let data = cfg.load_data(Split::Test)?;
    let attack = cfg.attack_config(cfg.attack.eval_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = evaluate(&model.view(BnMode::Eval), &data, cfg.eval.batch_size, Some(&attack), &mut rng)?;
    let report = RobustnessReport::new(
        model_id,
        config_hash(&model),
        cfg.seed,
        EVAL_BETA,
        r.samples,
        r.clean_acc,
        vec![AttackResult {
            attack: format!("pgd-{}", attack.steps),
            epsilon: attack.epsilon,
            step_size: attack.step_size,
            steps: attack.steps,
            robust_acc: r.robust_acc.expect("attack requested"),
        }],
        cfg.eval.pi_nat,
        cfg.eval.pi_adv,
    )?;
    write_json(&args.out.join("report.json"), &report)?;
    eprintln!(
        "clean {:.4} robust {:.4} w-robust {}",
        report.clean_acc, report.attacks[0].robust_acc, report.w_robust_percent
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct AttackReport {
    model_id: String,
    seed: u64,
    samples: usize,
    clean_acc: f64,
    attacks: Vec<AttackResult>,
}

pub fn cmd_attack(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let (model, model_id) = load_eval_model(args)?;
    let data = cfg.load_data(Split::Test)?;
    let net = model.view(BnMode::Eval);
    let pgd_cfg = cfg.attack_config(cfg.attack.eval_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut clean, mut fgsm_ok, mut pgd_ok) = (0usize, 0usize, 0usize);
    for b in crate::data::batches(&data, cfg.eval.batch_size, None)? {
        let ok: Vec<bool> = net.predict(&b.images)?.iter().zip(&b.labels).map(|(p, y)| p == y).collect();
        clean += ok.iter().filter(|&&c| c).count();
        let count = |x: &crate::Tensor| -> Result<usize> {
            Ok(net
                .predict(x)?
                .iter()
                .zip(&b.labels)
                .zip(&ok)
                .filter(|((p, y), &c)| c && p == y)
                .count())
        };
        fgsm_ok += count(&fgsm(&net, &b.images, &b.labels, cfg.attack.epsilon)?)?;
        pgd_ok += count(&pgd(&net, &b.images, &b.labels, &pgd_cfg, &mut rng)?)?;
    }
    let n = data.len() as f64;
    let report = AttackReport {
        model_id,
        seed: cfg.seed,
        samples: data.len(),
        clean_acc: clean as f64 / n,
        attacks: vec![
            AttackResult {
                attack: "fgsm".into(),
                epsilon: cfg.attack.epsilon,
                step_size: cfg.attack.epsilon,
                steps: 1,
                robust_acc: fgsm_ok as f64 / n,
            },
            AttackResult {
                attack: format!("pgd-{}", pgd_cfg.steps),
                epsilon: pgd_cfg.epsilon,
                step_size: pgd_cfg.step_size,
                steps: pgd_cfg.steps,
                robust_acc: pgd_ok as f64 / n,
            },
        ],
    };
    let mut csv = String::from("attack,epsilon,steps,robust_acc\n");
    for a in &report.attacks {
        csv.push_str(&format!("{},{},{},{}\n", a.attack, a.epsilon, a.steps, a.robust_acc));
    }
    write_pair(&args.out, "attack", &report, &csv)
}

pub fn cmd_profile(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let (model, _) = load_eval_model(args)?;
    let data = cfg.load_data(Split::Test)?;
    let (x, _) = analysis_subset(&cfg, &data)?;
    let p = analysis::layer_freq_profile(&model, &x, cfg.analysis.beta)?;
    write_pair(&args.out, "profile", &p, &p.to_csv())
}

pub fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let (model, _) = load_eval_model(args)?;
    let data = cfg.load_data(Split::Test)?;
    let (x, y) = analysis_subset(&cfg, &data)?;
    let r = analysis::freq_noise_sweep(
        &model.view(BnMode::Eval),
        &x,
        &y,
        &cfg.analysis.sweep_betas,
        cfg.analysis.sweep_epsilon,
        cfg.analysis.sweep_draws,
        cfg.seed,
    )?;
    write_pair(&args.out, "sweep", &r, &r.to_csv())
}

pub fn cmd_alpha_stats(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let (model, _) = load_eval_model(args)?;
    let data = cfg.load_data(Split::Test)?;
    let (x, _) = analysis_subset(&cfg, &data)?;
    let s = analysis::alpha_stats(&model, &x)?;
    write_pair(&args.out, "alpha_stats", &s, &s.to_csv())
}
