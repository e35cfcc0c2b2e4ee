use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recxi_core::checkpoint::Checkpoint;
use recxi_core::config::RunConfig;
use recxi_core::corpus::{make_trials, prepare_dir, read_trials, write_trials, Corpus, Utterance};
use recxi_core::eval::{embed_utterances, score_trials, COHORT_SEED_OFFSET, TRIAL_SEED_OFFSET};
use recxi_core::metrics::{format_report, write_report, write_scores};
use recxi_core::trainer::{train_run, RunDir};
use recxi_core::verify::{run_all, VerifyConfig};
use recxi_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn config_help() -> String {
    format!(
        "Configuration keys (set with KEY=VALUE after the subcommand; these override --config):\n{}\n\
         Environment:\n  RECXI_THREADS            worker threads, 0 = one per core [default: 0]\n  \
         RUST_LOG                 log filter for progress messages [default: info]\n\n\
         Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime failure",
        RunConfig::help()
    )
}

#[derive(Parser, Debug)]
#[command(name = "recxi", version, about = "Recurrent xi-vector speaker/content disentanglement")]
#[command(after_long_help = config_help())]
struct Cli {
    /// File of KEY=VALUE lines applied before command-line overrides.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Configuration overrides; run `recxi --help` for the key list.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenerateData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model; writes last.ckpt, best.ckpt, metrics.csv and config.txt.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Replace a non-empty run directory.
        #[arg(long, conflicts_with = "resume")]
        force: bool,
        /// Continue from the run directory's last.ckpt.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a trial list; writes scores.txt, report.txt and trials.txt.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Posterior to score: phi_tilde | phi_lin | rho | phi.
        #[arg(long)]
        representation: Option<String>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write `utt_id,v0,...` rows for every utterance in `eval_split`.
    ExportEmbeddings {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Posterior to export: phi_tilde | phi_lin | rho | phi.
        #[arg(long)]
        representation: Option<String>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the oracle, gradient and metric verification suites.
    Verify {
        /// Random recursion instances checked against the dense reference.
        #[arg(long, default_value_t = VerifyConfig::default().instances)]
        instances: usize,
        /// Random score sets checked against the brute-force sweep.
        #[arg(long, default_value_t = VerifyConfig::default().score_sets)]
        score_sets: usize,
        #[arg(long, default_value_t = VerifyConfig::default().seed)]
        seed: u64,
    },
}

/// Failure carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Applies the config file then the overrides on top of `base`.
fn resolve(mut base: RunConfig, file: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        base.apply_text(&text)?;
    }
    for o in &overrides.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("expected KEY=VALUE, got `{o}`")))?;
        base.set(k.trim(), v)?;
    }
    Ok(base)
}

fn echo(cfg: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", cfg.echo());
}

fn init_threads() -> CliResult {
    let n = match std::env::var("RECXI_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("RECXI_THREADS must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| runtime(format!("cannot start worker pool: {e}")))
}

/// Refuses to overwrite existing output unless `--force` was given.
fn ensure_writable(path: &Path, force: bool) -> CliResult {
    let occupied = if path.is_dir() {
        fs::read_dir(path)
            .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?
            .next()
            .is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn generate_data(cfg: RunConfig, out: &Path, force: bool) -> CliResult {
    cfg.validate()?;
    echo(&cfg);
    ensure_writable(out, force)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    corpus.write(out, force)?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
    Ok(())
}

fn train(mut cfg: RunConfig, data: &Path, run: &Path, force: bool, resume: bool) -> CliResult {
    let corpus = Corpus::load(data)?;
    // The corpus on disk defines the data; only the training seed survives
    // from the command line.
    let train_seed = cfg.train.seed;
    cfg.corpus = corpus.config.clone();
    cfg.train.seed = train_seed;
    if cfg.train.seed != cfg.corpus.seed {
        log::warn!(
            "training seed {} differs from the corpus seed {}; the echoed `seed` is the corpus one",
            cfg.train.seed,
            cfg.corpus.seed
        );
    }
    cfg.validate()?;
    echo(&cfg);
    let dir = RunDir::new(run);
    if !resume {
        ensure_writable(run, force)?;
        prepare_dir(run, force)?;
    }
    let out = train_run(&corpus, &cfg, Some(&dir), resume)?;
    match out.log.last() {
        Some(last) => println!(
            "trained {} epochs; best epoch {} (val_eer={}); checkpoints in {}",
            last.epoch,
            out.best_epoch,
            out.log
                .iter()
                .find(|r| r.epoch == out.best_epoch)
                .and_then(|r| r.val_eer)
                .map_or("n/a".into(), |v| format!("{v:.4}")),
            run.display()
        ),
        None => println!("nothing to do: {} already holds {} epochs", run.display(), cfg.train.epochs),
    }
    Ok(())
}

fn set_representation(cfg: &mut RunConfig, representation: Option<&str>) -> CliResult {
    if let Some(r) = representation {
        cfg.set("representation", r)?;
    }
    Ok(())
}

fn evaluate(cfg: RunConfig, ckpt: Checkpoint, data: &Path, out: &Path, force: bool) -> CliResult {
    cfg.validate()?;
    echo(&cfg);
    ensure_writable(out, force)?;
    let corpus = Corpus::load(data)?;
    let trials = match &cfg.trials {
        Some(path) => read_trials(Path::new(path))?,
        None => make_trials(
            &corpus,
            cfg.eval.split,
            cfg.eval.n_target_trials,
            cfg.eval.n_nontarget_trials,
            cfg.train.seed.wrapping_add(TRIAL_SEED_OFFSET),
        )?,
    };
    let (scored, result) = score_trials(
        &ckpt.params,
        &corpus,
        &trials,
        &cfg.eval,
        cfg.train.seed.wrapping_add(COHORT_SEED_OFFSET),
    )?;
    prepare_dir(out, force)?;
    write_trials(&out.join("trials.txt"), &trials)?;
    write_scores(&out.join("scores.txt"), &scored)?;
    write_report(&out.join("report.txt"), &result)?;
    println!("# {} on {} trials", cfg.eval.representation, trials.len());
    print!("{}", format_report(&result));
    Ok(())
}

fn export_embeddings(cfg: RunConfig, ckpt: Checkpoint, data: &Path, out: &Path, force: bool) -> CliResult {
    cfg.validate()?;
    echo(&cfg);
    ensure_writable(out, force)?;
    let corpus = Corpus::load(data)?;
    let utts: Vec<&Utterance> = corpus.split(cfg.eval.split).collect();
    if utts.is_empty() {
        return Err(runtime(format!("the {} split is empty", cfg.eval.split)));
    }
    let emb = embed_utterances(&ckpt.params, &utts, cfg.eval.representation, cfg.eval.batch_size)?;
    let width = emb[&utts[0].id].len();
    let mut text = String::from("utt_id");
    for i in 0..width {
        write!(text, ",v{i}").expect("writing to a String");
    }
    text.push('\n');
    for u in &utts {
        text.push_str(&u.id);
        for v in &emb[&u.id] {
            write!(text, ",{v}").expect("writing to a String");
        }
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "wrote {} {} vectors of dimension {width} to {}",
        utts.len(),
        cfg.eval.representation,
        out.display()
    );
    Ok(())
}

fn verify(cfg: VerifyConfig) -> CliResult {
    let checks = run_all(&cfg)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Failure {
            code: EXIT_VERIFY,
            message: format!("{failed} verification checks failed"),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    init_threads()?;
    let file = cli.config.as_deref();
    match cli.command {
        Command::GenerateData { out, force, overrides } => {
            generate_data(resolve(RunConfig::default(), file, &overrides)?, &out, force)
        }
        Command::Train {
            data,
            run,
            force,
            resume,
            overrides,
        } => train(resolve(RunConfig::default(), file, &overrides)?, &data, &run, force, resume),
        Command::Evaluate {
            data,
            checkpoint,
            out,
            representation,
            force,
            overrides,
        } => {
            // Commands reading a checkpoint start from the configuration stored with it.
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = resolve(ckpt.config.clone(), file, &overrides)?;
            set_representation(&mut cfg, representation.as_deref())?;
            evaluate(cfg, ckpt, &data, &out, force)
        }
        Command::ExportEmbeddings {
            data,
            checkpoint,
            out,
            representation,
            force,
            overrides,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = resolve(ckpt.config.clone(), file, &overrides)?;
            set_representation(&mut cfg, representation.as_deref())?;
            export_embeddings(cfg, ckpt, &data, &out, force)
        }
        Command::Verify {
            instances,
            score_sets,
            seed,
        } => verify(VerifyConfig {
            instances,
            score_sets,
            seed,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            // Printing can only fail on a closed stream; nothing useful remains then.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
