use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedcl::config::RunConfig;
use fedcl::data::{generate_dataset, structural_similarity};
use fedcl::encoder::EncoderParams;
use fedcl::evaluation::{evaluate_encoder, run_ablation, EvalReport};
use fedcl::federation::{init_clients, run_round, write_round_csv, Mode, RoundReport};
use fedcl::parallel::Parallelism;
use fedcl::{FclError, Result};

/// Federated contrastive pre-training on synthetic volumetric data.
#[derive(Debug, Parser)]
#[command(name = "fedcl", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overrides `mode` for pretrain, or restricts evaluate to one arm.
    #[arg(long, global = true)]
    arm: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset as one dump per client.
    Generate,
    /// Pre-train one arm and probe the final encoder.
    Pretrain,
    /// Probe a saved checkpoint, or run the full ablation when none is given.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the summary of an existing eval.csv.
    Report {
        /// Defaults to `<out>/eval.csv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage_error() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let (Some(arm), Command::Pretrain) = (cli.arm, &cli.command) {
        cfg.mode = arm.as_str().to_string();
    }
    if cli.threads == 0 {
        return Err(FclError::Config {
            field: "--threads".into(),
            message: "must be ≥ 1".into(),
        });
    }
    cfg.validate()?;
    let par = Parallelism::with_threads(cli.threads)?;
    let out = PathBuf::from(&cfg.out_dir);

    match cli.command {
        Command::Generate => generate(&cfg, &out),
        Command::Pretrain => pretrain(&cfg, &out, &par),
        Command::Evaluate { checkpoint } => match checkpoint {
            Some(path) => evaluate_checkpoint(&cfg, &out, &path, cli.arm),
            None => ablation(&cfg, &out, &par, cli.arm),
        },
        Command::Report { input } => report(&input.unwrap_or_else(|| out.join("eval.csv"))),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_manifest(cfg: &RunConfig, out: &Path, command: &str) -> Result<()> {
    let mut w = create(&out.join("manifest.toml"))?;
    w.write_all(cfg.manifest(command).as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_eval(report: &EvalReport, out: &Path) -> Result<()> {
    let mut w = create(&out.join("eval.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let exp = cfg.experiment()?;
    let shards = generate_dataset(&exp.data_config())?;
    for shard in &shards {
        let path = out
            .join("data")
            .join(format!("client_{}.fcld", shard.client_id()));
        let mut w = create(&path)?;
        shard.write_dump(&mut w)?;
        w.flush()?;
    }
    write_manifest(cfg, out, "generate")?;
    let (within, across) = structural_similarity(&shards);
    println!(
        "wrote {} client dumps to {}",
        shards.len(),
        out.join("data").display()
    );
    println!("pixel correlation: within-partition {within:.4}, cross-partition {across:.4}");
    Ok(())
}

fn mean(rows: &[RoundReport], f: impl Fn(&RoundReport) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn pretrain(cfg: &RunConfig, out: &Path, par: &Parallelism) -> Result<()> {
    let exp = cfg.experiment()?;
    let shards = generate_dataset(&exp.data_config())?;
    let mut clients = init_clients(&exp, shards)?;
    let mut rounds = Vec::new();
    println!(
        "{:>5}  {:>10}  {:>11}  {:>9}",
        "round", "loss local", "loss remote", "alignment"
    );
    for r in 0..exp.round.rounds {
        let rows = run_round(&mut clients, &exp.round, r, par)?;
        println!(
            "{r:>5}  {:>10.4}  {:>11.4}  {:>9.4}",
            mean(&rows, |x| x.mean_loss_local),
            mean(&rows, |x| x.mean_loss_remote),
            mean(&rows, |x| x.alignment_metric),
        );
        rounds.extend(rows);
    }
    let encoder = clients[0].main_params().clone();
    let shards: Vec<_> = clients.iter().map(|c| c.shard().clone()).collect();
    let eval = evaluate_encoder(
        exp.round.mode.as_str(),
        &encoder,
        &shards,
        &exp.probe,
        exp.seed,
    )?;

    let mut w = create(&out.join("checkpoint.fclp"))?;
    encoder.write_checkpoint(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("rounds.csv"))?;
    write_round_csv(&mut w, &rounds)?;
    w.flush()?;
    let report = EvalReport { rows: eval };
    write_eval(&report, out)?;
    write_manifest(cfg, out, "pretrain")?;
    println!();
    print!("{}", report.render_table());
    Ok(())
}

fn evaluate_checkpoint(cfg: &RunConfig, out: &Path, path: &Path, arm: Option<Mode>) -> Result<()> {
    let exp = cfg.experiment()?;
    let encoder = EncoderParams::read_checkpoint(&mut BufReader::new(File::open(path)?))?;
    let want = exp.round.encoder_dims(exp.data.input_dim());
    let got = encoder.dims();
    if got != want {
        let (expected, actual) = if got.input != want.input {
            (want.input, got.input)
        } else if got.hidden != want.hidden {
            (want.hidden, got.hidden)
        } else {
            (want.embed, got.embed)
        };
        return Err(FclError::Dimension {
            context: "checkpoint dims vs config",
            expected,
            actual,
        });
    }
    let shards = generate_dataset(&exp.data_config())?;
    let label = arm.map_or("checkpoint", Mode::as_str);
    let report = EvalReport {
        rows: evaluate_encoder(label, &encoder, &shards, &exp.probe, exp.seed)?,
    };
    write_eval(&report, out)?;
    write_manifest(cfg, out, "evaluate")?;
    print!("{}", report.render_table());
    Ok(())
}

fn ablation(cfg: &RunConfig, out: &Path, par: &Parallelism, arm: Option<Mode>) -> Result<()> {
    let exp = cfg.experiment()?;
    let arms = match arm {
        Some(a) => vec![a],
        None => cfg.arms()?,
    };
    let report = run_ablation(&exp, &arms, &cfg.seeds(), par)?;
    write_eval(&report, out)?;
    write_manifest(cfg, out, "evaluate")?;
    print!("{}", report.render_table());
    Ok(())
}

fn report(input: &Path) -> Result<()> {
    let file = File::open(input).map_err(|e| FclError::Config {
        field: "--input".into(),
        message: format!("cannot read {}: {e}", input.display()),
    })?;
    let report = EvalReport::read_csv(BufReader::new(file))?;
    print!("{}", report.render_table());
    Ok(())
}
