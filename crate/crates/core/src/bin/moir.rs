use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use moir::config::RunConfig;
use moir::experiments::{ablate_kprime, evaluate, robustness_eval, train, Model};
use moir::informativeness::{channel_scores, token_effective_rank};
use moir::io::{csv, from_json, read_bytes, read_dataset, read_tensor, sig6, to_json, write_bytes, write_dataset};
use moir::synth::{generate, SyntheticData};
use moir::{Modality, MoirError, Result};

#[derive(Parser)]
#[command(name = "moir", version, about = "Cross-modal information routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as tensor dumps.
    Gen(RunArgs),
    /// Train a model and write it with its loss curve.
    Train(RunArgs),
    /// Evaluate a saved model on the test split.
    Eval(ModelArgs),
    /// Unchanged-prediction rates when modality A is replaced by noise.
    Robust(ModelArgs),
    /// Sweep the routed fraction k'.
    Ablate(RunArgs),
    /// Channel scores and effective rank of one token tensor.
    Score(ScoreArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    moir: Option<Switch>,
    #[arg(long)]
    kprime: Option<f64>,
    /// Read the dataset written by `gen` instead of regenerating it.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOIR_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let line = serde_json::json!({ "error": kind, "code": code, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &MoirError) -> (&'static str, u8) {
    match e {
        MoirError::InvalidInput(_) | MoirError::InvalidConfig(_) | MoirError::Format(_) => ("schema", 2),
        MoirError::NumericalFailure(_) | MoirError::DegenerateSpectrum | MoirError::TrainingDiverged { .. } => {
            ("numerical", 3)
        }
        MoirError::Io { .. } => ("io", 4),
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    data_dir: Option<PathBuf>,
}

impl Run {
    fn load(args: &RunArgs) -> Result<Self> {
        let mut cfg = RunConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.set_seed(seed);
        }
        if let Some(m) = args.moir {
            cfg.train.moir_enabled = matches!(m, Switch::On);
        }
        if let Some(k) = args.kprime {
            cfg.train.k_prime = k;
        }
        cfg.validate()?;
        let out = args
            .out
            .clone()
            .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { cfg, out, data_dir: args.data.clone() })
    }

    fn data(&self) -> Result<SyntheticData> {
        match &self.data_dir {
            Some(dir) => read_dataset(dir),
            None => generate(&self.cfg.task_spec()),
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        write_bytes(&path, text.as_bytes())?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| MoirError::Format(e.to_string()))?;
    from_json(text)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => {
            let run = Run::load(&args)?;
            let data = generate(&run.cfg.task_spec())?;
            for f in write_dataset(&run.out, &data)? {
                log::info!("wrote {}", run.out.join(f).display());
            }
            run.write("config.json", &to_json(&run.cfg)?)
        }
        Command::Train(args) => {
            let run = Run::load(&args)?;
            let data = run.data()?;
            let outcome = train(&run.cfg.train, &run.cfg.decoder, &data.train, run.cfg.task.classes)?;
            let rows: Vec<LossRow> = outcome
                .loss_history
                .iter()
                .enumerate()
                .map(|(epoch, &loss)| LossRow { epoch, loss })
                .collect();
            let table: Vec<Vec<String>> = rows.iter().map(|r| vec![r.epoch.to_string(), sig6(r.loss)]).collect();
            run.write("loss.csv", &csv(&["epoch", "loss"], &table))?;
            run.write("loss.json", &to_json(&rows)?)?;
            run.write("model.json", &to_json(&outcome.model)?)
        }
        Command::Eval(args) => {
            let run = Run::load(&args.run)?;
            let model = load_model(&args.model)?;
            let report = evaluate(&model, &run.data()?.test)?;
            let row = vec![
                sig6(report.accuracy),
                sig6(report.rank_delta_a),
                sig6(report.rank_delta_b),
                sig6(report.mdi),
                sig6(report.aei),
            ];
            run.write("metrics.csv", &csv(&["acc", "rank_delta_A", "rank_delta_B", "mdi", "aei"], &[row]))?;
            run.write("metrics.json", &to_json(&report)?)
        }
        Command::Robust(args) => {
            let run = Run::load(&args.run)?;
            let model = load_model(&args.model)?;
            let report = robustness_eval(&model, &run.data()?.test, run.cfg.robustness_seed())?;
            let row = vec![sig6(report.all), sig6(report.dependent), sig6(report.irrelevant)];
            run.write("robustness.csv", &csv(&["all", "dependent", "irrelevant"], &[row]))?;
            run.write("robustness.json", &to_json(&report)?)
        }
        Command::Ablate(args) => {
            let run = Run::load(&args)?;
            let data = run.data()?;
            let values = match args.kprime {
                Some(k) => vec![k],
                None => run.cfg.ablation_kprimes.clone(),
            };
            let rows = ablate_kprime(
                &run.cfg.train,
                &run.cfg.decoder,
                &data.train,
                &data.test,
                run.cfg.task.classes,
                &values,
            )?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        sig6(r.k_prime),
                        sig6(r.report.accuracy),
                        sig6(r.report.rank_delta_a),
                        sig6(r.report.rank_delta_b),
                        sig6(r.report.mdi),
                        sig6(r.report.aei),
                    ]
                })
                .collect();
            run.write(
                "ablation.csv",
                &csv(&["kprime", "acc", "rank_delta_A", "rank_delta_B", "mdi", "aei"], &table),
            )?;
            run.write("ablation.json", &to_json(&rows)?)
        }
        Command::Score(args) => {
            let tokens = read_tensor(&args.tensor)?.to_tokens(Modality::A)?;
            let scores = channel_scores(&tokens)?;
            let erank = token_effective_rank(&tokens)?;
            let out = args.out.unwrap_or_else(|| PathBuf::from("out"));
            let table: Vec<Vec<String>> = scores
                .scores
                .iter()
                .enumerate()
                .map(|(d, &s)| vec![d.to_string(), sig6(s)])
                .collect();
            write_bytes(&out.join("scores.csv"), csv(&["channel", "score"], &table).as_bytes())?;
            let json = serde_json::json!({ "effective_rank": erank, "scores": scores.scores });
            write_bytes(&out.join("scores.json"), to_json(&json)?.as_bytes())?;
            println!("effective_rank={}", sig6(erank));
            Ok(())
        }
    }
}
