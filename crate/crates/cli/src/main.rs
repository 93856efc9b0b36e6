use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use favae::datasets::{generate, TrajectoryDataset};
use favae::metrics::{
    default_traversal_values, latent_traversal, traversal_reference, write_traversal_csv, write_traversal_svg,
};
use favae::objective::kl_decomposition_estimate;
use favae::train::{
    evaluate_with, resolve_dataset, run_experiment, Checkpoint, LossLog, TrainConfig, Trainer,
    DEFAULT_EVAL_DRAWS,
};
use favae::RngStream;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] favae::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Parser, Debug)]
#[command(name = "favae", version, about = "Train and evaluate ladder time-convolutional VAEs on trajectory data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trajectory dataset.
    GenData {
        /// 2d-reaching or 2d-wavy.
        name: String,
        #[arg(long, default_value_t = 100)]
        length: usize,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write the trajectories as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute the MIG report of a checkpoint.
    EvalMig {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the dataset named in the checkpoint config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Posterior samples per trajectory; 0 uses posterior means.
        #[arg(long, default_value_t = DEFAULT_EVAL_DRAWS)]
        draws: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Decode a sweep over one latent dimension.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ladder index, 0 is the lowest.
        #[arg(long)]
        ladder: usize,
        #[arg(long)]
        dim: usize,
        /// Comma-separated latent values; defaults to 8 points in [-3, 3].
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Reference trajectory index; defaults to the median-length one.
        #[arg(long)]
        reference: Option<usize>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Monte-Carlo decomposition of the KL term.
    DecomposeKl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Trajectories drawn with replacement.
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Repeat training over seeds and summarize MIG and reconstruction loss.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Fresh-seed retries for a concentration-flagged run.
        #[arg(long, default_value_t = 3)]
        max_reruns: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, format!("{text}\n")).map_err(io_at(p)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_at(path))?))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn dataset_for(ck: &Checkpoint, path: Option<&Path>) -> Result<TrajectoryDataset> {
    match path {
        Some(p) if !p.is_file() => Err(CliError::Usage(format!("dataset {} does not exist", p.display()))),
        Some(p) => Ok(TrajectoryDataset::load(p)?),
        None => Ok(resolve_dataset(&ck.config.dataset, ck.config.model.seq_len)?),
    }
}

fn train(config: Option<&Path>, overrides: &[String], out: &Path, resume: Option<&Path>) -> Result<()> {
    fs::create_dir_all(out.join("checkpoints")).map_err(io_at(out))?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let data = resolve_dataset(&ck.config.dataset, ck.config.model.seq_len)?;
            Trainer::resume(ck, data)?
        }
        None => {
            let cfg = TrainConfig::load(config, overrides)?;
            let data = resolve_dataset(&cfg.dataset, cfg.model.seq_len)?;
            Trainer::new(cfg, data)?
        }
    };
    fs::write(out.join("config.txt"), trainer.config().to_text()).map_err(io_at(out))?;
    let every = trainer.config().checkpoint_every;
    let total = trainer.total_steps();
    let mut log = LossLog::default();
    let outcome = trainer.run(|t, r| {
        log.push(t.step_count(), r.clone());
        let step = t.step_count();
        if every > 0 && step % every == 0 {
            t.checkpoint().save(out.join("checkpoints").join(format!("step_{step:08}.json")))?;
        }
        if step % 500 == 0 || step == total {
            eprintln!("step {step}/{total} recon {:.5} kl {:?}", r.recon_nll, r.kl_per_ladder);
        }
        Ok(())
    });
    let mut csv = create(&out.join("loss.csv"))?;
    log.write_csv(&mut csv)?;
    csv.flush().map_err(io_at(out))?;
    if let Err(e) = outcome {
        trainer.checkpoint().save(out.join("last_good.json"))?;
        return Err(e.into());
    }
    let ck = trainer.checkpoint();
    ck.save(out.join("final.json"))?;
    let eval = evaluate_with(&ck.model()?, trainer.dataset(), DEFAULT_EVAL_DRAWS)?;
    fs::write(out.join("mig.json"), eval.mig.to_json()?).map_err(io_at(out))?;
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({
        "steps": ck.step,
        "mig": eval.mig.mig,
        "recon_nll": eval.recon_nll,
    }))?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { name, length, out, csv } => {
            let data = generate(&name, length)?;
            data.save(&out)?;
            if let Some(p) = csv {
                let mut w = create(&p)?;
                data.write_csv(&mut w)?;
                w.flush().map_err(io_at(&p))?;
            }
            println!("wrote {} trajectories of length {} to {}", data.len(), data.seq_len, out.display());
            Ok(())
        }
        Command::Train { config, overrides, out, resume } => {
            train(config.as_deref(), &overrides, &out, resume.as_deref())
        }
        Command::EvalMig { checkpoint, dataset, draws, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let data = dataset_for(&ck, dataset.as_deref())?;
            let eval = evaluate_with(&ck.model()?, &data, draws)?;
            for w in &eval.mig.warnings {
                eprintln!("warning: {w}");
            }
            write_output(out.as_deref(), &eval.mig.to_json()?)
        }
        Command::Traverse { checkpoint, ladder, dim, values, dataset, reference, csv, svg } => {
            let ck = load_checkpoint(&checkpoint)?;
            let data = dataset_for(&ck, dataset.as_deref())?;
            let index = reference.unwrap_or_else(|| traversal_reference(&data));
            if index >= data.len() {
                return Err(CliError::Usage(format!("reference {index} out of range for {} trajectories", data.len())));
            }
            let values = values.unwrap_or_else(default_traversal_values);
            let decoded = latent_traversal(&ck.model()?, &data.to_tensor(&[index])?, ladder, dim, &values)?;
            let mut w = create(&csv)?;
            write_traversal_csv(&mut w, &decoded, &values)?;
            w.flush().map_err(io_at(&csv))?;
            if let Some(p) = svg {
                let mut w = create(&p)?;
                write_traversal_svg(&mut w, &decoded, &values)?;
                w.flush().map_err(io_at(&p))?;
            }
            Ok(())
        }
        Command::DecomposeKl { checkpoint, dataset, samples, seed, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let data = dataset_for(&ck, dataset.as_deref())?;
            let mut rng = RngStream::new(seed);
            let x = data.resample(samples, &mut rng)?;
            let d = kl_decomposition_estimate(&ck.model()?, &x, &mut rng)?;
            write_output(out.as_deref(), &serde_json::to_string_pretty(&d)?)
        }
        Command::Experiment { config, overrides, repeats, max_reruns, out } => {
            let cfg = TrainConfig::load(config.as_deref(), &overrides)?;
            let data = resolve_dataset(&cfg.dataset, cfg.model.seq_len)?;
            let summary = run_experiment(&cfg, &data, repeats, max_reruns, |r| {
                eprintln!(
                    "seed {}: mig {:.4} recon {:.5}{}",
                    r.seed,
                    r.evaluation.mig.mig,
                    r.evaluation.recon_nll,
                    if r.evaluation.mig.concentration_flag { " (concentrated)" } else { "" }
                );
            })?;
            eprint!("{}", summary.attribution);
            write_output(out.as_deref(), &serde_json::to_string_pretty(&summary)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
