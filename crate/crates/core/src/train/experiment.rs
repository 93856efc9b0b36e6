use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{train, Checkpoint, LossLog};
use crate::datasets::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::metrics::{ladder_attribution, mig, LadderAttribution, LatentFactorTable, MigReport, DEFAULT_BINS};
use crate::model::LadderModel;
use crate::objective::{expected_recon_nll, recon_nll_values};
use crate::rng::RngStream;

const EVAL_SEED: u64 = 0x5eed;

/// Posterior samples per trajectory used for MIG tables by default.
pub const DEFAULT_EVAL_DRAWS: usize = 20;

/// MIG and reconstruction losses over the whole dataset, eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mig: MigReport,
    /// Expected reconstruction NLL under the posterior.
    pub recon_nll: f64,
    /// Reconstruction NLL of the posterior-mean decoding.
    pub recon_nll_at_mean: f64,
}

pub fn evaluate(model: &LadderModel, dataset: &TrajectoryDataset) -> Result<Evaluation> {
    evaluate_with(model, dataset, DEFAULT_EVAL_DRAWS)
}

/// `draws = 0` tabulates posterior means for MIG, otherwise that many seeded
/// posterior samples per trajectory. The expected reconstruction loss always
/// uses [`DEFAULT_EVAL_DRAWS`] samples.
pub fn evaluate_with(model: &LadderModel, dataset: &TrajectoryDataset, draws: usize) -> Result<Evaluation> {
    let table = if draws == 0 {
        LatentFactorTable::from_model(model, dataset, DEFAULT_BINS)?
    } else {
        LatentFactorTable::from_model_sampled(model, dataset, draws, DEFAULT_BINS, &mut RngStream::new(EVAL_SEED))?
    };
    let x = dataset.all_tensor()?;
    let at_mean = recon_nll_values(&x, &model.reconstruct(&x)?)?;
    let expected = expected_recon_nll(model, &x, DEFAULT_EVAL_DRAWS, &mut RngStream::new(EVAL_SEED + 1))?;
    Ok(Evaluation { mig: mig(&table)?, recon_nll: expected, recon_nll_at_mean: at_mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub evaluation: Evaluation,
    pub final_loss: Option<crate::objective::LossReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mig_mean: f64,
    pub mig_std: f64,
    pub rec_mean: f64,
    pub rec_std: f64,
    pub runs: Vec<RunResult>,
    /// Runs replaced because their MIG report raised the concentration flag.
    pub flagged: Vec<RunResult>,
    pub attribution: LadderAttribution,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and evaluates one seed.
pub fn run_seed(config: &TrainConfig, dataset: &TrajectoryDataset, seed: u64) -> Result<(Checkpoint, LossLog, RunResult)> {
    let cfg = TrainConfig { seed, ..config.clone() };
    let (ck, log) = train(cfg, dataset.clone())?;
    let evaluation = evaluate(&ck.model()?, dataset)?;
    let result = RunResult { seed, evaluation, final_loss: log.last().cloned() };
    Ok((ck, log, result))
}

/// `repeats` seeds starting at `config.seed`. A run whose MIG report is
/// concentration-flagged is kept in `flagged` and retried with a fresh seed,
/// at most `max_reruns` times per repeat.
pub fn run_experiment(
    config: &TrainConfig,
    dataset: &TrajectoryDataset,
    repeats: usize,
    max_reruns: usize,
    mut progress: impl FnMut(&RunResult),
) -> Result<ExperimentSummary> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut runs = Vec::with_capacity(repeats);
    let mut flagged = Vec::new();
    for i in 0..repeats {
        let mut attempt = 0;
        loop {
            let seed = config.seed + (i + attempt * repeats) as u64;
            let (_, _, result) = run_seed(config, dataset, seed)?;
            progress(&result);
            if result.evaluation.mig.concentration_flag && attempt < max_reruns {
                flagged.push(result);
                attempt += 1;
                continue;
            }
            runs.push(result);
            break;
        }
    }
    let migs: Vec<f64> = runs.iter().map(|r| r.evaluation.mig.mig).collect();
    let recs: Vec<f64> = runs.iter().map(|r| r.evaluation.recon_nll).collect();
    let (mig_mean, mig_std) = mean_std(&migs);
    let (rec_mean, rec_std) = mean_std(&recs);
    let model_cfg = config.effective_model();
    let ladder_of = model_cfg.latent_dims.iter().enumerate().flat_map(|(l, &d)| std::iter::repeat_n(l, d)).collect();
    let names = dataset.factors.iter().map(|f| f.name.clone()).collect();
    let schema = LatentFactorTable::new(vec![], ladder_of, vec![], names, DEFAULT_BINS)?;
    let reports: Vec<MigReport> = runs.iter().map(|r| r.evaluation.mig.clone()).collect();
    let attribution = ladder_attribution(&schema, &reports);
    Ok(ExperimentSummary { mig_mean, mig_std, rec_mean, rec_std, runs, flagged, attribution })
}
