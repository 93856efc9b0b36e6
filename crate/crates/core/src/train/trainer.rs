use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::datasets::{generate, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::model::LadderModel;
use crate::objective::{favae_loss, kl_diag_gaussian, recon_nll, CapacitySchedule, LossReport};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::{RngState, RngStream};
use crate::tape::{BatchNormStats, Mode, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_TAG: u64 = 1;
const NOISE_TAG: u64 = 2;
const SHUFFLE_TAG: u64 = 3;

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamStore,
    pub bn: Vec<BatchNormStats>,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: ck.version, expected: CHECKPOINT_VERSION });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn model(&self) -> Result<LadderModel> {
        LadderModel::from_parts(self.config.effective_model(), self.params.clone(), self.bn.clone())
    }
}

/// Loads `spec` as a dataset file if it exists, otherwise generates it by name.
pub fn resolve_dataset(spec: &str, seq_len: usize) -> Result<TrajectoryDataset> {
    let path = Path::new(spec);
    if path.is_file() {
        TrajectoryDataset::load(path)
    } else {
        generate(spec, seq_len)
    }
}

pub struct Trainer {
    config: TrainConfig,
    dataset: TrajectoryDataset,
    model: LadderModel,
    adam: AdamState,
    adam_config: AdamConfig,
    schedule: CapacitySchedule,
    noise: RngStream,
    step: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: TrajectoryDataset) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.effective_model();
        let mut root = RngStream::new(config.seed);
        let model = LadderModel::new(model_cfg, &mut root.fork(INIT_TAG))?;
        let noise = root.fork(NOISE_TAG);
        let adam = AdamState::new(&model.params().lens());
        Self::assemble(config, dataset, model, adam, noise, 0)
    }

    pub fn resume(checkpoint: Checkpoint, dataset: TrajectoryDataset) -> Result<Self> {
        let model = checkpoint.model()?;
        let noise = RngStream::from_state(checkpoint.rng);
        Self::assemble(checkpoint.config, dataset, model, checkpoint.adam, noise, checkpoint.step)
    }

    fn assemble(
        config: TrainConfig,
        dataset: TrajectoryDataset,
        model: LadderModel,
        adam: AdamState,
        noise: RngStream,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.seq_len != config.model.seq_len {
            return Err(Error::Config(format!(
                "dataset has T = {} but the model expects T = {}",
                dataset.seq_len, config.model.seq_len
            )));
        }
        if config.model.input_channels != 2 {
            return Err(Error::Config("trajectory datasets have 2 input channels".into()));
        }
        if dataset.len() < 2 {
            return Err(Error::BatchTooSmall(dataset.len()));
        }
        let mut t = Self {
            adam_config: AdamConfig { lr: config.learning_rate, ..AdamConfig::default() },
            schedule: CapacitySchedule::zeros(1),
            config,
            dataset,
            model,
            adam,
            noise,
            step,
            order: None,
        };
        t.schedule = t.config.capacity_schedule(t.total_steps())?;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &LadderModel {
        &self.model
    }

    pub fn dataset(&self) -> &TrajectoryDataset {
        &self.dataset
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn batch_size(&self) -> usize {
        self.config.batch_size.min(self.dataset.len())
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.dataset.len().div_ceil(self.batch_size()) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs * self.batches_per_epoch()
    }

    pub fn schedule(&self) -> &CapacitySchedule {
        &self.schedule
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let epoch = self.step / per;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = RngStream::new(self.config.seed).fork(SHUFFLE_TAG).fork(epoch);
            self.order = Some((epoch, rng.permutation(self.dataset.len())));
        }
        let order = &self.order.as_ref().unwrap().1;
        let b = self.batch_size();
        let start = (self.step % per) as usize * b;
        order[start..(start + b).min(order.len())].to_vec()
    }

    #[cfg(test)]
    pub(crate) fn batch_indices_for_test(&mut self) -> Vec<usize> {
        self.batch_indices()
    }

    /// One optimizer step. On error the trainer keeps its last good state.
    pub fn step(&mut self) -> Result<LossReport> {
        let idx = self.batch_indices();
        let x = self.dataset.to_tensor(&idx)?;
        let capacity = self.schedule.at(self.step);
        let mut noise = self.noise.clone();
        let mut pass = self.model.pass(Mode::Train);
        let xv = pass.tape.input(x)?;
        let out = pass.forward(xv, &mut noise)?;
        let recon = recon_nll(&mut pass.tape, xv, out.recon)?;
        let kl = out
            .encoded
            .mu
            .iter()
            .zip(&out.encoded.log_sigma)
            .map(|(&m, &s)| kl_diag_gaussian(&mut pass.tape, m, s))
            .collect::<Result<Vec<Var>>>()?;
        let (total, report) = favae_loss(&mut pass.tape, recon, &kl, self.config.beta, &capacity)?;
        let grads = pass.tape.backward(total)?.params(&self.model.params().lens());
        let moments = pass.into_moments();
        adam_step(self.model.params_mut().tensors_mut(), &grads, &mut self.adam, &self.adam_config)?;
        self.model.absorb(moments);
        self.noise = noise;
        self.step += 1;
        Ok(report)
    }

    /// Runs until the configured epoch budget is spent, calling `observe`
    /// after every step.
    pub fn run(&mut self, mut observe: impl FnMut(&Self, &LossReport) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let report = self.step()?;
            observe(self, &report)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            params: self.model.params().clone(),
            bn: self.model.bn_stats().to_vec(),
            adam: self.adam.clone(),
            rng: self.noise.state(),
        }
    }
}

/// Step-indexed loss log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub entries: Vec<(u64, LossReport)>,
}

impl LossLog {
    pub fn push(&mut self, step: u64, report: LossReport) {
        self.entries.push((step, report));
    }

    pub fn last(&self) -> Option<&LossReport> {
        self.entries.last().map(|(_, r)| r)
    }

    /// Columns `step, recon, kl_1.., c_1.., total`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let ladders = self.entries.first().map_or(0, |(_, r)| r.kl_per_ladder.len());
        let mut header = vec!["step".to_string(), "recon".to_string()];
        header.extend((1..=ladders).map(|l| format!("kl_{l}")));
        header.extend((1..=ladders).map(|l| format!("c_{l}")));
        header.push("total".into());
        writeln!(w, "{}", header.join(","))?;
        for (step, r) in &self.entries {
            let mut row = vec![step.to_string(), r.recon_nll.to_string()];
            row.extend(r.kl_per_ladder.iter().map(f64::to_string));
            row.extend(r.capacity_per_ladder.iter().map(f64::to_string));
            row.push(r.total.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Trains from scratch to the end of the configured budget.
pub fn train(config: TrainConfig, dataset: TrajectoryDataset) -> Result<(Checkpoint, LossLog)> {
    let mut trainer = Trainer::new(config, dataset)?;
    let mut log = LossLog::default();
    trainer.run(|t, r| {
        log.push(t.step_count(), r.clone());
        Ok(())
    })?;
    Ok((trainer.checkpoint(), log))
}
