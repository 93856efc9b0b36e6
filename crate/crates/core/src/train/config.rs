use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LadderConfig;
use crate::objective::CapacitySchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    /// Final capacity per ladder, lowest ladder first.
    pub c_final: Vec<f64>,
    /// Steps of linear capacity warm-up; `None` means half of all steps.
    pub warmup_steps: Option<u64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Dataset file, or a generator name such as `2d-reaching`.
    pub dataset: String,
    pub model: LadderConfig,
    pub use_ladder: bool,
    pub use_capacity: bool,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 4.0,
            c_final: vec![20.0, 1.0, 5.0],
            warmup_steps: None,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 3000,
            seed: 0,
            dataset: "2d-reaching".into(),
            model: LadderConfig::default(),
            use_ladder: true,
            use_capacity: true,
            checkpoint_every: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "beta",
    "c_final",
    "warmup_steps",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "dataset",
    "latent_dims",
    "channels",
    "block_depth",
    "kernel",
    "stride",
    "input_channels",
    "seq_len",
    "use_ladder",
    "use_capacity",
    "checkpoint_every",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value for {key}: '{value}'")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and ≥ 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.use_capacity && self.c_final.len() != self.model.ladders() {
            return Err(Error::Config(format!(
                "c_final has {} entries for {} ladders",
                self.c_final.len(),
                self.model.ladders()
            )));
        }
        if self.c_final.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("capacities must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Model actually trained: one ladder of the summed width without ladders.
    pub fn effective_model(&self) -> LadderConfig {
        if self.use_ladder {
            self.model.clone()
        } else {
            self.model.collapsed()
        }
    }

    /// Zero capacities without the capacity flag; the single-ladder model
    /// gets the summed capacity.
    pub fn capacity_schedule(&self, total_steps: u64) -> Result<CapacitySchedule> {
        let ladders = self.effective_model().ladders();
        if !self.use_capacity {
            return Ok(CapacitySchedule::zeros(ladders));
        }
        let c = if self.use_ladder { self.c_final.clone() } else { vec![self.c_final.iter().sum()] };
        CapacitySchedule::new(c, self.warmup_steps.unwrap_or(total_steps / 2))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "beta" => self.beta = num(key, v)?,
            "c_final" => self.c_final = list(key, v)?,
            "warmup_steps" => self.warmup_steps = if v == "auto" { None } else { Some(num(key, v)?) },
            "learning_rate" | "lr" => self.learning_rate = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "latent_dims" => self.model.latent_dims = list(key, v)?,
            "channels" => self.model.channels = num(key, v)?,
            "block_depth" => self.model.block_depth = num(key, v)?,
            "kernel" => self.model.kernel = num(key, v)?,
            "stride" => self.model.stride = num(key, v)?,
            "input_channels" => self.model.input_channels = num(key, v)?,
            "seq_len" => self.model.seq_len = num(key, v)?,
            "use_ladder" => self.use_ladder = num(key, v)?,
            "use_capacity" => self.use_capacity = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config file first, then `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_text(&std::fs::read_to_string(p)?)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let warmup = self.warmup_steps.map_or("auto".to_string(), |w| w.to_string());
        let lines: [(&str, String); 18] = [
            ("beta", self.beta.to_string()),
            ("c_final", join(&self.c_final)),
            ("warmup_steps", warmup),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.clone()),
            ("latent_dims", join(&m.latent_dims)),
            ("channels", m.channels.to_string()),
            ("block_depth", m.block_depth.to_string()),
            ("kernel", m.kernel.to_string()),
            ("stride", m.stride.to_string()),
            ("input_channels", m.input_channels.to_string()),
            ("seq_len", m.seq_len.to_string()),
            ("use_ladder", self.use_ladder.to_string()),
            ("use_capacity", self.use_capacity.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
