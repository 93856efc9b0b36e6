//! Per-time-step β-VAE on single points, the baseline whose traversals move
//! points rather than whole trajectories.

use crate::datasets::TrajectoryDataset;
use crate::error::{shape_err, Error, Result};
use crate::model::{LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::objective::{kl_diag_gaussian, recon_nll};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Fixed decoder standard deviation in data units.
    pub decoder_sigma: f64,
}

impl Default for PointwiseConfig {
    fn default() -> Self {
        Self { input_dim: 2, hidden: 32, latent: 2, decoder_sigma: 0.05 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct PointwiseVae {
    config: PointwiseConfig,
    params: ParamStore,
    enc: Layer,
    mu: Layer,
    log_sigma: Layer,
    dec: Layer,
    out: Layer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseLoss {
    pub total: f64,
    pub recon_nll: f64,
    pub kl: f64,
}

fn layer(params: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut RngStream) -> Layer {
    let w = params.add_uniform(format!("{name}.w"), &[out, inp], inp, rng);
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[out]));
    Layer { w, b }
}

impl PointwiseVae {
    pub fn new(config: PointwiseConfig, rng: &mut RngStream) -> Result<Self> {
        if !(config.decoder_sigma > 0.0) || config.input_dim == 0 || config.hidden == 0 || config.latent == 0 {
            return Err(Error::Config(format!("invalid pointwise configuration {config:?}")));
        }
        let PointwiseConfig { input_dim, hidden, latent, .. } = config;
        let mut params = ParamStore::new();
        let enc = layer(&mut params, "enc", hidden, input_dim, rng);
        let mu = layer(&mut params, "mu", latent, hidden, rng);
        let log_sigma = layer(&mut params, "log_sigma", latent, hidden, rng);
        let dec = layer(&mut params, "dec", hidden, latent, rng);
        let out = layer(&mut params, "out", input_dim, hidden, rng);
        Ok(Self { config, params, enc, mu, log_sigma, dec, out })
    }

    pub fn config(&self) -> PointwiseConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn apply(&self, tape: &mut Tape, l: Layer, x: Var) -> Result<Var> {
        let w = self.params.bind(tape, l.w)?;
        let b = self.params.bind(tape, l.b)?;
        tape.affine(x, w, b)
    }

    fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let h = self.apply(tape, self.enc, x)?;
        let h = tape.relu(h)?;
        let mu = self.apply(tape, self.mu, h)?;
        let ls = self.apply(tape, self.log_sigma, h)?;
        Ok((mu, tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?))
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.apply(tape, self.dec, z)?;
        let h = tape.relu(h)?;
        self.apply(tape, self.out, h)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [_, c] if *c == self.config.input_dim => Ok(()),
            s => Err(shape_err("pointwise_vae", format!("expected B × {}, got {s:?}", self.config.input_dim))),
        }
    }

    /// Reconstruction from the posterior mean, plus the posterior `(μ, log σ)`.
    pub fn forward_values(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.check(x)?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let (mu, ls) = self.encode(&mut tape, xv)?;
        let recon = self.decode(&mut tape, mu)?;
        Ok((tape.value(recon).clone(), tape.value(mu).clone(), tape.value(ls).clone()))
    }

    pub fn decode_values(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.input(z.clone())?;
        let out = self.decode(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    fn recon_term(&self, tape: &mut Tape, x: Var, recon: Var) -> Result<Var> {
        let inv = 1.0 / self.config.decoder_sigma;
        let xs = tape.scale(x, inv)?;
        let rs = tape.scale(recon, inv)?;
        recon_nll(tape, xs, rs)
    }

    /// `recon + β KL` for one batch and its parameter gradients.
    pub fn loss_and_grads(&self, x: &Tensor, beta: f64, rng: &mut RngStream) -> Result<(PointwiseLoss, Vec<Vec<f64>>)> {
        self.check(x)?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let (mu, ls) = self.encode(&mut tape, xv)?;
        let z = tape.reparameterize(mu, ls, rng)?;
        let recon = self.decode(&mut tape, z)?;
        let r = self.recon_term(&mut tape, xv, recon)?;
        let kl = kl_diag_gaussian(&mut tape, mu, ls)?;
        let weighted = tape.scale(kl, beta)?;
        let total = tape.add(r, weighted)?;
        let grads = tape.backward(total)?;
        let loss = PointwiseLoss {
            total: tape.value(total).item(),
            recon_nll: tape.value(r).item(),
            kl: tape.value(kl).item(),
        };
        Ok((loss, grads.params(&self.params.lens())))
    }

    /// Adam over shuffled minibatches of points; returns the per-step losses.
    pub fn train(
        &mut self,
        points: &Tensor,
        beta: f64,
        steps: usize,
        batch: usize,
        adam: &AdamConfig,
        rng: &mut RngStream,
    ) -> Result<Vec<PointwiseLoss>> {
        self.check(points)?;
        let n = points.shape()[0];
        let c = self.config.input_dim;
        let batch = batch.clamp(1, n);
        let mut state = AdamState::new(&self.params.lens());
        let mut order = rng.permutation(n);
        let mut cursor = 0;
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            if cursor + batch > n {
                order = rng.permutation(n);
                cursor = 0;
            }
            let rows = &order[cursor..cursor + batch];
            cursor += batch;
            let data = rows.iter().flat_map(|&i| points.data()[i * c..(i + 1) * c].iter().copied()).collect();
            let x = Tensor::new(vec![batch, c], data)?;
            let (loss, grads) = self.loss_and_grads(&x, beta, rng)?;
            adam_step(self.params.tensors_mut(), &grads, &mut state, adam)?;
            log.push(loss);
        }
        Ok(log)
    }

    /// Decodes `z` with dimension `dim` swept over `values` and all others at `base`.
    pub fn traverse(&self, base: &[f64], dim: usize, values: &[f64]) -> Result<Tensor> {
        let d = self.config.latent;
        if base.len() != d || dim >= d {
            return Err(shape_err("pointwise_traverse", format!("latent size {d}, base {}, dim {dim}", base.len())));
        }
        let z = Tensor::from_fn(&[values.len(), d], |i| if i % d == dim { values[i / d] } else { base[i % d] });
        self.decode_values(&z)
    }
}

/// Every time step of every trajectory as an `(N·T) × 2` point cloud.
pub fn dataset_points(dataset: &TrajectoryDataset) -> Result<Tensor> {
    let data = dataset
        .trajectories
        .iter()
        .flat_map(|t| t.points.iter().flat_map(|p| [p[0] as f64, p[1] as f64]))
        .collect();
    Tensor::new(vec![dataset.len() * dataset.seq_len, 2], data)
}
