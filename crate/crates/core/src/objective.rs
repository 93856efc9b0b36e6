//! Loss terms: fixed-variance Gaussian reconstruction NLL, diagonal-Gaussian
//! KL against `N(0, I)`, the per-ladder capacity schedule, the capacity
//! penalized objective and a Monte-Carlo decomposition of the KL term.
//!
//! Reductions: sums over time, features and latent dims; mean over batch.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::LadderModel;
use crate::rng::RngStream;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `0.5 · Σ (x − mean)² / B` on the tape (decoder σ = 1, constants dropped).
pub fn recon_nll(tape: &mut Tape, x: Var, mean: Var) -> Result<Var> {
    let batch = tape.shape(x)[0] as f64;
    let d = tape.sub(x, mean)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 0.5 / batch)
}

pub fn recon_nll_values(x: &Tensor, mean: &Tensor) -> Result<f64> {
    if x.shape() != mean.shape() {
        return Err(shape_err("recon_nll", format!("{:?} vs {:?}", x.shape(), mean.shape())));
    }
    let batch = x.shape()[0] as f64;
    Ok(0.5 * x.data().iter().zip(mean.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / batch)
}

/// Batch-mean `KL(N(μ, σ²) ‖ N(0, I))` with `σ = exp(log_σ)`, for `B × d` inputs:
/// `0.5 Σ_j (μ_j² + σ_j² − 2 log σ_j − 1)`.
pub fn kl_diag_gaussian(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(log_sigma) {
        return Err(shape_err("kl_diag_gaussian", format!("{:?} vs {:?}", tape.shape(mu), tape.shape(log_sigma))));
    }
    let batch = tape.shape(mu)[0] as f64;
    let n = tape.value(mu).len() as f64;
    let mu2 = tape.mul(mu, mu)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let a = tape.add(mu2, var)?;
    let a = tape.sub(a, two_ls)?;
    let s = tape.sum(a)?;
    tape.scale_shift(s, 0.5 / batch, -0.5 * n / batch)
}

/// Per-sample KL for one posterior.
pub fn kl_diag_gaussian_values(mu: &[f64], log_sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_sigma)
        .map(|(m, ls)| m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0)
        .sum::<f64>()
}

/// Linear warm-up of the per-ladder capacity targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySchedule {
    pub c_final: Vec<f64>,
    pub warmup_steps: u64,
}

impl CapacitySchedule {
    pub fn new(c_final: Vec<f64>, warmup_steps: u64) -> Result<Self> {
        if c_final.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument(format!("capacities must be finite and ≥ 0, got {c_final:?}")));
        }
        Ok(Self { c_final, warmup_steps })
    }

    pub fn zeros(ladders: usize) -> Self {
        Self { c_final: vec![0.0; ladders], warmup_steps: 0 }
    }

    /// `C_l(step) = C_final[l] · min(1, step / warmup)`; zero warm-up means
    /// the final values apply from step 0.
    pub fn at(&self, step: u64) -> Vec<f64> {
        let frac = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        self.c_final.iter().map(|c| c * frac).collect()
    }
}

pub fn capacity_at(schedule: &CapacitySchedule, step: u64) -> Vec<f64> {
    schedule.at(step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_nll: f64,
    pub kl_per_ladder: Vec<f64>,
    pub capacity_per_ladder: Vec<f64>,
    pub total: f64,
    pub beta: f64,
}

impl LossReport {
    /// `recon + β Σ_l |KL_l − C_l|`.
    pub fn from_terms(recon_nll: f64, kl: Vec<f64>, capacity: Vec<f64>, beta: f64) -> Result<Self> {
        check_objective_args(kl.len(), &capacity, beta)?;
        let penalty: f64 = kl.iter().zip(&capacity).map(|(k, c)| (k - c).abs()).sum();
        Ok(Self { recon_nll, total: recon_nll + beta * penalty, kl_per_ladder: kl, capacity_per_ladder: capacity, beta })
    }
}

fn check_objective_args(ladders: usize, capacity: &[f64], beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("β must be finite and ≥ 0, got {beta}")));
    }
    if capacity.len() != ladders {
        return Err(Error::InvalidArgument(format!(
            "{} capacity targets for {ladders} ladders",
            capacity.len()
        )));
    }
    Ok(())
}

/// Builds `recon + β Σ_l |KL_l − C_l|` on the tape. Returns the scalar loss
/// and the numeric report.
pub fn favae_loss(tape: &mut Tape, recon: Var, kl: &[Var], beta: f64, capacity: &[f64]) -> Result<(Var, LossReport)> {
    check_objective_args(kl.len(), capacity, beta)?;
    let mut total = recon;
    for (&k, &c) in kl.iter().zip(capacity) {
        let d = tape.scale_shift(k, 1.0, -c)?;
        let a = tape.abs(d)?;
        let w = tape.scale(a, beta)?;
        total = tape.add(total, w)?;
    }
    let report = LossReport {
        recon_nll: tape.value(recon).item(),
        kl_per_ladder: kl.iter().map(|&k| tape.value(k).item()).collect(),
        capacity_per_ladder: capacity.to_vec(),
        total: tape.value(total).item(),
        beta,
    };
    Ok((total, report))
}

/// Monte-Carlo split of the mean KL into index-code MI, total correlation
/// and dimension-wise KL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlDecomposition {
    pub index_code_mi: f64,
    pub total_correlation: f64,
    pub dimwise_kl: f64,
    /// Closed-form batch-mean KL, for comparison with the sum of the three terms.
    pub mean_kl: f64,
    pub samples: usize,
}

impl KlDecomposition {
    pub fn sum(&self) -> f64 {
        self.index_code_mi + self.total_correlation + self.dimwise_kl
    }
}

fn log_normal(z: f64, mu: f64, log_sigma: f64) -> f64 {
    let u = (z - mu) * (-log_sigma).exp();
    -0.5 * u * u - log_sigma - 0.5 * LN_2PI
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Decomposition with `q(z)` approximated by the uniform mixture of the `M`
/// given posteriors and one reparameterized draw per posterior. Rows of `mu`
/// and `log_sigma` are posteriors; columns are latent dimensions.
pub fn kl_decomposition(mu: &[Vec<f64>], log_sigma: &[Vec<f64>], rng: &mut RngStream) -> Result<KlDecomposition> {
    let m = mu.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("decomposition needs at least 2 posteriors, got {m}")));
    }
    let d = mu[0].len();
    if log_sigma.len() != m || mu.iter().chain(log_sigma).any(|r| r.len() != d) || d == 0 {
        return Err(shape_err("kl_decomposition", "ragged posterior tables"));
    }
    let z: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..d).map(|j| mu[i][j] + log_sigma[i][j].exp() * rng.normal()).collect())
        .collect();
    let log_m = (m as f64).ln();

    let (mut mi, mut tc, mut dw) = (0.0, 0.0, 0.0);
    let mut per_dim = vec![0.0; m];
    let mut joint = vec![0.0; m];
    let mut marg = vec![0.0; d];
    for i in 0..m {
        joint.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..d {
            for (k, slot) in per_dim.iter_mut().enumerate() {
                *slot = log_normal(z[i][j], mu[k][j], log_sigma[k][j]);
                joint[k] += *slot;
            }
            marg[j] = log_sum_exp(&per_dim) - log_m;
        }
        let log_qz_x: f64 = (0..d).map(|j| log_normal(z[i][j], mu[i][j], log_sigma[i][j])).sum();
        let log_qz = log_sum_exp(&joint) - log_m;
        let log_prod: f64 = marg.iter().sum();
        let log_pz: f64 = z[i].iter().map(|&v| log_normal(v, 0.0, 0.0)).sum();
        mi += log_qz_x - log_qz;
        tc += log_qz - log_prod;
        dw += log_prod - log_pz;
    }
    let mf = m as f64;
    let out = KlDecomposition {
        index_code_mi: mi / mf,
        total_correlation: tc / mf,
        dimwise_kl: dw / mf,
        mean_kl: (0..m).map(|i| kl_diag_gaussian_values(&mu[i], &log_sigma[i])).sum::<f64>() / mf,
        samples: m,
    };
    if ![out.index_code_mi, out.total_correlation, out.dimwise_kl].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("kl_decomposition".into()));
    }
    Ok(out)
}

/// Monte-Carlo estimate of `E_q[recon_nll]` in eval mode: `draws` reparameterized
/// decodings of one encoding.
pub fn expected_recon_nll(model: &LadderModel, x: &Tensor, draws: usize, rng: &mut RngStream) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidArgument("at least one draw is required".into()));
    }
    let mut pass = model.pass(Mode::Eval);
    let xv = pass.tape.input(x.clone())?;
    let enc = pass.encode(xv)?;
    let mut total = 0.0;
    for _ in 0..draws {
        let z = enc
            .mu
            .iter()
            .zip(&enc.log_sigma)
            .map(|(&m, &s)| pass.tape.reparameterize(m, s, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = pass.decode(&z)?;
        total += recon_nll_values(x, pass.tape.value(out))?;
    }
    Ok(total / draws as f64)
}

/// Posterior parameters of all ladders concatenated per row, eval mode.
pub fn posterior_table(model: &LadderModel, x: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (mu, ls) = model.posterior(x)?;
    let batch = x.shape()[0];
    let rows = |parts: &[Tensor]| -> Vec<Vec<f64>> {
        (0..batch)
            .map(|b| {
                parts
                    .iter()
                    .flat_map(|t| {
                        let w = t.shape()[1];
                        t.data()[b * w..(b + 1) * w].iter().copied()
                    })
                    .collect()
            })
            .collect()
    };
    Ok((rows(&mu), rows(&ls)))
}

/// [`kl_decomposition`] of the model's joint (all-ladder) posterior over `x`.
pub fn kl_decomposition_estimate(model: &LadderModel, x: &Tensor, rng: &mut RngStream) -> Result<KlDecomposition> {
    let (mu, ls) = posterior_table(model, x)?;
    kl_decomposition(&mu, &ls, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn recon_examples() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        assert_eq!(recon_nll_values(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_nll_values(&t(&[1, 1, 1], &[3.0]), &t(&[1, 1, 1], &[1.0])).unwrap(), 2.0);
        assert!(recon_nll_values(&x, &t(&[1, 3, 1], &[0.0; 3])).is_err());
    }

    #[test]
    fn recon_matches_naive_loop() {
        let mut rng = RngStream::new(4);
        let (b, c, tl) = (3, 2, 5);
        let x = Tensor::from_fn(&[b, c, tl], |_| rng.normal());
        let m = Tensor::from_fn(&[b, c, tl], |_| rng.normal());
        let mut naive = 0.0;
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..tl {
                    let i = (bi * c + ci) * tl + ti;
                    naive += 0.5 * (x.data()[i] - m.data()[i]).powi(2);
                }
            }
        }
        naive /= b as f64;
        let mut tape = Tape::new();
        let (vx, vm) = (tape.input(x.clone()).unwrap(), tape.input(m.clone()).unwrap());
        let r = recon_nll(&mut tape, vx, vm).unwrap();
        assert!((tape.value(r).item() - naive).abs() < 1e-12);
        assert!((recon_nll_values(&x, &m).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian_values(&[0.0], &[0.0]), 0.0);
        assert_eq!(kl_diag_gaussian_values(&[1.0], &[0.0]), 0.5);
        let mut tape = Tape::new();
        let mu = tape.input(t(&[2, 1], &[1.0, 0.0])).unwrap();
        let ls = tape.input(t(&[2, 1], &[0.0, 0.0])).unwrap();
        let k = kl_diag_gaussian(&mut tape, mu, ls).unwrap();
        assert!((tape.value(k).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn capacity_examples() {
        let s = CapacitySchedule::new(vec![20.0, 1.0, 5.0], 100).unwrap();
        assert_eq!(s.at(0), vec![0.0; 3]);
        assert_eq!(s.at(50), vec![10.0, 0.5, 2.5]);
        assert_eq!(s.at(100), vec![20.0, 1.0, 5.0]);
        assert_eq!(s.at(10_000), vec![20.0, 1.0, 5.0]);
        let z = CapacitySchedule::new(vec![3.0], 0).unwrap();
        assert_eq!(capacity_at(&z, 0), vec![3.0]);
        assert!(CapacitySchedule::new(vec![-1.0], 5).is_err());
    }

    #[test]
    fn objective_examples() {
        let r = LossReport::from_terms(1.5, vec![3.0, 2.0], vec![1.0, 1.0], 0.0).unwrap();
        assert_eq!(r.total, 1.5);
        let r = LossReport::from_terms(1.5, vec![3.0, 2.0], vec![3.0, 2.0], 7.0).unwrap();
        assert_eq!(r.total, 1.5);
        let r = LossReport::from_terms(1.5, vec![3.0], vec![0.0], 1.0).unwrap();
        assert_eq!(r.total, 4.5);
        assert!(LossReport::from_terms(1.5, vec![3.0], vec![0.0], -1.0).is_err());
        assert!(LossReport::from_terms(1.5, vec![3.0], vec![0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn capacity_gradient_is_beta_sign() {
        for (kl, c, expect) in [(3.0, 1.0, 2.5), (0.5, 1.0, -2.5), (1.0, 1.0, 0.0)] {
            let mut tape = Tape::new();
            let r = tape.input(Tensor::scalar(0.3)).unwrap();
            let k = tape.leaf(Tensor::scalar(kl)).unwrap();
            let (total, report) = favae_loss(&mut tape, r, &[k], 2.5, &[c]).unwrap();
            assert!((report.total - (0.3 + 2.5 * (kl - c).abs())).abs() < 1e-15);
            let g = tape.backward(total).unwrap();
            assert_eq!(g.wrt(k).unwrap(), &[expect]);
        }
    }

    #[test]
    fn identical_posteriors_have_no_index_information() {
        let mu = vec![vec![0.3, -0.2, 1.0]; 64];
        let ls = vec![vec![-0.5, 0.1, 0.0]; 64];
        let d = kl_decomposition(&mu, &ls, &mut RngStream::new(3)).unwrap();
        assert!(d.index_code_mi.abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_latent_has_no_total_correlation() {
        let mut rng = RngStream::new(8);
        let mu: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.normal()]).collect();
        let ls: Vec<Vec<f64>> = (0..100).map(|_| vec![-1.0 + 0.3 * rng.normal()]).collect();
        let d = kl_decomposition(&mu, &ls, &mut rng).unwrap();
        assert!(d.total_correlation.abs() < 1e-12);
    }

    #[test]
    fn expected_recon_averages_independent_decodings() {
        use crate::model::LadderConfig;
        let cfg = LadderConfig { channels: 4, seq_len: 12, ..LadderConfig::default() };
        let model = LadderModel::new(cfg, &mut RngStream::new(1)).unwrap();
        let mut rng = RngStream::new(2);
        let x = Tensor::from_fn(&[3, 2, 12], |_| rng.normal());
        let got = expected_recon_nll(&model, &x, 3, &mut RngStream::new(7)).unwrap();
        let mut draws = RngStream::new(7);
        let mut sum = 0.0;
        for _ in 0..3 {
            let mut pass = model.pass(Mode::Eval);
            let xv = pass.tape.input(x.clone()).unwrap();
            let out = pass.forward(xv, &mut draws).unwrap();
            sum += recon_nll_values(&x, pass.tape.value(out.recon)).unwrap();
        }
        assert!((got - sum / 3.0).abs() < 1e-12);
        assert!(expected_recon_nll(&model, &x, 0, &mut draws).is_err());
    }

    #[test]
    fn decomposition_rejects_tiny_batches() {
        assert!(kl_decomposition(&[vec![0.0]], &[vec![0.0]], &mut RngStream::new(0)).is_err());
    }
}
