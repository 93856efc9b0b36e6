use super::*;
use crate::gradcheck::{central_difference, relative_error};
use crate::objective::{favae_loss, kl_diag_gaussian, recon_nll};

fn small_config(seq_len: usize) -> LadderConfig {
    LadderConfig { latent_dims: vec![3, 2, 1], channels: 4, seq_len, ..LadderConfig::default() }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn extents_follow_ceil_chain() {
    let c = LadderConfig::default();
    assert_eq!(c.extents(), vec![50, 25, 13]);
    assert_eq!(c.latent_dims, vec![8, 4, 2]);
    let c = LadderConfig { seq_len: 1000, ..LadderConfig::default() };
    assert_eq!(c.extents(), vec![500, 250, 125]);
    assert_eq!(LadderConfig::default().collapsed().latent_dims, vec![14]);
}

#[test]
fn invalid_configs_rejected() {
    for c in [
        LadderConfig { latent_dims: vec![], ..LadderConfig::default() },
        LadderConfig { latent_dims: vec![2, 0], ..LadderConfig::default() },
        LadderConfig { stride: 0, ..LadderConfig::default() },
    ] {
        assert!(LadderModel::new(c, &mut RngStream::new(0)).is_err());
    }
}

#[test]
fn encode_rejects_wrong_shape() {
    let model = LadderModel::new(small_config(16), &mut RngStream::new(1)).unwrap();
    let mut pass = model.pass(Mode::Eval);
    let x = pass.tape.input(Tensor::zeros(&[2, 2, 15])).unwrap();
    assert!(pass.encode(x).is_err());
    let x = pass.tape.input(Tensor::zeros(&[2, 3, 16])).unwrap();
    assert!(pass.encode(x).is_err());
}

#[test]
fn round_trip_shape() {
    for t in [100, 1000] {
        let cfg = LadderConfig { channels: 8, seq_len: t, ..LadderConfig::default() };
        let model = LadderModel::new(cfg, &mut RngStream::new(2)).unwrap();
        let x = random_input(&[3, 2, t], 5);
        let mut pass = model.pass(Mode::Eval);
        let xv = pass.tape.input(x).unwrap();
        let enc = pass.encode(xv).unwrap();
        assert!(enc.extents.windows(2).all(|w| w[1] < w[0]));
        let out = pass.decode(&enc.mu).unwrap();
        assert_eq!(pass.tape.shape(out), &[3, 2, t]);
    }
}

#[test]
fn eval_mode_is_batch_independent() {
    let model = LadderModel::new(LadderConfig::default(), &mut RngStream::new(3)).unwrap();
    let big = random_input(&[128, 2, 100], 9);
    let one = big.slice_outer(17, 1).unwrap();
    let mu_big = model.posterior_means(&big).unwrap();
    let mu_one = model.posterior_means(&one).unwrap();
    for (b, o) in mu_big.iter().zip(&mu_one) {
        let d = b.shape()[1];
        let row = &b.data()[17 * d..18 * d];
        for (x, y) in row.iter().zip(o.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_latents_decode_deterministically() {
    let model = LadderModel::new(small_config(20), &mut RngStream::new(4)).unwrap();
    let z: Vec<Tensor> = model.config().latent_dims.iter().map(|&d| Tensor::zeros(&[2, d])).collect();
    let a = model.decode_values(&z).unwrap();
    let b = model.decode_values(&z).unwrap();
    assert_eq!(a, b);
    // both rows see the same latent, so they decode identically
    assert_eq!(a.slice_outer(0, 1).unwrap().data(), a.slice_outer(1, 1).unwrap().data());
}

#[test]
fn zero_gate_silences_lower_ladders() {
    let mut model = LadderModel::new(small_config(20), &mut RngStream::new(5)).unwrap();
    for l in 0..2 {
        let id = model.gate_param(l).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = RngStream::new(6);
    let base: Vec<Tensor> = model.config().latent_dims.iter().map(|&d| Tensor::from_fn(&[1, d], |_| rng.normal())).collect();
    let reference = model.decode_values(&base).unwrap();
    for l in 0..2 {
        let mut z = base.clone();
        z[l].data_mut().iter_mut().for_each(|v| *v += 2.0);
        assert_eq!(model.decode_values(&z).unwrap(), reference, "ladder {l}");
    }
    // the top ladder still matters
    let mut z = base.clone();
    z[2].data_mut()[0] += 2.0;
    assert_ne!(model.decode_values(&z).unwrap(), reference);
}

#[test]
fn gate_is_linear_in_its_parameter() {
    let mut model = LadderModel::new(small_config(20), &mut RngStream::new(7)).unwrap();
    let id = model.gate_param(0).unwrap();
    let shape = model.params().get(id).shape().to_vec();
    let g1 = random_input(&shape, 1);
    let g2 = random_input(&shape, 2);
    let z = random_input(&[2, 3], 3);
    let mut eval_gate = |g: &Tensor| {
        *model.params_mut().get_mut(id) = g.clone();
        let mut pass = model.pass(Mode::Eval);
        let zv = pass.tape.input(z.clone()).unwrap();
        let out = pass.gate(0, zv).unwrap();
        pass.tape.value(out).clone()
    };
    let (a, b) = (0.7, -1.3);
    let mix = Tensor::from_fn(&shape, |i| a * g1.data()[i] + b * g2.data()[i]);
    let (y1, y2, ym) = (eval_gate(&g1), eval_gate(&g2), eval_gate(&mix));
    for i in 0..ym.len() {
        assert!((ym.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_decode_to_zero() {
    let mut model = LadderModel::new(small_config(20), &mut RngStream::new(8)).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        if !name.ends_with("gamma") {
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
    }
    let z: Vec<Tensor> = [3, 2, 1].iter().map(|&d| random_input(&[2, d], d as u64)).collect();
    let out = model.decode_values(&z).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn decode_rejects_bad_latents() {
    let model = LadderModel::new(small_config(20), &mut RngStream::new(9)).unwrap();
    assert!(model.decode_values(&[Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 2])]).is_err());
    assert!(model.decode_values(&[Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 1])]).is_err());
}

#[test]
fn forward_without_noise_equals_decode_of_means() {
    let model = LadderModel::new(small_config(20), &mut RngStream::new(10)).unwrap();
    let x = random_input(&[3, 2, 20], 11);
    let expected = model.reconstruct(&x).unwrap();
    let mut pass = model.pass(Mode::Eval);
    let xv = pass.tape.input(x).unwrap();
    let noise: Vec<Tensor> = [3, 2, 1].iter().map(|&d| Tensor::zeros(&[3, d])).collect();
    let out = pass.forward_with_noise(xv, &noise).unwrap();
    assert_eq!(pass.tape.value(out.recon), &expected);
}

fn loss_for(model: &LadderModel, x: &Tensor, seed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut pass = model.pass(Mode::Train);
    let xv = pass.tape.input(x.clone()).unwrap();
    let out = pass.forward(xv, &mut RngStream::new(seed)).unwrap();
    let r = recon_nll(&mut pass.tape, xv, out.recon).unwrap();
    let kl: Vec<Var> = out
        .encoded
        .mu
        .iter()
        .zip(&out.encoded.log_sigma)
        .map(|(&m, &s)| kl_diag_gaussian(&mut pass.tape, m, s).unwrap())
        .collect();
    let caps = [0.5, 0.1, 0.2];
    let (total, report) = favae_loss(&mut pass.tape, r, &kl, 2.0, &caps[..kl.len()]).unwrap();
    let grads = pass.tape.backward(total).unwrap();
    (report.total, grads.params(&model.params().lens()))
}

#[test]
fn fixed_seed_gives_identical_loss_and_finite_gradients() {
    let model = LadderModel::new(small_config(20), &mut RngStream::new(12)).unwrap();
    let x = random_input(&[4, 2, 20], 13);
    let (l1, g1) = loss_for(&model, &x, 99);
    let (l2, g2) = loss_for(&model, &x, 99);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    assert!(g1.iter().flatten().all(|v| v.is_finite()));
    assert!(g1.iter().flatten().any(|&v| v != 0.0));
}

#[test]
fn full_forward_gradient_matches_finite_differences() {
    let cfg = LadderConfig { latent_dims: vec![2, 1], channels: 3, seq_len: 8, ..LadderConfig::default() };
    let model = LadderModel::new(cfg, &mut RngStream::new(14)).unwrap();
    let x = random_input(&[3, 2, 8], 15);
    let (_, analytic) = loss_for(&model, &x, 5);
    let flat: Vec<f64> = model.params().tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    let numeric = central_difference(
        |p| {
            let mut m = model.clone();
            let mut off = 0;
            for t in m.params_mut().tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&p[off..off + n]);
                off += n;
            }
            loss_for(&m, &x, 5).0
        },
        &flat,
        1e-5,
    );
    let analytic: Vec<f64> = analytic.into_iter().flatten().collect();
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}
