//! Ladder encoder/decoder over time-convolution blocks.
//!
//! Encoder: `h_l = f_l(h_{l−1})`, `z_l ~ N(μ_l(h_l), σ_l(h_l))`.
//! Decoder: `z̃_L = g_L(z_L)`, `z̃_l = g_l(z̃_{l+1} + gate(z_l))` for `l < L`,
//! and the reconstruction mean is `g_0(z̃_1)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{BatchMoments, BatchNormStats, Mode, ParamId, Tape, Var};
use crate::tensor::Tensor;

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    /// Latent width per ladder, lowest ladder first. Its length is the ladder count.
    pub latent_dims: Vec<usize>,
    /// Conv channels in every block.
    pub channels: usize,
    /// Conv layers per block; the first one carries the stride.
    pub block_depth: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input_channels: usize,
    pub seq_len: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            latent_dims: vec![8, 4, 2],
            channels: 64,
            block_depth: 2,
            kernel: 3,
            stride: 2,
            input_channels: 2,
            seq_len: 100,
        }
    }
}

impl LadderConfig {
    pub fn ladders(&self) -> usize {
        self.latent_dims.len()
    }

    pub fn total_latent(&self) -> usize {
        self.latent_dims.iter().sum()
    }

    /// Single ladder whose width is the sum of all ladder widths.
    pub fn collapsed(&self) -> Self {
        Self { latent_dims: vec![self.total_latent()], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dims.is_empty() {
            return bad("at least one ladder is required");
        }
        if self.latent_dims.contains(&0) {
            return bad("latent dims must be positive");
        }
        if self.channels == 0 || self.block_depth == 0 || self.kernel == 0 || self.stride == 0 {
            return bad("channels, block depth, kernel and stride must be positive");
        }
        if self.input_channels == 0 || self.seq_len == 0 {
            return bad("input channels and sequence length must be positive");
        }
        Ok(())
    }

    /// Time extent after each ladder's encoder block: `ceil(prev / stride)`.
    pub fn extents(&self) -> Vec<usize> {
        let mut t = self.seq_len;
        self.latent_dims
            .iter()
            .map(|_| {
                t = t.div_ceil(self.stride);
                t
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct NormedConv {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Head {
    w_mu: ParamId,
    b_mu: ParamId,
    w_ls: ParamId,
    b_ls: ParamId,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    /// Strided transposed conv back to the previous extent.
    up: NormedConv,
    /// Stride-1 causal convs after the upsampling.
    convs: Vec<NormedConv>,
    target_t: usize,
}

#[derive(Debug, Clone)]
struct GateLayer {
    proj_w: ParamId,
    proj_b: ParamId,
    gate: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Vec<NormedConv>>,
    heads: Vec<Head>,
    top_w: ParamId,
    top_b: ParamId,
    decoder: Vec<DecoderBlock>,
    /// `gates[l]` serves ladder `l < L − 1`.
    gates: Vec<GateLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Parameters, batch-norm running statistics and topology of the ladder model.
#[derive(Debug, Clone)]
pub struct LadderModel {
    config: LadderConfig,
    params: ParamStore,
    bn: Vec<BatchNormStats>,
    layout: Layout,
}

/// Per-ladder posterior parameters plus the recorded time extents.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub mu: Vec<Var>,
    pub log_sigma: Vec<Var>,
    pub extents: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Reconstruction mean, `B × C × T`.
    pub recon: Var,
    pub encoded: EncoderOutput,
    /// Sampled latent per ladder.
    pub z: Vec<Var>,
}

struct Builder<'a> {
    params: ParamStore,
    bn: Vec<BatchNormStats>,
    rng: &'a mut RngStream,
}

impl Builder<'_> {
    fn normed(&mut self, name: &str, w_shape: [usize; 3], fan_in: usize, channels: usize, stride: usize) -> NormedConv {
        let w = self.params.add_uniform(format!("{name}.w"), &w_shape, fan_in, self.rng);
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[channels]));
        let gamma = self.params.add(format!("{name}.bn.gamma"), Tensor::full(&[channels], 1.0));
        let beta = self.params.add(format!("{name}.bn.beta"), Tensor::zeros(&[channels]));
        self.bn.push(BatchNormStats::new(channels));
        NormedConv { w, b, gamma, beta, bn: self.bn.len() - 1, stride }
    }

    fn affine(&mut self, name: &str, out: usize, inp: usize) -> (ParamId, ParamId) {
        let w = self.params.add_uniform(format!("{name}.w"), &[out, inp], inp, self.rng);
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[out]));
        (w, b)
    }
}

impl LadderModel {
    pub fn new(config: LadderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (ch, k, s) = (config.channels, config.kernel, config.stride);
        let extents = config.extents();
        let nl = config.ladders();
        let mut bld = Builder { params: ParamStore::new(), bn: Vec::new(), rng };

        let mut encoder = Vec::with_capacity(nl);
        let mut heads = Vec::with_capacity(nl);
        for l in 0..nl {
            let mut block = Vec::with_capacity(config.block_depth);
            for d in 0..config.block_depth {
                let c_in = if l == 0 && d == 0 { config.input_channels } else { ch };
                let stride = if d == 0 { s } else { 1 };
                block.push(bld.normed(&format!("enc{l}.conv{d}"), [ch, c_in, k], c_in * k, ch, stride));
            }
            encoder.push(block);
            let flat = ch * extents[l];
            let (w_mu, b_mu) = bld.affine(&format!("enc{l}.mu"), config.latent_dims[l], flat);
            let (w_ls, b_ls) = bld.affine(&format!("enc{l}.log_sigma"), config.latent_dims[l], flat);
            heads.push(Head { w_mu, b_mu, w_ls, b_ls });
        }

        let (top_w, top_b) = bld.affine("dec.top", ch * extents[nl - 1], config.latent_dims[nl - 1]);
        let mut decoder = Vec::with_capacity(nl);
        for l in 0..nl {
            let target_t = if l == 0 { config.seq_len } else { extents[l - 1] };
            let up = bld.normed(&format!("dec{l}.up"), [ch, ch, k], ch * k, ch, s);
            let convs = (1..config.block_depth)
                .map(|d| bld.normed(&format!("dec{l}.conv{d}"), [ch, ch, k], ch * k, ch, 1))
                .collect();
            decoder.push(DecoderBlock { up, convs, target_t });
        }
        let mut gates = Vec::with_capacity(nl.saturating_sub(1));
        for l in 0..nl.saturating_sub(1) {
            let (proj_w, proj_b) = bld.affine(&format!("gate{l}.proj"), ch * extents[l], config.latent_dims[l]);
            let gate = bld.params.add(format!("gate{l}.gate"), Tensor::full(&[ch, extents[l]], 1.0));
            gates.push(GateLayer { proj_w, proj_b, gate });
        }
        let out_w = bld.params.add_uniform("dec.out.w", &[ch, config.input_channels, k], ch * k, bld.rng);
        let out_b = bld.params.add("dec.out.b", Tensor::zeros(&[config.input_channels]));

        let layout = Layout { encoder, heads, top_w, top_b, decoder, gates, out_w, out_b };
        Ok(Self { config, params: bld.params, bn: bld.bn, layout })
    }

    /// Rebuilds a model from stored parameters and running statistics.
    pub fn from_parts(config: LadderConfig, params: ParamStore, bn: Vec<BatchNormStats>) -> Result<Self> {
        let mut model = Self::new(config, &mut RngStream::new(0))?;
        model.params.load_from(params)?;
        if bn.len() != model.bn.len() || bn.iter().zip(&model.bn).any(|(a, b)| a.mean.len() != b.mean.len()) {
            return Err(Error::Corrupt("batch-norm statistics do not match the model layout".into()));
        }
        model.bn = bn;
        Ok(model)
    }

    pub fn config(&self) -> &LadderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BatchNormStats] {
        &self.bn
    }

    /// Gate tensor of ladder `l` (`l < L − 1`).
    pub fn gate_param(&self, l: usize) -> Option<ParamId> {
        self.layout.gates.get(l).map(|g| g.gate)
    }

    /// Starts a forward pass. Parameters are bound lazily, once per pass.
    pub fn pass(&self, mode: Mode) -> Pass<'_> {
        Pass { model: self, tape: Tape::new(), mode, moments: Vec::new(), bound: HashMap::new() }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn absorb(&mut self, moments: Vec<(usize, BatchMoments)>) {
        for (i, m) in moments {
            self.bn[i].update(&m);
        }
    }

    /// Posterior means per ladder for `x` (`B × C × T`), eval mode.
    pub fn posterior_means(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut pass = self.pass(Mode::Eval);
        let xv = pass.tape.input(x.clone())?;
        let enc = pass.encode(xv)?;
        Ok(enc.mu.iter().map(|&m| pass.tape.value(m).clone()).collect())
    }

    /// Posterior means and log standard deviations per ladder, eval mode.
    pub fn posterior(&self, x: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut pass = self.pass(Mode::Eval);
        let xv = pass.tape.input(x.clone())?;
        let enc = pass.encode(xv)?;
        let mu = enc.mu.iter().map(|&m| pass.tape.value(m).clone()).collect();
        let ls = enc.log_sigma.iter().map(|&m| pass.tape.value(m).clone()).collect();
        Ok((mu, ls))
    }

    /// Decodes per-ladder latents (`B × d_l` each) to the reconstruction mean, eval mode.
    pub fn decode_values(&self, z: &[Tensor]) -> Result<Tensor> {
        let mut pass = self.pass(Mode::Eval);
        let vars = z.iter().map(|t| pass.tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = pass.decode(&vars)?;
        Ok(pass.tape.value(out).clone())
    }

    /// `decode(encode(x).means)` in eval mode.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mu = self.posterior_means(x)?;
        self.decode_values(&mu)
    }
}

/// One forward pass over a fresh tape.
pub struct Pass<'m> {
    model: &'m LadderModel,
    pub tape: Tape,
    mode: Mode,
    moments: Vec<(usize, BatchMoments)>,
    bound: HashMap<ParamId, Var>,
}

impl Pass<'_> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.model.params.bind(&mut self.tape, id)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Batch statistics gathered in train mode, for [`LadderModel::absorb`].
    pub fn into_moments(self) -> Vec<(usize, BatchMoments)> {
        self.moments
    }

    fn normed(&mut self, layer: &NormedConv, x: Var, deconv_target: Option<usize>) -> Result<Var> {
        let (w, b) = (self.param(layer.w)?, self.param(layer.b)?);
        let h = match deconv_target {
            Some(t) => self.tape.time_deconv(x, w, b, layer.stride, t)?,
            None => self.tape.time_conv(x, w, b, layer.stride)?,
        };
        let (g, be) = (self.param(layer.gamma)?, self.param(layer.beta)?);
        let (h, moments) = self.tape.batch_norm(h, g, be, &self.model.bn[layer.bn], self.mode)?;
        if let Some(m) = moments {
            self.moments.push((layer.bn, m));
        }
        self.tape.relu(h)
    }

    fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.param(w)?, self.param(b)?);
        self.tape.affine(x, w, b)
    }

    pub fn encode(&mut self, x: Var) -> Result<EncoderOutput> {
        let cfg = &self.model.config;
        let shape = self.tape.shape(x).to_vec();
        let &[batch, c, t] = shape.as_slice() else {
            return Err(shape_err("encode", format!("expected B × C × T, got {shape:?}")));
        };
        if c != cfg.input_channels || t != cfg.seq_len {
            return Err(shape_err(
                "encode",
                format!("input {shape:?} does not match C = {}, T = {}", cfg.input_channels, cfg.seq_len),
            ));
        }
        let layout = &self.model.layout;
        let extents = cfg.extents();
        let ch = cfg.channels;
        let (mut mu, mut log_sigma) = (Vec::new(), Vec::new());
        let mut h = x;
        for (l, block) in layout.encoder.iter().enumerate() {
            for layer in block {
                h = self.normed(layer, h, None)?;
            }
            let flat = self.tape.reshape(h, &[batch, ch * extents[l]])?;
            let head = &layout.heads[l];
            mu.push(self.affine(flat, head.w_mu, head.b_mu)?);
            let raw = self.affine(flat, head.w_ls, head.b_ls)?;
            log_sigma.push(self.tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?);
        }
        Ok(EncoderOutput { mu, log_sigma, extents })
    }

    fn decoder_block(&mut self, l: usize, x: Var) -> Result<Var> {
        let block = &self.model.layout.decoder[l];
        let mut h = self.normed(&block.up, x, Some(block.target_t))?;
        for layer in &block.convs {
            h = self.normed(layer, h, None)?;
        }
        Ok(h)
    }

    /// `gate ⊙ proj(z_l)`, shaped like `z̃_{l+1}` (`B × channels × extent_l`).
    pub fn gate(&mut self, l: usize, z: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let gl = self.model.layout.gates.get(l).ok_or_else(|| {
            Error::InvalidArgument(format!("ladder {l} has no gate (ladders: {})", cfg.ladders()))
        })?;
        let (proj_w, proj_b, gate) = (gl.proj_w, gl.proj_b, gl.gate);
        let batch = self.tape.shape(z)[0];
        let shape = [batch, cfg.channels, cfg.extents()[l]];
        let proj = self.affine(z, proj_w, proj_b)?;
        let proj = self.tape.reshape(proj, &shape)?;
        let gate = self.param(gate)?;
        self.tape.mul_broadcast(proj, gate)
    }

    /// Reconstruction mean from one latent tensor per ladder.
    pub fn decode(&mut self, z: &[Var]) -> Result<Var> {
        let cfg = &self.model.config;
        let layout = &self.model.layout;
        let nl = cfg.ladders();
        if z.len() != nl {
            return Err(shape_err("decode", format!("expected {nl} latent tensors, got {}", z.len())));
        }
        let batch = self.tape.shape(z[0])[0];
        for (l, &zl) in z.iter().enumerate() {
            if self.tape.shape(zl) != [batch, cfg.latent_dims[l]] {
                return Err(shape_err(
                    "decode",
                    format!("ladder {l}: latent {:?}, expected [{batch}, {}]", self.tape.shape(zl), cfg.latent_dims[l]),
                ));
            }
        }
        let extents = cfg.extents();
        let ch = cfg.channels;

        let top = self.affine(z[nl - 1], layout.top_w, layout.top_b)?;
        let top = self.tape.reshape(top, &[batch, ch, extents[nl - 1]])?;
        let mut zt = self.decoder_block(nl - 1, top)?;
        for l in (0..nl - 1).rev() {
            let gated = self.gate(l, z[l])?;
            let sum = self.tape.add(zt, gated)?;
            zt = self.decoder_block(l, sum)?;
        }
        let (w, b) = (self.param(layout.out_w)?, self.param(layout.out_b)?);
        self.tape.time_deconv(zt, w, b, 1, cfg.seq_len)
    }

    /// encode → reparameterize each ladder → decode.
    pub fn forward(&mut self, x: Var, rng: &mut RngStream) -> Result<ForwardOutput> {
        let encoded = self.encode(x)?;
        let z = encoded
            .mu
            .iter()
            .zip(&encoded.log_sigma)
            .map(|(&m, &s)| self.tape.reparameterize(m, s, rng))
            .collect::<Result<Vec<_>>>()?;
        let recon = self.decode(&z)?;
        Ok(ForwardOutput { recon, encoded, z })
    }

    /// [`Pass::forward`] with caller-supplied noise per ladder.
    pub fn forward_with_noise(&mut self, x: Var, noise: &[Tensor]) -> Result<ForwardOutput> {
        let encoded = self.encode(x)?;
        if noise.len() != encoded.mu.len() {
            return Err(shape_err("forward_with_noise", "one noise tensor per ladder"));
        }
        let z = encoded
            .mu
            .iter()
            .zip(&encoded.log_sigma)
            .zip(noise)
            .map(|((&m, &s), e)| self.tape.reparameterize_with(m, s, e.clone()))
            .collect::<Result<Vec<_>>>()?;
        let recon = self.decode(&z)?;
        Ok(ForwardOutput { recon, encoded, z })
    }
}

#[cfg(test)]
mod tests;
