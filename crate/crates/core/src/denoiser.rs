//! Conditional rectified-flow model over autoencoder latents.
//!
//! The network predicts the velocity `v = eps - z_B` at noisy latents
//! `x_t = (1 - t) z_B + t eps`. It sees `x_t` concatenated channel-wise with
//! the observed-image latent, and a conditioning vector built from a
//! sinusoidal time embedding plus the mean-pooled task embedding; that vector
//! drives per-block scale/shift modulation of a small residual conv net.
//!
//! Latents are standardized per channel (statistics stored with the model)
//! before entering the flow, and de-standardized before decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{adam_from_arrays, adam_to_arrays, params_checksum, params_from_arrays, params_to_arrays, Checkpoint};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::pairwise_mean;
use crate::nn::{clip_grad_norm, silu, silu_backward, Adam, AdamConfig, Conv2d, Feat, Init, Op, ParamLayout, Real, Seq, Tape};
use crate::revae::{Latent, Vae};
use crate::rng::{child_rng, fnv1a, normal_vec, rng_from_seed, split_seed};

/// Prompt used to initialize the task embedding.
pub const DEFAULT_PROMPT: &str = "please remove the reflection within the image";
/// Default number of Euler steps.
pub const DEFAULT_SAMPLE_STEPS: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FixedText,
    Learned,
    Random,
}

/// `len x width` task vectors, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub len: usize,
    pub width: usize,
    pub vectors: Vec<f32>,
    pub learnable: bool,
    pub provenance: Provenance,
}

impl TaskEmbedding {
    pub fn new(len: usize, width: usize, vectors: Vec<f32>, learnable: bool, provenance: Provenance) -> Result<Self> {
        if len == 0 || width == 0 {
            return Err(Error::Dimension("task embedding needs at least one vector of positive width".into()));
        }
        if vectors.len() != len * width {
            return Err(Error::Dimension(format!("{} values for a {len}x{width} task embedding", vectors.len())));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("task embedding contains non-finite values".into()));
        }
        Ok(Self { len, width, vectors, learnable, provenance })
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.width..(i + 1) * self.width]
    }
}

fn unit_vector(seed: u64, width: usize) -> Vec<f32> {
    let raw = normal_vec(&mut rng_from_seed(seed), width);
    let norm = raw.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    raw.iter().map(|&v| (v as f64 / norm) as f32).collect()
}

/// Frozen stand-in for a text encoder: each whitespace token becomes a unit
/// vector drawn from a generator seeded by `split_seed(fnv1a(token), salt)`.
pub fn fte_embed(text: &str, width: usize, seed_salt: u64) -> Result<TaskEmbedding> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Domain("prompt text has no tokens".into()));
    }
    let vectors = tokens.iter().flat_map(|t| unit_vector(split_seed(fnv1a(t.as_bytes()), seed_salt), width)).collect();
    TaskEmbedding::new(tokens.len(), width, vectors, false, Provenance::FixedText)
}

/// Learnable copy of a fixed embedding.
pub fn init_task_embedding(fte: &TaskEmbedding) -> TaskEmbedding {
    TaskEmbedding { learnable: true, provenance: Provenance::Learned, ..fte.clone() }
}

/// Learnable embedding with unit vectors unrelated to any text.
pub fn random_task_embedding(len: usize, width: usize, seed: u64) -> Result<TaskEmbedding> {
    let vectors = (0..len as u64).flat_map(|i| unit_vector(split_seed(seed, i), width)).collect();
    TaskEmbedding::new(len, width, vectors, true, Provenance::Random)
}

/// How the task embedding of a training run starts and whether it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInit {
    /// Fixed text embedding, frozen.
    Fix,
    /// Initialized from the fixed text embedding, then trained.
    Learned,
    /// Random unit vectors, trained.
    Random,
}

impl std::str::FromStr for PromptInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fix" | "fixed" => Ok(Self::Fix),
            "learned" | "learn" => Ok(Self::Learned),
            "random" | "rand" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown prompt mode {other:?} (fix, learned, random)"))),
        }
    }
}

impl PromptInit {
    pub fn build(self, text: &str, width: usize, salt: u64) -> Result<TaskEmbedding> {
        let fte = fte_embed(text, width, salt)?;
        Ok(match self {
            Self::Fix => fte,
            Self::Learned => init_task_embedding(&fte),
            Self::Random => random_task_embedding(fte.len, width, split_seed(salt, 0x5241_4e44))?,
        })
    }
}

/// Per-channel standardization of latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn fit(latents: &[&Latent]) -> Result<Self> {
        let first = latents.first().ok_or_else(|| Error::Domain("no latents to fit statistics on".into()))?;
        let c = first.channels;
        let plane = first.height * first.width;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for z in latents {
            for ch in 0..c {
                for &v in &z.data[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (latents.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32).collect();
        Ok(Self { mean: mean.iter().map(|&m| m as f32).collect(), std })
    }

    fn apply<F: Real>(&self, f: &mut Feat<F>, forward: bool) {
        for c in 0..f.c {
            let (m, s) = (F::lit(self.mean[c] as f64), F::lit(self.std[c] as f64));
            for n in 0..f.n {
                for v in f.slab_mut(c, n) {
                    *v = if forward { (*v - m) / s } else { *v * s + m };
                }
            }
        }
    }

    pub fn normalize<F: Real>(&self, mut f: Feat<F>) -> Feat<F> {
        self.apply(&mut f, true);
        f
    }

    pub fn denormalize<F: Real>(&self, mut f: Feat<F>) -> Feat<F> {
        self.apply(&mut f, false);
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub time_dim: usize,
    /// Width `d` of the task vectors.
    pub task_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { latent_channels: 4, channels: 32, blocks: 4, time_dim: 64, task_dim: 32 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.channels == 0 || self.blocks == 0 || self.task_dim == 0 {
            return Err(Error::Config("denoiser widths and block count must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    modulation: Conv2d,
    body: Seq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserArch {
    pub config: DenoiserConfig,
    pub layout: ParamLayout,
    conv_in: Conv2d,
    time1: Conv2d,
    time2: Conv2d,
    task_proj: Conv2d,
    blocks: Vec<Block>,
    conv_out: Conv2d,
    /// Per-channel gains on `x_t` and `z_obs` added straight to the velocity.
    skip: Conv2d,
}

impl DenoiserArch {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let (lc, c) = (config.latent_channels, config.channels);
        let conv_in = Conv2d::new(&mut layout, "in", 2 * lc, c, 3, 1, 1);
        let time1 = Conv2d::linear(&mut layout, "time.1", config.time_dim, c);
        let time2 = Conv2d::linear(&mut layout, "time.2", c, c);
        let task_proj = Conv2d::linear(&mut layout, "task.proj", config.task_dim, c);
        let blocks = (0..config.blocks)
            .map(|b| {
                let modulation = Conv2d::with_init(&mut layout, &format!("block{b}.mod"), c, 2 * c, 1, 1, 0, Init::Fan { fan_in: c, gain: 0.1 });
                let mut body = Seq::new();
                body.push(Op::Silu)
                    .push(Op::Conv(Conv2d::new(&mut layout, &format!("block{b}.conv1"), c, c, 3, 1, 1)))
                    .push(Op::Silu)
                    .push(Op::Conv(Conv2d::with_init(&mut layout, &format!("block{b}.conv2"), c, c, 3, 1, 1, Init::Fan { fan_in: 9 * c, gain: 0.5 })));
                Block { modulation, body }
            })
            .collect();
        let conv_out = Conv2d::zeroed(&mut layout, "out", c, lc, 3, 1, 1);
        let skip = Conv2d::zeroed(&mut layout, "skip", c, 2 * lc, 1, 1, 0);
        Ok(Self { config, layout, conv_in, time1, time2, task_proj, blocks, conv_out, skip })
    }

    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(&self.config).expect("config serializes");
        self.layout.fingerprint() ^ fnv1a(text.as_bytes())
    }
}

/// Sinusoidal features of `1000 t`, `[sin | cos]`, as a `[dim][n][1][1]` batch.
pub fn time_features<F: Real>(t: &[F], dim: usize) -> Feat<F> {
    let half = dim / 2;
    let n = t.len();
    let mut out = Feat::zeros(dim, n, 1, 1);
    for (j, &tj) in t.iter().enumerate() {
        let s = tj.to_f64().unwrap_or(0.0) * 1000.0;
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.data[i * n + j] = F::lit((s * freq).sin());
            out.data[(half + i) * n + j] = F::lit((s * freq).cos());
        }
    }
    out
}

struct BlockTape<F> {
    h_in: Feat<F>,
    modulation: Feat<F>,
    body: Tape<F>,
}

/// Forward intermediates needed by [`Denoiser::backward`].
pub struct DenoiserTape<F> {
    input: Feat<F>,
    time: Feat<F>,
    e1: Feat<F>,
    e1s: Feat<F>,
    pooled: Feat<F>,
    cond: Feat<F>,
    cond_s: Feat<F>,
    blocks: Vec<BlockTape<F>>,
    h_final: Feat<F>,
    h_final_s: Feat<F>,
    task_len: usize,
}

/// Network weights with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F = f32> {
    pub arch: DenoiserArch,
    pub params: Vec<F>,
}

fn add_feat<F: Real>(a: &mut Feat<F>, b: &Feat<F>) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += *y;
    }
}

impl<F: Real> Denoiser<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let arch = DenoiserArch::new(config)?;
        let mut params: Vec<F> = arch.layout.init(&mut child_rng(seed, u64::MAX));
        // Start from v = x_t - z_obs, the exact velocity at t = 1 when the
        // background latent equals the observed one.
        let lc = arch.config.latent_channels;
        let bias = arch.skip.bias.offset;
        params[bias..bias + lc].fill(F::one());
        params[bias + lc..bias + 2 * lc].fill(-F::one());
        Ok(Self { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser { arch: self.arch.clone(), params: crate::nn::cast_vec(&self.params) }
    }

    fn pooled(&self, task: &[F], n: usize) -> Feat<F> {
        let d = self.arch.config.task_dim;
        let len = task.len() / d;
        let mut out = Feat::zeros(d, n, 1, 1);
        for j in 0..d {
            let mut s = F::zero();
            for l in 0..len {
                s += task[l * d + j];
            }
            let m = s / F::lit(len as f64);
            out.data[j * n..(j + 1) * n].fill(m);
        }
        out
    }

    /// Velocity for a batch of standardized latents `x_t`, conditioning
    /// latents `z_obs`, times `t` (one per sample) and flat task vectors.
    pub fn forward(&self, task: &[F], x_t: &Feat<F>, z_obs: &Feat<F>, t: &[F]) -> (Feat<F>, DenoiserTape<F>) {
        let cfg = &self.arch.config;
        let p = &self.params;
        assert!(x_t.same_shape(z_obs) && x_t.c == cfg.latent_channels, "denoiser input shapes");
        assert_eq!(t.len(), x_t.n, "one time per sample");
        assert!(!task.is_empty() && task.len() % cfg.task_dim == 0, "task vectors do not match task_dim");
        let n = x_t.n;
        let c = cfg.channels;
        let input = Feat::concat_channels(x_t, z_obs);
        let mut h = self.arch.conv_in.forward(p, &input);

        let time = time_features(t, cfg.time_dim);
        let e1 = self.arch.time1.forward(p, &time);
        let e1s = silu(&e1);
        let mut cond = self.arch.time2.forward(p, &e1s);
        let pooled = self.pooled(task, n);
        add_feat(&mut cond, &self.arch.task_proj.forward(p, &pooled));
        let cond_s = silu(&cond);

        let mut blocks = Vec::with_capacity(self.arch.blocks.len());
        let plane = h.plane();
        for block in &self.arch.blocks {
            let modulation = block.modulation.forward(p, &cond_s);
            let mut u = h.clone();
            for ch in 0..c {
                for s in 0..n {
                    let gamma = modulation.data[ch * n + s];
                    let beta = modulation.data[(c + ch) * n + s];
                    for v in &mut u.data[(ch * n + s) * plane..(ch * n + s + 1) * plane] {
                        *v = *v * (F::one() + gamma) + beta;
                    }
                }
            }
            let (out, body) = block.body.forward(p, &u);
            let h_in = std::mem::replace(&mut h, out);
            add_feat(&mut h, &h_in);
            blocks.push(BlockTape { h_in, modulation, body });
        }
        let h_final_s = silu(&h);
        let mut v = self.arch.conv_out.forward(p, &h_final_s);
        let gains = self.arch.skip.forward(p, &cond_s);
        let lc = cfg.latent_channels;
        let lplane = v.plane();
        for ch in 0..lc {
            for s in 0..n {
                let (gx, go) = (gains.data[ch * n + s], gains.data[(lc + ch) * n + s]);
                let r = (ch * n + s) * lplane..(ch * n + s + 1) * lplane;
                let (xs, os) = (&input.data[r.clone()], &input.data[(lc * n + ch * n + s) * lplane..(lc * n + ch * n + s + 1) * lplane]);
                for ((o, x), z) in v.data[r].iter_mut().zip(xs).zip(os) {
                    *o += gx * *x + go * *z;
                }
            }
        }
        let tape = DenoiserTape { input, time, e1, e1s, pooled, cond, cond_s, blocks, h_final: h, h_final_s, task_len: task.len() / cfg.task_dim };
        (v, tape)
    }

    pub fn infer(&self, task: &[F], x_t: &Feat<F>, z_obs: &Feat<F>, t: &[F]) -> Feat<F> {
        self.forward(task, x_t, z_obs, t).0
    }

    /// Accumulates parameter gradients into `grads` and task-vector gradients
    /// into `d_task` for upstream gradient `dv`.
    pub fn backward(&self, tape: &DenoiserTape<F>, dv: &Feat<F>, grads: &mut [F], d_task: &mut [F]) {
        let cfg = &self.arch.config;
        let p = &self.params;
        let c = cfg.channels;
        let n = dv.n;
        let d_hs = self.arch.conv_out.backward(p, &tape.h_final_s, dv, grads);
        let mut dh = silu_backward(&tape.h_final, &d_hs);
        let lc = cfg.latent_channels;
        let lplane = dv.plane();
        let mut d_gains = Feat::zeros(2 * lc, n, 1, 1);
        for j in 0..2 * lc {
            for s in 0..n {
                let src = &tape.input.data[(j * n + s) * lplane..(j * n + s + 1) * lplane];
                let ch = j % lc;
                let d = &dv.data[(ch * n + s) * lplane..(ch * n + s + 1) * lplane];
                d_gains.data[j * n + s] = d.iter().zip(src).fold(F::zero(), |acc, (a, b)| acc + *a * *b);
            }
        }
        let mut d_cond_s = self.arch.skip.backward(p, &tape.cond_s, &d_gains, grads);
        let plane = dh.plane();
        for (block, bt) in self.arch.blocks.iter().zip(&tape.blocks).rev() {
            let du = block.body.backward(p, &bt.body, dh.clone(), grads);
            let mut dmod = Feat::zeros(2 * c, n, 1, 1);
            for ch in 0..c {
                for s in 0..n {
                    let gamma = bt.modulation.data[ch * n + s];
                    let r = (ch * n + s) * plane..(ch * n + s + 1) * plane;
                    let (mut dg, mut db) = (F::zero(), F::zero());
                    for ((g, x), d) in du.data[r.clone()].iter().zip(&bt.h_in.data[r.clone()]).zip(&mut dh.data[r.clone()]) {
                        dg += *g * *x;
                        db += *g;
                        *d += *g * (F::one() + gamma);
                    }
                    dmod.data[ch * n + s] = dg;
                    dmod.data[(c + ch) * n + s] = db;
                }
            }
            add_feat(&mut d_cond_s, &block.modulation.backward(p, &tape.cond_s, &dmod, grads));
        }
        self.arch.conv_in.backward_params(p, &tape.input, &dh, grads);

        let d_cond = silu_backward(&tape.cond, &d_cond_s);
        let d_pooled = self.arch.task_proj.backward(p, &tape.pooled, &d_cond, grads);
        let d = cfg.task_dim;
        let inv_len = F::lit(1.0 / tape.task_len as f64);
        for j in 0..d {
            let g: F = d_pooled.data[j * n..(j + 1) * n].iter().copied().sum::<F>() * inv_len;
            for l in 0..tape.task_len {
                d_task[l * d + j] += g;
            }
        }
        let d_e1s = self.arch.time2.backward(p, &tape.e1s, &d_cond, grads);
        let d_e1 = silu_backward(&tape.e1, &d_e1s);
        self.arch.time1.backward_params(p, &tape.time, &d_e1, grads);
    }

    /// Mean squared flow-matching error on one batch, with gradients when requested.
    ///
    /// `z_b` and `z_obs` are standardized latents; `eps` has the shape of `z_b`.
    pub fn flow_loss(&self, task: &[F], z_b: &Feat<F>, z_obs: &Feat<F>, t: &[F], eps: &Feat<F>, grads: Option<(&mut [F], &mut [F])>) -> f64 {
        let (x_t, target) = flow_pair(z_b, eps, t);
        let (v, tape) = self.forward(task, &x_t, z_obs, t);
        let count = F::lit(v.data.len() as f64);
        let mut sq = Vec::with_capacity(v.data.len());
        let mut dv = Feat::zeros(v.c, v.n, v.h, v.w);
        for ((o, y), d) in v.data.iter().zip(&target.data).zip(dv.data.iter_mut()) {
            let e = *o - *y;
            sq.push((e * e).to_f64().unwrap_or(f64::NAN));
            *d = F::lit(2.0) * e / count;
        }
        if let Some((g, gt)) = grads {
            self.backward(&tape, &dv, g, gt);
        }
        // pairwise: a running sum of O(1) terms costs ~sqrt(n) ulps of the total
        pairwise_mean(&sq)
    }
}


/// `(x_t, v)` with `x_t = (1 - t) z_b + t eps` and `v = eps - z_b`, per sample.
pub fn flow_pair<F: Real>(z_b: &Feat<F>, eps: &Feat<F>, t: &[F]) -> (Feat<F>, Feat<F>) {
    assert!(z_b.same_shape(eps), "noise shape differs from latent shape");
    assert_eq!(t.len(), z_b.n, "one time per sample");
    let mut x_t = Feat::zeros(z_b.c, z_b.n, z_b.h, z_b.w);
    let mut v = Feat::zeros(z_b.c, z_b.n, z_b.h, z_b.w);
    for c in 0..z_b.c {
        for (s, &ts) in t.iter().enumerate() {
            let (zb, e) = (z_b.slab(c, s), eps.slab(c, s));
            for (x, (&b, &n)) in x_t.slab_mut(c, s).iter_mut().zip(zb.iter().zip(e)) {
                *x = (F::one() - ts) * b + ts * n;
            }
            for (d, (&b, &n)) in v.slab_mut(c, s).iter_mut().zip(zb.iter().zip(e)) {
                *d = n - b;
            }
        }
    }
    (x_t, v)
}

/// Selects samples `idx` of a batch, in order.
pub(crate) fn gather<F: Real>(f: &Feat<F>, idx: &[usize]) -> Feat<F> {
    let mut out = Feat::zeros(f.c, idx.len(), f.h, f.w);
    for c in 0..f.c {
        for (j, &i) in idx.iter().enumerate() {
            out.slab_mut(c, j).copy_from_slice(f.slab(c, i));
        }
    }
    out
}

/// Observed-image latent plus the task vectors it is processed with.
#[derive(Debug, Clone, PartialEq)]
pub struct CondBundle {
    /// Encoder output for the observed image, before standardization.
    pub observed_latent: Latent,
    pub task: TaskEmbedding,
}

/// Trained velocity model with its task embedding and latent statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub net: Denoiser<f32>,
    pub task: TaskEmbedding,
    pub stats: LatentStats,
    /// Default number of Euler steps.
    pub sample_steps: usize,
}

/// Number of network, decoder and scorer invocations, counted per sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub denoiser_evals: u64,
    pub decoder_calls: u64,
    pub scorer_calls: u64,
}

impl std::ops::AddAssign for CallLedger {
    fn add_assign(&mut self, o: Self) {
        self.denoiser_evals += o.denoiser_evals;
        self.decoder_calls += o.decoder_calls;
        self.scorer_calls += o.scorer_calls;
    }
}

/// One trajectory of the Euler sampler, in standardized latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub latent: Latent,
    /// Current time; `1` is pure noise, `0` the clean end.
    pub t: f64,
    pub seed: u64,
    /// Euler steps taken so far, out of `steps`.
    pub step: usize,
    pub steps: usize,
    pub trace: Option<Vec<(f64, Latent)>>,
}

impl FlowState {
    pub fn is_finished(&self) -> bool {
        self.step >= self.steps
    }
}

impl DenoiserModel {
    pub fn new(net: Denoiser<f32>, task: TaskEmbedding, stats: LatentStats) -> Result<Self> {
        let cfg = &net.arch.config;
        if task.width != cfg.task_dim {
            return Err(Error::Dimension(format!("task width {} but the denoiser expects {}", task.width, cfg.task_dim)));
        }
        if stats.mean.len() != cfg.latent_channels || stats.std.len() != cfg.latent_channels {
            return Err(Error::Dimension("latent statistics do not match latent channels".into()));
        }
        Ok(Self { net, task, stats, sample_steps: DEFAULT_SAMPLE_STEPS })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.net.arch.config
    }

    /// Encodes `observed` with the frozen autoencoder.
    pub fn condition(&self, vae: &Vae<f32>, observed: &Image) -> Result<CondBundle> {
        self.check_vae(vae)?;
        Ok(CondBundle { observed_latent: vae.encode(observed)?, task: self.task.clone() })
    }

    /// Conditioning for many images, encoded in batches.
    pub fn condition_many(&self, vae: &Vae<f32>, observed: &[&Image]) -> Result<Vec<CondBundle>> {
        self.check_vae(vae)?;
        let mut out = Vec::with_capacity(observed.len());
        for chunk in observed.chunks(32) {
            let z = vae.encode_batch(chunk)?;
            out.extend((0..chunk.len()).map(|i| CondBundle { observed_latent: Latent::from_feat_sample(&z, i), task: self.task.clone() }));
        }
        Ok(out)
    }

    fn check_vae(&self, vae: &Vae<f32>) -> Result<()> {
        if vae.arch.config.latent_channels != self.config().latent_channels {
            return Err(Error::Dimension(format!(
                "autoencoder has {} latent channels, denoiser {}",
                vae.arch.config.latent_channels,
                self.config().latent_channels
            )));
        }
        Ok(())
    }

    fn check_cond(&self, x_t: &Latent, cond: &CondBundle) -> Result<()> {
        if x_t.shape() != cond.observed_latent.shape() {
            return Err(Error::Dimension(format!("x_t {:?} vs observed latent {:?}", x_t.shape(), cond.observed_latent.shape())));
        }
        if x_t.channels != self.config().latent_channels {
            return Err(Error::Dimension(format!("latent has {} channels, expected {}", x_t.channels, self.config().latent_channels)));
        }
        if cond.task.width != self.config().task_dim {
            return Err(Error::Dimension(format!("task width {}, expected {}", cond.task.width, self.config().task_dim)));
        }
        Ok(())
    }

    /// Velocity at standardized latent `x_t` and time `t`.
    pub fn predict_velocity(&self, x_t: &Latent, t: f64, cond: &CondBundle) -> Result<Latent> {
        self.check_cond(x_t, cond)?;
        let v = self.velocities(&[x_t], t, &[&cond.observed_latent], &cond.task);
        Ok(v.into_iter().next().expect("one velocity"))
    }

    /// Batched velocities; `observed` holds unstandardized encoder outputs.
    pub fn velocities(&self, x_t: &[&Latent], t: f64, observed: &[&Latent], task: &TaskEmbedding) -> Vec<Latent> {
        assert_eq!(x_t.len(), observed.len());
        let x = Latent::batch_to_feat::<f32>(x_t);
        let obs = self.stats.normalize(Latent::batch_to_feat::<f32>(observed));
        let times = vec![t as f32; x_t.len()];
        let v = self.net.infer(&task.vectors, &x, &obs, &times);
        (0..v.n).map(|i| Latent::from_feat_sample(&v, i)).collect()
    }

    /// Gaussian starting latent for `seed`.
    pub fn initial_state(&self, shape: (usize, usize, usize), seed: u64, steps: usize, trace: bool) -> FlowState {
        let (c, h, w) = shape;
        let latent = Latent { channels: c, height: h, width: w, data: normal_vec(&mut rng_from_seed(seed), c * h * w) };
        let trace = trace.then(|| vec![(1.0, latent.clone())]);
        FlowState { latent, t: 1.0, seed, step: 0, steps, trace }
    }

    /// Advances every unfinished state by one Euler step of size `1 / steps`
    /// and returns the clean-end estimates `x - t v` from the same velocity.
    pub fn euler_step(&self, states: &mut [FlowState], conds: &[&CondBundle], ledger: &mut CallLedger) -> Vec<Latent> {
        assert_eq!(states.len(), conds.len());
        let mut estimates = Vec::with_capacity(states.len());
        // States at the same time are evaluated together.
        let mut i = 0;
        while i < states.len() {
            let mut j = i + 1;
            while j < states.len() && states[j].step == states[i].step && states[j].steps == states[i].steps {
                j += 1;
            }
            let group = &mut states[i..j];
            let t = group[0].t;
            let xs: Vec<&Latent> = group.iter().map(|s| &s.latent).collect();
            let obs: Vec<&Latent> = conds[i..j].iter().map(|c| &c.observed_latent).collect();
            let vs = self.velocities(&xs, t, &obs, &conds[i].task);
            ledger.denoiser_evals += group.len() as u64;
            for (s, v) in group.iter_mut().zip(vs) {
                assert!(!s.is_finished(), "trajectory already reached t = 0");
                let dt = 1.0 / s.steps as f32;
                let tf = t as f32;
                estimates.push(Latent { data: s.latent.data.iter().zip(&v.data).map(|(x, v)| x - tf * v).collect(), ..v.clone() });
                for (x, v) in s.latent.data.iter_mut().zip(&v.data) {
                    *x -= dt * v;
                }
                s.step += 1;
                s.t = (s.steps - s.step) as f64 / s.steps as f64;
                if let Some(tr) = s.trace.as_mut() {
                    tr.push((s.t, s.latent.clone()));
                }
            }
            i = j;
        }
        estimates
    }

    /// Runs every state to `t = 0`.
    pub fn integrate(&self, states: &mut [FlowState], conds: &[&CondBundle], ledger: &mut CallLedger) {
        while states.iter().any(|s| !s.is_finished()) {
            let (idx, mut live): (Vec<usize>, Vec<FlowState>) =
                states.iter().enumerate().filter(|(_, s)| !s.is_finished()).map(|(i, s)| (i, s.clone())).unzip();
            let c: Vec<&CondBundle> = idx.iter().map(|&i| conds[i]).collect();
            self.euler_step(&mut live, &c, ledger);
            for (i, s) in idx.into_iter().zip(live) {
                states[i] = s;
            }
        }
    }

    /// Maps standardized latents back to images.
    pub fn decode(&self, vae: &Vae<f32>, latents: &[&Latent], ledger: &mut CallLedger) -> Vec<Image> {
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(32) {
            let z = self.stats.denormalize(Latent::batch_to_feat::<f32>(chunk));
            out.extend(vae.decode_batch(&z));
        }
        ledger.decoder_calls += latents.len() as u64;
        out
    }

    fn latent_shape(&self, vae: &Vae<f32>) -> (usize, usize, usize) {
        let s = vae.arch.config.latent_size();
        (self.config().latent_channels, s, s)
    }

    /// Full `steps`-step Euler sample for `observed`, starting from noise drawn from `seed`.
    pub fn sample(&self, vae: &Vae<f32>, observed: &Image, seed: u64, steps: usize) -> Result<(Image, CallLedger)> {
        let (mut images, ledger) = self.sample_many(vae, &[observed], &[seed], steps)?;
        Ok((images.remove(0), ledger))
    }

    /// Independent samples for several `(observed, seed)` pairs.
    pub fn sample_many(&self, vae: &Vae<f32>, observed: &[&Image], seeds: &[u64], steps: usize) -> Result<(Vec<Image>, CallLedger)> {
        if steps == 0 {
            return Err(Error::Domain("sampling needs at least one step".into()));
        }
        if observed.len() != seeds.len() {
            return Err(Error::Dimension(format!("{} images but {} seeds", observed.len(), seeds.len())));
        }
        let conds = self.condition_many(vae, observed)?;
        let shape = self.latent_shape(vae);
        let mut ledger = CallLedger::default();
        let mut images = Vec::with_capacity(observed.len());
        for (cs, ss) in conds.chunks(64).zip(seeds.chunks(64)) {
            let mut states: Vec<FlowState> = ss.iter().map(|&s| self.initial_state(shape, s, steps, false)).collect();
            let refs: Vec<&CondBundle> = cs.iter().collect();
            self.integrate(&mut states, &refs, &mut ledger);
            let finals: Vec<&Latent> = states.iter().map(|s| &s.latent).collect();
            images.extend(self.decode(vae, &finals, &mut ledger));
        }
        Ok((images, ledger))
    }

    /// Decoded clean-end estimate after a single velocity evaluation at `t = 1`.
    pub fn one_step_preview(&self, vae: &Vae<f32>, observed: &Image, seed: u64) -> Result<(Image, CallLedger)> {
        let cond = self.condition(vae, observed)?;
        let mut ledger = CallLedger::default();
        let mut state = [self.initial_state(self.latent_shape(vae), seed, self.sample_steps.max(1), false)];
        let est = self.euler_step(&mut state, &[&cond], &mut ledger);
        let img = self.decode(vae, &[&est[0]], &mut ledger).remove(0);
        Ok((img, ledger))
    }
}

/// Encoded training pairs in standardized latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCorpus {
    pub z_b: Feat<f32>,
    pub z_obs: Feat<f32>,
    pub stats: LatentStats,
}

impl FlowCorpus {
    /// Encodes backgrounds and observations with the frozen autoencoder;
    /// statistics are fit on the background latents.
    pub fn encode(vae: &Vae<f32>, samples: &[crate::scene::LayeredSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("training corpus is empty".into()));
        }
        let mut zb = Vec::new();
        let mut zo = Vec::new();
        for chunk in samples.chunks(32) {
            let b: Vec<&Image> = chunk.iter().map(|s| &s.background).collect();
            let o: Vec<&Image> = chunk.iter().map(|s| &s.observed).collect();
            let fb = vae.encode_batch(&b)?;
            let fo = vae.encode_batch(&o)?;
            zb.extend((0..chunk.len()).map(|i| Latent::from_feat_sample(&fb, i)));
            zo.extend((0..chunk.len()).map(|i| Latent::from_feat_sample(&fo, i)));
        }
        let stats = LatentStats::fit(&zb.iter().collect::<Vec<_>>())?;
        Ok(Self::from_latents(&zb, &zo, stats))
    }

    pub fn from_latents(z_b: &[Latent], z_obs: &[Latent], stats: LatentStats) -> Self {
        let zb = stats.normalize(Latent::batch_to_feat(&z_b.iter().collect::<Vec<_>>()));
        let zo = stats.normalize(Latent::batch_to_feat(&z_obs.iter().collect::<Vec<_>>()));
        Self { z_b: zb, z_obs: zo, stats }
    }

    pub fn len(&self) -> usize {
        self.z_b.n
    }

    pub fn is_empty(&self) -> bool {
        self.z_b.n == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub arch: DenoiserConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub prompt: PromptInit,
    pub prompt_text: String,
    pub fte_salt: u64,
    /// Learning-rate multiplier for learnable task vectors.
    pub task_lr_scale: f64,
    pub sample_steps: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            arch: DenoiserConfig::default(),
            adam: AdamConfig { lr: 1e-5, ..AdamConfig::default() },
            batch_size: 32,
            steps: 5000,
            seed: 0,
            grad_clip: 1.0,
            prompt: PromptInit::Learned,
            prompt_text: DEFAULT_PROMPT.to_string(),
            fte_salt: 0,
            task_lr_scale: 10.0,
            sample_steps: DEFAULT_SAMPLE_STEPS,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("sample_steps must be at least 1".into()));
        }
        if !(self.task_lr_scale >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserLogRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTrainState {
    pub model: DenoiserModel,
    pub adam: Adam<f32>,
    pub step: u64,
}

impl DenoiserTrainState {
    pub fn fresh(cfg: &DenoiserTrainConfig, stats: LatentStats) -> Result<Self> {
        cfg.validate()?;
        let net = Denoiser::new(cfg.arch.clone(), cfg.seed)?;
        let task = cfg.prompt.build(&cfg.prompt_text, cfg.arch.task_dim, cfg.fte_salt)?;
        let mut model = DenoiserModel::new(net, task, stats)?;
        model.sample_steps = cfg.sample_steps;
        let adam = Adam::new(cfg.adam, model.net.params.len() + model.task.vectors.len());
        Ok(Self { model, adam, step: 0 })
    }

    pub fn to_checkpoint(&self, cfg: &DenoiserTrainConfig, vae_hash: u64) -> Checkpoint {
        let m = &self.model;
        let mut arrays = params_to_arrays("param/", &m.net.arch.layout, &m.net.params);
        arrays.push(crate::arrays::NamedArray::new("task.vectors", vec![m.task.len, m.task.width], m.task.vectors.clone()));
        arrays.push(crate::arrays::NamedArray::new("latent.mean", vec![m.stats.mean.len()], m.stats.mean.clone()));
        arrays.push(crate::arrays::NamedArray::new("latent.std", vec![m.stats.std.len()], m.stats.std.clone()));
        arrays.extend(adam_to_arrays(&self.adam));
        Checkpoint {
            arch_hash: m.net.arch.fingerprint(),
            step: self.step,
            seed: cfg.seed,
            meta: serde_json::json!({
                "kind": "denoiser",
                "arch": m.net.arch.config,
                "train": cfg,
                "task": {"len": m.task.len, "width": m.task.width, "learnable": m.task.learnable, "provenance": m.task.provenance},
                "sample_steps": m.sample_steps,
                "vae_hash": format!("{vae_hash:016x}"),
                "param_count": m.net.params.len(),
                "param_checksum": params_checksum(&m.net.params),
            }),
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, adam: AdamConfig) -> Result<Self> {
        let model = denoiser_from_checkpoint(ckpt)?;
        let adam = adam_from_arrays(ckpt, adam, model.net.params.len() + model.task.vectors.len())?;
        Ok(Self { model, adam, step: ckpt.step })
    }
}

/// Autoencoder fingerprint the denoiser was trained against.
pub fn denoiser_vae_hash(ckpt: &Checkpoint) -> Option<u64> {
    ckpt.meta_str("vae_hash").and_then(|h| u64::from_str_radix(h, 16).ok())
}

pub fn denoiser_from_checkpoint(ckpt: &Checkpoint) -> Result<DenoiserModel> {
    if ckpt.meta_str("kind") != Some("denoiser") {
        return Err(Error::Config("checkpoint is not a denoiser checkpoint".into()));
    }
    let bad = |e: serde_json::Error| Error::Config(e.to_string());
    let config: DenoiserConfig = serde_json::from_value(ckpt.meta["arch"].clone()).map_err(bad)?;
    let arch = DenoiserArch::new(config)?;
    if arch.fingerprint() != ckpt.arch_hash {
        return Err(Error::Config("architecture hash mismatch".into()));
    }
    let params = params_from_arrays("param/", &arch.layout, ckpt)?;
    let t = &ckpt.meta["task"];
    let learnable = t["learnable"].as_bool().unwrap_or(false);
    let provenance: Provenance = serde_json::from_value(t["provenance"].clone()).map_err(bad)?;
    let tv = ckpt.require("task.vectors")?;
    let [len, width] = tv.shape[..] else {
        return Err(Error::Dimension("task.vectors must be two-dimensional".into()));
    };
    let task = TaskEmbedding::new(len, width, tv.data.clone(), learnable, provenance)?;
    let stats = LatentStats { mean: ckpt.require("latent.mean")?.data.clone(), std: ckpt.require("latent.std")?.data.clone() };
    let mut model = DenoiserModel::new(Denoiser { arch, params }, task, stats)?;
    model.sample_steps = ckpt.meta["sample_steps"].as_u64().unwrap_or(DEFAULT_SAMPLE_STEPS as u64) as usize;
    Ok(model)
}

/// Trains velocity weights and (when learnable) the task vectors until `cfg.steps`.
///
/// Step `s` draws batch indices, times and noise from `child_rng(cfg.seed, s)`.
pub fn train_denoiser(
    corpus: &FlowCorpus,
    cfg: &DenoiserTrainConfig,
    state: Option<DenoiserTrainState>,
    mut on_step: impl FnMut(&DenoiserLogRecord),
) -> Result<(DenoiserTrainState, Vec<DenoiserLogRecord>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    let mut state = match state {
        Some(s) => s,
        None => DenoiserTrainState::fresh(cfg, corpus.stats.clone())?,
    };
    if state.model.net.arch.config != cfg.arch {
        return Err(Error::Config("resume state architecture differs from config".into()));
    }
    if corpus.z_b.c != cfg.arch.latent_channels {
        return Err(Error::Dimension(format!("corpus latents have {} channels, expected {}", corpus.z_b.c, cfg.arch.latent_channels)));
    }
    let np = state.model.net.params.len();
    let nt = state.model.task.vectors.len();
    state.adam.clear_lr_scales();
    state.adam.scale_lr(np..np + nt, if state.model.task.learnable { cfg.task_lr_scale } else { 0.0 });

    let n = cfg.batch_size;
    let mut theta: Vec<f32> = state.model.net.params.iter().chain(&state.model.task.vectors).copied().collect();
    let mut grads = vec![0.0f32; np + nt];
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = child_rng(cfg.seed, step);
        let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..corpus.len())).collect();
        let t: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let zb = gather(&corpus.z_b, &picks);
        let zo = gather(&corpus.z_obs, &picks);
        let eps = Feat::from_vec(zb.c, zb.n, zb.h, zb.w, normal_vec(&mut rng, zb.data.len()));
        grads.fill(0.0);
        let (gp, gt) = grads.split_at_mut(np);
        let loss = state.model.net.flow_loss(&state.model.task.vectors, &zb, &zo, &t, &eps, Some((gp, gt)));
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("non-finite flow loss {loss}") });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        state.adam.step(&mut theta, &grads);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { step, detail: "non-finite parameters after update".into() });
        }
        state.model.net.params.copy_from_slice(&theta[..np]);
        state.model.task.vectors.copy_from_slice(&theta[np..]);
        state.step += 1;
        let record = DenoiserLogRecord { step, loss, grad_norm };
        on_step(&record);
        log.push(record);
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_check, sample_indices};
    use crate::revae::VaeConfig;
    use crate::scene::{synth_scene, SceneParams};

    fn small() -> DenoiserConfig {
        DenoiserConfig { latent_channels: 2, channels: 6, blocks: 2, time_dim: 8, task_dim: 5 }
    }

    fn randn(seed: u64, c: usize, n: usize, h: usize, w: usize) -> Feat<f64> {
        let v = normal_vec(&mut rng_from_seed(seed), c * n * h * w);
        Feat::from_vec(c, n, h, w, v.iter().map(|&x| x as f64).collect())
    }

    /// Nonzero output weights so every tensor receives gradient.
    fn live_net(seed: u64) -> Denoiser<f64> {
        let mut net = Denoiser::<f64>::new(small(), seed).unwrap();
        let out = net.arch.layout.get("out.weight").unwrap().clone();
        let noise = normal_vec(&mut rng_from_seed(seed + 100), out.len());
        for (p, n) in net.params[out.offset..out.offset + out.len()].iter_mut().zip(noise) {
            *p = 0.2 * n as f64;
        }
        net
    }

    #[test]
    fn fixed_text_embedding_contract() {
        let a = fte_embed(DEFAULT_PROMPT, 32, 0).unwrap();
        assert_eq!(a, fte_embed(DEFAULT_PROMPT, 32, 0).unwrap());
        assert_eq!(a.len, 7);
        assert_eq!(a.provenance, Provenance::FixedText);
        assert!(!a.learnable);
        for i in 0..a.len {
            let norm = a.token(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "{norm}");
        }
        // repeated words share a vector
        assert_eq!(a.token(2), a.token(5));
        assert_ne!(a.token(0), a.token(1));
        assert!(matches!(fte_embed("  \t", 32, 0), Err(Error::Domain(_))));
        assert_ne!(fte_embed(DEFAULT_PROMPT, 32, 1).unwrap().vectors, a.vectors);
    }

    #[test]
    fn learned_embedding_starts_as_copy() {
        let fte = fte_embed("remove reflection", 8, 3).unwrap();
        let lte = init_task_embedding(&fte);
        assert_eq!(lte.vectors, fte.vectors);
        assert!(lte.learnable);
        assert_eq!(lte.provenance, Provenance::Learned);
        let rnd = random_task_embedding(2, 8, 9).unwrap();
        assert_eq!(rnd.provenance, Provenance::Random);
        assert_ne!(rnd.vectors, fte.vectors);
    }

    #[test]
    fn fresh_network_predicts_state_minus_observation() {
        let net = Denoiser::<f64>::new(small(), 1).unwrap();
        let x = randn(1, 2, 3, 4, 4);
        let o = randn(2, 2, 3, 4, 4);
        let task = fte_embed("a b", 5, 0).unwrap().vectors.iter().map(|&v| v as f64).collect::<Vec<_>>();
        let v = net.infer(&task, &x, &o, &[0.1, 0.5, 1.0]);
        assert!(v.same_shape(&x));
        for ((v, x), o) in v.data.iter().zip(&x.data).zip(&o.data) {
            assert_eq!(*v, x - o);
        }
    }

    #[test]
    fn flow_loss_gradient_matches_finite_differences() {
        let net = live_net(4);
        let (n, h) = (2, 4);
        let zb = randn(10, 2, n, h, h);
        let zo = randn(11, 2, n, h, h);
        let eps = randn(12, 2, n, h, h);
        let t = [0.3, 0.85];
        let task: Vec<f64> = fte_embed("x y z", 5, 2).unwrap().vectors.iter().map(|&v| v as f64).collect();
        let np = net.params.len();
        let mut gp = vec![0.0; np];
        let mut gt = vec![0.0; task.len()];
        net.flow_loss(&task, &zb, &zo, &t, &eps, Some((&mut gp, &mut gt)));
        assert!(gt.iter().any(|g| *g != 0.0));

        let theta: Vec<f64> = net.params.iter().chain(&task).copied().collect();
        let analytic: Vec<f64> = gp.iter().chain(&gt).copied().collect();
        let f = |th: &[f64]| {
            let d = Denoiser { arch: net.arch.clone(), params: th[..np].to_vec() };
            d.flow_loss(&th[np..], &zb, &zo, &t, &eps, None)
        };
        let mut idx = sample_indices(&net.arch.layout, 5, 7);
        idx.extend(np..np + task.len());
        let r = finite_difference_check(f, &theta, &analytic, &idx, 1e-5, 1e-6);
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn exact_velocity_has_zero_loss_and_straight_paths() {
        let zb = randn(20, 2, 3, 4, 4);
        let eps = randn(21, 2, 3, 4, 4);
        let t = [0.0, 0.4, 1.0];
        let (x_t, v) = flow_pair(&zb, &eps, &t);
        let loss = v.data.iter().zip(&flow_pair(&zb, &eps, &t).1.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert_eq!(loss, 0.0);
        // x_t - t v = z_b for every t
        for c in 0..2 {
            for (s, &ts) in t.iter().enumerate() {
                for ((x, v), b) in x_t.slab(c, s).iter().zip(v.slab(c, s)).zip(zb.slab(c, s)) {
                    assert!((x - ts * v - b).abs() < 1e-12);
                }
            }
        }
        // Euler with the exact field from t = 1 reaches z_b for any step count
        for steps in [1usize, 3, 28] {
            let mut x = eps.clone();
            for _ in 0..steps {
                for ((xi, e), b) in x.data.iter_mut().zip(&eps.data).zip(&zb.data) {
                    *xi -= (e - b) / steps as f64;
                }
            }
            let err = x.data.iter().zip(&zb.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{steps}: {err}");
        }
    }

    fn tiny_vae() -> Vae<f32> {
        Vae::new(VaeConfig { image_size: 16, widths: [4, 6, 8], ..VaeConfig::default() }, 2).unwrap()
    }

    fn tiny_scene(seed: u64) -> crate::scene::LayeredSample {
        synth_scene(seed, &SceneParams { image_size: 16, ..SceneParams::default() }).unwrap()
    }

    fn tiny_cfg(prompt: PromptInit) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            arch: DenoiserConfig { channels: 8, blocks: 2, time_dim: 16, task_dim: 8, ..DenoiserConfig::default() },
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            batch_size: 8,
            steps: 1,
            prompt,
            ..DenoiserTrainConfig::default()
        }
    }

    fn tiny_corpus() -> FlowCorpus {
        let samples: Vec<_> = (0..16).map(tiny_scene).collect();
        FlowCorpus::encode(&tiny_vae(), &samples).unwrap()
    }

    #[test]
    fn one_step_moves_learnable_task_only() {
        let corpus = tiny_corpus();
        for (prompt, moves) in [(PromptInit::Learned, true), (PromptInit::Fix, false), (PromptInit::Random, true)] {
            let cfg = tiny_cfg(prompt);
            let mut fresh = DenoiserTrainState::fresh(&cfg, corpus.stats.clone()).unwrap();
            // the zero output layer blocks all upstream gradient on a fresh net
            let out = fresh.model.net.arch.layout.get("out.weight").unwrap().clone();
            for (i, p) in fresh.model.net.params[out.offset..out.offset + out.len()].iter_mut().enumerate() {
                *p = 0.05 * ((i % 7) as f32 - 3.0);
            }
            let (after, _) = train_denoiser(&corpus, &cfg, Some(fresh.clone()), |_| {}).unwrap();
            assert_eq!(after.step, 1);
            assert_eq!(after.model.task.vectors != fresh.model.task.vectors, moves, "{prompt:?}");
            assert_ne!(after.model.net.params, fresh.model.net.params);
        }
    }

    #[test]
    fn training_is_deterministic_and_resumes_exactly() {
        let corpus = tiny_corpus();
        let cfg = DenoiserTrainConfig { steps: 6, ..tiny_cfg(PromptInit::Learned) };
        let (a, log_a) = train_denoiser(&corpus, &cfg, None, |_| {}).unwrap();
        let (b, _) = train_denoiser(&corpus, &cfg, None, |_| {}).unwrap();
        assert_eq!(a, b);
        let (half, _) = train_denoiser(&corpus, &DenoiserTrainConfig { steps: 3, ..cfg.clone() }, None, |_| {}).unwrap();
        let bytes = half.to_checkpoint(&cfg, 7).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        assert_eq!(denoiser_vae_hash(&ck), Some(7));
        let restored = DenoiserTrainState::from_checkpoint(&ck, cfg.adam).unwrap();
        let (c, log_c) = train_denoiser(&corpus, &cfg, Some(restored), |_| {}).unwrap();
        assert_eq!(c.model, a.model);
        assert_eq!(c.adam.m, a.adam.m);
        assert_eq!(log_c[..], log_a[3..]);
    }

    #[test]
    fn loss_decreases_with_training() {
        let corpus = tiny_corpus();
        let cfg = DenoiserTrainConfig { steps: 500, ..tiny_cfg(PromptInit::Learned) };
        let (_, log) = train_denoiser(&corpus, &cfg, None, |_| {}).unwrap();
        let mean = |r: &[DenoiserLogRecord]| r.iter().map(|l| l.loss).sum::<f64>() / r.len() as f64;
        let (first, last) = (mean(&log[..50]), mean(&log[450..]));
        assert!(last < 0.8 * first, "{first} -> {last}");
    }

    #[test]
    fn rejects_empty_corpus_and_bad_config() {
        let corpus = tiny_corpus();
        assert!(matches!(
            train_denoiser(&corpus, &DenoiserTrainConfig { batch_size: 0, ..tiny_cfg(PromptInit::Fix) }, None, |_| {}),
            Err(Error::Config(_))
        ));
        let empty = FlowCorpus { z_b: Feat::zeros(4, 0, 2, 2), z_obs: Feat::zeros(4, 0, 2, 2), stats: LatentStats::identity(4) };
        assert!(train_denoiser(&empty, &tiny_cfg(PromptInit::Fix), None, |_| {}).is_err());
        assert!("sideways".parse::<PromptInit>().is_err());
    }

    fn zero_model(cfg: &DenoiserTrainConfig) -> DenoiserModel {
        let mut model = DenoiserTrainState::fresh(cfg, LatentStats::identity(4)).unwrap().model;
        let (b, n) = (model.net.arch.skip.bias.offset, 2 * model.net.arch.config.latent_channels);
        model.net.params[b..b + n].fill(0.0);
        model
    }

    #[test]
    fn zero_velocity_sampling_decodes_the_noise() {
        let vae = tiny_vae();
        let model = zero_model(&tiny_cfg(PromptInit::Learned));
        let s = tiny_scene(3);
        let noise = model.initial_state((4, 2, 2), 77, 1, false).latent;
        let expect = vae.decode(&noise).unwrap();
        let (img, ledger) = model.sample(&vae, &s.observed, 77, 5).unwrap();
        assert_eq!(img, expect);
        assert_eq!(ledger, CallLedger { denoiser_evals: 5, decoder_calls: 1, scorer_calls: 0 });
        let (prev, ledger) = model.one_step_preview(&vae, &s.observed, 77).unwrap();
        assert_eq!(prev, expect);
        assert_eq!(ledger, CallLedger { denoiser_evals: 1, decoder_calls: 1, scorer_calls: 0 });
        assert!(model.sample(&vae, &s.observed, 77, 0).is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_seed_dependent() {
        let corpus = tiny_corpus();
        let cfg = DenoiserTrainConfig { steps: 20, ..tiny_cfg(PromptInit::Learned) };
        let (st, _) = train_denoiser(&corpus, &cfg, None, |_| {}).unwrap();
        let vae = tiny_vae();
        let s = tiny_scene(5);
        let a = st.model.sample(&vae, &s.observed, 42, 6).unwrap().0;
        assert_eq!(a, st.model.sample(&vae, &s.observed, 42, 6).unwrap().0);
        assert_ne!(a, st.model.sample(&vae, &s.observed, 43, 6).unwrap().0);
        // batching does not change individual trajectories
        let s2 = tiny_scene(6);
        let (many, ledger) = st.model.sample_many(&vae, &[&s.observed, &s2.observed], &[42, 9], 6).unwrap();
        assert_eq!(many[0], a);
        assert_eq!(many[1], st.model.sample(&vae, &s2.observed, 9, 6).unwrap().0);
        assert_eq!(ledger.denoiser_evals, 12);
    }

    #[test]
    fn trace_and_time_schedule() {
        let model = zero_model(&tiny_cfg(PromptInit::Fix));
        let vae = tiny_vae();
        let cond = model.condition(&vae, &tiny_scene(1).observed).unwrap();
        let mut st = [model.initial_state((4, 2, 2), 1, 4, true)];
        let mut ledger = CallLedger::default();
        model.integrate(&mut st, &[&cond], &mut ledger);
        let times: Vec<f64> = st[0].trace.as_ref().unwrap().iter().map(|(t, _)| *t).collect();
        assert_eq!(times, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(st[0].is_finished());
        let bad = Latent::new(4, 3, 3, vec![0.0; 36]).unwrap();
        assert!(matches!(model.predict_velocity(&bad, 0.5, &cond), Err(Error::Dimension(_))));
    }
}
