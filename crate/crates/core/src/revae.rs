//! Reflection-equivariant autoencoder.
//!
//! A strided convolutional encoder maps a `64x64x3` image to an `8x8x4`
//! latent; a mirrored decoder maps it back. Training combines pixel MSE, an
//! edge-structure term (L1 between finite-difference gradient-magnitude maps)
//! and the equivariance penalty
//! `|| E(blend(B, R, a)) - ((1 - a) E(B) + a E(R)) ||^2`, which only reaches
//! the encoder.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{adam_from_arrays, adam_to_arrays, params_from_arrays, params_to_arrays, Checkpoint};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::pairwise_mean;
use crate::nn::{
    clip_grad_norm, feat_to_images, images_to_feat, l2_norm, Adam, AdamConfig, Conv2d, Feat, Init, Op, ParamLayout, Real, Seq,
};
use crate::rng::{child_rng, normal_vec};
use crate::scene::{blend, LayeredSample};
use rand::Rng;

/// Encoder output: `channels x height x width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Latent {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!("{} latent values for {channels}x{height}x{width}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("latent contains non-finite values".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub(crate) fn from_feat_sample<F: Real>(f: &Feat<F>, n: usize) -> Self {
        let data = f.sample(n).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        Self { channels: f.c, height: f.h, width: f.w, data }
    }

    pub(crate) fn batch_to_feat<F: Real>(latents: &[&Latent]) -> Feat<F> {
        let (c, h, w) = latents[0].shape();
        let mut out = Feat::zeros(c, latents.len(), h, w);
        for (n, z) in latents.iter().enumerate() {
            assert_eq!(z.shape(), (c, h, w));
            for ch in 0..c {
                let src = &z.data[ch * h * w..(ch + 1) * h * w];
                for (d, s) in out.slab_mut(ch, n).iter_mut().zip(src) {
                    *d = F::lit(*s as f64);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Three stride-2 convolution stages.
    Conv,
    /// One patchifying linear map (box-filter initialized); exactly linear.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub encoder: EncoderKind,
    pub widths: [usize; 3],
    pub latent_channels: usize,
    /// Adds a log-variance head; the latent used everywhere is the mean.
    pub variational: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { image_size: 64, image_channels: 3, encoder: EncoderKind::Conv, widths: [16, 32, 64], latent_channels: 4, variational: false }
    }
}

impl VaeConfig {
    pub const DOWNSAMPLE: usize = 8;

    pub fn latent_size(&self) -> usize {
        self.image_size / Self::DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % Self::DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("image_size {} not divisible by {}", self.image_size, Self::DOWNSAMPLE)));
        }
        if self.latent_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config("image_channels must be 1 or 3".into()));
        }
        Ok(())
    }
}

/// Layer graph and parameter layout for a `VaeConfig`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeArch {
    pub config: VaeConfig,
    pub layout: ParamLayout,
    pub encoder: Seq,
    pub decoder: Seq,
    /// Parameters at `..encoder_len` belong to the encoder.
    pub encoder_len: usize,
}

impl VaeArch {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let mut encoder = Seq::new();
        let lc = config.latent_channels;
        let head = if config.variational { 2 * lc } else { lc };
        let ic = config.image_channels;
        match config.encoder {
            EncoderKind::Conv => {
                let [w1, w2, w3] = config.widths;
                encoder
                    .push(Op::Conv(Conv2d::new(&mut layout, "enc.conv1", ic, w1, 3, 2, 1)))
                    .push(Op::Silu)
                    .push(Op::Conv(Conv2d::new(&mut layout, "enc.conv2", w1, w2, 3, 2, 1)))
                    .push(Op::Silu)
                    .push(Op::Conv(Conv2d::new(&mut layout, "enc.conv3", w2, w3, 3, 2, 1)))
                    .push(Op::Silu)
                    .push(Op::Conv(Conv2d::new(&mut layout, "enc.head", w3, head, 1, 1, 0)));
            }
            EncoderKind::Linear => {
                let k = VaeConfig::DOWNSAMPLE;
                encoder.push(Op::Conv(Conv2d::with_init(&mut layout, "enc.patch", ic, head, k, k, 0, Init::Zeros)));
            }
        }
        let encoder_len = layout.len();
        let [w1, w2, w3] = config.widths;
        let mut decoder = Seq::new();
        decoder
            .push(Op::Conv(Conv2d::new(&mut layout, "dec.conv1", lc, w3, 3, 1, 1)))
            .push(Op::Silu)
            .push(Op::Conv(Conv2d::new(&mut layout, "dec.conv2", w3, w2, 3, 1, 1)))
            .push(Op::Silu)
            .push(Op::Up2)
            .push(Op::Conv(Conv2d::new(&mut layout, "dec.conv3", w2, w1, 3, 1, 1)))
            .push(Op::Silu)
            .push(Op::Up2)
            .push(Op::Conv(Conv2d::new(&mut layout, "dec.conv4", w1, w1, 3, 1, 1)))
            .push(Op::Silu)
            .push(Op::Up2)
            .push(Op::Conv(Conv2d::new(&mut layout, "dec.out", w1, ic, 3, 1, 1)));
        Ok(Self { config, layout, encoder, decoder, encoder_len })
    }

    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(&self.config).expect("config serializes");
        self.layout.fingerprint() ^ crate::rng::fnv1a(text.as_bytes())
    }
}

/// Nonnegative weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon_pixel: f64,
    pub recon_perceptual: f64,
    pub equiv: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon_pixel: 1.0, recon_perceptual: 0.5, equiv: 1.0, kl: 1e-6 }
    }
}

impl LossWeights {
    /// Reconstruction-only baseline.
    pub fn recon_only() -> Self {
        Self { equiv: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.recon_pixel, self.recon_perceptual, self.equiv, self.kl];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    fn uses_decoder(&self) -> bool {
        self.recon_pixel > 0.0 || self.recon_perceptual > 0.0
    }
}

/// Loss components of one evaluation; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pixel: f64,
    pub perceptual: f64,
    pub equiv: f64,
    pub kl: f64,
    pub total: f64,
}

/// Loss value together with its gradient w.r.t. the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad<F> {
    pub value: f64,
    pub grad: Vec<F>,
}

/// Autoencoder weights with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae<F = f32> {
    pub arch: VaeArch,
    pub params: Vec<F>,
}

/// Small constant inside the gradient-magnitude square root.
const EDGE_EPS: f64 = 1e-6;

impl<F: Real> Vae<F> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        let arch = VaeArch::new(config)?;
        let mut params: Vec<F> = arch.layout.init(&mut child_rng(seed, u64::MAX));
        if arch.config.encoder == EncoderKind::Linear {
            // Box filter: latent channel c averages image channel c % C over its patch.
            let k = VaeConfig::DOWNSAMPLE;
            let ic = arch.config.image_channels;
            let entry = arch.layout.get("enc.patch.weight").expect("linear encoder weight");
            let head = entry.shape[0];
            for co in 0..head {
                let ci = co % ic;
                for p in 0..k * k {
                    params[entry.offset + (co * ic + ci) * k * k + p] = F::lit(1.0 / (k * k) as f64);
                }
            }
        }
        Ok(Self { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<G: Real>(&self) -> Vae<G> {
        Vae { arch: self.arch.clone(), params: crate::nn::cast_vec(&self.params) }
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        let c = &self.arch.config;
        let (h, w, ch) = x.shape();
        if h % VaeConfig::DOWNSAMPLE != 0 || w % VaeConfig::DOWNSAMPLE != 0 {
            return Err(Error::Dimension(format!("{h}x{w} image not divisible by {}", VaeConfig::DOWNSAMPLE)));
        }
        if (h, w, ch) != (c.image_size, c.image_size, c.image_channels) {
            return Err(Error::Dimension(format!(
                "expected {0}x{0}x{1} image, got {h}x{w}x{ch}",
                c.image_size, c.image_channels
            )));
        }
        Ok(())
    }

    fn mean_channels(&self, raw: Feat<F>) -> Feat<F> {
        if self.arch.config.variational {
            raw.split_channels(self.arch.config.latent_channels).0
        } else {
            raw
        }
    }

    /// Posterior-mean latents for a batch.
    pub fn encode_feat(&self, x: &Feat<F>) -> Feat<F> {
        self.mean_channels(self.arch.encoder.infer(&self.params, x))
    }

    /// Unclamped decoder output for a batch of latents.
    pub fn decode_feat_raw(&self, z: &Feat<F>) -> Feat<F> {
        self.arch.decoder.infer(&self.params, z)
    }

    pub fn encode(&self, x: &Image) -> Result<Latent> {
        self.check_image(x)?;
        let z = self.encode_feat(&images_to_feat(&[x]));
        Latent::new(z.c, z.h, z.w, Latent::from_feat_sample(&z, 0).data)
    }

    pub fn encode_batch(&self, xs: &[&Image]) -> Result<Feat<F>> {
        for x in xs {
            self.check_image(x)?;
        }
        Ok(self.encode_feat(&images_to_feat(xs)))
    }

    pub fn decode(&self, z: &Latent) -> Result<Image> {
        let c = &self.arch.config;
        let expect = (c.latent_channels, c.latent_size(), c.latent_size());
        if z.shape() != expect {
            return Err(Error::Dimension(format!("latent {:?}, expected {:?}", z.shape(), expect)));
        }
        let out = self.decode_feat_raw(&Latent::batch_to_feat(&[z]));
        Ok(feat_to_images(&out).remove(0))
    }

    /// Clamped images for a batch of latents.
    pub fn decode_batch(&self, z: &Feat<F>) -> Vec<Image> {
        feat_to_images(&self.decode_feat_raw(z))
    }

    /// Weighted objective over a batch, with parameter gradients when `grads` is given.
    ///
    /// When `alphas` is `Some`, `images` must be `[B; R; blend]` stacked along
    /// the batch axis with `alphas.len()` samples per group, and the
    /// equivariance term is included. `noise` supplies the reparameterization
    /// draws of the variational head (ignored otherwise).
    pub fn objective(&self, images: &Feat<F>, alphas: Option<&[F]>, w: &LossWeights, noise: Option<&[F]>, mut grads: Option<&mut [F]>) -> LossParts {
        let arch = &self.arch;
        let p = &self.params;
        let lc = arch.config.latent_channels;
        let (raw, enc_cache) = arch.encoder.forward(p, images);
        let (mean, logvar) = if arch.config.variational {
            let (m, lv) = raw.split_channels(lc);
            (m, Some(lv))
        } else {
            (raw, None)
        };
        let mut parts = LossParts::default();
        let mut d_mean = Feat::zeros(mean.c, mean.n, mean.h, mean.w);
        let mut d_logvar = logvar.as_ref().map(|lv| Feat::zeros(lv.c, lv.n, lv.h, lv.w));
        let want_grad = grads.is_some();

        // Decoder input: reparameterized sample when variational.
        let (z, std_noise) = match (&logvar, noise) {
            (Some(lv), Some(eps)) => {
                let mut z = mean.clone();
                let mut stds = Vec::with_capacity(z.data.len());
                for ((zi, &l), &e) in z.data.iter_mut().zip(&lv.data).zip(eps) {
                    let s = (F::lit(0.5) * l).exp();
                    *zi += s * e;
                    stds.push((s, e));
                }
                (z, Some(stds))
            }
            _ => (mean.clone(), None),
        };

        if w.uses_decoder() {
            let (out, dec_cache) = arch.decoder.forward(p, &z);
            let mut d_out = Feat::zeros(out.c, out.n, out.h, out.w);
            let m = F::lit(out.data.len() as f64);
            let mut sq = Vec::with_capacity(out.data.len());
            for ((o, t), d) in out.data.iter().zip(&images.data).zip(d_out.data.iter_mut()) {
                let diff = *o - *t;
                sq.push((diff * diff).to_f64().unwrap_or(f64::NAN));
                *d = F::lit(2.0 * w.recon_pixel) * diff / m;
            }
            parts.pixel = pairwise_mean(&sq);
            if w.recon_perceptual > 0.0 {
                parts.perceptual = edge_l1(&out, images, want_grad.then_some(&mut d_out), w.recon_perceptual);
            }
            if let Some(g) = grads.as_deref_mut() {
                let dz = arch.decoder.backward(p, &dec_cache, d_out, g);
                // Chain through the reparameterization.
                match (&std_noise, &mut d_logvar) {
                    (Some(stds), Some(dlv)) => {
                        for (i, dzv) in dz.data.iter().enumerate() {
                            d_mean.data[i] += *dzv;
                            let (s, e) = stds[i];
                            dlv.data[i] += *dzv * e * s * F::lit(0.5);
                        }
                    }
                    _ => {
                        for (dm, dzv) in d_mean.data.iter_mut().zip(&dz.data) {
                            *dm += *dzv;
                        }
                    }
                }
            }
        }

        if let Some(alphas) = alphas {
            let n = alphas.len();
            assert_eq!(mean.n, 3 * n, "equivariance batch must be [B; R; blend]");
            let per = mean.c * mean.plane();
            let count = F::lit((n * per) as f64);
            let scale = F::lit(2.0 * w.equiv) / count;
            let mut sum = F::zero();
            for (i, &a) in alphas.iter().enumerate() {
                let one_minus = F::one() - a;
                for c in 0..mean.c {
                    let (zb, zr, zi) = (mean.slab(c, i), mean.slab(c, n + i), mean.slab(c, 2 * n + i));
                    let gaps: Vec<F> = (0..zb.len()).map(|j| zi[j] - (one_minus * zb[j] + a * zr[j])).collect();
                    for g in &gaps {
                        sum += *g * *g;
                    }
                    if want_grad {
                        let pl = mean.plane();
                        let base_b = (c * mean.n + i) * pl;
                        let base_r = (c * mean.n + n + i) * pl;
                        let base_i = (c * mean.n + 2 * n + i) * pl;
                        for (j, g) in gaps.iter().enumerate() {
                            let gs = *g * scale;
                            d_mean.data[base_i + j] += gs;
                            d_mean.data[base_b + j] -= one_minus * gs;
                            d_mean.data[base_r + j] -= a * gs;
                        }
                    }
                }
            }
            parts.equiv = (sum / count).to_f64().unwrap_or(f64::NAN);
        }

        if let Some(lv) = &logvar {
            if w.kl > 0.0 {
                let cnt = F::lit(lv.data.len() as f64);
                let half = F::lit(0.5);
                let mut kl = F::zero();
                for (i, (&m, &l)) in mean.data.iter().zip(&lv.data).enumerate() {
                    kl += half * (m * m + l.exp() - F::one() - l);
                    if want_grad {
                        let s = F::lit(w.kl) / cnt;
                        d_mean.data[i] += s * m;
                        if let Some(dlv) = d_logvar.as_mut() {
                            dlv.data[i] += s * half * (l.exp() - F::one());
                        }
                    }
                }
                parts.kl = (kl / cnt).to_f64().unwrap_or(f64::NAN);
            }
        }

        parts.total = w.recon_pixel * parts.pixel + w.recon_perceptual * parts.perceptual + w.equiv * parts.equiv + w.kl * parts.kl;

        if let Some(g) = grads.as_deref_mut() {
            let d_raw = match d_logvar {
                Some(dlv) => Feat::concat_channels(&d_mean, &dlv),
                None => d_mean,
            };
            arch.encoder.backward_params(p, &enc_cache, d_raw, g);
        }
        parts
    }

    /// `w.recon_pixel * MSE(D(E(x)), x) + w.recon_perceptual * P(D(E(x)), x)` and its gradient.
    pub fn recon_loss(&self, x: &Image, w: &LossWeights) -> Result<LossWithGrad<F>> {
        self.check_image(x)?;
        let w = LossWeights { equiv: 0.0, kl: 0.0, ..*w };
        let mut grad = vec![F::zero(); self.params.len()];
        let parts = self.objective(&images_to_feat(&[x]), None, &w, None, Some(&mut grad));
        Ok(LossWithGrad { value: parts.total, grad })
    }

    /// Mean squared equivariance gap over latent entries and its gradient.
    pub fn equiv_loss(&self, background: &Image, reflection: &Image, alpha: f32) -> Result<LossWithGrad<F>> {
        self.check_image(background)?;
        self.check_image(reflection)?;
        let mixed = blend(background, reflection, alpha)?;
        let images = images_to_feat(&[background, reflection, &mixed]);
        let w = LossWeights { recon_pixel: 0.0, recon_perceptual: 0.0, equiv: 1.0, kl: 0.0 };
        let mut grad = vec![F::zero(); self.params.len()];
        let parts = self.objective(&images, Some(&[F::lit(alpha as f64)]), &w, None, Some(&mut grad));
        Ok(LossWithGrad { value: parts.equiv, grad })
    }
}

/// Mean of `|gm(out) - gm(target)|` where `gm` is the forward-difference
/// gradient magnitude; accumulates `weight * d/d out` into `d_out`.
fn edge_l1<F: Real>(out: &Feat<F>, target: &Feat<F>, d_out: Option<&mut Feat<F>>, weight: f64) -> f64 {
    let (h, w) = (out.h, out.w);
    let count = out.c * out.n * (h - 1) * (w - 1);
    let scale = F::lit(weight / count as f64);
    let eps = F::lit(EDGE_EPS);
    let mut total = F::zero();
    let mut d_out = d_out;
    for ci in 0..out.c {
        for ni in 0..out.n {
            let o = out.slab(ci, ni);
            let t = target.slab(ci, ni);
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let i = y * w + x;
                    let (ogx, ogy) = (o[i + 1] - o[i], o[i + w] - o[i]);
                    let (tgx, tgy) = (t[i + 1] - t[i], t[i + w] - t[i]);
                    let om = (ogx * ogx + ogy * ogy + eps).sqrt();
                    let tm = (tgx * tgx + tgy * tgy + eps).sqrt();
                    let diff = om - tm;
                    total += diff.abs();
                    if let Some(d) = d_out.as_deref_mut() {
                        let sign = if diff > F::zero() {
                            F::one()
                        } else if diff < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        let s = sign * scale / om;
                        let slab = d.slab_mut(ci, ni);
                        slab[i + 1] += s * ogx;
                        slab[i + w] += s * ogy;
                        slab[i] -= s * (ogx + ogy);
                    }
                }
            }
        }
    }
    (total / F::lit(count as f64)).to_f64().unwrap_or(f64::NAN)
}

/// Perceptual proxy between two images: mean absolute difference of their
/// gradient-magnitude maps.
pub fn edge_distance(a: &Image, b: &Image) -> Result<f64> {
    crate::error::ensure_same_shape("edge_distance", a.shape(), b.shape())?;
    Ok(edge_l1::<f64>(&images_to_feat(&[a]), &images_to_feat(&[b]), None, 1.0))
}

/// Mean squared error between two images.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    crate::error::ensure_same_shape("mse", a.shape(), b.shape())?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n)
}

/// Stateless reconstruction objective on an explicit reconstruction.
pub fn recon_objective(reconstruction: &Image, target: &Image, w: &LossWeights) -> Result<f64> {
    Ok(w.recon_pixel * mse(reconstruction, target)? + w.recon_perceptual * edge_distance(reconstruction, target)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub arch: VaeConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { arch: VaeConfig::default(), adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() }, batch_size: 32, steps: 5000, seed: 0, grad_clip: 1.0 }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeLogRecord {
    pub step: u64,
    pub loss: LossParts,
    pub grad_norm: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainState {
    pub vae: Vae<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
}

impl VaeTrainState {
    pub fn fresh(cfg: &VaeTrainConfig) -> Result<Self> {
        let vae = Vae::new(cfg.arch.clone(), cfg.seed)?;
        let adam = Adam::new(cfg.adam, vae.params.len());
        Ok(Self { vae, adam, step: 0 })
    }

    pub fn to_checkpoint(&self, cfg: &VaeTrainConfig, weights: &LossWeights) -> Checkpoint {
        let mut arrays = params_to_arrays("param/", &self.vae.arch.layout, &self.vae.params);
        arrays.extend(adam_to_arrays(&self.adam));
        Checkpoint {
            arch_hash: self.vae.arch.fingerprint(),
            step: self.step,
            seed: cfg.seed,
            meta: serde_json::json!({
                "kind": "revae",
                "arch": self.vae.arch.config,
                "train": cfg,
                "weights": weights,
                "param_count": self.vae.params.len(),
            }),
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, adam: AdamConfig) -> Result<Self> {
        let vae = vae_from_checkpoint(ckpt)?;
        let adam = adam_from_arrays(ckpt, adam, vae.params.len())?;
        Ok(Self { vae, adam, step: ckpt.step })
    }
}

/// Restores the autoencoder weights from a checkpoint.
pub fn vae_from_checkpoint(ckpt: &Checkpoint) -> Result<Vae<f32>> {
    if ckpt.meta_str("kind") != Some("revae") {
        return Err(Error::Config("checkpoint is not an autoencoder checkpoint".into()));
    }
    let config: VaeConfig = serde_json::from_value(ckpt.meta["arch"].clone()).map_err(|e| Error::Config(e.to_string()))?;
    let arch = VaeArch::new(config)?;
    if arch.fingerprint() != ckpt.arch_hash {
        return Err(Error::Config("architecture hash mismatch".into()));
    }
    let params = params_from_arrays("param/", &arch.layout, ckpt)?;
    Ok(Vae { arch, params })
}

/// Trains until `cfg.steps`, starting from `state` (fresh when `None`).
///
/// Step `s` draws its batch, blend factors and noise from
/// `child_rng(cfg.seed, s)`, so resuming from a saved state reproduces an
/// uninterrupted run exactly. `on_step` sees every log record.
pub fn train_revae(
    corpus: &[LayeredSample],
    cfg: &VaeTrainConfig,
    weights: &LossWeights,
    state: Option<VaeTrainState>,
    mut on_step: impl FnMut(&VaeLogRecord),
) -> Result<(VaeTrainState, Vec<VaeLogRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    weights.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => VaeTrainState::fresh(cfg)?,
    };
    if state.vae.arch.config != cfg.arch {
        return Err(Error::Config("resume state architecture differs from config".into()));
    }
    let n = cfg.batch_size;
    let use_equiv = weights.equiv > 0.0;
    let mut log = Vec::new();
    let mut grads = vec![0.0f32; state.vae.params.len()];
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = child_rng(cfg.seed, step);
        let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..corpus.len())).collect();
        let alphas: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let mixes: Vec<Image> = picks
            .iter()
            .zip(&alphas)
            .map(|(&i, &a)| blend(&corpus[i].background, &corpus[i].reflection, a))
            .collect::<Result<_>>()?;
        let mut imgs: Vec<&Image> = picks.iter().map(|&i| &corpus[i].background).collect();
        imgs.extend(picks.iter().map(|&i| &corpus[i].reflection));
        imgs.extend(mixes.iter());
        let batch = images_to_feat::<f32>(&imgs);
        let noise = cfg.arch.variational.then(|| {
            let lat = cfg.arch.latent_size();
            normal_vec(&mut rng, cfg.arch.latent_channels * 3 * n * lat * lat)
        });
        grads.fill(0.0);
        let parts = state.vae.objective(&batch, use_equiv.then_some(&alphas[..]), weights, noise.as_deref(), Some(&mut grads));
        if !parts.total.is_finite() {
            return Err(Error::Training { step, detail: format!("non-finite loss {:?}", parts) });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        state.adam.step(&mut state.vae.params, &grads);
        if state.vae.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { step, detail: "non-finite parameters after update".into() });
        }
        state.step += 1;
        let record = VaeLogRecord { step, loss: parts, grad_norm };
        on_step(&record);
        log.push(record);
    }
    Ok((state, log))
}

/// Normalized equivariance gap statistics over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub mean: f64,
    pub max: f64,
    pub n: usize,
}

/// `|| E(I) - ((1 - a) E(B) + a E(R)) ||^2 / || E(I) ||^2` per sample.
pub fn equivariance_gaps(vae: &Vae<f32>, samples: &[LayeredSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let mut imgs: Vec<&Image> = chunk.iter().map(|s| &s.background).collect();
        imgs.extend(chunk.iter().map(|s| &s.reflection));
        imgs.extend(chunk.iter().map(|s| &s.observed));
        let z = vae.encode_batch(&imgs)?;
        let n = chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let (zb, zr, zi) = (z.sample(i), z.sample(n + i), z.sample(2 * n + i));
            let a = s.alpha as f64;
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..zi.len() {
                let target = (1.0 - a) * zb[j] as f64 + a * zr[j] as f64;
                let d = zi[j] as f64 - target;
                num += d * d;
                den += (zi[j] as f64).powi(2);
            }
            out.push(if den > 0.0 { num / den } else if num == 0.0 { 0.0 } else { f64::INFINITY });
        }
    }
    Ok(out)
}

pub fn equivariance_gap(vae: &Vae<f32>, samples: &[LayeredSample]) -> Result<GapStats> {
    if samples.is_empty() {
        return Err(Error::Domain("equivariance gap of an empty dataset".into()));
    }
    let gaps = equivariance_gaps(vae, samples)?;
    Ok(GapStats { mean: gaps.iter().sum::<f64>() / gaps.len() as f64, max: gaps.iter().copied().fold(0.0, f64::max), n: gaps.len() })
}

/// Total parameter norm, logged with checkpoints.
pub fn param_norm(vae: &Vae<f32>) -> f64 {
    l2_norm(&vae.params)
}
