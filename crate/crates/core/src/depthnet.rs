//! Small monocular depth regressor.
//!
//! A three-stage strided encoder and a two-stage upsampling decoder predict
//! log-depth at half resolution; a final nearest upsample brings it to image
//! resolution. Depth is the exponential of the prediction, so it is strictly
//! positive by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{adam_from_arrays, adam_to_arrays, params_from_arrays, params_to_arrays, Checkpoint};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::metrics::pairwise_mean;
use crate::nn::{clip_grad_norm, images_to_feat, Adam, AdamConfig, Conv2d, Feat, Op, ParamLayout, Real, Seq};
use crate::rng::{child_rng, fnv1a};
use crate::scene::LayeredSample;

/// Log-depth predictions are clamped to `±LOG_DEPTH_LIMIT` before exponentiating.
pub const LOG_DEPTH_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthNetConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub encoder_widths: [usize; 3],
    pub decoder_widths: [usize; 2],
    /// Added to the raw output; the network learns log-depth relative to it.
    pub log_offset: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self { image_size: 64, image_channels: 3, encoder_widths: [16, 32, 48], decoder_widths: [24, 12], log_offset: 8f64.ln() }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("depth image_size {} must be a positive multiple of 8", self.image_size)));
        }
        if self.image_channels == 0 || self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::Config("depth network widths must be positive".into()));
        }
        if !self.log_offset.is_finite() {
            return Err(Error::Config("log_offset must be finite".into()));
        }
        Ok(())
    }
}

/// Reduction of a depth map to one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthStatistic {
    #[default]
    Mean,
    Median,
}

impl DepthStatistic {
    pub fn apply(self, d: &DepthMap) -> f64 {
        match self {
            Self::Mean => d.mean(),
            Self::Median => d.median(),
        }
    }
}

impl std::str::FromStr for DepthStatistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            other => Err(Error::Config(format!("unknown depth statistic {other:?} (mean, median)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNetArch {
    pub config: DepthNetConfig,
    pub layout: ParamLayout,
    pub net: Seq,
}

impl DepthNetArch {
    pub fn new(config: DepthNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let [e1, e2, e3] = config.encoder_widths;
        let [d1, d2] = config.decoder_widths;
        let mut net = Seq::new();
        net.push(Op::Conv(Conv2d::new(&mut layout, "enc1", config.image_channels, e1, 3, 2, 1)))
            .push(Op::Silu)
            .push(Op::Conv(Conv2d::new(&mut layout, "enc2", e1, e2, 3, 2, 1)))
            .push(Op::Silu)
            .push(Op::Conv(Conv2d::new(&mut layout, "enc3", e2, e3, 3, 2, 1)))
            .push(Op::Silu)
            .push(Op::Up2)
            .push(Op::Conv(Conv2d::new(&mut layout, "dec1", e3, d1, 3, 1, 1)))
            .push(Op::Silu)
            .push(Op::Up2)
            .push(Op::Conv(Conv2d::new(&mut layout, "dec2", d1, d2, 3, 1, 1)))
            .push(Op::Silu)
            .push(Op::Conv(Conv2d::new(&mut layout, "out", d2, 1, 3, 1, 1)))
            .push(Op::Up2);
        Ok(Self { config, layout, net })
    }

    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(&self.config).expect("config serializes");
        self.layout.fingerprint() ^ fnv1a(text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNet<F = f32> {
    pub arch: DepthNetArch,
    pub params: Vec<F>,
}

impl<F: Real> DepthNet<F> {
    pub fn new(config: DepthNetConfig, seed: u64) -> Result<Self> {
        let arch = DepthNetArch::new(config)?;
        let params = arch.layout.init(&mut child_rng(seed, u64::MAX));
        Ok(Self { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        let c = &self.arch.config;
        if x.shape() != (c.image_size, c.image_size, c.image_channels) {
            return Err(Error::Dimension(format!(
                "depth network expects {0}x{0}x{1}, got {2:?}",
                c.image_size,
                c.image_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Log-depth for a batch, `[1][n][h][w]`.
    pub fn log_depth(&self, x: &Feat<F>) -> Feat<F> {
        let mut y = self.arch.net.infer(&self.params, x);
        let off = F::lit(self.arch.config.log_offset);
        y.data.iter_mut().for_each(|v| *v += off);
        y
    }

    pub fn estimate_depth(&self, x: &Image) -> Result<DepthMap> {
        Ok(self.estimate_batch(&[x])?.remove(0))
    }

    pub fn estimate_batch(&self, xs: &[&Image]) -> Result<Vec<DepthMap>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(32) {
            for x in chunk {
                self.check_image(x)?;
            }
            let y = self.log_depth(&images_to_feat(chunk));
            for i in 0..y.n {
                let d = y
                    .slab(0, i)
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(0.0).clamp(-LOG_DEPTH_LIMIT, LOG_DEPTH_LIMIT).exp() as f32)
                    .collect();
                out.push(DepthMap::new(y.h, y.w, d)?);
            }
        }
        Ok(out)
    }

    /// Mean squared log-depth error; `target` holds log-depth in `[1][n][h][w]`.
    pub fn loss(&self, x: &Feat<F>, target: &Feat<F>, grads: Option<&mut [F]>) -> f64 {
        let (mut y, tape) = self.arch.net.forward(&self.params, x);
        assert!(y.same_shape(target), "depth target shape");
        let off = F::lit(self.arch.config.log_offset);
        let count = F::lit(y.data.len() as f64);
        let mut sq = Vec::with_capacity(y.data.len());
        for (o, t) in y.data.iter_mut().zip(&target.data) {
            let e = *o + off - *t;
            sq.push((e * e).to_f64().unwrap_or(f64::NAN));
            *o = F::lit(2.0) * e / count;
        }
        if let Some(g) = grads {
            self.arch.net.backward_params(&self.params, &tape, y, g);
        }
        pairwise_mean(&sq)
    }
}

/// `[1][n][h][w]` log-depth targets.
pub fn log_depth_targets<F: Real>(maps: &[&DepthMap]) -> Feat<F> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut out = Feat::zeros(1, maps.len(), h, w);
    for (i, m) in maps.iter().enumerate() {
        for (d, s) in out.slab_mut(0, i).iter_mut().zip(m.data()) {
            *d = F::lit((*s as f64).ln());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthTrainConfig {
    pub arch: DepthNetConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub grad_clip: f64,
    pub statistic: DepthStatistic,
}

impl Default for DepthTrainConfig {
    fn default() -> Self {
        Self {
            arch: DepthNetConfig::default(),
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            batch_size: 16,
            steps: 1500,
            seed: 0,
            grad_clip: 1.0,
            statistic: DepthStatistic::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthLogRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthTrainState {
    pub net: DepthNet<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
}

impl DepthTrainState {
    pub fn fresh(cfg: &DepthTrainConfig) -> Result<Self> {
        let net = DepthNet::new(cfg.arch.clone(), cfg.seed)?;
        let adam = Adam::new(cfg.adam, net.params.len());
        Ok(Self { net, adam, step: 0 })
    }

    pub fn to_checkpoint(&self, cfg: &DepthTrainConfig) -> Checkpoint {
        let mut arrays = params_to_arrays("param/", &self.net.arch.layout, &self.net.params);
        arrays.extend(adam_to_arrays(&self.adam));
        Checkpoint {
            arch_hash: self.net.arch.fingerprint(),
            step: self.step,
            seed: cfg.seed,
            meta: serde_json::json!({
                "kind": "depthnet",
                "arch": self.net.arch.config,
                "train": cfg,
                "statistic": cfg.statistic,
                "param_count": self.net.params.len(),
            }),
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, adam: AdamConfig) -> Result<Self> {
        let net = depthnet_from_checkpoint(ckpt)?;
        let adam = adam_from_arrays(ckpt, adam, net.params.len())?;
        Ok(Self { net, adam, step: ckpt.step })
    }
}

pub fn depthnet_from_checkpoint(ckpt: &Checkpoint) -> Result<DepthNet<f32>> {
    if ckpt.meta_str("kind") != Some("depthnet") {
        return Err(Error::Config("checkpoint is not a depth network checkpoint".into()));
    }
    let config: DepthNetConfig = serde_json::from_value(ckpt.meta["arch"].clone()).map_err(|e| Error::Config(e.to_string()))?;
    let arch = DepthNetArch::new(config)?;
    if arch.fingerprint() != ckpt.arch_hash {
        return Err(Error::Config("architecture hash mismatch".into()));
    }
    let params = params_from_arrays("param/", &arch.layout, ckpt)?;
    Ok(DepthNet { arch, params })
}

/// Regresses log-depth of clean backgrounds. Step `s` draws its batch from
/// `child_rng(cfg.seed, s)`.
pub fn train_depthnet(
    corpus: &[LayeredSample],
    cfg: &DepthTrainConfig,
    state: Option<DepthTrainState>,
    mut on_step: impl FnMut(&DepthLogRecord),
) -> Result<(DepthTrainState, Vec<DepthLogRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut state = match state {
        Some(s) => s,
        None => DepthTrainState::fresh(cfg)?,
    };
    if state.net.arch.config != cfg.arch {
        return Err(Error::Config("resume state architecture differs from config".into()));
    }
    for s in corpus {
        state.net.check_image(&s.background)?;
    }
    let mut grads = vec![0.0f32; state.net.params.len()];
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = child_rng(cfg.seed, step);
        let picks: Vec<&LayeredSample> = (0..cfg.batch_size).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
        let x = images_to_feat::<f32>(&picks.iter().map(|s| &s.background).collect::<Vec<_>>());
        let target = log_depth_targets::<f32>(&picks.iter().map(|s| &s.depth).collect::<Vec<_>>());
        grads.fill(0.0);
        let loss = state.net.loss(&x, &target, Some(&mut grads));
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("non-finite depth loss {loss}") });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        state.adam.step(&mut state.net.params, &grads);
        state.step += 1;
        let record = DepthLogRecord { step, loss, grad_norm };
        on_step(&record);
        log.push(record);
    }
    Ok((state, log))
}

/// Root-mean-square log-depth error over the backgrounds of `samples`.
pub fn log_depth_rmse(net: &DepthNet<f32>, samples: &[LayeredSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples to evaluate".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(32) {
        let pred = net.estimate_batch(&chunk.iter().map(|s| &s.background).collect::<Vec<_>>())?;
        for (p, s) in pred.iter().zip(chunk) {
            for (a, b) in p.data().iter().zip(s.depth.data()) {
                sum += ((*a as f64).ln() - (*b as f64).ln()).powi(2);
                count += 1;
            }
        }
    }
    Ok((sum / count as f64).sqrt())
}

/// Fraction of samples whose clean background gets a strictly larger depth
/// statistic than the mixture of the same background with its reflection at `alpha`.
pub fn clean_deeper_fraction(net: &DepthNet<f32>, samples: &[LayeredSample], alpha: f32, stat: DepthStatistic) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples to evaluate".into()));
    }
    let mut wins = 0usize;
    for chunk in samples.chunks(32) {
        let mixes: Vec<Image> = chunk.iter().map(|s| crate::scene::blend(&s.background, &s.reflection, alpha)).collect::<Result<_>>()?;
        let clean = net.estimate_batch(&chunk.iter().map(|s| &s.background).collect::<Vec<_>>())?;
        let mixed = net.estimate_batch(&mixes.iter().collect::<Vec<_>>())?;
        wins += clean.iter().zip(&mixed).filter(|(c, m)| stat.apply(c) > stat.apply(m)).count();
    }
    Ok(wins as f64 / samples.len() as f64)
}
