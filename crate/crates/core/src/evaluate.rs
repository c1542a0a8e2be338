//! Dataset-level evaluation against clean backgrounds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::debs::{DebsConfig, SamplingStrategy};
use crate::denoiser::{CallLedger, DenoiserModel};
use crate::depthnet::{DepthNet, DepthStatistic};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{masked_metric, pairwise_mean, psnr, ssim, Metric};
use crate::revae::Vae;
use crate::rng::split_seed;
use crate::scene::LayeredSample;
use crate::scorer::{ScorerInputs, ScorerRegistry};

/// How masked SSIM is aggregated; written into every report.
pub const MASKED_SSIM_RULE: &str = "window-coverage-weighted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// `None` when the sample has no reflection region.
    pub masked_psnr: Option<f64>,
    pub masked_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Means over samples with a nonempty mask; absent when none has one.
    pub masked_psnr: Option<f64>,
    pub masked_ssim: Option<f64>,
    pub n_samples: usize,
    pub n_masked: usize,
    pub masked_ssim_rule: String,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn sample_metrics(index: usize, output: &Image, sample: &LayeredSample) -> Result<SampleMetrics> {
    let gt = &sample.background;
    let (masked_psnr, masked_ssim) = if sample.mask.is_empty() {
        (None, None)
    } else {
        (Some(masked_metric(output, gt, &sample.mask, Metric::Psnr)?), Some(masked_metric(output, gt, &sample.mask, Metric::Ssim)?))
    };
    Ok(SampleMetrics { index, psnr: psnr(output, gt)?, ssim: ssim(output, gt)?, masked_psnr, masked_ssim })
}

impl MetricReport {
    pub fn from_samples(label: &str, per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Domain("no samples to report".into()));
        }
        let col = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| -> Vec<f64> { per_sample.iter().filter_map(f).collect() };
        let mp = col(&|s| s.masked_psnr);
        let ms = col(&|s| s.masked_ssim);
        Ok(Self {
            label: label.to_string(),
            psnr: pairwise_mean(&col(&|s| Some(s.psnr))),
            ssim: pairwise_mean(&col(&|s| Some(s.ssim))),
            masked_psnr: (!mp.is_empty()).then(|| pairwise_mean(&mp)),
            masked_ssim: (!ms.is_empty()).then(|| pairwise_mean(&ms)),
            n_samples: per_sample.len(),
            n_masked: mp.len(),
            masked_ssim_rule: MASKED_SSIM_RULE.to_string(),
            per_sample,
        })
    }

    /// Metrics of `outputs[i]` against `samples[i].background`.
    pub fn compare(label: &str, outputs: &[&Image], samples: &[LayeredSample]) -> Result<Self> {
        if outputs.len() != samples.len() {
            return Err(Error::Dimension(format!("{} outputs for {} samples", outputs.len(), samples.len())));
        }
        let rows = outputs.iter().zip(samples).enumerate().map(|(i, (o, s))| sample_metrics(i, o, s)).collect::<Result<_>>()?;
        Self::from_samples(label, rows)
    }

    /// The observed images themselves scored as restorations.
    pub fn input_baseline(samples: &[LayeredSample]) -> Result<Self> {
        Self::compare("Input", &samples.iter().map(|s| &s.observed).collect::<Vec<_>>(), samples)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,psnr,ssim,masked_psnr,masked_ssim\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for s in &self.per_sample {
            let _ = writeln!(out, "{},{:.6},{:.6},{},{}", s.index, s.psnr, s.ssim, opt(s.masked_psnr), opt(s.masked_ssim));
        }
        out
    }
}

/// Aligned plain-text table, one row per report.
pub fn format_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>8}  {:>7}  {:>8}  {:>7}  {:>5}\n", "method", "PSNR", "SSIM", "mPSNR", "mSSIM", "n");
    let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>7.4}  {:>8}  {:>7}  {:>5}",
            r.label,
            r.psnr,
            r.ssim,
            opt(r.masked_psnr, 2),
            opt(r.masked_ssim, 4),
            r.n_samples
        );
    }
    out
}

/// Everything needed to restore an observed image.
pub struct Pipeline<'a> {
    pub vae: &'a Vae<f32>,
    pub model: &'a DenoiserModel,
    pub strategy: &'a dyn SamplingStrategy,
    pub sampling: DebsConfig,
    pub depthnet: Option<&'a DepthNet<f32>>,
    pub statistic: DepthStatistic,
    pub scorers: &'a ScorerRegistry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub outputs: Vec<Image>,
    pub ledger: CallLedger,
}

impl Pipeline<'_> {
    /// Restores `sample.observed` from `base_seed`; the oracle scorer sees
    /// `sample.background`.
    pub fn restore(&self, sample: &LayeredSample, base_seed: u64) -> Result<crate::debs::SampleOutcome> {
        let inputs = ScorerInputs { depthnet: self.depthnet, statistic: self.statistic, reference: Some(&sample.background), seed: base_seed };
        let scorer = if self.strategy.name() == "plain" {
            // unused by plain sampling
            self.scorers.build("random", &inputs)?
        } else {
            self.scorers.build(self.sampling.scorer.as_str(), &inputs)?
        };
        let cfg = DebsConfig { base_seed, ..self.sampling.clone() };
        self.strategy.run(self.model, self.vae, &sample.observed, &cfg, scorer.as_ref())
    }

    /// Sample `i` is restored from base seed `split_seed(sampling.base_seed, i)`,
    /// so no two images share starting noise.
    pub fn evaluate(&self, label: &str, samples: &[LayeredSample]) -> Result<Evaluation> {
        let mut outputs = Vec::with_capacity(samples.len());
        let mut ledger = CallLedger::default();
        for (i, s) in samples.iter().enumerate() {
            let out = self.restore(s, split_seed(self.sampling.base_seed, i as u64))?;
            ledger += out.report.ledger;
            outputs.push(out.image);
        }
        let report = MetricReport::compare(label, &outputs.iter().collect::<Vec<_>>(), samples)?;
        Ok(Evaluation { report, outputs, ledger })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Mask;
    use crate::metrics::PSNR_CAP_DB;
    use crate::scene::{synth_scene, SceneParams};

    fn samples(n: u64) -> Vec<LayeredSample> {
        (0..n).map(|i| synth_scene(i, &SceneParams { image_size: 32, ..SceneParams::default() }).unwrap()).collect()
    }

    #[test]
    fn perfect_outputs_hit_the_cap() {
        let s = samples(3);
        let r = MetricReport::compare("oracle", &s.iter().map(|x| &x.background).collect::<Vec<_>>(), &s).unwrap();
        assert_eq!(r.psnr, PSNR_CAP_DB);
        assert!((r.ssim - 1.0).abs() < 1e-9);
        assert_eq!(r.masked_psnr, Some(PSNR_CAP_DB));
        assert_eq!(r.n_samples, 3);
    }

    #[test]
    fn input_baseline_is_deterministic_and_finite() {
        let s = samples(4);
        let a = MetricReport::input_baseline(&s).unwrap();
        assert_eq!(a, MetricReport::input_baseline(&s).unwrap());
        assert_eq!(a.label, "Input");
        assert!(a.psnr.is_finite() && a.psnr < PSNR_CAP_DB);
        assert!(a.masked_psnr.unwrap() <= PSNR_CAP_DB);
        assert_eq!(a.masked_ssim_rule, MASKED_SSIM_RULE);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), a);
    }

    #[test]
    fn empty_masks_are_left_out_of_masked_means() {
        let mut s = samples(2);
        s[1].mask = Mask::new(32, 32, vec![false; 32 * 32]).unwrap();
        let r = MetricReport::input_baseline(&s).unwrap();
        assert_eq!(r.n_masked, 1);
        assert_eq!(r.per_sample[1].masked_psnr, None);
        assert_eq!(r.masked_psnr, r.per_sample[0].masked_psnr);
        s[0].mask = s[1].mask.clone();
        let none = MetricReport::input_baseline(&s).unwrap();
        assert_eq!((none.masked_psnr, none.n_masked), (None, 0));
        assert!(format_table(&[none]).contains(" - "));
    }

    #[test]
    fn table_and_csv_layout() {
        let s = samples(2);
        let r = MetricReport::input_baseline(&s).unwrap();
        let table = format_table(&[r.clone()]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("index,psnr,ssim,masked_psnr,masked_ssim"));
        assert!(MetricReport::compare("x", &[], &s).is_err());
    }
}
