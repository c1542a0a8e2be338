//! Early-branching sampling: one velocity evaluation per candidate seed,
//! score the decoded clean-end estimates, and integrate only the winner.
//!
//! Branch `i` uses seed `split_seed(base_seed, i)`. Plain sampling is the
//! single-branch trajectory `split_seed(base_seed, 0)`, so `k = 1` produces the
//! same image as plain sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::{CallLedger, CondBundle, DenoiserModel, FlowState};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::revae::{Latent, Vae};
use crate::rng::split_seed;
use crate::scorer::{Scorer, ScorerKind};

/// Upper bound on the branch count.
pub const MAX_BRANCHES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebsConfig {
    pub k: usize,
    pub steps: usize,
    pub base_seed: u64,
    pub scorer: ScorerKind,
}

impl Default for DebsConfig {
    fn default() -> Self {
        Self { k: 4, steps: crate::denoiser::DEFAULT_SAMPLE_STEPS, base_seed: 42, scorer: ScorerKind::Depth }
    }
}

impl DebsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > MAX_BRANCHES {
            return Err(Error::Domain(format!("branch count {} outside 1..={MAX_BRANCHES}", self.k)));
        }
        if self.steps == 0 {
            return Err(Error::Domain("sampling needs at least one step".into()));
        }
        Ok(())
    }
}

pub fn branch_seeds(base_seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| split_seed(base_seed, i)).collect()
}

/// Index of the largest score; ties and NaNs resolve to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub strategy: String,
    pub scorer: String,
    pub k: usize,
    pub steps: usize,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    /// One score per candidate (previews for early branching, finals for full search).
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub ledger: CallLedger,
    /// Seconds; omitted from serialized reports that must be reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl ScoreReport {
    /// Copy without timing information.
    pub fn without_timing(&self) -> Self {
        Self { wall_time_s: None, ..self.clone() }
    }
}

/// Final image, the decoded candidates that were scored, and the report.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub image: Image,
    pub previews: Vec<Image>,
    pub report: ScoreReport,
}

fn start_branches(model: &DenoiserModel, vae: &Vae<f32>, seeds: &[u64], steps: usize) -> Vec<FlowState> {
    let s = vae.arch.config.latent_size();
    seeds.iter().map(|&seed| model.initial_state((model.config().latent_channels, s, s), seed, steps, false)).collect()
}

/// Runs the first Euler step for every branch; returns clean-end estimates.
fn first_steps(model: &DenoiserModel, states: &mut [FlowState], cond: &CondBundle, ledger: &mut CallLedger) -> Vec<Latent> {
    // One branch at a time: small batches of 8x8 latents gain nothing from stacking.
    let mut est = Vec::with_capacity(states.len());
    for s in states.iter_mut() {
        est.extend(model.euler_step(std::slice::from_mut(s), &[cond], ledger));
    }
    est
}

/// Early-branching sample: `steps + k - 1` velocity evaluations,
/// `k + 1` decodes, `k` scores.
pub fn debs_sample(model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig, scorer: &dyn Scorer) -> Result<SampleOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let cond = model.condition(vae, observed)?;
    let seeds = branch_seeds(cfg.base_seed, cfg.k);
    let mut ledger = CallLedger::default();
    let mut states = start_branches(model, vae, &seeds, cfg.steps);
    let estimates = first_steps(model, &mut states, &cond, &mut ledger);
    let previews = model.decode(vae, &estimates.iter().collect::<Vec<_>>(), &mut ledger);
    let scores = scorer.score_batch(&previews.iter().collect::<Vec<_>>())?;
    ledger.scorer_calls += scores.len() as u64;
    let chosen = argmax_lowest(&scores);
    let mut winner = [states.swap_remove(chosen)];
    model.integrate(&mut winner, &[&cond], &mut ledger);
    let image = model.decode(vae, &[&winner[0].latent], &mut ledger).remove(0);
    let report = ScoreReport {
        strategy: "debs".into(),
        scorer: scorer.name().into(),
        k: cfg.k,
        steps: cfg.steps,
        base_seed: cfg.base_seed,
        seeds,
        scores,
        chosen,
        ledger,
        wall_time_s: Some(clock.elapsed().as_secs_f64()),
    };
    Ok(SampleOutcome { image, previews, report })
}

/// Integrates every branch to the end and keeps the best final image:
/// `k * steps` velocity evaluations.
pub fn full_search_reference(model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig, scorer: &dyn Scorer) -> Result<SampleOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let cond = model.condition(vae, observed)?;
    let seeds = branch_seeds(cfg.base_seed, cfg.k);
    let mut ledger = CallLedger::default();
    let mut states = start_branches(model, vae, &seeds, cfg.steps);
    for s in states.iter_mut() {
        model.integrate(std::slice::from_mut(s), &[&cond], &mut ledger);
    }
    let finals = model.decode(vae, &states.iter().map(|s| &s.latent).collect::<Vec<_>>(), &mut ledger);
    let scores = scorer.score_batch(&finals.iter().collect::<Vec<_>>())?;
    ledger.scorer_calls += scores.len() as u64;
    let chosen = argmax_lowest(&scores);
    let report = ScoreReport {
        strategy: "full-search".into(),
        scorer: scorer.name().into(),
        k: cfg.k,
        steps: cfg.steps,
        base_seed: cfg.base_seed,
        seeds,
        scores,
        chosen,
        ledger,
        wall_time_s: Some(clock.elapsed().as_secs_f64()),
    };
    let image = finals[chosen].clone();
    Ok(SampleOutcome { image, previews: finals, report })
}

/// Single trajectory from `split_seed(base_seed, 0)`; ignores `k` and the scorer.
pub fn plain_sample(model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig) -> Result<SampleOutcome> {
    if cfg.steps == 0 {
        return Err(Error::Domain("sampling needs at least one step".into()));
    }
    let clock = Instant::now();
    let seed = split_seed(cfg.base_seed, 0);
    let (image, ledger) = model.sample(vae, observed, seed, cfg.steps)?;
    let report = ScoreReport {
        strategy: "plain".into(),
        scorer: "none".into(),
        k: 1,
        steps: cfg.steps,
        base_seed: cfg.base_seed,
        seeds: vec![seed],
        scores: Vec::new(),
        chosen: 0,
        ledger,
        wall_time_s: Some(clock.elapsed().as_secs_f64()),
    };
    Ok(SampleOutcome { image, previews: Vec::new(), report })
}

/// Scores of the one-step previews and of the finished trajectories for the
/// same `k` branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchScores {
    pub preview: Vec<f64>,
    pub last: Vec<f64>,
}

pub fn preview_and_final_scores(model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig, scorer: &dyn Scorer) -> Result<BranchScores> {
    cfg.validate()?;
    let cond = model.condition(vae, observed)?;
    let seeds = branch_seeds(cfg.base_seed, cfg.k);
    let mut ledger = CallLedger::default();
    let mut states = start_branches(model, vae, &seeds, cfg.steps);
    let conds = vec![&cond; states.len()];
    let est = model.euler_step(&mut states, &conds, &mut ledger);
    let previews = model.decode(vae, &est.iter().collect::<Vec<_>>(), &mut ledger);
    model.integrate(&mut states, &conds, &mut ledger);
    let finals = model.decode(vae, &states.iter().map(|s| &s.latent).collect::<Vec<_>>(), &mut ledger);
    Ok(BranchScores {
        preview: scorer.score_batch(&previews.iter().collect::<Vec<_>>())?,
        last: scorer.score_batch(&finals.iter().collect::<Vec<_>>())?,
    })
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `0` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dimension(format!("rank correlation of {} and {} values", a.len(), b.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    Ok(if va == 0.0 || vb == 0.0 { 0.0 } else { cov / (va * vb).sqrt() })
}

/// A way of turning an observed image into a restored one.
pub trait SamplingStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn run(&self, model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig, scorer: &dyn Scorer) -> Result<SampleOutcome>;
}

pub struct Plain;
pub struct EarlyBranching;
pub struct FullSearch;

impl SamplingStrategy for Plain {
    fn name(&self) -> &str {
        "plain"
    }

    fn run(&self, model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig, _: &dyn Scorer) -> Result<SampleOutcome> {
        plain_sample(model, vae, observed, cfg)
    }
}

impl SamplingStrategy for EarlyBranching {
    fn name(&self) -> &str {
        "debs"
    }

    fn run(&self, model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig, scorer: &dyn Scorer) -> Result<SampleOutcome> {
        debs_sample(model, vae, observed, cfg, scorer)
    }
}

impl SamplingStrategy for FullSearch {
    fn name(&self) -> &str {
        "full-search"
    }

    fn run(&self, model: &DenoiserModel, vae: &Vae<f32>, observed: &Image, cfg: &DebsConfig, scorer: &dyn Scorer) -> Result<SampleOutcome> {
        full_search_reference(model, vae, observed, cfg, scorer)
    }
}

pub struct StrategyRegistry {
    entries: BTreeMap<String, Box<dyn SamplingStrategy>>,
}

impl fmt::Debug for StrategyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StrategyRegistry").field("names", &self.names()).finish()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(Plain));
        r.register(Box::new(EarlyBranching));
        r.register(Box::new(FullSearch));
        r
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, s: Box<dyn SamplingStrategy>) {
        self.entries.insert(s.name().to_string(), s);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn SamplingStrategy> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown sampler {name:?} (available: {})", self.names().join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserTrainConfig, DenoiserTrainState, FlowCorpus, PromptInit};
    use crate::metrics::psnr;
    use crate::nn::AdamConfig;
    use crate::revae::VaeConfig;
    use crate::scene::{synth_scene, LayeredSample, SceneParams};
    use crate::scorer::{OracleScorer, RandomScorer};
    use proptest::prelude::*;

    fn scene(seed: u64) -> LayeredSample {
        synth_scene(seed, &SceneParams { image_size: 16, ..SceneParams::default() }).unwrap()
    }

    fn fixture() -> (DenoiserModel, Vae<f32>) {
        let vae = Vae::new(VaeConfig { image_size: 16, widths: [4, 6, 8], ..VaeConfig::default() }, 2).unwrap();
        let samples: Vec<_> = (0..16).map(scene).collect();
        let corpus = FlowCorpus::encode(&vae, &samples).unwrap();
        let cfg = DenoiserTrainConfig {
            arch: DenoiserConfig { channels: 8, blocks: 2, time_dim: 16, task_dim: 8, ..DenoiserConfig::default() },
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            batch_size: 8,
            steps: 30,
            prompt: PromptInit::Learned,
            ..DenoiserTrainConfig::default()
        };
        let (st, _) = crate::denoiser::train_denoiser(&corpus, &cfg, None, |_| {}).unwrap();
        assert_ne!(st.model, DenoiserTrainState::fresh(&cfg, corpus.stats.clone()).unwrap().model);
        (st.model, vae)
    }

    #[test]
    fn ledger_is_exact() {
        let (model, vae) = fixture();
        let s = scene(40);
        let scorer = RandomScorer::new(3);
        for k in [1usize, 2, 4, 8, 16] {
            for steps in [1usize, 3, 7] {
                let cfg = DebsConfig { k, steps, base_seed: 5, scorer: ScorerKind::Random };
                let out = debs_sample(&model, &vae, &s.observed, &cfg, &scorer).unwrap();
                let l = out.report.ledger;
                assert_eq!(l.denoiser_evals, (steps + k - 1) as u64);
                assert_eq!(l.decoder_calls, (k + 1) as u64);
                assert_eq!(l.scorer_calls, k as u64);
                assert_eq!(out.previews.len(), k);
                assert_eq!(out.report.chosen, argmax_lowest(&out.report.scores));
                let full = full_search_reference(&model, &vae, &s.observed, &cfg, &scorer).unwrap();
                assert_eq!(full.report.ledger.denoiser_evals, (k * steps) as u64);
            }
        }
        let cfg = DebsConfig { k: 4, steps: 28, base_seed: 0, scorer: ScorerKind::Random };
        assert_eq!(debs_sample(&model, &vae, &s.observed, &cfg, &scorer).unwrap().report.ledger.denoiser_evals, 31);
    }

    #[test]
    fn single_branch_matches_plain_sampling() {
        let (model, vae) = fixture();
        let s = scene(41);
        let scorer = RandomScorer::new(0);
        let cfg = DebsConfig { k: 1, steps: 6, base_seed: 42, scorer: ScorerKind::Random };
        let d = debs_sample(&model, &vae, &s.observed, &cfg, &scorer).unwrap();
        let p = plain_sample(&model, &vae, &s.observed, &cfg).unwrap();
        let direct = model.sample(&vae, &s.observed, split_seed(42, 0), 6).unwrap().0;
        assert_eq!(d.image, direct);
        assert_eq!(p.image, direct);
        assert_eq!(d.report.ledger.denoiser_evals, 6);
        let f = full_search_reference(&model, &vae, &s.observed, &cfg, &scorer).unwrap();
        assert_eq!(f.image, direct);
    }

    #[test]
    fn winner_resumes_from_its_own_branch() {
        let (model, vae) = fixture();
        let s = scene(42);
        let cfg = DebsConfig { k: 5, steps: 4, base_seed: 9, scorer: ScorerKind::Oracle };
        let oracle = OracleScorer::new(s.background.clone());
        let d = debs_sample(&model, &vae, &s.observed, &cfg, &oracle).unwrap();
        let seed = d.report.seeds[d.report.chosen];
        assert_eq!(d.image, model.sample(&vae, &s.observed, seed, 4).unwrap().0);
        let again = debs_sample(&model, &vae, &s.observed, &cfg, &oracle).unwrap();
        assert_eq!(again.image, d.image);
        assert_eq!(again.report.without_timing(), d.report.without_timing());
        // previews are the decoded clean-end estimates
        let (preview, _) = model.one_step_preview(&vae, &s.observed, d.report.seeds[0]).unwrap();
        assert_eq!(d.previews[0], preview);
    }

    #[test]
    fn full_search_dominates_with_oracle() {
        let (model, vae) = fixture();
        for i in 0..4 {
            let s = scene(50 + i);
            let oracle = OracleScorer::new(s.background.clone());
            let cfg = DebsConfig { k: 4, steps: 5, base_seed: i, scorer: ScorerKind::Oracle };
            let d = debs_sample(&model, &vae, &s.observed, &cfg, &oracle).unwrap();
            let f = full_search_reference(&model, &vae, &s.observed, &cfg, &oracle).unwrap();
            assert!(psnr(&f.image, &s.background).unwrap() >= psnr(&d.image, &s.background).unwrap());
        }
    }

    #[test]
    fn invalid_branch_counts() {
        let (model, vae) = fixture();
        let s = scene(1);
        let sc = RandomScorer::new(0);
        for cfg in [DebsConfig { k: 0, ..Default::default() }, DebsConfig { steps: 0, ..Default::default() }, DebsConfig { k: 65, ..Default::default() }] {
            assert!(matches!(debs_sample(&model, &vae, &s.observed, &cfg, &sc), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn registry_dispatches_by_name() {
        let (model, vae) = fixture();
        let s = scene(2);
        let sc = RandomScorer::new(0);
        let reg = StrategyRegistry::default();
        assert_eq!(reg.names(), vec!["debs", "full-search", "plain"]);
        let cfg = DebsConfig { k: 3, steps: 2, ..Default::default() };
        for name in reg.names() {
            let out = reg.get(name).unwrap().run(&model, &vae, &s.observed, &cfg, &sc).unwrap();
            assert_eq!(out.report.strategy, name);
        }
        assert!(reg.get("beam").is_err());
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ranks with ties: [0.5, 0.5, 2] vs [0, 1, 2]
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12, "{r}");
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn argmax_is_first_maximum(v in proptest::collection::vec(-5i32..5, 1..20)) {
            let s: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let j = argmax_lowest(&s);
            let max = s.iter().copied().fold(f64::MIN, f64::max);
            prop_assert_eq!(s[j], max);
            prop_assert!(s[..j].iter().all(|&x| x < max));
        }

        #[test]
        fn spearman_is_bounded_and_symmetric(a in proptest::collection::vec(-100.0f64..100.0, 2..30), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.37 + (split_seed(seed, i as u64) % 50) as f64).collect();
            let r = spearman(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert!((r - spearman(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
