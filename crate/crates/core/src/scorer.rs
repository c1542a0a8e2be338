//! Reference-free and oracle image scorers, selectable by name.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::depthnet::{DepthNet, DepthStatistic};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::rng::{fnv1a, split_seed};

/// Higher is better. Scores depend only on the candidate (and the scorer's
/// own fixed inputs), never on the other candidates of a batch.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, candidate: &Image) -> Result<f64>;

    fn score_batch(&self, candidates: &[&Image]) -> Result<Vec<f64>> {
        candidates.iter().map(|c| self.score(c)).collect()
    }
}

/// Depth statistic of the estimated depth map.
pub struct DepthScorer {
    net: DepthNet<f32>,
    statistic: DepthStatistic,
}

impl DepthScorer {
    pub fn new(net: DepthNet<f32>, statistic: DepthStatistic) -> Self {
        Self { net, statistic }
    }
}

impl Scorer for DepthScorer {
    fn name(&self) -> &str {
        "depth"
    }

    fn score(&self, candidate: &Image) -> Result<f64> {
        Ok(self.statistic.apply(&self.net.estimate_depth(candidate)?))
    }

    fn score_batch(&self, candidates: &[&Image]) -> Result<Vec<f64>> {
        Ok(self.net.estimate_batch(candidates)?.iter().map(|d| self.statistic.apply(d)).collect())
    }
}

/// PSNR against a known clean image.
pub struct OracleScorer {
    reference: Image,
}

impl OracleScorer {
    pub fn new(reference: Image) -> Self {
        Self { reference }
    }
}

impl Scorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, candidate: &Image) -> Result<f64> {
        psnr(candidate, &self.reference)
    }
}

/// Uniform score in `[0, 1)` hashed from the candidate's pixels and a seed.
pub struct RandomScorer {
    seed: u64,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl Scorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn score(&self, candidate: &Image) -> Result<f64> {
        let bytes: Vec<u8> = candidate.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok((split_seed(fnv1a(&bytes), self.seed) >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// What a scorer may be built from.
#[derive(Clone, Copy, Default)]
pub struct ScorerInputs<'a> {
    pub depthnet: Option<&'a DepthNet<f32>>,
    pub statistic: DepthStatistic,
    /// Ground truth, only available to the oracle.
    pub reference: Option<&'a Image>,
    pub seed: u64,
}

type Factory = Box<dyn Fn(&ScorerInputs<'_>) -> Result<Box<dyn Scorer>> + Send + Sync>;

/// Named scorer constructors.
pub struct ScorerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl fmt::Debug for ScorerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScorerRegistry").field("names", &self.names()).finish()
    }
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("depth", |inp| {
            let net = inp.depthnet.ok_or_else(|| Error::Config("depth scorer needs a depth network".into()))?;
            Ok(Box::new(DepthScorer::new(net.clone(), inp.statistic)))
        });
        r.register("oracle", |inp| {
            let reference = inp.reference.ok_or_else(|| Error::Config("oracle scorer needs a reference image".into()))?;
            Ok(Box::new(OracleScorer::new(reference.clone())))
        });
        r.register("random", |inp| Ok(Box::new(RandomScorer::new(inp.seed))));
        r
    }
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    /// Adds or replaces the scorer called `name`.
    pub fn register(&mut self, name: &str, factory: impl Fn(&ScorerInputs<'_>) -> Result<Box<dyn Scorer>> + Send + Sync + 'static) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, inputs: &ScorerInputs<'_>) -> Result<Box<dyn Scorer>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown scorer {name:?} (available: {})", self.names().join(", "))))?;
        f(inputs)
    }
}

/// Scorer selection as written in configs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Depth,
    Oracle,
    Random,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Depth => "depth",
            Self::Oracle => "oracle",
            Self::Random => "random",
        }
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" | "depth-mean" => Ok(Self::Depth),
            "oracle" | "oracle-psnr" => Ok(Self::Oracle),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown scorer {other:?} (depth, oracle, random)"))),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
