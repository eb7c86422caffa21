//! Bayesian Fay-Herriot models with and without variance smoothing.

mod diagnostics;
mod model;
mod sampler;
mod summary;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use diagnostics::{bulk_ess, split_rhat, Diagnostics};
pub use model::{
    area_variance_loglik, log_posterior, AreaDesign, FitData, ModelParams, VarianceLatentParams,
};
pub use sampler::{fit, McmcConfig, PosteriorDraws};
pub use summary::{rank_probabilities, summarize_posterior, AreaSummary, Interval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingDist {
    Simple,
    Sasw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarianceLatent {
    Structured,
    Unstructured,
}

/// Model variants. Standard and oracle plug a fixed variance into the
/// mean likelihood; the smooth variants model `sigma^2_i` jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelVariant {
    Standard,
    Oracle,
    Smooth { dist: SamplingDist, latent: VarianceLatent },
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Standard,
        ModelVariant::Oracle,
        ModelVariant::Smooth { dist: SamplingDist::Simple, latent: VarianceLatent::Structured },
        ModelVariant::Smooth { dist: SamplingDist::Simple, latent: VarianceLatent::Unstructured },
        ModelVariant::Smooth { dist: SamplingDist::Sasw, latent: VarianceLatent::Structured },
        ModelVariant::Smooth { dist: SamplingDist::Sasw, latent: VarianceLatent::Unstructured },
    ];

    pub fn name(self) -> &'static str {
        use SamplingDist::*;
        use VarianceLatent::*;
        match self {
            ModelVariant::Standard => "standard",
            ModelVariant::Oracle => "oracle",
            ModelVariant::Smooth { dist: Simple, latent: Structured } => "simple-struct",
            ModelVariant::Smooth { dist: Simple, latent: Unstructured } => "simple-unstruct",
            ModelVariant::Smooth { dist: Sasw, latent: Structured } => "sasw-struct",
            ModelVariant::Smooth { dist: Sasw, latent: Unstructured } => "sasw-unstruct",
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, ModelVariant::Smooth { .. })
    }

    pub fn dist(self) -> Option<SamplingDist> {
        match self {
            ModelVariant::Smooth { dist, .. } => Some(dist),
            _ => None,
        }
    }

    pub fn latent(self) -> Option<VarianceLatent> {
        match self {
            ModelVariant::Smooth { latent, .. } => Some(latent),
            _ => None,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        ModelVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}'")))
    }
}

impl Serialize for ModelVariant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModelVariant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub eta_intercept_mean: f64,
    pub eta_intercept_sd: f64,
    /// SD of every other regression coefficient, including the mean-model
    /// intercept and the urban effect.
    pub regression_sd: f64,
    pub pc_u: f64,
    pub pc_alpha: f64,
    pub phi_a: f64,
    pub phi_b: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            eta_intercept_mean: 0.5,
            eta_intercept_sd: 0.5,
            regression_sd: 2.0,
            pc_u: 1.0,
            pc_alpha: 0.01,
            phi_a: 0.5,
            phi_b: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta_intercept_sd > 0.0
            && self.regression_sd > 0.0
            && self.pc_u > 0.0
            && self.pc_alpha > 0.0
            && self.pc_alpha < 1.0
            && self.phi_a > 0.0
            && self.phi_b > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior configuration {self:?}")))
        }
    }
}
