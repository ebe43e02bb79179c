//! Dispatch over the two backbones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::Result;
use crate::frontend::{self, FrontendConfig};
use crate::nn::{Ctx, ParamStore};
use crate::rawgat::{self, RawGatConfig};
use crate::rawnet2::{self, RawNet2Config};

/// Index of the bonafide class in the model output.
pub const BONAFIDE: usize = 1;
pub const SPOOF: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    RawNet2,
    RawGat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    RawNet2(RawNet2Config),
    RawGat(RawGatConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::RawNet2(RawNet2Config::default())
    }
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::RawNet2(_) => ModelKind::RawNet2,
            ModelConfig::RawGat(_) => ModelKind::RawGat,
        }
    }

    pub fn frontend(&self) -> &FrontendConfig {
        match self {
            ModelConfig::RawNet2(c) => &c.frontend,
            ModelConfig::RawGat(c) => &c.frontend,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            ModelConfig::RawNet2(c) => c.input_len,
            ModelConfig::RawGat(c) => c.input_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::RawNet2(c) => c.validate(),
            ModelConfig::RawGat(c) => c.validate(),
        }
    }

    /// Freshly initialized parameters.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        match self {
            ModelConfig::RawNet2(c) => rawnet2::init(&mut store, &mut rng, c)?,
            ModelConfig::RawGat(c) => rawgat::init(&mut store, &mut rng, c)?,
        }
        Ok(store)
    }

    /// Log-probabilities `(B, 2)` for `wave: (B, input_len)`.
    pub fn forward(&self, ctx: &mut Ctx, wave: Var) -> Result<Var> {
        match self {
            ModelConfig::RawNet2(c) => rawnet2::forward(ctx, c, wave),
            ModelConfig::RawGat(c) => rawgat::forward(ctx, c, wave),
        }
    }

    pub fn shape_plan(&self) -> Result<Vec<(String, Vec<usize>)>> {
        match self {
            ModelConfig::RawNet2(c) => rawnet2::shape_plan(c),
            ModelConfig::RawGat(c) => rawgat::shape_plan(c),
        }
    }

    /// Post-step parameter constraints.
    pub fn clamp(&self, store: &mut ParamStore) {
        frontend::clamp(store, self.frontend());
    }
}
