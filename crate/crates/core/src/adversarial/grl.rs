//! Gradient reversal: identity on the way forward, `-alpha` times the
//! upstream gradient on the way back.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrl")]
pub struct GrlConfig {
    pub alpha: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrl {
    #[serde(default = "default_alpha")]
    alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

impl TryFrom<RawGrl> for GrlConfig {
    type Error = Error;

    fn try_from(raw: RawGrl) -> Result<Self> {
        GrlConfig::new(raw.alpha)
    }
}

impl GrlConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "gradient reversal strength must be finite and >= 0, got {alpha}"
            )));
        }
        Ok(GrlConfig { alpha })
    }
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig {
            alpha: default_alpha(),
        }
    }
}

pub fn grl_forward<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.clone()
}

pub fn grl_backward<D: Dimension>(upstream: &Array<f64, D>, cfg: &GrlConfig) -> Array<f64, D> {
    let alpha = cfg.alpha;
    upstream.mapv(|g| -alpha * g)
}
