use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sinusoidal features of a diffusion index, interleaved as
/// `(sin tω₀, cos tω₀, sin tω₁, cos tω₁, …)` with `ω_k = base^{-2k/dim}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "time embedding dimension must be even and positive, got {dim}"
            )));
        }
        Ok(Self { dim, base })
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        self.embed_into(t, &mut out);
        out
    }

    pub fn embed_into(&self, t: usize, out: &mut Vec<f64>) {
        let half = self.dim / 2;
        for k in 0..half {
            let freq = self.base.powf(-2.0 * k as f64 / self.dim as f64);
            let x = t as f64 * freq;
            out.push(x.sin());
            out.push(x.cos());
        }
    }
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self {
            dim: 16,
            base: 10_000.0,
        }
    }
}

/// Sinusoidal embedding with the default base frequency.
pub fn embed_time(t: usize, dim: usize) -> Result<Vec<f64>> {
    Ok(TimeEmbedding::new(dim, 10_000.0)?.embed(t))
}
