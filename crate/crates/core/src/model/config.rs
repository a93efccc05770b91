use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mese::BalanceVariant;
use crate::model::transformer::TransformerParams;

/// Architecture hyperparameters. Everything needed to rebuild a model with
/// the same parameter names and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Base channel width `C`.
    pub channels: usize,
    /// Experts per bank `N`.
    pub experts: usize,
    /// Experts kept per pixel and per frequency branch `K`.
    pub top_k: usize,
    /// Side of the dynamic low-pass filter.
    pub filter_size: usize,
    pub heads: usize,
    /// Repetitions of the pixel-routing and frequency blocks.
    pub stages: usize,
    /// Expert MLP width; `None` means `2C`.
    pub expert_hidden: Option<usize>,
    pub balance_variant: BalanceVariant,
    /// Also apply the balance loss to the global branch scores.
    pub balance_global: bool,
    pub use_tspg: bool,
    pub use_mese: bool,
    pub use_fd: bool,
    pub use_mee: bool,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            experts: 6,
            top_k: 2,
            filter_size: 3,
            heads: 4,
            stages: 1,
            expert_hidden: None,
            balance_variant: BalanceVariant::Std,
            balance_global: false,
            use_tspg: true,
            use_mese: true,
            use_fd: true,
            use_mee: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the gradient suite.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            experts: 3,
            top_k: 2,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn hidden(&self) -> usize {
        self.expert_hidden.unwrap_or(2 * self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return fail("channels must be ≥ 1".into());
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("need 1 ≤ top_k ≤ experts, got top_k={} experts={}", self.top_k, self.experts));
        }
        if self.filter_size.is_multiple_of(2) {
            return fail(format!("filter_size must be odd, got {}", self.filter_size));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("channels={} not divisible by heads={}", self.channels, self.heads));
        }
        if self.stages == 0 {
            return fail("stages must be ≥ 1".into());
        }
        if self.hidden() == 0 {
            return fail("expert_hidden must be ≥ 1".into());
        }
        Ok(())
    }

    /// Number of trainable scalars, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let (c, n, h, k) = (self.channels, self.experts, self.hidden(), self.filter_size);
        let conv = |ci: usize, co: usize| co * ci * 9 + co;
        let pconv = |ci: usize, co: usize| co * ci + co;
        let bank = n * (2 * c * h + h + c);
        let tf = TransformerParams::param_count(c);
        let branch = 2 * c + (9 * c + c) + pconv(c, n) + 2 * c + (9 * c + c) + pconv(c, c) + bank;

        let mut total = conv(3, c) + conv(2 * c, c) + tf + conv(c, 3);
        if self.use_tspg {
            total += conv(3, c) + c * c;
        }
        let mut stage = tf + 2 * branch;
        stage += if self.use_mese { 2 * c * n + bank } else { pconv(2 * c, c) };
        if self.use_fd {
            let taps = c * k * k;
            stage += pconv(c, taps) + 2 * taps;
        }
        total += self.stages * stage + (self.stages - 1) * pconv(2 * c, c);
        total
    }
}
