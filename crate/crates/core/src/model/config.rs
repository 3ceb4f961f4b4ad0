use serde::{Deserialize, Serialize};

use crate::domain::GridShape;
use crate::error::{Error, Result};

/// Bottleneck block applied after the masked-mean fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    /// Two convolutions followed by squeeze-and-excitation channel attention.
    #[default]
    ConvAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: GridShape,
    /// Channels at full resolution; doubled at every level.
    pub base_width: usize,
    /// Number of stride-2 downsamplings in the causal encoder.
    pub levels: usize,
    /// Bias latent dimension `L`.
    pub bias_dim: usize,
    /// Channels of the counterfactual decoder's coarse grid.
    pub counterfactual_width: usize,
    pub bottleneck: Bottleneck,
    pub leaky_slope: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridShape::cube(32),
            base_width: 8,
            levels: 3,
            bias_dim: 16,
            counterfactual_width: 16,
            bottleneck: Bottleneck::ConvAttention,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Channels of each `c_m` and of the mediator.
    pub fn feature_channels(&self) -> usize {
        self.width(self.levels)
    }

    pub fn downsample(&self) -> usize {
        1 << self.levels
    }

    /// Spatial extent at `level`.
    pub fn dims_at(&self, level: usize) -> [usize; 3] {
        let f = 1 << level;
        let d = if self.grid.is_planar() { 1 } else { self.grid.d / f };
        [d, self.grid.h / f, self.grid.w / f]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.levels > 5 {
            return Err(Error::config("model.levels", "must be between 2 and 5"));
        }
        if self.base_width == 0 || self.bias_dim == 0 || self.counterfactual_width < 2 {
            return Err(Error::config("model", "widths and bias_dim must be positive"));
        }
        let f = self.downsample();
        let axes: &[(usize, &str)] = if self.grid.is_planar() {
            &[(self.grid.h, "H"), (self.grid.w, "W")]
        } else {
            &[(self.grid.d, "D"), (self.grid.h, "H"), (self.grid.w, "W")]
        };
        for &(n, axis) in axes {
            if n % f != 0 || n < 2 * f {
                return Err(Error::config(
                    "model.grid",
                    format!("{axis} extent {n} must be a multiple of {f} and at least {}", 2 * f),
                ));
            }
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("model.leaky_slope", "must be in [0, 1)"));
        }
        Ok(())
    }
}
