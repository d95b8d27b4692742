use crate::error::{Error, Result};

/// Architecture hyperparameters of the encoder and its projection layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Samples per channel after resizing.
    pub input_length: usize,
    /// Tokens produced per channel.
    pub patch_count: usize,
    /// Width of every token and of the final embedding.
    pub token_dim: usize,
    /// Output channels of each convolutional branch.
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    /// Number of geometric scales in the scalar-statistic encoder.
    pub scalar_scales: usize,
    /// Width of the encoded patch statistics.
    pub stat_dim: usize,
    /// Include the convolutional branch over first differences.
    pub use_differential: bool,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub projector_dim: usize,
    /// Guard added to the standard deviation in instance normalisation.
    pub norm_eps: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_length: 512,
            patch_count: 32,
            token_dim: 256,
            conv_channels: 256,
            conv_kernel: 16,
            conv_stride: 8,
            conv_padding: 4,
            scalar_scales: 16,
            stat_dim: 64,
            use_differential: true,
            num_layers: 6,
            num_heads: 8,
            mlp_hidden: 2048,
            dropout: 0.1,
            projector_dim: 128,
            norm_eps: 1e-5,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A narrow, shallow variant with the same token geometry, sized for
    /// training on a single CPU core.
    pub fn desk() -> Self {
        Self {
            token_dim: 64,
            conv_channels: 64,
            stat_dim: 32,
            num_layers: 2,
            num_heads: 4,
            mlp_hidden: 256,
            projector_dim: 32,
            ..Self::default()
        }
    }

    /// Minimal variant used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_length: 64,
            patch_count: 8,
            token_dim: 16,
            conv_channels: 8,
            conv_kernel: 4,
            conv_stride: 2,
            conv_padding: 1,
            scalar_scales: 4,
            stat_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden: 32,
            projector_dim: 8,
            ..Self::default()
        }
    }

    pub fn without_differential(mut self) -> Self {
        self.use_differential = false;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }

    /// Tokens seen by the transformer: the patches plus the class token.
    pub fn sequence_length(&self) -> usize {
        self.patch_count + 1
    }

    /// Length of each convolution output before pooling.
    pub fn conv_output_length(&self) -> usize {
        (self.input_length + 2 * self.conv_padding - self.conv_kernel) / self.conv_stride + 1
    }

    /// Input width of the token fusion projector.
    pub fn fusion_width(&self) -> usize {
        let branches = if self.use_differential { 2 } else { 1 };
        branches * self.conv_channels + self.stat_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::arg(msg));
        if self.num_heads == 0 || !self.token_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.num_heads
            ));
        }
        if !self.token_dim.is_multiple_of(2) {
            return fail(format!("token_dim {} must be even", self.token_dim));
        }
        if self.patch_count == 0 || !self.input_length.is_multiple_of(self.patch_count) {
            return fail(format!(
                "input length {} not divisible into {} patches",
                self.input_length, self.patch_count
            ));
        }
        if self.input_length + 2 * self.conv_padding < self.conv_kernel || self.conv_stride == 0 {
            return fail("convolution does not fit the input".into());
        }
        if self.conv_output_length() < self.patch_count {
            return fail(format!(
                "convolution yields {} positions, fewer than {} patches",
                self.conv_output_length(),
                self.patch_count
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {}", self.dropout));
        }
        if self.num_layers == 0 || self.scalar_scales == 0 || self.projector_dim == 0 {
            return fail("zero-sized component".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 32);
        assert_eq!(c.sequence_length(), 33);
        assert_eq!(c.conv_output_length(), 64);
        assert_eq!(c.fusion_width(), 576);
        assert_eq!(c.clone().without_differential().fusion_width(), 320);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_heads() {
        let c = ModelConfig {
            num_heads: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
