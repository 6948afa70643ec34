use crate::error::{Error, Result};

/// Divisor applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScale {
    /// `1 / (2 * sqrt(d))`, with `d` the per-head width.
    DoubleSqrt,
    /// `1 / sqrt(d)`.
    Sqrt,
}

impl AttentionScale {
    pub fn factor(self, head_dim: usize) -> f64 {
        let s = (head_dim as f64).sqrt();
        match self {
            AttentionScale::DoubleSqrt => 1.0 / (2.0 * s),
            AttentionScale::Sqrt => 1.0 / s,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionScale::DoubleSqrt => "double_sqrt",
            AttentionScale::Sqrt => "sqrt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "double_sqrt" => Some(AttentionScale::DoubleSqrt),
            "sqrt" => Some(AttentionScale::Sqrt),
            _ => None,
        }
    }
}

/// Linear projections inside an attention block that can carry a low-rank increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProjectionSite {
    Query,
    Key,
    Value,
    Output,
}

impl ProjectionSite {
    pub const ALL: [ProjectionSite; 4] = [
        ProjectionSite::Query,
        ProjectionSite::Key,
        ProjectionSite::Value,
        ProjectionSite::Output,
    ];

    pub fn as_char(self) -> char {
        match self {
            ProjectionSite::Query => 'q',
            ProjectionSite::Key => 'k',
            ProjectionSite::Value => 'v',
            ProjectionSite::Output => 'o',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        ProjectionSite::ALL.into_iter().find(|s| s.as_char() == c)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    /// Drop layer norms and the attention output projection, leaving only the
    /// bare residual MHSA/FFN blocks.
    pub bare_blocks: bool,
    pub attention_scale: AttentionScale,
    /// Apply GeLU to the output of the second FFN layer as well.
    pub outer_gelu: bool,
    pub layer_norm_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
            num_classes: 10,
            bare_blocks: false,
            attention_scale: AttentionScale::DoubleSqrt,
            outer_gelu: true,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    /// Conventional transformer block: `1/sqrt(d)` scaling and a linear FFN output.
    pub fn conventional(mut self) -> Self {
        self.attention_scale = AttentionScale::Sqrt;
        self.outer_gelu = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return c(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return c(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.hidden_dim == 0 || self.channels == 0 || self.ffn_dim == 0 || self.num_classes == 0 {
            return c("dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn image_len(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }

    /// Parameters in the backbone (everything except the classifier head).
    pub fn backbone_param_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim;
        let proj = if self.bare_blocks { 3 } else { 4 };
        let norms = if self.bare_blocks { 0 } else { 4 * d };
        let block = proj * d * d + d * f + f + f * d + d + norms;
        let final_norm = if self.bare_blocks { 0 } else { 2 * d };
        self.patch_dim() * d + self.seq_len() * d + d + self.num_layers * block + final_norm
    }

    pub fn head_param_count(&self, classes: usize) -> usize {
        self.hidden_dim * classes + classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_length_counts_class_token() {
        let cfg = ViTConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            ..ViTConfig::default()
        };
        assert_eq!(cfg.seq_len(), 5);
        assert_eq!(ViTConfig::default().seq_len(), 17);
        let vit_b = ViTConfig {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            ..ViTConfig::default()
        };
        assert_eq!(vit_b.seq_len(), 197);
    }

    #[test]
    fn validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig {
            patch_size: 5,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            num_heads: 3,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scale_factors() {
        assert_eq!(AttentionScale::DoubleSqrt.factor(16), 0.125);
        assert_eq!(AttentionScale::Sqrt.factor(16), 0.25);
    }
}
