use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Square input side length in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// ViT-Base/16 at 224×224: 12 layers, hidden 768, MLP 3072, 12 heads.
    pub fn vit_base(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            hidden_dim: 768,
            mlp_dim: 3072,
            num_heads: 12,
            num_layers: 12,
            num_classes,
        }
    }

    /// A small profile for tests and smoke runs (32×32 input, 4 patches).
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 16,
            hidden_dim: 32,
            mlp_dim: 64,
            num_heads: 2,
            num_layers: 2,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("mlp_dim", self.mlp_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Number of patches N.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Length of a flattened patch, P²·C.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_base_dimensions() {
        let c = ViTConfig::vit_base(2);
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 196);
        assert_eq!(c.patch_dim(), 768);
        assert_eq!(c.head_dim(), 64);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let mut c = ViTConfig::tiny(2);
        c.image_size = 33;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::tiny(2);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        assert!(ViTConfig::tiny(1).validate().is_err());
    }
}
