use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a DeiT-style vision transformer with optional bottlenecks at the
/// QKV and first MLP layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Divisor applied to the FC1 output width.
    pub fc_reduce: usize,
    /// Divisor applied to the QKV output width (per-head dimension shrinks).
    pub attn_reduce: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    pub num_classes: usize,
}

fn default_in_chans() -> usize {
    3
}

const REDUCTION_GRID: [usize; 3] = [1, 2, 4];

impl ModelConfig {
    /// DeiT-S at 224×224 with a 100-class head.
    pub fn deit_small() -> Self {
        Self {
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            mlp_ratio: 4.0,
            fc_reduce: 1,
            attn_reduce: 1,
            patch_size: 16,
            image_size: 224,
            in_chans: 3,
            num_classes: 100,
        }
    }

    /// DeiT-S with QKV and FC1 widths halved.
    pub fn deit_small_reduced() -> Self {
        Self {
            fc_reduce: 2,
            attn_reduce: 2,
            ..Self::deit_small()
        }
    }

    /// Desk-scale model for 28×28 single-channel inputs.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            fc_reduce: 2,
            attn_reduce: 2,
            patch_size: 7,
            image_size: 28,
            in_chans: 1,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if [self.embed_dim, self.depth, self.num_heads, self.patch_size, self.image_size]
            .contains(&0)
            || self.in_chans == 0
            || self.num_classes == 0
        {
            return fail("all dimensions must be positive".into());
        }
        if !REDUCTION_GRID.contains(&self.fc_reduce) || !REDUCTION_GRID.contains(&self.attn_reduce) {
            return fail(format!(
                "fc_reduce ({}) and attn_reduce ({}) must be one of {REDUCTION_GRID:?}",
                self.fc_reduce, self.attn_reduce
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % self.attn_reduce != 0 || self.attn_width() % self.num_heads != 0 {
            return fail(format!(
                "reduced attention width {}/{} not divisible by num_heads {}",
                self.embed_dim, self.attn_reduce, self.num_heads
            ));
        }
        let hidden = self.embed_dim as f64 * self.mlp_ratio;
        if !(self.mlp_ratio > 0.0) || (hidden - hidden.round()).abs() > 1e-9 {
            return fail(format!("embed_dim × mlp_ratio = {hidden} is not a whole width"));
        }
        if hidden.round() as usize % self.fc_reduce != 0 || self.mlp_hidden() == 0 {
            return fail(format!("MLP width {hidden} not divisible by fc_reduce {}", self.fc_reduce));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per image, class token included.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }

    /// Width of each of Q, K and V after reduction.
    pub fn attn_width(&self) -> usize {
        self.embed_dim / self.attn_reduce
    }

    pub fn head_dim(&self) -> usize {
        self.attn_width() / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize / self.fc_reduce
    }
}
