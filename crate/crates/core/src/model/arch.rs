use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape descriptor from which every H-Net parameter shape follows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Square input side in pixels; must be divisible by 8.
    pub input_size: usize,
    /// Encoder stage widths; the last one is the latent width.
    pub channels: Vec<usize>,
    pub transformer_blocks: usize,
    /// Expand width / bottleneck width inside each residual block.
    pub bottleneck_ratio: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::with_size(64)
    }
}

impl ArchSpec {
    pub fn with_size(input_size: usize) -> Self {
        ArchSpec { input_size, channels: vec![32, 64, 128, 128], transformer_blocks: 5, bottleneck_ratio: 4 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidArch(m));
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return bad(format!("input size {} must be a positive multiple of 8", self.input_size));
        }
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return bad(format!("channel plan {:?} must list four positive widths", self.channels));
        }
        if self.bottleneck_ratio == 0 || self.latent_channels() % self.bottleneck_ratio != 0 {
            return bad(format!(
                "latent width {} not divisible by bottleneck ratio {}",
                self.latent_channels(),
                self.bottleneck_ratio
            ));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Three 2x2 pools: the latent side is `input_size / 8`.
    pub fn latent_side(&self) -> usize {
        self.input_size / 8
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels(), self.latent_side(), self.latent_side()]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.input_size, self.input_size]
    }

    pub fn bottleneck_width(&self) -> usize {
        self.latent_channels() / self.bottleneck_ratio
    }

    /// Total scalar count of all parameters and BN buffers, or `None` on overflow.
    /// Lets loaders reject a header before allocating anything from it.
    pub fn state_len(&self) -> Option<u128> {
        let conv = |cin: usize, cout: usize, k: usize| (cout as u128) * (cin as u128) * (k * k) as u128 + cout as u128;
        let bn = |c: usize| 4 * c as u128;
        if self.channels.len() != 4 || self.bottleneck_ratio == 0 {
            return None;
        }
        let mut enc = 0u128;
        let mut cin = 3;
        for &c in &self.channels {
            enc = enc.checked_add(conv(cin, c, 3) + bn(c))?;
            cin = c;
        }
        let (l, c1, c2) = (self.latent_channels(), self.channels[0], self.channels[1]);
        let dec = conv(l, l, 3) + bn(l) + conv(l, 4 * c2, 3) + bn(c2) + conv(c2, 4 * c1, 3) + conv(c1, 3, 3);
        let w = self.bottleneck_width();
        let block = conv(l, w, 1) + bn(w) + conv(w, w, 3) + bn(w) + conv(w, l, 1) + bn(l);
        (2 * enc).checked_add(2 * dec)?.checked_add(block.checked_mul(self.transformer_blocks as u128)?)
    }
}
