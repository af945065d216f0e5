//! An exactly invertible latent codec standing in for a VAE.
//!
//! Encoding is space-to-depth by 2 followed by a fixed orthogonal mix of
//! the four phase channels (a scaled Hadamard matrix); decoding applies
//! the same involutive mix and depth-to-space. Both directions are
//! linear and compose to the identity up to rounding.

use crate::error::{invalid, Result};
use crate::tensor::LatentTensor;

/// Scaled 4x4 Hadamard matrix: symmetric, orthogonal, self-inverse.
const MIX: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// Space-to-depth factor (fixed).
pub const CODEC_FACTOR: usize = 2;

/// The codec. Image channels `C` map to latent channels `4C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCodec {
    image_channels: usize,
}

impl ToyCodec {
    pub fn new(image_channels: usize) -> Result<Self> {
        if image_channels == 0 {
            return Err(invalid("codec needs at least one image channel"));
        }
        Ok(Self { image_channels })
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn latent_channels(&self) -> usize {
        self.image_channels * CODEC_FACTOR * CODEC_FACTOR
    }

    /// `[C, (F,) H, W] -> [4C, (F,) H/2, W/2]`; spatial dims must be even.
    pub fn encode(&self, image: &LatentTensor) -> Result<LatentTensor> {
        if image.channels() != self.image_channels {
            return Err(invalid(format!(
                "codec expects {} image channels, got {}",
                self.image_channels,
                image.channels()
            )));
        }
        if image.height() % 2 != 0 || image.width() % 2 != 0 {
            return Err(invalid(format!(
                "encode needs even spatial dims, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let (h, w) = (image.height() / 2, image.width() / 2);
        let frames = image.frame_count();
        let mut out = LatentTensor::zeros(self.latent_channels(), image.frames(), h, w);
        for c in 0..self.image_channels {
            for f in 0..frames {
                let src = image.plane(c, f);
                for y in 0..h {
                    for x in 0..w {
                        // Phase order: (dy, dx) in row-major.
                        let phases = [
                            src[(2 * y) * image.width() + 2 * x],
                            src[(2 * y) * image.width() + 2 * x + 1],
                            src[(2 * y + 1) * image.width() + 2 * x],
                            src[(2 * y + 1) * image.width() + 2 * x + 1],
                        ];
                        for (i, row) in MIX.iter().enumerate() {
                            let v = row.iter().zip(&phases).map(|(m, p)| m * p).sum();
                            out.set(c * 4 + i, f, y, x, v);
                        }
                    }
                }
            }
        }
        out.set_level(image.level());
        Ok(out)
    }

    /// Inverse of [`ToyCodec::encode`].
    pub fn decode(&self, latent: &LatentTensor) -> Result<LatentTensor> {
        if latent.channels() != self.latent_channels() {
            return Err(invalid(format!(
                "codec expects {} latent channels, got {}",
                self.latent_channels(),
                latent.channels()
            )));
        }
        let (h, w) = (latent.height() * 2, latent.width() * 2);
        let frames = latent.frame_count();
        let mut out = LatentTensor::zeros(self.image_channels, latent.frames(), h, w);
        for c in 0..self.image_channels {
            for f in 0..frames {
                for y in 0..latent.height() {
                    for x in 0..latent.width() {
                        let mixed = [
                            latent.get(c * 4, f, y, x),
                            latent.get(c * 4 + 1, f, y, x),
                            latent.get(c * 4 + 2, f, y, x),
                            latent.get(c * 4 + 3, f, y, x),
                        ];
                        let dst = out.plane_mut(c, f);
                        for (i, row) in MIX.iter().enumerate() {
                            let v: f64 = row.iter().zip(&mixed).map(|(m, p)| m * p).sum();
                            let (dy, dx) = (i / 2, i % 2);
                            dst[(2 * y + dy) * w + 2 * x + dx] = v;
                        }
                    }
                }
            }
        }
        out.set_level(latent.level());
        Ok(out)
    }
}
