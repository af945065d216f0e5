//! Shared layer primitives for the toy models.

use crate::error::Result;
use crate::linalg::Mat;
use crate::models::lora::{lora_apply, LoraAdapter};
use crate::rng::CounterRng;
use crate::tensor::{ConvKernel, LatentTensor};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// d/dx silu(x).
pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal timestep embedding of even dimension `dim`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0);
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
        out.push((t as f64 * freq).sin());
        out.push((t as f64 * freq).cos());
    }
    out
}

/// A dense layer `y = x W^T + b` over token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Scaled-uniform init with bound `1/sqrt(d_in)`, zero bias.
    pub fn seeded(d_out: usize, d_in: usize, rng: &CounterRng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = Mat::new(
            d_out,
            d_in,
            (0..d_out * d_in)
                .map(|i| rng.uniform_symmetric(i as u64, bound))
                .collect(),
        )
        .expect("linear shape");
        Self {
            weight,
            bias: vec![0.0; d_out],
        }
    }

    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        Self {
            weight: Mat::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    /// Weight with the adapter applied, if one targets this layer.
    pub fn effective_weight(&self, adapter: Option<&LoraAdapter>) -> Result<Mat> {
        match adapter {
            None => Ok(self.weight.clone()),
            Some(a) => lora_apply(&self.weight, a),
        }
    }

    pub fn forward(&self, x: &Mat, adapter: Option<&LoraAdapter>) -> Result<Mat> {
        let w = self.effective_weight(adapter)?;
        let mut out = x.matmul_nt(&w);
        out.add_row_vector(&self.bias);
        Ok(out)
    }

    /// Forward of a single row vector.
    pub fn forward_vec(&self, x: &[f64], adapter: Option<&LoraAdapter>) -> Result<Vec<f64>> {
        let m = Mat::new(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m, adapter)?.into_row())
    }
}

/// Spatial convolution layer with per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: ConvKernel,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn seeded(c_out: usize, c_in: usize, size: usize, rng: &CounterRng) -> Self {
        let bound = 1.0 / ((c_in * size * size) as f64).sqrt();
        let kernel = ConvKernel::new(
            c_out,
            c_in,
            size,
            (0..c_out * c_in * size * size)
                .map(|i| rng.uniform_symmetric(i as u64, bound))
                .collect(),
        )
        .expect("kernel shape");
        Self {
            kernel,
            bias: vec![0.0; c_out],
        }
    }

    pub fn zeros(c_out: usize, c_in: usize, size: usize) -> Self {
        Self {
            kernel: ConvKernel::new(c_out, c_in, size, vec![0.0; c_out * c_in * size * size])
                .expect("kernel shape"),
            bias: vec![0.0; c_out],
        }
    }

    pub fn forward(&self, x: &LatentTensor, dilation: usize) -> Result<LatentTensor> {
        let mut out = crate::tensor::conv2d_dilated(x, &self.kernel, dilation)?;
        for c in 0..self.kernel.out_channels {
            let b = self.bias[c];
            if b != 0.0 {
                for f in 0..out.frame_count() {
                    for v in out.plane_mut(c, f) {
                        *v += b;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Group normalization over `(channels-in-group, H, W)` per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl GroupNorm {
    pub fn identity(channels: usize, groups: usize) -> Self {
        debug_assert!(channels % groups == 0);
        Self {
            groups,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
        }
    }

    pub fn zeros(channels: usize, groups: usize) -> Self {
        Self {
            gamma: vec![0.0; channels],
            ..Self::identity(channels, groups)
        }
    }

    pub fn forward(&self, x: &LatentTensor) -> LatentTensor {
        let channels = x.channels();
        let per_group = channels / self.groups;
        let plane = x.plane_len();
        let mut out = x.clone();
        for f in 0..x.frame_count() {
            for g in 0..self.groups {
                let chans = g * per_group..(g + 1) * per_group;
                let n = (per_group * plane) as f64;
                let mut mean = 0.0;
                for c in chans.clone() {
                    mean += x.plane(c, f).iter().sum::<f64>();
                }
                mean /= n;
                let mut var = 0.0;
                for c in chans.clone() {
                    var += x.plane(c, f).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                var /= n;
                let inv = 1.0 / (var + self.eps).sqrt();
                for c in chans {
                    let (gamma, beta) = (self.gamma[c], self.beta[c]);
                    for (o, &v) in out.plane_mut(c, f).iter_mut().zip(x.plane(c, f)) {
                        *o = (v - mean) * inv * gamma + beta;
                    }
                }
            }
        }
        out
    }
}

/// 2x average-pool downsample of the spatial axes.
pub fn avg_pool2(x: &LatentTensor) -> Result<LatentTensor> {
    let (h, w) = (x.height() / 2, x.width() / 2);
    let mut out = LatentTensor::zeros(x.channels(), x.frames(), h, w);
    for c in 0..x.channels() {
        for f in 0..x.frame_count() {
            let src = x.plane(c, f);
            let sw = x.width();
            let dst = out.plane_mut(c, f);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = 0.25
                        * (src[2 * y * sw + 2 * xx]
                            + src[2 * y * sw + 2 * xx + 1]
                            + src[(2 * y + 1) * sw + 2 * xx]
                            + src[(2 * y + 1) * sw + 2 * xx + 1]);
                }
            }
        }
    }
    out.set_level(x.level());
    Ok(out)
}

/// 2x nearest-neighbor upsample of the spatial axes.
pub fn nearest_up2(x: &LatentTensor) -> Result<LatentTensor> {
    let (h, w) = (x.height() * 2, x.width() * 2);
    let mut out = LatentTensor::zeros(x.channels(), x.frames(), h, w);
    for c in 0..x.channels() {
        for f in 0..x.frame_count() {
            let src = x.plane(c, f);
            let sw = x.width();
            let dst = out.plane_mut(c, f);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = src[(y / 2) * sw + xx / 2];
                }
            }
        }
    }
    out.set_level(x.level());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = LatentTensor::new(
            vec![1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0],
            2,
            None,
            2,
            2,
            1,
        )
        .unwrap();
        let gn = GroupNorm::identity(2, 2);
        let y = gn.forward(&x);
        // First group: mean 4, var 5 -> normalized values.
        let inv = 1.0 / (5.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0, 0, 0) - (1.0 - 4.0) * inv).abs() < 1e-12);
        // Second group is constant: output 0 (no NaN).
        assert_eq!(y.get(1, 0, 0, 0), 0.0);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = LatentTensor::new((0..16).map(f64::from).collect(), 1, None, 4, 4, 1).unwrap();
        let down = avg_pool2(&x).unwrap();
        assert_eq!((down.height(), down.width()), (2, 2));
        assert_eq!(down.get(0, 0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let up = nearest_up2(&down).unwrap();
        assert_eq!((up.height(), up.width()), (4, 4));
        assert_eq!(up.get(0, 0, 1, 1), down.get(0, 0, 0, 0));
    }

    #[test]
    fn time_embedding_is_bounded_and_distinct() {
        let a = time_embedding(1, 16);
        let b = time_embedding(2, 16);
        assert_ne!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }
}
