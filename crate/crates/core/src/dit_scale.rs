//! Rotary position embedding with NTK base stretching, plus the
//! attention-temperature rule for extended token counts.
//!
//! At inference extents beyond training, rotary angles leave the range
//! the model saw during training. Multiplying the frequency base by a
//! factor `lambda >= 1` stretches every band's wavelength so the largest
//! positions land back inside the trained angular range, while the
//! temperature divisor keeps softmax entropy from diluting as token
//! counts grow.

use crate::error::{invalid, Result};

/// Rotary angles for position `n`: `theta_j = n / (lambda base)^(2j/d)`.
pub fn rope_angles(n: usize, base: f64, lambda: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(invalid(format!("rotary dimension must be even, got {dim}")));
    }
    if !(base > 0.0) || !(lambda >= 1.0) {
        return Err(invalid(format!(
            "rotary base must be > 0 and lambda >= 1, got base {base}, lambda {lambda}"
        )));
    }
    let stretched = lambda * base;
    Ok((0..dim / 2)
        .map(|j| n as f64 / stretched.powf(2.0 * j as f64 / dim as f64))
        .collect())
}

/// Rotates consecutive pairs `(v_2j, v_2j+1)` by `angles[j]`.
pub fn apply_rope(v: &[f64], angles: &[f64]) -> Result<Vec<f64>> {
    if v.len() != 2 * angles.len() {
        return Err(invalid(format!(
            "vector length {} does not match {} rotation pairs",
            v.len(),
            angles.len()
        )));
    }
    let mut out = Vec::with_capacity(v.len());
    for (pair, &theta) in v.chunks(2).zip(angles) {
        let (cos, sin) = (theta.cos(), theta.sin());
        out.push(pair[0] * cos - pair[1] * sin);
        out.push(pair[0] * sin + pair[1] * cos);
    }
    Ok(out)
}

/// In-place variant of [`apply_rope`] used on attention rows.
pub fn apply_rope_in_place(v: &mut [f64], angles: &[f64]) {
    debug_assert_eq!(v.len(), 2 * angles.len());
    for (pair, &theta) in v.chunks_mut(2).zip(angles) {
        let (cos, sin) = (theta.cos(), theta.sin());
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

/// Inverse rotation (by `-theta`); the adjoint used in backprop.
pub fn apply_rope_inverse_in_place(v: &mut [f64], angles: &[f64]) {
    debug_assert_eq!(v.len(), 2 * angles.len());
    for (pair, &theta) in v.chunks_mut(2).zip(angles) {
        let (cos, sin) = (theta.cos(), theta.sin());
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos + b * sin;
        pair[1] = -a * sin + b * cos;
    }
}

/// NTK base-stretch factor `max(1, (target/train)^(d/(d-2)))`.
pub fn ntk_lambda(train_len: usize, target_len: usize, dim: usize) -> Result<f64> {
    if train_len == 0 || target_len == 0 {
        return Err(invalid("extents must be >= 1"));
    }
    if dim <= 2 {
        return Err(invalid(format!(
            "NTK exponent d/(d-2) needs dim > 2, got {dim}"
        )));
    }
    let ratio = target_len as f64 / train_len as f64;
    Ok(ratio.powf(dim as f64 / (dim as f64 - 2.0)).max(1.0))
}

/// Softmax temperature `max(1, sqrt(ln(target) / ln(train)))`.
///
/// Clamped at 1 from below; classifier-free guidance already sharpens
/// the distribution, so the temperature stays moderate.
pub fn attention_temperature(train_tokens: usize, target_tokens: usize) -> Result<f64> {
    if train_tokens < 2 || target_tokens < 2 {
        return Err(invalid(format!(
            "token counts must be >= 2, got ({train_tokens}, {target_tokens})"
        )));
    }
    Ok(((target_tokens as f64).ln() / (train_tokens as f64).ln())
        .sqrt()
        .max(1.0))
}

/// Per-axis rotary configuration for (frame, height, width) token grids.
///
/// The head dimension splits across the three axes (`axis_dims`, each
/// even); each axis gets its own frequency ladder and its own stretch
/// factor computed from that axis's extent ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub base: f64,
    pub lambda: [f64; 3],
    pub axis_dims: [usize; 3],
    pub train_extent: [usize; 3],
    pub target_extent: [usize; 3],
}

impl RopeConfig {
    /// Baseline rotary embedding: no stretching, target = train.
    pub fn identity(axis_dims: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        Self::with_lambda(axis_dims, extent, extent, 10_000.0, [1.0; 3])
    }

    /// Per-axis NTK factors derived from each axis's extent ratio.
    pub fn ntk(
        axis_dims: [usize; 3],
        train_extent: [usize; 3],
        target_extent: [usize; 3],
        base: f64,
    ) -> Result<Self> {
        let mut lambda = [1.0; 3];
        for a in 0..3 {
            if target_extent[a] > train_extent[a] {
                lambda[a] = ntk_lambda(train_extent[a], target_extent[a], axis_dims[a])?;
            }
        }
        Self::with_lambda(axis_dims, train_extent, target_extent, base, lambda)
    }

    pub fn with_lambda(
        axis_dims: [usize; 3],
        train_extent: [usize; 3],
        target_extent: [usize; 3],
        base: f64,
        lambda: [f64; 3],
    ) -> Result<Self> {
        for (a, &d) in axis_dims.iter().enumerate() {
            if d % 2 != 0 {
                return Err(invalid(format!(
                    "axis {a} head dimension {d} must be even"
                )));
            }
        }
        for (a, &l) in lambda.iter().enumerate() {
            if !(l >= 1.0) {
                return Err(invalid(format!("axis {a} lambda {l} must be >= 1")));
            }
        }
        Ok(Self {
            base,
            lambda,
            axis_dims,
            train_extent,
            target_extent,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.axis_dims.iter().sum()
    }

    /// Concatenated per-axis angles for a token at `(f, y, x)`.
    pub fn token_angles(&self, coord: [usize; 3]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.head_dim() / 2);
        for a in 0..3 {
            if self.axis_dims[a] == 0 {
                continue;
            }
            out.extend(rope_angles(
                coord[a],
                self.base,
                self.lambda[a],
                self.axis_dims[a],
            )?);
        }
        Ok(out)
    }
}
