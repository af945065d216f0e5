//! Noise schedules and diffusion steps.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` with the convention
//! `alpha_bar(0) = 1`. The reverse process is deterministic DDIM, which
//! makes forward-noise / reverse-step an exact algebraic inverse pair
//! when the same noise is supplied.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::rng::CounterRng;
use crate::tensor::LatentTensor;

/// How the beta sequence is interpolated between its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Interpolates `sqrt(beta)` linearly, then squares.
    ScaledLinear,
}

/// A discrete variance schedule with its derived alpha products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    shift: f64,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("beta[{i}] = {b} outside (0, 1)")));
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            shift: 1.0,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// The stored alpha-bar sequence for `t = 1..=T`.
    pub fn alpha_bar_seq(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar(t)` with the `alpha_bar(0) = 1` convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Timestep-warp parameter this schedule was resampled with.
    pub fn shift(&self) -> f64 {
        self.shift
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(invalid(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

/// Builds a `T`-step schedule with betas interpolated per `kind`.
pub fn make_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(invalid("timesteps must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if timesteps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (timesteps - 1) as f64
        }
    };
    let beta = (0..timesteps)
        .map(|i| match kind {
            ScheduleKind::Linear => lerp(beta_start, beta_end, i),
            ScheduleKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Forward diffusion to step `t`: `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_t(t)?;
    z0.check_same_shape(eps, "forward_noise")?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip(eps, |z, e| signal * z + noise * e)
}

/// Standard-normal tensor shaped like `x`, drawn at counters `0..len`.
pub fn draw_noise_like(x: &LatentTensor, seed: u64) -> LatentTensor {
    let rng = CounterRng::new(seed);
    let mut out = x.zeros_like();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = rng.normal(i as u64);
    }
    out
}

/// Re-noises a clean (upsampled) latent to step `K` with seeded noise.
///
/// The same `(tensor, K, seed)` triple yields a bitwise-identical result
/// on every run and thread count.
pub fn renoise_to(
    z0_up: &LatentTensor,
    k: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LatentTensor> {
    schedule.check_t(k)?;
    let eps = draw_noise_like(z0_up, seed);
    forward_noise(z0_up, k, &eps, schedule)
}

/// One deterministic DDIM step from `t` down to `t_prev`.
///
/// Recovers the clean estimate `(z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`
/// and re-noises it to `t_prev` with the predicted noise.
pub fn reverse_step_ddim(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(invalid(format!("t_prev {t_prev} must be below t {t}")));
    }
    z_t.check_same_shape(eps_pred, "reverse_step_ddim")?;
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, n_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z_t.zip(eps_pred, |z, e| {
        let z0_hat = (z - n_t * e) / s_t;
        s_p * z0_hat + n_p * e
    })
}

/// The timestep warp `u' = shift u / (1 + (shift - 1) u)` on `[0, 1]`.
pub fn warp_position(u: f64, shift: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

/// Resamples a schedule's alpha-bar sequence under the timestep warp.
///
/// Larger shifts push more destructive noise toward early (high-`t`)
/// steps, which higher resolutions need. `shift = 1` returns the input
/// unchanged.
pub fn shift_timesteps(schedule: &NoiseSchedule, shift: f64) -> Result<NoiseSchedule> {
    if !(shift >= 1.0) || !shift.is_finite() {
        return Err(invalid(format!("shift must be >= 1, got {shift}")));
    }
    if shift == 1.0 {
        return Ok(schedule.clone());
    }
    let t_total = schedule.timesteps();
    let mut alpha_bar = Vec::with_capacity(t_total);
    for t in 1..=t_total {
        let u = t as f64 / t_total as f64;
        let p = warp_position(u, shift) * t_total as f64;
        let i = (p.floor() as usize).min(t_total - 1);
        let frac = p - i as f64;
        let lo = schedule.alpha_bar(i);
        let hi = schedule.alpha_bar(i + 1);
        alpha_bar.push(lo + (hi - lo) * frac);
    }
    let mut beta = Vec::with_capacity(t_total);
    let mut prev = 1.0;
    for (t, &ab) in alpha_bar.iter().enumerate() {
        let alpha = ab / prev;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!(
                "warped schedule is not strictly decreasing at t = {}",
                t + 1
            )));
        }
        beta.push(1.0 - alpha);
        prev = ab;
    }
    let mut out = NoiseSchedule::from_betas(beta)?;
    out.shift = shift;
    Ok(out)
}

/// Spatial map of blend exponents, scalar or per-cell.
///
/// Per-cell maps are `[H, W]` and broadcast over channels and frames.
/// Every entry must be finite and positive.
#[derive(Debug, Clone, PartialEq)]
pub enum DetailControl {
    Uniform(f64),
    Map {
        height: usize,
        width: usize,
        values: Vec<f64>,
    },
}

impl DetailControl {
    pub fn uniform(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(invalid(format!("blend exponent must be > 0, got {alpha}")));
        }
        Ok(Self::Uniform(alpha))
    }

    pub fn map(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(invalid(format!(
                "alpha map length {} does not match {height}x{width}",
                values.len()
            )));
        }
        for (i, &a) in values.iter().enumerate() {
            if !(a > 0.0) || !a.is_finite() {
                return Err(invalid(format!("alpha map entry {a} at index {i} must be > 0")));
            }
        }
        Ok(Self::Map {
            height,
            width,
            values,
        })
    }

    fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if let Self::Map {
            height: mh,
            width: mw,
            ..
        } = self
        {
            if (*mh, *mw) != (height, width) {
                return Err(invalid(format!(
                    "alpha map {mh}x{mw} does not match latent {height}x{width}"
                )));
            }
        }
        Ok(())
    }

    pub fn alpha_at(&self, y: usize, x: usize) -> f64 {
        match self {
            Self::Uniform(a) => *a,
            Self::Map { width, values, .. } => values[y * width + x],
        }
    }
}

/// The scaled cosine decay coefficient `c` of the detail blend.
pub fn blend_coefficient(t: usize, t_total: usize, alpha: f64) -> f64 {
    let base = (1.0 + ((t_total - t) as f64 / t_total as f64 * PI).cos()) / 2.0;
    base.powf(alpha)
}

/// Blends the re-noised anchor `z_tilde` with the live trajectory `z`:
/// `c z_tilde + (1 - c) z` with `c = ((1 + cos((T-t)/T pi)) / 2)^alpha`.
///
/// At `t = T` the anchor passes through exactly; at `t = 0` the live
/// latent does. A larger exponent decays `c` faster, admitting more new
/// detail; per-cell exponents steer regions independently.
pub fn detail_blend(
    z_tilde: &LatentTensor,
    z: &LatentTensor,
    t: usize,
    t_total: usize,
    detail: &DetailControl,
) -> Result<LatentTensor> {
    z_tilde.check_same_shape(z, "detail_blend")?;
    if t > t_total {
        return Err(invalid(format!("t {t} exceeds T {t_total}")));
    }
    detail.check_dims(z_tilde.height(), z_tilde.width())?;

    let mut out = z_tilde.clone();
    match detail {
        DetailControl::Uniform(alpha) => {
            let c = blend_coefficient(t, t_total, *alpha);
            for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
                *o = c * *o + (1.0 - c) * zv;
            }
        }
        DetailControl::Map { width, values, .. } => {
            let plane = z.plane_len();
            for (i, (o, &zv)) in out.data_mut().iter_mut().zip(z.data()).enumerate() {
                let cell = i % plane;
                let alpha = values[(cell / z.width()) * width + cell % z.width()];
                let c = blend_coefficient(t, t_total, alpha);
                *o = c * *o + (1.0 - c) * zv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tensor(values: &[f64], h: usize, w: usize) -> LatentTensor {
        LatentTensor::new(values.to_vec(), 1, None, h, w, 1).unwrap()
    }

    fn random(seed: u64, c: usize, h: usize, w: usize) -> LatentTensor {
        let rng = CounterRng::new(seed);
        LatentTensor::new(rng.normal_vec(c * h * w), c, None, h, w, 1).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar_seq(), &[0.9]);
    }

    #[test]
    fn linear_thousand_step_schedule() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert_relative_eq!(s.alpha_bar(1), 0.9999, epsilon = 1e-15);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        // Independent running product over independently interpolated betas.
        let mut prod = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert_relative_eq!(s.alpha_bar(1000), prod, epsilon = 1e-12);
    }

    #[test]
    fn scaled_linear_interpolates_sqrt_beta() {
        let s = make_schedule(3, 0.01, 0.09, ScheduleKind::ScaledLinear).unwrap();
        // midpoint of sqrt: (0.1 + 0.3)/2 = 0.2, squared = 0.04
        assert_relative_eq!(s.beta()[1], 0.04, epsilon = 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_noise_with_zero_eps_scales_signal() {
        let s = make_schedule(1, 0.36, 0.36, ScheduleKind::Linear).unwrap();
        let z0 = tensor(&[1.0, -2.0, 0.5, 4.0], 2, 2);
        let eps = z0.zeros_like();
        let z = forward_noise(&z0, 1, &eps, &s).unwrap();
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert_relative_eq!(*a, 0.8 * b, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_noise_near_identity_for_tiny_beta() {
        let s = make_schedule(1, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        let z0 = random(1, 1, 8, 8);
        let eps = random(2, 1, 8, 8);
        let z = forward_noise(&z0, 1, &eps, &s).unwrap();
        let budget = 1e-6 * eps.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b).abs() <= budget);
        }
    }

    #[test]
    fn forward_noise_impulse_height() {
        // alpha_bar = 0.64 so the noise weight is sqrt(0.36) = 0.6.
        let s = make_schedule(1, 0.36, 0.36, ScheduleKind::Linear).unwrap();
        let z0 = tensor(&[0.0; 9], 3, 3);
        let mut eps = z0.zeros_like();
        eps.set(0, 0, 1, 1, 1.0);
        let z = forward_noise(&z0, 1, &eps, &s).unwrap();
        assert_relative_eq!(z.get(0, 0, 1, 1), 0.6, epsilon = 1e-15);
        assert_eq!(z.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn forward_noise_rejects_shape_mismatch() {
        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        let z0 = tensor(&[0.0; 4], 2, 2);
        let eps = tensor(&[0.0; 9], 3, 3);
        assert!(forward_noise(&z0, 1, &eps, &s).is_err());
    }

    #[test]
    fn renoise_is_deterministic() {
        let s = make_schedule(10, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let z0 = random(3, 2, 4, 4);
        let a = renoise_to(&z0, 5, &s, 42).unwrap();
        let b = renoise_to(&z0, 5, &s, 42).unwrap();
        assert_eq!(a, b);
        assert!(renoise_to(&z0, 0, &s, 42).is_err());
        assert!(renoise_to(&z0, 11, &s, 42).is_err());
    }

    #[test]
    fn renoise_degenerate_alpha_bar_returns_input() {
        // beta so small that alpha_bar rounds to exactly 1.0.
        let s = make_schedule(1, 1e-300, 1e-300, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0);
        let z0 = random(4, 1, 4, 4);
        let z = renoise_to(&z0, 1, &s, 7).unwrap();
        assert_eq!(z0.data(), z.data());
    }

    #[test]
    fn renoise_residual_has_unit_variance() {
        let s = make_schedule(20, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let k = 12;
        let z0 = random(5, 1, 64, 64);
        let z = renoise_to(&z0, k, &s, 2024).unwrap();
        let ab = s.alpha_bar(k);
        let normalized: Vec<f64> = z
            .data()
            .iter()
            .zip(z0.data())
            .map(|(zt, z0)| (zt - ab.sqrt() * z0) / (1.0 - ab).sqrt())
            .collect();
        let mean = normalized.iter().sum::<f64>() / normalized.len() as f64;
        let var = normalized.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / normalized.len() as f64;
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn ddim_inverts_forward_noise_exactly() {
        let s = make_schedule(50, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        for case in 0..100u64 {
            let z0 = random(100 + case, 1, 4, 4);
            let eps = random(200 + case, 1, 4, 4);
            let t = 1 + (CounterRng::new(case).raw(0) % 50) as usize;
            let z_t = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = reverse_step_ddim(&z_t, &eps, t, 0, &s).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                assert!((a - b).abs() < 1e-10, "case {case} t {t}");
            }
        }
    }

    #[test]
    fn ddim_single_step_schedule_roundtrip() {
        let s = make_schedule(1, 0.2, 0.2, ScheduleKind::Linear).unwrap();
        let z0 = random(7, 1, 4, 4);
        let eps = random(8, 1, 4, 4);
        let z1 = forward_noise(&z0, 1, &eps, &s).unwrap();
        let back = reverse_step_ddim(&z1, &eps, 1, 0, &s).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_matches_two_line_formula() {
        // alpha_bar: t=1 -> 0.81, t=2 -> 0.25.
        let s = NoiseSchedule::from_betas(vec![0.19, 1.0 - 0.25 / 0.81]).unwrap();
        assert_relative_eq!(s.alpha_bar(1), 0.81, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar(2), 0.25, epsilon = 1e-15);
        let z_t = random(9, 1, 3, 3);
        let eps = random(10, 1, 3, 3);
        let got = reverse_step_ddim(&z_t, &eps, 2, 1, &s).unwrap();
        for i in 0..z_t.len() {
            let z = z_t.data()[i];
            let e = eps.data()[i];
            let z0_hat = (z - (1.0f64 - 0.25).sqrt() * e) / 0.25f64.sqrt();
            let want = 0.81f64.sqrt() * z0_hat + (1.0f64 - 0.81).sqrt() * e;
            assert_relative_eq!(got.data()[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_steps() {
        let s = make_schedule(5, 0.01, 0.05, ScheduleKind::Linear).unwrap();
        let z = tensor(&[0.0], 1, 1);
        assert!(reverse_step_ddim(&z, &z, 2, 2, &s).is_err());
        assert!(reverse_step_ddim(&z, &z, 2, 3, &s).is_err());
    }

    #[test]
    fn shift_one_is_identity() {
        let s = make_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let shifted = shift_timesteps(&s, 1.0).unwrap();
        assert_eq!(s, shifted);
    }

    #[test]
    fn warp_midpoint_value() {
        assert_relative_eq!(warp_position(0.5, 3.0), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn shift_resamples_by_linear_interpolation() {
        let s = make_schedule(2, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        // t=1: u=0.5, u'=0.75, p=1.5 -> midpoint of alpha_bar(1), alpha_bar(2).
        let shifted = shift_timesteps(&s, 3.0).unwrap();
        let want = 0.5 * (s.alpha_bar(1) + s.alpha_bar(2));
        assert_relative_eq!(shifted.alpha_bar(1), want, epsilon = 1e-15);
        assert_relative_eq!(shifted.alpha_bar(2), s.alpha_bar(2), epsilon = 1e-15);
    }

    #[test]
    fn shifted_alpha_bar_stays_strictly_decreasing() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        for shift in [1.0, 2.0, 3.0, 5.0] {
            let warped = shift_timesteps(&s, shift).unwrap();
            for t in 2..=1000 {
                assert!(
                    warped.alpha_bar(t) < warped.alpha_bar(t - 1),
                    "shift {shift} t {t}"
                );
            }
            assert!(warped.alpha_bar(1) <= 1.0 && warped.alpha_bar(1000) > 0.0);
        }
    }

    #[test]
    fn shift_rejects_below_one() {
        let s = make_schedule(10, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert!(shift_timesteps(&s, 0.5).is_err());
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let t_total = 40;
        let z_tilde = tensor(&[2.0; 4], 2, 2);
        let z = tensor(&[-1.0; 4], 2, 2);
        let dc = DetailControl::uniform(1.0).unwrap();
        let at_t = detail_blend(&z_tilde, &z, t_total, t_total, &dc).unwrap();
        assert_eq!(at_t.data(), z_tilde.data());
        let at_0 = detail_blend(&z_tilde, &z, 0, t_total, &dc).unwrap();
        assert_eq!(at_0.data(), z.data());
        let mid = detail_blend(&z_tilde, &z, t_total / 2, t_total, &dc).unwrap();
        assert_eq!(mid.data(), &[0.5; 4]);
        assert_eq!(blend_coefficient(t_total / 2, t_total, 2.0), 0.25);
    }

    #[test]
    fn blend_respects_per_cell_map() {
        let z_tilde = tensor(&[1.0; 4], 2, 2);
        let z = tensor(&[0.0; 4], 2, 2);
        let dc = DetailControl::map(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let mid = detail_blend(&z_tilde, &z, 20, 40, &dc).unwrap();
        assert_eq!(mid.data(), &[0.5, 0.25, 0.5, 0.25]);
    }

    #[test]
    fn blend_rejects_mismatches() {
        let a = tensor(&[0.0; 4], 2, 2);
        let b = tensor(&[0.0; 9], 3, 3);
        let dc = DetailControl::uniform(1.0).unwrap();
        assert!(detail_blend(&a, &b, 1, 10, &dc).is_err());
        let bad_map = DetailControl::map(3, 3, vec![1.0; 9]).unwrap();
        assert!(detail_blend(&a, &a, 1, 10, &bad_map).is_err());
        assert!(DetailControl::uniform(0.0).is_err());
        assert!(DetailControl::map(1, 1, vec![-2.0]).is_err());
    }

    proptest! {
        #[test]
        fn blend_is_monotone_in_t(alpha in 0.25f64..4.0) {
            let t_total = 32usize;
            let z_tilde = tensor(&[3.0; 4], 2, 2);
            let z = tensor(&[1.0; 4], 2, 2);
            let dc = DetailControl::uniform(alpha).unwrap();
            let mut prev = f64::INFINITY;
            for t in (0..=t_total).rev() {
                let out = detail_blend(&z_tilde, &z, t, t_total, &dc).unwrap();
                prop_assert!(out.data()[0] <= prev + 1e-15);
                prev = out.data()[0];
            }
        }

        #[test]
        fn roundtrip_forward_reverse(seed in 0u64..500) {
            let s = make_schedule(30, 1e-4, 0.03, ScheduleKind::Linear).unwrap();
            let z0 = random(seed, 1, 4, 4);
            let eps = random(seed + 10_000, 1, 4, 4);
            let t = 1 + (seed % 30) as usize;
            let z_t = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = reverse_step_ddim(&z_t, &eps, t, 0, &s).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
