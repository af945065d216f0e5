//! Shared numerical kernels: latent tensors, resampling, Gaussian
//! filtering, dilated convolution, patch geometry, and scaled softmax.
//!
//! Everything here is a pure function of its inputs. The hot kernels
//! take an [`Exec`] strategy through their `*_exec` variants; the plain
//! entry points use [`Exec::Auto`]. Parallel and sequential runs produce
//! bitwise-identical outputs (see [`crate::parallel`]).

use crate::error::{invalid, numerical, Result};
use crate::parallel::{fill_rows, Exec};

/// A real-valued latent array `[C, (F,) H, W]` carrying a resolution
/// level (`1` = training resolution, doubling per upscale stage).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Vec<f64>,
    channels: usize,
    frames: Option<usize>,
    height: usize,
    width: usize,
    level: u32,
}

impl LatentTensor {
    /// Builds a tensor, validating dimensions and finiteness.
    pub fn new(
        data: Vec<f64>,
        channels: usize,
        frames: Option<usize>,
        height: usize,
        width: usize,
        level: u32,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || frames == Some(0) {
            return Err(invalid(format!(
                "latent dims must be positive, got [{channels}, {frames:?}, {height}, {width}]"
            )));
        }
        if level == 0 {
            return Err(invalid("resolution level must be >= 1"));
        }
        let expect = channels * frames.unwrap_or(1) * height * width;
        if data.len() != expect {
            return Err(invalid(format!(
                "data length {} does not match shape [{channels}, {frames:?}, {height}, {width}] = {expect}",
                data.len()
            )));
        }
        let t = Self {
            data,
            channels,
            frames,
            height,
            width,
            level,
        };
        t.check_finite()?;
        Ok(t)
    }

    /// Zero-filled tensor with the given shape.
    pub fn zeros(channels: usize, frames: Option<usize>, height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; channels * frames.unwrap_or(1) * height * width],
            channels,
            frames,
            height,
            width,
            level: 1,
        }
    }

    /// Same shape and level as `self`, zero-filled.
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `None` for images; `Some(F)` for video latents.
    pub fn frames(&self) -> Option<usize> {
        self.frames
    }

    /// Frame count with images treated as a single frame.
    pub fn frame_count(&self) -> usize {
        self.frames.unwrap_or(1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn with_level(mut self, level: u32) -> Self {
        self.level = level;
        self
    }

    pub fn set_level(&mut self, level: u32) {
        self.level = level;
    }

    /// Number of cells in one `(channel, frame)` plane.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    fn plane_index(&self, c: usize, f: usize) -> usize {
        ((c * self.frame_count()) + f) * self.plane_len()
    }

    /// The spatial plane for channel `c`, frame `f`.
    pub fn plane(&self, c: usize, f: usize) -> &[f64] {
        let start = self.plane_index(c, f);
        &self.data[start..start + self.plane_len()]
    }

    pub fn plane_mut(&mut self, c: usize, f: usize) -> &mut [f64] {
        let start = self.plane_index(c, f);
        let len = self.plane_len();
        &mut self.data[start..start + len]
    }

    pub fn get(&self, c: usize, f: usize, y: usize, x: usize) -> f64 {
        self.data[self.plane_index(c, f) + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, f: usize, y: usize, x: usize, v: f64) {
        let i = self.plane_index(c, f) + y * self.width + x;
        self.data[i] = v;
    }

    /// Errors with a `NumericalFailure` if any entry is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(numerical(format!(
                "non-finite entry {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Verifies `other` has identical shape (level may differ).
    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.channels != other.channels
            || self.frames != other.frames
            || self.height != other.height
            || self.width != other.width
        {
            return Err(invalid(format!(
                "{what}: shape mismatch [{}, {:?}, {}, {}] vs [{}, {:?}, {}, {}]",
                self.channels,
                self.frames,
                self.height,
                self.width,
                other.channels,
                other.frames,
                other.height,
                other.width
            )));
        }
        Ok(())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "zip")?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    /// Mean over all entries.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// A regular grid of overlapping spatial windows.
///
/// Offsets run row-major (top-left window first). Construction requires
/// `(H - h) % d_h == 0` and `(W - w) % d_w == 0` so windows land exactly
/// on the far edge, and `stride <= window` so every cell is covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    window: (usize, usize),
    stride: (usize, usize),
    dims: (usize, usize),
    counts: (usize, usize),
}

impl PatchGrid {
    pub fn new(window: (usize, usize), stride: (usize, usize), dims: (usize, usize)) -> Result<Self> {
        let (h, w) = window;
        let (dh, dw) = stride;
        let (height, width) = dims;
        for (name, win, st, dim) in [("height", h, dh, height), ("width", w, dw, width)] {
            if win == 0 || st == 0 {
                return Err(invalid(format!("patch {name}: window and stride must be positive")));
            }
            if win > dim {
                return Err(invalid(format!(
                    "patch {name}: window {win} exceeds tensor extent {dim}"
                )));
            }
            if (dim - win) % st != 0 {
                return Err(invalid(format!(
                    "patch {name}: extent {dim} minus window {win} is not divisible by stride {st}"
                )));
            }
            if st > win {
                return Err(invalid(format!(
                    "patch {name}: stride {st} exceeds window {win}, leaving uncovered cells"
                )));
            }
        }
        Ok(Self {
            window,
            stride,
            dims,
            counts: ((height - h) / dh + 1, (width - w) / dw + 1),
        })
    }

    /// Grid covering the whole tensor with a single window.
    pub fn whole(dims: (usize, usize)) -> Self {
        Self {
            window: dims,
            stride: dims,
            dims,
            counts: (1, 1),
        }
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    /// Total number of windows.
    pub fn count(&self) -> usize {
        self.counts.0 * self.counts.1
    }

    /// Top-left offsets in row-major order.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (rows, cols) = self.counts;
        let (dh, dw) = self.stride;
        (0..rows).flat_map(move |r| (0..cols).map(move |c| (r * dh, c * dw)))
    }
}

/// A normalized, symmetric Gaussian low-pass kernel.
///
/// Radius is `ceil(3 sigma)`; the center tap absorbs the normalization
/// residue so the taps sum to exactly 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFilter {
    sigma: f64,
    kernel: Vec<f64>,
}

impl FrequencyFilter {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("gaussian sigma must be > 0, got {sigma}")));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let mut kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = kernel.iter().sum();
        for v in &mut kernel {
            *v /= sum;
        }
        let resid = 1.0 - kernel.iter().sum::<f64>();
        kernel[radius] += resid;
        Ok(Self { sigma, kernel })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        (self.kernel.len() - 1) / 2
    }

    /// The 1-D taps, center at index `radius`.
    pub fn taps(&self) -> &[f64] {
        &self.kernel
    }
}

/// A dense convolution kernel `[C_out, C_in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
    data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(invalid(format!("kernel size must be odd, got {size}")));
        }
        if data.len() != out_channels * in_channels * size * size {
            return Err(invalid(format!(
                "kernel data length {} does not match [{out_channels}, {in_channels}, {size}, {size}]",
                data.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            size,
            data,
        })
    }

    pub fn get(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.data[((co * self.in_channels + ci) * self.size + ky) * self.size + kx]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Identity kernel: channel pass-through impulse at the center.
    pub fn identity(channels: usize, size: usize) -> Result<Self> {
        let mut k = Self::new(channels, channels, size, vec![0.0; channels * channels * size * size])?;
        let c = size / 2;
        for ch in 0..channels {
            let i = ((ch * channels + ch) * size + c) * size + c;
            k.data[i] = 1.0;
        }
        Ok(k)
    }
}

/// Integer-factor bilinear upsampling of the spatial axes.
///
/// Output cell `i` samples input coordinate `(i + 0.5)/scale - 0.5`,
/// edge-clamped (sample-center alignment). Frames are untouched; the
/// resolution level is multiplied by `scale`. `scale == 1` returns the
/// input bitwise unchanged.
pub fn upsample_bilinear(x: &LatentTensor, scale: usize) -> Result<LatentTensor> {
    upsample_bilinear_exec(x, scale, Exec::Auto)
}

pub fn upsample_bilinear_exec(x: &LatentTensor, scale: usize, exec: Exec) -> Result<LatentTensor> {
    if scale == 0 {
        return Err(invalid("upsample scale must be >= 1"));
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    let (h_in, w_in) = (x.height, x.width);
    let (h_out, w_out) = (h_in * scale, w_in * scale);
    let planes = x.channels * x.frame_count();
    let mut data = vec![0.0; planes * h_out * w_out];

    // Precompute the per-axis sample positions once.
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h_in, h_out);
    let xs = axis(w_in, w_out);

    fill_rows(exec, &mut data, w_out, |row_idx, row| {
        let plane = row_idx / h_out;
        let y = row_idx % h_out;
        let src = &x.data[plane * h_in * w_in..(plane + 1) * h_in * w_in];
        let (y0, y1, fy) = ys[y];
        for (out, &(x0, x1, fx)) in row.iter_mut().zip(&xs) {
            let top = src[y0 * w_in + x0] * (1.0 - fx) + src[y0 * w_in + x1] * fx;
            let bot = src[y1 * w_in + x0] * (1.0 - fx) + src[y1 * w_in + x1] * fx;
            *out = top * (1.0 - fy) + bot * fy;
        }
    });

    LatentTensor::new(
        data,
        x.channels,
        x.frames,
        h_out,
        w_out,
        x.level * scale as u32,
    )
}

/// Index folding for symmetric (edge-repeating) reflection padding.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with symmetric reflection padding.
///
/// Symmetric padding makes the blur mass-preserving: the spatial mean of
/// the output equals the spatial mean of the input.
pub fn gaussian_lowpass(x: &LatentTensor, filter: &FrequencyFilter) -> Result<LatentTensor> {
    gaussian_lowpass_exec(x, filter, Exec::Auto)
}

pub fn gaussian_lowpass_exec(
    x: &LatentTensor,
    filter: &FrequencyFilter,
    exec: Exec,
) -> Result<LatentTensor> {
    let taps = filter.taps();
    let radius = filter.radius() as isize;
    let (h, w) = (x.height, x.width);

    // Horizontal pass.
    let mut mid = vec![0.0; x.data.len()];
    fill_rows(exec, &mut mid, w, |row_idx, row| {
        let src = &x.data[row_idx * w..(row_idx + 1) * w];
        for (xi, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ti, &tap) in taps.iter().enumerate() {
                let j = reflect(xi as isize + ti as isize - radius, w);
                acc += tap * src[j];
            }
            *out = acc;
        }
    });

    // Vertical pass.
    let mut data = vec![0.0; x.data.len()];
    fill_rows(exec, &mut data, w, |row_idx, row| {
        let plane = row_idx / h;
        let y = row_idx % h;
        let src = &mid[plane * h * w..(plane + 1) * h * w];
        for (xi, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ti, &tap) in taps.iter().enumerate() {
                let j = reflect(y as isize + ti as isize - radius, h);
                acc += tap * src[j * w + xi];
            }
            *out = acc;
        }
    });

    LatentTensor::new(data, x.channels, x.frames, h, w, x.level)
}

/// Dilated 2-D convolution with zero same-padding.
///
/// Tap `q` of the kernel reads input offset `d * (q - center)` along
/// each spatial axis; `d = 1` is ordinary convolution. Applied per
/// frame; spatial shape is preserved.
pub fn conv2d_dilated(x: &LatentTensor, kernel: &ConvKernel, d: usize) -> Result<LatentTensor> {
    conv2d_dilated_exec(x, kernel, d, Exec::Auto)
}

pub fn conv2d_dilated_exec(
    x: &LatentTensor,
    kernel: &ConvKernel,
    d: usize,
    exec: Exec,
) -> Result<LatentTensor> {
    if d == 0 {
        return Err(invalid("dilation factor must be >= 1"));
    }
    if kernel.in_channels != x.channels {
        return Err(invalid(format!(
            "kernel expects {} input channels, tensor has {}",
            kernel.in_channels, x.channels
        )));
    }
    let (h, w) = (x.height, x.width);
    let frames = x.frame_count();
    let k = kernel.size;
    let center = (k / 2) as isize;
    let d = d as isize;

    let mut data = vec![0.0; kernel.out_channels * frames * h * w];
    fill_rows(exec, &mut data, w, |row_idx, row| {
        let y = (row_idx % h) as isize;
        let f = (row_idx / h) % frames;
        let co = row_idx / (h * frames);
        for (xi, out) in row.iter_mut().enumerate() {
            let xi = xi as isize;
            let mut acc = 0.0;
            for ci in 0..kernel.in_channels {
                let src = x.plane(ci, f);
                for ky in 0..k {
                    let sy = y + d * (ky as isize - center);
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xi + d * (kx as isize - center);
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += kernel.get(co, ci, ky, kx) * src[sy as usize * w + sx as usize];
                    }
                }
            }
            *out = acc;
        }
    });

    LatentTensor::new(data, kernel.out_channels, x.frames, h, w, x.level)
}

/// Extracts the grid's windows in row-major order.
///
/// Each patch keeps all channels and frames; only the spatial extent is
/// cropped. Patch `n` covers offset `grid.offsets()[n]`.
pub fn extract_patches(x: &LatentTensor, grid: &PatchGrid) -> Result<Vec<LatentTensor>> {
    if grid.dims() != (x.height, x.width) {
        return Err(invalid(format!(
            "patch grid built for {:?}, tensor is {}x{}",
            grid.dims(),
            x.height,
            x.width
        )));
    }
    let (ph, pw) = grid.window();
    let planes = x.channels * x.frame_count();
    grid.offsets()
        .map(|(oy, ox)| {
            let mut data = Vec::with_capacity(planes * ph * pw);
            for p in 0..planes {
                let src = &x.data[p * x.plane_len()..(p + 1) * x.plane_len()];
                for y in 0..ph {
                    let start = (oy + y) * x.width + ox;
                    data.extend_from_slice(&src[start..start + pw]);
                }
            }
            LatentTensor::new(data, x.channels, x.frames, ph, pw, x.level)
        })
        .collect()
}

/// Reassembles patches onto the grid, averaging overlapped cells.
///
/// Contributions accumulate in row-major patch order regardless of how
/// the patches were produced, so the result is bit-stable under any
/// parallel schedule upstream.
pub fn reconstruct_patches(
    patches: &[LatentTensor],
    grid: &PatchGrid,
    level: u32,
) -> Result<LatentTensor> {
    if patches.len() != grid.count() {
        return Err(invalid(format!(
            "expected {} patches for the grid, got {}",
            grid.count(),
            patches.len()
        )));
    }
    let first = &patches[0];
    let (ph, pw) = grid.window();
    let (h, w) = grid.dims();
    for (i, p) in patches.iter().enumerate() {
        if (p.height, p.width) != (ph, pw) {
            return Err(invalid(format!(
                "patch {i} is {}x{}, grid window is {ph}x{pw}",
                p.height, p.width
            )));
        }
        first.check_same_shape(p, "reconstruct_patches")?;
    }

    let planes = first.channels * first.frame_count();
    let mut sums = vec![0.0; planes * h * w];
    let mut counts = vec![0u32; h * w];

    for ((oy, ox), patch) in grid.offsets().zip(patches) {
        for p in 0..planes {
            let src = &patch.data[p * ph * pw..(p + 1) * ph * pw];
            let dst = &mut sums[p * h * w..(p + 1) * h * w];
            for y in 0..ph {
                let drow = (oy + y) * w + ox;
                let srow = y * pw;
                for x in 0..pw {
                    dst[drow + x] += src[srow + x];
                }
            }
        }
        for y in 0..ph {
            let drow = (oy + y) * w + ox;
            for x in 0..pw {
                counts[drow + x] += 1;
            }
        }
    }

    for p in 0..planes {
        let dst = &mut sums[p * h * w..(p + 1) * h * w];
        for (v, &c) in dst.iter_mut().zip(&counts) {
            debug_assert!(c > 0);
            *v /= f64::from(c);
        }
    }

    LatentTensor::new(sums, first.channels, first.frames, h, w, level)
}

/// Row-wise temperature-scaled softmax: `softmax(scores / (t * sqrt(d')))`.
///
/// Uses max subtraction for stability. `scores` is treated as a matrix
/// of contiguous rows of length `row_len`.
pub fn softmax_scaled(scores: &[f64], row_len: usize, t: f64, d_prime: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid(format!("softmax temperature must be > 0, got {t}")));
    }
    if !(d_prime > 0.0) || !d_prime.is_finite() {
        return Err(invalid(format!("softmax scale d' must be > 0, got {d_prime}")));
    }
    if row_len == 0 || scores.len() % row_len != 0 {
        return Err(invalid(format!(
            "score length {} is not a multiple of row length {row_len}",
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax scores must be finite"));
    }
    let denom = t * d_prime.sqrt();
    let mut out = vec![0.0; scores.len()];
    for (row_in, row_out) in scores.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let max = row_in.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / denom));
        let mut sum = 0.0;
        for (o, &s) in row_out.iter_mut().zip(row_in) {
            *o = (s / denom - max).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}
