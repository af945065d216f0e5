//! Prompt conditioning without a text encoder.
//!
//! A prompt maps to a fixed-length sequence of pseudo-embedding tokens
//! drawn from a seeded table keyed by the prompt's hash. That is enough
//! to exercise cross-attention, classifier-free guidance, and
//! region-wise prompt injection at toy scale.

use crate::error::{invalid, Result};
use crate::linalg::Mat;
use crate::rng::{fnv1a, CounterRng};

/// Number of prompt tokens every condition carries.
pub const PROMPT_TOKENS: usize = 4;

/// A conditioning sequence: `[PROMPT_TOKENS, dim]` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub tokens: Mat,
    pub prompt: String,
}

impl Conditioning {
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Seeded embedding table mapping prompt strings to token sequences.
#[derive(Debug, Clone, Copy)]
pub struct PromptEmbedder {
    seed: u64,
    dim: usize,
}

impl PromptEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Deterministic tokens for a prompt; identical strings embed
    /// identically, distinct strings decorrelate via the hash.
    pub fn embed(&self, prompt: &str) -> Conditioning {
        let rng = CounterRng::new(self.seed).derive(fnv1a(prompt));
        let bound = 1.0 / (self.dim as f64).sqrt();
        let data = (0..PROMPT_TOKENS * self.dim)
            .map(|i| rng.uniform_symmetric(i as u64, bound))
            .collect();
        Conditioning {
            tokens: Mat::new(PROMPT_TOKENS, self.dim, data).expect("token shape"),
            prompt: prompt.to_string(),
        }
    }

    /// The unconditional (empty-prompt) embedding used by guidance.
    pub fn uncond(&self) -> Conditioning {
        self.embed("")
    }
}

/// A binary spatial mask at latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(invalid(format!(
                "mask length {} does not match {height}x{width}",
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    /// Axis-aligned rectangle `[y0, y0+h) x [x0, x0+w)`.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > height || x0 + w > width {
            return Err(invalid(format!(
                "rect {y0},{x0} {h}x{w} exceeds mask extent {height}x{width}"
            )));
        }
        let mut cells = vec![false; height * width];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                cells[y * width + x] = true;
            }
        }
        Self::new(height, width, cells)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// First cell covered by both masks, if any.
    pub fn overlap_cell(&self, other: &Self) -> Option<(usize, usize)> {
        if (self.height, self.width) != (other.height, other.width) {
            return None;
        }
        self.cells
            .iter()
            .zip(&other.cells)
            .position(|(a, b)| *a && *b)
            .map(|i| (i / self.width, i % self.width))
    }

    /// Nearest-neighbor resample to an attention map's extent.
    pub fn downsample_nearest(&self, height: usize, width: usize) -> Self {
        let cells = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                let sy = y * self.height / height;
                let sx = x * self.width / width;
                self.cells[sy * self.width + sx]
            })
            .collect();
        Self {
            height,
            width,
            cells,
        }
    }
}

/// Disjoint masks, each carrying its own conditioning; query positions
/// outside every mask fall back to the global condition.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionConditions {
    regions: Vec<(RegionMask, Conditioning)>,
}

impl RegionConditions {
    pub fn new(regions: Vec<(RegionMask, Conditioning)>) -> Result<Self> {
        for i in 0..regions.len() {
            for j in i + 1..regions.len() {
                if regions[i].0.dims() != regions[j].0.dims() {
                    return Err(invalid("region masks must share one extent"));
                }
                if let Some((y, x)) = regions[i].0.overlap_cell(&regions[j].0) {
                    return Err(invalid(format!(
                        "region masks {i} and {j} overlap at cell ({y}, {x})"
                    )));
                }
            }
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[(RegionMask, Conditioning)] {
        &self.regions
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Per-query region selector for an attention map of `h x w`
    /// positions: `None` = global condition, `Some(i)` = region `i`.
    /// Masks are nearest-downsampled; the first covering region wins.
    pub fn selector(&self, h: usize, w: usize) -> Vec<Option<usize>> {
        let downsampled: Vec<RegionMask> = self
            .regions
            .iter()
            .map(|(m, _)| m.downsample_nearest(h, w))
            .collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                downsampled.iter().position(|m| m.get(y, x))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_deterministic_and_prompt_keyed() {
        let e = PromptEmbedder::new(1, 8);
        let a = e.embed("a castle");
        let b = e.embed("a castle");
        let c = e.embed("a cat");
        assert_eq!(a, b);
        assert_ne!(a.tokens.data(), c.tokens.data());
        assert_eq!(a.tokens.rows(), PROMPT_TOKENS);
    }

    #[test]
    fn masks_report_overlap_cell() {
        let a = RegionMask::rect(4, 4, 0, 0, 2, 2).unwrap();
        let b = RegionMask::rect(4, 4, 1, 1, 2, 2).unwrap();
        assert_eq!(a.overlap_cell(&b), Some((1, 1)));
        let c = RegionMask::rect(4, 4, 2, 2, 2, 2).unwrap();
        assert_eq!(a.overlap_cell(&c), None);
    }

    #[test]
    fn region_conditions_reject_overlap() {
        let e = PromptEmbedder::new(1, 8);
        let a = RegionMask::rect(4, 4, 0, 0, 2, 4).unwrap();
        let b = RegionMask::rect(4, 4, 1, 0, 2, 4).unwrap();
        let err = RegionConditions::new(vec![
            (a.clone(), e.embed("x")),
            (b, e.embed("y")),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("overlap at cell (1, 0)"), "{err}");
        let c = RegionMask::rect(4, 4, 2, 0, 2, 4).unwrap();
        assert!(RegionConditions::new(vec![(a, e.embed("x")), (c, e.embed("y"))]).is_ok());
    }

    #[test]
    fn selector_downsamples_and_falls_back() {
        let e = PromptEmbedder::new(1, 8);
        let top = RegionMask::rect(4, 4, 0, 0, 2, 4).unwrap();
        let rc = RegionConditions::new(vec![(top, e.embed("sky"))]).unwrap();
        let sel = rc.selector(2, 2);
        assert_eq!(sel, vec![Some(0), Some(0), None, None]);
    }
}
