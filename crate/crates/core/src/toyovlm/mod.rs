//! A miniature object-level vision-language detector.
//!
//! Structure: strided convolutional stem producing an `M`-scale feature
//! pyramid, `L` cross-modal stages (per-scale residual conv followed by
//! bidirectional single-head cross-attention between region rows and prompt
//! rows), and a dense grounding head scoring every cell against every prompt
//! row. Prompt rows carry no positional encoding.

mod decode;
mod model;
mod tokens;

pub use decode::{decode_detections, Detection, DecodeParams};
pub use model::{Backward, ForwardCache, ForwardOutput, GradTarget, StageCache, ToyOvlm};
pub use tokens::{TokenKind, TokenSequence, Vocab, NO_OBJECT_TOKEN, OOV_TOKEN};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct OvlmConfig {
    /// Number of cross-modal stages `L`.
    pub stages: usize,
    /// Number of pyramid scales `M`.
    pub scales: usize,
    pub d_visual: usize,
    pub d_text: usize,
    /// Largest-scale feature grid.
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub stem_channels: usize,
    pub ffn_hidden: usize,
}

impl Default for OvlmConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            scales: 3,
            d_visual: 32,
            d_text: 32,
            grid_h: 16,
            grid_w: 16,
            image_size: 64,
            vocab_size: 32,
            stem_channels: 48,
            ffn_hidden: 64,
        }
    }
}

impl OvlmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VistexError::InvalidConfig(m));
        if self.stages == 0 || self.scales == 0 {
            return bad("stages and scales must be >= 1".into());
        }
        let div = 1usize << (self.scales - 1);
        if self.grid_h % div != 0 || self.grid_w % div != 0 || self.grid_h == 0 || self.grid_w == 0 {
            return bad(format!(
                "grid {}x{} not divisible by 2^(M-1) = {div}",
                self.grid_h, self.grid_w
            ));
        }
        if self.image_size % self.grid_h != 0
            || self.image_size / self.grid_h != self.image_size / self.grid_w
            || !(self.image_size / self.grid_h).is_power_of_two()
        {
            return bad(format!(
                "image size {} must be a power-of-two multiple of the grid",
                self.image_size
            ));
        }
        if self.d_visual == 0 || self.d_text == 0 || self.vocab_size < 2 {
            return bad("feature widths must be positive and vocab_size >= 2".into());
        }
        Ok(())
    }

    /// `(rows_j, h_j, w_j)` for every scale `j`, halving each time.
    pub fn scale_grids(&self) -> Vec<(usize, usize)> {
        (0..self.scales)
            .map(|j| (self.grid_h >> j, self.grid_w >> j))
            .collect()
    }

    pub fn scale_rows(&self) -> Vec<usize> {
        self.scale_grids().iter().map(|(h, w)| h * w).collect()
    }

    /// Total region rows over all scales.
    pub fn region_rows(&self) -> usize {
        self.scale_rows().iter().sum()
    }

    /// Number of stride-2 convolutions in the stem (0 means one stride-1 conv).
    pub fn stem_downsamples(&self) -> usize {
        (self.image_size / self.grid_h).trailing_zeros() as usize
    }

    /// Closed-form number of named tensors in a detector checkpoint.
    pub fn tensor_count(&self) -> usize {
        let stem_layers = self.stem_downsamples().max(1);
        1 + 2 * stem_layers + 2 * (self.scales - 1) + self.stages * (2 * self.scales + 10) + 4
    }
}

/// Region features `R^i = [R^{i,(j)}]_j` at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub stage: usize,
    /// Scale `j` holds `(H/2^j)·(W/2^j)` rows of width `d_I`, row-major over
    /// the grid.
    pub scales: Vec<Mat>,
}

impl MultiScaleFeatures {
    pub fn concat(&self) -> Mat {
        Mat::vstack(&self.scales.iter().collect::<Vec<_>>())
    }

    pub fn row_counts(&self) -> Vec<usize> {
        self.scales.iter().map(|m| m.rows).collect()
    }
}

/// Geometry of one scale's cell grid in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGrid {
    pub h: usize,
    pub w: usize,
    pub stride_x: f64,
    pub stride_y: f64,
}

impl CellGrid {
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (y, x) = (cell / self.w, cell % self.w);
        ((x as f64 + 0.5) * self.stride_x, (y as f64 + 0.5) * self.stride_y)
    }
}

/// Dense head output: per scale, `cells × T` alignment logits and `cells × 4`
/// box offsets `(left, top, right, bottom)` in units of the cell stride.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOutput {
    pub logits: Vec<Mat>,
    pub box_deltas: Vec<Mat>,
    pub grids: Vec<CellGrid>,
    pub image_size: usize,
}

impl GroundingOutput {
    pub fn token_count(&self) -> usize {
        self.logits.first().map_or(0, |m| m.cols)
    }
}
