//! Per-frame heatmaps rendered as binary PGM.

use crate::error::{Error, Result};

/// Saliency values normalized into [0, 1] over one frame.
///
/// A constant input has no contrast to show; it normalizes to all zeros
/// and sets `constant_input` so callers can surface a warning.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    constant_input: bool,
}

impl Heatmap {
    /// Min-max normalize `raw` (row-major, height x width).
    pub fn normalize(height: usize, width: usize, raw: &[f64]) -> Result<Heatmap> {
        if height == 0 || width == 0 || raw.len() != height * width {
            return Err(Error::Shape(format!(
                "heatmap {height}x{width} needs {} values, got {}",
                height * width,
                raw.len()
            )));
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("heatmap input".into()));
        }
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            return Ok(Heatmap {
                height,
                width,
                values: vec![0.0; raw.len()],
                constant_input: true,
            });
        }
        let span = max - min;
        Ok(Heatmap {
            height,
            width,
            values: raw.iter().map(|v| (v - min) / span).collect(),
            constant_input: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn constant_input(&self) -> bool {
        self.constant_input
    }

    /// Binary PGM (P5, maxval 255); gray = round-half-up of value * 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8),
        );
        out
    }
}
