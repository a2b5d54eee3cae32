//! Video latents and their token view.
//!
//! A latent video is a dense `(frames, height, width, channels)` grid stored
//! row-major. The token view flattens the spatial grid (channels stay inside
//! each token) in scan order: frame-major, then rows, then columns. The
//! patch size is fixed at one latent cell per token.

use crate::error::{Error, Result};
use crate::math::Mat;

/// Dense latent video, row-major `(f, h, w, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<LatentVideo> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "latent dims must be positive, got {frames}x{height}x{width}x{channels}"
            )));
        }
        let need = frames * height * width * channels;
        if data.len() != need {
            return Err(Error::Shape(format!(
                "latent {frames}x{height}x{width}x{channels} needs {need} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent video".into()));
        }
        Ok(LatentVideo {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> LatentVideo {
        LatentVideo {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.frames, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, f: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[((f * self.height + h) * self.width + w) * self.channels + c]
    }

    /// Channel vector at one spatial position.
    pub fn cell(&self, f: usize, h: usize, w: usize) -> &[f64] {
        let base = ((f * self.height + h) * self.width + w) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn same_shape(&self, other: &LatentVideo) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    /// Elementwise `a*self + b*other`.
    pub fn blend(&self, a: f64, other: &LatentVideo, b: f64) -> Result<LatentVideo> {
        if !self.same_shape(other) {
            return Err(Error::Shape("blend of differently shaped latents".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(LatentVideo {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Spatial token grid of a latent video; tokens are numbered in scan order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    frames: usize,
    height: usize,
    width: usize,
}

impl TokenLayout {
    pub fn new(frames: usize, height: usize, width: usize) -> TokenLayout {
        TokenLayout {
            frames,
            height,
            width,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn token_count(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, f: usize, h: usize, w: usize) -> usize {
        debug_assert!(f < self.frames && h < self.height && w < self.width);
        f * self.height * self.width + h * self.width + w
    }

    pub fn position(&self, token: usize) -> (usize, usize, usize) {
        debug_assert!(token < self.token_count());
        let per_frame = self.height * self.width;
        let f = token / per_frame;
        let rem = token % per_frame;
        (f, rem / self.width, rem % self.width)
    }

    /// Token index range of one frame.
    pub fn frame_range(&self, f: usize) -> std::ops::Range<usize> {
        let per_frame = self.tokens_per_frame();
        f * per_frame..(f + 1) * per_frame
    }
}

/// Video tokens, one row per spatial position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    data: Mat,
}

impl TokenSequence {
    pub fn new(data: Mat) -> TokenSequence {
        TokenSequence { data }
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn mat(&self) -> &Mat {
        &self.data
    }

    pub fn into_mat(self) -> Mat {
        self.data
    }
}

/// Prompt embedding rows plus the indices of the rows naming the subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    data: Mat,
    subject_indices: Vec<usize>,
}

impl PromptTokens {
    pub fn new(data: Mat, subject_indices: Vec<usize>) -> Result<PromptTokens> {
        if subject_indices.is_empty() {
            return Err(Error::Config("subject index list is empty".into()));
        }
        if let Some(&bad) = subject_indices.iter().find(|&&s| s >= data.rows()) {
            return Err(Error::Config(format!(
                "subject index {bad} out of range for {} prompt tokens",
                data.rows()
            )));
        }
        if !subject_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "subject indices must be strictly increasing, got {subject_indices:?}"
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("prompt tokens".into()));
        }
        Ok(PromptTokens {
            data,
            subject_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn mat(&self) -> &Mat {
        &self.data
    }

    pub fn subject_indices(&self) -> &[usize] {
        &self.subject_indices
    }
}

/// Embed each latent cell's channel vector with `embed` (channels x d).
pub fn tokenize(v: &LatentVideo, embed: &Mat) -> Result<(TokenSequence, TokenLayout)> {
    if embed.rows() != v.channels() {
        return Err(Error::Shape(format!(
            "embed map has {} input channels, latent has {}",
            embed.rows(),
            v.channels()
        )));
    }
    let layout = v.layout();
    let d = embed.cols();
    let mut out = Mat::zeros(layout.token_count(), d);
    for f in 0..v.frames() {
        for h in 0..v.height() {
            for w in 0..v.width() {
                let token = layout.index(f, h, w);
                let cell = v.cell(f, h, w);
                let row = out.row_mut(token);
                for (c, x) in cell.iter().enumerate() {
                    if *x == 0.0 {
                        continue;
                    }
                    let erow = embed.row(c);
                    for j in 0..d {
                        row[j] += x * erow[j];
                    }
                }
            }
        }
    }
    Ok((TokenSequence::new(out), layout))
}

/// Map each token row back to a channel vector with `project` (d x channels).
pub fn detokenize(s: &TokenSequence, layout: TokenLayout, project: &Mat) -> Result<LatentVideo> {
    if s.len() != layout.token_count() {
        return Err(Error::Shape(format!(
            "{} tokens do not fill a {}x{}x{} layout",
            s.len(),
            layout.frames(),
            layout.height(),
            layout.width()
        )));
    }
    if project.rows() != s.dim() {
        return Err(Error::Shape(format!(
            "projection takes {} dims, tokens have {}",
            project.rows(),
            s.dim()
        )));
    }
    let cells = s.mat().matmul(project)?;
    let channels = project.cols();
    let mut data = Vec::with_capacity(layout.token_count() * channels);
    for token in 0..layout.token_count() {
        data.extend_from_slice(cells.row(token));
    }
    LatentVideo::new(
        layout.frames(),
        layout.height(),
        layout.width(),
        channels,
        data,
    )
}
