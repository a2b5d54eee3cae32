//! Foreground disentanglement.
//!
//! Attention traced from the reference branch tells us which video tokens
//! the subject's prompt tokens couple to. Aggregating that coupling over
//! blocks gives a per-token saliency volume; selecting the strongest
//! tokens per frame gives the foreground mask; the masked tokens' cached
//! keys and values are what the target branch later attends into.

use crate::error::{Error, Result};
use crate::latent::TokenLayout;
use crate::mmdit::BlockTrace;
use crate::rmtm::InjectionSpec;

/// Per-token subject saliency over the full video grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyVolume {
    layout: TokenLayout,
    values: Vec<f64>,
}

impl SaliencyVolume {
    pub fn new(layout: TokenLayout, values: Vec<f64>) -> Result<SaliencyVolume> {
        if values.len() != layout.token_count() {
            return Err(Error::Shape(format!(
                "saliency needs {} values, got {}",
                layout.token_count(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("saliency volume".into()));
        }
        if let Some(bad) = values.iter().find(|&&v| v < 0.0) {
            return Err(Error::Numeric(format!(
                "saliency must be nonnegative, got {bad}"
            )));
        }
        Ok(SaliencyVolume { layout, values })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values of one frame, in scan order.
    pub fn frame(&self, f: usize) -> &[f64] {
        &self.values[self.layout.frame_range(f)]
    }
}

/// Which tokens count as foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    layout: TokenLayout,
    mask: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(layout: TokenLayout, mask: Vec<bool>) -> Result<ForegroundMask> {
        if mask.len() != layout.token_count() {
            return Err(Error::Shape(format!(
                "mask needs {} entries, got {}",
                layout.token_count(),
                mask.len()
            )));
        }
        Ok(ForegroundMask { layout, mask })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn contains(&self, token: usize) -> bool {
        self.mask[token]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Selected token indices in ascending order.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.mask
    }
}

/// Per-frame rule for turning saliency into a mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionPolicy {
    /// Keep the strongest `ceil(q * tokens_per_frame)` tokens of each frame.
    TopFraction { q: f64 },
    /// Keep tokens at or above `tau` times the frame's maximum.
    Threshold { tau: f64 },
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        let (name, v) = match self {
            SelectionPolicy::TopFraction { q } => ("fraction", *q),
            SelectionPolicy::Threshold { tau } => ("threshold", *tau),
        };
        if !(v.is_finite() && 0.0 < v && v <= 1.0) {
            return Err(Error::Config(format!(
                "selection {name} must lie in (0, 1], got {v}"
            )));
        }
        Ok(())
    }
}

/// Sum, over subject prompt tokens, of prompt-to-video and video-to-prompt
/// attention for every video token, averaged over the traced blocks.
pub fn aggregate_subject_saliency(
    traces: &[BlockTrace],
    subject: &[usize],
    layout: &TokenLayout,
) -> Result<SaliencyVolume> {
    if traces.is_empty() {
        return Err(Error::Shape("no traces to aggregate".into()));
    }
    if subject.is_empty() {
        return Err(Error::Config("subject token list is empty".into()));
    }
    let n = layout.token_count();
    let mut acc = vec![0.0; n];
    for trace in traces {
        let a = &trace.attn;
        if a.n() != n {
            return Err(Error::Shape(format!(
                "trace covers {} video tokens, layout has {n}",
                a.n()
            )));
        }
        for &s in subject {
            if s >= a.m() {
                return Err(Error::Config(format!(
                    "subject token {s} out of range for {} prompt tokens",
                    a.m()
                )));
            }
            for (j, slot) in acc.iter_mut().enumerate() {
                *slot += a.mat().get(s, a.m() + j) + a.mat().get(a.m() + j, s);
            }
        }
    }
    let scale = 1.0 / traces.len() as f64;
    SaliencyVolume::new(*layout, acc.into_iter().map(|v| v * scale).collect())
}

/// Apply the policy frame by frame. Ranking ties keep the earlier token.
pub fn select_foreground(
    vol: &SaliencyVolume,
    policy: &SelectionPolicy,
) -> Result<ForegroundMask> {
    policy.validate()?;
    let layout = vol.layout();
    let mut mask = vec![false; layout.token_count()];
    for f in 0..layout.frames() {
        let range = layout.frame_range(f);
        let frame = vol.frame(f);
        match policy {
            SelectionPolicy::TopFraction { q } => {
                let k = ((q * frame.len() as f64).ceil() as usize).clamp(1, frame.len());
                let mut order: Vec<usize> = (0..frame.len()).collect();
                order.sort_by(|&a, &b| frame[b].total_cmp(&frame[a]).then(a.cmp(&b)));
                for &i in &order[..k] {
                    mask[range.start + i] = true;
                }
            }
            SelectionPolicy::Threshold { tau } => {
                let max = frame.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (i, &v) in frame.iter().enumerate() {
                    if v >= tau * max {
                        mask[range.start + i] = true;
                    }
                }
            }
        }
    }
    ForegroundMask::new(layout, mask)
}

/// Pull the masked tokens' cached keys and values out of a block trace,
/// in ascending token order, ready for injection. An empty mask yields an
/// injection that adds nothing.
pub fn gather_reference_kv(
    trace: &BlockTrace,
    mask: &ForegroundMask,
    lambda: f64,
) -> Result<InjectionSpec> {
    let selected = mask.selected();
    let mut keys = Vec::with_capacity(trace.kv.keys.len());
    let mut values = Vec::with_capacity(trace.kv.values.len());
    for (k, v) in trace.kv.keys.iter().zip(&trace.kv.values) {
        if k.rows() != mask.layout().token_count() {
            return Err(Error::Shape(format!(
                "cache holds {} video tokens, mask layout has {}",
                k.rows(),
                mask.layout().token_count()
            )));
        }
        keys.push(k.take_rows(&selected)?);
        values.push(v.take_rows(&selected)?);
    }
    InjectionSpec::new(keys, values, lambda)
}
