//! Reweighted reference injection.
//!
//! The target block's attention is extended with keys and values gathered
//! from the reference branch's foreground tokens. Injected keys are scaled
//! by a reweighting factor before the softmax, so the factor tunes how much
//! probability mass the target's queries give the reference columns; the
//! injected values ride along unscaled.

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::mmdit::{attention_internals, AttentionMap, BlockWeights, HiddenStates};

/// Per-head reference keys/values plus the key reweighting factor.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSpec {
    keys: Vec<Mat>,
    values: Vec<Mat>,
    lambda: f64,
}

impl InjectionSpec {
    pub fn new(keys: Vec<Mat>, values: Vec<Mat>, lambda: f64) -> Result<InjectionSpec> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::Shape(format!(
                "injection needs matching per-head keys and values, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        let r = keys[0].rows();
        let d_k = keys[0].cols();
        for (h, (k, v)) in keys.iter().zip(&values).enumerate() {
            if k.rows() != r || v.rows() != r || k.cols() != d_k || v.cols() != d_k {
                return Err(Error::Shape(format!(
                    "injection head {h} is {}x{} keys / {}x{} values, expected {r}x{d_k}",
                    k.rows(),
                    k.cols(),
                    v.rows(),
                    v.cols()
                )));
            }
            if !k.is_finite() || !v.is_finite() {
                return Err(Error::NonFinite(format!("injection head {h}")));
            }
        }
        if !(lambda.is_finite() && (0.0..=1.0).contains(&lambda)) {
            return Err(Error::Config(format!(
                "reweighting factor must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(InjectionSpec {
            keys,
            values,
            lambda,
        })
    }

    pub fn heads(&self) -> usize {
        self.keys.len()
    }

    /// Number of injected reference rows.
    pub fn r(&self) -> usize {
        self.keys[0].rows()
    }

    pub fn d_k(&self) -> usize {
        self.keys[0].cols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn keys(&self) -> &[Mat] {
        &self.keys
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }
}

/// Joint attention with the reference keys (scaled by the reweighting
/// factor) and values appended as extra attendable columns. With r = 0 the
/// arithmetic is exactly plain joint attention.
pub fn extended_attention(
    h: &HiddenStates,
    w: &BlockWeights,
    spec: &InjectionSpec,
) -> Result<(HiddenStates, AttentionMap)> {
    let internals = attention_internals(h, w, Some(spec))?;
    let x = h.concat();
    let out = x.add(&internals.out)?;
    let map = AttentionMap::new(h.prompt_len(), h.video_len(), internals.r, internals.avg)?;
    let prompt_rows: Vec<usize> = (0..h.prompt_len()).collect();
    let video_rows: Vec<usize> = (h.prompt_len()..x.rows()).collect();
    Ok((
        HiddenStates {
            prompt: out.take_rows(&prompt_rows)?,
            video: out.take_rows(&video_rows)?,
        },
        map,
    ))
}

/// Mean, over video query rows, of the attention mass landing on the last
/// `r` columns. Zero when nothing is injected.
pub fn reference_mass(a: &AttentionMap, r: usize) -> Result<f64> {
    if r > a.mat().cols() {
        return Err(Error::Shape(format!(
            "asked for {r} reference columns, map has {}",
            a.mat().cols()
        )));
    }
    if r == 0 || a.n() == 0 {
        return Ok(0.0);
    }
    let cols = a.mat().cols();
    let mut total = 0.0;
    for i in a.m()..a.m() + a.n() {
        let row = a.mat().row(i);
        let mut mass = 0.0;
        for &v in &row[cols - r..] {
            mass += v;
        }
        total += mass;
    }
    Ok(total / a.n() as f64)
}
