//! The gated two-branch denoising loop.
//!
//! A reference branch repeatedly re-encodes the proportionally noised
//! reference latent while the target branch carries one set of hidden
//! states from the initial noise all the way down to the final
//! projection. At gated timesteps the target's blocks attend into the
//! reference's cached foreground keys/values (injection) and take a
//! suppression step against the reference subject's appearance before
//! attending. Everything is seeded, sequential, and byte-reproducible.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::asm::{asm_loss, AsmContext};
use crate::error::{Error, Result};
use crate::fbdm::{
    aggregate_subject_saliency, gather_reference_kv, select_foreground, ForegroundMask,
    SaliencyVolume, SelectionPolicy,
};
use crate::latent::{detokenize, tokenize, LatentVideo, PromptTokens, TokenSequence};
use crate::lmpt::{self, AttnDumpMeta};
use crate::math::Mat;
use crate::mmdit::{block_forward, BlockHook, BlockTrace, BlockWeights, HiddenStates};
use crate::rng::{gaussian_vec, stream_rng, streams};
use crate::schedule::{proportional_noise, BlendSchedule, ScheduleConfig};

/// How the injection threshold `t1` is read.
///
/// `Literal` opens the injection gate while `t > t1`. `FirstK` instead
/// opens it for the first `t1` processed steps, i.e. while `t > T - t1`;
/// both readings circulate, so the switch makes runs comparable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInterpretation {
    #[default]
    Literal,
    FirstK,
}

impl std::str::FromStr for GateInterpretation {
    type Err = Error;

    fn from_str(s: &str) -> Result<GateInterpretation> {
        match s {
            "literal" => Ok(GateInterpretation::Literal),
            "first_k" => Ok(GateInterpretation::FirstK),
            other => Err(Error::Config(format!(
                "unknown gate interpretation {other:?}, expected \"literal\" or \"first_k\""
            ))),
        }
    }
}

/// Reference-key injection gate.
pub fn rmtm_active(t: usize, cfg: &ScheduleConfig, interp: GateInterpretation) -> bool {
    match interp {
        GateInterpretation::Literal => t > cfg.t1,
        GateInterpretation::FirstK => t + cfg.t1 > cfg.t_total,
    }
}

/// Appearance-suppression gate.
pub fn asm_active(t: usize, cfg: &ScheduleConfig) -> bool {
    cfg.t3 < t && t < cfg.t2
}

/// A steering hook kind, in the order hooks are applied inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookKind {
    Asm,
    Rmtm,
}

/// Gate decisions actually applied at one timestep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateStep {
    pub t: usize,
    pub rmtm: bool,
    pub asm: bool,
    pub hooks: Vec<HookKind>,
}

/// Per-step gate record for the whole run, in processing order (t
/// descending).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateTrace {
    pub steps: Vec<GateStep>,
}

impl GateTrace {
    pub fn csv(&self) -> String {
        let mut out = String::from("t,rmtm,asm\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{}", s.t, s.rmtm as u8, s.asm as u8);
        }
        out
    }
}

/// One appearance-suppression loss sample, taken before the step.
#[derive(Clone, Debug, PartialEq)]
pub struct AsmLossRow {
    pub t: usize,
    pub block: usize,
    pub loss: f64,
}

pub fn asm_losses_csv(rows: &[AsmLossRow]) -> String {
    let mut out = String::from("t,block,loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.t, r.block, r.loss);
    }
    out
}

/// Everything a run needs, fully resolved (no file paths).
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub schedule: ScheduleConfig,
    pub blend: BlendSchedule,
    pub gate_interpretation: GateInterpretation,
    pub blocks: Vec<BlockWeights>,
    /// channels x d input embedding.
    pub embed: Mat,
    /// d x channels output projection.
    pub project: Mat,
    pub target_prompt: PromptTokens,
    pub reference_prompt: PromptTokens,
    /// Clean reference latent; noised per step, never denoised.
    pub reference_latent: LatentVideo,
    /// Single-frame latent for image-conditioned runs.
    pub initial_frame: Option<LatentVideo>,
    pub fbdm_policy: SelectionPolicy,
    pub asm_enabled: bool,
    pub asm_fraction: f64,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.fbdm_policy.validate()?;
        if self.blend.t_total() != self.schedule.t_total {
            return Err(Error::Config(format!(
                "blend schedule covers {} steps, run has {}",
                self.blend.t_total(),
                self.schedule.t_total
            )));
        }
        let c = self.reference_latent.channels();
        let d = self.embed.cols();
        if self.embed.rows() != c {
            return Err(Error::Shape(format!(
                "embed map takes {} channels, latent has {c}",
                self.embed.rows()
            )));
        }
        if self.project.rows() != d || self.project.cols() != c {
            return Err(Error::Shape(format!(
                "projection is {}x{}, expected {d}x{c}",
                self.project.rows(),
                self.project.cols()
            )));
        }
        for p in [&self.target_prompt, &self.reference_prompt] {
            if p.dim() != d {
                return Err(Error::Shape(format!(
                    "prompt width {} does not match embedding width {d}",
                    p.dim()
                )));
            }
        }
        for w in &self.blocks {
            if w.d() != d {
                return Err(Error::Shape(format!(
                    "block {} width {} does not match embedding width {d}",
                    w.index,
                    w.d()
                )));
            }
        }
        if let Some(frame) = &self.initial_frame {
            if frame.frames() != 1
                || frame.height() != self.reference_latent.height()
                || frame.width() != self.reference_latent.width()
                || frame.channels() != c
            {
                return Err(Error::Shape(format!(
                    "initial frame is {}x{}x{}x{}, expected 1x{}x{}x{c}",
                    frame.frames(),
                    frame.height(),
                    frame.width(),
                    frame.channels(),
                    self.reference_latent.height(),
                    self.reference_latent.width()
                )));
            }
        }
        if !(self.asm_fraction.is_finite() && 0.0 < self.asm_fraction && self.asm_fraction <= 1.0)
        {
            return Err(Error::Config(format!(
                "suppression fraction must lie in (0, 1], got {}",
                self.asm_fraction
            )));
        }
        Ok(())
    }
}

/// What to write while the run progresses.
#[derive(Clone, Debug)]
pub struct DumpOptions {
    pub attn: bool,
    pub saliency: bool,
    /// Dump only steps with `t % every == 0`.
    pub every: usize,
    pub dir: Option<PathBuf>,
}

impl Default for DumpOptions {
    fn default() -> DumpOptions {
        DumpOptions {
            attn: false,
            saliency: false,
            every: 1,
            dir: None,
        }
    }
}

impl DumpOptions {
    fn validate(&self) -> Result<()> {
        if self.every == 0 {
            return Err(Error::Config("dump cadence must be at least 1".into()));
        }
        if (self.attn || self.saliency) && self.dir.is_none() {
            return Err(Error::Config(
                "dumps requested without an output directory".into(),
            ));
        }
        Ok(())
    }

    fn due(&self, t: usize) -> bool {
        t % self.every == 0
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub z0: LatentVideo,
    pub gates: GateTrace,
    pub asm_losses: Vec<AsmLossRow>,
}

fn dump_attention(
    dir: &Path,
    name: &str,
    trace: &BlockTrace,
    meta_m: usize,
    layout: crate::latent::TokenLayout,
) -> Result<()> {
    let meta = AttnDumpMeta {
        m: meta_m,
        frames: layout.frames(),
        height: layout.height(),
        width: layout.width(),
        r: trace.attn.r(),
    };
    let bytes = lmpt::encode_attention(trace.attn.mat(), &meta)?;
    lmpt::atomic_write(&dir.join(name), &bytes)
}

/// The full run: initial reference pass, the descending timestep loop
/// with per-block branch interleaving, final projection.
pub fn lmp_generate(spec: &RunSpec, dumps: &DumpOptions) -> Result<RunOutput> {
    spec.validate()?;
    dumps.validate()?;
    let cfg = &spec.schedule;
    let t_total = cfg.t_total;
    let layout = spec.reference_latent.layout();
    let (f, h, w, c) = (
        spec.reference_latent.frames(),
        spec.reference_latent.height(),
        spec.reference_latent.width(),
        spec.reference_latent.channels(),
    );
    if let Some(dir) = &dumps.dir {
        if dumps.attn || dumps.saliency {
            fs::create_dir_all(dir)?;
        }
    }

    // All noise for the run, drawn up front from dedicated streams.
    let z_init = LatentVideo::new(
        f,
        h,
        w,
        c,
        gaussian_vec(&mut stream_rng(cfg.seed, streams::TARGET_INIT), f * h * w * c, 1.0),
    )?;
    let eps = LatentVideo::new(
        f,
        h,
        w,
        c,
        gaussian_vec(&mut stream_rng(cfg.seed, streams::EPS), f * h * w * c, 1.0),
    )?;

    let init_tokens: Option<Mat> = match &spec.initial_frame {
        Some(frame) => Some(tokenize(frame, &spec.embed)?.0.into_mat()),
        None => None,
    };

    let (tar_tokens, _) = tokenize(&z_init, &spec.embed)?;
    let mut h_tar = HiddenStates::new(spec.target_prompt.mat().clone(), tar_tokens.into_mat())?;

    // Initial reference-only pass: it supplies the traces consumed by the
    // first loop step, so its dumps carry the label t_total + 1.
    let label = t_total + 1;
    let mut h_ref = reference_states(spec, t_total, &eps).map_err(|e| e.at_step(label, 0))?;
    let mut traces_prev = Vec::with_capacity(spec.blocks.len());
    for (b, bw) in spec.blocks.iter().enumerate() {
        let (next, trace) = block_forward(&h_ref, bw, &[]).map_err(|e| e.at_step(label, b))?;
        if dumps.attn && dumps.due(label) {
            let dir = dumps.dir.as_ref().expect("checked in validate");
            dump_attention(
                dir,
                &format!("attn_t{label}_b{b}.lmpt"),
                &trace,
                spec.reference_prompt.len(),
                layout,
            )
            .map_err(|e| e.at_step(label, b))?;
        }
        h_ref = next;
        traces_prev.push(trace);
    }

    let mut gate_steps = Vec::with_capacity(t_total + 1);
    let mut asm_losses = Vec::new();

    for t in (0..=t_total).rev() {
        // Image conditioning: pin the first frame's tokens before the pass.
        if let Some(init) = &init_tokens {
            for (row, src) in layout.frame_range(0).zip(0..init.rows()) {
                h_tar.video.row_mut(row).copy_from_slice(init.row(src));
            }
        }

        let mut h_ref = reference_states(spec, t, &eps).map_err(|e| e.at_step(t, 0))?;

        let rmtm_on = rmtm_active(t, cfg, spec.gate_interpretation);
        let asm_on = spec.asm_enabled && asm_active(t, cfg);

        // One mask per timestep, from the last completed reference pass.
        let mask: Option<ForegroundMask> = if rmtm_on {
            let vol = aggregate_subject_saliency(
                &traces_prev,
                spec.reference_prompt.subject_indices(),
                &layout,
            )
            .map_err(|e| e.at_step(t, 0))?;
            let mask = select_foreground(&vol, &spec.fbdm_policy).map_err(|e| e.at_step(t, 0))?;
            if dumps.saliency && dumps.due(t) {
                let dir = dumps.dir.as_ref().expect("checked in validate");
                dump_saliency(dir, t, &vol, &mask).map_err(|e| e.at_step(t, 0))?;
            }
            Some(mask)
        } else {
            None
        };

        let mut traces_cur = Vec::with_capacity(spec.blocks.len());
        for (b, bw) in spec.blocks.iter().enumerate() {
            let wrap = |e: Error| e.at_step(t, b);

            // Suppression context from the reference prompt states
            // entering this block.
            let asm_ctx = if asm_on {
                let prompt = PromptTokens::new(
                    h_ref.prompt.clone(),
                    spec.reference_prompt.subject_indices().to_vec(),
                )
                .map_err(wrap)?;
                Some(AsmContext::from_reference(&prompt, bw, cfg.beta, spec.asm_fraction).map_err(wrap)?)
            } else {
                None
            };

            // The reference block serves its entering-state K/V cache,
            // then advances.
            let (next_ref, ref_trace) = block_forward(&h_ref, bw, &[]).map_err(wrap)?;

            let inj = match (&mask, rmtm_on) {
                (Some(m), true) => {
                    Some(gather_reference_kv(&ref_trace, m, cfg.lambda).map_err(wrap)?)
                }
                _ => None,
            };

            if let Some(ctx) = &asm_ctx {
                let loss = asm_loss(ctx, &h_tar.video, bw).map_err(wrap)?;
                asm_losses.push(AsmLossRow { t, block: b, loss });
            }

            let mut hooks = Vec::with_capacity(2);
            if let Some(ctx) = &asm_ctx {
                hooks.push(BlockHook::Asm(ctx));
            }
            if let Some(spec_inj) = &inj {
                hooks.push(BlockHook::Rmtm(spec_inj));
            }
            let (next_tar, tar_trace) = block_forward(&h_tar, bw, &hooks).map_err(wrap)?;

            if dumps.attn && dumps.due(t) {
                let dir = dumps.dir.as_ref().expect("checked in validate");
                dump_attention(
                    dir,
                    &format!("attn_t{t}_b{b}.lmpt"),
                    &ref_trace,
                    spec.reference_prompt.len(),
                    layout,
                )
                .map_err(wrap)?;
                dump_attention(
                    dir,
                    &format!("attn_tar_t{t}_b{b}.lmpt"),
                    &tar_trace,
                    spec.target_prompt.len(),
                    layout,
                )
                .map_err(wrap)?;
            }

            h_ref = next_ref;
            h_tar = next_tar;
            traces_cur.push(ref_trace);
        }
        traces_prev = traces_cur;

        let mut hooks = Vec::with_capacity(2);
        if asm_on {
            hooks.push(HookKind::Asm);
        }
        if rmtm_on {
            hooks.push(HookKind::Rmtm);
        }
        gate_steps.push(GateStep {
            t,
            rmtm: rmtm_on,
            asm: asm_on,
            hooks,
        });
    }

    let z0 = detokenize(
        &TokenSequence::new(h_tar.video.clone()),
        layout,
        &spec.project,
    )?;
    Ok(RunOutput {
        z0,
        gates: GateTrace { steps: gate_steps },
        asm_losses,
    })
}

/// Reference hidden states for step `t`: noise the clean latent with the
/// run's one fixed draw, then embed it under the reference prompt.
fn reference_states(spec: &RunSpec, t: usize, eps: &LatentVideo) -> Result<HiddenStates> {
    let z_ref = proportional_noise(&spec.reference_latent, t, eps, &spec.blend)?;
    let (tokens, _) = tokenize(&z_ref, &spec.embed)?;
    HiddenStates::new(spec.reference_prompt.mat().clone(), tokens.into_mat())
}

fn dump_saliency(dir: &Path, t: usize, vol: &SaliencyVolume, mask: &ForegroundMask) -> Result<()> {
    let layout = vol.layout();
    let bytes = lmpt::encode_tensor(
        &[
            layout.frames() as u64,
            layout.height() as u64,
            layout.width() as u64,
        ],
        vol.values(),
    )?;
    lmpt::atomic_write(&dir.join(format!("saliency_t{t}.lmpt")), &bytes)?;
    let mask_bytes = lmpt::encode_indices(&mask.selected())?;
    lmpt::atomic_write(&dir.join(format!("mask_t{t}.lmpt")), &mask_bytes)
}

/// Per-frame mean (height, width) position of the masked tokens.
pub fn centroid_trajectory_from_mask(mask: &ForegroundMask) -> Result<Vec<(f64, f64)>> {
    let layout = mask.layout();
    let mut out = Vec::with_capacity(layout.frames());
    for f in 0..layout.frames() {
        let mut count = 0usize;
        let mut sum_h = 0.0;
        let mut sum_w = 0.0;
        for token in layout.frame_range(f) {
            if mask.contains(token) {
                let (_, h, w) = layout.position(token);
                sum_h += h as f64;
                sum_w += w as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Numeric(format!("frame {f} selects no tokens")));
        }
        out.push((sum_h / count as f64, sum_w / count as f64));
    }
    Ok(out)
}

/// Per-frame saliency-weighted mean (height, width) position.
pub fn centroid_trajectory_from_saliency(vol: &SaliencyVolume) -> Result<Vec<(f64, f64)>> {
    let layout = vol.layout();
    let mut out = Vec::with_capacity(layout.frames());
    for f in 0..layout.frames() {
        let mut total = 0.0;
        let mut sum_h = 0.0;
        let mut sum_w = 0.0;
        for token in layout.frame_range(f) {
            let v = vol.values()[token];
            let (_, h, w) = layout.position(token);
            sum_h += v * h as f64;
            sum_w += v * w as f64;
            total += v;
        }
        if total == 0.0 {
            return Err(Error::Numeric(format!("frame {f} has zero total saliency")));
        }
        out.push((sum_h / total, sum_w / total));
    }
    Ok(out)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Mean Pearson correlation of the height series and the width series.
/// A constant series carries no direction; it counts as correlation 0.
pub fn trajectory_similarity(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "trajectories have {} and {} frames",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Shape("need at least two frames to correlate".into()));
    }
    let ah: Vec<f64> = a.iter().map(|p| p.0).collect();
    let aw: Vec<f64> = a.iter().map(|p| p.1).collect();
    let bh: Vec<f64> = b.iter().map(|p| p.0).collect();
    let bw: Vec<f64> = b.iter().map(|p| p.1).collect();
    let mut parts = [0.0; 2];
    for (i, (x, y)) in [(ah, bh), (aw, bw)].iter().enumerate() {
        parts[i] = match pearson(x, y) {
            Some(r) => r,
            None => {
                log::warn!("constant coordinate series, counting correlation as 0");
                0.0
            }
        };
    }
    Ok((parts[0] + parts[1]) / 2.0)
}
