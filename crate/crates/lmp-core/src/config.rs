//! JSON run configuration.
//!
//! A config document mirrors [`RunSpec`] field for field, except that
//! every tensor is either referenced by LMPT file path or described by
//! dimensions and drawn from the run seed's dedicated streams. Building
//! the same config twice therefore yields byte-identical specs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbdm::SelectionPolicy;
use crate::latent::{LatentVideo, PromptTokens};
use crate::lmpt;
use crate::math::Mat;
use crate::mmdit::{BlockWeights, HeadWeights};
use crate::pipeline::{GateInterpretation, RunSpec};
use crate::rng::{gaussian_mat, gaussian_vec, stream_rng, streams};
use crate::schedule::{make_blend_schedule, BlendPolicy, BlendSchedule, NoiseSchedule, ScheduleConfig};

const EMBED_SIGMA: f64 = 0.5;
const PROJECT_SIGMA: f64 = 0.5;
const PROMPT_SIGMA: f64 = 1.0;
const LATENT_SIGMA: f64 = 1.0;

/// Clean-fraction schedule selection. `sqrt_abar` follows a linear-beta
/// diffusion schedule and needs both endpoints; `linear` needs nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendConfig {
    #[serde(default)]
    pub policy: BlendPolicy,
    #[serde(default)]
    pub beta_start: Option<f64>,
    #[serde(default)]
    pub beta_end: Option<f64>,
}

impl BlendConfig {
    pub fn build(&self, t_total: usize) -> Result<BlendSchedule> {
        match (self.policy, self.beta_start, self.beta_end) {
            (BlendPolicy::Linear, None, None) => {
                make_blend_schedule(t_total, BlendPolicy::Linear, None)
            }
            (BlendPolicy::Linear, _, _) => Err(Error::Config(
                "beta_start/beta_end only apply to the sqrt_abar policy".into(),
            )),
            (BlendPolicy::SqrtAbar, Some(bs), Some(be)) => {
                let sched = NoiseSchedule::linear(t_total, bs, be)?;
                make_blend_schedule(t_total, BlendPolicy::SqrtAbar, Some(&sched))
            }
            (BlendPolicy::SqrtAbar, _, _) => Err(Error::Config(
                "sqrt_abar policy needs beta_start and beta_end".into(),
            )),
        }
    }
}

/// Denoiser shape. Weights come from `weights_dir` when set, otherwise
/// from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Prompt tokens plus the indices of the subject words among them.
/// Exactly one of `file` (an LMPT matrix) and `len` (seeded rows) is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub len: Option<usize>,
    pub subject: Vec<usize>,
}

impl PromptConfig {
    fn load(&self, seed: u64, stream: u64, d: usize) -> Result<PromptTokens> {
        let mat = match (&self.file, self.len) {
            (Some(path), None) => lmpt::read_mat(path)?,
            (None, Some(len)) => gaussian_mat(&mut stream_rng(seed, stream), len, d, PROMPT_SIGMA),
            _ => {
                return Err(Error::Config(
                    "prompt needs exactly one of \"file\" and \"len\"".into(),
                ))
            }
        };
        PromptTokens::new(mat, self.subject.clone())
    }
}

/// Latent video source: an LMPT file or seeded `[frames, height, width,
/// channels]` dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub dims: Option<[usize; 4]>,
}

impl LatentConfig {
    fn load(&self, seed: u64, stream: u64) -> Result<LatentVideo> {
        match (&self.file, self.dims) {
            (Some(path), None) => lmpt::read_latent(path),
            (None, Some([f, h, w, c])) => LatentVideo::new(
                f,
                h,
                w,
                c,
                gaussian_vec(&mut stream_rng(seed, stream), f * h * w * c, LATENT_SIGMA),
            ),
            _ => Err(Error::Config(
                "latent needs exactly one of \"file\" and \"dims\"".into(),
            )),
        }
    }
}

/// Foreground token selection, per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "policy")]
pub enum ForegroundConfig {
    TopFraction {
        #[serde(default = "default_top_fraction")]
        fraction: f64,
    },
    Threshold {
        threshold: f64,
    },
}

fn default_top_fraction() -> f64 {
    0.25
}

impl Default for ForegroundConfig {
    fn default() -> ForegroundConfig {
        ForegroundConfig::TopFraction {
            fraction: default_top_fraction(),
        }
    }
}

impl ForegroundConfig {
    pub fn policy(&self) -> SelectionPolicy {
        match self {
            ForegroundConfig::TopFraction { fraction } => {
                SelectionPolicy::TopFraction { q: *fraction }
            }
            ForegroundConfig::Threshold { threshold } => {
                SelectionPolicy::Threshold { tau: *threshold }
            }
        }
    }
}

/// Appearance suppression switch and its top-fraction selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuppressionConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_suppression_fraction")]
    pub fraction: f64,
}

fn default_true() -> bool {
    true
}

fn default_suppression_fraction() -> f64 {
    0.2
}

impl Default for SuppressionConfig {
    fn default() -> SuppressionConfig {
        SuppressionConfig {
            enabled: default_true(),
            fraction: default_suppression_fraction(),
        }
    }
}

/// The whole run, as written by hand into a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub blend: BlendConfig,
    #[serde(default)]
    pub gate_interpretation: GateInterpretation,
    pub model: ModelConfig,
    pub target_prompt: PromptConfig,
    pub reference_prompt: PromptConfig,
    pub reference_latent: LatentConfig,
    #[serde(default)]
    pub initial_frame: Option<PathBuf>,
    #[serde(default)]
    pub fbdm: ForegroundConfig,
    #[serde(default)]
    pub asm: SuppressionConfig,
    /// Where the generated latent is written.
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    /// Resolve every source into tensors and validate the result.
    pub fn build(&self) -> Result<RunSpec> {
        self.schedule.validate()?;
        self.model.validate()?;
        let seed = self.schedule.seed;
        let reference_latent = self.reference_latent.load(seed, streams::REF_LATENT)?;
        let weights = match &self.model.weights_dir {
            Some(dir) => ModelWeights::load_dir(dir, &self.model)?,
            None => ModelWeights::seeded(&self.model, reference_latent.channels(), seed),
        };
        let d = self.model.embed_dim;
        let spec = RunSpec {
            schedule: self.schedule.clone(),
            blend: self.blend.build(self.schedule.t_total)?,
            gate_interpretation: self.gate_interpretation,
            blocks: weights.blocks,
            embed: weights.embed,
            project: weights.project,
            target_prompt: self.target_prompt.load(seed, streams::TARGET_PROMPT, d)?,
            reference_prompt: self
                .reference_prompt
                .load(seed, streams::REF_PROMPT, d)?,
            reference_latent,
            initial_frame: match &self.initial_frame {
                Some(path) => Some(lmpt::read_latent(path)?),
                None => None,
            },
            fbdm_policy: self.fbdm.policy(),
            asm_enabled: self.asm.enabled,
            asm_fraction: self.asm.fraction,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Embedding, projection, and block weights as one loadable bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub embed: Mat,
    pub project: Mat,
    pub blocks: Vec<BlockWeights>,
}

impl ModelWeights {
    /// A pure function of (shape, channels, seed).
    pub fn seeded(model: &ModelConfig, channels: usize, seed: u64) -> ModelWeights {
        let d = model.embed_dim;
        ModelWeights {
            embed: gaussian_mat(&mut stream_rng(seed, streams::EMBED), channels, d, EMBED_SIGMA),
            project: gaussian_mat(
                &mut stream_rng(seed, streams::PROJECT),
                d,
                channels,
                PROJECT_SIGMA,
            ),
            blocks: (0..model.blocks)
                .map(|i| BlockWeights::seeded(d, model.head_dim, model.heads, seed, i))
                .collect(),
        }
    }

    /// Flat directory of LMPT matrices: `embed`, `project`,
    /// `b{b}_h{h}_{wq,wk,wv}`, `b{b}_wo`, `b{b}_ff`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        lmpt::write_mat(&dir.join("embed.lmpt"), &self.embed)?;
        lmpt::write_mat(&dir.join("project.lmpt"), &self.project)?;
        for (b, w) in self.blocks.iter().enumerate() {
            for (h, head) in w.heads.iter().enumerate() {
                lmpt::write_mat(&dir.join(format!("b{b}_h{h}_wq.lmpt")), &head.wq)?;
                lmpt::write_mat(&dir.join(format!("b{b}_h{h}_wk.lmpt")), &head.wk)?;
                lmpt::write_mat(&dir.join(format!("b{b}_h{h}_wv.lmpt")), &head.wv)?;
            }
            lmpt::write_mat(&dir.join(format!("b{b}_wo.lmpt")), &w.wo)?;
            lmpt::write_mat(&dir.join(format!("b{b}_ff.lmpt")), &w.ff)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path, model: &ModelConfig) -> Result<ModelWeights> {
        let embed = lmpt::read_mat(&dir.join("embed.lmpt"))?;
        let project = lmpt::read_mat(&dir.join("project.lmpt"))?;
        let mut blocks = Vec::with_capacity(model.blocks);
        for b in 0..model.blocks {
            let mut heads = Vec::with_capacity(model.heads);
            for h in 0..model.heads {
                heads.push(HeadWeights {
                    wq: lmpt::read_mat(&dir.join(format!("b{b}_h{h}_wq.lmpt")))?,
                    wk: lmpt::read_mat(&dir.join(format!("b{b}_h{h}_wk.lmpt")))?,
                    wv: lmpt::read_mat(&dir.join(format!("b{b}_h{h}_wv.lmpt")))?,
                });
            }
            let wo = lmpt::read_mat(&dir.join(format!("b{b}_wo.lmpt")))?;
            let ff = lmpt::read_mat(&dir.join(format!("b{b}_ff.lmpt")))?;
            let bw = BlockWeights::new(b, heads, wo, ff)?;
            if bw.d() != model.embed_dim || bw.d_k() != model.head_dim {
                return Err(Error::Shape(format!(
                    "block {b} on disk is d={} d_k={}, config says d={} d_k={}",
                    bw.d(),
                    bw.d_k(),
                    model.embed_dim,
                    model.head_dim
                )));
            }
            blocks.push(bw);
        }
        if embed.cols() != model.embed_dim || project.rows() != model.embed_dim {
            return Err(Error::Shape(format!(
                "embed {}x{} / project {}x{} do not match embed_dim {}",
                embed.rows(),
                embed.cols(),
                project.rows(),
                project.cols(),
                model.embed_dim
            )));
        }
        Ok(ModelWeights {
            embed,
            project,
            blocks,
        })
    }
}
