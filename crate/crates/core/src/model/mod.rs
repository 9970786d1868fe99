//! The toy video denoiser.
//!
//! A two-level attention U-Net over `8x8` latents (`4x4` in the middle):
//!
//! ```text
//! in-proj + time ─ enc blocks ─ enc temporal ─┬─ pool ─ mid blocks ─ mid temporal ─ upsample ─┐
//!                                             └────────────── skip ───────────────────────────┴─ dec blocks ─ dec temporal ─ out-proj
//! ```
//!
//! Each block is self-attention, cross-attention to the prompt, then an MLP,
//! all pre-norm residual. The temporal modules attend along the frame axis at
//! every spatial position and are skipped entirely in image mode. The output
//! of the decoder level (before the output projection) is the feature map used
//! for correspondence.

mod control;
mod net;
mod text;

pub use control::{AttentionControl, LayerId, Level, NoControl, OverridePlan};
pub use net::{apply_prediction, forward, image_mode_predict, predict_noise, AttentionRecord, Bindings, ForwardOutput};
pub use text::PromptEncoding;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::codec::{LATENT_CHANNELS, LATENT_SIZE};
use crate::diffusion::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::synth;
use crate::tensor::Tensor;

pub const WEIGHTS_VERSION: u32 = 1;

/// What the output projection predicts. The network always returns noise;
/// with `Velocity` the raw output `v` is converted through
/// `eps = sqrt(abar) v + sqrt(1 - abar) z_t`, which keeps the clean-latent
/// estimate well conditioned at high noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Epsilon,
    Velocity,
}

impl Prediction {
    pub fn name(self) -> &'static str {
        match self {
            Prediction::Epsilon => "epsilon",
            Prediction::Velocity => "velocity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "epsilon" => Some(Prediction::Epsilon),
            "velocity" => Some(Prediction::Velocity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub text_dim: usize,
    pub max_prompt: usize,
    pub vocab: usize,
    /// Attention blocks at the encoder, middle and decoder levels.
    pub blocks: [usize; 3],
    pub prediction: Prediction,
    /// Linear schedule the velocity conversion assumes.
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: LATENT_CHANNELS,
            height: LATENT_SIZE,
            width: LATENT_SIZE,
            dim: 32,
            mlp_dim: 64,
            text_dim: 32,
            max_prompt: 8,
            vocab: synth::vocabulary().len(),
            blocks: [1, 2, 2],
            prediction: Prediction::Velocity,
            schedule_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ModelConfig {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn level_size(&self, level: Level) -> (usize, usize) {
        match level {
            Level::Mid => (self.height / 2, self.width / 2),
            _ => (self.height, self.width),
        }
    }

    /// Every attention block, in forward order.
    pub fn layers(&self) -> Vec<LayerId> {
        let mut out = Vec::new();
        for (level, count) in Level::ALL.iter().zip(self.blocks) {
            for block in 0..count {
                out.push(LayerId::new(*level, block));
            }
        }
        out
    }

    /// The block whose record carries the decoder features.
    pub fn feature_layer(&self) -> LayerId {
        LayerId::new(Level::Dec, self.blocks[2] - 1)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Config("latent grid must be even".to_string()));
        }
        if self.blocks.contains(&0) || !self.dim.is_multiple_of(2) {
            return Err(Error::Config("every level needs a block; dim must be even".to_string()));
        }
        Ok(())
    }
}

/// Named parameter set of the denoiser plus its text-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub version: u32,
    params: BTreeMap<String, Tensor>,
}

pub const TEXT_TABLE: &str = "text.table";

impl ModelWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, streams::INIT);
        let mut params = BTreeMap::new();
        let d = config.dim;
        let mut linear = |params: &mut BTreeMap<String, Tensor>, name: String, fan_in: usize, fan_out: usize, gain: f64| {
            let std = gain / libm::sqrt(fan_in as f64);
            params.insert(name, Tensor::from_fn(&[fan_in, fan_out], |_| std * rng.normal()));
        };
        let put = |params: &mut BTreeMap<String, Tensor>, name: String, t: Tensor| {
            params.insert(name, t);
        };
        let c = config.latent_channels;
        linear(&mut params, "in.w".into(), c, d, 1.0);
        put(&mut params, "in.b".into(), Tensor::zeros(&[d]));
        // Learned positional embeddings at full and pooled resolution.
        let n = config.positions();
        let mut pos_rng = Rng::new(seed, streams::INIT + 100);
        put(&mut params, "in.pos".into(), Tensor::from_fn(&[n, d], |_| 0.5 * pos_rng.normal()));
        put(&mut params, "mid.pos".into(), Tensor::from_fn(&[n / 4, d], |_| 0.5 * pos_rng.normal()));
        linear(&mut params, "time.w1".into(), d, d, 1.0);
        put(&mut params, "time.b1".into(), Tensor::zeros(&[d]));
        linear(&mut params, "time.w2".into(), d, d, 1.0);
        put(&mut params, "time.b2".into(), Tensor::zeros(&[d]));
        linear(&mut params, "mid.time.w".into(), d, d, 1.0);
        linear(&mut params, "down.w".into(), d, d, 1.0);
        linear(&mut params, "up.w".into(), d, d, 1.0);
        for layer in config.layers() {
            let p = layer.to_string();
            for ln in ["ln1", "ln2", "ln3"] {
                put(&mut params, format!("{p}.{ln}.g"), Tensor::full(&[d], 1.0));
                put(&mut params, format!("{p}.{ln}.b"), Tensor::zeros(&[d]));
            }
            for w in ["self.q", "self.k", "self.v", "cross.q"] {
                linear(&mut params, format!("{p}.{w}"), d, d, 1.0);
            }
            linear(&mut params, format!("{p}.self.o"), d, d, 0.5);
            linear(&mut params, format!("{p}.cross.k"), config.text_dim, d, 1.0);
            linear(&mut params, format!("{p}.cross.v"), config.text_dim, d, 1.0);
            linear(&mut params, format!("{p}.cross.o"), d, d, 0.5);
            linear(&mut params, format!("{p}.mlp.w1"), d, config.mlp_dim, 1.0);
            put(&mut params, format!("{p}.mlp.b1"), Tensor::zeros(&[config.mlp_dim]));
            linear(&mut params, format!("{p}.mlp.w2"), config.mlp_dim, d, 0.5);
            put(&mut params, format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
        }
        for level in Level::ALL {
            let p = format!("{}.temporal", level.name());
            put(&mut params, format!("{p}.ln.g"), Tensor::full(&[d], 1.0));
            put(&mut params, format!("{p}.ln.b"), Tensor::zeros(&[d]));
            for w in ["q", "k", "v"] {
                linear(&mut params, format!("{p}.{w}"), d, d, 1.0);
            }
            linear(&mut params, format!("{p}.o"), d, d, 0.5);
        }
        put(&mut params, "out.ln.g".into(), Tensor::full(&[d], 1.0));
        put(&mut params, "out.ln.b".into(), Tensor::zeros(&[d]));
        linear(&mut params, "out.w".into(), d, c, 0.1);
        put(&mut params, "out.b".into(), Tensor::zeros(&[c]));
        let table = Tensor::from_fn(&[config.vocab, config.text_dim], |_| rng.normal());
        params.insert(TEXT_TABLE.into(), table);
        Ok(Self {
            config,
            version: WEIGHTS_VERSION,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, version: u32, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config, 0)?;
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Config("unexpected extra parameters".to_string()));
        }
        Ok(Self {
            config,
            version,
            params,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Row `token` of the text-embedding table.
    pub fn embedding(&self, token: usize) -> &[f64] {
        self.param(TEXT_TABLE).row(token)
    }

    pub fn set_embedding(&mut self, token: usize, values: &[f64]) {
        let table = self.param_mut(TEXT_TABLE);
        let w = table.last_dim();
        table.data_mut()[token * w..(token + 1) * w].copy_from_slice(values);
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Names of the frame-axis attention parameters.
    pub fn temporal_param_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.contains(".temporal."))
            .cloned()
            .collect()
    }
}
