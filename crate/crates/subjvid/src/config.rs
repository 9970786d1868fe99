//! Experiment configuration: one JSON document with a schema version.
//! Every section is optional and falls back to the defaults below; unknown
//! keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use subjvid_core::customize::TrainConfig;
use subjvid_core::encoder::EncoderTrainConfig;
use subjvid_core::pretrain::PretrainConfig;
use subjvid_core::model::{Level, LayerId, ModelConfig};
use subjvid_core::ttro::{MaskSource, TtroConfig};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub customize: CustomizeSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub ttro: TtroSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

fn default_name() -> String {
    "default".into()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: default_name(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            encoder: EncoderSection::default(),
            customize: CustomizeSection::default(),
            sampling: SamplingSection::default(),
            ttro: TtroSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_subjects: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n_subjects: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            seed: d.seed,
        }
    }
}

impl PretrainSection {
    pub fn to_core(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            lr: self.lr,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderTrainConfig::default();
        Self {
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            temperature: d.temperature,
            seed: d.seed,
        }
    }
}

impl EncoderSection {
    pub fn to_core(&self) -> EncoderTrainConfig {
        EncoderTrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            temperature: self.temperature,
            seed: self.seed,
            ..EncoderTrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CustomizeSection {
    pub token_lr: f64,
    pub token_steps: usize,
    pub weight_lr: f64,
    pub weight_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub class_word: bool,
}

impl Default for CustomizeSection {
    fn default() -> Self {
        Self::from_core(&TrainConfig::default())
    }
}

impl CustomizeSection {
    pub fn from_core(d: &TrainConfig) -> Self {
        Self {
            token_lr: d.token_lr,
            token_steps: d.token_steps,
            weight_lr: d.weight_lr,
            weight_steps: d.weight_steps,
            batch: d.batch,
            seed: d.seed,
            class_word: d.class_word,
        }
    }

    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            token_lr: self.token_lr,
            token_steps: self.token_steps,
            weight_lr: self.weight_lr,
            weight_steps: self.weight_steps,
            batch: self.batch,
            seed: self.seed,
            class_word: self.class_word,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeName {
    /// Middle and decoder levels.
    Default,
    /// Every attention layer.
    All,
    Mid,
    Dec,
}

impl ScopeName {
    pub fn layers(self, config: &ModelConfig) -> Vec<LayerId> {
        let keep = |l: &LayerId| match self {
            ScopeName::Default => l.level != Level::Enc,
            ScopeName::All => true,
            ScopeName::Mid => l.level == Level::Mid,
            ScopeName::Dec => l.level == Level::Dec,
        };
        config.layers().into_iter().filter(keep).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub frames: usize,
    pub stochastic: bool,
    pub scope: ScopeName,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            frames: 16,
            stochastic: false,
            scope: ScopeName::Default,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskName {
    Attn,
    Gt,
}

impl MaskName {
    pub fn to_core(self) -> MaskSource {
        match self {
            MaskName::Attn => MaskSource::Attention,
            MaskName::Gt => MaskSource::GroundTruth,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(MaskName::Attn),
            "gt" => Ok(MaskName::Gt),
            _ => Err(HarnessError::Config(format!("mask must be attn or gt, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtroSection {
    pub lambda: f64,
    pub iters: usize,
    pub renoise_t: usize,
    pub fresh_noise: bool,
    pub mask: MaskName,
}

impl Default for TtroSection {
    fn default() -> Self {
        let d = TtroConfig::default();
        Self {
            lambda: d.lambda,
            iters: d.iters,
            renoise_t: d.renoise_t,
            fresh_noise: d.fresh_noise,
            mask: MaskName::Attn,
        }
    }
}

impl TtroSection {
    pub fn to_core(&self, seed: u64) -> TtroConfig {
        TtroConfig {
            lambda: self.lambda,
            iters: self.iters,
            renoise_t: self.renoise_t,
            fresh_noise: self.fresh_noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Run `s` uses subject `s % subjects` and that subject's prompt
    /// `s / (subjects * videos_per_prompt)`, sampled with seed `s`.
    pub seeds: usize,
    pub subjects: usize,
    pub videos_per_prompt: usize,
    /// Worker threads; 0 means one per available core.
    pub workers: usize,
    /// Write PNG frames and latent archives for every run.
    pub save_frames: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: 32,
            subjects: 16,
            videos_per_prompt: 2,
            workers: 0,
            save_frames: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        // Check the version first so a future document reports the version
        // mismatch rather than whichever new key it trips over.
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(HarnessError::Config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(HarnessError::Config("missing integer schema_version".to_string())),
        }
        let cfg: Self = serde_json::from_value(raw).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name");
        }
        if self.data.n_subjects == 0 {
            return bad("data.n_subjects must be positive");
        }
        if self.sampling.frames == 0 {
            return bad("sampling.frames must be positive");
        }
        if self.ablation.subjects == 0 || self.ablation.subjects > self.data.n_subjects {
            return bad("ablation.subjects must be in 1..=data.n_subjects");
        }
        if self.ablation.videos_per_prompt == 0 {
            return bad("ablation.videos_per_prompt must be positive");
        }
        if self.pretrain.lr <= 0.0 || self.encoder.lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.encoder.batch < 2 {
            return bad("encoder.batch must be at least 2");
        }
        self.customize.to_core().validate()?;
        if !(self.ttro.lambda > 0.0) {
            return bad("ttro.lambda must be positive");
        }
        if self.ttro.renoise_t == 0 {
            return bad("ttro.renoise_t must be at least 1");
        }
        Ok(())
    }

    /// Short stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
