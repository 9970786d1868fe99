//! Base text-to-video pretraining on procedurally rendered clips.
//!
//! Steps alternate between single images (image mode, temporal modules
//! bypassed) and full motion clips (temporal modules on). Prompts describe
//! colour, pattern, shape, motion and scene; colour and pattern words are
//! dropped at random so prompts without them stay in distribution. Velocity
//! models are trained on the velocity error rather than the noise error.

use alloc::string::String;
use alloc::vec::Vec;

use crate::codec;
use crate::customize::loss_and_grads;
use crate::diffusion::{LatentVideo, NoiseSchedule};
use crate::error::Result;
use crate::model::{ModelConfig, ModelWeights, Prediction, PromptEncoding};
use crate::optim::Adam;
use crate::rng::{streams, Rng};
use crate::synth::{self, Appearance, Motion, Placement};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Frames per training clip.
    pub clip_frames: usize,
    /// Every `video_every`-th step is a clip; the rest are image batches.
    pub video_every: usize,
    pub image_batch: usize,
    /// Probability of dropping the colour or pattern word.
    pub word_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 2e-3,
            clip_frames: synth::FRAMES_PER_VIDEO,
            video_every: 2,
            image_batch: 4,
            word_dropout: 0.2,
            seed: 0,
        }
    }
}

fn prompt_words(app: &Appearance, motion: Option<Motion>, scene: usize, rng: &mut Rng, dropout: f64) -> Vec<&'static str> {
    let mut words = synth::describe(app, motion, Some(scene));
    // words = [a, colour, pattern, shape, ...]
    let drop_pattern = rng.uniform() < dropout;
    let drop_color = rng.uniform() < dropout;
    if drop_pattern {
        words.remove(2);
    }
    if drop_color {
        words.remove(1);
    }
    words
}

/// Runs base pretraining and returns the weights with the per-step loss.
pub fn pretrain(config: ModelConfig, cfg: &PretrainConfig, sched: &NoiseSchedule) -> Result<(ModelWeights, Vec<f64>)> {
    let mut weights = ModelWeights::init(config, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed, streams::TRAIN + 20);
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    let decay_from = cfg.steps * 7 / 10;
    for step in 0..cfg.steps {
        let app = Appearance::random(&mut rng, true);
        let scene = rng.below(synth::SCENE_NAMES.len());
        let video = cfg.video_every > 0 && step % cfg.video_every == 0;
        let (images, motion) = if video {
            let motion = Motion::ALL[rng.below(Motion::ALL.len())];
            let start = synth::random_start(&mut rng);
            (synth::render_video(&app, motion, start, scene, cfg.clip_frames).0, Some(motion))
        } else {
            let mut data = Vec::new();
            for _ in 0..cfg.image_batch {
                let place = Placement {
                    cx: 16.0 + rng.range(-7.0, 7.0),
                    cy: 16.0 + rng.range(-7.0, 7.0),
                    radius: rng.range(4.5, 9.0),
                };
                data.extend_from_slice(synth::render(&app, &place, scene).0.data());
            }
            (crate::Tensor::new(&[cfg.image_batch, 3, 32, 32], data), None)
        };
        let words = prompt_words(&app, motion, scene, &mut rng, cfg.word_dropout);
        let prompt = PromptEncoding::from_words(&words, config.max_prompt)?;
        let z0 = LatentVideo::new(codec::encode_stack(&images), 0)?;
        let t = 1 + rng.below(sched.steps());
        let eps = rng.normal_tensor(z0.tensor().shape());
        // Image batches run in image mode: J > 1 frames but no temporal mixing.
        let (loss, mut grads) = if video {
            loss_and_grads(&[(z0, prompt, t, eps)], &weights, sched, &|_| true)?
        } else {
            image_batch_grads(z0, prompt, t, eps, &weights, sched)?
        };
        // Noise error divided by abar_t is the velocity error, which weights
        // high noise levels enough for the clean estimate to be learned.
        let weight = match config.prediction {
            Prediction::Velocity => 1.0 / sched.alpha_bar(t),
            Prediction::Epsilon => 1.0,
        };
        for (_, g) in grads.iter_mut() {
            *g = g.scale(weight);
        }
        let loss = loss * weight;
        let lr_scale = if step >= decay_from {
            1.0 - 0.9 * (step - decay_from) as f64 / (cfg.steps - decay_from).max(1) as f64
        } else {
            1.0
        };
        opt.lr = cfg.lr * lr_scale;
        opt.tick();
        for (name, g) in &grads {
            opt.update(name, weights.param_mut(name), g);
        }
        log.push(loss);
    }
    Ok((weights, log))
}

fn image_batch_grads(
    z0: LatentVideo,
    prompt: PromptEncoding,
    t: usize,
    eps: crate::Tensor,
    weights: &ModelWeights,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<(String, crate::Tensor)>)> {
    use crate::autograd::Graph;
    use crate::diffusion::forward_diffuse;
    use crate::model::{forward, Bindings, NoControl};
    let zt = forward_diffuse(&z0, t, &eps, sched)?;
    let mut g = Graph::new();
    let b = Bindings::bind(&mut g, weights, |_| true);
    let z = g.constant(zt.into_tensor());
    let out = forward(&mut g, weights, &b, z, &prompt, t, false, &mut NoControl, false)?;
    let target = g.constant(eps);
    let loss = g.mse(out.eps, target);
    let value = g.value(loss).item();
    let mut grads = g.backward(loss);
    let out = b
        .iter()
        .map(|(name, v)| {
            let gr = grads
                .take(*v)
                .unwrap_or_else(|| crate::Tensor::zeros(weights.param(name).shape()));
            (name.clone(), gr)
        })
        .collect();
    Ok((value, out))
}
