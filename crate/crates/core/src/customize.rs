//! Subject customization: learn the `<S*>` embedding, then fine-tune the
//! denoiser on the reference images.
//!
//! Both stages minimise the noise-prediction loss
//! `mean((eps_theta(z_t, c, t) - eps)^2)` in image mode with Adam.

use alloc::string::ToString;
use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::codec;
use crate::diffusion::{forward_diffuse, LatentVideo, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{forward, Bindings, ModelWeights, NoControl, PromptEncoding, TEXT_TABLE};
use crate::optim::Adam;
use crate::rng::{streams, Rng};
use crate::synth::{self, SyntheticSubject};
use crate::tensor::Tensor;

/// The reference images of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    /// `[N, 3, 32, 32]` in `[0, 1]`.
    pub images: Tensor,
    /// `[N, 12, 8, 8]`.
    pub latents: Tensor,
    /// `[N, 32, 32]` binary.
    pub masks: Tensor,
    pub class_word: &'static str,
    /// Scene index of each image, used by the training prompts.
    pub scenes: Vec<usize>,
}

impl ReferenceSet {
    pub fn new(images: Tensor, masks: Tensor, class_word: &'static str, scenes: Vec<usize>) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyReferences);
        }
        let s = codec::IMAGE_SIZE;
        if images.shape() != [n, 3, s, s] || masks.shape() != [n, s, s] || scenes.len() != n {
            return Err(Error::Shape(format!(
                "references {:?} with masks {:?} and {} scenes",
                images.shape(),
                masks.shape(),
                scenes.len()
            )));
        }
        if masks.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Shape("reference masks must be binary".to_string()));
        }
        let latents = codec::encode_stack(&images);
        Ok(Self {
            images,
            latents,
            masks,
            class_word,
            scenes,
        })
    }

    pub fn from_subject(subject: &SyntheticSubject) -> Self {
        let n = subject.views.len();
        let mut images = Vec::with_capacity(n * 3 * 32 * 32);
        let mut masks = Vec::with_capacity(n * 32 * 32);
        for v in &subject.views {
            images.extend_from_slice(v.image.data());
            masks.extend_from_slice(v.mask.data());
        }
        let s = codec::IMAGE_SIZE;
        Self::new(
            Tensor::new(&[n, 3, s, s], images),
            Tensor::new(&[n, s, s], masks),
            subject.appearance.class_word(),
            subject.views.iter().map(|v| v.scene).collect(),
        )
        .expect("rendered subjects are well formed")
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent(&self, n: usize) -> LatentVideo {
        let shape = &self.latents.shape()[1..];
        let t = Tensor::new(&[1, shape[0], shape[1], shape[2]], self.latents.outer(n).to_vec());
        LatentVideo::new(t, 0).expect("reference latent is a single frame")
    }

    /// Training prompt of image `n`: "a <S*> circle on grass", or without
    /// the class word.
    pub fn prompt(&self, n: usize, with_class: bool, max_len: usize) -> Result<PromptEncoding> {
        let mut words = alloc::vec!["a", synth::SPECIAL_TOKEN];
        if with_class {
            words.push(self.class_word);
        }
        words.push("on");
        words.push(synth::SCENE_NAMES[self.scenes[n]]);
        PromptEncoding::from_words(&words, max_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub token_lr: f64,
    pub token_steps: usize,
    pub weight_lr: f64,
    pub weight_steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Keep the embedding table fixed while fine-tuning weights.
    pub freeze_embeddings: bool,
    pub class_word: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_lr: 5e-3,
            token_steps: 60,
            weight_lr: 5e-4,
            weight_steps: 200,
            batch: 1,
            seed: 0,
            freeze_embeddings: true,
            class_word: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.token_lr > 0.0 && self.weight_lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("learning rates and batch size must be positive".to_string()));
        }
        Ok(())
    }
}

/// Denoising loss on a single sample; returns the loss and nothing else.
pub fn diffusion_loss(z0: &LatentVideo, prompt: &PromptEncoding, t: usize, eps: &Tensor, weights: &ModelWeights, sched: &NoiseSchedule) -> Result<f64> {
    let zt = forward_diffuse(z0, t, eps, sched)?;
    let mut g = Graph::new();
    let b = Bindings::constant(&mut g, weights);
    let z = g.constant(zt.into_tensor());
    let out = forward(&mut g, weights, &b, z, prompt, t, false, &mut NoControl, false)?;
    let target = g.constant(eps.clone());
    let loss = g.mse(out.eps, target);
    Ok(g.value(loss).item())
}

/// Loss and gradients of the parameters selected by `trainable`, averaged
/// over the given samples.
pub fn loss_and_grads(
    samples: &[(LatentVideo, PromptEncoding, usize, Tensor)],
    weights: &ModelWeights,
    sched: &NoiseSchedule,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(f64, Vec<(alloc::string::String, Tensor)>)> {
    let mut total = 0.0;
    let mut acc: Vec<(alloc::string::String, Tensor)> = Vec::new();
    for (z0, prompt, t, eps) in samples {
        let zt = forward_diffuse(z0, *t, eps, sched)?;
        let mut g = Graph::new();
        let b = Bindings::bind(&mut g, weights, trainable);
        let z = g.constant(zt.into_tensor());
        let out = forward(&mut g, weights, &b, z, prompt, *t, z0.j_count() > 1, &mut NoControl, false)?;
        let target = g.constant(eps.clone());
        let loss = g.mse(out.eps, target);
        total += g.value(loss).item();
        let mut grads = g.backward(loss);
        for (name, var) in b.iter() {
            if !trainable(name) {
                continue;
            }
            let grad = grads.take(*var).unwrap_or_else(|| Tensor::zeros(weights.param(name).shape()));
            match acc.iter_mut().find(|(n, _)| n == name) {
                Some((_, a)) => a.add_assign(&grad),
                None => acc.push((name.clone(), grad)),
            }
        }
    }
    let k = samples.len().max(1) as f64;
    for (_, g) in acc.iter_mut() {
        *g = g.scale(1.0 / k);
    }
    Ok((total / k, acc))
}

fn draw_samples(
    refs: &ReferenceSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    max_len: usize,
    rng: &mut Rng,
    count: usize,
) -> Result<Vec<(LatentVideo, PromptEncoding, usize, Tensor)>> {
    (0..count)
        .map(|_| {
            let n = rng.below(refs.len());
            let z0 = refs.latent(n);
            let t = 1 + rng.below(sched.steps());
            let eps = rng.normal_tensor(z0.tensor().shape());
            Ok((z0, refs.prompt(n, cfg.class_word, max_len)?, t, eps))
        })
        .collect()
}

/// Fixed batch of noise draws for before/after comparisons.
pub fn heldout_loss(refs: &ReferenceSet, weights: &ModelWeights, sched: &NoiseSchedule, cfg: &TrainConfig, count: usize) -> Result<f64> {
    let mut rng = Rng::new(cfg.seed, streams::HELDOUT);
    let samples = draw_samples(refs, cfg, sched, weights.config.max_prompt, &mut rng, count)?;
    let mut sum = 0.0;
    for (z0, p, t, eps) in &samples {
        sum += diffusion_loss(z0, p, *t, eps, weights, sched)?;
    }
    Ok(sum / count.max(1) as f64)
}

/// Per-step training losses.
pub type LossLog = Vec<f64>;

/// Initial `<S*>` row: the mean of the colour-word embeddings.
pub fn init_special_token(weights: &mut ModelWeights) {
    let colors = synth::color_token_ids();
    let dim = weights.config.text_dim;
    let mut mean = alloc::vec![0.0; dim];
    for &c in &colors {
        for (m, v) in mean.iter_mut().zip(weights.embedding(c)) {
            *m += v / colors.len() as f64;
        }
    }
    weights.set_embedding(synth::special_token_id(), &mean);
}

/// Textual inversion: Adam on the `<S*>` row only.
pub fn train_token(refs: &ReferenceSet, weights: &ModelWeights, cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<(ModelWeights, LossLog)> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let mut w = weights.clone();
    let special = synth::special_token_id();
    let dim = w.config.text_dim;
    let mut rng = Rng::new(cfg.seed, streams::TRAIN);
    let mut log = Vec::with_capacity(cfg.token_steps);
    let mut opt = Adam::new(cfg.token_lr);
    for _ in 0..cfg.token_steps {
        let samples = draw_samples(refs, cfg, sched, w.config.max_prompt, &mut rng, cfg.batch)?;
        let (loss, grads) = loss_and_grads(&samples, &w, sched, &|n| n == TEXT_TABLE)?;
        let grad = &grads[0].1;
        let row = Tensor::new(&[dim], grad.row(special).to_vec());
        if !row.is_finite() {
            return Err(Error::NonFiniteGradient(log.len()));
        }
        let mut emb = Tensor::new(&[dim], w.embedding(special).to_vec());
        opt.tick();
        opt.update("special", &mut emb, &row);
        w.set_embedding(special, emb.data());
        log.push(loss);
    }
    Ok((w, log))
}

/// Fine-tunes every denoiser parameter (and the embedding table unless frozen).
pub fn finetune_weights(refs: &ReferenceSet, weights: &ModelWeights, cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<(ModelWeights, LossLog)> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let mut w = weights.clone();
    let mut rng = Rng::new(cfg.seed ^ 0x5eed, streams::TRAIN);
    let freeze = cfg.freeze_embeddings;
    let trainable = move |n: &str| !(freeze && n == TEXT_TABLE);
    let mut log = Vec::with_capacity(cfg.weight_steps);
    let mut opt = Adam::new(cfg.weight_lr);
    for step in 0..cfg.weight_steps {
        let samples = draw_samples(refs, cfg, sched, w.config.max_prompt, &mut rng, cfg.batch)?;
        let (loss, grads) = loss_and_grads(&samples, &w, sched, &trainable)?;
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(step));
        }
        opt.tick();
        for (name, g) in &grads {
            opt.update(name, w.param_mut(name), g);
        }
        log.push(loss);
    }
    Ok((w, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> (ReferenceSet, ModelWeights, NoiseSchedule) {
        let subject = SyntheticSubject::generate(0, 1);
        let refs = ReferenceSet::from_subject(&subject);
        let mut w = ModelWeights::init(ModelConfig::default(), 2).unwrap();
        init_special_token(&mut w);
        (refs, w, NoiseSchedule::default_toy())
    }

    #[test]
    fn zero_steps_is_identity() {
        let (refs, w, s) = tiny();
        let cfg = TrainConfig {
            token_steps: 0,
            weight_steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train_token(&refs, &w, &cfg, &s).unwrap().0, w);
        assert_eq!(finetune_weights(&refs, &w, &cfg, &s).unwrap().0, w);
    }

    #[test]
    fn token_training_touches_one_row() {
        let (refs, w, s) = tiny();
        let cfg = TrainConfig {
            token_steps: 3,
            token_lr: 1.0,
            ..TrainConfig::default()
        };
        let (out, log) = train_token(&refs, &w, &cfg, &s).unwrap();
        assert_eq!(log.len(), 3);
        let special = synth::special_token_id();
        for (name, t) in w.params() {
            if name == TEXT_TABLE {
                for r in 0..w.config.vocab {
                    assert_eq!(out.embedding(r) == t.row(r), r != special, "row {r}");
                }
            } else {
                assert_eq!(out.param(name), t);
            }
        }
    }

    #[test]
    fn loss_closed_forms() {
        // eps_theta == 0 against all-ones noise: mean convention gives 1.
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::full(&[2, 3], 1.0));
        let l = g.mse(a, b);
        assert_eq!(g.value(l).item(), 1.0);
        let l = g.mse(b, b);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn empty_references_rejected() {
        assert!(matches!(
            ReferenceSet::new(Tensor::zeros(&[0, 3, 32, 32]), Tensor::zeros(&[0, 32, 32]), "circle", Vec::new()),
            Err(Error::EmptyReferences)
        ));
    }
}
