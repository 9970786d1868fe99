//! Test-time reward optimization.
//!
//! Each iteration re-noises the finished latents to a low noise level,
//! predicts the clean latents with one reverse step, scores them with a
//! latent-domain reward (foreground-mean cosine against the reference frame)
//! and a pixel-domain reward (proxy-encoder cosine of masked decoded frames
//! against masked reference images), ascends the gradient on the noisy
//! latents and denoises the result. Masks are constants inside an iteration.

use alloc::string::ToString;
use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::codec;
use crate::correspondence::resample_features;
use crate::diffusion::{forward_diffuse, reverse_step, reverse_step_var, LatentVideo, NoiseSchedule};
use crate::encoder::{apply_masks, EncoderVars, ProxyEncoder};
use crate::error::{Error, Result};
use crate::model::{forward, predict_noise, Bindings, ModelWeights, NoControl, PromptEncoding};
use crate::rng::{streams, Rng};
use crate::stpm::{final_soft_masks, SoftMask};
use crate::tensor::Tensor;

const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Attention,
    GroundTruth,
}

/// Binary per-frame subject masks on the pixel grid and the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub source: MaskSource,
    /// `[J, H, W]`.
    pub pixels: Tensor,
    /// `[J, h, w]`: a latent cell is foreground when at least half its
    /// pixels are.
    pub latent: Tensor,
}

impl SubjectMask {
    pub fn from_pixels(pixels: Tensor, source: MaskSource) -> Result<Self> {
        let s = pixels.shape().to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(codec::PATCH) || !s[2].is_multiple_of(codec::PATCH) {
            return Err(Error::Shape(format!("pixel masks must be [J, H, W] with H, W multiples of 4, got {s:?}")));
        }
        let (j, h, w) = (s[0], s[1] / codec::PATCH, s[2] / codec::PATCH);
        let area = (codec::PATCH * codec::PATCH) as f64;
        let latent = Tensor::from_fn(&[j, h, w], |i| {
            let (f, cy, cx) = (i / (h * w), (i / w) % h, i % w);
            let mut on = 0.0;
            for dy in 0..codec::PATCH {
                for dx in 0..codec::PATCH {
                    on += pixels.data()[(f * s[1] + cy * codec::PATCH + dy) * s[2] + cx * codec::PATCH + dx];
                }
            }
            if on / area >= 0.5 {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self { source, pixels, latent })
    }

    /// Upsamples each soft mask bilinearly to `size` and keeps values `>= 0.5`.
    pub fn from_soft(masks: &[SoftMask], size: (usize, usize)) -> Result<Self> {
        let mut data = Vec::with_capacity(masks.len() * size.0 * size.1);
        for m in masks {
            let s = m.values.shape();
            let grid = Tensor::new(&[s[0], s[1], 1], m.values.data().to_vec());
            let up = resample_features(&grid, size.0, size.1)?;
            data.extend(up.data().iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }));
        }
        Self::from_pixels(Tensor::new(&[masks.len(), size.0, size.1], data), MaskSource::Attention)
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Frames with foreground on both grids; the others are left out of the rewards.
    pub fn counted(&self) -> Vec<bool> {
        let j = self.frames();
        (0..j)
            .map(|f| self.pixels.outer(f).iter().any(|v| *v > 0.0) && self.latent.outer(f).iter().any(|v| *v > 0.0))
            .collect()
    }

    pub fn frame(&self, f: usize) -> Self {
        let ps = self.pixels.shape();
        let ls = self.latent.shape();
        Self {
            source: self.source,
            pixels: Tensor::new(&[1, ps[1], ps[2]], self.pixels.outer(f).to_vec()),
            latent: Tensor::new(&[1, ls[1], ls[2]], self.latent.outer(f).to_vec()),
        }
    }
}

/// Masks from soft attention masks (attention mode) or pixel masks (ground truth).
pub fn subject_masks(source: MaskSource, soft: &[SoftMask], truth: Option<&Tensor>, size: (usize, usize)) -> Result<SubjectMask> {
    match source {
        MaskSource::Attention => SubjectMask::from_soft(soft, size),
        MaskSource::GroundTruth => {
            let t = truth.ok_or_else(|| Error::Config("ground-truth masks not supplied".to_string()))?;
            SubjectMask::from_pixels(t.clone(), MaskSource::GroundTruth)
        }
    }
}

/// Attention masks of finished latents: one uncontrolled forward pass at
/// `t = 1` on the clean latents, reading the subject column of the feature
/// layer. Depends only on the latents, so outputs of differently controlled
/// samplers are segmented the same way.
pub fn segment(weights: &ModelWeights, prompt: &PromptEncoding, latents: &LatentVideo, size: (usize, usize)) -> Result<SubjectMask> {
    let special = prompt
        .special_index()
        .ok_or_else(|| Error::Prompt("segmentation needs the subject token in the prompt".to_string()))?;
    let (_, records) = predict_noise(&latents.clone().with_t(1), prompt, 1, weights, None, true)?;
    let soft = final_soft_masks(&records, &weights.config, special, latents.j_count())?;
    SubjectMask::from_soft(&soft, size)
}

/// What the rewards compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTargets {
    /// `[C, h, w]` clean reference-frame latent.
    pub reference_latent: Tensor,
    /// `[h, w]` binary.
    pub reference_mask: Tensor,
    /// `[N, E]` embeddings of the masked reference images.
    pub reference_embeddings: Tensor,
}

impl RewardTargets {
    pub fn reference_mean(&self) -> Result<Vec<f64>> {
        let c = self.reference_latent.shape()[0];
        let n = self.reference_mask.len();
        let count: f64 = self.reference_mask.sum();
        if count == 0.0 {
            return Err(Error::NoForeground);
        }
        Ok((0..c)
            .map(|ch| {
                let row = &self.reference_latent.data()[ch * n..(ch + 1) * n];
                row.iter().zip(self.reference_mask.data()).map(|(z, m)| z * m).sum::<f64>() / count
            })
            .collect())
    }
}

/// Embeddings of reference images under their masks.
pub fn reference_embeddings(encoder: &ProxyEncoder, images: &Tensor, masks: &Tensor) -> Tensor {
    encoder.embed(&apply_masks(images, masks))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>() + COS_EPS);
    v.iter().map(|x| x / n).collect()
}

/// `sum_f cos(mean_fg(z_f), mean_fg(z_ref))` on the tape, with per-frame
/// cosines. `z_hat` is `[J, C, h, w]`, `masks` is `[J, h, w]`.
pub fn reward_latent_var(g: &mut Graph, z_hat: Var, masks: &Tensor, targets: &RewardTargets) -> Result<(Var, Vec<Option<Var>>)> {
    let s = g.shape(z_hat).to_vec();
    let (j, c, n) = (s[0], s[1], s[2] * s[3]);
    if masks.shape() != [j, s[2], s[3]] || targets.reference_mask.len() != n || targets.reference_latent.shape()[0] != c {
        return Err(Error::Shape(format!(
            "latents {s:?} with masks {:?} and reference {:?}",
            masks.shape(),
            targets.reference_latent.shape()
        )));
    }
    let r = unit(&targets.reference_mean()?);
    let r = g.constant(Tensor::new(&[1, c], r));
    let mut total: Option<Var> = None;
    let mut per_frame = Vec::with_capacity(j);
    for f in 0..j {
        let m = masks.outer(f);
        let count: f64 = m.iter().sum();
        if count == 0.0 {
            per_frame.push(None);
            continue;
        }
        let frame = g.slice(z_hat, f, 1);
        let frame = g.reshape(frame, &[c, n]);
        let weights = g.constant(Tensor::new(&[n, 1], m.iter().map(|v| v / count).collect()));
        let mean = g.matmul(frame, weights);
        let mean = g.reshape(mean, &[1, c]);
        let mean = g.l2_normalize(mean, COS_EPS);
        let prod = g.mul(mean, r);
        let cos = g.sum(prod);
        per_frame.push(Some(cos));
        total = Some(match total {
            Some(t) => g.add(t, cos),
            None => cos,
        });
    }
    total.map(|t| (t, per_frame)).ok_or(Error::NoForeground)
}

/// `(1 / (J N)) sum_f sum_n cos(enc(F_f * M_f), enc(I_n * M_n))` on the tape
/// over counted frames. `frames` is `[J, 3, H, W]`, `masks` is `[J, H, W]`.
pub fn reward_pixel_var(
    g: &mut Graph,
    encoder: &ProxyEncoder,
    vars: &EncoderVars,
    frames: Var,
    masks: &Tensor,
    counted: &[bool],
    targets: &RewardTargets,
) -> Result<Var> {
    let s = g.shape(frames).to_vec();
    let (j, hw) = (s[0], s[2] * s[3]);
    if masks.shape() != [j, s[2], s[3]] || counted.len() != j {
        return Err(Error::Shape(format!("frames {s:?} with masks {:?}", masks.shape())));
    }
    let keep: Vec<usize> = (0..j).filter(|&f| counted[f]).collect();
    if keep.is_empty() {
        return Err(Error::NoForeground);
    }
    let mut idx = Vec::with_capacity(keep.len() * 3 * hw);
    let mut mask_data = Vec::with_capacity(keep.len() * 3 * hw);
    for &f in &keep {
        for ch in 0..3 {
            for p in 0..hw {
                idx.push(((f * 3 + ch) * hw + p) as u32);
                mask_data.push(masks.data()[f * hw + p]);
            }
        }
    }
    let shape = [keep.len(), 3, s[2], s[3]];
    let kept = g.gather(frames, idx, &shape);
    let mask = g.constant(Tensor::new(&shape, mask_data));
    let masked = g.mul(kept, mask);
    let emb = encoder.embed_var(g, vars, masked);
    let refs = g.constant(targets.reference_embeddings.clone());
    let sims = g.matmul_nt(emb, refs);
    Ok(g.mean(sims))
}

/// Plain-value rewards of clean latents: `(R_lat, R_pixel, per-frame cosine)`.
pub fn evaluate_rewards(
    z_hat: &Tensor,
    masks: &SubjectMask,
    targets: &RewardTargets,
    encoder: &ProxyEncoder,
) -> Result<(f64, f64, Vec<Option<f64>>)> {
    let mut g = Graph::new();
    let vars = encoder.bind(&mut g, false);
    let z = g.constant(z_hat.clone());
    let (r_lat, per) = reward_latent_var(&mut g, z, &masks.latent, targets)?;
    let frames = codec::decode_var(&mut g, z);
    let r_pix = reward_pixel_var(&mut g, encoder, &vars, frames, &masks.pixels, &masks.counted(), targets)?;
    let per = per.iter().map(|v| v.map(|v| g.value(v).item())).collect();
    Ok((g.value(r_lat).item(), g.value(r_pix).item(), per))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtroConfig {
    pub lambda: f64,
    pub iters: usize,
    /// Noise level the latents are re-noised to.
    pub renoise_t: usize,
    /// Draw fresh re-noising noise every iteration (otherwise re-noise once
    /// and keep updating the same noisy latent).
    pub fresh_noise: bool,
    pub seed: u64,
}

impl Default for TtroConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            iters: 5,
            renoise_t: 1,
            fresh_noise: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardReport {
    pub iteration: usize,
    pub r_lat: f64,
    pub r_pixel: f64,
    pub grad_norm: f64,
    /// Latent-domain cosine of each frame; `None` for excluded frames.
    pub frame_similarity: Vec<Option<f64>>,
    pub wall_seconds: f64,
}

impl RewardReport {
    pub fn total(&self) -> f64 {
        self.r_lat + self.r_pixel
    }
}

/// Wall-clock source; the core crate has none of its own.
pub trait Clock {
    fn seconds(&mut self) -> f64;
}

pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&mut self) -> f64 {
        0.0
    }
}

/// Everything an iteration needs besides the latents.
pub struct TtroContext<'a> {
    pub weights: &'a ModelWeights,
    pub encoder: &'a ProxyEncoder,
    pub sched: &'a NoiseSchedule,
    pub prompt: &'a PromptEncoding,
    pub targets: &'a RewardTargets,
}

/// Rewards and their gradient with respect to the noisy latents `z_t`.
pub fn reward_gradient(ctx: &TtroContext, zt: &LatentVideo, masks: &SubjectMask) -> Result<(f64, f64, Vec<Option<f64>>, Tensor)> {
    let mut g = Graph::new();
    let b = Bindings::constant(&mut g, ctx.weights);
    let vars = ctx.encoder.bind(&mut g, false);
    let z = g.param(zt.tensor().clone());
    let mut cur = z;
    for t in (1..=zt.t()).rev() {
        let out = forward(&mut g, ctx.weights, &b, cur, ctx.prompt, t, true, &mut NoControl, false)?;
        cur = reverse_step_var(&mut g, cur, out.eps, t, ctx.sched);
    }
    let (r_lat, per) = reward_latent_var(&mut g, cur, &masks.latent, ctx.targets)?;
    let frames = codec::decode_var(&mut g, cur);
    let r_pix = reward_pixel_var(&mut g, ctx.encoder, &vars, frames, &masks.pixels, &masks.counted(), ctx.targets)?;
    let total = g.add(r_lat, r_pix);
    let grads = g.backward(total);
    let grad = grads.get(z).cloned().unwrap_or_else(|| Tensor::zeros(zt.tensor().shape()));
    let per = per.iter().map(|v| v.map(|v| g.value(v).item())).collect();
    Ok((g.value(r_lat).item(), g.value(r_pix).item(), per, grad))
}

/// Deterministic denoising from `zt.t()` to 0; also returns the attention
/// records of the final step.
pub fn denoise(ctx: &TtroContext, zt: LatentVideo) -> Result<(LatentVideo, Vec<crate::model::AttentionRecord>)> {
    let mut z = zt;
    let mut records = Vec::new();
    for t in (1..=z.t()).rev() {
        let (eps, rec) = predict_noise(&z, ctx.prompt, t, ctx.weights, None, t == 1)?;
        z = reverse_step(&z, &eps, t, None, ctx.sched, false)?;
        records = rec;
    }
    Ok((z, records))
}

/// One iteration on already noised latents: ascend, then denoise.
pub fn ttro_step(
    ctx: &TtroContext,
    zt: &LatentVideo,
    masks: &SubjectMask,
    lambda: f64,
    iteration: usize,
) -> Result<(LatentVideo, Vec<crate::model::AttentionRecord>, LatentVideo, RewardReport)> {
    if !(lambda > 0.0) {
        return Err(Error::Config("lambda must be positive".to_string()));
    }
    let (r_lat, r_pixel, frame_similarity, grad) = reward_gradient(ctx, zt, masks)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient(iteration));
    }
    let mut updated = zt.tensor().clone();
    updated.axpy(lambda, &grad);
    let updated = LatentVideo::new(updated, zt.t())?;
    let (z0, records) = denoise(ctx, updated.clone())?;
    let report = RewardReport {
        iteration,
        r_lat,
        r_pixel,
        grad_norm: grad.norm(),
        frame_similarity,
        wall_seconds: 0.0,
    };
    Ok((z0, records, updated, report))
}

/// Runs `cfg.iters` iterations. In attention mode the masks are rebuilt from
/// the subject column of each iteration's final denoising step.
pub fn ttro_loop(
    ctx: &TtroContext,
    z0: &LatentVideo,
    masks: SubjectMask,
    cfg: &TtroConfig,
    clock: &mut dyn Clock,
) -> Result<(LatentVideo, Vec<RewardReport>)> {
    let special = ctx.prompt.special_index();
    let mut rng = Rng::new(cfg.seed, streams::TTRO);
    let mut z = z0.clone();
    let mut masks = masks;
    let mut reports = Vec::with_capacity(cfg.iters);
    let mut noisy: Option<LatentVideo> = None;
    let size = (masks.pixels.shape()[1], masks.pixels.shape()[2]);
    for it in 0..cfg.iters {
        let start = clock.seconds();
        let zt = match (&noisy, cfg.fresh_noise) {
            (Some(prev), false) => prev.clone(),
            _ => {
                let eps = rng.normal_tensor(z.tensor().shape());
                forward_diffuse(&z.with_t(0), cfg.renoise_t, &eps, ctx.sched)?
            }
        };
        let (next, records, updated, mut report) = ttro_step(ctx, &zt, &masks, cfg.lambda, it + 1)?;
        report.wall_seconds = clock.seconds() - start;
        reports.push(report);
        z = next;
        noisy = Some(updated);
        if let (MaskSource::Attention, Some(i)) = (masks.source, special) {
            let soft = final_soft_masks(&records, &ctx.weights.config, i, z.j_count())?;
            let fresh = SubjectMask::from_soft(&soft, size)?;
            // A frame whose new mask is empty keeps its previous mask.
            let mut pixels = fresh.pixels.clone();
            for (f, ok) in fresh.counted().iter().enumerate() {
                if !ok {
                    pixels.outer_mut(f).copy_from_slice(masks.pixels.outer(f));
                }
            }
            masks = SubjectMask::from_pixels(pixels, MaskSource::Attention)?;
        }
    }
    Ok((z, reports))
}
