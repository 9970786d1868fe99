//! Structure and texture propagation during joint sampling.
//!
//! A reference image is sampled in image mode alongside the video. At every
//! step after the first, the subject token's cross-attention column of the
//! reference is carried frame by frame along matching flows (each frame warps
//! the previous frame's result, never the reference directly) and written
//! into the video's cross-attention logits. Self-attention values are carried
//! the same way and blended in under a soft mask built from the subject
//! column of the preceding cross-attention module.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::correspondence::{cost_volume, flow_from_cost, resample_features, warp, MatchingFlow};
use crate::diffusion::{reverse_step, LatentVideo, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{
    image_mode_predict, predict_noise, AttentionControl, AttentionRecord, LayerId, Level, ModelConfig,
    ModelWeights, PromptEncoding,
};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Min-max normalized subject attention on one layer's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    /// `[h_l, w_l]` in `[0, 1]`.
    pub values: Tensor,
    pub layer: Option<LayerId>,
    pub frame: Option<usize>,
}

/// `(x - min) / (max - min)` over the column, reshaped to `[h, w]`. A constant
/// column gives the all-zero mask.
pub fn soft_mask(column: &[f64], h: usize, w: usize) -> Result<SoftMask> {
    if column.len() != h * w || column.is_empty() {
        return Err(Error::Shape(format!("column of length {} for a {h}x{w} mask", column.len())));
    }
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = if span > 0.0 {
        column.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        alloc::vec![0.0; h * w]
    };
    Ok(SoftMask {
        values: Tensor::new(&[h, w], values),
        layer: None,
        frame: None,
    })
}

/// Subject column of each listed layer from reference-stream records.
pub fn extract_structure(
    records: &[AttentionRecord],
    special: usize,
    layers: &[LayerId],
) -> Result<BTreeMap<LayerId, Vec<f64>>> {
    layers
        .iter()
        .map(|&layer| {
            let r = records
                .iter()
                .find(|r| r.layer == layer && r.frame == 0)
                .ok_or_else(|| Error::MissingCapture(layer.to_string()))?;
            Ok((layer, r.cross_column(special)?))
        })
        .collect()
}

/// Flows from the reference to frame 1 and between consecutive frames, all
/// at one grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowChain {
    pub from_reference: MatchingFlow,
    /// `between[f]` maps frame `f` onto frame `f + 1`.
    pub between: Vec<MatchingFlow>,
}

impl FlowChain {
    pub fn frames(&self) -> usize {
        self.between.len() + 1
    }

    /// Flow that lands on frame `f`.
    pub fn into_frame(&self, f: usize) -> &MatchingFlow {
        if f == 0 {
            &self.from_reference
        } else {
            &self.between[f - 1]
        }
    }

    fn check(&self) -> Result<(usize, usize)> {
        let shape = self.from_reference.target_shape;
        let all = core::iter::once(&self.from_reference).chain(&self.between);
        for flow in all {
            if flow.source_shape != shape || flow.target_shape != shape {
                return Err(Error::FlowChain(format!(
                    "flow {:?}->{:?} in a {shape:?} chain",
                    flow.source_shape, flow.target_shape
                )));
            }
        }
        Ok(shape)
    }

    /// Builds the chain from `[h, w, d]` decoder features resampled to
    /// `(h_l, w_l)`.
    pub fn from_features(reference: &Tensor, frames: &[Tensor], size: (usize, usize), t: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::FlowChain("no frames".to_string()));
        }
        let r = resample_features(reference, size.0, size.1)?;
        let fs = frames
            .iter()
            .map(|f| resample_features(f, size.0, size.1))
            .collect::<Result<Vec<_>>>()?;
        let from_reference = flow_from_cost(&cost_volume(&r, &fs[0], t)?);
        let between = fs
            .windows(2)
            .map(|w| Ok(flow_from_cost(&cost_volume(&w[0], &w[1], t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { from_reference, between })
    }
}

/// `A*_1 = Warp(A*_ref, o_ref->1)`, `A*_{f+1} = Warp(A*_f, o_f->f+1)`.
pub fn propagate_structure(a_ref: &[f64], chain: &FlowChain) -> Result<Vec<Vec<f64>>> {
    let (h, w) = chain.check()?;
    if a_ref.len() != h * w {
        return Err(Error::FlowChain(format!(
            "column of length {} on a {h}x{w} chain",
            a_ref.len()
        )));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(chain.frames());
    let mut prev = Tensor::new(&[h * w], a_ref.to_vec());
    for f in 0..chain.frames() {
        prev = warp(&prev, chain.into_frame(f))?;
        out.push(prev.data().to_vec());
    }
    Ok(out)
}

/// Replaces column `special` (zero-based) of `native: [n, L]` with `a_star`.
pub fn inject_structure(native: &Tensor, a_star: &[f64], special: usize) -> Result<Tensor> {
    let l = native.last_dim();
    let n = native.len() / l.max(1);
    if native.ndim() != 2 || a_star.len() != n {
        return Err(Error::Shape(format!(
            "cannot inject a column of length {} into {:?}",
            a_star.len(),
            native.shape()
        )));
    }
    if special >= l {
        return Err(Error::Index { index: special, width: l });
    }
    let mut out = native.clone();
    for (row, v) in out.data_mut().chunks_mut(l).zip(a_star) {
        row[special] = *v;
    }
    Ok(out)
}

/// `Warp(v_prev, flow) * M + v_native * (1 - M)`, row-wise over `[n, d]`.
pub fn propagate_texture(v_prev: &Tensor, v_native: &Tensor, flow: &MatchingFlow, mask: &SoftMask) -> Result<Tensor> {
    let warped = warp(v_prev, flow)?;
    if warped.len() != v_native.len() || mask.values.len() * v_native.last_dim() != v_native.len() {
        return Err(Error::Shape(format!(
            "texture blend of {:?} into {:?} under a {:?} mask",
            v_prev.shape(),
            v_native.shape(),
            mask.values.shape()
        )));
    }
    let d = v_native.last_dim();
    let mut out = v_native.clone();
    for ((row, src), &m) in out
        .data_mut()
        .chunks_mut(d)
        .zip(warped.data().chunks(d))
        .zip(mask.values.data())
    {
        if m == 0.0 {
            continue;
        }
        for (o, s) in row.iter_mut().zip(src) {
            *o = s * m + *o * (1.0 - m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StpmOptions {
    pub frames: usize,
    pub spm: bool,
    pub tpm: bool,
    /// Blocks that receive injections.
    pub scope: Vec<LayerId>,
    pub stochastic: bool,
}

impl StpmOptions {
    /// Both modules on, injecting into every middle and decoder block.
    pub fn new(frames: usize, config: &ModelConfig) -> Self {
        Self {
            frames,
            spm: true,
            tpm: true,
            scope: default_scope(config),
            stochastic: false,
        }
    }

    pub fn with_modules(mut self, spm: bool, tpm: bool) -> Self {
        self.spm = spm;
        self.tpm = tpm;
        self
    }

    pub fn injects(&self) -> bool {
        self.spm || self.tpm
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frame count must be positive".to_string()));
        }
        let layers = config.layers();
        match self.scope.iter().find(|l| !layers.contains(l)) {
            Some(l) => Err(Error::UnknownLayer(l.to_string())),
            None => Ok(()),
        }
    }
}

pub fn default_scope(config: &ModelConfig) -> Vec<LayerId> {
    config.layers().into_iter().filter(|l| l.level != Level::Enc).collect()
}

/// What happened at one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub t: usize,
    pub injected: bool,
    pub structure_layers: usize,
    pub texture_layers: usize,
    /// Mean soft-mask value over every texture blend of the step.
    pub mean_mask: f64,
    /// Mean displacement length of the feature-resolution flows.
    pub mean_flow: f64,
}

/// Reference-stream attention for one layer at the current step.
struct ReferenceLayer {
    column: Vec<f64>,
    values: Tensor,
}

/// Attention control applied to the video stream at one step.
pub struct StpmControl<'a> {
    options: &'a StpmOptions,
    config: ModelConfig,
    special: usize,
    reference: BTreeMap<LayerId, ReferenceLayer>,
    chains: BTreeMap<(usize, usize), FlowChain>,
    /// Subject column realized by the latest cross-attention module of each
    /// level, per frame.
    last_cross: BTreeMap<Level, Vec<Vec<f64>>>,
    structure_layers: usize,
    texture_layers: usize,
    mask_sum: f64,
    mask_count: usize,
}

impl<'a> StpmControl<'a> {
    pub fn new(
        options: &'a StpmOptions,
        config: ModelConfig,
        special: usize,
        reference_records: &[AttentionRecord],
        chains: BTreeMap<(usize, usize), FlowChain>,
    ) -> Result<Self> {
        let mut reference = BTreeMap::new();
        for &layer in &options.scope {
            let r = reference_records
                .iter()
                .find(|r| r.layer == layer && r.frame == 0)
                .ok_or_else(|| Error::MissingCapture(layer.to_string()))?;
            reference.insert(
                layer,
                ReferenceLayer {
                    column: r.cross_column(special)?,
                    values: r.self_values.clone(),
                },
            );
            if !chains.contains_key(&config.level_size(layer.level)) {
                return Err(Error::FlowChain(format!("no flows at the resolution of {layer}")));
            }
        }
        Ok(Self {
            options,
            config,
            special,
            reference,
            chains,
            last_cross: BTreeMap::new(),
            structure_layers: 0,
            texture_layers: 0,
            mask_sum: 0.0,
            mask_count: 0,
        })
    }

    fn chain(&self, layer: LayerId) -> &FlowChain {
        &self.chains[&self.config.level_size(layer.level)]
    }
}

impl AttentionControl for StpmControl<'_> {
    fn self_values(&mut self, layer: LayerId, values: &mut Tensor) -> Result<bool> {
        // The first block of a level has no preceding cross map at its resolution.
        if !self.options.tpm || layer.block == 0 || !self.reference.contains_key(&layer) {
            return Ok(false);
        }
        let Some(columns) = self.last_cross.get(&layer.level) else {
            return Ok(false);
        };
        let (h, w) = self.config.level_size(layer.level);
        let (j, n, d) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        let chain = &self.chains[&(h, w)];
        if chain.frames() != j {
            return Err(Error::FlowChain(format!("{} flows for {j} frames", chain.frames())));
        }
        let mut prev = self.reference[&layer].values.clone();
        let mut out = Vec::with_capacity(j * n * d);
        for (f, column) in columns.iter().enumerate().take(j) {
            let mask = soft_mask(column, h, w)?;
            self.mask_sum += mask.values.sum();
            self.mask_count += mask.values.len();
            let native = Tensor::new(&[n, d], values.outer(f).to_vec());
            let blended = propagate_texture(&prev, &native, chain.into_frame(f), &mask)?;
            out.extend_from_slice(blended.data());
            prev = blended;
        }
        values.data_mut().copy_from_slice(&out);
        self.texture_layers += 1;
        Ok(true)
    }

    fn cross_logits(&mut self, layer: LayerId, logits: &mut Tensor) -> Result<bool> {
        let (j, n, l) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let mut changed = false;
        if self.options.spm {
            if let Some(r) = self.reference.get(&layer) {
                let chain = self.chain(layer);
                if chain.frames() != j {
                    return Err(Error::FlowChain(format!("{} flows for {j} frames", chain.frames())));
                }
                let stars = propagate_structure(&r.column, chain)?;
                for (f, star) in stars.iter().enumerate() {
                    let native = Tensor::new(&[n, l], logits.outer(f).to_vec());
                    let injected = inject_structure(&native, star, self.special)?;
                    logits.outer_mut(f).copy_from_slice(injected.data());
                }
                self.structure_layers += 1;
                changed = true;
            }
        }
        let columns = (0..j)
            .map(|f| logits.outer(f).chunks(l).map(|row| row[self.special]).collect())
            .collect();
        self.last_cross.insert(layer.level, columns);
        Ok(changed)
    }
}

pub struct StpmOutput {
    pub video: LatentVideo,
    pub reference: LatentVideo,
    pub logs: Vec<StepLog>,
    /// Video-stream records of the final step (`t = 1`).
    pub video_records: Vec<AttentionRecord>,
    /// Reference-stream records of the final step.
    pub reference_records: Vec<AttentionRecord>,
}

fn features_of(records: &[AttentionRecord], frames: usize, layer: LayerId) -> Result<Vec<Tensor>> {
    (0..frames)
        .map(|f| {
            records
                .iter()
                .find(|r| r.layer == layer && r.frame == f)
                .and_then(|r| r.decoder_features.clone())
                .ok_or_else(|| Error::MissingCapture(format!("decoder features of frame {f}")))
        })
        .collect()
}

fn mean_flow(flows: &FlowChain) -> f64 {
    let all: Vec<&MatchingFlow> = core::iter::once(&flows.from_reference).chain(&flows.between).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for flow in all {
        for [dy, dx] in &flow.displacement {
            sum += libm::sqrt((dy * dy + dx * dx) as f64);
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

/// Initial video noise `[J, C, h, w]` for a seed.
pub fn initial_noise(config: &ModelConfig, frames: usize, seed: u64) -> Tensor {
    Rng::new(seed, streams::VIDEO_NOISE).normal_tensor(&[frames, config.latent_channels, config.height, config.width])
}

/// Plain video sampling from `T` down to 0. Returns the final latents and the
/// attention records of the last step.
pub fn sample_plain(
    prompt: &PromptEncoding,
    weights: &ModelWeights,
    sched: &NoiseSchedule,
    seed: u64,
    frames: usize,
    stochastic: bool,
) -> Result<(LatentVideo, Vec<AttentionRecord>)> {
    let cfg = weights.config;
    let mut rng = Rng::new(seed, streams::VIDEO_NOISE);
    let shape = [frames, cfg.latent_channels, cfg.height, cfg.width];
    let mut z = LatentVideo::new(rng.normal_tensor(&shape), sched.steps())?;
    let mut last = Vec::new();
    for t in (1..=sched.steps()).rev() {
        let (eps, records) = predict_noise(&z, prompt, t, weights, None, t == 1)?;
        let fresh = stochastic.then(|| rng.normal_tensor(&shape));
        z = reverse_step(&z, &eps, t, fresh.as_ref(), sched, stochastic)?;
        last = records;
    }
    Ok((z, last))
}

/// Joint reference + video sampling with structure/texture propagation.
pub fn sample_with_stpm(
    prompt: &PromptEncoding,
    weights: &ModelWeights,
    sched: &NoiseSchedule,
    seed: u64,
    options: &StpmOptions,
) -> Result<StpmOutput> {
    let cfg = weights.config;
    options.validate(&cfg)?;
    let special = match prompt.special_index() {
        Some(i) => i,
        None if !options.injects() => 0,
        None => return Err(Error::Prompt("propagation needs the subject token in the prompt".to_string())),
    };
    let j = options.frames;
    let shape = [j, cfg.latent_channels, cfg.height, cfg.width];
    let ref_shape = [1, cfg.latent_channels, cfg.height, cfg.width];
    let mut video_rng = Rng::new(seed, streams::VIDEO_NOISE);
    let mut ref_rng = Rng::new(seed, streams::REFERENCE_NOISE);
    let mut z = LatentVideo::new(video_rng.normal_tensor(&shape), sched.steps())?;
    let mut z_ref = LatentVideo::new(ref_rng.normal_tensor(&ref_shape), sched.steps())?;

    let feature_layer = cfg.feature_layer();
    let mut sizes: Vec<(usize, usize)> = options.scope.iter().map(|l| cfg.level_size(l.level)).collect();
    sizes.sort_unstable();
    sizes.dedup();

    let mut logs = Vec::with_capacity(sched.steps());
    // Decoder features of the previous (t + 1) step: reference, then frames.
    let mut previous: Option<(Tensor, Vec<Tensor>)> = None;
    let mut video_records = Vec::new();
    let mut reference_records = Vec::new();
    for t in (1..=sched.steps()).rev() {
        let (eps_ref, rec_ref) = image_mode_predict(&z_ref, prompt, t, weights, true)?;
        let mut log = StepLog {
            t,
            injected: false,
            structure_layers: 0,
            texture_layers: 0,
            mean_mask: 0.0,
            mean_flow: 0.0,
        };
        let (eps, rec_vid) = match (&previous, options.injects()) {
            (Some((psi_ref, psi_frames)), true) => {
                let mut chains = BTreeMap::new();
                for &size in &sizes {
                    chains.insert(size, FlowChain::from_features(psi_ref, psi_frames, size, t + 1)?);
                }
                let (fh, fw) = cfg.level_size(feature_layer.level);
                log.mean_flow = match chains.get(&(fh, fw)) {
                    Some(c) => mean_flow(c),
                    None => mean_flow(&FlowChain::from_features(psi_ref, psi_frames, (fh, fw), t + 1)?),
                };
                let mut control = StpmControl::new(options, cfg, special, &rec_ref, chains)?;
                let out = predict_noise(&z, prompt, t, weights, Some(&mut control), true)?;
                log.injected = true;
                log.structure_layers = control.structure_layers;
                log.texture_layers = control.texture_layers;
                log.mean_mask = control.mask_sum / control.mask_count.max(1) as f64;
                out
            }
            _ => predict_noise(&z, prompt, t, weights, None, true)?,
        };
        previous = Some((
            features_of(&rec_ref, 1, feature_layer)?.remove(0),
            features_of(&rec_vid, j, feature_layer)?,
        ));
        let fresh_ref = options.stochastic.then(|| ref_rng.normal_tensor(&ref_shape));
        let fresh = options.stochastic.then(|| video_rng.normal_tensor(&shape));
        z_ref = reverse_step(&z_ref, &eps_ref, t, fresh_ref.as_ref(), sched, options.stochastic)?;
        z = reverse_step(&z, &eps, t, fresh.as_ref(), sched, options.stochastic)?;
        logs.push(log);
        video_records = rec_vid;
        reference_records = rec_ref;
    }
    Ok(StpmOutput {
        video: z,
        reference: z_ref,
        logs,
        video_records,
        reference_records,
    })
}

/// Subject soft mask of each frame from the feature layer's records.
pub fn final_soft_masks(records: &[AttentionRecord], config: &ModelConfig, special: usize, frames: usize) -> Result<Vec<SoftMask>> {
    let layer = config.feature_layer();
    let (h, w) = config.level_size(layer.level);
    (0..frames)
        .map(|f| {
            let r = records
                .iter()
                .find(|r| r.layer == layer && r.frame == f)
                .ok_or_else(|| Error::MissingCapture(format!("{layer} frame {f}")))?;
            let mut m = soft_mask(&r.cross_column(special)?, h, w)?;
            m.layer = Some(layer);
            m.frame = Some(f);
            Ok(m)
        })
        .collect()
}
