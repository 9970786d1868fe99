//! The stages of the pipeline on top of the core crate, with file output.

use std::fs;
use std::path::Path;
use std::time::Instant;

use subjvid_core::codec;
use subjvid_core::correspondence;
use subjvid_core::customize::{self, LossLog, ReferenceSet, TrainConfig};
use subjvid_core::diffusion::{LatentVideo, NoiseSchedule};
use subjvid_core::encoder::{self, ProxyEncoder};
use subjvid_core::metrics::{self, EvalResult, Expectation, MotionClassifier};
use subjvid_core::model::{ModelConfig, ModelWeights, PromptEncoding};
use subjvid_core::pretrain;
use subjvid_core::stpm::{self, FlowChain, StepLog, StpmOptions, StpmOutput};
use subjvid_core::synth::Motion;
use subjvid_core::ttro::{self, Clock, MaskSource, RewardReport, RewardTargets, SubjectMask, TtroConfig, TtroContext};
use subjvid_core::Tensor;

use crate::archive::{Archive, Kind};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::images;

pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const ENCODER_CHECKPOINT: &str = "encoder.ckpt";
/// Held-out noise draws used to score customization.
pub const HELDOUT_DRAWS: usize = 16;

pub fn image_size() -> (usize, usize) {
    (codec::IMAGE_SIZE, codec::IMAGE_SIZE)
}

/// Wall clock for TTRO reports.
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn seconds(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Fixed-precision float for CSV output; equal values give equal bytes.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// `step,loss` rows.
pub fn loss_csv(loss: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in loss.iter().enumerate() {
        s += &format!("{i},{}\n", fmt_f(*l));
    }
    s
}

/// Base model and proxy encoder for a corpus.
pub struct Assets {
    pub base: ModelWeights,
    pub encoder: ProxyEncoder,
}

impl Assets {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let base_path = data_dir.join(BASE_CHECKPOINT);
        let enc_path = data_dir.join(ENCODER_CHECKPOINT);
        for p in [&base_path, &enc_path] {
            if !p.exists() {
                return Err(HarnessError::Format(format!(
                    "{} is missing; run gen-data without --skip-models first",
                    p.display()
                )));
            }
        }
        Ok(Self {
            base: crate::archive::load_model(&base_path)?,
            encoder: crate::archive::load_encoder(&enc_path)?,
        })
    }
}

/// Pretrains the base denoiser and trains the proxy encoder, writing both
/// checkpoints and their loss curves under `data_dir`.
pub fn train_assets(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Assets> {
    let model_cfg = ModelConfig::default();
    let sched = model_cfg.schedule()?;
    let (base, pre_loss) = pretrain::pretrain(model_cfg, &cfg.pretrain.to_core(), &sched)?;
    crate::archive::save_model(&base, &data_dir.join(BASE_CHECKPOINT))?;
    write_text(&data_dir.join("logs/pretrain_loss.csv"), &loss_csv(&pre_loss))?;
    let (encoder, enc_loss) = encoder::train_encoder(&cfg.encoder.to_core());
    crate::archive::save_encoder(&encoder, &data_dir.join(ENCODER_CHECKPOINT))?;
    write_text(&data_dir.join("logs/encoder_loss.csv"), &loss_csv(&enc_loss))?;
    Ok(Assets { base, encoder })
}

#[derive(Debug, Clone)]
pub struct Customized {
    pub weights: ModelWeights,
    pub token_loss: LossLog,
    pub weight_loss: LossLog,
    /// Held-out denoising loss before customization, after the token stage
    /// and after fine-tuning.
    pub heldout: [f64; 3],
}

impl Customized {
    /// `phase,step,loss` rows; held-out losses use step 0.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,step,loss\n");
        for (i, l) in self.token_loss.iter().enumerate() {
            s += &format!("token,{i},{}\n", fmt_f(*l));
        }
        for (i, l) in self.weight_loss.iter().enumerate() {
            s += &format!("weights,{i},{}\n", fmt_f(*l));
        }
        for (name, l) in ["heldout_before", "heldout_token", "heldout_after"].iter().zip(self.heldout) {
            s += &format!("{name},0,{}\n", fmt_f(l));
        }
        s
    }
}

/// Textual inversion followed by weight fine-tuning.
pub fn customize(base: &ModelWeights, refs: &ReferenceSet, cfg: &TrainConfig) -> Result<Customized> {
    let sched = base.config.schedule()?;
    let mut w = base.clone();
    customize::init_special_token(&mut w);
    let before = customize::heldout_loss(refs, &w, &sched, cfg, HELDOUT_DRAWS)?;
    let (w, token_loss) = customize::train_token(refs, &w, cfg, &sched)?;
    let mid = customize::heldout_loss(refs, &w, &sched, cfg, HELDOUT_DRAWS)?;
    let (w, weight_loss) = customize::finetune_weights(refs, &w, cfg, &sched)?;
    let after = customize::heldout_loss(refs, &w, &sched, cfg, HELDOUT_DRAWS)?;
    Ok(Customized {
        weights: w,
        token_loss,
        weight_loss,
        heldout: [before, mid, after],
    })
}

pub fn parse_prompt(text: &str, config: &ModelConfig) -> Result<PromptEncoding> {
    PromptEncoding::parse(text, config.max_prompt).map_err(|e| HarnessError::Config(format!("prompt {text:?}: {e}")))
}

pub fn prompt_text(prompt: &PromptEncoding) -> String {
    prompt.words().join(" ")
}

/// The motion word of a prompt, if any.
pub fn prompt_motion(prompt: &PromptEncoding) -> Option<Motion> {
    prompt.words().iter().find_map(|w| Motion::from_word(w))
}

pub fn sample(weights: &ModelWeights, prompt: &PromptEncoding, seed: u64, options: &StpmOptions) -> Result<StpmOutput> {
    let sched = weights.config.schedule()?;
    Ok(stpm::sample_with_stpm(prompt, weights, &sched, seed, options)?)
}

/// Latents plus what is needed to interpret them later.
pub fn latents_archive(out: &StpmOutput, prompt: &PromptEncoding, seed: u64, options: &StpmOptions) -> Archive {
    let mut a = Archive::new()
        .with_meta("kind", "latents")
        .with_meta("prompt", prompt_text(prompt))
        .with_meta("seed", seed)
        .with_meta("t", out.video.t())
        .with_meta("spm", options.spm)
        .with_meta("tpm", options.tpm);
    a.insert("video", out.video.tensor().clone());
    a.insert("reference", out.reference.tensor().clone());
    a
}

pub struct LoadedLatents {
    pub archive: Archive,
    pub video: LatentVideo,
    pub reference: Option<LatentVideo>,
    pub prompt_text: String,
}

pub fn load_latents(path: &Path) -> Result<LoadedLatents> {
    let archive = Archive::load(path, Kind::Archive)?;
    let t: usize = archive
        .meta_value("t")?
        .parse()
        .map_err(|_| HarnessError::Format(format!("{}: bad noise level", path.display())))?;
    let video = LatentVideo::new(archive.tensor("video")?.clone(), t)?;
    let reference = match archive.tensors.get("reference") {
        Some(r) => Some(LatentVideo::new(r.clone(), t)?),
        None => None,
    };
    let prompt_text = archive.meta_value("prompt")?.to_string();
    Ok(LoadedLatents {
        archive,
        video,
        reference,
        prompt_text,
    })
}

pub fn step_log_csv(logs: &[StepLog]) -> String {
    let mut s = String::from("t,injected,structure_layers,texture_layers,mean_mask,mean_flow\n");
    for l in logs {
        s += &format!(
            "{},{},{},{},{},{}\n",
            l.t,
            u8::from(l.injected),
            l.structure_layers,
            l.texture_layers,
            fmt_f(l.mean_mask),
            fmt_f(l.mean_flow)
        );
    }
    s
}

/// Writes decoded frames, the latent archive and the step log of one
/// generation into `run_dir`.
pub fn write_generation(run_dir: &Path, tag: &str, out: &StpmOutput, latents: &Archive) -> Result<()> {
    images::write_frames(&run_dir.join("frames").join(tag), &codec::decode_stack(out.video.tensor()))?;
    let reference = codec::decode_stack(out.reference.tensor());
    images::write_rgb(
        &run_dir.join("frames").join(tag).join("reference.png"),
        &Tensor::new(&reference.shape()[1..], reference.data().to_vec()),
    )?;
    latents.save(&run_dir.join("latents").join(format!("{tag}.svta")), Kind::Archive)?;
    write_text(&run_dir.join("logs").join(format!("{tag}_steps.csv")), &step_log_csv(&out.logs))
}

/// Final-step attention of both streams and the matching flows between them.
///
/// Tensor names: `video/<layer>/f<frame>/{cross,values}`,
/// `reference/<layer>/{cross,values}`, `features/reference`,
/// `features/f<frame>`, `flow/from_reference`, `flow/between/f<frame>`
/// (rows of `[dy, dx]`) and `cost/reference_to_f00`.
pub fn attention_archive(out: &StpmOutput, config: &ModelConfig) -> Result<Archive> {
    let mut a = Archive::new().with_meta("kind", "attention").with_meta("t", 1);
    for r in &out.video_records {
        a.insert(&format!("video/{}/f{:02}/cross", r.layer, r.frame), r.cross_map.clone());
        a.insert(&format!("video/{}/f{:02}/values", r.layer, r.frame), r.self_values.clone());
        if let Some(f) = &r.decoder_features {
            a.insert(&format!("features/f{:02}", r.frame), f.clone());
        }
    }
    for r in &out.reference_records {
        a.insert(&format!("reference/{}/cross", r.layer), r.cross_map.clone());
        a.insert(&format!("reference/{}/values", r.layer), r.self_values.clone());
        if let Some(f) = &r.decoder_features {
            a.insert("features/reference", f.clone());
        }
    }
    let frames: Vec<Tensor> = (0..out.video.j_count())
        .map(|f| a.tensor(&format!("features/f{f:02}")).cloned())
        .collect::<Result<_>>()?;
    let reference = a.tensor("features/reference")?.clone();
    let size = config.level_size(config.feature_layer().level);
    let chain = FlowChain::from_features(&reference, &frames, size, 1)?;
    a.insert("flow/from_reference", flow_tensor(&chain.from_reference.displacement));
    for (f, flow) in chain.between.iter().enumerate() {
        a.insert(&format!("flow/between/f{:02}", f + 1), flow_tensor(&flow.displacement));
    }
    let r = correspondence::resample_features(&reference, size.0, size.1)?;
    let f0 = correspondence::resample_features(&frames[0], size.0, size.1)?;
    let cost = correspondence::cost_volume(&r, &f0, 1)?;
    a.insert("cost/reference_to_f00", cost.values);
    Ok(a)
}

fn flow_tensor(d: &[[i32; 2]]) -> Tensor {
    Tensor::new(&[d.len(), 2], d.iter().flat_map(|[y, x]| [f64::from(*y), f64::from(*x)]).collect())
}

/// Neutral segmentation of the subject in clean latents.
pub fn segment(weights: &ModelWeights, prompt: &PromptEncoding, latents: &LatentVideo) -> Result<SubjectMask> {
    Ok(ttro::segment(weights, prompt, latents, image_size())?)
}

/// Scores clean latents against a subject's reference images.
pub struct Evaluator {
    pub encoder: ProxyEncoder,
    pub motions: MotionClassifier,
}

impl Evaluator {
    pub fn new(encoder: ProxyEncoder) -> Self {
        Self {
            encoder,
            motions: MotionClassifier::fit(),
        }
    }

    pub fn reference_embeddings(&self, refs: &ReferenceSet) -> Tensor {
        ttro::reference_embeddings(&self.encoder, &refs.images, &refs.masks)
    }

    pub fn evaluate(
        &self,
        weights: &ModelWeights,
        prompt: &PromptEncoding,
        latents: &LatentVideo,
        reference_embeddings: &Tensor,
        expected: Expectation,
    ) -> Result<EvalResult> {
        let masks = segment(weights, prompt, latents)?;
        let frames = codec::decode_stack(latents.tensor());
        Ok(metrics::evaluate(&frames, &masks, reference_embeddings, &self.encoder, expected, &self.motions))
    }
}

pub const EVAL_HEADER: &str = "proxy_t,proxy_i,smoothness,counted_frames";

pub fn eval_fields(r: &EvalResult) -> String {
    format!(
        "{},{},{},{}",
        fmt_f(r.proxy_t),
        fmt_f(r.proxy_i),
        fmt_f(r.smoothness),
        r.counted_frames
    )
}

/// Reward targets from a generated reference image and the real references.
pub fn reward_targets(
    weights: &ModelWeights,
    prompt: &PromptEncoding,
    reference: &LatentVideo,
    reference_embeddings: Tensor,
) -> Result<RewardTargets> {
    let mask = segment(weights, prompt, reference)?;
    let s = reference.tensor().shape();
    let ls = mask.latent.shape();
    Ok(RewardTargets {
        reference_latent: Tensor::new(&s[1..], reference.tensor().data().to_vec()),
        reference_mask: Tensor::new(&ls[1..], mask.latent.data().to_vec()),
        reference_embeddings,
    })
}

/// Initial TTRO masks: neutral segmentation, or supplied `[J, H, W]` truth.
pub fn initial_masks(
    weights: &ModelWeights,
    prompt: &PromptEncoding,
    latents: &LatentVideo,
    source: MaskSource,
    truth: Option<&Tensor>,
) -> Result<SubjectMask> {
    match source {
        MaskSource::Attention => segment(weights, prompt, latents),
        MaskSource::GroundTruth => {
            let t = truth.ok_or_else(|| {
                HarnessError::Config("ground-truth masks requested but the latents carry no masks tensor".to_string())
            })?;
            if t.shape().first() != Some(&latents.j_count()) {
                return Err(HarnessError::Format(format!(
                    "masks {:?} do not match {} frames",
                    t.shape(),
                    latents.j_count()
                )));
            }
            Ok(SubjectMask::from_pixels(t.clone(), MaskSource::GroundTruth)?)
        }
    }
}

pub struct TtroRun {
    pub latents: LatentVideo,
    pub reports: Vec<RewardReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_ttro(
    weights: &ModelWeights,
    encoder: &ProxyEncoder,
    prompt: &PromptEncoding,
    targets: &RewardTargets,
    latents: &LatentVideo,
    masks: SubjectMask,
    cfg: &TtroConfig,
    clock: &mut dyn Clock,
) -> Result<TtroRun> {
    let sched: NoiseSchedule = weights.config.schedule()?;
    let ctx = TtroContext {
        weights,
        encoder,
        sched: &sched,
        prompt,
        targets,
    };
    let (z, reports) = ttro::ttro_loop(&ctx, latents, masks, cfg, clock)?;
    Ok(TtroRun { latents: z, reports })
}

pub fn reward_csv(reports: &[RewardReport]) -> String {
    let mut s = String::from("iteration,r_lat,r_pixel,total,grad_norm,counted_frames,wall_seconds\n");
    for r in reports {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            fmt_f(r.r_lat),
            fmt_f(r.r_pixel),
            fmt_f(r.total()),
            fmt_f(r.grad_norm),
            r.frame_similarity.iter().flatten().count(),
            fmt_f(r.wall_seconds)
        );
    }
    s
}
