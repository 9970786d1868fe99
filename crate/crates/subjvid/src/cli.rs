//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use subjvid_core::stpm::StpmOptions;
use subjvid_core::ttro::MaskSource;

use crate::ablation;
use crate::archive::{self, Kind};
use crate::config::{ExperimentConfig, MaskName};
use crate::dataset;
use crate::error::{HarnessError, Result};
use crate::images;
use crate::pipeline::{self, Assets, Evaluator, WallClock, BASE_CHECKPOINT, ENCODER_CHECKPOINT};
use crate::timing::{self, TimingReport, UnitTimer};

#[derive(Debug, Parser)]
#[command(name = "subjvid", version, about = "Toy customized text-to-video pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Attn,
    Gt,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the subject corpus and train the base model and proxy encoder.
    GenData(GenDataArgs),
    /// Customize the base model on one subject directory.
    Customize(CustomizeArgs),
    /// Sample a video with optional structure and texture propagation.
    Generate(GenerateArgs),
    /// Refine generated latents with test-time reward optimization.
    Ttro(TtroArgs),
    /// Score a latent archive against a subject's references.
    Eval(EvalArgs),
    /// Run the ablation benchmark.
    Ablate(AblateArgs),
    /// Summarize a run's stage timing log.
    Timing(TimingArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Only render the corpus; skip the base model and encoder.
    #[arg(long)]
    pub skip_models: bool,
}

#[derive(Debug, Args)]
pub struct CustomizeArgs {
    #[arg(long)]
    pub subject: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base checkpoint; defaults to base.ckpt next to the subject directory.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub spm: Switch,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub tpm: Switch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write final-step attention maps, features and flows here.
    #[arg(long)]
    pub dump_attn: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to runs/<config name>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TtroArgs {
    /// Latent archive written by generate.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Subject directory with the reference images.
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub mask: Option<MaskArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Proxy encoder; defaults to encoder.ckpt next to the subject directory.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to the one holding the input archive.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Output CSV; defaults to metrics.csv in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    #[arg(long)]
    pub run: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn sibling(dir: &Path, name: &str) -> PathBuf {
    dir.parent().unwrap_or(Path::new(".")).join(name)
}

/// Run directory of an archive at `<run>/latents/<file>`.
fn run_dir_of(latents: &Path) -> PathBuf {
    latents
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Customize(a) => customize(a),
        Command::Generate(a) => generate(a),
        Command::Ttro(a) => ttro(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Timing(a) => timing_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut timer = UnitTimer::start("gen_data", 0);
    let m = dataset::gen_dataset(cfg.data.n_subjects, cfg.data.seed, &a.out)?;
    timer.lap("render");
    println!("wrote {} subjects to {}", m.subjects.len(), a.out.display());
    if !a.skip_models {
        pipeline::train_assets(&cfg, &a.out)?;
        timer.lap("train");
        println!("wrote {} and {}", BASE_CHECKPOINT, ENCODER_CHECKPOINT);
    }
    pipeline::write_text(&a.out.join("logs/timing.csv"), &timing::to_csv(&timer.finish()))
}

fn customize(a: CustomizeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let base_path = a.base.unwrap_or_else(|| sibling(&a.subject, BASE_CHECKPOINT));
    let base = archive::load_model(&base_path)?;
    let subject = dataset::load_subject(&a.subject)?;
    let c = pipeline::customize(&base, &subject.refs, &cfg.customize.to_core())?;
    archive::save_model(&c.weights, &a.out)?;
    let loss_path = a.out.with_extension("loss.csv");
    pipeline::write_text(&loss_path, &c.to_csv())?;
    println!(
        "held-out loss {:.4} -> {:.4} -> {:.4}; wrote {} and {}",
        c.heldout[0],
        c.heldout[1],
        c.heldout[2],
        a.out.display(),
        loss_path.display()
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    if a.frames == 0 {
        return Err(HarnessError::Config("--frames must be positive".to_string()));
    }
    let run_dir = a.out.unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    let mut timer = UnitTimer::start("generate", a.frames);
    let weights = archive::load_model(&a.ckpt)?;
    let prompt = pipeline::parse_prompt(&a.prompt, &weights.config)?;
    let mut options = StpmOptions::new(a.frames, &weights.config).with_modules(a.spm.on(), a.tpm.on());
    options.scope = cfg.sampling.scope.layers(&weights.config);
    options.stochastic = cfg.sampling.stochastic;
    timer.lap("load");
    let out = pipeline::sample(&weights, &prompt, a.seed, &options)?;
    timer.lap("sample");
    let latents = pipeline::latents_archive(&out, &prompt, a.seed, &options);
    pipeline::write_generation(&run_dir, "video", &out, &latents)?;
    if let Some(dir) = &a.dump_attn {
        pipeline::attention_archive(&out, &weights.config)?.save(&dir.join("attention.svta"), Kind::Archive)?;
    }
    timer.lap("write");
    pipeline::write_text(&run_dir.join("logs/timing.csv"), &timing::to_csv(&timer.finish()))?;
    println!("wrote {}", run_dir.display());
    Ok(())
}

fn ttro(a: TtroArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut section = cfg.ttro.clone();
    if let Some(i) = a.iters {
        section.iters = i;
    }
    if let Some(l) = a.lambda {
        if !(l > 0.0) {
            return Err(HarnessError::Config("--lambda must be positive".to_string()));
        }
        section.lambda = l;
    }
    if let Some(m) = a.mask {
        section.mask = match m {
            MaskArg::Attn => MaskName::Attn,
            MaskArg::Gt => MaskName::Gt,
        };
    }
    let run_dir = a.out.unwrap_or_else(|| run_dir_of(&a.input));
    let mut timer = UnitTimer::start("ttro", 0);
    let weights = archive::load_model(&a.ckpt)?;
    let encoder = archive::load_encoder(&a.encoder.unwrap_or_else(|| sibling(&a.refs, ENCODER_CHECKPOINT)))?;
    let subject = dataset::load_subject(&a.refs)?;
    let loaded = pipeline::load_latents(&a.input)?;
    let prompt = pipeline::parse_prompt(&loaded.prompt_text, &weights.config)?;
    let seed = match a.seed {
        Some(s) => s,
        None => loaded.archive.meta_value("seed")?.parse().unwrap_or(0),
    };
    let reference = loaded
        .reference
        .as_ref()
        .ok_or_else(|| HarnessError::Format(format!("{} has no reference latents", a.input.display())))?;
    let ref_emb = pipeline::Evaluator::new(encoder.clone()).reference_embeddings(&subject.refs);
    let targets = pipeline::reward_targets(&weights, &prompt, reference, ref_emb)?;
    let source = section.mask.to_core();
    let truth = loaded.archive.tensors.get("masks");
    let masks = pipeline::initial_masks(&weights, &prompt, &loaded.video, source, truth)?;
    timer.lap("load");
    let res = pipeline::run_ttro(
        &weights,
        &encoder,
        &prompt,
        &targets,
        &loaded.video,
        masks,
        &section.to_core(seed),
        &mut WallClock::start(),
    )?;
    timer.lap("ttro");
    let mut out = loaded.archive.clone().with_meta("ttro_iters", section.iters).with_meta("ttro_lambda", section.lambda);
    out.meta.insert("ttro_mask".into(), if source == MaskSource::Attention { "attn" } else { "gt" }.into());
    out.insert("video", res.latents.tensor().clone());
    out.save(&run_dir.join("latents/ttro.svta"), Kind::Archive)?;
    images::write_frames(&run_dir.join("frames/ttro"), &subjvid_core::codec::decode_stack(res.latents.tensor()))?;
    pipeline::write_text(&run_dir.join("logs/ttro_rewards.csv"), &pipeline::reward_csv(&res.reports))?;
    timer.lap("write");
    pipeline::write_text(&run_dir.join("logs/ttro_timing.csv"), &timing::to_csv(&timer.finish()))?;
    for r in &res.reports {
        println!("iteration {}: r_lat {:.4} r_pixel {:.4}", r.iteration, r.r_lat, r.r_pixel);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let weights = archive::load_model(&a.ckpt)?;
    let encoder = archive::load_encoder(&a.encoder.unwrap_or_else(|| sibling(&a.refs, ENCODER_CHECKPOINT)))?;
    let subject = dataset::load_subject(&a.refs)?;
    let loaded = pipeline::load_latents(&a.latents)?;
    if loaded.video.t() != 0 {
        return Err(HarnessError::Format(format!("{} holds noisy latents", a.latents.display())));
    }
    let prompt = pipeline::parse_prompt(&loaded.prompt_text, &weights.config)?;
    let motion = pipeline::prompt_motion(&prompt)
        .ok_or_else(|| HarnessError::Config(format!("prompt {:?} names no motion", loaded.prompt_text)))?;
    let evaluator = Evaluator::new(encoder);
    let expected = subjvid_core::metrics::Expectation {
        color: subject.record.primary,
        motion,
    };
    let r = evaluator.evaluate(&weights, &prompt, &loaded.video, &evaluator.reference_embeddings(&subject.refs), expected)?;
    let out = a.out.unwrap_or_else(|| run_dir_of(&a.latents).join("metrics.csv"));
    let csv = format!(
        "latents,prompt,{}\n{},{},{}\n",
        pipeline::EVAL_HEADER,
        a.latents.display(),
        loaded.prompt_text,
        pipeline::eval_fields(&r)
    );
    pipeline::write_text(&out, &csv)?;
    println!(
        "proxy-T {:.4} proxy-I {:.4} smoothness {:.4} ({} frames counted)",
        r.proxy_t, r.proxy_i, r.smoothness, r.counted_frames
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let run_dir = a.runs.join(&cfg.name);
    let assets = Assets::load(&a.data)?;
    let save = cfg.ablation.save_frames.then_some(run_dir.as_path());
    let out = ablation::run_ablation(&cfg, &a.data, &assets, save)?;
    ablation::write_outputs(&run_dir, &cfg, &out)?;
    print!("{}", out.summary_csv());
    print!("{}", out.sign_tests_csv());
    println!("wrote {}", run_dir.display());
    Ok(())
}

fn timing_cmd(a: TimingArgs) -> Result<()> {
    let path = a.run.join("logs/timing.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let report = TimingReport::from_rows(&timing::parse_csv(&text)?);
    pipeline::write_text(&a.run.join("timing.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    if !report.is_empty() && !report.consistent() {
        eprintln!(
            "warning: stages sum to {:.3} s but units took {:.3} s",
            report.stage_sum(),
            report.total
        );
    }
    Ok(())
}
