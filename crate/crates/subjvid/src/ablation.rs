//! Ablation over the propagation modules and reward optimization.
//!
//! Every seed produces one row per variant. Runs are independent and seeded,
//! so the worker count changes wall time only; rows are merged in seed order.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use subjvid_core::codec;
use subjvid_core::customize::ReferenceSet;
use subjvid_core::metrics::{EvalResult, Expectation};
use subjvid_core::model::{ModelWeights, PromptEncoding};
use subjvid_core::stpm::StpmOptions;
use subjvid_core::synth::{self, BenchmarkPrompt};
use subjvid_core::ttro::RewardReport;

use crate::archive::{Archive, Kind};
use crate::config::ExperimentConfig;
use crate::dataset::{self, LoadedSubject};
use crate::error::{HarnessError, Result};
use crate::images;
use crate::pipeline::{self, fmt_f, Assets, Evaluator, WallClock};
use crate::stats::{sign_test, SignTest};
use crate::timing::{self, TimingRow, UnitTimer};

pub const VARIANTS: [&str; 5] = ["baseline", "spm", "tpm", "spm_tpm", "full"];
const BASELINE: usize = 0;
const SPM: usize = 1;
const TPM: usize = 2;
const SPM_TPM: usize = 3;
const FULL: usize = 4;

/// Paired comparisons reported with every ablation, as (better, worse).
pub const COMPARISONS: [(usize, usize); 6] = [
    (SPM, BASELINE),
    (TPM, BASELINE),
    (SPM_TPM, SPM),
    (SPM_TPM, TPM),
    (FULL, SPM_TPM),
    (FULL, BASELINE),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub seed: u64,
    pub subject: usize,
    pub prompt_index: usize,
    pub prompt: String,
    pub variant: usize,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub better: usize,
    pub worse: usize,
    pub test: SignTest,
}

impl Comparison {
    pub fn name(&self) -> String {
        format!("{}>{}", VARIANTS[self.better], VARIANTS[self.worse])
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub fingerprint: String,
    pub rows: Vec<RunRow>,
    pub comparisons: Vec<Comparison>,
    /// Reward reports of every full-pipeline run, by seed.
    pub rewards: Vec<(u64, Vec<RewardReport>)>,
    pub timings: Vec<TimingRow>,
}

impl AblationOutput {
    /// Proxy-I of one variant in seed order.
    pub fn proxy_i(&self, variant: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant).map(|r| r.result.proxy_i).collect()
    }

    pub fn mean(&self, variant: usize, f: impl Fn(&EvalResult) -> f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| f(&r.result)).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("seed,subject,prompt_index,prompt,variant,{},fingerprint\n", pipeline::EVAL_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.seed,
                r.subject,
                r.prompt_index,
                r.prompt,
                VARIANTS[r.variant],
                pipeline::eval_fields(&r.result),
                self.fingerprint
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,runs,proxy_t,proxy_i,smoothness\n");
        for (v, name) in VARIANTS.iter().enumerate() {
            let n = self.rows.iter().filter(|r| r.variant == v).count();
            let _ = writeln!(
                s,
                "{name},{n},{},{},{}",
                fmt_f(self.mean(v, |r| r.proxy_t)),
                fmt_f(self.mean(v, |r| r.proxy_i)),
                fmt_f(self.mean(v, |r| r.smoothness))
            );
        }
        s
    }

    pub fn sign_tests_csv(&self) -> String {
        let mut s = String::from("comparison,wins,losses,ties,p_value,significant\n");
        for c in &self.comparisons {
            let t = &c.test;
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6e},{}",
                c.name(),
                t.wins,
                t.losses,
                t.ties,
                t.p_value,
                u8::from(t.p_value < 0.05)
            );
        }
        s
    }

    /// Bar chart of mean proxy-I per variant.
    pub fn summary_svg(&self) -> String {
        let (w, h, pad) = (420.0, 240.0, 30.0);
        let bar = (w - 2.0 * pad) / VARIANTS.len() as f64;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        let _ = writeln!(s, "<text x=\"{pad}\" y=\"16\">mean proxy-I per variant</text>");
        for (v, name) in VARIANTS.iter().enumerate() {
            let m = self.mean(v, |r| r.proxy_i).clamp(0.0, 1.0);
            let bh = m * (h - 3.0 * pad);
            let x = pad + v as f64 * bar + 4.0;
            let y = h - pad - bh;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#4a78b0\"/>",
                bar - 8.0
            );
            let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\">{m:.3}</text>", y - 3.0);
            let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\">{name}</text>", h - pad + 14.0);
        }
        s + "</svg>\n"
    }
}

/// Subject and prompt of run `seed`.
pub fn run_plan(cfg: &ExperimentConfig, seed: u64) -> (usize, usize) {
    let subjects = cfg.ablation.subjects;
    (seed as usize % subjects, seed as usize / (subjects * cfg.ablation.videos_per_prompt))
}

pub fn benchmark_prompt(
    cfg: &ExperimentConfig,
    subject: &LoadedSubject,
    index: usize,
    max_len: usize,
) -> Result<(PromptEncoding, Expectation)> {
    let bp = BenchmarkPrompt::draw(subject.record.id, index, cfg.data.seed);
    let words = synth::describe_custom(subject.refs.class_word, Some(bp.motion), Some(bp.scene));
    let prompt = PromptEncoding::from_words(&words, max_len)?;
    let expected = Expectation {
        color: subject.record.primary,
        motion: bp.motion,
    };
    Ok((prompt, expected))
}

type SeedOutput = (Vec<RunRow>, Vec<RewardReport>, Vec<TimingRow>);

struct SubjectModel {
    subject: LoadedSubject,
    weights: ModelWeights,
}

/// Runs every seed. With `save_dir`, frames, latents and reward logs of every
/// run are written there as well.
pub fn run_ablation(cfg: &ExperimentConfig, data_dir: &Path, assets: &Assets, save_dir: Option<&Path>) -> Result<AblationOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.ablation.workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, data_dir, assets, save_dir))
}

fn run_in_pool(cfg: &ExperimentConfig, data_dir: &Path, assets: &Assets, save_dir: Option<&Path>) -> Result<AblationOutput> {
    let manifest = dataset::read_manifest(data_dir)?;
    if manifest.subjects.len() < cfg.ablation.subjects {
        return Err(HarnessError::Config(format!(
            "ablation wants {} subjects but the corpus has {}",
            cfg.ablation.subjects,
            manifest.subjects.len()
        )));
    }
    let used = cfg.ablation.subjects.min(cfg.ablation.seeds);
    let train = cfg.customize.to_core();
    let customized: Vec<(SubjectModel, Vec<TimingRow>)> = manifest.subjects[..used]
        .par_iter()
        .map(|rec| {
            let mut timer = UnitTimer::start(format!("customize_{}", rec.dir), 0);
            let subject = dataset::load_subject(&data_dir.join(&rec.dir))?;
            timer.lap("load");
            let c = pipeline::customize(&assets.base, &subject.refs, &train)?;
            timer.lap("customize");
            Ok((
                SubjectModel {
                    subject,
                    weights: c.weights,
                },
                timer.finish(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut timings: Vec<TimingRow> = customized.iter().flat_map(|(_, t)| t.clone()).collect();
    let models: Vec<SubjectModel> = customized.into_iter().map(|(m, _)| m).collect();

    let evaluator = Evaluator::new(assets.encoder.clone());
    let per_seed: Vec<SeedOutput> = (0..cfg.ablation.seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let (subject, index) = run_plan(cfg, seed);
            let m = &models[subject];
            let out = run_seed(cfg, save_dir, m, &evaluator, seed, index);
            if let Ok((rows, _, _)) = &out {
                let pi: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.result.proxy_i)).collect();
                eprintln!("seed {seed} subject {subject}: proxy-I {}", pi.join(" "));
            }
            out
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut rewards = Vec::new();
    for (seed, (r, reports, t)) in per_seed.into_iter().enumerate() {
        rows.extend(r);
        rewards.push((seed as u64, reports));
        timings.extend(t);
    }
    let mut out = AblationOutput {
        fingerprint: cfg.fingerprint(),
        rows,
        comparisons: Vec::new(),
        rewards,
        timings,
    };
    out.comparisons = COMPARISONS
        .iter()
        .map(|&(better, worse)| Comparison {
            better,
            worse,
            test: sign_test(&out.proxy_i(better), &out.proxy_i(worse)),
        })
        .collect();
    Ok(out)
}

fn run_seed(
    cfg: &ExperimentConfig,
    save_dir: Option<&Path>,
    m: &SubjectModel,
    evaluator: &Evaluator,
    seed: u64,
    index: usize,
) -> Result<SeedOutput> {
    let w = &m.weights;
    let frames = cfg.sampling.frames;
    let mut timer = UnitTimer::start(format!("seed_{seed:03}"), frames);
    let (prompt, expected) = benchmark_prompt(cfg, &m.subject, index, w.config.max_prompt)?;
    let refs: &ReferenceSet = &m.subject.refs;
    let ref_emb = evaluator.reference_embeddings(refs);
    let text = pipeline::prompt_text(&prompt);
    let row = |variant: usize, result: EvalResult| RunRow {
        seed,
        subject: m.subject.record.id,
        prompt_index: index,
        prompt: text.clone(),
        variant,
        result,
    };
    let mut rows = Vec::with_capacity(VARIANTS.len());
    let mut full_input = None;
    timer.lap("setup");
    for (variant, spm, tpm) in [(BASELINE, false, false), (SPM, true, false), (TPM, false, true), (SPM_TPM, true, true)] {
        let mut options = StpmOptions::new(frames, &w.config).with_modules(spm, tpm);
        options.scope = cfg.sampling.scope.layers(&w.config);
        options.stochastic = cfg.sampling.stochastic;
        let out = pipeline::sample(w, &prompt, seed, &options)?;
        timer.lap("sample");
        let result = evaluator.evaluate(w, &prompt, &out.video, &ref_emb, expected)?;
        timer.lap("evaluate");
        if let Some(dir) = save_dir {
            let latents = pipeline::latents_archive(&out, &prompt, seed, &options);
            pipeline::write_generation(dir, &format!("seed_{seed:03}_{}", VARIANTS[variant]), &out, &latents)?;
            timer.lap("write");
        }
        rows.push(row(variant, result));
        if variant == SPM_TPM {
            full_input = Some(out);
        }
    }
    let out = full_input.expect("spm_tpm variant ran");
    let targets = pipeline::reward_targets(w, &prompt, &out.reference, ref_emb.clone())?;
    let masks = pipeline::segment(w, &prompt, &out.video)?;
    let ttro_cfg = cfg.ttro.to_core(seed);
    let run = pipeline::run_ttro(w, &evaluator.encoder, &prompt, &targets, &out.video, masks, &ttro_cfg, &mut WallClock::start())?;
    timer.lap("ttro");
    let result = evaluator.evaluate(w, &prompt, &run.latents, &ref_emb, expected)?;
    timer.lap("evaluate");
    if let Some(dir) = save_dir {
        let tag = format!("seed_{seed:03}_{}", VARIANTS[FULL]);
        images::write_frames(&dir.join("frames").join(&tag), &codec::decode_stack(run.latents.tensor()))?;
        let mut a = Archive::new()
            .with_meta("kind", "latents")
            .with_meta("prompt", &text)
            .with_meta("seed", seed)
            .with_meta("t", run.latents.t());
        a.insert("video", run.latents.tensor().clone());
        a.insert("reference", out.reference.tensor().clone());
        a.save(&dir.join("latents").join(format!("{tag}.svta")), Kind::Archive)?;
        pipeline::write_text(&dir.join("logs").join(format!("{tag}_rewards.csv")), &pipeline::reward_csv(&run.reports))?;
        timer.lap("write");
    }
    rows.push(row(FULL, result));
    Ok((rows, run.reports, timer.finish()))
}

/// Writes `metrics.csv`, `summary.csv`, `sign_tests.csv`, `summary.svg`,
/// `config.json` and `logs/timing.csv` under `run_dir`.
pub fn write_outputs(run_dir: &Path, cfg: &ExperimentConfig, out: &AblationOutput) -> Result<()> {
    pipeline::write_text(&run_dir.join("metrics.csv"), &out.metrics_csv())?;
    pipeline::write_text(&run_dir.join("summary.csv"), &out.summary_csv())?;
    pipeline::write_text(&run_dir.join("sign_tests.csv"), &out.sign_tests_csv())?;
    pipeline::write_text(&run_dir.join("summary.svg"), &out.summary_svg())?;
    pipeline::write_text(&run_dir.join("config.json"), &(cfg.to_json() + "\n"))?;
    pipeline::write_text(&run_dir.join("logs/timing.csv"), &timing::to_csv(&out.timings))
}
