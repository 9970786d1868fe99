//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The benchmark corpus, base model and encoder are built once under the
//! cargo target directory and reused while their configuration is unchanged.
//! Set `SUBJVID_ACCEPTANCE=1,3,8` to run a subset and
//! `SUBJVID_ACCEPTANCE_STRICT=1` to exit nonzero when any criterion fails.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};

use subjvid::ablation::{self, AblationOutput, VARIANTS};
use subjvid::archive::{self, Archive, Kind};
use subjvid::config::ExperimentConfig;
use subjvid::dataset;
use subjvid::pipeline::{self, Assets};
use subjvid_core::autograd::Graph;
use subjvid_core::codec;
use subjvid_core::correspondence::{cost_volume, flow_from_cost, MatchingFlow};
use subjvid_core::customize::{self, TrainConfig};
use subjvid_core::diffusion::{forward_diffuse, reverse_step, reverse_step_var, LatentVideo, NoiseSchedule};
use subjvid_core::encoder::ProxyEncoder;
use subjvid_core::model::{forward, Bindings, ModelConfig, ModelWeights, NoControl, PromptEncoding, TEXT_TABLE};
use subjvid_core::rng::Rng;
use subjvid_core::stpm::{self, inject_structure, propagate_texture, soft_mask, SoftMask, StpmOptions};
use subjvid_core::synth;
use subjvid_core::ttro::{reward_latent_var, reward_pixel_var, MaskSource, RewardTargets, SubjectMask};
use subjvid_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

// 1. Correspondence against exhaustive search.

/// Nearest source by cosine for every target; the first maximal source wins.
fn exhaustive_flow(a: &Tensor, b: &Tensor) -> Vec<usize> {
    let s = a.shape();
    let (n, d) = (s[0] * s[1], s[2]);
    let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let len = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..n)
        .map(|j| {
            let bj = row(b, j);
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..n {
                let ai = row(a, i);
                let dot: f64 = ai.iter().zip(&bj).map(|(x, y)| x * y).sum();
                let cos = dot / (len(&ai) * len(&bj) + 1e-8);
                if cos > best.0 {
                    best = (cos, i);
                }
            }
            best.1
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(2024, 0);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..500 {
        let (h, w, d) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(16));
        // Small integers make exact ties (and zero vectors) common, and keep
        // every dot product exact so both sides see identical cosines.
        let levels = 1 + rng.below(3) as i64;
        let mut grid = || Tensor::from_fn(&[h, w, d], |_| (rng.below(2 * levels as usize + 1) as i64 - levels) as f64);
        let a = grid();
        let mut b = grid();
        // Copy some source vectors into the target so exact matches appear.
        for j in 0..(h * w) / 3 {
            let i = rng.below(h * w);
            let src = a.data()[i * d..(i + 1) * d].to_vec();
            b.data_mut()[j * d..(j + 1) * d].copy_from_slice(&src);
        }
        let flow = flow_from_cost(&cost_volume(&a, &b, 0).unwrap());
        let oracle = exhaustive_flow(&a, &b);
        if flow.sources() != oracle {
            mismatches += 1;
        }
        let expected = MatchingFlow::from_sources(&oracle, (h, w), (h, w)).unwrap();
        if flow != expected {
            mismatches += 1;
        }
        ties += a.data().chunks(d).enumerate().filter(|(i, r)| a.data().chunks(d).take(*i).any(|q| q == *r)).count();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 10.0,
        format!("500 grid pairs, {mismatches} mismatches, {ties} duplicated source vectors exercised the tie rule, {secs:.2} s (limit 10 s)"),
    )
}

// 2. Reverse step with the true noise against the posterior mean.

fn criterion_2() -> Outcome {
    let sched = NoiseSchedule::linear(100, 1e-3, 0.1).unwrap();
    // Cumulative products recomputed here rather than read from the schedule.
    let mut ab = vec![1.0f64];
    for t in 1..=100 {
        ab.push(ab[t - 1] * (1.0 - sched.beta(t)));
    }
    let mut rng = Rng::new(7, 0);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..50 {
        let x0 = LatentVideo::new(rng.normal_tensor(&[1, 12, 8, 8]), 0).unwrap();
        let eps = rng.normal_tensor(&[1, 12, 8, 8]);
        for t in 1..=100 {
            let zt = forward_diffuse(&x0, t, &eps, &sched).unwrap();
            let back = reverse_step(&zt, &eps, t, None, &sched, false).unwrap();
            let beta = sched.beta(t);
            let c0 = ab[t - 1].sqrt() * beta / (1.0 - ab[t]);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
            let mean: Vec<f64> = x0.tensor().data().iter().zip(zt.tensor().data()).map(|(x, z)| c0 * x + ct * z).collect();
            worst = worst.max(rel_err(back.tensor().data(), &mean));
            checks += 1;
        }
    }
    outcome(
        worst < 1e-6,
        format!("{checks} steps (t = 1..100 x 50 latents), worst relative error {worst:.2e} (limit 1e-6)"),
    )
}

// 3. Gradient checks.

fn small_model() -> ModelWeights {
    let cfg = ModelConfig {
        height: 4,
        width: 4,
        ..ModelConfig::default()
    };
    ModelWeights::init(cfg, 21).unwrap()
}

/// Central differences of `f` at `x` over every coordinate.
fn finite_difference(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

struct RewardCase {
    weights: ModelWeights,
    encoder: ProxyEncoder,
    sched: NoiseSchedule,
    prompt: PromptEncoding,
    masks: SubjectMask,
    targets: RewardTargets,
    zt: Tensor,
}

fn reward_case() -> RewardCase {
    let weights = small_model();
    let sched = weights.config.schedule().unwrap();
    let mut rng = Rng::new(33, 0);
    let encoder = ProxyEncoder::init(4);
    let latent_mask = Tensor::from_fn(&[2, 4, 4], |i| if (i * 7 + 3) % 5 < 3 { 1.0 } else { 0.0 });
    let pixels = Tensor::from_fn(&[2, 16, 16], |i| {
        let (f, y, x) = (i / 256, (i / 16) % 16, i % 16);
        latent_mask.data()[f * 16 + (y / 4) * 4 + x / 4]
    });
    let masks = SubjectMask::from_pixels(pixels, MaskSource::GroundTruth).unwrap();
    let ref_images = Tensor::from_fn(&[3, 3, 16, 16], |_| rng.uniform());
    let targets = RewardTargets {
        reference_latent: rng.normal_tensor(&[12, 4, 4]),
        reference_mask: Tensor::from_fn(&[4, 4], |i| if i % 3 != 1 { 1.0 } else { 0.0 }),
        reference_embeddings: encoder.embed(&ref_images),
    };
    RewardCase {
        prompt: PromptEncoding::parse("a <S*> circle moving left on grass", weights.config.max_prompt).unwrap(),
        zt: rng.normal_tensor(&[2, 12, 4, 4]),
        weights,
        encoder,
        sched,
        masks,
        targets,
    }
}

/// One denoising step from `t = 1` followed by the chosen reward.
fn reward_through_step(c: &RewardCase, z: &Tensor, pixel: bool, want_grad: bool) -> (f64, Option<Tensor>) {
    let mut g = Graph::new();
    let b = Bindings::constant(&mut g, &c.weights);
    let vars = c.encoder.bind(&mut g, false);
    let zv = if want_grad { g.param(z.clone()) } else { g.constant(z.clone()) };
    let out = forward(&mut g, &c.weights, &b, zv, &c.prompt, 1, true, &mut NoControl, false).unwrap();
    let z_hat = reverse_step_var(&mut g, zv, out.eps, 1, &c.sched);
    let r = if pixel {
        let frames = codec::decode_var(&mut g, z_hat);
        reward_pixel_var(&mut g, &c.encoder, &vars, frames, &c.masks.pixels, &c.masks.counted(), &c.targets).unwrap()
    } else {
        reward_latent_var(&mut g, z_hat, &c.masks.latent, &c.targets).unwrap().0
    };
    let value = g.value(r).item();
    let grad = want_grad.then(|| g.backward(r).get(zv).cloned().unwrap());
    (value, grad)
}

fn eq1_gradient_error() -> f64 {
    let w = small_model();
    let sched = w.config.schedule().unwrap();
    let mut rng = Rng::new(5, 0);
    let z0 = LatentVideo::new(rng.normal_tensor(&[1, 12, 4, 4]), 0).unwrap();
    let eps = rng.normal_tensor(&[1, 12, 4, 4]);
    let prompt = PromptEncoding::parse("a <S*> square on sand", w.config.max_prompt).unwrap();
    let t = 30;
    let special = synth::special_token_id();
    let samples = vec![(z0.clone(), prompt.clone(), t, eps.clone())];
    let (_, grads) = customize::loss_and_grads(&samples, &w, &sched, &|n| n == TEXT_TABLE).unwrap();
    let analytic = grads[0].1.row(special).to_vec();
    let row = Tensor::new(&[w.config.text_dim], w.embedding(special).to_vec());
    let probe = RefCell::new(w.clone());
    let numeric = finite_difference(&row, 1e-5, &|r| {
        let mut p = probe.borrow_mut();
        p.set_embedding(special, r.data());
        customize::diffusion_loss(&z0, &prompt, t, &eps, &p, &sched).unwrap()
    });
    rel_err(&analytic, &numeric)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let c = reward_case();
    let mut errs = [0.0; 2];
    for (k, pixel) in [false, true].into_iter().enumerate() {
        let analytic = reward_through_step(&c, &c.zt, pixel, true).1.unwrap();
        let numeric = finite_difference(&c.zt, 1e-5, &|z| reward_through_step(&c, z, pixel, false).0);
        errs[k] = rel_err(analytic.data(), &numeric);
    }
    let eq1 = eq1_gradient_error();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        errs[0] < 1e-4 && errs[1] < 1e-3 && eq1 < 1e-4 && secs < 60.0,
        format!(
            "d/dz_t through one denoising step on 2x12x4x4: R_lat rel err {:.2e} (limit 1e-4), R_pixel {:.2e} (limit 1e-3); denoising loss d/d<S*> {eq1:.2e} (limit 1e-4); {secs:.1} s (limit 60 s)",
            errs[0], errs[1]
        ),
    )
}

// 4. No-op propagation is plain sampling.

fn criterion_4(base: &ModelWeights) -> Outcome {
    let sched = base.config.schedule().unwrap();
    let prompt = PromptEncoding::parse("a <S*> circle moving left on grass", base.config.max_prompt).unwrap();
    let mut identical = 0;
    let seeds = [0u64, 1, 2, 3, 4];
    for &seed in &seeds {
        let mut ok = true;
        for (frames, stochastic) in [(16, false), (4, true)] {
            let mut opts = StpmOptions::new(frames, &base.config).with_modules(false, false);
            opts.stochastic = stochastic;
            let out = stpm::sample_with_stpm(&prompt, base, &sched, seed, &opts).unwrap();
            let (plain, _) = stpm::sample_plain(&prompt, base, &sched, seed, frames, stochastic).unwrap();
            let same = out.video.tensor().data().iter().zip(plain.tensor().data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ok &= same && out.video.tensor().shape() == plain.tensor().shape();
        }
        identical += usize::from(ok);
    }
    outcome(
        identical == seeds.len(),
        format!("{identical}/5 seeds bit-identical (16-frame deterministic and 4-frame stochastic sampling)"),
    )
}

// 5. Mask and blend invariants.

fn criterion_5() -> Outcome {
    let cases = 1000;
    let mut results = Vec::new();

    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    let strat = (1usize..9, 1usize..9).prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(-50.0f64..50.0, h * w)));
    let r = runner.run(&strat, |(h, w, col)| {
        let m = soft_mask(&col, h, w).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(m.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if col.iter().all(|v| *v == col[0]) {
            prop_assert!(m.values.data().iter().all(|v| *v == 0.0));
        } else {
            prop_assert!(m.values.data().contains(&0.0));
            prop_assert!(m.values.data().contains(&1.0));
        }
        Ok(())
    });
    results.push(("SoftMask range/attainment", r.map_err(|e| e.to_string())));

    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    let r = runner.run(&((1usize..12, 1usize..10), any::<u64>()), |((n, l), seed)| {
        let mut rng = Rng::new(seed, 0);
        let native = rng.normal_tensor(&[n, l]);
        let i = rng.below(l);
        let star: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let out = inject_structure(&native, &star, i).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(out.shape(), native.shape());
        for r in 0..n {
            for c in 0..l {
                prop_assert_eq!(out.row(r)[c], if c == i { star[r] } else { native.row(r)[c] });
            }
        }
        let own: Vec<f64> = (0..n).map(|r| native.row(r)[i]).collect();
        prop_assert_eq!(inject_structure(&native, &own, i).unwrap(), native);
        Ok(())
    });
    results.push(("inject_structure width/self-replacement", r.map_err(|e| e.to_string())));

    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    let r = runner.run(&((1usize..7, 1usize..7, 1usize..9), any::<u64>()), |((h, w, d), seed)| {
        let mut rng = Rng::new(seed, 0);
        let prev = rng.normal_tensor(&[h * w, d]);
        let native = rng.normal_tensor(&[h * w, d]);
        let sources: Vec<usize> = (0..h * w).map(|_| rng.below(h * w)).collect();
        let flow = MatchingFlow::from_sources(&sources, (h, w), (h, w)).unwrap();
        let zeros = SoftMask { values: Tensor::zeros(&[h, w]), layer: None, frame: None };
        let ones = SoftMask { values: Tensor::full(&[h, w], 1.0), layer: None, frame: None };
        prop_assert_eq!(propagate_texture(&prev, &native, &flow, &zeros).unwrap(), native.clone());
        let full = propagate_texture(&prev, &native, &flow, &ones).unwrap();
        for (j, &src) in sources.iter().enumerate() {
            prop_assert_eq!(full.row(j), prev.row(src));
        }
        Ok(())
    });
    results.push(("propagate_texture M=0/M=1", r.map_err(|e| e.to_string())));

    let failed: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("3 properties x {cases} cases passed")
        } else {
            failed.join("; ")
        },
    )
}

// Benchmark assets.

struct Bench {
    data: PathBuf,
    assets: Assets,
    setup_seconds: f64,
}

fn bench_key(cfg: &ExperimentConfig) -> String {
    serde_json::json!({
        "data": cfg.data,
        "pretrain": cfg.pretrain,
        "encoder": cfg.encoder,
        "weights_version": subjvid_core::model::WEIGHTS_VERSION,
    })
    .to_string()
}

fn bench(cfg: &ExperimentConfig) -> Bench {
    let dir = cache_dir().join("bench");
    let data = dir.join("data");
    let stamp = dir.join("assets.json");
    let key = bench_key(cfg);
    if let Ok(text) = fs::read_to_string(&stamp) {
        let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
        if v["key"] == key.as_str() {
            if let Ok(assets) = Assets::load(&data) {
                eprintln!("reusing benchmark assets in {}", data.display());
                return Bench {
                    data,
                    assets,
                    setup_seconds: v["seconds"].as_f64().unwrap_or(0.0),
                };
            }
        }
    }
    eprintln!("building benchmark corpus, base model and encoder in {}", data.display());
    let _ = fs::remove_dir_all(&dir);
    let start = Instant::now();
    dataset::gen_dataset(cfg.data.n_subjects, cfg.data.seed, &data).unwrap();
    let assets = pipeline::train_assets(cfg, &data).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    fs::write(&stamp, serde_json::json!({ "key": key, "seconds": seconds }).to_string()).unwrap();
    Bench {
        data,
        assets,
        setup_seconds: seconds,
    }
}

// 6. Ablation trend.

fn criterion_6(cfg: &ExperimentConfig, b: &Bench) -> (Outcome, AblationOutput) {
    let start = Instant::now();
    let out = ablation::run_ablation(cfg, &b.data, &b.assets, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let run_dir = cache_dir().join("runs").join(&cfg.name);
    ablation::write_outputs(&run_dir, cfg, &out).unwrap();
    let m: Vec<f64> = (0..VARIANTS.len()).map(|v| out.mean(v, |r| r.proxy_i)).collect();
    let order_ok = m[0] < m[1] && m[0] < m[2] && m[3] >= m[1].max(m[2]) && m[4] >= m[3];
    let required = ["spm>baseline", "tpm>baseline", "spm_tpm>spm", "spm_tpm>tpm", "full>spm_tpm"];
    let mut tests_ok = true;
    let mut parts = Vec::new();
    for c in &out.comparisons {
        let name = c.name();
        if required.contains(&name.as_str()) {
            tests_ok &= c.test.p_value < 0.05;
        }
        parts.push(format!("{name} {}-{} p={:.3}", c.test.wins, c.test.losses, c.test.p_value));
    }
    let total = secs + b.setup_seconds;
    let pass = order_ok && tests_ok && total < 7200.0 && cfg.ablation.seeds >= 20;
    let means = VARIANTS.iter().zip(&m).map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(", ");
    (
        outcome(
            pass,
            format!(
                "{} seeds x 16 subjects; mean proxy-I {means}; ordering {}; sign tests: {}; ablation {secs:.0} s + setup {:.0} s (limit 7200 s); outputs in {}",
                cfg.ablation.seeds,
                if order_ok { "holds" } else { "violated" },
                parts.join(", "),
                b.setup_seconds,
                run_dir.display()
            ),
        ),
        out,
    )
}

// 7. Reward monotonicity.

fn criterion_7(cfg: &ExperimentConfig, out: &AblationOutput) -> Outcome {
    let runs: Vec<_> = out.rewards.iter().take(20).collect();
    let rising = runs.iter().filter(|(_, r)| r.len() >= 5 && r[4].total() >= r[0].total()).count();
    let frac = rising as f64 / runs.len().max(1) as f64;
    outcome(
        runs.len() == 20 && cfg.ttro.lambda == 100.0 && frac >= 0.9,
        format!(
            "total reward at iteration 5 >= iteration 1 in {rising}/{} runs ({:.0}%, limit 90%) at lambda {}",
            runs.len(),
            100.0 * frac,
            cfg.ttro.lambda
        ),
    )
}

// 8. Textual inversion isolation.

fn criterion_8(b: &Bench) -> Outcome {
    let manifest = dataset::read_manifest(&b.data).unwrap();
    let subject = dataset::load_subject(&b.data.join(&manifest.subjects[0].dir)).unwrap();
    let mut w = b.assets.base.clone();
    customize::init_special_token(&mut w);
    let cfg = TrainConfig {
        token_lr: 1e-3,
        token_steps: 60,
        ..TrainConfig::default()
    };
    let sched = w.config.schedule().unwrap();
    let (trained, log) = customize::train_token(&subject.refs, &w, &cfg, &sched).unwrap();

    // Compare the checkpoints as written to disk.
    let before = Archive::from_bytes(&archive::model_to_archive(&w).to_bytes(Kind::Checkpoint), Kind::Checkpoint).unwrap();
    let after = Archive::from_bytes(&archive::model_to_archive(&trained).to_bytes(Kind::Checkpoint), Kind::Checkpoint).unwrap();
    let special = synth::special_token_id();
    let mut changed_rows = Vec::new();
    let mut other_tensors = Vec::new();
    for (name, t) in &before.tensors {
        let u = &after.tensors[name];
        if t == u {
            continue;
        }
        if name == TEXT_TABLE {
            for r in 0..t.shape()[0] {
                if t.row(r) != u.row(r) {
                    changed_rows.push(r);
                }
            }
        } else {
            other_tensors.push(name.clone());
        }
    }
    let h0 = customize::heldout_loss(&subject.refs, &w, &sched, &cfg, pipeline::HELDOUT_DRAWS).unwrap();
    let h1 = customize::heldout_loss(&subject.refs, &trained, &sched, &cfg, pipeline::HELDOUT_DRAWS).unwrap();
    outcome(
        changed_rows == [special] && other_tensors.is_empty() && h1 < h0 && log.len() == 60,
        format!(
            "lr 1e-3, 60 steps: changed text rows {changed_rows:?} (subject token row {special}), other changed tensors {}; held-out loss {h0:.5} -> {h1:.5}",
            other_tensors.len()
        ),
    )
}

// 9. Determinism of the ablate command.

fn criterion_9(b: &Bench) -> Outcome {
    let dir = cache_dir().join("determinism");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, r#"{"schema_version": 1, "name": "determinism", "ablation": {"seeds": 4}}"#).unwrap();
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        let status = Command::new(env!("CARGO_BIN_EXE_subjvid"))
            .args(["ablate", "--config"])
            .arg(&cfg_path)
            .arg("--data")
            .arg(&b.data)
            .arg("--runs")
            .arg(dir.join(run))
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap();
        if !status.success() {
            return outcome(false, format!("{run} ablate run exited with {status}"));
        }
        outputs.push(fs::read(dir.join(run).join("determinism/metrics.csv")).unwrap());
    }
    let rows = outputs[0].iter().filter(|c| **c == b'\n').count();
    outcome(
        outputs[0] == outputs[1] && rows == 1 + 4 * VARIANTS.len(),
        format!("two ablate runs (4 seeds, {} bytes, {} rows) byte-identical: {}", outputs[0].len(), rows - 1, outputs[0] == outputs[1]),
    )
}

fn main() {
    // libtest flags such as --nocapture may be passed through; none apply here.
    let only: Option<Vec<usize>> = std::env::var("SUBJVID_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let cfg = ExperimentConfig::default();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    if wanted(1) {
        report(1, "correspondence oracle", criterion_1());
    }
    if wanted(2) {
        report(2, "reverse-step round trip", criterion_2());
    }
    if wanted(3) {
        report(3, "gradient suite", criterion_3());
    }
    if wanted(5) {
        report(5, "mask and blend invariants", criterion_5());
    }
    let needs_bench = [4, 6, 7, 8, 9].iter().any(|&n| wanted(n));
    if needs_bench {
        let b = bench(&cfg);
        if wanted(4) {
            report(4, "STPM no-op equivalence", criterion_4(&b.assets.base));
        }
        if wanted(8) {
            report(8, "customization isolation", criterion_8(&b));
        }
        if wanted(6) || wanted(7) {
            let (o6, out) = criterion_6(&cfg, &b);
            if wanted(6) {
                report(6, "ablation trend", o6);
            }
            if wanted(7) {
                report(7, "TTRO monotonicity", criterion_7(&cfg, &out));
            }
        }
        if wanted(9) {
            report(9, "end-to-end determinism", criterion_9(&b));
        }
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    // A FAIL line is the verdict; set SUBJVID_ACCEPTANCE_STRICT to also turn
    // it into a failing exit status.
    if failed > 0 && std::env::var_os("SUBJVID_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
