use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::control::{AttentionControl, LayerId, Level, NoControl};
use super::Prediction;
use super::text::PromptEncoding;
use super::{ModelConfig, ModelWeights, TEXT_TABLE};

const LN_EPS: f64 = 1e-5;

/// Parameters placed on a graph, tracked or constant.
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Binds every parameter; those for which `trainable` holds are tracked.
    pub fn bind(g: &mut Graph, weights: &ModelWeights, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = weights
            .params()
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn constant(g: &mut Graph, weights: &ModelWeights) -> Self {
        Self::bind(g, weights, |_| false)
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Attention internals of one block for one frame at one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: LayerId,
    pub frame: usize,
    pub t: usize,
    /// `[h_l * w_l, L]` pre-softmax logits as used by the block.
    pub cross_map: Tensor,
    /// `[h_l * w_l, d]` self-attention values as used by the block.
    pub self_values: Tensor,
    /// `[h, w, d]` decoder features, only on the feature layer.
    pub decoder_features: Option<Tensor>,
}

pub struct ForwardOutput {
    /// `[J, C, h, w]` predicted noise.
    pub eps: Var,
    /// `[J, h, w, d]` decoder features.
    pub features: Var,
    pub records: Vec<AttentionRecord>,
}

struct Pass<'a> {
    cfg: ModelConfig,
    b: &'a Bindings,
    control: &'a mut dyn AttentionControl,
    capture: bool,
    records: Vec<AttentionRecord>,
    t: usize,
    frames: usize,
}

/// Sinusoidal embedding of a scalar position.
fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = alloc::vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        out[i] = libm::sin(pos * freq);
        out[i + half] = libm::cos(pos * freq);
    }
    out
}

/// Adds a `[n, d]` embedding to every frame of `x: [J, n, d]`.
fn add_positions(g: &mut Graph, x: Var, pos: Var, j: usize) -> Var {
    let s = g.shape(pos).to_vec();
    let len = (s[0] * s[1]) as u32;
    let idx = (0..j as u32).flat_map(|_| 0..len).collect();
    let tiled = g.gather(pos, idx, &[j, s[0], s[1]]);
    g.add(x, tiled)
}

/// `[n/4, n]` 2x2 average-pooling matrix for an `h x w` grid.
fn pool_matrix(h: usize, w: usize) -> Tensor {
    let (ho, wo) = (h / 2, w / 2);
    let mut m = Tensor::zeros(&[ho * wo, h * w]);
    for y in 0..h {
        for x in 0..w {
            m.data_mut()[((y / 2) * wo + x / 2) * h * w + y * w + x] = 0.25;
        }
    }
    m
}

/// `[n, n/4]` nearest-neighbour upsampling matrix.
fn upsample_matrix(h: usize, w: usize) -> Tensor {
    let (ho, wo) = (h / 2, w / 2);
    let mut m = Tensor::zeros(&[h * w, ho * wo]);
    for y in 0..h {
        for x in 0..w {
            m.data_mut()[(y * w + x) * ho * wo + (y / 2) * wo + x / 2] = 1.0;
        }
    }
    m
}

impl Pass<'_> {
    fn p(&self, name: &str) -> Var {
        self.b.var(name)
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let y = g.layer_norm(x, LN_EPS);
        let y = g.mul_row(y, self.p(&format!("{prefix}.g")));
        g.add_row(y, self.p(&format!("{prefix}.b")))
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str) -> Var {
        g.matmul(x, self.p(w))
    }

    /// Self-attention, cross-attention and MLP on `h: [J, n, d]`.
    fn block(&mut self, g: &mut Graph, h: Var, text: Var, layer: LayerId) -> Result<Var> {
        let p = layer.to_string();
        let d = self.cfg.dim;
        let scale = 1.0 / libm::sqrt(d as f64);

        let x = self.norm(g, h, &format!("{p}.ln1"));
        let q = self.linear(g, x, &format!("{p}.self.q"));
        let k = self.linear(g, x, &format!("{p}.self.k"));
        let mut v = self.linear(g, x, &format!("{p}.self.v"));
        let mut values = g.value(v).clone();
        if self.control.self_values(layer, &mut values)? {
            v = g.constant(values);
        }
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        let out = g.matmul(attn, v);
        let out = self.linear(g, out, &format!("{p}.self.o"));
        let h = g.add(h, out);
        let self_values = self.capture.then(|| g.value(v).clone());

        let x = self.norm(g, h, &format!("{p}.ln2"));
        let q = self.linear(g, x, &format!("{p}.cross.q"));
        let k = self.linear(g, text, &format!("{p}.cross.k"));
        let v = self.linear(g, text, &format!("{p}.cross.v"));
        let logits = g.matmul_nt(q, k);
        let mut logits = g.scale(logits, scale);
        let mut maps = g.value(logits).clone();
        if self.control.cross_logits(layer, &mut maps)? {
            logits = g.constant(maps);
        }
        if let Some(values) = self_values {
            let maps = g.value(logits);
            let (n, l) = (maps.shape()[1], maps.shape()[2]);
            for f in 0..self.frames {
                self.records.push(AttentionRecord {
                    layer,
                    frame: f,
                    t: self.t,
                    cross_map: Tensor::new(&[n, l], maps.outer(f).to_vec()),
                    self_values: Tensor::new(&[n, d], values.outer(f).to_vec()),
                    decoder_features: None,
                });
            }
        }
        let attn = g.softmax(logits);
        let out = g.matmul(attn, v);
        let out = self.linear(g, out, &format!("{p}.cross.o"));
        let h = g.add(h, out);

        let x = self.norm(g, h, &format!("{p}.ln3"));
        let x = self.linear(g, x, &format!("{p}.mlp.w1"));
        let x = g.add_row(x, self.p(&format!("{p}.mlp.b1")));
        let x = g.silu(x);
        let x = self.linear(g, x, &format!("{p}.mlp.w2"));
        let x = g.add_row(x, self.p(&format!("{p}.mlp.b2")));
        Ok(g.add(h, x))
    }

    /// Frame-axis attention at every position of `h: [J, n, d]`.
    fn temporal(&self, g: &mut Graph, h: Var, level: Level) -> Var {
        let shape = g.shape(h).to_vec();
        let (j, n, d) = (shape[0], shape[1], shape[2]);
        let p = format!("{}.temporal", level.name());
        let x = self.norm(g, h, &format!("{p}.ln"));
        let mut pe = Tensor::zeros(&[j, n, d]);
        for f in 0..j {
            let e = sinusoid(f as f64, d);
            for row in pe.outer_mut(f).chunks_mut(d) {
                row.copy_from_slice(&e);
            }
        }
        let pe = g.constant(pe);
        let x = g.add(x, pe);
        // [J, n, d] -> [n, J, d]
        let mut idx = Vec::with_capacity(j * n * d);
        for pos in 0..n {
            for f in 0..j {
                for c in 0..d {
                    idx.push(((f * n + pos) * d + c) as u32);
                }
            }
        }
        let x = g.gather(x, idx, &[n, j, d]);
        let q = self.linear(g, x, &format!("{p}.q"));
        let k = self.linear(g, x, &format!("{p}.k"));
        let v = self.linear(g, x, &format!("{p}.v"));
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
        let attn = g.softmax(scores);
        let out = g.matmul(attn, v);
        let out = self.linear(g, out, &format!("{p}.o"));
        let mut idx = Vec::with_capacity(j * n * d);
        for f in 0..j {
            for pos in 0..n {
                for c in 0..d {
                    idx.push(((pos * j + f) * d + c) as u32);
                }
            }
        }
        let out = g.gather(out, idx, &[j, n, d]);
        g.add(h, out)
    }

    fn time_embedding(&self, g: &mut Graph) -> Var {
        let e = g.constant(Tensor::new(&[1, self.cfg.dim], sinusoid(self.t as f64, self.cfg.dim)));
        let x = self.linear(g, e, "time.w1");
        let x = g.add_row(x, self.p("time.b1"));
        let x = g.silu(x);
        let x = self.linear(g, x, "time.w2");
        let x = g.add_row(x, self.p("time.b2"));
        g.reshape(x, &[self.cfg.dim])
    }
}

/// Runs the denoiser on `z: [J, C, h, w]` and returns `eps: [J, C, h, w]`.
///
/// With `temporal == false` the frame-axis modules are skipped and every
/// frame is denoised independently (image mode).
#[allow(clippy::too_many_arguments)]
pub fn forward(
    g: &mut Graph,
    weights: &ModelWeights,
    b: &Bindings,
    z: Var,
    prompt: &PromptEncoding,
    t: usize,
    temporal: bool,
    control: &mut dyn AttentionControl,
    capture: bool,
) -> Result<ForwardOutput> {
    let cfg = weights.config;
    let zs = g.shape(z).to_vec();
    if zs.len() != 4 || zs[1..] != [cfg.latent_channels, cfg.height, cfg.width] {
        return Err(Error::Shape(format!(
            "latents {zs:?} do not match model [J, {}, {}, {}]",
            cfg.latent_channels, cfg.height, cfg.width
        )));
    }
    if prompt.len() > cfg.max_prompt {
        return Err(Error::Prompt(format!(
            "prompt length {} exceeds model maximum {}",
            prompt.len(),
            cfg.max_prompt
        )));
    }
    let (j, c, n, d) = (zs[0], cfg.latent_channels, cfg.positions(), cfg.dim);
    let mut pass = Pass {
        cfg,
        b,
        control,
        capture,
        records: Vec::new(),
        t,
        frames: j,
    };

    let text = prompt.embed(g, b.var(TEXT_TABLE));
    let temb = pass.time_embedding(g);

    // [J, C, h, w] -> [J, n, C]
    let mut idx = Vec::with_capacity(j * n * c);
    for f in 0..j {
        for pos in 0..n {
            for ch in 0..c {
                idx.push(((f * c + ch) * n + pos) as u32);
            }
        }
    }
    let x = g.gather(z, idx, &[j, n, c]);
    let x = pass.linear(g, x, "in.w");
    let x = g.add_row(x, pass.p("in.b"));
    let x = add_positions(g, x, pass.p("in.pos"), j);
    let mut h = g.add_row(x, temb);

    for blk in 0..cfg.blocks[0] {
        h = pass.block(g, h, text, LayerId::new(Level::Enc, blk))?;
    }
    if temporal {
        h = pass.temporal(g, h, Level::Enc);
    }
    let skip = h;

    let pool = g.constant(pool_matrix(cfg.height, cfg.width));
    let mut m = g.matmul(pool, h);
    m = pass.linear(g, m, "down.w");
    let temb_row = g.reshape(temb, &[1, d]);
    let mid_time = pass.linear(g, temb_row, "mid.time.w");
    let mid_time = g.reshape(mid_time, &[d]);
    m = g.add_row(m, mid_time);
    m = add_positions(g, m, pass.p("mid.pos"), j);
    for blk in 0..cfg.blocks[1] {
        m = pass.block(g, m, text, LayerId::new(Level::Mid, blk))?;
    }
    if temporal {
        m = pass.temporal(g, m, Level::Mid);
    }

    let up = g.constant(upsample_matrix(cfg.height, cfg.width));
    let u = g.matmul(up, m);
    let u = pass.linear(g, u, "up.w");
    let mut h = g.add(skip, u);
    for blk in 0..cfg.blocks[2] {
        h = pass.block(g, h, text, LayerId::new(Level::Dec, blk))?;
    }
    if temporal {
        h = pass.temporal(g, h, Level::Dec);
    }
    let features = g.reshape(h, &[j, cfg.height, cfg.width, d]);

    let x = pass.norm(g, h, "out.ln");
    let x = pass.linear(g, x, "out.w");
    let x = g.add_row(x, pass.p("out.b"));
    // [J, n, C] -> [J, C, h, w]
    let mut idx = Vec::with_capacity(j * n * c);
    for f in 0..j {
        for ch in 0..c {
            for pos in 0..n {
                idx.push(((f * n + pos) * c + ch) as u32);
            }
        }
    }
    let raw = g.gather(x, idx, &[j, c, cfg.height, cfg.width]);
    let eps = apply_prediction(g, &cfg, raw, z, t)?;

    let mut records = pass.records;
    if capture {
        let feature_layer = cfg.feature_layer();
        let fv = g.value(features);
        for r in records.iter_mut().filter(|r| r.layer == feature_layer) {
            r.decoder_features = Some(Tensor::new(&[cfg.height, cfg.width, d], fv.outer(r.frame).to_vec()));
        }
    }
    Ok(ForwardOutput { eps, features, records })
}

/// Converts the raw network output into a noise prediction.
pub fn apply_prediction(g: &mut Graph, cfg: &ModelConfig, raw: Var, z: Var, t: usize) -> Result<Var> {
    match cfg.prediction {
        Prediction::Epsilon => Ok(raw),
        Prediction::Velocity => {
            let sched = cfg.schedule()?;
            sched.check_level(t)?;
            let v = g.scale(raw, libm::sqrt(sched.alpha_bar(t)));
            let zs = g.scale(z, libm::sqrt(sched.noise_var(t)));
            Ok(g.add(v, zs))
        }
    }
}

fn run(
    zt: &LatentVideo,
    prompt: &PromptEncoding,
    t: usize,
    weights: &ModelWeights,
    control: Option<&mut dyn AttentionControl>,
    capture: bool,
    temporal: bool,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let mut g = Graph::new();
    let b = Bindings::constant(&mut g, weights);
    let z = g.constant(zt.tensor().clone());
    let mut none = NoControl;
    let control: &mut dyn AttentionControl = match control {
        Some(c) => c,
        None => &mut none,
    };
    let out = forward(&mut g, weights, &b, z, prompt, t, temporal, control, capture)?;
    Ok((g.value(out.eps).clone(), out.records))
}

/// Video-mode noise prediction with optional attention overrides and capture.
pub fn predict_noise(
    zt: &LatentVideo,
    prompt: &PromptEncoding,
    t: usize,
    weights: &ModelWeights,
    overrides: Option<&mut dyn AttentionControl>,
    capture: bool,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    run(zt, prompt, t, weights, overrides, capture, true)
}

/// Image-mode prediction: same network with the temporal modules bypassed,
/// so every frame of `z` is denoised independently.
pub fn image_mode_predict(
    z: &LatentVideo,
    prompt: &PromptEncoding,
    t: usize,
    weights: &ModelWeights,
    capture: bool,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    run(z, prompt, t, weights, None, capture, false)
}

impl AttentionRecord {
    /// Column `index` of the cross map: `[h_l * w_l]`.
    pub fn cross_column(&self, index: usize) -> Result<Vec<f64>> {
        let l = self.cross_map.last_dim();
        if index >= l {
            return Err(Error::Index { index, width: l });
        }
        Ok(self.cross_map.data().chunks(l).map(|row| row[index]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OverridePlan;
    use crate::rng::Rng;

    fn setup(j: usize) -> (ModelWeights, LatentVideo, PromptEncoding) {
        let w = ModelWeights::init(ModelConfig::default(), 3).unwrap();
        let mut rng = Rng::new(9, 0);
        let z = LatentVideo::new(rng.normal_tensor(&[j, 12, 8, 8]), 40).unwrap();
        let p = PromptEncoding::parse("a <S*> circle moving left on grass", 8).unwrap();
        (w, z, p)
    }

    #[test]
    fn capture_shapes() {
        let (w, z, p) = setup(2);
        let (eps, records) = predict_noise(&z, &p, 40, &w, None, true).unwrap();
        assert_eq!(eps.shape(), &[2, 12, 8, 8]);
        let blocks: usize = w.config.blocks.iter().sum();
        assert_eq!(records.len(), 2 * blocks);
        for r in &records {
            assert_eq!(r.cross_map.shape()[1], p.len());
            let (h, wl) = w.config.level_size(r.layer.level);
            assert_eq!(r.cross_map.shape()[0], h * wl);
            assert_eq!(r.self_values.shape(), &[h * wl, 32]);
            assert_eq!(r.decoder_features.is_some(), r.layer == w.config.feature_layer());
            let probs = crate::autograd::softmax_rows(&r.cross_map);
            for row in probs.data().chunks(p.len()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_override_is_exact() {
        let (w, z, p) = setup(2);
        let (eps, records) = predict_noise(&z, &p, 40, &w, None, true).unwrap();
        let mut plan = OverridePlan::default();
        for layer in w.config.layers() {
            let rs: Vec<_> = records.iter().filter(|r| r.layer == layer).collect();
            let (n, l) = (rs[0].cross_map.shape()[0], p.len());
            let mut cross = Vec::new();
            let mut vals = Vec::new();
            for r in &rs {
                cross.extend_from_slice(r.cross_map.data());
                vals.extend_from_slice(r.self_values.data());
            }
            plan.cross.insert(layer, Tensor::new(&[2, n, l], cross));
            plan.values.insert(layer, Tensor::new(&[2, n, 32], vals));
        }
        let (eps2, _) = predict_noise(&z, &p, 40, &w, Some(&mut plan), false).unwrap();
        assert_eq!(eps, eps2);
    }

    #[test]
    fn override_shape_mismatch_fails() {
        let (w, z, p) = setup(1);
        let mut plan = OverridePlan::default();
        plan.cross.insert(w.config.feature_layer(), Tensor::zeros(&[1, 3, 3]));
        assert!(predict_noise(&z, &p, 40, &w, Some(&mut plan), false).is_err());
    }

    #[test]
    fn deterministic() {
        let (w, z, p) = setup(2);
        let a = predict_noise(&z, &p, 17, &w, None, true).unwrap();
        let b = predict_noise(&z, &p, 17, &w, None, true).unwrap();
        assert_eq!(a, b);
    }

    fn zero_temporal(w: &mut ModelWeights) {
        for name in w.temporal_param_names() {
            if name.ends_with(".o") {
                let t = w.param_mut(&name);
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn image_mode_bypass_equivalence() {
        let (mut w, z, p) = setup(1);
        zero_temporal(&mut w);
        let (a, ra) = image_mode_predict(&z, &p, 40, &w, true).unwrap();
        let (b, _) = predict_noise(&z, &p, 40, &w, None, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.iter().filter(|r| r.decoder_features.is_some()).count(), 1);
    }

    #[test]
    fn zeroed_temporal_is_per_frame() {
        let (mut w, z, p) = setup(3);
        zero_temporal(&mut w);
        let (video, _) = predict_noise(&z, &p, 40, &w, None, false).unwrap();
        for f in 0..3 {
            let single = LatentVideo::new(Tensor::new(&[1, 12, 8, 8], z.tensor().outer(f).to_vec()), 40).unwrap();
            let (img, _) = image_mode_predict(&single, &p, 40, &w, false).unwrap();
            assert_eq!(img.data(), video.outer(f));
        }
    }

    #[test]
    fn temporal_mixes_frames() {
        let (w, z, p) = setup(2);
        let (video, _) = predict_noise(&z, &p, 40, &w, None, false).unwrap();
        let (img, _) = image_mode_predict(&z, &p, 40, &w, false).unwrap();
        assert!(video != img);
    }

    #[test]
    fn weight_gradient_matches_finite_difference() {
        let cfg = ModelConfig {
            dim: 8,
            mlp_dim: 8,
            text_dim: 8,
            blocks: [1, 1, 1],
            height: 4,
            width: 4,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(cfg, 1).unwrap();
        let mut rng = Rng::new(2, 0);
        let z = rng.normal_tensor(&[2, 12, 4, 4]);
        let target = rng.normal_tensor(&[2, 12, 4, 4]);
        let p = PromptEncoding::parse("a red circle", 8).unwrap();
        let names = ["dec.0.cross.k", "mid.temporal.v", "enc.0.self.q", TEXT_TABLE];
        let loss = |w: &ModelWeights, g: &mut Graph, b: &Bindings| {
            let zv = g.constant(z.clone());
            let out = forward(g, w, b, zv, &p, 30, true, &mut NoControl, false).unwrap();
            let tv = g.constant(target.clone());
            g.mse(out.eps, tv)
        };
        let mut g = Graph::new();
        let b = Bindings::bind(&mut g, &w, |n| names.contains(&n));
        let l = loss(&w, &mut g, &b);
        let grads = g.backward(l);
        for name in names {
            let analytic = grads.get(b.var(name)).unwrap();
            // Probe a few coordinates with the largest analytic magnitude.
            let mut order: Vec<usize> = (0..analytic.len()).collect();
            order.sort_by(|&a, &c| analytic.data()[c].abs().total_cmp(&analytic.data()[a].abs()));
            for &i in order.iter().take(3) {
                let h = 1e-5;
                let eval = |delta: f64| {
                    let mut w2 = w.clone();
                    w2.param_mut(name).data_mut()[i] += delta;
                    let mut g = Graph::new();
                    let b = Bindings::constant(&mut g, &w2);
                    let l = loss(&w2, &mut g, &b);
                    g.value(l).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (fd - a).abs() / a.abs().max(1e-8);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn velocity_output_converts_to_noise() {
        // z_t = sqrt(ab) x0 + sqrt(1 - ab) eps and v = sqrt(ab) eps - sqrt(1 - ab) x0.
        let mut rng = Rng::new(11, 0);
        let x0 = rng.normal_tensor(&[2, 3]);
        let eps = rng.normal_tensor(&[2, 3]);
        for prediction in [Prediction::Velocity, Prediction::Epsilon] {
            let cfg = ModelConfig { prediction, ..ModelConfig::default() };
            let sched = cfg.schedule().unwrap();
            for t in [1, 37, 100] {
                let (a, s) = (sched.alpha_bar(t).sqrt(), sched.noise_var(t).sqrt());
                let zt = x0.zip_map(&eps, |x, e| a * x + s * e);
                let raw = match prediction {
                    Prediction::Velocity => eps.zip_map(&x0, |e, x| a * e - s * x),
                    Prediction::Epsilon => eps.clone(),
                };
                let mut g = Graph::new();
                let (rv, zv) = (g.constant(raw), g.constant(zt));
                let out = apply_prediction(&mut g, &cfg, rv, zv, t).unwrap();
                for (got, want) in g.value(out).data().iter().zip(eps.data()) {
                    assert!((got - want).abs() < 1e-12, "{prediction:?} t={t}");
                }
            }
        }
    }
}
