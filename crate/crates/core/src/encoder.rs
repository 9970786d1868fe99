//! Proxy image encoder used for pixel-domain rewards and evaluation.
//!
//! Three stride-2 3x3 convolutions (3 -> 16 -> 32 -> 32, SiLU), mean pooling
//! and a linear projection to a unit-norm 32-d embedding. A linear colour
//! head on top of the embedding recovers the subject's primary colour. It is
//! trained once, contrastively: two renders of the same appearance are
//! positives, every other appearance in the batch is a negative.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{streams, Rng};
use crate::synth::{self, Appearance, Placement};
use crate::tensor::Tensor;

pub const ENCODER_VERSION: u32 = 1;
pub const EMBED_DIM: usize = 32;
const CHANNELS: [usize; 4] = [3, 16, 32, 32];
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyEncoder {
    pub version: u32,
    params: BTreeMap<String, Tensor>,
}

/// Encoder parameters placed on a graph as constants.
pub struct EncoderVars(BTreeMap<String, Var>);

impl EncoderVars {
    fn get(&self, name: &str) -> Var {
        self.0[name]
    }
}

fn layout() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in 0..3 {
        out.push((format!("conv{l}.w"), alloc::vec![9 * CHANNELS[l], CHANNELS[l + 1]]));
        out.push((format!("conv{l}.b"), alloc::vec![CHANNELS[l + 1]]));
    }
    out.push(("proj.w".into(), alloc::vec![CHANNELS[3], EMBED_DIM]));
    out.push(("proj.b".into(), alloc::vec![EMBED_DIM]));
    out.push(("color.w".into(), alloc::vec![EMBED_DIM, synth::COLOR_NAMES.len()]));
    out.push(("color.b".into(), alloc::vec![synth::COLOR_NAMES.len()]));
    out
}

/// Element offset of `(b, c, y, x)` for an input stored with the given strides.
#[derive(Clone, Copy)]
struct Strides {
    b: usize,
    c: usize,
    y: usize,
    x: usize,
}

/// Gathers 3x3 stride-2 patches (zero padded) into `[B, Ho * Wo, 9 * C]`,
/// columns ordered `(ky, kx, c)`.
fn im2col(g: &mut Graph, x: Var, batch: usize, c: usize, h: usize, w: usize, s: Strides) -> (Var, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(batch * ho * wo * 9 * c);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (2 * oy + ky) as isize - 1;
                        let xx = (2 * ox + kx) as isize - 1;
                        for ch in 0..c {
                            if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                                idx.push(GATHER_ZERO);
                            } else {
                                idx.push((b * s.b + ch * s.c + y as usize * s.y + xx as usize * s.x) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    (g.gather(x, idx, &[batch, ho * wo, 9 * c]), ho, wo)
}

impl ProxyEncoder {
    pub fn init(seed: u64) -> Self {
        let mut rng = Rng::new(seed, streams::INIT + 10);
        let params = layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let std = 1.0 / libm::sqrt(shape[0] as f64);
                    Tensor::from_fn(&shape, |_| std * rng.normal())
                };
                (name, t)
            })
            .collect();
        Self {
            version: ENCODER_VERSION,
            params,
        }
    }

    pub fn from_params(version: u32, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = layout();
        if params.len() != expected.len() {
            return Err(Error::Config(format!("encoder expects {} tensors, got {}", expected.len(), params.len())));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::Config(format!("encoder tensor {name} missing or misshapen"))),
            }
        }
        Ok(Self { version, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        EncoderVars(
            self.params
                .iter()
                .map(|(n, t)| {
                    let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                    (n.clone(), v)
                })
                .collect(),
        )
    }

    /// `[B, 3, H, W]` images to `[B, 32]` unit embeddings.
    pub fn embed_var(&self, g: &mut Graph, vars: &EncoderVars, images: Var) -> Var {
        let s = g.shape(images).to_vec();
        assert!(s.len() == 4 && s[1] == 3, "encoder input must be [B, 3, H, W]");
        let (batch, mut h, mut w) = (s[0], s[2], s[3]);
        let mut x = images;
        let mut strides = Strides {
            b: 3 * h * w,
            c: h * w,
            y: w,
            x: 1,
        };
        for l in 0..3 {
            let c = CHANNELS[l];
            let (cols, ho, wo) = im2col(g, x, batch, c, h, w, strides);
            let y = g.matmul(cols, vars.get(&format!("conv{l}.w")));
            let y = g.add_row(y, vars.get(&format!("conv{l}.b")));
            x = g.silu(y);
            (h, w) = (ho, wo);
            let co = CHANNELS[l + 1];
            // Now [B, H*W, C]: channels innermost.
            strides = Strides {
                b: h * w * co,
                c: 1,
                y: w * co,
                x: co,
            };
        }
        let pool = g.constant(Tensor::full(&[1, h * w], 1.0 / (h * w) as f64));
        let pooled = g.matmul(pool, x);
        let pooled = g.reshape(pooled, &[batch, CHANNELS[3]]);
        let e = g.matmul(pooled, vars.get("proj.w"));
        let e = g.add_row(e, vars.get("proj.b"));
        g.l2_normalize(e, NORM_EPS)
    }

    /// Colour logits `[B, 6]` from embeddings.
    pub fn color_logits_var(&self, g: &mut Graph, vars: &EncoderVars, embeddings: Var) -> Var {
        let y = g.matmul(embeddings, vars.get("color.w"));
        g.add_row(y, vars.get("color.b"))
    }

    pub fn embed(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let e = self.embed_var(&mut g, &vars, x);
        g.value(e).clone()
    }

    /// Most likely primary colour of each image.
    pub fn classify_color(&self, images: &Tensor) -> Vec<usize> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let e = self.embed_var(&mut g, &vars, x);
        let logits = self.color_logits_var(&mut g, &vars, e);
        g.value(logits)
            .data()
            .chunks(synth::COLOR_NAMES.len())
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Multiplies `[B, 3, H, W]` images by `[B, H, W]` masks.
pub fn apply_masks(images: &Tensor, masks: &Tensor) -> Tensor {
    let s = images.shape();
    let hw = s[2] * s[3];
    Tensor::from_fn(s, |i| {
        let b = i / (3 * hw);
        images.data()[i] * masks.data()[b * hw + i % hw]
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Per-pixel noise added to training renders.
    pub pixel_noise: f64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 12,
            lr: 3e-3,
            temperature: 0.1,
            seed: 0,
            pixel_noise: 0.05,
        }
    }
}

fn random_view(app: &Appearance, rng: &mut Rng, noise: f64) -> (Tensor, Tensor) {
    let place = Placement {
        cx: 16.0 + rng.range(-6.0, 6.0),
        cy: 16.0 + rng.range(-6.0, 6.0),
        radius: rng.range(4.5, 9.0),
    };
    let scene = rng.below(synth::SCENE_NAMES.len());
    let (mut img, mask) = synth::render(app, &place, scene);
    for v in img.data_mut() {
        *v = (*v + noise * rng.normal()).clamp(0.0, 1.0);
    }
    (img, mask)
}

/// Contrastive training; returns the encoder and the per-step loss.
pub fn train_encoder(cfg: &EncoderTrainConfig) -> (ProxyEncoder, Vec<f64>) {
    let mut enc = ProxyEncoder::init(cfg.seed);
    let mut rng = Rng::new(cfg.seed, streams::TRAIN + 10);
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    let k = cfg.batch;
    for _ in 0..cfg.steps {
        let apps: Vec<Appearance> = (0..k).map(|_| Appearance::random(&mut rng, true)).collect();
        let mut imgs = Vec::with_capacity(2 * k * 3 * 32 * 32);
        let mut masks = Vec::with_capacity(2 * k * 32 * 32);
        for _ in 0..2 {
            for app in &apps {
                let (img, mask) = random_view(app, &mut rng, cfg.pixel_noise);
                imgs.extend_from_slice(img.data());
                masks.extend_from_slice(mask.data());
            }
        }
        let images = Tensor::new(&[2 * k, 3, 32, 32], imgs);
        let masks = Tensor::new(&[2 * k, 32, 32], masks);
        let input = apply_masks(&images, &masks);

        let mut g = Graph::new();
        let vars = enc.bind(&mut g, true);
        let x = g.constant(input);
        let e = enc.embed_var(&mut g, &vars, x);
        let e1 = g.slice(e, 0, k);
        let e2 = g.slice(e, k, k);
        let logits = g.matmul_nt(e1, e2);
        let logits = g.scale(logits, 1.0 / cfg.temperature);
        let targets: Vec<usize> = (0..k).collect();
        let l12 = g.cross_entropy(logits, targets.clone());
        let logits_t = g.matmul_nt(e2, e1);
        let logits_t = g.scale(logits_t, 1.0 / cfg.temperature);
        let l21 = g.cross_entropy(logits_t, targets);
        let color_logits = enc.color_logits_var(&mut g, &vars, e);
        let colors: Vec<usize> = (0..2).flat_map(|_| apps.iter().map(|a| a.primary)).collect();
        let lc = g.cross_entropy(color_logits, colors);
        let nce = g.add(l12, l21);
        let nce = g.scale(nce, 0.5);
        let loss = g.add(nce, lc);
        log.push(g.value(loss).item());
        let grads = g.backward(loss);
        opt.tick();
        let names: Vec<String> = enc.params.keys().cloned().collect();
        for name in names {
            if let Some(gr) = grads.get(vars.get(&name)) {
                let p = enc.params.get_mut(&name).unwrap();
                opt.update(&name, p, gr);
            }
        }
    }
    (enc, log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm_at_any_size() {
        let enc = ProxyEncoder::init(1);
        let mut rng = Rng::new(3, 0);
        for size in [16, 32] {
            let imgs = Tensor::from_fn(&[2, 3, size, size], |_| rng.uniform());
            let e = enc.embed(&imgs);
            assert_eq!(e.shape(), &[2, EMBED_DIM]);
            for row in e.data().chunks(EMBED_DIM) {
                assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_gradient_matches_finite_difference() {
        let enc = ProxyEncoder::init(2);
        let mut rng = Rng::new(5, 0);
        let img = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.uniform());
        let dir = Tensor::from_fn(&[EMBED_DIM], |_| rng.normal());
        let score = |x: &Tensor| {
            let e = enc.embed(x);
            e.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, false);
        let x = g.param(img.clone());
        let e = enc.embed_var(&mut g, &vars, x);
        let d = g.constant(Tensor::new(&[1, EMBED_DIM], dir.data().to_vec()));
        let p = g.mul(e, d);
        let s = g.sum(p);
        let grads = g.backward(s);
        let analytic = grads.get(x).unwrap();
        for i in [0, 100, 300, 511, 700] {
            let h = 1e-5;
            let mut a = img.clone();
            a.data_mut()[i] += h;
            let mut b = img.clone();
            b.data_mut()[i] -= h;
            let fd = (score(&a) - score(&b)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs(), "pixel {i}: {an} vs {fd}");
        }
    }

    #[test]
    fn short_training_lowers_loss() {
        let cfg = EncoderTrainConfig {
            steps: 30,
            batch: 6,
            ..EncoderTrainConfig::default()
        };
        let (_, log) = train_encoder(&cfg);
        let head: f64 = log[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = log[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
