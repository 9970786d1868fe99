//! Noise schedule, forward corruption and the ancestral reverse step.
//!
//! The reverse step is
//!
//! ```text
//! z_{t-1} = (z_t - (1 - a_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(a_t) + sigma_t * eps
//! sigma_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
//! ```
//!
//! with the `sigma_t * eps` term dropped in deterministic mode.

use alloc::string::ToString;
use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `1 - alpha_bar`, accumulated in log space so tiny betas survive.
    noise_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be positive".to_string()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("step count must be positive".to_string()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut noise_vars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        let mut log_prod = 0.0;
        for b in &betas {
            prod *= 1.0 - b;
            log_prod += libm::log1p(-b);
            alpha_bars.push(prod);
            noise_vars.push(-libm::expm1(log_prod));
        }
        Ok(Self {
            betas,
            alpha_bars,
            noise_vars,
        })
    }

    pub fn default_toy() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `1 - alpha_bar(t)`, accurate when the betas are tiny.
    pub fn noise_var(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.noise_vars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.noise_var(t - 1) / self.noise_var(t) * self.beta(t)
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::NoiseLevel {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// `J` latent frames of shape `(channels, h, w)` at noise level `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: Tensor,
    t: usize,
}

impl LatentVideo {
    /// `frames` must be `[J, channels, h, w]` with `J >= 1`.
    pub fn new(frames: Tensor, t: usize) -> Result<Self> {
        if frames.ndim() != 4 || frames.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "latent video must be [J>=1, C, h, w], got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { frames, t })
    }

    pub fn from_frames(frames: &[Tensor], t: usize) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("latent video needs at least one frame".to_string()))?;
        if first.ndim() != 3 || frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::Shape("frames must share one (C, h, w) shape".to_string()));
        }
        let mut data = Vec::with_capacity(first.len() * frames.len());
        for f in frames {
            data.extend_from_slice(f.data());
        }
        let mut shape = alloc::vec![frames.len()];
        shape.extend_from_slice(first.shape());
        Self::new(Tensor::new(&shape, data), t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn j_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    pub fn frame(&self, f: usize) -> Tensor {
        let [c, h, w] = self.frame_shape();
        Tensor::new(&[c, h, w], self.frames.outer(f).to_vec())
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn with_t(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    fn check_noise(&self, eps: &Tensor) -> Result<()> {
        if eps.shape() != self.frames.shape() {
            return Err(Error::Shape(format!(
                "noise {:?} does not match latents {:?}",
                eps.shape(),
                self.frames.shape()
            )));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`, frame by frame.
pub fn forward_diffuse(
    z0: &LatentVideo,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    sched.check_level(t)?;
    z0.check_noise(eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(sched.noise_var(t)));
    let frames = z0.frames.zip_map(eps, |z, e| a * z + b * e);
    Ok(LatentVideo { frames, t })
}

/// One reverse step from level `t` to `t - 1`. `eps_fresh` is only read when
/// `stochastic` is set.
pub fn reverse_step(
    zt: &LatentVideo,
    eps_pred: &Tensor,
    t: usize,
    eps_fresh: Option<&Tensor>,
    sched: &NoiseSchedule,
    stochastic: bool,
) -> Result<LatentVideo> {
    if t == 0 {
        return Err(Error::ReverseAtZero);
    }
    sched.check_level(t)?;
    zt.check_noise(eps_pred)?;
    let (inv_sqrt_alpha, coef) = reverse_coefficients(sched, t);
    let mut frames = zt
        .frames
        .zip_map(eps_pred, |z, e| inv_sqrt_alpha * (z - coef * e));
    if stochastic {
        let fresh = eps_fresh
            .ok_or_else(|| Error::Shape("stochastic step needs fresh noise".to_string()))?;
        zt.check_noise(fresh)?;
        frames.axpy(sched.sigma(t), fresh);
    }
    Ok(LatentVideo { frames, t: t - 1 })
}

/// `(1 / sqrt(alpha_t), (1 - alpha_t) / sqrt(1 - abar_t))`.
pub fn reverse_coefficients(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let alpha = sched.alpha(t);
    (
        1.0 / libm::sqrt(alpha),
        sched.beta(t) / libm::sqrt(sched.noise_var(t)),
    )
}

/// Deterministic reverse step on the tape, for gradients through the update.
pub fn reverse_step_var(g: &mut Graph, zt: Var, eps_pred: Var, t: usize, sched: &NoiseSchedule) -> Var {
    let (inv_sqrt_alpha, coef) = reverse_coefficients(sched, t);
    let scaled = g.scale(eps_pred, coef);
    let diff = g.sub(zt, scaled);
    g.scale(diff, inv_sqrt_alpha)
}
