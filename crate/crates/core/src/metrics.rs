//! Proxy evaluation metrics.
//!
//! * proxy-I: mean cosine between the encoder embeddings of masked frames
//!   and of masked reference images.
//! * proxy-T: how well the prompt's colour and motion words can be read back
//!   from the video (colour head of the encoder, nearest-prototype motion
//!   classifier on the mask trajectory).
//! * smoothness: mean IoU of consecutive frame masks.

use alloc::vec::Vec;

use crate::encoder::{apply_masks, ProxyEncoder};
use crate::synth::{self, Appearance, Motion, Placement};
use crate::tensor::Tensor;
use crate::ttro::SubjectMask;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub proxy_t: f64,
    pub proxy_i: f64,
    pub smoothness: f64,
    /// Frames that had a non-empty mask.
    pub counted_frames: usize,
}

/// IoU of two binary masks; two empty masks count as identical.
pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        inter += f64::from(u8::from(x && y));
        union += f64::from(u8::from(x || y));
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

pub fn smoothness(masks: &Tensor) -> f64 {
    let j = masks.shape()[0];
    if j < 2 {
        return 1.0;
    }
    (1..j).map(|f| iou(masks.outer(f - 1), masks.outer(f))).sum::<f64>() / (j - 1) as f64
}

/// Per-frame mean cosine to the references over frames with foreground.
pub fn frame_similarities(frames: &Tensor, masks: &SubjectMask, reference_embeddings: &Tensor, encoder: &ProxyEncoder) -> Vec<Option<f64>> {
    let emb = encoder.embed(&apply_masks(frames, &masks.pixels));
    let e = emb.last_dim();
    let n = reference_embeddings.shape()[0];
    masks
        .counted()
        .iter()
        .enumerate()
        .map(|(f, &ok)| {
            ok.then(|| {
                let v = &emb.data()[f * e..(f + 1) * e];
                (0..n)
                    .map(|r| v.iter().zip(reference_embeddings.row(r)).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
                    / n as f64
            })
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for v in values {
        s += v;
        k += 1;
    }
    (k > 0).then(|| s / k as f64)
}

/// `(centroid x, centroid y, area)` of a binary mask, if non-empty.
fn blob(mask: &[f64], w: usize) -> Option<(f64, f64, f64)> {
    let (mut sx, mut sy, mut a) = (0.0, 0.0, 0.0);
    for (i, v) in mask.iter().enumerate() {
        if *v > 0.5 {
            sx += (i % w) as f64 + 0.5;
            sy += (i / w) as f64 + 0.5;
            a += 1.0;
        }
    }
    (a > 0.0).then(|| (sx / a, sy / a, a))
}

/// Trajectory descriptor: displacement of the first to the last non-empty
/// mask in units of the motion travel, and the log area ratio.
pub fn trajectory_features(masks: &Tensor) -> Option<[f64; 3]> {
    let (j, w) = (masks.shape()[0], masks.shape()[2]);
    let blobs: Vec<(f64, f64, f64)> = (0..j).filter_map(|f| blob(masks.outer(f), w)).collect();
    if blobs.len() < 2 {
        return None;
    }
    let (a, b) = (blobs[0], blobs[blobs.len() - 1]);
    let travel = synth::MOTION_TRAVEL;
    Some([(b.0 - a.0) / travel, (b.1 - a.1) / travel, libm::log(b.2 / a.2)])
}

/// Nearest-prototype motion classifier; prototypes come from rendering each
/// motion program on a canonical subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClassifier {
    pub prototypes: Vec<[f64; 3]>,
}

impl Default for MotionClassifier {
    fn default() -> Self {
        Self::fit()
    }
}

impl MotionClassifier {
    pub fn fit() -> Self {
        let app = Appearance {
            shape: 0,
            primary: 0,
            secondary: 1,
            pattern: 0,
        };
        let start = Placement {
            cx: 16.0,
            cy: 16.0,
            radius: 7.0,
        };
        let prototypes = Motion::ALL
            .iter()
            .map(|m| {
                let (_, masks) = synth::render_video(&app, *m, start, 0, synth::FRAMES_PER_VIDEO);
                trajectory_features(&masks).expect("canonical renders have foreground")
            })
            .collect();
        Self { prototypes }
    }

    pub fn classify(&self, masks: &Tensor) -> Option<Motion> {
        let f = trajectory_features(masks)?;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.prototypes.iter().enumerate() {
            let d: f64 = f.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Some(Motion::ALL[best])
    }
}

/// What the prompt asked for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub color: usize,
    pub motion: Motion,
}

/// Scores one generated video. `frames` is `[J, 3, 32, 32]` in `[0, 1]`.
pub fn evaluate(
    frames: &Tensor,
    masks: &SubjectMask,
    reference_embeddings: &Tensor,
    encoder: &ProxyEncoder,
    expected: Expectation,
    motions: &MotionClassifier,
) -> EvalResult {
    let sims = frame_similarities(frames, masks, reference_embeddings, encoder);
    let proxy_i = mean_of(sims.iter().flatten().copied()).unwrap_or(0.0);
    let counted = masks.counted();
    let colors = encoder.classify_color(&apply_masks(frames, &masks.pixels));
    let color_acc = mean_of(
        colors
            .iter()
            .zip(&counted)
            .filter(|(_, ok)| **ok)
            .map(|(c, _)| f64::from(u8::from(*c == expected.color))),
    )
    .unwrap_or(0.0);
    let motion_ok = f64::from(u8::from(motions.classify(&masks.pixels) == Some(expected.motion)));
    EvalResult {
        proxy_t: 0.5 * (color_acc + motion_ok),
        proxy_i,
        smoothness: smoothness(&masks.pixels),
        counted_frames: counted.iter().filter(|c| **c).count(),
    }
}

/// One-sided exact sign test p-value for "a > b" over paired samples; ties
/// are dropped.
pub fn sign_test_counts(a: &[f64], b: &[f64]) -> (usize, usize) {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    (wins, losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ttro::MaskSource;

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(iou(&[1.0, 1.0], &[1.0, 0.0]), 0.5);
        assert_eq!(iou(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn classifier_recovers_rendered_motions() {
        let clf = MotionClassifier::fit();
        let app = Appearance {
            shape: 2,
            primary: 3,
            secondary: 0,
            pattern: 1,
        };
        for m in Motion::ALL {
            let start = Placement {
                cx: 14.0,
                cy: 17.0,
                radius: 6.5,
            };
            let (_, masks) = synth::render_video(&app, m, start, 1, 16);
            assert_eq!(clf.classify(&masks), Some(m));
        }
    }

    #[test]
    fn static_video_is_smooth_and_references_score_one() {
        let subject = synth::SyntheticSubject::generate(2, 0);
        let v = &subject.views[0];
        let frames = Tensor::from_fn(&[4, 3, 32, 32], |i| v.image.data()[i % (3 * 1024)]);
        let masks = SubjectMask::from_pixels(Tensor::from_fn(&[4, 32, 32], |i| v.mask.data()[i % 1024]), MaskSource::GroundTruth).unwrap();
        assert_eq!(smoothness(&masks.pixels), 1.0);
        let enc = ProxyEncoder::init(0);
        let refs = enc.embed(&apply_masks(
            &Tensor::new(&[1, 3, 32, 32], v.image.data().to_vec()),
            &Tensor::new(&[1, 32, 32], v.mask.data().to_vec()),
        ));
        let r = evaluate(
            &frames,
            &masks,
            &refs,
            &enc,
            Expectation {
                color: 0,
                motion: Motion::Left,
            },
            &MotionClassifier::fit(),
        );
        assert!((r.proxy_i - 1.0).abs() < 1e-9);
        assert_eq!(r.smoothness, 1.0);
    }

    #[test]
    fn duplicating_frames_keeps_proxy_i() {
        let subject = synth::SyntheticSubject::generate(5, 0);
        let enc = ProxyEncoder::init(3);
        let n = subject.views.len();
        let imgs: Vec<f64> = subject.views.iter().flat_map(|v| v.image.data().to_vec()).collect();
        let msks: Vec<f64> = subject.views.iter().flat_map(|v| v.mask.data().to_vec()).collect();
        let refs = enc.embed(&apply_masks(&Tensor::new(&[1, 3, 32, 32], imgs[..3 * 1024].to_vec()), &Tensor::new(&[1, 32, 32], msks[..1024].to_vec())));
        let once = |k: usize| {
            let frames = Tensor::from_fn(&[k * n, 3, 32, 32], |i| imgs[i % (n * 3 * 1024)]);
            let masks = SubjectMask::from_pixels(Tensor::from_fn(&[k * n, 32, 32], |i| msks[i % (n * 1024)]), MaskSource::GroundTruth).unwrap();
            mean_of(frame_similarities(&frames, &masks, &refs, &enc).into_iter().flatten()).unwrap()
        };
        let single = once(1);
        for k in [2, 3] {
            assert!((once(k) - single).abs() < 1e-12, "{k} copies");
        }
    }
}
