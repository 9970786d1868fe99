//! The synthetic world: a closed vocabulary, procedurally drawn subjects,
//! scenes with an optional occluder, and motion programs.
//!
//! Everything renders deterministically from its parameters. Surface patterns
//! are locked to the pixel grid with 2-pixel bands so the latent codec can
//! represent them exactly.

use alloc::vec::Vec;

use crate::codec::IMAGE_SIZE;
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

pub const SPECIAL_TOKEN: &str = "<S*>";

pub const COLOR_NAMES: [&str; 6] = ["red", "blue", "yellow", "purple", "orange", "white"];
const COLOR_RGB: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.60, 0.20, 0.75],
    [1.00, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];
pub const PATTERN_NAMES: [&str; 4] = ["plain", "striped", "banded", "checkered"];
pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "diamond"];
pub const MOTION_NAMES: [&str; 5] = ["left", "right", "up", "down", "zooming"];
pub const SCENE_NAMES: [&str; 5] = ["grass", "sand", "sky", "night", "fence"];
const SCENE_RGB: [[f64; 3]; 5] = [
    [0.25, 0.55, 0.20],
    [0.85, 0.75, 0.55],
    [0.55, 0.75, 0.95],
    [0.08, 0.08, 0.22],
    [0.85, 0.75, 0.55],
];
const OCCLUDER_RGB: [f64; 3] = [0.45, 0.45, 0.45];
/// Scene index whose occluder bar covers columns `14..18`.
pub const OCCLUDED_SCENE: usize = 4;
const OCCLUDER_COLUMNS: core::ops::Range<usize> = 14..18;
/// Total travel of translating motion programs, in pixels.
pub const MOTION_TRAVEL: f64 = 12.0;
pub const FRAMES_PER_VIDEO: usize = 16;

const FUNCTION_WORDS: [&str; 3] = ["a", "moving", "on"];

/// The closed vocabulary, in token-id order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = FUNCTION_WORDS.to_vec();
    v.push(SPECIAL_TOKEN);
    v.extend(COLOR_NAMES);
    v.extend(PATTERN_NAMES);
    v.extend(SHAPE_NAMES);
    v.extend(MOTION_NAMES);
    v.extend(SCENE_NAMES);
    v
}

pub fn token_id(word: &str) -> Option<usize> {
    vocabulary().iter().position(|w| *w == word)
}

pub fn special_token_id() -> usize {
    token_id(SPECIAL_TOKEN).expect("special token is in the vocabulary")
}

pub fn color_token_ids() -> Vec<usize> {
    COLOR_NAMES.iter().map(|c| token_id(c).unwrap()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appearance {
    pub shape: usize,
    pub primary: usize,
    pub secondary: usize,
    pub pattern: usize,
}

impl Appearance {
    pub fn random(rng: &mut Rng, allow_plain: bool) -> Self {
        let primary = rng.below(COLOR_NAMES.len());
        let mut secondary = rng.below(COLOR_NAMES.len() - 1);
        if secondary >= primary {
            secondary += 1;
        }
        let pattern = if allow_plain {
            rng.below(PATTERN_NAMES.len())
        } else {
            1 + rng.below(PATTERN_NAMES.len() - 1)
        };
        Self {
            shape: rng.below(SHAPE_NAMES.len()),
            primary,
            secondary,
            pattern,
        }
    }

    pub fn class_word(&self) -> &'static str {
        SHAPE_NAMES[self.shape]
    }

    fn color_at(&self, x: usize, y: usize) -> [f64; 3] {
        let alt = match self.pattern {
            1 => (y / 2) % 2 == 1,
            2 => (x / 2) % 2 == 1,
            3 => ((y / 2) + (x / 2)) % 2 == 1,
            _ => false,
        };
        COLOR_RGB[if alt { self.secondary } else { self.primary }]
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self.shape {
            0 => u * u + v * v <= 1.0,
            1 => u.abs().max(v.abs()) <= 0.82,
            2 => (-0.95..=0.75).contains(&v) && u.abs() <= (v + 0.95) * 0.6,
            _ => u.abs() + v.abs() <= 1.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Zoom,
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Zoom];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|m| *m == self).unwrap()
    }

    pub fn word(self) -> &'static str {
        MOTION_NAMES[self.index()]
    }

    pub fn from_word(word: &str) -> Option<Self> {
        MOTION_NAMES.iter().position(|m| *m == word).map(|i| Self::ALL[i])
    }

    /// Placement at progress `s` in `[0, 1]` around a centred start.
    pub fn at(self, start: Placement, s: f64) -> Placement {
        let d = MOTION_TRAVEL * (s - 0.5);
        let mut p = start;
        match self {
            Motion::Left => p.cx -= d,
            Motion::Right => p.cx += d,
            Motion::Up => p.cy -= d,
            Motion::Down => p.cy += d,
            Motion::Zoom => p.radius *= 0.7 + 0.6 * s,
        }
        p
    }

    pub fn path(self, start: Placement, frames: usize) -> Vec<Placement> {
        (0..frames)
            .map(|f| {
                let s = if frames == 1 { 0.5 } else { f as f64 / (frames - 1) as f64 };
                self.at(start, s)
            })
            .collect()
    }
}

/// Renders one `[3, 32, 32]` image in `[0, 1]` and its `[32, 32]` binary
/// subject mask (occluded pixels excluded).
pub fn render(app: &Appearance, place: &Placement, scene: usize) -> (Tensor, Tensor) {
    let n = IMAGE_SIZE;
    let mut img = Tensor::zeros(&[3, n, n]);
    let mut mask = Tensor::zeros(&[n, n]);
    let bg = SCENE_RGB[scene];
    for y in 0..n {
        let shade = 1.0 + 0.08 * (0.5 - (y as f64 + 0.5) / n as f64);
        for x in 0..n {
            let u = (x as f64 + 0.5 - place.cx) / place.radius;
            let v = (y as f64 + 0.5 - place.cy) / place.radius;
            let occluded = scene == OCCLUDED_SCENE && OCCLUDER_COLUMNS.contains(&x);
            let rgb = if occluded {
                OCCLUDER_RGB
            } else if app.contains(u, v) {
                mask.data_mut()[y * n + x] = 1.0;
                app.color_at(x, y)
            } else {
                [bg[0] * shade, bg[1] * shade, bg[2] * shade]
            };
            for (c, val) in rgb.iter().enumerate() {
                img.data_mut()[(c * n + y) * n + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    (img, mask)
}

/// Renders a motion program: `[J, 3, 32, 32]` frames and `[J, 32, 32]` masks.
pub fn render_video(
    app: &Appearance,
    motion: Motion,
    start: Placement,
    scene: usize,
    frames: usize,
) -> (Tensor, Tensor) {
    let n = IMAGE_SIZE;
    let mut imgs = Vec::with_capacity(frames * 3 * n * n);
    let mut masks = Vec::with_capacity(frames * n * n);
    for p in motion.path(start, frames) {
        let (img, mask) = render(app, &p, scene);
        imgs.extend_from_slice(img.data());
        masks.extend_from_slice(mask.data());
    }
    (
        Tensor::new(&[frames, 3, n, n], imgs),
        Tensor::new(&[frames, n, n], masks),
    )
}

pub fn random_start(rng: &mut Rng) -> Placement {
    Placement {
        cx: 16.0 + rng.range(-3.0, 3.0),
        cy: 16.0 + rng.range(-3.0, 3.0),
        radius: rng.range(6.0, 8.0),
    }
}

/// Words of a fully described prompt: "a red striped circle moving left on grass".
pub fn describe(app: &Appearance, motion: Option<Motion>, scene: Option<usize>) -> Vec<&'static str> {
    let mut words = alloc::vec!["a", COLOR_NAMES[app.primary], PATTERN_NAMES[app.pattern], SHAPE_NAMES[app.shape]];
    push_context(&mut words, motion, scene);
    words
}

/// Words of a customized prompt: "a <S*> circle moving left on grass".
pub fn describe_custom(class_word: &'static str, motion: Option<Motion>, scene: Option<usize>) -> Vec<&'static str> {
    let mut words = alloc::vec!["a", SPECIAL_TOKEN, class_word];
    push_context(&mut words, motion, scene);
    words
}

fn push_context(words: &mut Vec<&'static str>, motion: Option<Motion>, scene: Option<usize>) {
    if let Some(m) = motion {
        words.push("moving");
        words.push(m.word());
    }
    if let Some(s) = scene {
        words.push("on");
        words.push(SCENE_NAMES[s]);
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceView {
    pub image: Tensor,
    pub mask: Tensor,
    pub scene: usize,
    pub placement: Placement,
}

/// A benchmark subject with 4 to 8 rendered reference views.
#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub id: usize,
    pub appearance: Appearance,
    pub views: Vec<ReferenceView>,
}

impl SyntheticSubject {
    pub fn generate(id: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id as u64, streams::DATA);
        let appearance = Appearance::random(&mut rng, false);
        let count = 4 + rng.below(5);
        let views = (0..count)
            .map(|_| {
                let scene = rng.below(OCCLUDED_SCENE);
                let placement = Placement {
                    cx: 16.0 + rng.range(-5.0, 5.0),
                    cy: 16.0 + rng.range(-5.0, 5.0),
                    radius: rng.range(5.5, 8.0),
                };
                let (image, mask) = render(&appearance, &placement, scene);
                ReferenceView {
                    image,
                    mask,
                    scene,
                    placement,
                }
            })
            .collect();
        Self { id, appearance, views }
    }
}

/// One benchmark generation request for a subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkPrompt {
    pub motion: Motion,
    pub scene: usize,
    pub start: Placement,
}

impl BenchmarkPrompt {
    /// Draws the `index`-th prompt of a subject's prompt set. Every fifth
    /// prompt is staged behind the occluder.
    pub fn draw(subject: usize, index: usize, seed: u64) -> Self {
        let mut rng = Rng::new(
            seed.wrapping_mul(31).wrapping_add((subject * 1009 + index) as u64),
            streams::DATA + 100,
        );
        let motion = Motion::ALL[(subject + index) % Motion::ALL.len()];
        let scene = if index % 5 == 4 {
            OCCLUDED_SCENE
        } else {
            rng.below(OCCLUDED_SCENE)
        };
        Self {
            motion,
            scene,
            start: random_start(&mut rng),
        }
    }
}
