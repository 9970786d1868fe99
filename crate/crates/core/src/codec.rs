//! Fixed linear latent codec.
//!
//! A 32x32 RGB image is cut into 4x4 patches. Each colour plane of a patch is
//! projected onto four orthogonal +-1 patterns (flat, top/bottom halves,
//! left/right halves, 2x2 checker), giving a `[12, 8, 8]` latent. The
//! patterns have norm 4, so dividing by 4 makes the projection orthonormal and
//! keeps latents near unit scale. Decoding is the exact inverse on that span,
//! so `encode(decode(z)) == z`.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const PATCH: usize = 4;
pub const LATENT_SIZE: usize = IMAGE_SIZE / PATCH;
pub const COLORS: usize = 3;
pub const BASES: usize = 4;
pub const LATENT_CHANNELS: usize = COLORS * BASES;

/// Value of basis `k` at patch offset `(dy, dx)`.
#[inline]
pub fn basis(k: usize, dy: usize, dx: usize) -> f64 {
    let top = if dy < PATCH / 2 { 1.0 } else { -1.0 };
    let left = if dx < PATCH / 2 { 1.0 } else { -1.0 };
    match k {
        0 => 1.0,
        1 => top,
        2 => left,
        _ => top * left,
    }
}

/// `[3, 32, 32]` image in `[0, 1]` to a `[12, 8, 8]` latent.
pub fn encode(image: &Tensor) -> Tensor {
    assert_eq!(image.shape(), &[COLORS, IMAGE_SIZE, IMAGE_SIZE]);
    let px = image.data();
    let mut out = Tensor::zeros(&[LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE]);
    let od = out.data_mut();
    let norm = 1.0 / PATCH as f64;
    for c in 0..COLORS {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let v = 2.0 * px[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] - 1.0;
                let (py, px_) = (y / PATCH, x / PATCH);
                for k in 0..BASES {
                    let ch = c * BASES + k;
                    od[(ch * LATENT_SIZE + py) * LATENT_SIZE + px_] +=
                        norm * basis(k, y % PATCH, x % PATCH) * v;
                }
            }
        }
    }
    out
}

/// `[12, 8, 8]` latent to a `[3, 32, 32]` image (unclamped).
pub fn decode(latent: &Tensor) -> Tensor {
    assert_eq!(latent.shape(), &[LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE]);
    let z = latent.data();
    Tensor::from_fn(&[COLORS, IMAGE_SIZE, IMAGE_SIZE], |i| {
        let c = i / (IMAGE_SIZE * IMAGE_SIZE);
        let y = (i / IMAGE_SIZE) % IMAGE_SIZE;
        let x = i % IMAGE_SIZE;
        let (py, px) = (y / PATCH, x / PATCH);
        let mut v = 0.0;
        for k in 0..BASES {
            let ch = c * BASES + k;
            v += z[(ch * LATENT_SIZE + py) * LATENT_SIZE + px] * basis(k, y % PATCH, x % PATCH);
        }
        0.5 * v / PATCH as f64 + 0.5
    })
}

/// Differentiable [`decode`] of `[J, 12, h, w]` latents into
/// `[J, 3, 4h, 4w]`; any latent grid size is accepted.
pub fn decode_var(g: &mut Graph, latents: Var) -> Var {
    let s = g.shape(latents).to_vec();
    assert!(s.len() == 4 && s[1] == LATENT_CHANNELS, "latents must be [J, 12, h, w]");
    let (j, lh, lw) = (s[0], s[2], s[3]);
    let (ih, iw) = (lh * PATCH, lw * PATCH);
    let cells = lh * lw;
    // Rows (frame, colour, cell) holding that cell's four coefficients.
    let mut idx = Vec::with_capacity(j * COLORS * cells * BASES);
    for f in 0..j {
        for c in 0..COLORS {
            for cell in 0..cells {
                for k in 0..BASES {
                    let ch = c * BASES + k;
                    idx.push(((f * LATENT_CHANNELS + ch) * cells + cell) as u32);
                }
            }
        }
    }
    let coeffs = g.gather(latents, idx, &[j * COLORS * cells, BASES]);
    let basis_mat = Tensor::from_fn(&[BASES, PATCH * PATCH], |i| {
        let (k, o) = (i / (PATCH * PATCH), i % (PATCH * PATCH));
        basis(k, o / PATCH, o % PATCH)
    });
    let basis_var = g.constant(basis_mat);
    let patches = g.matmul(coeffs, basis_var);
    let mut idx = Vec::with_capacity(j * COLORS * ih * iw);
    for f in 0..j {
        for c in 0..COLORS {
            for y in 0..ih {
                for x in 0..iw {
                    let cell = (y / PATCH) * lw + x / PATCH;
                    let row = (f * COLORS + c) * cells + cell;
                    let o = (y % PATCH) * PATCH + x % PATCH;
                    idx.push((row * PATCH * PATCH + o) as u32);
                }
            }
        }
    }
    let img = g.gather(patches, idx, &[j, COLORS, ih, iw]);
    let img = g.scale(img, 0.5 / PATCH as f64);
    g.offset(img, 0.5)
}

/// Encodes every frame of a `[J, 3, 32, 32]` stack.
pub fn encode_stack(images: &Tensor) -> Tensor {
    let j = images.shape()[0];
    let mut data = Vec::with_capacity(j * LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE);
    for f in 0..j {
        let img = Tensor::new(&[COLORS, IMAGE_SIZE, IMAGE_SIZE], images.outer(f).to_vec());
        data.extend_from_slice(encode(&img).data());
    }
    Tensor::new(&[j, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE], data)
}

pub fn decode_stack(latents: &Tensor) -> Tensor {
    let j = latents.shape()[0];
    let mut data = Vec::with_capacity(j * COLORS * IMAGE_SIZE * IMAGE_SIZE);
    for f in 0..j {
        let z = Tensor::new(&[LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE], latents.outer(f).to_vec());
        data.extend_from_slice(decode(&z).data());
    }
    Tensor::new(&[j, COLORS, IMAGE_SIZE, IMAGE_SIZE], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip_on_latent_span() {
        let z = Tensor::from_fn(&[LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE], |i| {
            libm::sin(i as f64 * 0.37) * 0.4
        });
        let back = encode(&decode(&z));
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_image_has_only_mean_coefficients() {
        let img = Tensor::full(&[3, 32, 32], 0.75);
        let z = encode(&img);
        for ch in 0..LATENT_CHANNELS {
            // 16 pixels at 2 * 0.75 - 1 = 0.5, divided by 4.
            let expect = if ch % BASES == 0 { 2.0 } else { 0.0 };
            for cell in 0..64 {
                assert!((z.data()[ch * 64 + cell] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_decode_matches_direct() {
        let z = Tensor::from_fn(&[2, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE], |i| {
            libm::cos(i as f64 * 0.11)
        });
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let img = decode_var(&mut g, zv);
        assert_eq!(g.value(img), &decode_stack(&z));
    }
}
