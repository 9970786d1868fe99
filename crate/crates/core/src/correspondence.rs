//! Dense feature matching between frames.
//!
//! Feature grids are `[h, w, d]` tensors. A cost volume holds the cosine
//! similarity of every source position against every target position; the
//! matching flow sends each target position to its best source (gather
//! semantics), so warping is total and deterministic.

use alloc::string::ToString;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to norm products so zero vectors score 0 against everything.
pub const COSINE_EPS: f64 = 1e-8;

/// `values[i, j]` is the cosine between source position `i` and target
/// position `j` (row-major positions).
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub values: Tensor,
    pub source_shape: (usize, usize),
    pub target_shape: (usize, usize),
    /// Noise level of the features the volume was built from.
    pub t: usize,
}

/// Integer displacement per target position: `source = target + (dy, dx)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingFlow {
    pub displacement: Vec<[i32; 2]>,
    pub source_shape: (usize, usize),
    pub target_shape: (usize, usize),
}

impl MatchingFlow {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            displacement: alloc::vec![[0, 0]; h * w],
            source_shape: (h, w),
            target_shape: (h, w),
        }
    }

    /// Builds a flow from explicit source indices, one per target position.
    pub fn from_sources(sources: &[usize], source_shape: (usize, usize), target_shape: (usize, usize)) -> Result<Self> {
        let (th, tw) = target_shape;
        let (sh, sw) = source_shape;
        if sources.len() != th * tw {
            return Err(Error::Shape(format!("{} sources for a {th}x{tw} target", sources.len())));
        }
        let displacement = sources
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                if i >= sh * sw {
                    return Err(Error::Index { index: i, width: sh * sw });
                }
                Ok([(i / sw) as i32 - (j / tw) as i32, (i % sw) as i32 - (j % tw) as i32])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            displacement,
            source_shape,
            target_shape,
        })
    }

    /// Row-major source index matched by target position `j`.
    pub fn source_index(&self, j: usize) -> usize {
        let tw = self.target_shape.1;
        let (y, x) = ((j / tw) as i32, (j % tw) as i32);
        let [dy, dx] = self.displacement[j];
        let (sy, sx) = (y + dy, x + dx);
        let (sh, sw) = self.source_shape;
        assert!(
            sy >= 0 && sx >= 0 && (sy as usize) < sh && (sx as usize) < sw,
            "displacement leaves the source grid"
        );
        sy as usize * sw + sx as usize
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.displacement.len()).map(|j| self.source_index(j)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.displacement.iter().all(|d| *d == [0, 0])
    }
}

fn grid_dims(psi: &Tensor) -> Result<(usize, usize, usize)> {
    match *psi.shape() {
        [h, w, d] if h > 0 && w > 0 && d > 0 => Ok((h, w, d)),
        _ => Err(Error::Shape(format!("feature grid must be [h, w, d], got {:?}", psi.shape()))),
    }
}

/// Cosine cost volume from `psi_a` (source) to `psi_b` (target).
pub fn cost_volume(psi_a: &Tensor, psi_b: &Tensor, t: usize) -> Result<CostVolume> {
    let (ha, wa, da) = grid_dims(psi_a)?;
    let (hb, wb, db) = grid_dims(psi_b)?;
    if (ha, wa, da) != (hb, wb, db) {
        return Err(Error::Shape(format!(
            "cost volume between {:?} and {:?}",
            psi_a.shape(),
            psi_b.shape()
        )));
    }
    let d = da;
    let norms = |p: &Tensor| -> Vec<f64> { p.data().chunks(d).map(|r| libm::sqrt(r.iter().map(|v| v * v).sum())).collect() };
    let (na, nb) = (norms(psi_a), norms(psi_b));
    let a = Tensor::new(&[ha * wa, d], psi_a.data().to_vec());
    let b = Tensor::new(&[hb * wb, d], psi_b.data().to_vec());
    let mut values = a.matmul(&b.transpose());
    let n = hb * wb;
    for (i, row) in values.data_mut().chunks_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v /= na[i] * nb[j] + COSINE_EPS;
        }
    }
    Ok(CostVolume {
        values,
        source_shape: (ha, wa),
        target_shape: (hb, wb),
        t,
    })
}

/// Argmax over sources for every target; ties go to the smallest source index.
pub fn flow_from_cost(cost: &CostVolume) -> MatchingFlow {
    let (sh, sw) = cost.source_shape;
    let (th, tw) = cost.target_shape;
    let n_t = th * tw;
    let v = cost.values.data();
    let sources: Vec<usize> = (0..n_t)
        .map(|j| {
            let mut best = 0;
            for i in 1..sh * sw {
                if v[i * n_t + j] > v[best * n_t + j] {
                    best = i;
                }
            }
            best
        })
        .collect();
    MatchingFlow::from_sources(&sources, cost.source_shape, cost.target_shape)
        .expect("argmax sources lie in the grid")
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resample_features(psi: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w, d) = grid_dims(psi)?;
    if target_h == 0 || target_w == 0 {
        return Err(Error::Shape("resample target must be positive".to_string()));
    }
    if (h, w) == (target_h, target_w) {
        return Ok(psi.clone());
    }
    let coord = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = libm::floor(x) as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let p = psi.data();
    let mut out = Tensor::zeros(&[target_h, target_w, d]);
    for y in 0..target_h {
        let (y0, y1, fy) = coord(y, h, target_h);
        for x in 0..target_w {
            let (x0, x1, fx) = coord(x, w, target_w);
            let o = (y * target_w + x) * d;
            for c in 0..d {
                let at = |yy: usize, xx: usize| p[(yy * w + xx) * d + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.data_mut()[o + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// `out[j] = map[source(j)]` for a map laid out as `[positions, k]`
/// (or `[h, w, k]`; the leading axes are flattened).
pub fn warp(map: &Tensor, flow: &MatchingFlow) -> Result<Tensor> {
    let (sh, sw) = flow.source_shape;
    let (th, tw) = flow.target_shape;
    let n_src = sh * sw;
    if map.is_empty() || !map.len().is_multiple_of(n_src) {
        return Err(Error::Shape(format!(
            "map of shape {:?} does not fit a {sh}x{sw} source grid",
            map.shape()
        )));
    }
    let k = map.len() / n_src;
    let mut out = Vec::with_capacity(th * tw * k);
    for j in 0..th * tw {
        let i = flow.source_index(j);
        out.extend_from_slice(&map.data()[i * k..(i + 1) * k]);
    }
    let shape: Vec<usize> = if map.ndim() == 3 {
        alloc::vec![th, tw, k]
    } else if map.ndim() == 1 {
        alloc::vec![th * tw]
    } else {
        alloc::vec![th * tw, k]
    };
    Ok(Tensor::new(&shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn brute_cost(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let d = a.last_dim();
        let n = a.len() / d;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (&a.data()[i * d..(i + 1) * d], &b.data()[j * d..(j + 1) * d]);
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                out.push(dot / (nx * ny + COSINE_EPS));
            }
        }
        out
    }

    #[test]
    fn self_similarity_diagonal() {
        let a = Tensor::new(&[1, 3, 3], alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.6, 0.8, 0.0]);
        let c = cost_volume(&a, &a, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v = c.values.data()[i * 3 + j];
                if i == j {
                    assert!((v - 1.0).abs() < 1e-6);
                } else {
                    assert!(v < 1.0);
                }
            }
        }
        assert_eq!(c.values.data()[1], 0.0);
        assert!(flow_from_cost(&c).is_zero());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = Rng::new(4, 0);
        let a = rng.normal_tensor(&[4, 4, 8]);
        let b = rng.normal_tensor(&[4, 4, 8]);
        let c = cost_volume(&a, &b, 3).unwrap();
        for (x, y) in c.values.data().iter().zip(brute_cost(&a, &b)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_vectors_score_zero() {
        let a = Tensor::zeros(&[2, 2, 3]);
        let b = Tensor::full(&[2, 2, 3], 1.0);
        let c = cost_volume(&a, &b, 0).unwrap();
        assert!(c.values.data().iter().all(|v| *v == 0.0));
        assert!(cost_volume(&a, &Tensor::zeros(&[2, 3, 3]), 0).is_err());
    }

    #[test]
    fn constant_cost_maps_to_first_source() {
        let c = CostVolume {
            values: Tensor::full(&[9, 9], 0.3),
            source_shape: (3, 3),
            target_shape: (3, 3),
            t: 0,
        };
        assert_eq!(flow_from_cost(&c).sources(), alloc::vec![0; 9]);
    }

    /// Frame B is frame A moved one column right; target (y, x) pulls from (y, x - 1).
    fn shifted_pair() -> (Tensor, Tensor) {
        let (h, w, d) = (4, 6, 24);
        let a = Tensor::from_fn(&[h, w, d], |i| if i % d == i / d { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[h, w, d], |i| {
            let (pos, c) = (i / d, i % d);
            let (y, x) = (pos / w, pos % w);
            if x == 0 {
                0.0
            } else if c == y * w + x - 1 {
                1.0
            } else {
                0.0
            }
        });
        (a, b)
    }

    #[test]
    fn shifted_features_give_unit_flow() {
        let (a, b) = shifted_pair();
        let flow = flow_from_cost(&cost_volume(&a, &b, 0).unwrap());
        for y in 0..4 {
            for x in 1..6 {
                assert_eq!(flow.displacement[y * 6 + x], [0, -1]);
            }
        }
        // Warping A's mask lands on B's subject position.
        let mask_a = Tensor::from_fn(&[4, 6, 1], |i| if i % 6 == 2 { 1.0 } else { 0.0 });
        let warped = warp(&mask_a, &flow).unwrap();
        for y in 0..4 {
            assert_eq!(warped.data()[y * 6 + 3], 1.0);
            assert_eq!(warped.data()[y * 6 + 2], 0.0);
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let mut rng = Rng::new(1, 0);
        let a = rng.normal_tensor(&[3, 3, 2]);
        assert_eq!(resample_features(&a, 3, 3).unwrap(), a);
        let c = Tensor::full(&[2, 2, 1], 0.7);
        let r = resample_features(&c, 5, 3).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn resample_ramp_by_hand() {
        // Columns 0 and 1, upsampled: sample points -0.25, 0.25, 0.75, 1.25 clamp to 0, .25, .75, 1.
        let ramp = Tensor::new(&[2, 2, 1], alloc::vec![0.0, 1.0, 0.0, 1.0]);
        let r = resample_features(&ramp, 4, 4).unwrap();
        for y in 0..4 {
            assert_eq!(&r.data()[y * 4..y * 4 + 4], &[0.0, 0.25, 0.75, 1.0]);
        }
        // 2x2 averaging on the way down.
        let g = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
        let r = resample_features(&g, 2, 2).unwrap();
        assert_eq!(r.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let mut rng = Rng::new(2, 0);
        let m = rng.normal_tensor(&[3, 4, 5]);
        assert_eq!(warp(&m, &MatchingFlow::identity(3, 4)).unwrap(), m);
    }

    proptest! {
        #[test]
        fn symmetric_cost(h in 1usize..5, w in 1usize..5, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed, 0);
            let a = rng.normal_tensor(&[h, w, d]);
            let b = rng.normal_tensor(&[h, w, d]);
            let ab = cost_volume(&a, &b, 0).unwrap();
            let ba = cost_volume(&b, &a, 0).unwrap();
            let n = h * w;
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((ab.values.data()[i * n + j] - ba.values.data()[j * n + i]).abs() < 1e-6);
                    prop_assert!(ab.values.data()[i * n + j].abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn warp_is_gather(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed, 0);
            let m = Tensor::from_fn(&[h * w], |_| rng.uniform());
            let sources: Vec<usize> = (0..h * w).map(|_| rng.below(h * w)).collect();
            let flow = MatchingFlow::from_sources(&sources, (h, w), (h, w)).unwrap();
            let out = warp(&m, &flow).unwrap();
            for v in out.data() {
                prop_assert!(m.data().contains(v));
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
