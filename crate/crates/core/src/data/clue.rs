//! Depth-clue generators.
//!
//! The clue channel is a coarse per-pixel depth suggestion. Two sources:
//! classical SAD block matching over the rectified pair, or the ground-truth
//! map degraded by blur and noise (controllable quality for experiments).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Result};
use crate::tensor::Tensor;

/// Winner-take-all SAD block matching, left-anchored.
///
/// For every left pixel the disparity d in [0, search] minimizing the sum of
/// absolute differences over a `block` x `block` window (all channels) is
/// chosen; ties break toward smaller d. Windows are sampled with replicated
/// borders. The raw map is 3x3 median filtered, then normalized to [0, 1]
/// by dividing by `search`.
pub fn clue_blockmatch(left: &Tensor, right: &Tensor, block: usize, search: usize) -> Result<Tensor> {
    let s = left.shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(DataError::InvalidInput(format!(
            "block matching wants 3xHxW images, got {s:?}"
        )));
    }
    if right.shape() != s {
        return Err(DataError::InvalidInput(format!(
            "left {:?} and right {:?} shapes differ",
            s,
            right.shape()
        )));
    }
    if block % 2 == 0 || block < 3 {
        return Err(DataError::InvalidInput(format!(
            "block must be odd and >= 3, got {block}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    if search >= w {
        return Err(DataError::InvalidInput(format!(
            "search range {search} must be smaller than image width {w}"
        )));
    }

    let half = (block / 2) as i64;
    let l = left.data();
    let r = right.data();
    let at = |img: &[f64], c: usize, y: i64, x: i64| -> f64 {
        // replicate borders
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        img[(c * h + yy) * w + xx]
    };

    let mut disp = vec![0.0f64; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut best_d = 0usize;
            let mut best_sad = f64::INFINITY;
            for d in 0..=search {
                let mut sad = 0.0;
                for c in 0..3 {
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let lv = at(l, c, y + dy, x + dx);
                            let rv = at(r, c, y + dy, x + dx - d as i64);
                            sad += (lv - rv).abs();
                        }
                    }
                }
                if sad < best_sad {
                    best_sad = sad;
                    best_d = d;
                }
            }
            disp[y as usize * w + x as usize] = best_d as f64;
        }
    }

    let filtered = median3x3(&disp, h, w);
    let norm = if search == 0 { 1.0 } else { search as f64 };
    let data = filtered.iter().map(|d| d / norm).collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}

fn median3x3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut vals = [0.0f64; 9];
            let mut k = 0;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    vals[k] = src[yy * w + xx];
                    k += 1;
                }
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[y as usize * w + x as usize] = vals[4];
        }
    }
    out
}

/// Box blur with replicated borders followed by clamped gaussian noise.
/// radius 0 and sigma 0 return the input unchanged.
pub fn clue_degrade(gt: &Tensor, blur_radius: usize, noise_sigma: f64, seed: u64) -> Result<Tensor> {
    let s = gt.shape().to_vec();
    if s.len() != 3 || s[0] != 1 {
        return Err(DataError::InvalidInput(format!(
            "clue_degrade wants a 1xHxW map, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut data = box_blur(gt.data(), h, w, blur_radius);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| DataError::InvalidInput(format!("bad noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Tensor::new(vec![1, h, w], data)?)
}

fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return src.to_vec();
    }
    let r = radius as i64;
    let window = (2 * radius + 1) as f64;
    // separable: horizontal pass then vertical pass
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for dx in -r..=r {
                let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                acc += src[y * w + xx];
            }
            tmp[y * w + x as usize] = acc / window;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h as i64 {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                acc += tmp[yy * w + x];
            }
            out[y as usize * w + x] = acc / window;
        }
    }
    out
}
