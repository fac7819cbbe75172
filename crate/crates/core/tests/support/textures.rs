//! Seeded blurred-noise textures and exact integer translations.

use losh::grid::{FlowField, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIZE: usize = 64;
pub const PAD: usize = 8;

/// Blurred uniform noise, normalized to [0, 1].
pub fn noise_texture(side: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>()).collect();
    let sigma: f64 = 1.5;
    let r = 5isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let at = |buf: &[f64], x: isize, y: isize| {
        let x = x.clamp(0, side as isize - 1) as usize;
        let y = y.clamp(0, side as isize - 1) as usize;
        buf[y * side + x]
    };
    let mut tmp = vec![0.0; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            tmp[y as usize * side + x as usize] =
                (-r..=r).map(|i| k[(i + r) as usize] * at(&raw, x + i, y)).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            out[y as usize * side + x as usize] =
                (-r..=r).map(|i| k[(i + r) as usize] * at(&tmp, x, y + i)).sum::<f64>() / norm;
        }
    }
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `src` and a copy whose content is moved by `(sx, sy)`, cropped without wrap.
pub fn shifted_pair(seed: u64, sx: isize, sy: isize) -> (GrayImage, GrayImage) {
    let side = SIZE + 2 * PAD;
    let big = noise_texture(side, seed);
    let crop = |ox: isize, oy: isize| {
        GrayImage::from_fn(SIZE, SIZE, |x, y| {
            big[(y as isize + oy) as usize * side + (x as isize + ox) as usize]
        })
        .unwrap()
    };
    let p = PAD as isize;
    (crop(p, p), crop(p - sx, p - sy))
}

pub fn interior_epe(f: &FlowField, sx: f64, sy: f64, margin: usize) -> f64 {
    let (mut err, mut n) = (0.0, 0.0);
    for y in margin..SIZE - margin {
        for x in margin..SIZE - margin {
            let (u, v) = f.at(x, y);
            err += (u - sx).hypot(v - sy);
            n += 1.0;
        }
    }
    err / n
}
