//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 generator whose key is a hash of the run seed and
//! a tuple of integer tags (path, entity, time bucket, ...). Nothing depends on
//! which thread asks for a stream or in which order, so results are identical
//! for any degree of parallelism.
//!
//! Brownian increments are drawn through a dyadic bridge inside each unit time
//! interval. A grid with step `2^-L` consumes a prefix of the normals used by a
//! grid with step `2^-(L+1)`, which gives common random numbers across grid
//! refinements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) const TAG_RATE: u64 = 0x5241_5445;
pub(crate) const TAG_DEFAULT: u64 = 0x4445_4641;
pub(crate) const TAG_SUB_RATE: u64 = 0x5352_4154;
pub(crate) const TAG_SUB_DEFAULT: u64 = 0x5344_4546;

/// Finest dyadic level used when a grid point is not itself dyadic.
const MAX_LEVEL: u32 = 10;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a seed and tag tuple into a 64-bit key.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Independent generator for the given key.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let k = mix(seed, tags);
    let mut bytes = [0u8; 32];
    let mut s = k;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

#[inline]
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Integer key for an absolute time, stable across grids that share the point.
#[inline]
pub(crate) fn time_key(t: f64) -> u64 {
    (t * 1_048_576.0).round() as i64 as u64
}

fn dyadic_level(x: f64) -> Option<u32> {
    (0..=MAX_LEVEL).find(|&l| {
        let y = x * (1u64 << l) as f64;
        (y - y.round()).abs() < 1e-9
    })
}

/// Brownian motion started at 0 sampled at `rel_times` (sorted, first = 0).
///
/// `unit_rng(n)` must return the stream for the unit interval `[n, n+1]`.
pub fn brownian_at<F>(rel_times: &[f64], mut unit_rng: F, out: &mut Vec<f64>, scratch: &mut Vec<f64>)
where
    F: FnMut(u64) -> ChaCha8Rng,
{
    out.clear();
    if rel_times.is_empty() {
        return;
    }
    let last = *rel_times.last().unwrap();
    let n_units = (last - 1e-12).ceil().max(0.0) as u64;
    let mut base = 0.0;
    let mut idx = 0usize;
    // points equal to 0
    while idx < rel_times.len() && rel_times[idx] <= 1e-12 {
        out.push(0.0);
        idx += 1;
    }
    for n in 0..n_units {
        let lo = n as f64;
        let hi = lo + 1.0;
        let start = idx;
        let mut end = idx;
        while end < rel_times.len() && rel_times[end] <= hi + 1e-12 {
            end += 1;
        }
        let mut level = 0;
        for &t in &rel_times[start..end] {
            level = level.max(dyadic_level(t - lo).unwrap_or(MAX_LEVEL));
        }
        let mut rng = unit_rng(n);
        let cells = 1usize << level;
        scratch.clear();
        scratch.resize(cells + 1, 0.0);
        scratch[cells] = normal(&mut rng);
        for l in 1..=level {
            let step = cells >> l;
            let sd = (2f64.powi(-(l as i32 - 1))).sqrt() * 0.5;
            let mut j = step;
            while j < cells {
                scratch[j] = 0.5 * (scratch[j - step] + scratch[j + step]) + sd * normal(&mut rng);
                j += 2 * step;
            }
        }
        for &t in &rel_times[start..end] {
            let x = ((t - lo) * cells as f64).clamp(0.0, cells as f64);
            let j = (x.floor() as usize).min(cells - 1);
            let w = x - j as f64;
            out.push(base + scratch[j] * (1.0 - w) + scratch[j + 1] * w);
        }
        base += scratch[cells];
        idx = end;
    }
}

/// Standard normal distribution function.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}
