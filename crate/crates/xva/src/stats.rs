use serde::{Deserialize, Serialize};

/// Monte Carlo estimate with a batch-means standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Pairwise summation in index order; the result does not depend on threads.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 16 {
        return x.iter().sum();
    }
    let m = x.len() / 2;
    pairwise_sum(&x[..m]) + pairwise_sum(&x[m..])
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        pairwise_sum(x) / x.len() as f64
    }
}

/// Block boundaries splitting `n` items into at most `blocks` contiguous blocks.
pub fn block_ranges(n: usize, blocks: usize) -> Vec<std::ops::Range<usize>> {
    let b = blocks.clamp(1, n.max(1));
    (0..b).map(|j| (j * n / b)..((j + 1) * n / b)).collect()
}

/// Standard error from a set of per-block estimates of the same quantity.
pub fn se_of_blocks(block_values: &[f64]) -> f64 {
    let b = block_values.len();
    if b < 2 {
        return 0.0;
    }
    let m = mean(block_values);
    let v: f64 = block_values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (v / b as f64).sqrt()
}

/// Sample mean with batch-means standard error.
pub fn batch_means(x: &[f64], blocks: usize) -> Estimate {
    let means: Vec<f64> = block_ranges(x.len(), blocks).into_iter().map(|r| mean(&x[r])).collect();
    Estimate {
        value: mean(x),
        se: se_of_blocks(&means),
    }
}

/// Nodes and weights with `E f(Z) ~ sum w_j f(x_j)` for a standard normal `Z`.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on orthonormal Hermite polynomials, nodes from the largest down.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let s = std::f64::consts::PI.sqrt();
    let nodes = x.iter().rev().map(|v| v * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().rev().map(|v| v / s).collect();
    (nodes, weights)
}
