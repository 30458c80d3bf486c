use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

pub const KNN_K: usize = 3;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const JITTER: f64 = 1e-12;

/// `ψ(n)` for a positive integer.
pub fn digamma_int(n: usize) -> f64 {
    assert!(n >= 1, "digamma of {n}");
    -EULER_GAMMA + (1..n).map(|j| 1.0 / j as f64).sum::<f64>()
}

/// `ln Γ(m / 2)` for a positive integer `m`, by the half-step recurrence.
fn ln_gamma_half(m: usize) -> f64 {
    let (mut x, mut acc) = if m % 2 == 0 {
        (1.0, 0.0)
    } else {
        (0.5, 0.5 * std::f64::consts::PI.ln())
    };
    while 2.0 * x < m as f64 {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

/// Log-volume of the Euclidean unit ball in `d` dimensions.
pub fn ln_unit_ball_volume(d: usize) -> f64 {
    0.5 * d as f64 * std::f64::consts::PI.ln() - ln_gamma_half(d + 2)
}

fn kth_distances(points: &[f64], n: usize, d: usize, k: usize) -> Vec<f64> {
    let mut buf = vec![0.0; n - 1];
    (0..n)
        .map(|i| {
            let pi = &points[i * d..(i + 1) * d];
            let mut m = 0;
            for j in (0..n).filter(|&j| j != i) {
                let pj = &points[j * d..(j + 1) * d];
                buf[m] = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
                m += 1;
            }
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect()
}

/// Kozachenko–Leonenko estimate in nats for `n` points of dimension `d`
/// stored row-major. Needs `n ≥ 10·k`. If any point has a duplicate among its
/// `k` nearest neighbours, every coordinate gets a fixed-seed jitter of
/// relative size 1e-12 and the distances are recomputed.
pub fn knn_entropy(points: &[f64], d: usize, k: usize) -> Result<f64> {
    if d == 0 || k == 0 || points.len() % d != 0 {
        return Err(Error::Contract(format!("{} values do not form points of dimension {d}", points.len())));
    }
    let n = points.len() / d;
    if n < 10 * k {
        return Err(Error::Contract(format!("knn entropy needs at least {} points, got {n}", 10 * k)));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite sample".into()));
    }
    let mut eps = kth_distances(points, n, d, k);
    if eps.iter().any(|&e| e == 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let jittered: Vec<f64> = points
            .iter()
            .map(|&v| v + JITTER * (1.0 + v.abs()) * rng.random_range(-1.0..1.0))
            .collect();
        eps = kth_distances(&jittered, n, d, k);
        if eps.iter().any(|&e| e == 0.0) {
            return Err(Error::Contract("duplicate points survive jitter".into()));
        }
    }
    let mean_log: f64 = eps.iter().map(|e| e.ln()).sum::<f64>() / n as f64;
    Ok(digamma_int(n) - digamma_int(k) + ln_unit_ball_volume(d) + d as f64 * mean_log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEntropy {
    pub d: usize,
    pub n: usize,
    pub h_hat: f64,
}

/// Encodes `images` (each `1×1×64×64`) in eval mode and estimates the entropy
/// of the pre-rectifier bottleneck codes.
pub fn latent_entropy_report(model: &Model, images: &[Tensor]) -> Result<LatentEntropy> {
    if images.is_empty() {
        return Err(Error::Contract("latent entropy of an empty split".into()));
    }
    let mut codes = Vec::with_capacity(images.len() * model.latent_dim());
    for part in images.chunks(64) {
        codes.extend_from_slice(model.encode_code(&Tensor::concat_first(part)?)?.data());
    }
    latent_entropy_report_from_codes(&codes, model.latent_dim())
}

/// Entropy estimate for row-major latent codes of width `d`.
pub fn latent_entropy_report_from_codes(codes: &[f64], d: usize) -> Result<LatentEntropy> {
    if d == 0 || codes.is_empty() || codes.len() % d != 0 {
        return Err(Error::Contract(format!("{} code values do not form rows of width {d}", codes.len())));
    }
    Ok(LatentEntropy {
        d,
        n: codes.len() / d,
        h_hat: knn_entropy(codes, d, KNN_K)?,
    })
}
