//! Linear-algebra checks of the bottleneck identity argument and an empirical
//! probe of trained models.
//!
//! A linear bottleneck `x ↦ (x·W1 + b1)·W2 + b2` with `W1: D×d`, `W2: d×D` can
//! only be the identity if `W1·W2 = I_D` and `b1·W2 + b2 = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{error_map, image_score};
use crate::models::Model;
use crate::synth::SampleRecord;
use crate::tensor::kernels::{gemm, Mat};
use crate::tensor::Tensor;

pub const RESIDUAL_LR: f64 = 0.01;
pub const RESIDUAL_ITERS: usize = 5000;
/// Consecutive increases of the residual that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solvability {
    /// The counting bound `d < D/2`.
    pub half_bound_blocks: bool,
    /// The rank bound `d < D`.
    pub rank_bound_blocks: bool,
    pub exactly_solvable: bool,
}

pub fn solvability_check(big_d: usize, d: usize) -> Solvability {
    Solvability {
        half_bound_blocks: 2 * d < big_d,
        rank_bound_blocks: d < big_d,
        exactly_solvable: d >= big_d,
    }
}

/// `W1 = [I_D | 0]`, `W2 = [I_D ; 0]` for `d ≥ D`; `None` otherwise.
pub fn identity_witness(big_d: usize, d: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if d < big_d {
        return None;
    }
    let mut w1 = vec![0.0; big_d * d];
    let mut w2 = vec![0.0; d * big_d];
    for i in 0..big_d {
        w1[i * d + i] = 1.0;
        w2[i * big_d + i] = 1.0;
    }
    Some((w1, w2))
}

/// `‖W1·W2 − I‖²_F` together with `E = W1·W2 − I`.
pub fn identity_residual(w1: &[f64], w2: &[f64], big_d: usize, d: usize) -> (f64, Vec<f64>) {
    let mut e = vec![0.0; big_d * big_d];
    gemm(Mat::new(w1, big_d, d), Mat::new(w2, d, big_d), 0.0, &mut e);
    for i in 0..big_d {
        e[i * big_d + i] -= 1.0;
    }
    (e.iter().map(|v| v * v).sum(), e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualResult {
    pub residual: f64,
    /// Eckart–Young minimum `max(D − d, 0)`.
    pub closed_form: f64,
    pub iterations: usize,
}

/// Gradient descent on `‖W1·W2 − I_D‖²_F` from a seeded random start.
pub fn identity_residual_optimize(big_d: usize, d: usize, seed: u64, iters: usize) -> Result<ResidualResult> {
    identity_residual_optimize_lr(big_d, d, seed, iters, RESIDUAL_LR)
}

pub fn identity_residual_optimize_lr(
    big_d: usize,
    d: usize,
    seed: u64,
    iters: usize,
    lr: f64,
) -> Result<ResidualResult> {
    if big_d == 0 || d == 0 {
        return Err(Error::Contract(format!("D={big_d} and d={d} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (big_d as f64).sqrt();
    let mut w1: Vec<f64> = (0..big_d * d).map(|_| rng.random_range(-scale..scale)).collect();
    let mut w2: Vec<f64> = (0..d * big_d).map(|_| rng.random_range(-scale..scale)).collect();
    let mut g1 = vec![0.0; w1.len()];
    let mut g2 = vec![0.0; w2.len()];
    let (mut residual, mut e) = identity_residual(&w1, &w2, big_d, d);
    let mut rising = 0;
    for _ in 0..iters {
        // dL/dW1 = 2·E·W2ᵀ, dL/dW2 = 2·W1ᵀ·E
        gemm(Mat::new(&e, big_d, big_d), Mat::new(&w2, d, big_d).t(), 0.0, &mut g1);
        gemm(Mat::new(&w1, big_d, d).t(), Mat::new(&e, big_d, big_d), 0.0, &mut g2);
        for (w, g) in w1.iter_mut().zip(&g1) {
            *w -= lr * 2.0 * g;
        }
        for (w, g) in w2.iter_mut().zip(&g2) {
            *w -= lr * 2.0 * g;
        }
        let (next, next_e) = identity_residual(&w1, &w2, big_d, d);
        if !next.is_finite() {
            return Err(Error::Optimization(format!("residual became {next} for D={big_d} d={d}")));
        }
        rising = if next > residual { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_WINDOW {
            return Err(Error::Optimization(format!(
                "residual rose for {DIVERGENCE_WINDOW} consecutive steps for D={big_d} d={d}"
            )));
        }
        residual = next;
        e = next_e;
    }
    Ok(ResidualResult {
        residual,
        closed_form: big_d.saturating_sub(d) as f64,
        iterations: iters,
    })
}

/// The zero biases satisfy the bias condition whatever the weights are.
pub fn bias_solution_check(big_d: usize, d: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64((big_d * 1000 + d) as u64);
    let w2: Vec<f64> = (0..d * big_d).map(|_| rng.random_range(-1.0..1.0)).collect();
    bias_residual(&vec![0.0; d], &w2, &vec![0.0; big_d], big_d).iter().all(|&v| v == 0.0)
}

/// `b1·W2 + b2`, the output of the affine bottleneck at `x = 0` once the
/// weight condition holds.
pub fn bias_residual(b1: &[f64], w2: &[f64], b2: &[f64], big_d: usize) -> Vec<f64> {
    let d = b1.len();
    let mut out = b2.to_vec();
    gemm(Mat::new(b1, 1, d), Mat::new(w2, d, big_d), 1.0, &mut out);
    out
}

/// Full affine bottleneck applied to one row vector `x` of length `D`.
pub fn affine_bottleneck(x: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let (big_d, d) = (x.len(), b1.len());
    let mut z = b1.to_vec();
    gemm(Mat::new(x, 1, big_d), Mat::new(w1, big_d, d), 1.0, &mut z);
    let mut y = b2.to_vec();
    gemm(Mat::new(&z, 1, d), Mat::new(w2, d, big_d), 1.0, &mut y);
    y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    #[serde(rename = "D")]
    pub big_d: usize,
    pub d: usize,
    pub half_bound_blocks: bool,
    pub rank_bound_blocks: bool,
    pub residual: f64,
    pub closed_form: f64,
}

/// Residuals for every `d` in `1..=max_d` and every `D` in `dims`.
pub fn verification_grid(dims: &[usize], max_d: impl Fn(usize) -> usize, seed: u64) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &big_d in dims {
        for d in 1..=max_d(big_d) {
            let s = solvability_check(big_d, d);
            let r = identity_residual_optimize(big_d, d, seed, RESIDUAL_ITERS)?;
            rows.push(GridRow {
                big_d,
                d,
                half_bound_blocks: s.half_bound_blocks,
                rank_bound_blocks: s.rank_bound_blocks,
                residual: r.residual,
                closed_form: r.closed_form,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityProbe {
    pub mse_train_normal: f64,
    pub mse_test_normal: f64,
    pub mse_abnormal: f64,
    pub mse_noise: f64,
}

impl IdentityProbe {
    /// `noise > abnormal > test normal > train normal`.
    pub fn ordered(&self) -> bool {
        self.mse_noise > self.mse_abnormal
            && self.mse_abnormal > self.mse_test_normal
            && self.mse_test_normal > self.mse_train_normal
    }
}

/// Uniform-noise images in `[0, 1)`.
pub fn noise_images(count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Tensor::uniform(&[1, 1, 64, 64], 0.0, 1.0, &mut rng)).collect()
}

/// Mean reconstruction MSE of `images`.
pub fn mean_mse(model: &Model, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Contract("mean MSE of no images".into()));
    }
    let out = model.reconstruct_all(images, 64)?;
    let total: f64 = images
        .iter()
        .zip(&out)
        .map(|(x, (r, _))| error_map("", x.data(), r.data()).map(|m| image_score(&m)))
        .sum::<Result<f64>>()?;
    Ok(total / images.len() as f64)
}

fn tensors(records: &[SampleRecord]) -> Result<Vec<Tensor>> {
    records.iter().map(SampleRecord::image_tensor).collect()
}

pub fn empirical_identity_probe(
    model: &Model,
    train_normal: &[SampleRecord],
    test_normal: &[SampleRecord],
    abnormal: &[SampleRecord],
    noise: &[Tensor],
) -> Result<IdentityProbe> {
    Ok(IdentityProbe {
        mse_train_normal: mean_mse(model, &tensors(train_normal)?)?,
        mse_test_normal: mean_mse(model, &tensors(test_normal)?)?,
        mse_abnormal: mean_mse(model, &tensors(abnormal)?)?,
        mse_noise: mean_mse(model, noise)?,
    })
}
