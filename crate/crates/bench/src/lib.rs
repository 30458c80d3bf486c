//! Deterministic inputs shared by the benchmarks.

use latent_gate::metrics::ErrorMap;
use latent_gate::synth::{generate_record, GeneratorConfig, Label, SampleRecord};
use latent_gate::tensor::Tensor;

/// Cheap deterministic pseudo-random values in `[0, 1)`.
pub fn values(n: usize, salt: u64) -> Vec<f64> {
    let mut s = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

pub fn tensor(shape: &[usize], salt: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, values(n, salt)).expect("matching length")
}

pub fn records(n: usize, label: Label) -> Vec<SampleRecord> {
    let cfg = GeneratorConfig::default();
    (0..n as u64).map(|s| generate_record(s, label, &cfg).expect("valid config")).collect()
}

/// Error maps with lesion-shaped masks for the pixel metrics.
pub fn maps_and_masks(n: usize) -> (Vec<ErrorMap>, Vec<Vec<u8>>) {
    let recs = records(n, Label::Abnormal);
    let maps = recs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let noise = values(r.image.len(), i as u64);
            let values = r.mask.iter().zip(noise).map(|(&m, e)| 0.01 * e + 0.02 * f64::from(m)).collect();
            ErrorMap { id: r.id.clone(), values }
        })
        .collect();
    (maps, recs.into_iter().map(|r| r.mask).collect())
}
