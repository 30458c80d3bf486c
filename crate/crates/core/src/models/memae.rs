use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Result of addressing a memory bank with a batch of latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Addressing {
    /// `N×d` convex combinations of memory rows.
    pub z_hat: Tensor,
    /// `N×N_mem` non-negative weights, each row summing to one.
    pub weights: Tensor,
    /// Rows whose weights all fell below the threshold and kept the
    /// un-shrunk softmax instead.
    pub fallback_rows: Vec<bool>,
}

/// Cosine-similarity softmax over memory rows, hard-shrunk at `lambda` and
/// renormalized; returns `(z_hat, weights, fallback_rows)` handles.
pub fn memae_address_on_tape(
    tape: &mut Tape,
    z: Var,
    memory: Var,
    lambda: f64,
) -> Result<(Var, Var, Vec<bool>)> {
    let (zs, ms) = (tape.value(z).shape().to_vec(), tape.value(memory).shape().to_vec());
    if zs.len() != 2 || ms.len() != 2 || zs[1] != ms[1] {
        return Err(Error::dim("memae_address", &zs, &ms));
    }
    if !(0.0..=1.0 / ms[0] as f64).contains(&lambda) {
        return Err(Error::Contract(format!(
            "shrink threshold {lambda} outside [0, 1/{}]",
            ms[0]
        )));
    }
    let zn = tape.row_l2_normalize(z)?;
    let mn = tape.row_l2_normalize(memory)?;
    let mt = tape.transpose(mn)?;
    let sims = tape.matmul(zn, mt)?;
    let soft = tape.row_softmax(sims)?;
    let (weights, fallback) = if lambda > 0.0 {
        tape.shrink_renorm(soft, lambda)?
    } else {
        (soft, vec![false; zs[0]])
    };
    let z_hat = tape.matmul(weights, memory)?;
    Ok((z_hat, weights, fallback))
}

/// Tape-free version of [`memae_address_on_tape`].
pub fn memae_address(z: &Tensor, memory: &Tensor, lambda: f64) -> Result<Addressing> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let mv = tape.constant(memory.clone());
    let (z_hat, w, fallback_rows) = memae_address_on_tape(&mut tape, zv, mv, lambda)?;
    Ok(Addressing {
        z_hat: tape.value(z_hat).clone(),
        weights: tape.value(w).clone(),
        fallback_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_rows_give_uniform_weights() {
        let mem = Tensor::new(&[3, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
        let z = Tensor::new(&[1, 2], vec![1.0, -3.0]).unwrap();
        let a = memae_address(&z, &mem, 0.0025).unwrap();
        for w in a.weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((a.z_hat.data()[0] - 0.6).abs() < 1e-12);
        assert!((a.z_hat.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_threshold_is_plain_softmax() {
        let mem = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        let a = memae_address(&z, &mem, 0.0).unwrap();
        let e = std::f64::consts::E;
        assert!((a.weights.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a.weights.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((a.weights.data()[0] - 0.731).abs() < 1e-3);
    }

    #[test]
    fn threshold_outside_range_is_rejected() {
        let mem = Tensor::ones(&[4, 2]);
        let z = Tensor::ones(&[1, 2]);
        assert!(memae_address(&z, &mem, 0.3).is_err());
    }

    proptest! {
        #[test]
        fn weights_form_a_sparser_simplex(
            seed in 0u64..1000,
            slots in 2usize..40,
            lambda_frac in 0.0f64..1.0,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mem = Tensor::uniform(&[slots, 3], -1.0, 1.0, &mut rng);
            let z = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
            let lambda = lambda_frac / slots as f64;
            let plain = memae_address(&z, &mem, 0.0).unwrap();
            let shrunk = memae_address(&z, &mem, lambda).unwrap();
            for (p, s) in plain.weights.data().chunks(slots).zip(shrunk.weights.data().chunks(slots)) {
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(s.iter().all(|&w| w >= 0.0));
                let nz = |r: &[f64]| r.iter().filter(|&&w| w > 0.0).count();
                prop_assert!(nz(s) <= nz(p));
                prop_assert!(nz(s) <= slots);
            }
        }
    }
}
