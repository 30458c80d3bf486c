use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Reconstruction MSE plus `beta` times the batch-mean closed-form KL
/// divergence from `N(μ, σ²)` to the standard normal.
pub fn vae_loss(tape: &mut Tape, recon: Var, target: Var, mu: Var, logvar: Var, beta: f64) -> Result<Var> {
    let rec = tape.mse_loss(recon, target)?;
    let kl = tape.kl_std_normal(mu, logvar)?;
    let weighted = tape.scale(kl, beta);
    tape.add(rec, weighted)
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`, averaged over rows of `N×d` inputs.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let l = tape.constant(logvar.clone());
    let k = tape.kl_std_normal(m, l)?;
    Ok(tape.value(k).item())
}
