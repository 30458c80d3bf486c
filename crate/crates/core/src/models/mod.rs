//! The convolutional autoencoder and its latent-restricted variants.
//!
//! Topology (64×64 single-channel input):
//!
//! ```text
//! conv 1→16→32→64→64 (k4 s2 p1, BN+ReLU)      64² → 4², flatten to 1024
//! fc 1024→D→d→D→1024 (BN+ReLU)                latent Z has width d
//! deconv 64→64→32→16→1 (k4 s2 p1)             BN+ReLU except the last, which is sigmoid
//! ```
//!
//! The VAE replaces the `D→d` layer with linear μ and log σ² heads, MemAE
//! re-expresses Z as a convex combination of learned memory rows, and CeAE
//! trains on masked inputs.

mod ceae;
mod memae;
mod train;
mod vae;

pub use ceae::{ceae_mask, MaskConfig};
pub use memae::{memae_address, memae_address_on_tape, Addressing};
pub use train::{train, train_observed, training_objective, Objective, TrainConfig, TrainReport};
pub use vae::{kl_divergence, vae_loss};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnMode, RunningStats, Tape, Tensor, Var};

pub const IMAGE_SIZE: usize = 64;
const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ae,
    Vae,
    MemAe,
    CeAe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Ae, ModelKind::Vae, ModelKind::MemAe, ModelKind::CeAe];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ae => "AE",
            ModelKind::Vae => "VAE",
            ModelKind::MemAe => "MemAE",
            ModelKind::CeAe => "CeAE",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(ModelKind::Ae),
            "vae" => Ok(ModelKind::Vae),
            "memae" => Ok(ModelKind::MemAe),
            "ceae" => Ok(ModelKind::CeAe),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub bottleneck_width: usize,
    pub latent_dim: usize,
    pub decoder_channels: Vec<usize>,
}

impl ArchSpec {
    pub fn new(latent_dim: usize) -> Self {
        ArchSpec {
            input_size: IMAGE_SIZE,
            encoder_channels: vec![16, 32, 64, 64],
            kernel: 4,
            stride: 2,
            bottleneck_width: 1024,
            latent_dim,
            decoder_channels: vec![64, 32, 16, 1],
        }
    }

    pub fn with_bottleneck(mut self, width: usize) -> Self {
        self.bottleneck_width = width;
        self
    }

    /// Spatial side after the encoder.
    pub fn encoded_side(&self) -> usize {
        self.input_size >> self.encoder_channels.len()
    }

    /// Width of the flattened encoder output.
    pub fn flat_width(&self) -> usize {
        let side = self.encoded_side();
        self.encoder_channels.last().copied().unwrap_or(0) * side * side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.kernel != 4 || self.stride != 2 {
            return bad(format!(
                "only kernel 4 / stride 2 layers are supported, got {} / {}",
                self.kernel, self.stride
            ));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.decoder_channels.len() {
            return bad("encoder and decoder need the same, non-zero number of layers".into());
        }
        if self.decoder_channels.last() != Some(&1) {
            return bad("decoder must end with a single channel".into());
        }
        if self.input_size % (1 << self.encoder_channels.len()) != 0 || self.encoded_side() == 0 {
            return bad(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.encoder_channels.len()
            ));
        }
        if self.latent_dim == 0 {
            return bad("latent dimension must be at least 1".into());
        }
        if self.latent_dim > self.bottleneck_width {
            return bad(format!(
                "latent dimension {} exceeds bottleneck width {}",
                self.latent_dim, self.bottleneck_width
            ));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return bad("zero channel count".into());
        }
        Ok(())
    }
}

/// Hyperparameters of the latent-restricted variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub vae_beta: f64,
    pub memory_slots: usize,
    pub shrink_threshold: f64,
    pub entropy_weight: f64,
    pub mask: MaskConfig,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            vae_beta: 1.0,
            memory_slots: 100,
            shrink_threshold: 0.0025,
            entropy_weight: 0.0002,
            mask: MaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayer {
    pub name: String,
    pub stats: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub spec: ArchSpec,
    pub variant: VariantConfig,
    pub params: Vec<Param>,
    pub bn: Vec<BnLayer>,
}

/// Model-specific by-products of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Aux {
    None,
    Vae { mu: Tensor, logvar: Tensor },
    MemAe { weights: Tensor, fallback_rows: Vec<bool> },
    CeAe { mask: Option<Tensor> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub reconstruction: Tensor,
    pub latent: Tensor,
    /// Bottleneck activation before the rectifier; `mu` for the VAE.
    pub code: Tensor,
    pub aux: Aux,
}

/// Handles of one forward pass recorded on a tape.
pub(crate) struct Recorded {
    pub params: Vec<Var>,
    pub recon: Var,
    pub latent: Var,
    pub code: Var,
    pub vae: Option<(Var, Var)>,
    pub memory_weights: Option<(Var, Vec<bool>)>,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Initialize a model of `kind` for `spec`, deterministically from `seed`.
pub fn build_model(kind: ModelKind, spec: &ArchSpec, seed: u64) -> Result<Model> {
    build_model_with(kind, spec, VariantConfig::default(), seed)
}

pub fn build_model_with(kind: ModelKind, spec: &ArchSpec, variant: VariantConfig, seed: u64) -> Result<Model> {
    spec.validate()?;
    if kind == ModelKind::MemAe && variant.memory_slots == 0 {
        return Err(Error::InvalidSpec("MemAE needs at least one memory slot".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut bn = Vec::new();
    let push = |params: &mut Vec<Param>, name: String, tensor: Tensor| params.push(Param { name, tensor });
    let k2 = spec.kernel * spec.kernel;
    let add_bn = |params: &mut Vec<Param>, bn: &mut Vec<BnLayer>, layer: &str, c: usize| {
        params.push(Param {
            name: format!("{layer}.bn.gamma"),
            tensor: Tensor::ones(&[c]),
        });
        params.push(Param {
            name: format!("{layer}.bn.beta"),
            tensor: Tensor::zeros(&[c]),
        });
        bn.push(BnLayer {
            name: layer.to_string(),
            stats: RunningStats::new(c),
        });
    };

    let mut cin = 1;
    for (i, &c) in spec.encoder_channels.iter().enumerate() {
        let name = format!("enc{i}");
        push(&mut params, format!("{name}.w"), kaiming_uniform(&[c, cin, spec.kernel, spec.kernel], cin * k2, &mut rng));
        push(&mut params, format!("{name}.b"), Tensor::zeros(&[c]));
        add_bn(&mut params, &mut bn, &name, c);
        cin = c;
    }
    let (flat, wide, d) = (spec.flat_width(), spec.bottleneck_width, spec.latent_dim);
    let mut fc = |params: &mut Vec<Param>, bn: &mut Vec<BnLayer>, name: &str, i: usize, o: usize, norm: bool| {
        params.push(Param {
            name: format!("{name}.w"),
            tensor: kaiming_uniform(&[i, o], i, &mut rng),
        });
        params.push(Param {
            name: format!("{name}.b"),
            tensor: Tensor::zeros(&[o]),
        });
        if norm {
            add_bn(params, bn, name, o);
        }
    };
    fc(&mut params, &mut bn, "fc1", flat, wide, true);
    if kind == ModelKind::Vae {
        fc(&mut params, &mut bn, "fc_mu", wide, d, false);
        fc(&mut params, &mut bn, "fc_logvar", wide, d, false);
    } else {
        fc(&mut params, &mut bn, "fc2", wide, d, true);
    }
    fc(&mut params, &mut bn, "fc3", d, wide, true);
    fc(&mut params, &mut bn, "fc4", wide, flat, true);

    let mut cin = *spec.encoder_channels.last().expect("validated");
    let last = spec.decoder_channels.len() - 1;
    for (i, &c) in spec.decoder_channels.iter().enumerate() {
        let name = format!("dec{i}");
        // each output pixel of a stride-2, k4 transposed conv sees cin·k²/4 taps
        let fan_in = cin * k2 / (spec.stride * spec.stride);
        let w = kaiming_uniform(&[cin, c, spec.kernel, spec.kernel], fan_in, &mut rng);
        params.push(Param {
            name: format!("{name}.w"),
            tensor: w,
        });
        params.push(Param {
            name: format!("{name}.b"),
            tensor: Tensor::zeros(&[c]),
        });
        if i != last {
            add_bn(&mut params, &mut bn, &name, c);
        }
        cin = c;
    }
    if kind == ModelKind::MemAe {
        let mut mem = vec![0.0; variant.memory_slots * d];
        for row in mem.chunks_mut(d) {
            loop {
                row.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-8 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        params.push(Param {
            name: "memory".into(),
            tensor: Tensor::new(&[variant.memory_slots, d], mem)?,
        });
    }
    Ok(Model {
        kind,
        spec: spec.clone(),
        variant,
        params,
        bn,
    })
}

impl Model {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.spec.input_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::dim("model input", shape, &[shape.first().copied().unwrap_or(0), 1, s, s]));
        }
        Ok(())
    }

    /// Records a forward pass. `train_params` decides whether parameters are
    /// differentiable leaves; `noise` is the VAE reparameterization draw
    /// (ignored by other kinds, and by the VAE in eval mode).
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: BnMode,
        train_params: bool,
        noise: Option<Tensor>,
        bn: &mut [BnLayer],
    ) -> Result<Recorded> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if train_params {
                    tape.param(&p.tensor)
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        let lookup = |name: &str| -> Var {
            let i = self
                .params
                .iter()
                .position(|p| p.name == name)
                .unwrap_or_else(|| panic!("model has no parameter {name}"));
            params[i]
        };
        if bn.len() != self.bn.len() && !self.bn.is_empty() {
            return Err(Error::Contract(format!("expected {} bn layers, got {}", self.bn.len(), bn.len())));
        }
        let norm_relu = |tape: &mut Tape, bn: &mut [BnLayer], x: Var, layer: &str| -> Result<Var> {
            let i = bn.iter().position(|b| b.name == layer).expect("bn layer exists");
            let y = tape.batch_norm(
                x,
                lookup(&format!("{layer}.bn.gamma")),
                lookup(&format!("{layer}.bn.beta")),
                mode,
                &mut bn[i].stats,
            )?;
            Ok(tape.relu(y))
        };
        let norm = |tape: &mut Tape, bn: &mut [BnLayer], x: Var, layer: &str| -> Result<Var> {
            let i = bn.iter().position(|b| b.name == layer).expect("bn layer exists");
            tape.batch_norm(
                x,
                lookup(&format!("{layer}.bn.gamma")),
                lookup(&format!("{layer}.bn.beta")),
                mode,
                &mut bn[i].stats,
            )
        };

        let n = tape.value(input).shape()[0];
        let mut h = input;
        for i in 0..self.spec.encoder_channels.len() {
            let name = format!("enc{i}");
            h = tape.conv2d(h, lookup(&format!("{name}.w")), lookup(&format!("{name}.b")))?;
            h = norm_relu(tape, bn, h, &name)?;
        }
        let flat = self.spec.flat_width();
        h = tape.reshape(h, &[n, flat])?;
        h = tape.linear(h, lookup("fc1.w"), lookup("fc1.b"))?;
        h = norm_relu(tape, bn, h, "fc1")?;

        let mut vae = None;
        let mut memory_weights = None;
        let (latent, code, decoder_in) = match self.kind {
            ModelKind::Vae => {
                let mu = tape.linear(h, lookup("fc_mu.w"), lookup("fc_mu.b"))?;
                let raw = tape.linear(h, lookup("fc_logvar.w"), lookup("fc_logvar.b"))?;
                let logvar = tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
                vae = Some((mu, logvar));
                let z = match (mode, noise) {
                    (BnMode::Train, Some(eps)) => {
                        let half = tape.scale(logvar, 0.5);
                        let std = tape.exp(half);
                        let e = tape.constant(eps);
                        let spread = tape.mul(std, e)?;
                        tape.add(mu, spread)?
                    }
                    _ => mu,
                };
                (mu, mu, z)
            }
            ModelKind::MemAe => {
                let pre = tape.linear(h, lookup("fc2.w"), lookup("fc2.b"))?;
                let code = norm(tape, bn, pre, "fc2")?;
                let z = tape.relu(code);
                let (z_hat, weights, fallback) =
                    memae_address_on_tape(tape, z, lookup("memory"), self.variant.shrink_threshold)?;
                memory_weights = Some((weights, fallback));
                (z, code, z_hat)
            }
            ModelKind::Ae | ModelKind::CeAe => {
                let pre = tape.linear(h, lookup("fc2.w"), lookup("fc2.b"))?;
                let code = norm(tape, bn, pre, "fc2")?;
                let z = tape.relu(code);
                (z, code, z)
            }
        };
        h = tape.linear(decoder_in, lookup("fc3.w"), lookup("fc3.b"))?;
        h = norm_relu(tape, bn, h, "fc3")?;
        h = tape.linear(h, lookup("fc4.w"), lookup("fc4.b"))?;
        h = norm_relu(tape, bn, h, "fc4")?;
        let side = self.spec.encoded_side();
        let c0 = *self.spec.encoder_channels.last().expect("validated");
        h = tape.reshape(h, &[n, c0, side, side])?;
        let last = self.spec.decoder_channels.len() - 1;
        for i in 0..=last {
            let name = format!("dec{i}");
            h = tape.conv_transpose2d(h, lookup(&format!("{name}.w")), lookup(&format!("{name}.b")))?;
            h = if i == last {
                tape.sigmoid(h)
            } else {
                norm_relu(tape, bn, h, &name)?
            };
        }
        Ok(Recorded {
            params,
            recon: h,
            latent,
            code,
            vae,
            memory_weights,
        })
    }

    /// Eval-mode forward pass. Does not mutate the model, so a frozen model
    /// can serve concurrent callers.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        // eval mode never writes running stats
        let mut bn = self.bn.clone();
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let rec = self.record(&mut tape, x, BnMode::Eval, false, None, &mut bn)?;
        Ok(self.collect(&tape, &rec, None))
    }

    pub(crate) fn collect(&self, tape: &Tape, rec: &Recorded, mask: Option<Tensor>) -> ForwardOutput {
        let aux = match self.kind {
            ModelKind::Ae => Aux::None,
            ModelKind::Vae => {
                let (mu, lv) = rec.vae.expect("vae heads recorded");
                Aux::Vae {
                    mu: tape.value(mu).clone(),
                    logvar: tape.value(lv).clone(),
                }
            }
            ModelKind::MemAe => {
                let (w, fb) = rec.memory_weights.as_ref().expect("memory recorded");
                Aux::MemAe {
                    weights: tape.value(*w).clone(),
                    fallback_rows: fb.clone(),
                }
            }
            ModelKind::CeAe => Aux::CeAe { mask },
        };
        ForwardOutput {
            reconstruction: tape.value(rec.recon).clone(),
            latent: tape.value(rec.latent).clone(),
            code: tape.value(rec.code).clone(),
            aux,
        }
    }

    /// Eval-mode latent codes, `N×d`.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.latent)
    }

    /// Eval-mode pre-rectifier bottleneck codes, `N×d`. Unlike [`Model::encode`]
    /// these have no atom at zero, so they suit the kNN entropy estimator.
    pub fn encode_code(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.code)
    }

    /// Eval-mode reconstructions and pre-rectifier codes of single images,
    /// computed `chunk` at a time.
    pub fn reconstruct_all(&self, images: &[Tensor], chunk: usize) -> Result<Vec<(Tensor, Tensor)>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let batch = Tensor::concat_first(part)?;
            let f = self.forward(&batch)?;
            for i in 0..part.len() {
                out.push((f.reconstruction.slice_first(i), f.code.slice_first(i)));
            }
        }
        Ok(out)
    }

    pub(crate) fn sample_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Option<Tensor> {
        (self.kind == ModelKind::Vae).then(|| {
            let d = self.spec.latent_dim;
            let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(&[n, d], data).expect("n·d values")
        })
    }
}
