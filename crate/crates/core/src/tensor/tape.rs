use serde::{Deserialize, Serialize};

use super::kernels::{
    batch_to_channel_major, channel_to_batch_major, col2im, gemm, im2col, ConvGeom, Mat,
};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance kept by a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Exp {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        spatial: usize,
        train: bool,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    KlStdNormal {
        mu: Var,
        logvar: Var,
    },
    RowL2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    RowSoftmax {
        x: Var,
    },
    ShrinkRenorm {
        x: Var,
        kept: Vec<bool>,
        sums: Vec<f64>,
    },
    RowEntropy {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// A tape is owned by one forward pass; create a fresh one per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const ENTROPY_EPS: f64 = 1e-12;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv_geom_of(x: &[usize], kernel: usize) -> Result<ConvGeom> {
    if x.len() != 4 {
        return Err(Error::dim("conv", x, &[0, 0, 0, 0]));
    }
    Ok(ConvGeom {
        channels: x[1],
        height: x[2],
        width: x[3],
        kernel,
        stride: 2,
        pad: 1,
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = t.clone();
        v.grad = None;
        self.leaf(v, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.data(a), m, k),
            Mat::new(self.data(b), k, n),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    /// `x · w + b` with `x: N×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::dim("linear", &sx, &sw));
        }
        if sb != [sw[1]] {
            return Err(Error::dim("linear bias", &sw, &sb));
        }
        let (n, i, o) = (sx[0], sx[1], sw[1]);
        let bias = self.data(b);
        let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            Mat::new(self.data(x), n, i),
            Mat::new(self.data(w), i, o),
            1.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.map(x, |t| t * s);
        self.push(v, Op::Scale { x, s }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::exp);
        self.push(v, Op::Exp { x }, &[x])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.map(x, |t| t.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |t| if t > 0.0 { t } else { 0.0 });
        self.push(v, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape { x }, &[x]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows(x, "transpose")?;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        Ok(self.push(t, Op::Transpose { x }, &[x]))
    }

    /// Stride-2, padding-1 cross-correlation. `w: F×C×k×k`, `b: F`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dim("conv2d weight", &sx, &sw));
        }
        let geom = conv_geom_of(&sx, sw[2])?;
        if sw[1] != geom.channels {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if geom.height % 2 != 0 || geom.width % 2 != 0 {
            return Err(Error::Contract(format!(
                "conv2d needs even spatial dims, got {sx:?}"
            )));
        }
        let f = sw[0];
        if self.shape(b) != [f] {
            return Err(Error::dim("conv2d bias", &sw, self.shape(b)));
        }
        let n = sx[0];
        let p = geom.positions();
        let mut cols = vec![0.0; geom.col_rows() * n * p];
        im2col(self.data(x), n, &geom, &mut cols);
        let mut out_cm = vec![0.0; f * n * p];
        gemm(
            Mat::new(self.data(w), f, geom.col_rows()),
            Mat::new(&cols, geom.col_rows(), n * p),
            0.0,
            &mut out_cm,
        );
        let mut out = channel_to_batch_major(&out_cm, n, f, p);
        let bias = self.data(b);
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let bv = bias[i % f];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(&[n, f, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Adjoint of [`Tape::conv2d`]'s linear map plus bias. `w: Cin×Cout×k×k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("conv_transpose2d", &sx, &sw));
        }
        if sw.len() != 4 || sw[2] != sw[3] || sw[0] != sx[1] {
            return Err(Error::dim("conv_transpose2d", &sx, &sw));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[1];
        if self.shape(b) != [cout] {
            return Err(Error::dim("conv_transpose2d bias", &sw, self.shape(b)));
        }
        let geom = ConvGeom {
            channels: cout,
            height: 2 * h,
            width: 2 * wd,
            kernel: sw[2],
            stride: 2,
            pad: 1,
        };
        if geom.out_h() != h || geom.out_w() != wd {
            return Err(Error::Contract(format!(
                "conv_transpose2d kernel {} does not double {h}×{wd}",
                sw[2]
            )));
        }
        let p = h * wd;
        let x_cm = batch_to_channel_major(self.data(x), n, cin, p);
        let mut cols = vec![0.0; geom.col_rows() * n * p];
        gemm(
            Mat::new(self.data(w), cin, geom.col_rows()).t(),
            Mat::new(&x_cm, cin, n * p),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; n * geom.image_len()];
        col2im(&cols, n, &geom, &mut out);
        let bias = self.data(b);
        let hw = geom.height * geom.width;
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let bv = bias[i % cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(&[n, cout, geom.height, geom.width], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Batch normalization over axis 1 of an `N×C` or `N×C×H×W` input.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` (momentum [`BN_MOMENTUM`], unbiased variance); eval mode uses
    /// `stats` as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::dim("batch_norm", &sx, &[0, 0]));
        }
        let (n, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm affine", &sx, self.shape(gamma)));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim("batch_norm stats", &sx, &[stats.mean.len()]));
        }
        let count = n * spatial;
        if mode == BnMode::Train && count < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm in train mode needs at least 2 values per channel, got shape {sx:?}"
            )));
        }
        if mode == BnMode::Train && n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm in train mode needs batch size >= 2, got {n}"
            )));
        }
        let xd = self.data(x);
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        mean[ch] += xd[base..base + spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        let m = mean[ch];
                        var[ch] += xd[base..base + spatial]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbias = count as f64 / (count as f64 - 1.0);
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                    stats.var[ch] =
                        (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
                (mean, var)
            }
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let t = Tensor::new(&sx, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                train: mode == BnMode::Train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = self.value(pred).numel() as f64;
        let s: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target }, &[pred, target]))
    }

    /// Batch mean of `½ Σ_j (μ_j² + exp(lv_j) − lv_j − 1)` for `N×d` inputs.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape("kl_std_normal", mu, logvar)?;
        let n = self.shape(mu)[0] as f64;
        let s: f64 = self
            .data(mu)
            .iter()
            .zip(self.data(logvar))
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::KlStdNormal { mu, logvar }, &[mu, logvar]))
    }

    fn rows(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// Scale each row to unit Euclidean norm (norm floored at 1e-12).
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.rows(x, "row_l2_normalize")?;
        let xd = self.data(x);
        let norms: Vec<f64> = xd
            .chunks(m)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let out: Vec<f64> = xd
            .chunks(m)
            .zip(&norms)
            .flat_map(|(r, nm)| r.iter().map(move |v| v / nm))
            .collect();
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::RowL2Normalize { x, norms }, &[x]))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.rows(x, "row_softmax")?;
        let mut out = Vec::with_capacity(n * m);
        for r in self.data(x).chunks(m) {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / z));
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::RowSoftmax { x }, &[x]))
    }

    /// Hard shrinkage (entries `<= lambda` zeroed) followed by L1 row
    /// renormalization. Rows that shrink to all zeros keep their original
    /// entries; the returned flags mark those rows.
    pub fn shrink_renorm(&mut self, x: Var, lambda: f64) -> Result<(Var, Vec<bool>)> {
        let (n, m) = self.rows(x, "shrink_renorm")?;
        let xd = self.data(x);
        let mut kept = vec![false; n * m];
        let mut sums = vec![0.0; n];
        let mut fallback = vec![false; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let r = &xd[i * m..(i + 1) * m];
            let mut s: f64 = r.iter().filter(|&&v| v > lambda).sum();
            let keep_all = s <= 0.0;
            if keep_all {
                fallback[i] = true;
                s = r.iter().sum();
            }
            if s <= 0.0 {
                return Err(Error::Contract(format!(
                    "shrink_renorm row {i} has no positive mass"
                )));
            }
            sums[i] = s;
            for j in 0..m {
                if keep_all || r[j] > lambda {
                    kept[i * m + j] = true;
                    out[i * m + j] = r[j] / s;
                }
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        let v = self.push(t, Op::ShrinkRenorm { x, kept, sums }, &[x]);
        Ok((v, fallback))
    }

    /// Mean over rows of `−Σ_j w_j ln(w_j + 1e-12)`.
    pub fn row_entropy(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.rows(x, "row_entropy")?;
        let s: f64 = self
            .data(x)
            .iter()
            .map(|w| -w * (w + ENTROPY_EPS).ln())
            .sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::RowEntropy { x }, &[x]))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate across
    /// every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(Mat::new(g, m, n), Mat::new(self.data(*b), k, n).t(), 0.0, &mut da);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(Mat::new(self.data(*a), m, k).t(), Mat::new(g, m, n), 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[1];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(Mat::new(g, n, o), Mat::new(self.data(*w), i, o).t(), 0.0, &mut dx);
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; i * o];
                    gemm(Mat::new(self.data(*x), n, i).t(), Mat::new(g, n, o), 0.0, &mut dw);
                    acc(*w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(bd).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(ad).map(|(g, x)| g * x).collect());
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Exp { x } => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                let d = g
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                acc(*x, d);
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let f = self.shape(*w)[0];
                let p = geom.positions();
                let g_cm = batch_to_channel_major(g, n, f, p);
                if self.wants(*b) {
                    let db = g_cm.chunks(n * p).map(|r| r.iter().sum()).collect();
                    acc(*b, db);
                }
                if self.wants(*w) {
                    let mut cols = vec![0.0; geom.col_rows() * n * p];
                    im2col(self.data(*x), n, geom, &mut cols);
                    let mut dw = vec![0.0; f * geom.col_rows()];
                    gemm(
                        Mat::new(&g_cm, f, n * p),
                        Mat::new(&cols, geom.col_rows(), n * p).t(),
                        0.0,
                        &mut dw,
                    );
                    acc(*w, dw);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; geom.col_rows() * n * p];
                    gemm(
                        Mat::new(self.data(*w), f, geom.col_rows()).t(),
                        Mat::new(&g_cm, f, n * p),
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; n * geom.image_len()];
                    col2im(&dcols, n, geom, &mut dx);
                    acc(*x, dx);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let (n, cin) = (sx[0], sx[1]);
                let p = sx[2] * sx[3];
                let cout = geom.channels;
                if self.wants(*b) {
                    let hw = geom.height * geom.width;
                    let mut db = vec![0.0; cout];
                    for (i, chunk) in g.chunks(hw).enumerate() {
                        db[i % cout] += chunk.iter().sum::<f64>();
                    }
                    acc(*b, db);
                }
                let mut dcols = vec![0.0; geom.col_rows() * n * p];
                im2col(g, n, geom, &mut dcols);
                if self.wants(*w) {
                    let x_cm = batch_to_channel_major(self.data(*x), n, cin, p);
                    let mut dw = vec![0.0; cin * geom.col_rows()];
                    gemm(
                        Mat::new(&x_cm, cin, n * p),
                        Mat::new(&dcols, geom.col_rows(), n * p).t(),
                        0.0,
                        &mut dw,
                    );
                    acc(*w, dw);
                }
                if self.wants(*x) {
                    let mut dx_cm = vec![0.0; cin * n * p];
                    gemm(
                        Mat::new(self.data(*w), cin, geom.col_rows()),
                        Mat::new(&dcols, geom.col_rows(), n * p),
                        0.0,
                        &mut dx_cm,
                    );
                    acc(*x, channel_to_batch_major(&dx_cm, n, cin, p));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                train,
            } => {
                let sx = self.shape(*x);
                let (n, c) = (sx[0], sx[1]);
                let sp = *spatial;
                let count = (n * sp) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * sp;
                        for i in base..base + sp {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gm = self.data(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * sp;
                            let k = gm[ch] * inv_std[ch];
                            for i in base..base + sp {
                                dx[i] = if *train {
                                    k * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Mse { pred, target } => {
                let (pd, td) = (self.data(*pred), self.data(*target));
                let k = 2.0 * g[0] / pd.len() as f64;
                acc(*pred, pd.iter().zip(td).map(|(p, t)| k * (p - t)).collect());
                acc(*target, pd.iter().zip(td).map(|(p, t)| -k * (p - t)).collect());
            }
            Op::KlStdNormal { mu, logvar } => {
                let n = self.shape(*mu)[0] as f64;
                let k = g[0] / n;
                acc(*mu, self.data(*mu).iter().map(|m| k * m).collect());
                acc(
                    *logvar,
                    self.data(*logvar)
                        .iter()
                        .map(|lv| k * 0.5 * (lv.exp() - 1.0))
                        .collect(),
                );
            }
            Op::RowL2Normalize { x, norms } => {
                let m = self.shape(*x)[1];
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for (i, nm) in norms.iter().enumerate() {
                    let r = i * m..(i + 1) * m;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        dx[j] = (g[j] - y[j] * dot) / nm;
                    }
                }
                acc(*x, dx);
            }
            Op::RowSoftmax { x } => {
                let m = self.shape(*x)[1];
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for (gr, (yr, dr)) in g.chunks(m).zip(y.chunks(m).zip(dx.chunks_mut(m))) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::ShrinkRenorm { x, kept, sums } => {
                let m = self.shape(*x)[1];
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for (i, s) in sums.iter().enumerate() {
                    let r = i * m..(i + 1) * m;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        if kept[j] {
                            dx[j] = (g[j] - dot) / s;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::RowEntropy { x } => {
                let n = self.shape(*x)[0] as f64;
                let k = g[0] / n;
                acc(
                    *x,
                    self.data(*x)
                        .iter()
                        .map(|w| -k * ((w + ENTROPY_EPS).ln() + w / (w + ENTROPY_EPS)))
                        .collect(),
                );
            }
        }
        Ok(())
    }
}
