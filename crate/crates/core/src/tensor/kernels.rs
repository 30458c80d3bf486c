//! Low-level dense kernels shared by the tape ops.

/// Row-major matrix view: `rows × cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            trans: !self.trans,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = beta * c + a · b` with `c` row-major `m × n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: slice lengths are checked above against the logical shapes and
    // the strides describe dense row-major (or transposed) layouts within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Window geometry of a square-kernel strided convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfold a batch of images (`n × C×H×W`) into a `C·k·k × n·P` column matrix.
pub(crate) fn im2col(src: &[f64], n: usize, g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let row_len = n * p;
    debug_assert_eq!(cols.len(), g.col_rows() * row_len);
    debug_assert_eq!(src.len(), n * g.image_len());
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let row = &mut cols[r * row_len..(r + 1) * row_len];
                for s in 0..n {
                    let img = &src[s * g.image_len() + c * g.height * g.width..];
                    let out = &mut row[s * p..(s + 1) * p];
                    for y in 0..oh {
                        let iy = (y * g.stride + ki) as isize - g.pad as isize;
                        let dst = &mut out[y * ow..(y + 1) * ow];
                        if iy < 0 || iy >= g.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let line = &img[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let ix = (x * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && (ix as usize) < g.width {
                                line[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into images. `dst` is
/// accumulated into, not overwritten.
pub(crate) fn col2im(cols: &[f64], n: usize, g: &ConvGeom, dst: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let row_len = n * p;
    debug_assert_eq!(cols.len(), g.col_rows() * row_len);
    debug_assert_eq!(dst.len(), n * g.image_len());
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let row = &cols[r * row_len..(r + 1) * row_len];
                for s in 0..n {
                    let base = s * g.image_len() + c * g.height * g.width;
                    let src = &row[s * p..(s + 1) * p];
                    for y in 0..oh {
                        let iy = (y * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let line_start = base + iy as usize * g.width;
                        for x in 0..ow {
                            let ix = (x * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                dst[line_start + ix as usize] += src[y * ow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n × c × p]` → `[c × n·p]`.
pub(crate) fn batch_to_channel_major(src: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for s in 0..n {
        for ch in 0..c {
            let from = &src[(s * c + ch) * p..(s * c + ch + 1) * p];
            out[ch * n * p + s * p..ch * n * p + (s + 1) * p].copy_from_slice(from);
        }
    }
    out
}

/// `[c × n·p]` → `[n × c × p]`.
pub(crate) fn channel_to_batch_major(src: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for s in 0..n {
        for ch in 0..c {
            let from = &src[ch * n * p + s * p..ch * n * p + (s + 1) * p];
            out[(s * c + ch) * p..(s * c + ch + 1) * p].copy_from_slice(from);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let want = naive(&a, &b, 2, 3, 4);
        let mut c = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T stored as 3×2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c2 = vec![1.0; 8];
        gemm(Mat::new(&at, 3, 2).t(), Mat::new(&b, 3, 4), 1.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 6,
            width: 4,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let n = 2;
        let x: Vec<f64> = (0..n * g.image_len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let c: Vec<f64> = (0..g.col_rows() * n * g.positions())
            .map(|i| (i as f64 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, n, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, n, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
