use super::{Function, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// Row-major `c = a·b + beta·c` where `a` is m×k and `b` is k×n, either of
/// which may be supplied transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the bounds above cover every index touched with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dFn {
    geo: Geometry,
}

impl Function for Conv2dFn {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (input, weight) = (inputs[0], inputs[1]);
        let geo = self.geo;
        let n = input.shape()[0];
        let c_out = weight.shape()[0];
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let in_len = geo.c_in * geo.h * geo.w;
        let out_len = c_out * cols;

        let mut g_in = needs[0].then(|| vec![0.0; input.numel()]);
        let mut g_w = needs[1].then(|| vec![0.0; weight.numel()]);
        let g_b = needs[2].then(|| {
            let mut gb = vec![0.0; c_out];
            for img in grad_output.chunks_exact(out_len) {
                for (co, plane) in img.chunks_exact(cols).enumerate() {
                    gb[co] += plane.iter().sum::<f64>();
                }
            }
            gb
        });

        let mut col = vec![0.0; if geo.is_pointwise() { 0 } else { rows * cols }];
        let mut gcol = vec![0.0; rows * cols];
        for i in 0..n {
            let img = &input.data()[i * in_len..(i + 1) * in_len];
            let gout = &grad_output[i * out_len..(i + 1) * out_len];
            if let Some(gw) = g_w.as_mut() {
                let col_ref = if geo.is_pointwise() {
                    img
                } else {
                    geo.im2col(img, &mut col);
                    &col
                };
                gemm(c_out, cols, rows, gout, false, col_ref, true, 1.0, gw);
            }
            if let Some(gi) = g_in.as_mut() {
                let dst = &mut gi[i * in_len..(i + 1) * in_len];
                if geo.is_pointwise() {
                    gemm(rows, c_out, cols, weight.data(), true, gout, false, 0.0, dst);
                } else {
                    gemm(rows, c_out, cols, weight.data(), true, gout, false, 0.0, &mut gcol);
                    geo.col2im(&gcol, dst);
                }
            }
        }
        vec![g_in, g_w, g_b]
    }
}

impl Tape {
    /// 2-D cross-correlation of an N×C_in×H×W input with a C_out×C_in×k×k
    /// kernel plus per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, wc_in, kh, kw) = self.value(weight).dims4()?;
        if wc_in != c_in {
            return Err(shape_err!("conv2d: input has {c_in} channels, weight expects {wc_in}"));
        }
        if kh != kw {
            return Err(shape_err!("conv2d: non-square kernel {kh}×{kw}"));
        }
        if self.value(bias).numel() != c_out {
            return Err(shape_err!(
                "conv2d: bias has {} entries, expected {c_out}",
                self.value(bias).numel()
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be positive"));
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(shape_err!("conv2d: kernel {k} larger than padded input {h}×{w}"));
        }
        let geo = Geometry {
            c_in,
            h,
            w,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        };
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let in_len = c_in * h * w;
        let out_len = c_out * cols;
        let mut out = vec![0.0; n * out_len];
        let mut col = vec![0.0; if geo.is_pointwise() { 0 } else { rows * cols }];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for i in 0..n {
                let img = &x[i * in_len..(i + 1) * in_len];
                let dst = &mut out[i * out_len..(i + 1) * out_len];
                for (plane, &bv) in dst.chunks_exact_mut(cols).zip(b) {
                    plane.fill(bv);
                }
                let col_ref = if geo.is_pointwise() {
                    img
                } else {
                    geo.im2col(img, &mut col);
                    &col
                };
                gemm(c_out, rows, cols, wt, false, col_ref, false, 1.0, dst);
            }
        }
        let value = Tensor::new(vec![n, c_out, geo.h_out, geo.w_out], out)?;
        Ok(self.push(value, &[input, weight, bias], Conv2dFn { geo }))
    }
}
