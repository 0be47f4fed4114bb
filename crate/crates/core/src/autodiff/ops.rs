use super::{Function, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

struct ReluFn;

impl Function for ReluFn {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
        )]
    }
}

struct SigmoidFn;

impl Function for SigmoidFn {
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            out.data().iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
        )]
    }
}

struct MulFn;

impl Function for MulFn {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| b.iter().zip(g).map(|(b, g)| b * g).collect());
        let gb = needs[1].then(|| a.iter().zip(g).map(|(a, g)| a * g).collect());
        vec![ga, gb]
    }
}

struct AddFn;

impl Function for AddFn {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct ScaleFn(f64);

impl Function for ScaleFn {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|g| g * self.0).collect())]
    }
}

struct SumFn {
    scale: f64,
}

impl Function for SumFn {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; inputs[0].numel()])]
    }
}

struct ConcatFn {
    channels: Vec<usize>,
    plane: usize,
    batch: usize,
}

impl Function for ConcatFn {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            if need {
                let mut gi = Vec::with_capacity(self.batch * c * self.plane);
                for b in 0..self.batch {
                    let start = (b * total + offset) * self.plane;
                    gi.extend_from_slice(&g[start..start + c * self.plane]);
                }
                out.push(Some(gi));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

/// Source taps for one output coordinate of a bilinear resize
/// (half-pixel centers, edge-clamped).
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(len_in: usize, factor: usize) -> Vec<Tap> {
    (0..len_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

struct UpsampleFn {
    ty: Vec<Tap>,
    tx: Vec<Tap>,
    h: usize,
    w: usize,
}

impl Function for UpsampleFn {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (self.h, self.w);
        let (ho, wo) = (self.ty.len(), self.tx.len());
        let mut gi = vec![0.0; inputs[0].numel()];
        for (src, dst) in g.chunks_exact(ho * wo).zip(gi.chunks_exact_mut(h * w)) {
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let v = src[oy * wo + ox];
                    dst[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * v;
                    dst[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * v;
                    dst[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * v;
                    dst[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * v;
                }
            }
        }
        vec![Some(gi)]
    }
}

impl Tape {
    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, func: impl Function + 'static) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| f(t.data()[i]));
        self.push(value, &[x], func)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), ReluFn)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, SigmoidFn)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, ScaleFn(factor))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "hadamard")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i]);
        Ok(self.push(value, &[a, b], MulFn))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i]);
        Ok(self.push(value, &[a, b], AddFn))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], SumFn { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel() as f64;
        let s = t.data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), &[x], SumFn { scale: 1.0 / n })
    }

    /// Concatenates N×C_i×H×W tensors along the channel axis, in list order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err!("concat_channels: empty input list"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ni, ci, hi, wi) = self.value(x).dims4()?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(shape_err!(
                    "concat_channels: {:?} does not match N={n}, H={h}, W={w}",
                    self.shape(x)
                ));
            }
            channels.push(ci);
        }
        if xs.len() == 1 {
            return Ok(first);
        }
        let plane = h * w;
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], data)?;
        Ok(self.push(
            value,
            xs,
            ConcatFn {
                channels,
                plane,
                batch: n,
            },
        ))
    }

    /// Bilinear upsampling of H and W by an integer factor, using half-pixel
    /// sample centers with edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument(
                "upsample_bilinear: factor must be at least 1".into(),
            ));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 1 {
            return Ok(x);
        }
        let ty = taps(h, factor);
        let tx = taps(w, factor);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
            for (oy, t) in ty.iter().enumerate() {
                let (r0, r1) = (&plane[t.i0 * w..][..w], &plane[t.i1 * w..][..w]);
                for (ox, s) in tx.iter().enumerate() {
                    let top = s.w0 * r0[s.i0] + s.w1 * r0[s.i1];
                    let bottom = s.w0 * r1[s.i0] + s.w1 * r1[s.i1];
                    dst[oy * wo + ox] = t.w0 * top + t.w1 * bottom;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, &[x], UpsampleFn { ty, tx, h, w }))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
