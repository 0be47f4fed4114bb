use super::{Function, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel running mean and (unbiased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }
}

struct BatchNormFn {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    training: bool,
    channels: usize,
    plane: usize,
}

impl BatchNormFn {
    fn for_each_channel(&self, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
        let n = self.xhat.len() / (self.channels * self.plane);
        for b in 0..n {
            for c in 0..self.channels {
                let start = (b * self.channels + c) * self.plane;
                f(c, start..start + self.plane);
            }
        }
    }
}

impl Function for BatchNormFn {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let c = self.channels;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        self.for_each_channel(|ch, r| {
            for i in r {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * self.xhat[i];
            }
        });
        let g_in = needs[0].then(|| {
            let mut gi = vec![0.0; g.len()];
            if self.training {
                let m = (g.len() / c) as f64;
                self.for_each_channel(|ch, r| {
                    let scale = gamma[ch] * self.inv_std[ch] / m;
                    for i in r {
                        gi[i] = scale * (m * g[i] - sum_g[ch] - self.xhat[i] * sum_gx[ch]);
                    }
                });
            } else {
                self.for_each_channel(|ch, r| {
                    let scale = gamma[ch] * self.inv_std[ch];
                    for i in r {
                        gi[i] = scale * g[i];
                    }
                });
            }
            gi
        });
        vec![g_in, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

impl Tape {
    /// Per-channel batch normalization over N×H×W.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// folded into `stats` with its momentum; in eval mode `stats` is used
    /// as-is and left untouched.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!("batch_norm: affine parameters do not match {c} channels"));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err!("batch_norm: running stats do not match {c} channels"));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("batch_norm: eps must be positive".into()));
        }
        let plane = h * w;
        let m = n * plane;
        if training && m < 2 {
            return Err(Error::DegenerateVariance(
                "training-mode batch norm over a single element per channel".into(),
            ));
        }

        let x = self.value(input).data();
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for (ch, mu) in mean.iter_mut().enumerate() {
                    let start = (b * c + ch) * plane;
                    *mu += x[start..start + plane].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * plane;
                    var[ch] += x[start..start + plane]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }

        if training {
            let mo = stats.momentum;
            let unbias = m as f64 / (m - 1) as f64;
            for ch in 0..c {
                stats.mean[ch] = (1.0 - mo) * stats.mean[ch] + mo * mean[ch];
                stats.var[ch] = (1.0 - mo) * stats.var[ch] + mo * var[ch] * unbias;
            }
        }

        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            &[input, gamma, beta],
            BatchNormFn {
                xhat,
                inv_std,
                training,
                channels: c,
                plane,
            },
        ))
    }
}
