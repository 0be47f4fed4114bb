//! Parameterized building blocks: convolution, batch norm, the
//! conv→BN→ReLU block and the residual block built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamKind, ParamStore, RunningStats, Tape, Tensor, Var, BN_EPS};
use crate::error::Result;

/// Everything a layer needs during a forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub training: bool,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, training: bool) -> Self {
        Self { tape, store, training }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Seeds one independent random stream per parameter name, so a weight's
/// initial value does not depend on construction order or on which other
/// tasks exist.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// Zero-mean uniform weights with the He bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = self.rng(name);
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Odd square kernel with "same" padding.
    pub fn new(
        store: &mut ParamStore,
        init: &Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        debug_assert!(kernel % 2 == 1);
        let wname = format!("{name}.weight");
        let fan_in = in_channels * kernel * kernel;
        let w = init.he_uniform(&wname, &[out_channels, in_channels, kernel, kernel], fan_in);
        let weight = store.insert(&wname, w, ParamKind::Learnable)?;
        let bias = store.insert(
            &format!("{name}.bias"),
            Tensor::zeros(&[out_channels]),
            ParamKind::Learnable,
        )?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        let b = fw.param(self.bias);
        fw.tape.conv2d(x, w, b, self.stride, (self.kernel - 1) / 2)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let stats = RunningStats::new(channels);
        Ok(Self {
            gamma: store.insert(
                &format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Learnable,
            )?,
            beta: store.insert(
                &format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Learnable,
            )?,
            running_mean: store.insert(
                &format!("{name}.running_mean"),
                Tensor::new(vec![channels], stats.mean)?,
                ParamKind::Buffer,
            )?,
            running_var: store.insert(
                &format!("{name}.running_var"),
                Tensor::new(vec![channels], stats.var)?,
                ParamKind::Buffer,
            )?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    /// Batch statistics are used (and folded into the running buffers) only
    /// when training and the layer is not frozen; a frozen layer always
    /// normalizes with its stored statistics.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let training = fw.training && !fw.store.get(self.gamma).frozen;
        let mut stats = RunningStats {
            mean: fw.store.value(self.running_mean).data().to_vec(),
            var: fw.store.value(self.running_var).data().to_vec(),
            momentum: crate::autodiff::BN_MOMENTUM,
        };
        let g = fw.param(self.gamma);
        let b = fw.param(self.beta);
        let y = fw.tape.batch_norm(x, g, b, &mut stats, training, BN_EPS)?;
        if training {
            fw.store
                .get_mut(self.running_mean)
                .value
                .data_mut()
                .copy_from_slice(&stats.mean);
            fw.store
                .get_mut(self.running_var)
                .value
                .data_mut()
                .copy_from_slice(&stats.var);
        }
        Ok(y)
    }
}

/// Convolution followed by batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                init,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        Conv2d::param_count(in_channels, out_channels, kernel) + BatchNorm2d::param_count(out_channels)
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv.forward(fw, x)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.tape.relu(y))
    }
}

/// `R(x) = block(x) + x` with a 3×3 channel-preserving block.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub block: ConvBlock,
}

impl ResidualBlock {
    pub const KERNEL: usize = 3;

    pub fn new(store: &mut ParamStore, init: &Initializer, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            block: ConvBlock::new(store, init, name, channels, channels, Self::KERNEL, 1)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        ConvBlock::param_count(channels, channels, Self::KERNEL)
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let y = self.block.forward(fw, x)?;
        fw.tape.add(y, x)
    }
}
