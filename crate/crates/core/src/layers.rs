//! Building blocks shared by the pooling module and the model zoo.

use rand::Rng;

use crate::autodiff::{BatchStats, BnMode, Tape, Var};
use crate::error::Result;
use crate::param::{BufferId, ParamId, ParamStore};
use crate::scalar::{cast, Real};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// State threaded through one forward pass.
pub struct ForwardCtx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    /// Batch statistics produced in training mode, applied after the step.
    pub bn_updates: Vec<(BatchNormLayer, BatchStats<T>)>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        ForwardCtx {
            tape,
            store,
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Folds batch statistics into running averages:
/// `running ← (1 − m)·running + m·batch`.
pub fn apply_bn_updates<T: Real>(
    store: &mut ParamStore<T>,
    updates: &[(BatchNormLayer, BatchStats<T>)],
) {
    let m: T = cast(BN_MOMENTUM);
    for (layer, stats) in updates {
        for (buf, batch) in [
            (layer.running_mean, &stats.mean),
            (layer.running_var, &stats.var),
        ] {
            let running = store.buffer_mut(buf).data_mut();
            for (r, &b) in running.iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

/// U(−1/√fan_in, 1/√fan_in).
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(vec![channels]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![channels]))?,
            running_mean: store.add_buffer(
                format!("{prefix}.running_mean"),
                Tensor::zeros(vec![channels]),
            )?,
            running_var: store.add_buffer(
                format!("{prefix}.running_var"),
                Tensor::ones(vec![channels]),
            )?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let store = ctx.store;
        let mode = if ctx.training {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: store.buffer(self.running_mean).data(),
                var: store.buffer(self.running_var).data(),
            }
        };
        let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, mode, cast(BN_EPS))?;
        if let Some(stats) = stats {
            ctx.bn_updates.push((*self, stats));
        }
        Ok(y)
    }
}

/// Bias-free convolution followed by batch norm (and optionally ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBn {
    pub kernel: ParamId,
    pub bn: BatchNormLayer,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let fan_in = in_channels * kernel * kernel;
        Ok(ConvBn {
            kernel: store.add(
                format!("{prefix}.weight"),
                fan_in_uniform(&shape, fan_in, rng),
            )?,
            bn: BatchNormLayer::new(store, &format!("{prefix}.bn"), out_channels)?,
            stride,
            padding,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, relu: bool) -> Result<Var> {
        let k = ctx.param(self.kernel);
        let y = ctx.tape.conv2d(x, k, self.stride, self.padding)?;
        let y = self.bn.forward(ctx, y)?;
        if relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(
                format!("{prefix}.weight"),
                fan_in_uniform(&[in_features, out_features], in_features, rng),
            )?,
            bias: store.add(
                format!("{prefix}.bias"),
                fan_in_uniform(&[out_features], in_features, rng),
            )?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(y, b)
    }
}
