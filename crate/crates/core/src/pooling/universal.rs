//! Universal pooling: a per-channel network (B1) turns the feature map into
//! pooling logits, a block softmax normalizes them into weights π that sum to
//! one inside every S×S block, and the output is the π-weighted block sum (B2).

use rand::Rng;

use super::{B1Kind, B1Spec, PoolOutput};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{fan_in_uniform, BatchNormLayer, ForwardCtx};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{cast, Real};
use crate::tensor::Tensor;

/// Initialization of the B1 network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum B1Init {
    /// Every parameter (including batch-norm scales) is zero.
    Zeros,
    /// Hidden layers fan-in uniform with unit BN scale; the output layer is
    /// zero so the module starts as exact average pooling.
    Default,
}

#[derive(Debug, Clone, PartialEq)]
struct FcLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvStage {
    kernel: ParamId,
    kernel_size: usize,
    bn: BatchNormLayer,
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Fc {
        block: (usize, usize),
        layers: Vec<FcLayer>,
    },
    Conv {
        hidden: Vec<ConvStage>,
        out_kernel: ParamId,
        out_kernel_size: usize,
        out_bias: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalPool {
    spec: B1Spec,
    size: usize,
    input_shape: [usize; 3],
    groups: usize,
    net: Net,
}

impl UniversalPool {
    /// `input_shape` is `[C, H, W]` of the pooled map.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &B1Spec,
        size: usize,
        input_shape: [usize; 3],
        init: B1Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let [channels, h, w] = input_shape;
        if size == 0 || size > h || size > w {
            return Err(Error::Config(format!(
                "{prefix}: pooling size {size} does not fit {h}×{w}"
            )));
        }
        let groups = if spec.shared { 1 } else { channels };
        let zeros = init == B1Init::Zeros;
        let hidden_init =
            |shape: &[usize], fan_in: usize, rng: &mut dyn rand::RngCore| -> Tensor<T> {
                if zeros {
                    Tensor::zeros(shape.to_vec())
                } else {
                    fan_in_uniform(shape, fan_in, rng)
                }
            };

        let net = match &spec.kind {
            B1Kind::LocalFc { num_layers } | B1Kind::GlobalFc { num_layers } => {
                let block = match spec.kind {
                    B1Kind::LocalFc { .. } => (size, size),
                    _ => (h, w),
                };
                let len = block.0 * block.1;
                let hidden = spec.hidden_width.unwrap_or(match spec.kind {
                    B1Kind::LocalFc { .. } => len,
                    _ => (len / 4).max(1),
                });
                let dims: Vec<usize> = if *num_layers == 1 {
                    vec![len, len]
                } else {
                    vec![len, hidden, len]
                };
                let mut layers = Vec::new();
                for (i, pair) in dims.windows(2).enumerate() {
                    let (fan_in, fan_out) = (pair[0], pair[1]);
                    let last = i + 2 == dims.len();
                    let (wt, bt) = if last {
                        (
                            Tensor::zeros(vec![groups, fan_in, fan_out]),
                            Tensor::zeros(vec![groups, fan_out]),
                        )
                    } else {
                        (
                            hidden_init(&[groups, fan_in, fan_out], fan_in, rng),
                            hidden_init(&[groups, fan_out], fan_in, rng),
                        )
                    };
                    layers.push(FcLayer {
                        weight: store.add(format!("{prefix}.fc{}.weight", i + 1), wt)?,
                        bias: store.add(format!("{prefix}.fc{}.bias", i + 1), bt)?,
                    });
                }
                Net::Fc { block, layers }
            }
            B1Kind::GlobalConv { layers } => {
                let mut hidden = Vec::new();
                let mut in_ch = 1;
                for (i, l) in layers[..layers.len() - 1].iter().enumerate() {
                    let shape = [groups * l.channels, in_ch, l.kernel_size, l.kernel_size];
                    let fan_in = in_ch * l.kernel_size * l.kernel_size;
                    let kernel = store.add(
                        format!("{prefix}.conv{}.weight", i + 1),
                        hidden_init(&shape, fan_in, rng),
                    )?;
                    let bn = BatchNormLayer::new(
                        store,
                        &format!("{prefix}.bn{}", i + 1),
                        groups * l.channels,
                    )?;
                    if zeros {
                        store.value_mut(bn.gamma).data_mut().fill(T::zero());
                    }
                    hidden.push(ConvStage {
                        kernel,
                        kernel_size: l.kernel_size,
                        bn,
                    });
                    in_ch = l.channels;
                }
                let last = layers.last().expect("validated non-empty");
                let n = layers.len();
                let out_kernel = store.add(
                    format!("{prefix}.conv{n}.weight"),
                    Tensor::zeros(vec![groups, in_ch, last.kernel_size, last.kernel_size]),
                )?;
                let out_bias = store.add(
                    format!("{prefix}.conv{n}.bias"),
                    Tensor::zeros(vec![groups]),
                )?;
                Net::Conv {
                    hidden,
                    out_kernel,
                    out_kernel_size: last.kernel_size,
                    out_bias,
                }
            }
        };
        Ok(UniversalPool {
            spec: spec.clone(),
            size,
            input_shape,
            groups,
            net,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn spec(&self) -> &B1Spec {
        &self.spec
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Every parameter of the B1 network.
    pub fn params(&self) -> Vec<ParamId> {
        match &self.net {
            Net::Fc { layers, .. } => layers.iter().flat_map(|l| [l.weight, l.bias]).collect(),
            Net::Conv {
                hidden,
                out_kernel,
                out_bias,
                ..
            } => hidden
                .iter()
                .flat_map(|s| [s.kernel, s.bn.gamma, s.bn.beta])
                .chain([*out_kernel, *out_bias])
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<[usize; 4]> {
        let [n, c, h, w] = crate::tensor::nchw("universal_pool", shape)?;
        let [ec, eh, ew] = self.input_shape;
        let global_fc = matches!(self.spec.kind, B1Kind::GlobalFc { .. });
        if c != ec || (global_fc && (h, w) != (eh, ew)) {
            return Err(Error::invalid_shape(
                "universal_pool",
                format!(
                    "input {shape:?} incompatible with pooling module built for [C, H, W] = {:?}",
                    self.input_shape
                ),
            ));
        }
        Ok([n, c, h, w])
    }

    /// Pre-softmax pooling logits f̄, same shape as `f`.
    pub fn b1_forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, f: Var) -> Result<Var> {
        let [n, c, h, w] = self.check_input(ctx.tape.shape(f))?;
        let x = if self.spec.shared {
            ctx.tape.reshape(f, &[n * c, 1, h, w])?
        } else {
            f
        };
        let x_shape = [ctx.tape.shape(x)[0], self.groups, h, w];
        let out = match &self.net {
            Net::Fc { block, layers } => {
                let mut z = ctx.tape.blocks_to_rows(x, *block)?;
                for (i, layer) in layers.iter().enumerate() {
                    let wv = ctx.param(layer.weight);
                    let bv = ctx.param(layer.bias);
                    z = ctx.tape.batch_matmul(z, wv)?;
                    z = ctx.tape.add_bias(z, bv)?;
                    if i + 1 < layers.len() {
                        z = ctx.tape.relu(z)?;
                    }
                }
                ctx.tape.rows_to_blocks(z, x_shape, *block)?
            }
            Net::Conv {
                hidden,
                out_kernel,
                out_kernel_size,
                out_bias,
            } => {
                let mut z = x;
                for stage in hidden {
                    let k = ctx.param(stage.kernel);
                    z = ctx
                        .tape
                        .conv2d_grouped(z, k, 1, stage.kernel_size / 2, self.groups)?;
                    z = stage.bn.forward(ctx, z)?;
                    z = ctx.tape.relu(z)?;
                }
                let k = ctx.param(*out_kernel);
                z = ctx
                    .tape
                    .conv2d_grouped(z, k, 1, out_kernel_size / 2, self.groups)?;
                let b = ctx.param(*out_bias);
                ctx.tape.add_channel_bias(z, b)?
            }
        };
        if self.spec.shared {
            ctx.tape.reshape(out, &[n, c, h, w])
        } else {
            Ok(out)
        }
    }

    /// Returns the pooled map and the pooling weights π.
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, f: Var) -> Result<PoolOutput> {
        let logits = self.b1_forward(ctx, f)?;
        let pi = ctx.tape.block_softmax(logits, self.size)?;
        let output = ctx.tape.block_weighted_sum(pi, f, self.size)?;
        Ok(PoolOutput {
            output,
            weights: Some(pi),
        })
    }

    /// Sets a one-layer FC module to `alpha · I` with zero bias, so the
    /// logits are the scaled input itself.
    pub fn set_scaled_identity<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        alpha: f64,
    ) -> Result<()> {
        let Net::Fc { layers, .. } = &self.net else {
            return Err(Error::InvalidArgument(
                "identity setting needs an FC pooling module".into(),
            ));
        };
        let [layer] = layers.as_slice() else {
            return Err(Error::InvalidArgument(
                "identity setting needs a one-layer FC pooling module".into(),
            ));
        };
        let weight = store.value_mut(layer.weight);
        let len = weight.shape()[1];
        let data = weight.data_mut();
        data.fill(T::zero());
        for g in 0..self.groups {
            for i in 0..len {
                data[(g * len + i) * len + i] = cast(alpha);
            }
        }
        store.value_mut(layer.bias).data_mut().fill(T::zero());
        Ok(())
    }

    /// Makes the module emit the same logits `pattern` (row-major, S² long)
    /// in every block regardless of its input: the output layer's weights are
    /// zeroed and its bias tiled with `pattern`.
    pub fn set_constant_block_logits<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        pattern: &[f64],
    ) -> Result<()> {
        let s = self.size;
        if pattern.len() != s * s {
            return Err(Error::InvalidArgument(format!(
                "block pattern needs {} entries, got {}",
                s * s,
                pattern.len()
            )));
        }
        let Net::Fc { block, layers } = &self.net else {
            return Err(Error::InvalidArgument(
                "constant logits need an FC pooling module (a convolution bias is spatially uniform)".into(),
            ));
        };
        let last = layers.last().expect("at least one layer");
        store.value_mut(last.weight).data_mut().fill(T::zero());
        let (bh, bw) = *block;
        let len = bh * bw;
        let bias = store.value_mut(last.bias).data_mut();
        for g in 0..self.groups {
            for k in 0..len {
                let (r, c) = (k / bw, k % bw);
                bias[g * len + k] = cast(pattern[(r % s) * s + c % s]);
            }
        }
        Ok(())
    }
}
