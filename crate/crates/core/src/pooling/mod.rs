//! Pooling operators: max, average and stride pooling, the mixed and gated
//! max/average combinations, and universal pooling.
//!
//! A [`PoolMethod`] is the site-independent name a user picks (`avg`,
//! `universal:fc2`, ...). Resolving it at a concrete pooling site yields a
//! [`PoolingSpec`], from which a [`PoolLayer`] with its parameters is built.

mod universal;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use crate::autodiff::GateGranularity;
pub use universal::{B1Init, UniversalPool};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// One layer of a convolutional B1 network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvLayerSpec {
    pub kernel_size: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Architecture of the network that maps a feature map to pre-softmax
/// pooling logits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum B1Kind {
    /// Per-block FC stack mapping S² → S², shared across the blocks of a channel.
    LocalFc { num_layers: usize },
    /// Whole-map FC stack mapping H·W → H·W.
    GlobalFc { num_layers: usize },
    /// Per-channel single-input convolution stack preserving spatial extent.
    GlobalConv { layers: Vec<ConvLayerSpec> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct B1Spec {
    pub kind: B1Kind,
    /// Hidden width of two-layer FC stacks; `None` picks S² (local) or
    /// H·W/4 (global).
    pub hidden_width: Option<usize>,
    /// Share one parameter set across all channels instead of one per channel.
    pub shared: bool,
}

impl B1Spec {
    pub fn local_fc(num_layers: usize) -> Self {
        B1Spec {
            kind: B1Kind::LocalFc { num_layers },
            hidden_width: None,
            shared: false,
        }
    }

    pub fn global_fc(num_layers: usize) -> Self {
        B1Spec {
            kind: B1Kind::GlobalFc { num_layers },
            hidden_width: None,
            shared: false,
        }
    }

    /// Two 3×3 layers with 8 hidden channels, BN + ReLU in between.
    pub fn global_conv() -> Self {
        B1Spec {
            kind: B1Kind::GlobalConv {
                layers: vec![
                    ConvLayerSpec {
                        kernel_size: 3,
                        channels: 8,
                        stride: 1,
                    },
                    ConvLayerSpec {
                        kernel_size: 3,
                        channels: 1,
                        stride: 1,
                    },
                ],
            },
            hidden_width: None,
            shared: false,
        }
    }

    pub fn with_shared(mut self, shared: bool) -> Self {
        self.shared = shared;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            B1Kind::LocalFc { num_layers } | B1Kind::GlobalFc { num_layers } => {
                if !(1..=2).contains(num_layers) {
                    return Err(Error::Config(format!(
                        "FC pooling module needs 1 or 2 layers, got {num_layers}"
                    )));
                }
            }
            B1Kind::GlobalConv { layers } => {
                let Some(last) = layers.last() else {
                    return Err(Error::Config(
                        "convolutional pooling module has no layers".into(),
                    ));
                };
                if last.channels != 1 {
                    return Err(Error::Config(
                        "last pooling-module convolution must emit one channel".into(),
                    ));
                }
                for l in layers {
                    if l.stride != 1 || l.kernel_size % 2 == 0 || l.channels == 0 {
                        return Err(Error::Config(format!(
                            "pooling-module convolution {l:?} must be stride 1 with an odd kernel"
                        )));
                    }
                }
            }
        }
        if self.hidden_width == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PoolVariant {
    Max,
    Average,
    Stride {
        offset_row: usize,
        offset_col: usize,
    },
    Mixed,
    GatedChannel,
    GatedLayer,
    Universal {
        b1: B1Spec,
    },
}

/// A pooling method bound to a block size. `stride` always equals `size`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PoolingSpec {
    pub variant: PoolVariant,
    pub size: usize,
    pub stride: usize,
}

impl PoolingSpec {
    pub fn new(variant: PoolVariant, size: usize) -> Self {
        PoolingSpec {
            variant,
            size,
            stride: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("pooling size must be positive".into()));
        }
        if self.stride != self.size {
            return Err(Error::Config(format!(
                "pooling stride {} must equal size {} (disjoint blocks)",
                self.stride, self.size
            )));
        }
        match &self.variant {
            PoolVariant::Stride {
                offset_row,
                offset_col,
            } if *offset_row >= self.size || *offset_col >= self.size => {
                Err(Error::Config(format!(
                    "stride offset ({offset_row}, {offset_col}) outside a {0}×{0} block",
                    self.size
                )))
            }
            PoolVariant::Universal { b1 } => b1.validate(),
            _ => Ok(()),
        }
    }
}

/// Site-independent pooling choice as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMethod {
    Max,
    Avg,
    Stride {
        offset_row: usize,
        offset_col: usize,
    },
    Mixed,
    GatedChannel,
    GatedLayer,
    UniversalFc1,
    UniversalFc2,
    UniversalConv,
}

impl PoolMethod {
    pub const ALL_NAMES: [&'static str; 9] = [
        "max",
        "avg",
        "stride",
        "mixed",
        "gated-ch",
        "gated-layer",
        "universal:fc1",
        "universal:fc2",
        "universal:conv",
    ];

    pub fn is_universal(self) -> bool {
        matches!(
            self,
            PoolMethod::UniversalFc1 | PoolMethod::UniversalFc2 | PoolMethod::UniversalConv
        )
    }

    /// Resolves the method at a site with block size `size`. FC universal
    /// modules are block-local at local sites and whole-map at global ones.
    pub fn at_site(self, size: usize, global: bool, shared_b1: bool) -> PoolingSpec {
        let fc = |layers| {
            if global {
                B1Spec::global_fc(layers)
            } else {
                B1Spec::local_fc(layers)
            }
        };
        let variant = match self {
            PoolMethod::Max => PoolVariant::Max,
            PoolMethod::Avg => PoolVariant::Average,
            PoolMethod::Stride {
                offset_row,
                offset_col,
            } => PoolVariant::Stride {
                offset_row,
                offset_col,
            },
            PoolMethod::Mixed => PoolVariant::Mixed,
            PoolMethod::GatedChannel => PoolVariant::GatedChannel,
            PoolMethod::GatedLayer => PoolVariant::GatedLayer,
            PoolMethod::UniversalFc1 => PoolVariant::Universal {
                b1: fc(1).with_shared(shared_b1),
            },
            PoolMethod::UniversalFc2 => PoolVariant::Universal {
                b1: fc(2).with_shared(shared_b1),
            },
            PoolMethod::UniversalConv => PoolVariant::Universal {
                b1: B1Spec::global_conv().with_shared(shared_b1),
            },
        };
        PoolingSpec::new(variant, size)
    }
}

impl fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolMethod::Max => f.write_str("max"),
            PoolMethod::Avg => f.write_str("avg"),
            PoolMethod::Stride {
                offset_row: 0,
                offset_col: 0,
            } => f.write_str("stride"),
            PoolMethod::Stride {
                offset_row,
                offset_col,
            } => write!(f, "stride:{offset_row},{offset_col}"),
            PoolMethod::Mixed => f.write_str("mixed"),
            PoolMethod::GatedChannel => f.write_str("gated-ch"),
            PoolMethod::GatedLayer => f.write_str("gated-layer"),
            PoolMethod::UniversalFc1 => f.write_str("universal:fc1"),
            PoolMethod::UniversalFc2 => f.write_str("universal:fc2"),
            PoolMethod::UniversalConv => f.write_str("universal:conv"),
        }
    }
}

impl FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "max" => PoolMethod::Max,
            "avg" => PoolMethod::Avg,
            "stride" => PoolMethod::Stride {
                offset_row: 0,
                offset_col: 0,
            },
            "mixed" => PoolMethod::Mixed,
            "gated-ch" => PoolMethod::GatedChannel,
            "gated-layer" => PoolMethod::GatedLayer,
            "universal:fc1" => PoolMethod::UniversalFc1,
            "universal:fc2" => PoolMethod::UniversalFc2,
            "universal:conv" => PoolMethod::UniversalConv,
            _ => {
                if let Some(rest) = s.strip_prefix("stride:") {
                    let parsed = rest
                        .split_once(',')
                        .and_then(|(r, c)| Some((r.trim().parse().ok()?, c.trim().parse().ok()?)));
                    if let Some((offset_row, offset_col)) = parsed {
                        return Ok(PoolMethod::Stride {
                            offset_row,
                            offset_col,
                        });
                    }
                }
                return Err(Error::Config(format!(
                    "unknown pooling method {s:?}; expected one of {}",
                    PoolMethod::ALL_NAMES.join("|")
                )));
            }
        })
    }
}

/// A realized pooling layer holding references to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolLayer {
    Max {
        size: usize,
    },
    Avg {
        size: usize,
    },
    Stride {
        size: usize,
        offset: (usize, usize),
    },
    Mixed {
        size: usize,
        mix: ParamId,
    },
    Gated {
        size: usize,
        omega: ParamId,
        granularity: GateGranularity,
    },
    Universal(UniversalPool),
}

/// Pooled output plus, for universal pooling, the pooling weights π.
#[derive(Debug, Clone, Copy)]
pub struct PoolOutput {
    pub output: Var,
    pub weights: Option<Var>,
}

impl PoolLayer {
    /// Creates the layer and registers its parameters under `prefix`.
    /// `input_shape` is the `[C, H, W]` extent of the pooled feature map.
    pub fn build<T: Real>(
        spec: &PoolingSpec,
        store: &mut ParamStore<T>,
        prefix: &str,
        input_shape: [usize; 3],
        init: B1Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let [channels, h, w] = input_shape;
        let size = spec.size;
        if size > h || size > w {
            return Err(Error::Config(format!(
                "{prefix}: pooling size {size} exceeds feature map {h}×{w}"
            )));
        }
        Ok(match &spec.variant {
            PoolVariant::Max => PoolLayer::Max { size },
            PoolVariant::Average => PoolLayer::Avg { size },
            PoolVariant::Stride {
                offset_row,
                offset_col,
            } => PoolLayer::Stride {
                size,
                offset: (*offset_row, *offset_col),
            },
            PoolVariant::Mixed => PoolLayer::Mixed {
                size,
                mix: store.add(format!("{prefix}.mix"), Tensor::zeros(vec![1]))?,
            },
            PoolVariant::GatedChannel => PoolLayer::Gated {
                size,
                omega: store.add(
                    format!("{prefix}.gate"),
                    Tensor::zeros(vec![channels, size * size]),
                )?,
                granularity: GateGranularity::Channel,
            },
            PoolVariant::GatedLayer => PoolLayer::Gated {
                size,
                omega: store.add(format!("{prefix}.gate"), Tensor::zeros(vec![size * size]))?,
                granularity: GateGranularity::Layer,
            },
            PoolVariant::Universal { b1 } => PoolLayer::Universal(UniversalPool::new(
                store,
                &format!("{prefix}.b1"),
                b1,
                size,
                input_shape,
                init,
                rng,
            )?),
        })
    }

    pub fn size(&self) -> usize {
        match self {
            PoolLayer::Max { size }
            | PoolLayer::Avg { size }
            | PoolLayer::Stride { size, .. }
            | PoolLayer::Mixed { size, .. }
            | PoolLayer::Gated { size, .. } => *size,
            PoolLayer::Universal(u) => u.size(),
        }
    }

    pub fn is_universal(&self) -> bool {
        matches!(self, PoolLayer::Universal(_))
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<PoolOutput> {
        let output = match self {
            PoolLayer::Max { size } => ctx.tape.max_pool(x, *size)?,
            PoolLayer::Avg { size } => ctx.tape.avg_pool(x, *size)?,
            PoolLayer::Stride { size, offset } => ctx.tape.stride_pool(x, *size, *offset)?,
            PoolLayer::Mixed { size, mix } => {
                let a = ctx.param(*mix);
                ctx.tape.mixed_pool(x, a, *size)?
            }
            PoolLayer::Gated {
                size,
                omega,
                granularity,
            } => {
                let w = ctx.param(*omega);
                ctx.tape.gated_pool(x, w, *size, *granularity)?
            }
            PoolLayer::Universal(u) => return u.forward(ctx, x),
        };
        Ok(PoolOutput {
            output,
            weights: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in PoolMethod::ALL_NAMES {
            let m: PoolMethod = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        let m: PoolMethod = "stride:1,0".parse().unwrap();
        assert_eq!(
            m,
            PoolMethod::Stride {
                offset_row: 1,
                offset_col: 0
            }
        );
        assert_eq!(m.to_string(), "stride:1,0");
        assert!("median".parse::<PoolMethod>().is_err());
    }

    #[test]
    fn stride_must_equal_size() {
        let mut spec = PoolingSpec::new(PoolVariant::Max, 2);
        assert!(spec.validate().is_ok());
        spec.stride = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn stride_offset_must_lie_in_block() {
        let spec = PoolingSpec::new(
            PoolVariant::Stride {
                offset_row: 2,
                offset_col: 0,
            },
            2,
        );
        assert!(spec.validate().is_err());
    }

    #[test]
    fn fc_modules_follow_site_kind() {
        let local = PoolMethod::UniversalFc2.at_site(2, false, false);
        let global = PoolMethod::UniversalFc2.at_site(4, true, false);
        assert!(matches!(
            local.variant,
            PoolVariant::Universal {
                b1: B1Spec {
                    kind: B1Kind::LocalFc { num_layers: 2 },
                    ..
                }
            }
        ));
        assert!(matches!(
            global.variant,
            PoolVariant::Universal {
                b1: B1Spec {
                    kind: B1Kind::GlobalFc { num_layers: 2 },
                    ..
                }
            }
        ));
    }

    #[test]
    fn conv_module_must_end_in_one_channel() {
        let mut spec = B1Spec::global_conv();
        assert!(spec.validate().is_ok());
        if let B1Kind::GlobalConv { layers } = &mut spec.kind {
            layers[1].channels = 2;
        }
        assert!(spec.validate().is_err());
    }
}
