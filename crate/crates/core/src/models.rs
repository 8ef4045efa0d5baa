//! CIFAR-scale VGG and ResNet backbones whose pooling slots are filled by any
//! [`PoolMethod`], plus reduced "tiny" configurations for quick runs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{parse_bool, parse_shape3, KeyValues};
use crate::error::{Error, Result};
use crate::layers::{ConvBn, ForwardCtx, Linear};
use crate::param::ParamStore;
use crate::pooling::{B1Init, PoolLayer, PoolMethod, PoolingSpec};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    VggCifar,
    ResNetCifar,
    TinyVgg,
    TinyResNet,
}

impl Architecture {
    pub fn is_tiny(self) -> bool {
        matches!(self, Architecture::TinyVgg | Architecture::TinyResNet)
    }

    pub fn is_resnet(self) -> bool {
        matches!(self, Architecture::ResNetCifar | Architecture::TinyResNet)
    }

    /// Same family at the requested scale.
    pub fn with_tiny(self, tiny: bool) -> Self {
        match (self.is_resnet(), tiny) {
            (false, false) => Architecture::VggCifar,
            (false, true) => Architecture::TinyVgg,
            (true, false) => Architecture::ResNetCifar,
            (true, true) => Architecture::TinyResNet,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::VggCifar => "vgg",
            Architecture::ResNetCifar => "resnet",
            Architecture::TinyVgg => "tiny-vgg",
            Architecture::TinyResNet => "tiny-resnet",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vgg" => Ok(Architecture::VggCifar),
            "resnet" => Ok(Architecture::ResNetCifar),
            "tiny-vgg" => Ok(Architecture::TinyVgg),
            "tiny-resnet" => Ok(Architecture::TinyResNet),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}; expected vgg|resnet|tiny-vgg|tiny-resnet"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub local_pool: PoolMethod,
    pub global_pool: PoolMethod,
    /// Share one B1 network across all channels of a universal pooling site.
    pub shared_b1: bool,
    pub num_classes: usize,
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
}

impl ModelConfig {
    pub fn new(
        architecture: Architecture,
        local_pool: PoolMethod,
        global_pool: PoolMethod,
    ) -> Self {
        ModelConfig {
            architecture,
            local_pool,
            global_pool,
            shared_b1: false,
            num_classes: 10,
            input_shape: [3, 32, 32],
        }
    }

    pub fn with_input(mut self, input_shape: [usize; 3], num_classes: usize) -> Self {
        self.input_shape = input_shape;
        self.num_classes = num_classes;
        self
    }

    /// Writes the configuration as `arch`, `pool.*` and `model.*` keys.
    pub fn write_keys(&self, kv: &mut KeyValues) {
        kv.set("arch", self.architecture);
        kv.set("pool.local", self.local_pool);
        kv.set("pool.global", self.global_pool);
        kv.set("pool.shared", self.shared_b1);
        kv.set("model.num_classes", self.num_classes);
        let [c, h, w] = self.input_shape;
        kv.set("model.input_shape", format!("{c} {h} {w}"));
    }

    pub fn from_keys(kv: &KeyValues) -> Result<Self> {
        let cfg = ModelConfig {
            architecture: kv.parse_value("arch")?,
            local_pool: kv.parse_value("pool.local")?,
            global_pool: kv.parse_value("pool.global")?,
            shared_b1: parse_bool(kv.require("pool.shared")?)?,
            num_classes: kv.parse_value("model.num_classes")?,
            input_shape: parse_shape3(kv.require("model.input_shape")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        Ok(())
    }
}

/// A realized layer. Shapes are per-sample `[C, H, W]` or `[F]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvBn),
    BasicBlock(BasicBlock),
    Pool { site: usize, layer: PoolLayer },
    Flatten,
    FullyConnected(Linear),
}

/// Two 3×3 conv-BN stages with a residual connection, projected by a 1×1
/// conv-BN when the channel count changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x, true)?;
        let y = self.conv2.forward(ctx, y, false)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(ctx, x, false)?,
            None => x,
        };
        let sum = ctx.tape.add(y, skip)?;
        ctx.tape.relu(sum)
    }
}

/// A pooling slot of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSite {
    pub name: String,
    pub global: bool,
    pub spec: PoolingSpec,
    /// `[C, H, W]` entering the pooling layer.
    pub input_shape: [usize; 3],
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    layers: Vec<(Layer, Vec<usize>)>,
    sites: Vec<PoolSite>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// π of every universal pooling site, indexed like [`Model::sites`].
    pub pool_weights: Vec<Option<Var>>,
    /// Feature map entering each pooling site.
    pub pool_inputs: Vec<Var>,
    /// Runtime per-sample shape after each layer.
    pub shapes: Vec<Vec<usize>>,
}

enum Stage {
    Conv(usize),
    Block(usize),
    LocalPool,
}

fn vgg_plan(tiny: bool) -> Vec<Stage> {
    let groups: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
    let mut plan = Vec::new();
    for (i, &(width, depth)) in groups.iter().enumerate() {
        let (width, depth) = if tiny { (width / 8, 1) } else { (width, depth) };
        plan.extend((0..depth).map(|_| Stage::Conv(width)));
        if i + 1 < groups.len() {
            plan.push(Stage::LocalPool);
        }
    }
    plan
}

fn resnet_plan(tiny: bool) -> Vec<Stage> {
    if tiny {
        vec![
            Stage::Conv(8),
            Stage::Block(8),
            Stage::Block(16),
            Stage::LocalPool,
            Stage::Block(32),
            Stage::LocalPool,
            Stage::Block(64),
            Stage::LocalPool,
        ]
    } else {
        vec![
            Stage::Conv(64),
            Stage::Block(64),
            Stage::Block(64),
            Stage::Block(128),
            Stage::LocalPool,
            Stage::Block(128),
            Stage::Block(256),
            Stage::LocalPool,
            Stage::Block(256),
            Stage::Block(512),
            Stage::LocalPool,
            Stage::Block(512),
        ]
    }
}

const LOCAL_POOL_SIZE: usize = 2;

/// Builds the network with seeded fan-in uniform initialization.
pub fn build_model<T: Real>(config: ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut sites = Vec::new();
    let arch = config.architecture;
    let plan = if arch.is_resnet() {
        resnet_plan(arch.is_tiny())
    } else {
        vgg_plan(arch.is_tiny())
    };

    let [mut c, mut h, mut w] = config.input_shape;
    let mut conv_index = (1usize, 0usize);
    let mut block_index = 0usize;
    let mut add_pool = |store: &mut ParamStore<T>,
                        layers: &mut Vec<(Layer, Vec<usize>)>,
                        rng: &mut ChaCha8Rng,
                        shape: [usize; 3],
                        global: bool|
     -> Result<[usize; 3]> {
        let [c, h, w] = shape;
        let site = sites.len();
        let name = format!("pool{}", site + 1);
        let (method, size) = if global {
            if h != w {
                return Err(Error::Config(format!(
                    "global pooling needs a square feature map, got {h}×{w}"
                )));
            }
            (config.global_pool, h)
        } else {
            (config.local_pool, LOCAL_POOL_SIZE)
        };
        if size == 0 || h < size || w < size {
            return Err(Error::Config(format!(
                "{name}: feature map {h}×{w} too small for {size}×{size} pooling; enlarge the input"
            )));
        }
        let spec = method.at_site(size, global, config.shared_b1);
        let layer = PoolLayer::build(&spec, store, &name, shape, B1Init::Default, rng)?;
        let out = [c, h / size, w / size];
        layers.push((Layer::Pool { site, layer }, out.to_vec()));
        sites.push(PoolSite {
            name,
            global,
            spec,
            input_shape: shape,
        });
        Ok(out)
    };

    for stage in &plan {
        match *stage {
            Stage::Conv(out) => {
                let name = if arch.is_resnet() {
                    "conv1".to_string()
                } else {
                    conv_index.1 += 1;
                    format!("conv{}_{}", conv_index.0, conv_index.1)
                };
                let conv = ConvBn::new(&mut store, &name, c, out, 3, 1, 1, &mut rng)?;
                c = out;
                layers.push((Layer::Conv(conv), vec![c, h, w]));
            }
            Stage::Block(out) => {
                block_index += 1;
                let name = format!("block{block_index}");
                let conv1 = ConvBn::new(
                    &mut store,
                    &format!("{name}.conv1"),
                    c,
                    out,
                    3,
                    1,
                    1,
                    &mut rng,
                )?;
                let conv2 = ConvBn::new(
                    &mut store,
                    &format!("{name}.conv2"),
                    out,
                    out,
                    3,
                    1,
                    1,
                    &mut rng,
                )?;
                let shortcut = if out != c {
                    Some(ConvBn::new(
                        &mut store,
                        &format!("{name}.shortcut"),
                        c,
                        out,
                        1,
                        1,
                        0,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                c = out;
                layers.push((
                    Layer::BasicBlock(BasicBlock {
                        conv1,
                        conv2,
                        shortcut,
                    }),
                    vec![c, h, w],
                ));
            }
            Stage::LocalPool => {
                [c, h, w] = add_pool(&mut store, &mut layers, &mut rng, [c, h, w], false)?;
                conv_index = (conv_index.0 + 1, 0);
            }
        }
    }
    [c, h, w] = add_pool(&mut store, &mut layers, &mut rng, [c, h, w], true)?;
    debug_assert_eq!((h, w), (1, 1));
    layers.push((Layer::Flatten, vec![c * h * w]));
    let fc = Linear::new(&mut store, "fc", c * h * w, config.num_classes, &mut rng)?;
    layers.push((Layer::FullyConnected(fc), vec![config.num_classes]));

    Ok(Model {
        config,
        store,
        layers,
        sites,
    })
}

impl<T: Real> Model<T> {
    pub fn sites(&self) -> &[PoolSite] {
        &self.sites
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().map(|(l, _)| l)
    }

    /// Statically predicted per-sample output shape of every layer.
    pub fn predicted_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|(_, s)| s.clone()).collect()
    }

    /// Pooling layer realizing site `site`.
    pub fn pool_layer(&self, site: usize) -> Option<&PoolLayer> {
        self.layers.iter().find_map(|(l, _)| match l {
            Layer::Pool { site: s, layer } if *s == site => Some(layer),
            _ => None,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_, T>, input: Var) -> Result<ForwardOutput> {
        let shape = ctx.tape.shape(input);
        let [_, c, h, w] = crate::tensor::nchw("model", shape)?;
        if [c, h, w] != self.config.input_shape {
            return Err(Error::invalid_shape(
                "model",
                format!(
                    "batch of {:?} images, model expects {:?}",
                    &shape[1..],
                    self.config.input_shape
                ),
            ));
        }
        let mut x = input;
        let mut pool_weights = vec![None; self.sites.len()];
        let mut pool_inputs = Vec::with_capacity(self.sites.len());
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (layer, _) in &self.layers {
            x = match layer {
                Layer::Conv(conv) => conv.forward(ctx, x, true)?,
                Layer::BasicBlock(block) => block.forward(ctx, x)?,
                Layer::Pool { site, layer } => {
                    pool_inputs.push(x);
                    let out = layer.forward(ctx, x)?;
                    pool_weights[*site] = out.weights;
                    out.output
                }
                Layer::Flatten => ctx.tape.flatten(x)?,
                Layer::FullyConnected(fc) => fc.forward(ctx, x)?,
            };
            shapes.push(ctx.tape.shape(x)[1..].to_vec());
        }
        Ok(ForwardOutput {
            logits: x,
            pool_weights,
            pool_inputs,
            shapes,
        })
    }

    /// Runs the network on a concrete batch and returns the logits.
    pub fn predict(&self, batch: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let mut tape = crate::autodiff::Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, training);
        let input = ctx.tape.constant(batch.clone());
        let out = self.forward(&mut ctx, input)?;
        Ok(tape.value(out.logits).clone())
    }
}
