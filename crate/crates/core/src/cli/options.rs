//! Run configuration: a fixed table of dotted keys, filled from defaults, an
//! optional `key = value` file and command-line flags, in that order.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use crate::analysis::Thresholds;
use crate::config::{parse_bool, KeyValues};
use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig};
use crate::pooling::PoolMethod;
use crate::scalar::Precision;
use crate::train::TrainConfig;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "UNIPOOL_DATA_DIR";

/// Name, default and help text of one configuration key. A `None` default
/// leaves the key unset.
pub struct KeySpec {
    pub key: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(key: &'static str, default: Option<&'static str>, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

pub const KEYS: &[KeySpec] = &[
    key("arch", Some("resnet"), "vgg | resnet | tiny-vgg | tiny-resnet"),
    key("scale", Some("tiny"), "tiny (desk-sized widths) | full (VGG19 / ResNet18 widths)"),
    key("pool.local", Some("max"), "local pooling: max | avg | stride[:r,c] | mixed | gated-ch | gated-layer | universal:fc1|fc2|conv"),
    key("pool.global", Some("avg"), "global pooling, same names as pool.local"),
    key("pool.shared", Some("false"), "share one universal pooling module across the channels of a site"),
    key("pool.local.variant", None, "local pooling family; overrides pool.local (universal takes pool.local.b1)"),
    key("pool.local.b1", None, "fc1 | fc2 | conv for a universal local pooling"),
    key("pool.local.offset", None, "row,col sampled by a stride local pooling"),
    key("pool.global.variant", None, "global pooling family; overrides pool.global"),
    key("pool.global.b1", None, "fc1 | fc2 | conv for a universal global pooling"),
    key("pool.global.offset", None, "row,col sampled by a stride global pooling"),
    key("epochs", Some("30"), "training epochs; when resuming, an explicit value extends the run"),
    key("batch_size", Some("64"), "mini-batch size"),
    key("lr0", Some("0.1"), "initial learning rate"),
    key("momentum", Some("0.9"), "SGD momentum"),
    key("weight_decay", Some("0.0001"), "L2 weight decay"),
    key("lr_decay_interval", Some("auto"), "epochs between x0.1 learning-rate drops; auto is ceil(epochs / 3)"),
    key("seed", Some("0"), "seed of initialization and batch order"),
    key("precision", Some("32"), "element precision: 32 | 64"),
    key("augment", Some("false"), "random 4-pixel-pad crops and horizontal flips"),
    key("data.source", Some("synthetic"), "synthetic | cifar10 | dir"),
    key("data.dir", None, "dataset directory (default: $UNIPOOL_DATA_DIR)"),
    key("data.subset", Some("0"), "training images kept per class, 0 keeps all"),
    key("synth.classes", Some("4"), "synthetic classes"),
    key("synth.per_class", Some("64"), "synthetic training images per class"),
    key("synth.test_per_class", Some("32"), "synthetic test images per class"),
    key("synth.size", Some("auto"), "synthetic image extent; auto is 32 for VGG and 16 for ResNet"),
    key("synth.noise", Some("0.1"), "standard deviation of synthetic pixel noise"),
    key("synth.seed", Some("0"), "seed of the synthetic generator"),
    key("out", Some("out"), "output directory"),
    key("checkpoint", None, "checkpoint to resume (train) or inspect (eval, analyze)"),
    key("checkpoint.every", Some("0"), "save a checkpoint every N epochs; the final epoch is always saved"),
    key("tolerance", Some("1e-5"), "largest accepted relative gradient error"),
    key("gradcheck.max_elements", Some("300"), "parameter elements compared against finite differences"),
    key("gradcheck.batch", Some("2"), "images in the gradient-check batch"),
    key("gradcheck.step", Some("1e-5"), "central-difference step"),
    key("analysis.inputs", Some("8"), "test images used to profile pooling weights"),
    key("analysis.eps_u", Some("auto"), "uniformity threshold; auto is 0.05(1 - 1/S^2)"),
    key("analysis.eps_s", Some("0.1"), "sensitivity threshold"),
    key("analysis.format", Some("both"), "csv | pgm | both"),
    key("grid", Some("pooling"), "sweep grid (pooling: the baselines V1-V6 and universal variants P1-P5)"),
    key("repeat", Some("1"), "seeds per sweep cell"),
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == name)
}

/// Resolved key values; every key of [`KEYS`] with a default is present.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    kv: KeyValues,
    /// Keys given by the file or on the command line.
    explicit: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Dir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisFormat {
    Csv,
    Pgm,
    Both,
}

fn check_known(key: &str) -> Result<()> {
    if key_spec(key).is_some() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key {key:?}")))
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&KeyValues>, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = KeyValues::new();
        let mut explicit = BTreeSet::new();
        for k in KEYS {
            if let Some(d) = k.default {
                kv.set(k.key, d);
            }
        }
        if let Some(file) = file {
            for (k, v) in file.iter() {
                check_known(k)?;
                kv.set(k, v);
                explicit.insert(k.to_string());
            }
        }
        for (k, v) in overrides {
            check_known(k)?;
            kv.set(k.as_str(), v);
            explicit.insert(k.clone());
        }
        if kv.get("data.dir").is_none() {
            if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
                if !dir.is_empty() {
                    kv.set("data.dir", dir);
                }
            }
        }
        let rc = RunConfig { kv, explicit };
        rc.architecture()?;
        rc.pool_method("local")?;
        rc.pool_method("global")?;
        rc.train_config()?;
        Ok(rc)
    }

    /// Whether `key` was set by the file or the command line.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.kv.get(key)
    }

    pub fn value<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.kv.parse_value(key)
    }

    fn flag(&self, key: &str) -> Result<bool> {
        parse_bool(self.kv.require(key)?).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    /// Copy with one key replaced.
    pub fn with(&self, key: &str, value: impl std::fmt::Display) -> Result<Self> {
        check_known(key)?;
        let mut kv = self.kv.clone();
        kv.set(key, value);
        let mut explicit = self.explicit.clone();
        explicit.insert(key.to_string());
        Ok(RunConfig { kv, explicit })
    }

    pub fn is_full_scale(&self) -> Result<bool> {
        match self.kv.require("scale")? {
            "tiny" => Ok(false),
            "full" => Ok(true),
            other => Err(Error::Config(format!(
                "scale must be tiny or full, got {other:?}"
            ))),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let arch: Architecture = self.value("arch")?;
        let full = self.is_full_scale()?;
        if full && arch.is_tiny() {
            return Err(Error::Config(format!(
                "arch {arch} conflicts with scale = full"
            )));
        }
        Ok(arch.with_tiny(!full))
    }

    /// Pooling of the `local` or `global` sites, combining `pool.<site>` with
    /// the optional `.variant`, `.b1` and `.offset` keys.
    pub fn pool_method(&self, site: &str) -> Result<PoolMethod> {
        let base = format!("pool.{site}");
        let variant = self.get(&format!("{base}.variant"));
        let b1 = self.get(&format!("{base}.b1"));
        let offset = self.get(&format!("{base}.offset"));
        let combined = self.kv.require(&base)?;
        let family = variant.unwrap_or_else(|| combined.split(':').next().unwrap_or(combined));
        let name = match family {
            "universal" => {
                let b1 = b1.unwrap_or_else(|| combined.strip_prefix("universal:").unwrap_or("fc1"));
                format!("universal:{b1}")
            }
            "stride" => match offset {
                Some(o) => format!("stride:{o}"),
                None if variant.is_none() => combined.to_string(),
                None => "stride".to_string(),
            },
            other => {
                if b1.is_some() {
                    return Err(Error::Config(format!(
                        "{base}.b1 needs a universal {site} pooling, got {other}"
                    )));
                }
                other.to_string()
            }
        };
        if offset.is_some() && family != "stride" {
            return Err(Error::Config(format!(
                "{base}.offset needs a stride {site} pooling, got {family}"
            )));
        }
        name.parse()
            .map_err(|e: Error| Error::Config(format!("{base}: {e}")))
    }

    pub fn model_config(&self, train: &Dataset) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(
            self.architecture()?,
            self.pool_method("local")?,
            self.pool_method("global")?,
        )
        .with_input(train.image_shape(), train.num_classes());
        cfg.shared_b1 = self.flag("pool.shared")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr0: self.value("lr0")?,
            momentum: self.value("momentum")?,
            weight_decay: self.value("weight_decay")?,
            epochs: self.value("epochs")?,
            lr_decay_interval: match self.kv.require("lr_decay_interval")? {
                "auto" => self.value::<usize>("epochs")?.div_ceil(3),
                _ => self.value("lr_decay_interval")?,
            },
            batch_size: self.value("batch_size")?,
            seed: self.value("seed")?,
            precision: self.value::<Precision>("precision")?,
            augment: self.flag("augment")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match self.kv.require("data.source")? {
            "synthetic" => Ok(DataSource::Synthetic),
            "cifar10" => Ok(DataSource::Cifar10),
            "dir" => Ok(DataSource::Dir),
            other => Err(Error::Config(format!(
                "data.source must be synthetic, cifar10 or dir, got {other:?}"
            ))),
        }
    }

    pub fn data_dir(&self) -> Result<PathBuf> {
        self.get("data.dir").map(PathBuf::from).ok_or_else(|| {
            Error::Config(format!("data.dir is not set and ${DATA_DIR_ENV} is empty"))
        })
    }

    pub fn synthetic_spec(&self) -> Result<(SyntheticSpec, usize)> {
        let size = match self.kv.require("synth.size")? {
            "auto" if self.architecture()?.is_resnet() => 16,
            "auto" => 32,
            _ => self.value("synth.size")?,
        };
        let spec = SyntheticSpec {
            num_classes: self.value("synth.classes")?,
            samples_per_class: self.value("synth.per_class")?,
            image_size: size,
            noise_std: self.value("synth.noise")?,
            seed: self.value("synth.seed")?,
        };
        Ok((spec, self.value("synth.test_per_class")?))
    }

    /// Training and test splits, the test split normalized with training
    /// statistics, the training split optionally subsampled per class.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.data_source()? {
            DataSource::Synthetic => {
                let (spec, test_per_class) = self.synthetic_spec()?;
                data::synthetic_split(&spec, test_per_class)?
            }
            DataSource::Cifar10 => {
                let dir = self.data_dir()?;
                let nested = dir.join("cifar-10-batches-bin");
                let dir = if nested.is_dir() { nested } else { dir };
                data::load_cifar10(dir)?
            }
            DataSource::Dir => data::load_binary_dir(self.data_dir()?)?,
        };
        let per_class: usize = self.value("data.subset")?;
        if per_class == 0 {
            return Ok((train, test));
        }
        let train = train.subset(per_class, self.value("seed")?)?;
        data::train_test(train, test)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.kv.require("out")?))
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.get("checkpoint").map(PathBuf::from)
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        let eps_u = match self.kv.require("analysis.eps_u")? {
            "auto" => None,
            _ => Some(self.value("analysis.eps_u")?),
        };
        Ok(Thresholds {
            eps_u,
            eps_s: self.value("analysis.eps_s")?,
        })
    }

    pub fn analysis_format(&self) -> Result<AnalysisFormat> {
        match self.kv.require("analysis.format")? {
            "csv" => Ok(AnalysisFormat::Csv),
            "pgm" => Ok(AnalysisFormat::Pgm),
            "both" => Ok(AnalysisFormat::Both),
            other => Err(Error::Config(format!(
                "analysis.format must be csv, pgm or both, got {other:?}"
            ))),
        }
    }

    /// `key = value` text of every set key with pooling collapsed into
    /// `pool.local` / `pool.global` and the architecture made explicit.
    /// Parsing it back through [`RunConfig::resolve`] reproduces the run.
    pub fn resolved(&self) -> Result<KeyValues> {
        let mut out = KeyValues::new();
        for k in KEYS {
            let Some(v) = self.get(k.key) else { continue };
            match k.key {
                "arch" => out.set(k.key, self.architecture()?),
                "pool.local" | "pool.global" => out.set(k.key, self.pool_method(&k.key[5..])?),
                key if key.starts_with("pool.local.") || key.starts_with("pool.global.") => {}
                _ => out.set(k.key, v),
            }
        }
        Ok(out)
    }
}
