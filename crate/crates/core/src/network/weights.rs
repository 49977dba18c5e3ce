use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform with bound `gain * sqrt(6 / fan_in)`.
    He(f64),
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv(specs: &mut Vec<ParamSpec>, name: &str, out: usize, inp: usize, k: usize, init: Init, bias: bool) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![out, inp, k, k],
        init,
    });
    if bias {
        specs.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![out],
            init: Init::Zero,
        });
    }
}

/// Every parameter of the model in a fixed order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (c, k, l) = (cfg.base_channels, cfg.kernel, cfg.n_scales);
    let ec = cfg.event_channels;
    let kk = k * k;
    let relu = Init::He(1.0);
    let mut s = Vec::new();
    for lvl in 0..l {
        let inp = if lvl == 0 {
            cfg.image_channels + cfg.voxel_bins
        } else {
            c
        };
        conv(&mut s, &format!("enc.{lvl}.c1"), c, inp, k, relu, true);
        conv(&mut s, &format!("enc.{lvl}.c2"), c, c, k, relu, true);
    }
    if cfg.use_deblur_module {
        conv(&mut s, "ev.embed", ec, cfg.voxel_bins, k, relu, true);
        if cfg.use_lstm {
            conv(&mut s, "ev.lstm", 4 * ec, 2 * ec, k, Init::He(0.5), true);
        }
    }
    for lvl in 0..l {
        if lvl + 1 < l {
            conv(&mut s, &format!("dm.{lvl}.fuse"), c, 2 * c, k, relu, true);
        }
        if cfg.use_deblur_module {
            conv(&mut s, &format!("dm.{lvl}.t1"), c, ec, k, relu, true);
            conv(&mut s, &format!("dm.{lvl}.t2"), c, c, k, relu, true);
            conv(&mut s, &format!("dm.{lvl}.off"), 2 * kk, c, k, Init::Zero, true);
            conv(&mut s, &format!("dm.{lvl}.mask"), kk, c, k, Init::Zero, true);
        }
        conv(&mut s, &format!("dm.{lvl}"), c, c, k, relu, false);
    }
    let decoded = if cfg.use_c2f { l } else { 1 };
    for lvl in 0..decoded {
        if cfg.use_c2f && lvl + 1 < l {
            conv(&mut s, &format!("dec.{lvl}.gate"), c, 2 * c, k, Init::He(0.5), true);
        }
        for r in 0..cfg.n_resblocks {
            conv(&mut s, &format!("dec.{lvl}.r{r}.c1"), c, c, k, relu, true);
            conv(&mut s, &format!("dec.{lvl}.r{r}.c2"), c, c, k, Init::He(0.1), true);
        }
        conv(
            &mut s,
            &format!("dec.{lvl}.out"),
            cfg.image_channels,
            c,
            k,
            Init::He(0.1),
            true,
        );
    }
    s
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    params: BTreeMap<String, Tensor>,
}

impl Weights {
    /// Seeded initialization: He-uniform convs, zero biases, and zero
    /// offset and mask heads so training starts at the standard-conv point.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::He(gain) => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let bound = gain * (6.0 / fan_in as f64).sqrt();
                    Tensor::uniform(&spec.shape, -bound, bound, &mut rng)
                }
            };
            params.insert(spec.name, t);
        }
        Ok(Self { params })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let t = Tensor::zeros(&s.shape);
                (s.name, t)
            })
            .collect();
        Ok(Self { params })
    }

    /// Builds weights from named tensors, requiring exactly the names and
    /// shapes `cfg` implies.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let mut given: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in named {
            if given.insert(name.clone(), t).is_some() {
                return Err(Error::Parse(format!("duplicate parameter {name:?}")));
            }
        }
        let mut params = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = given
                .remove(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {:?}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {:?} has shape {:?}, config implies {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            params.insert(spec.name, t);
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::Config(format!("unexpected parameter {extra:?}")));
        }
        Ok(Self { params })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn n_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.to_named())
    }

    /// Reads parameters from a checkpoint, ignoring optimizer entries.
    pub fn load(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        let named = read_checkpoint(path)?
            .into_iter()
            .filter(|(n, _)| !is_state_name(n))
            .collect();
        Self::from_named(cfg, named)
    }

    /// Records every parameter on `tape`, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Params { vars }
    }
}

/// Names reserved for optimizer and trainer state inside checkpoints.
pub(crate) fn is_state_name(name: &str) -> bool {
    name.starts_with("adam.") || name.starts_with("train.")
}

/// Tape handles of bound weights.
#[derive(Clone, Debug)]
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    /// Pairs names with tape handles positionally.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
