//! Generator and discriminator networks.
//!
//! A [`Network`] owns named parameter and buffer tensors plus the spec it was
//! built from. Architectures are written once, against [`Ctx`]; building a
//! network runs that code on a small dummy input in declaring mode, which
//! creates every parameter in call order. Forward passes replay the same code
//! against bound graph variables, so parameter layout and forward can never
//! drift apart.

pub mod checkpoint;
mod discriminator;
mod generator;
mod receptive;

pub use discriminator::{
    build_depth_discriminator, build_pair_discriminator, discriminator_output_size, ConvLayerSpec,
    DiscriminatorSpec,
};
pub use generator::{build_generator, Backbone, GeneratorSpec, OutputActivation};
pub use receptive::{receptive_fields, ReceptiveField, ReceptiveFieldTable};

use std::path::PathBuf;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::seed;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum NetworkSpec {
    Generator(GeneratorSpec),
    PairDiscriminator(DiscriminatorSpec),
    DepthDiscriminator(DiscriminatorSpec),
}

impl NetworkSpec {
    pub fn role(&self) -> &'static str {
        match self {
            NetworkSpec::Generator(_) => "generator",
            NetworkSpec::PairDiscriminator(_) => "pair_discriminator",
            NetworkSpec::DepthDiscriminator(_) => "depth_discriminator",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

/// Running-statistics updates produced by a training-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct BnUpdates(Vec<(usize, BatchStats)>);

pub struct Forward {
    pub output: Var,
    pub bn: BnUpdates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights from N(0, 0.02²), biases zero, normalization scales one.
    Normal002 { seed: u64 },
    /// Weights from N(0, 2/fan_in), biases zero.
    HeNormal { seed: u64 },
    /// Parameters and buffers copied from a saved network.
    WarmStart { checkpoint: PathBuf },
}

impl Network {
    pub(crate) fn declare(
        spec: NetworkSpec,
        dummy_inputs: Vec<Tensor>,
        body: impl Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let inputs: Vec<Var> = dummy_inputs.into_iter().map(|t| g.constant(t)).collect();
        let mut ctx = Ctx {
            g: &mut g,
            mode: Mode::Eval,
            source: Source::Declare {
                params: Vec::new(),
                buffers: Vec::new(),
            },
            cursor: 0,
            buf_cursor: 0,
            updates: Vec::new(),
        };
        body(&mut ctx, &inputs)?;
        let Source::Declare { params, buffers } = ctx.source else {
            unreachable!()
        };
        Ok(Self {
            spec,
            params,
            buffers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts the parameters into `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], inputs: &[Var], mode: Mode) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape("bound variables do not match network".into()));
        }
        let mut ctx = Ctx {
            g,
            mode,
            source: Source::Bound { net: self, vars },
            cursor: 0,
            buf_cursor: 0,
            updates: Vec::new(),
        };
        let output = match &self.spec {
            NetworkSpec::Generator(s) => generator::forward(s, &mut ctx, inputs)?,
            NetworkSpec::PairDiscriminator(s) | NetworkSpec::DepthDiscriminator(s) => {
                discriminator::forward(s, &mut ctx, inputs)?
            }
        };
        Ok(Forward {
            output,
            bn: BnUpdates(ctx.updates),
        })
    }

    /// Folds batch statistics into the running buffers.
    pub fn commit_bn(&mut self, updates: BnUpdates) {
        for (idx, stats) in updates.0 {
            let (mean_i, var_i) = (idx, idx + 1);
            for (r, b) in self.buffers[mean_i].value.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in self.buffers[var_i].value.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Eval-mode forward on plain tensors.
    pub fn infer(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let ins: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
        let out = self.forward(&mut g, &vars, &ins, Mode::Eval)?;
        Ok(g.value(out.output).clone())
    }

    /// Sets every parameter to zero, normalization scales included.
    pub fn zero_params(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }

    pub fn init_params(&mut self, scheme: &InitScheme) -> Result<()> {
        match scheme {
            InitScheme::Normal002 { seed } => {
                let dist = Normal::new(0.0, 0.02).expect("valid std");
                self.init_with(*seed, |_, rng| dist.sample(rng))
            }
            InitScheme::HeNormal { seed } => {
                let fans: Vec<usize> = self.params.iter().map(|p| fan_in(&p.name, p.value.shape())).collect();
                let mut rng = seed::rng(*seed, &[0x4e]);
                for (p, fan) in self.params.iter_mut().zip(fans) {
                    init_default(p);
                    if p.name.ends_with(".weight") {
                        let dist = Normal::new(0.0, (2.0 / fan.max(1) as f64).sqrt()).expect("valid std");
                        p.value.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                    }
                }
                Ok(())
            }
            InitScheme::WarmStart { checkpoint } => {
                let loaded = checkpoint::load_network(checkpoint)?;
                if loaded.spec != self.spec {
                    return Err(Error::SpecMismatch(format!(
                        "{} holds a different {} spec",
                        checkpoint.display(),
                        loaded.spec.role()
                    )));
                }
                *self = loaded;
                Ok(())
            }
        }
    }

    fn init_with(&mut self, seed: u64, mut draw: impl FnMut(&str, &mut rand_chacha::ChaCha8Rng) -> f64) -> Result<()> {
        let mut rng = seed::rng(seed, &[0x02]);
        for p in &mut self.params {
            init_default(p);
            if p.name.ends_with(".weight") {
                for v in p.value.data_mut() {
                    *v = draw(&p.name, &mut rng);
                }
            }
        }
        Ok(())
    }

    /// Replaces parameters and buffers after checking names and shapes.
    pub fn load_state(&mut self, params: Vec<NamedTensor>, buffers: Vec<NamedTensor>) -> Result<()> {
        let same = |a: &[NamedTensor], b: &[NamedTensor]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape())
        };
        if !same(&self.params, &params) || !same(&self.buffers, &buffers) {
            return Err(Error::SpecMismatch(format!(
                "saved tensors do not fit this {}",
                self.spec.role()
            )));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }
}

fn init_default(p: &mut NamedTensor) {
    let fill = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
    p.value.data_mut().fill(fill);
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    match shape {
        // transposed convolutions store Ci×Co×k×k; with stride 2 each output sees a quarter of the taps
        [ci, _, k, k2] if name.contains("deconv") => (ci * k * k2 / 4).max(1),
        [_, ci, k, k2] => ci * k * k2,
        _ => 1,
    }
}

enum Source<'a> {
    Declare {
        params: Vec<NamedTensor>,
        buffers: Vec<NamedTensor>,
    },
    Bound {
        net: &'a Network,
        vars: &'a [Var],
    },
}

/// Layer-building context shared by all architectures.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    mode: Mode,
    source: Source<'a>,
    cursor: usize,
    buf_cursor: usize,
    updates: Vec<(usize, BatchStats)>,
}

impl Ctx<'_> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn param(&mut self, name: String, shape: &[usize], fill: f64) -> Result<Var> {
        let i = self.cursor;
        self.cursor += 1;
        match &mut self.source {
            Source::Declare { params, .. } => {
                let t = Tensor::full(shape, fill);
                params.push(NamedTensor {
                    name,
                    value: t.clone(),
                });
                Ok(self.g.constant(t))
            }
            Source::Bound { net, vars } => {
                let p = net
                    .params
                    .get(i)
                    .ok_or_else(|| Error::SpecMismatch(format!("missing parameter {name}")))?;
                if p.name != name || p.value.shape() != shape {
                    return Err(Error::SpecMismatch(format!(
                        "parameter {i} is {} {:?}, architecture expects {name} {shape:?}",
                        p.name,
                        p.value.shape()
                    )));
                }
                Ok(vars[i])
            }
        }
    }

    /// Returns the buffer index of the running mean; the variance follows it.
    fn bn_buffers(&mut self, name: &str, c: usize) -> Result<(usize, Vec<f64>, Vec<f64>)> {
        let i = self.buf_cursor;
        self.buf_cursor += 2;
        match &mut self.source {
            Source::Declare { buffers, .. } => {
                buffers.push(NamedTensor {
                    name: format!("{name}.running_mean"),
                    value: Tensor::zeros(&[c]),
                });
                buffers.push(NamedTensor {
                    name: format!("{name}.running_var"),
                    value: Tensor::full(&[c], 1.0),
                });
                Ok((i, vec![0.0; c], vec![1.0; c]))
            }
            Source::Bound { net, .. } => {
                let (m, v) = (&net.buffers[i], &net.buffers[i + 1]);
                if m.value.len() != c {
                    return Err(Error::SpecMismatch(format!("buffer {} size", m.name)));
                }
                Ok((i, m.value.data().to_vec(), v.value.data().to_vec()))
            }
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        x: Var,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Var> {
        let (_, c, _, _) = self.g.value(x).dims4()?;
        let w = self.param(format!("{name}.weight"), &[out_ch, c, kernel, kernel], 0.0)?;
        let b = if bias {
            self.param(format!("{name}.bias"), &[out_ch], 0.0)?
        } else {
            self.g.constant(Tensor::zeros(&[out_ch]))
        };
        self.g.conv2d(x, w, b, stride, pad)
    }

    pub fn deconv(
        &mut self,
        name: &str,
        x: Var,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Var> {
        let (_, c, _, _) = self.g.value(x).dims4()?;
        let w = self.param(format!("{name}.weight"), &[c, out_ch, kernel, kernel], 0.0)?;
        let b = if bias {
            self.param(format!("{name}.bias"), &[out_ch], 0.0)?
        } else {
            self.g.constant(Tensor::zeros(&[out_ch]))
        };
        self.g.conv_transpose2d(x, w, b, stride, pad)
    }

    pub fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let (_, c, _, _) = self.g.value(x).dims4()?;
        let gamma = self.param(format!("{name}.gamma"), &[c], 1.0)?;
        let beta = self.param(format!("{name}.beta"), &[c], 0.0)?;
        let (idx, mean, var) = self.bn_buffers(name, c)?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.updates.push((idx, stats));
                Ok(y)
            }
            Mode::Eval => self.g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS),
        }
    }

    /// conv → batch norm → ReLU.
    pub fn conv_bn_relu(&mut self, name: &str, x: Var, out_ch: usize, stride: usize) -> Result<Var> {
        let y = self.conv(name, x, out_ch, 3, stride, 1, false)?;
        let y = self.bn(&format!("{name}.bn"), y)?;
        Ok(self.g.relu(y))
    }
}
