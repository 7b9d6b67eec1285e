//! Named parameter storage and the forward-pass context shared by all blocks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Gradients, Graph, NormStats, ObservedStats, Tensor, Var, BN_EPS};
use crate::scalar::Real;

/// Index of a learnable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Learnable tensor with a stable dotted path name.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Non-learnable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    buffers: Vec<Buffer<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: usize) -> &Tensor<S> {
        &self.buffers[id].tensor
    }

    pub fn buffer_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.buffers[id].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<usize> {
        self.buffers.iter().position(|b| b.name == name)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flat(&self) -> Vec<S> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Replaces the value of parameter `name`, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Replaces the value of buffer `name`, keeping its shape.
    pub fn set_buffer(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let id = self.find_buffer(name).ok_or_else(|| Error::Config(format!("no buffer named {name}")))?;
        let slot = &mut self.buffers[id].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "buffer {name}: shape {:?} does not match {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Folds batch statistics from a train-mode pass into the running
    /// statistics: `running = (1 - momentum) * running + momentum * batch`.
    pub fn fold_observed(&mut self, observed: &[ObservedStats<S>], momentum: S) {
        for obs in observed {
            let keep = S::one() - momentum;
            for (r, &b) in self.buffers[obs.key].tensor.data_mut().iter_mut().zip(&obs.mean) {
                *r = keep * *r + momentum * b;
            }
            for (r, &b) in self.buffers[obs.key + 1].tensor.data_mut().iter_mut().zip(&obs.var) {
                *r = keep * *r + momentum * b;
            }
        }
    }

    /// Gradients for every parameter bound on `graph`, indexed by parameter id.
    pub fn collect_grads(&self, graph: &Graph<S>, grads: &Gradients<S>) -> Vec<Option<Tensor<S>>> {
        let mut out: Vec<Option<Tensor<S>>> = (0..self.params.len()).map(|_| None).collect();
        for (id, var) in graph.bound_params() {
            if let Some(g) = grads.get(var) {
                out[id] = Some(Tensor::new(graph.shape(var), g.to_vec()).unwrap());
            }
        }
        out
    }
}

/// Initial value of a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

/// Registers parameters with deterministic initial values.
///
/// Values are drawn in `f64` and rounded to `S`, so stores of different
/// precision built from one seed agree up to rounding.
pub struct ParamBuilder<S> {
    store: ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Real> ParamBuilder<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.store.find(&name).is_none(), "duplicate parameter {name}");
        let bound = match init {
            Init::Uniform(b) => Some(b),
            Init::FanIn(f) => Some(1.0 / num_traits::Float::sqrt(f.max(1) as f64)),
            _ => None,
        };
        let tensor = match (init, bound) {
            (Init::Zeros, _) => Tensor::zeros(shape),
            (Init::Ones, _) => Tensor::full(shape, S::one()),
            (_, Some(b)) => {
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-b..=b)))
            }
            _ => unreachable!(),
        };
        self.store.params.push(Parameter { name, tensor });
        ParamId(self.store.params.len() - 1)
    }

    pub fn add_norm(&mut self, prefix: &str, features: usize) -> Norm {
        let scale = self.add(format!("{prefix}.scale"), &[features], Init::Ones);
        let shift = self.add(format!("{prefix}.shift"), &[features], Init::Zeros);
        let key = self.store.buffers.len();
        self.store.buffers.push(Buffer {
            name: format!("{prefix}.running_mean"),
            tensor: Tensor::zeros(&[features]),
        });
        self.store.buffers.push(Buffer {
            name: format!("{prefix}.running_var"),
            tensor: Tensor::full(&[features], S::one()),
        });
        Norm { scale, shift, key }
    }

    pub fn finish(self) -> ParamStore<S> {
        self.store
    }
}

/// Handles of a batch-norm layer: learnable scale/shift plus two buffers
/// (`key` = running mean, `key + 1` = running variance).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub key: usize,
}

/// Whether batch norm uses batch statistics (training) or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Borrowed state for one forward pass.
pub struct Ctx<'a, S> {
    pub graph: &'a mut Graph<S>,
    pub store: &'a ParamStore<S>,
    pub mode: Mode,
}

impl<'a, S: Real> Ctx<'a, S> {
    pub fn new(graph: &'a mut Graph<S>, store: &'a ParamStore<S>, mode: Mode) -> Self {
        Self { graph, store, mode }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(id.0, self.store.param(id))
    }

    /// Batch norm over `axis` with this context's mode.
    pub fn norm(&mut self, x: Var, norm: &Norm, axis: usize) -> Result<Var> {
        let scale = self.p(norm.scale);
        let shift = self.p(norm.shift);
        let stats = match self.mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running {
                mean: self.store.buffer(norm.key).data(),
                var: self.store.buffer(norm.key + 1).data(),
            },
        };
        self.graph.batch_norm(x, scale, shift, axis, stats, S::lit(BN_EPS), norm.key)
    }
}

/// [`grad_check`] over every parameter of `store` plus `extra` inputs. `f`
/// receives the extra inputs' handles; parameters are reached through the
/// context as usual.
pub fn grad_check_store<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    extra: &[(String, Tensor<f64>)],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let n = store.params().len();
    let mut all: Vec<(String, Tensor<f64>)> = store.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    all.extend(extra.iter().cloned());
    grad_check(
        &all,
        |g, vars| {
            for (i, &v) in vars[..n].iter().enumerate() {
                g.bind_param(i, v);
            }
            let mut ctx = Ctx::new(g, store, mode);
            f(&mut ctx, &vars[n..])
        },
        opts,
    )
}
