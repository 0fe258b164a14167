//! Parameter storage and the layers the models are assembled from.
//!
//! Parameters live in a [`ParamStore`]; a [`Session`] binds them onto a fresh
//! [`Graph`] for one forward/backward pass. Batch-norm running statistics are
//! stored alongside as non-trainable buffers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::ops::{NormMode, Padding};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Uniform `U(-bound, bound)` initialisation.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// One forward (and optionally backward) pass over a parameter store.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        let bound = vec![None; store.len()];
        Self { graph: Graph::new(), store, bound, train, rng }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// The graph node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let value = p.value.clone();
        let var = if p.trainable && self.train { self.graph.param(value) } else { self.graph.constant(value) };
        self.bound[id.0] = Some(var);
        var
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.graph.value(var)
    }

    /// Backpropagate from `loss` and return one gradient per trainable
    /// parameter (zeros for parameters that did not take part).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        Ok(self
            .store
            .params
            .iter()
            .zip(&self.bound)
            .map(|(p, b)| {
                p.trainable.then(|| match b.and_then(|v| grads.take(v)) {
                    Some(g) => g,
                    None => Tensor::zeros(p.value.shape()),
                })
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[c_out, c_in, kernel], bound, rng), true);
        let bias = store.add(format!("{name}.bias"), uniform(&[c_out], bound, rng), true);
        Self { weight, bias, stride, padding }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training mode normalises with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.train {
            let (out, stats) = s.graph.batch_norm1d(x, gamma, beta, NormMode::Train, self.eps)?;
            let stats = stats.expect("training mode returns statistics");
            let m = self.momentum;
            for (r, v) in s.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in s.store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.unbiased_var) {
                *r = (1.0 - m) * *r + m * v;
            }
            Ok(out)
        } else {
            let rm = s.store.get(self.running_mean).data().to_vec();
            let rv = s.store.get(self.running_var).data().to_vec();
            let mode = NormMode::Eval { running_mean: &rm, running_var: &rv };
            Ok(s.graph.batch_norm1d(x, gamma, beta, mode, self.eps)?.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(&[outputs, inputs], bound, rng), true),
            bias: store.add(format!("{name}.bias"), uniform(&[outputs], bound, rng), true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.dense(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(&[4 * hidden, inputs], bound, rng), true),
            w_hh: store.add(format!("{name}.w_hh"), uniform(&[4 * hidden, hidden], bound, rng), true),
            bias: store.add(format!("{name}.bias"), uniform(&[4 * hidden], bound, rng), true),
            hidden,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w_ih = s.param(self.w_ih);
        let w_hh = s.param(self.w_hh);
        let b = s.param(self.bias);
        s.graph.lstm(x, w_ih, w_hh, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return arg_err(format!("dropout probability {p} outside [0, 1)"));
        }
        Ok(Self { p })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let train = s.train;
        s.graph.dropout(x, self.p, train, &mut *s.rng)
    }
}
