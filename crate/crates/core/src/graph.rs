//! Operation tape for reverse-mode differentiation.
//!
//! A [`Graph`] records each operation as it runs. [`Graph::backward`]
//! consumes the tape and visits every record once, newest first, releasing
//! activations as it goes.

use std::collections::HashMap;
use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::gru::{gru_layer, gru_layer_backward, Direction, GruCache, GruWeights};
use crate::ops::{self, BnBatch};
use crate::params::{BnStatsId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Train mode uses batch statistics and active dropout; eval mode uses
/// running statistics and disables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var },
    BnTrain { x: Var, gamma: Var, beta: Var, batch: BnBatch },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Tensor, var: Tensor },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Attend { f: Var, m: Var },
    Collapse(Var),
    Concat(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Gru { x: Var, w: [Var; 4], dir: Direction, cache: GruCache },
    Dropout { x: Var, mask: Tensor },
    Reshape(Var),
    Bce { pred: Var, target: Tensor },
    WeightedSum { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batchnorm running-statistic updates produced by a training forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub stats: BnStatsId,
    pub batch: BnBatch,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let s = store.stats_mut(self.stats);
        let (mut m, mut v) = (s.mean.data().to_vec(), s.var.data().to_vec());
        self.batch.blend(&mut m, &mut v);
        s.mean.data_mut().copy_from_slice(&m);
        s.var.data_mut().copy_from_slice(&v);
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

/// Tape of executed operations.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
    kinks: std::collections::hash_map::DefaultHasher,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A free-standing graph in training mode (no parameter store).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
            kinks: Default::default(),
        }
    }

    /// A graph reading parameters from `store`. `seed` drives dropout.
    pub fn with_params(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            store: Some(store),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.value(id).clone(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    /// Running-statistic updates gathered so far (train mode only).
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Hash of every piecewise-linear branch taken so far (ReLU signs,
    /// max-pool winners). Two forwards with equal signatures lie on the same
    /// smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Conv { x, w, b }))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(x))?;
        for &a in &argmax {
            self.kinks.write_usize(a);
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_nearest2(self.value(x))?;
        Ok(self.push(out, Op::Upsample { x }))
    }

    /// Batchnorm in the graph's mode. `stats` is required in eval mode and
    /// receives an update in train mode.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, stats: Option<BnStatsId>) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (out, batch) = ops::batchnorm2d_train(self.value(x), self.value(gamma), self.value(beta))?;
                if let Some(stats) = stats {
                    self.bn_updates.push(BnUpdate { stats, batch: batch.clone() });
                }
                Ok(self.push(out, Op::BnTrain { x, gamma, beta, batch }))
            }
            Mode::Eval => {
                let stats = stats.ok_or_else(|| contract("batchnorm2d", "eval mode needs running statistics"))?;
                let s = self.store.expect("graph has no parameter store").stats(stats);
                let (mean, var) = (s.mean.clone(), s.var.clone());
                let out = ops::batchnorm2d_eval(self.value(x), self.value(gamma), self.value(beta), &mean, &var)?;
                Ok(self.push(out, Op::BnEval { x, gamma, beta, mean, var }))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = ops::relu(v);
        for chunk in v.data().chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &a)| acc | (u64::from(a > 0.0) << i));
            self.kinks.write_u64(bits);
        }
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = ops::tanh(self.value(x));
        self.push(out, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `(1 + m) ⊙ f`.
    pub fn attend(&mut self, f: Var, m: Var) -> Result<Var> {
        let out = ops::attend(self.value(f), self.value(m))?;
        Ok(self.push(out, Op::Attend { f, m }))
    }

    pub fn temporal_collapse(&mut self, x: Var) -> Result<Var> {
        let out = ops::temporal_collapse(self.value(x))?;
        Ok(self.push(out, Op::Collapse(x)))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_last(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// GRU layer with weights `[w_ih, w_hh, b_ih, b_hh]`.
    pub fn gru(&mut self, x: Var, w: [Var; 4], dir: Direction) -> Result<Var> {
        let weights = GruWeights {
            w_ih: self.value(w[0]),
            w_hh: self.value(w[1]),
            b_ih: self.value(w[2]),
            b_hh: self.value(w[3]),
        };
        let (out, cache) = gru_layer(self.value(x), weights, dir)?;
        Ok(self.push(out, Op::Gru { x, w, dir, cache }))
    }

    /// Inverted dropout in train mode; identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate == 0.0 {
            if !(0.0..1.0).contains(&rate) {
                return Err(contract("dropout", format!("rate {rate} outside [0,1)")));
            }
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let mask = ops::dropout_mask(&shape, rate, &mut self.rng)?;
        let out = self.value(x).zip_map(&mask, |a, b| a * b);
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Mean binary cross-entropy against a constant target.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let loss = ops::bce_loss(self.value(pred), target)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target: target.clone() }))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(contract("weighted_sum", "weights do not match input size"));
        }
        let s = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.clone() }))
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract("backward", "loss must be a scalar"));
        }
        let params: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let mut nodes = self.nodes;
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        let mut ops_: Vec<Option<Op>> = Vec::with_capacity(nodes.len());
        for n in nodes.drain(..) {
            values.push(Some(n.value));
            ops_.push(Some(n.op));
        }

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..values.len()).rev() {
            let op = ops_[i].take().unwrap();
            let out = values[i].take().unwrap();
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| values[v.0].as_ref().expect("tape value released early");
            match op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b } => {
                    let (dx, dw, db) = ops::conv2d_backward(val(x), val(w), &g);
                    acc(&mut grads, x, dx);
                    acc(&mut grads, w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, b, db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2d_backward(val(x).shape(), &argmax, &g);
                    acc(&mut grads, x, dx);
                }
                Op::Upsample { x } => {
                    let dx = ops::upsample_nearest2_backward(val(x).shape(), &g);
                    acc(&mut grads, x, dx);
                }
                Op::BnTrain { x, gamma, beta, batch } => {
                    let (dx, dg, db) = ops::batchnorm2d_train_backward(val(x), val(gamma), &batch, &g);
                    acc(&mut grads, x, dx);
                    acc(&mut grads, gamma, dg);
                    acc(&mut grads, beta, db);
                }
                Op::BnEval { x, gamma, beta, mean, var } => {
                    let (dx, dg, db) = ops::batchnorm2d_eval_backward(val(x), val(gamma), &mean, &var, &g);
                    acc(&mut grads, x, dx);
                    acc(&mut grads, gamma, dg);
                    acc(&mut grads, beta, db);
                }
                Op::Relu(x) => {
                    let dx = val(x).zip_map(&g, |a, gv| if a > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = out.zip_map(&g, |s, gv| gv * s * (1.0 - s));
                    acc(&mut grads, x, dx);
                }
                Op::Tanh(x) => {
                    let dx = out.zip_map(&g, |t, gv| gv * (1.0 - t * t));
                    acc(&mut grads, x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Op::Attend { f, m } => {
                    let df = val(m).zip_map(&g, |mv, gv| (1.0 + mv) * gv);
                    let dm = val(f).zip_map(&g, |fv, gv| fv * gv);
                    acc(&mut grads, f, df);
                    acc(&mut grads, m, dm);
                }
                Op::Collapse(x) => {
                    let dx = ops::temporal_collapse_backward(val(x).shape(), &g);
                    acc(&mut grads, x, dx);
                }
                Op::Concat(a, b) => {
                    let (ga, gb) = ops::concat_last_backward(val(a).shape(), val(b).shape(), &g);
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(val(x), val(w), &g);
                    acc(&mut grads, x, dx);
                    acc(&mut grads, w, dw);
                    acc(&mut grads, b, db);
                }
                Op::Gru { x, w, dir, cache } => {
                    let weights = GruWeights {
                        w_ih: val(w[0]),
                        w_hh: val(w[1]),
                        b_ih: val(w[2]),
                        b_hh: val(w[3]),
                    };
                    let (dx, dwi, dwh, dbi, dbh) = gru_layer_backward(val(x), weights, dir, &cache, &g);
                    acc(&mut grads, x, dx);
                    for (v, d) in w.into_iter().zip([dwi, dwh, dbi, dbh]) {
                        acc(&mut grads, v, d);
                    }
                }
                Op::Dropout { x, mask } => {
                    acc(&mut grads, x, g.zip_map(&mask, |a, b| a * b));
                }
                Op::Reshape(x) => {
                    let shape = val(x).shape().to_vec();
                    acc(&mut grads, x, g.reshape(&shape)?);
                }
                Op::Bce { pred, target } => {
                    let dp = ops::bce_loss_backward(val(pred), &target, g.item());
                    acc(&mut grads, pred, dp);
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.item();
                    let dx = weights.map(|w| w * s).reshape(val(x).shape())?;
                    acc(&mut grads, x, dx);
                }
            }
        }
        Ok(Gradients { grads, params })
    }
}
