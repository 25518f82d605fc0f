//! Executors run model code either on the differentiable [`Graph`] or
//! eagerly on tensors, so layers are written once.

use std::borrow::Cow;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::gru::{gru_layer, Direction, GruWeights};
use crate::ops;
use crate::params::{BnStatsId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// The operations the network needs, over an executor-specific value type.
pub trait Exec {
    type V: Clone;

    fn param(&mut self, id: ParamId) -> Self::V;
    fn input(&mut self, t: Tensor) -> Self::V;
    fn value<'v>(&'v self, v: &'v Self::V) -> &'v Tensor;
    fn mode(&self) -> Mode;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn batchnorm2d(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, stats: BnStatsId) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn attend(&mut self, f: &Self::V, m: &Self::V) -> Result<Self::V>;
    fn maxpool2d(&mut self, x: &Self::V) -> Result<Self::V>;
    fn upsample_nearest2(&mut self, x: &Self::V) -> Result<Self::V>;
    fn temporal_collapse(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat_last(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn gru(&mut self, x: &Self::V, w: [&Self::V; 4], dir: Direction) -> Result<Self::V>;
    fn dropout(&mut self, x: &Self::V, rate: f64) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
}

impl Exec for Graph<'_> {
    type V = Var;

    fn param(&mut self, id: ParamId) -> Var {
        Graph::param(self, id)
    }
    fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }
    fn value<'v>(&'v self, v: &'v Var) -> &'v Tensor {
        Graph::value(self, *v)
    }
    fn mode(&self) -> Mode {
        Graph::mode(self)
    }
    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        Graph::conv2d(self, *x, *w, b.copied())
    }
    fn batchnorm2d(&mut self, x: &Var, gamma: &Var, beta: &Var, stats: BnStatsId) -> Result<Var> {
        Graph::batchnorm2d(self, *x, *gamma, *beta, Some(stats))
    }
    fn relu(&mut self, x: &Var) -> Var {
        Graph::relu(self, *x)
    }
    fn sigmoid(&mut self, x: &Var) -> Var {
        Graph::sigmoid(self, *x)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }
    fn attend(&mut self, f: &Var, m: &Var) -> Result<Var> {
        Graph::attend(self, *f, *m)
    }
    fn maxpool2d(&mut self, x: &Var) -> Result<Var> {
        Graph::maxpool2d(self, *x)
    }
    fn upsample_nearest2(&mut self, x: &Var) -> Result<Var> {
        Graph::upsample_nearest2(self, *x)
    }
    fn temporal_collapse(&mut self, x: &Var) -> Result<Var> {
        Graph::temporal_collapse(self, *x)
    }
    fn concat_last(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::concat_last(self, *a, *b)
    }
    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        Graph::linear(self, *x, *w, *b)
    }
    fn gru(&mut self, x: &Var, w: [&Var; 4], dir: Direction) -> Result<Var> {
        Graph::gru(self, *x, [*w[0], *w[1], *w[2], *w[3]], dir)
    }
    fn dropout(&mut self, x: &Var, rate: f64) -> Result<Var> {
        Graph::dropout(self, *x, rate)
    }
    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        Graph::reshape(self, *x, shape)
    }
}

/// Eval-mode executor that keeps no tape. Intermediates are freed as soon as
/// the model code drops them, which keeps whole-clip inference affordable.
pub struct Eager<'s> {
    store: &'s ParamStore,
}

impl<'s> Eager<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store }
    }
}

impl<'s> Exec for Eager<'s> {
    type V = Cow<'s, Tensor>;

    fn param(&mut self, id: ParamId) -> Self::V {
        Cow::Borrowed(self.store.value(id))
    }
    fn input(&mut self, t: Tensor) -> Self::V {
        Cow::Owned(t)
    }
    fn value<'v>(&'v self, v: &'v Self::V) -> &'v Tensor {
        v.as_ref()
    }
    fn mode(&self) -> Mode {
        Mode::Eval
    }
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        ops::conv2d(x, w, b.map(|b| b.as_ref())).map(Cow::Owned)
    }
    fn batchnorm2d(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, stats: BnStatsId) -> Result<Self::V> {
        let s = self.store.stats(stats);
        ops::batchnorm2d_eval(x, gamma, beta, &s.mean, &s.var).map(Cow::Owned)
    }
    fn relu(&mut self, x: &Self::V) -> Self::V {
        Cow::Owned(ops::relu(x))
    }
    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        Cow::Owned(ops::sigmoid(x))
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::add(a, b).map(Cow::Owned)
    }
    fn attend(&mut self, f: &Self::V, m: &Self::V) -> Result<Self::V> {
        ops::attend(f, m).map(Cow::Owned)
    }
    fn maxpool2d(&mut self, x: &Self::V) -> Result<Self::V> {
        ops::maxpool2d(x).map(|(t, _)| Cow::Owned(t))
    }
    fn upsample_nearest2(&mut self, x: &Self::V) -> Result<Self::V> {
        ops::upsample_nearest2(x).map(Cow::Owned)
    }
    fn temporal_collapse(&mut self, x: &Self::V) -> Result<Self::V> {
        ops::temporal_collapse(x).map(Cow::Owned)
    }
    fn concat_last(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::concat_last(a, b).map(Cow::Owned)
    }
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::linear(x, w, b).map(Cow::Owned)
    }
    fn gru(&mut self, x: &Self::V, w: [&Self::V; 4], dir: Direction) -> Result<Self::V> {
        let weights = GruWeights {
            w_ih: w[0],
            w_hh: w[1],
            b_ih: w[2],
            b_hh: w[3],
        };
        gru_layer(x, weights, dir).map(|(t, _)| Cow::Owned(t))
    }
    fn dropout(&mut self, x: &Self::V, _rate: f64) -> Result<Self::V> {
        Ok(x.clone())
    }
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        x.as_ref().clone().reshape(shape).map(Cow::Owned)
    }
}
