use rand::Rng;

use crate::tensor::Tensor;

/// Index of a trainable parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Index of a batchnorm running-statistics pair inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnStatsId(pub(crate) usize);

/// A trainable tensor with its gradient accumulator and Adam state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            value,
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Running mean / variance of one batchnorm layer. Not trainable.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub name: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Owns every parameter and buffer of a model, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<BnStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Adds a tensor drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_bn_stats(&mut self, name: impl Into<String>, channels: usize) -> BnStatsId {
        self.stats.push(BnStats {
            name: name.into(),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        });
        BnStatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn stats(&self, id: BnStatsId) -> &BnStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: BnStatsId) -> &mut BnStats {
        &mut self.stats[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[BnStats] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [BnStats] {
        &mut self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn state_shapes_follow_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.add_uniform("w", &[4, 3], 3, &mut rng);
        let p = store.get(id);
        assert_eq!(p.grad.shape(), p.value.shape());
        assert_eq!(p.adam_m.shape(), p.value.shape());
        assert_eq!(p.adam_v.shape(), p.value.shape());
        let bound = (1.0f64 / 3.0).sqrt();
        assert!(p.value.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn zero_grad_clears() {
        let mut store = ParamStore::new();
        let id = store.add("b", Tensor::zeros(&[2]));
        store.get_mut(id).grad.fill(3.0);
        store.zero_grad();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }
}
