//! Central-difference gradient checking against the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose ±h evaluations crossed a ReLU or max-pool branch
    /// boundary and were therefore not comparable.
    pub skipped: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Fixed projection weights so that non-scalar outputs reduce to a scalar
/// whose gradient exercises every output element differently.
fn projection(len: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667);
    Tensor::from_parts(vec![len], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn reduce(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    g.weighted_sum(out, &projection(n))
}

struct Tracker {
    max: f64,
    checked: usize,
    skipped: usize,
}

impl Tracker {
    fn new() -> Self {
        Self { max: 0.0, checked: 0, skipped: 0 }
    }

    fn observe(&mut self, analytic: f64, plus: (f64, u64), minus: (f64, u64), base_sig: u64, h: f64) {
        if plus.1 != base_sig || minus.1 != base_sig {
            self.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        self.max = self.max.max(rel_error(analytic, numeric));
        self.checked += 1;
    }

    fn report(self) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max,
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

/// Checks the gradient of `f` with respect to every element of `inputs`.
///
/// `f` builds an arbitrary-shaped output from leaf vars; it is reduced to a
/// scalar by a fixed random projection.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let s = reduce(&mut g, out)?;
        Ok((g.value(s).item(), g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = reduce(&mut g, out)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(s)?;

    let mut tracker = Tracker::new();
    let mut xs = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            tracker.observe(analytic.data()[j], plus, minus, base_sig, h);
        }
    }
    Ok(tracker.report())
}

/// Checks the gradient of a model loss with respect to every parameter in
/// `store`. `f` runs the forward on a graph bound to the (perturbed) store
/// and returns any-shaped output; each evaluation uses the same dropout seed.
pub fn grad_check_params<F>(store: &ParamStore, mode: Mode, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    const SEED: u64 = 17;
    let eval = |st: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::with_params(st, mode, SEED);
        let out = f(&mut g)?;
        let s = reduce(&mut g, out)?;
        Ok((g.value(s).item(), g.kink_signature()))
    };

    let mut g = Graph::with_params(store, mode, SEED);
    let out = f(&mut g)?;
    let s = reduce(&mut g, out)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(s)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    grads.accumulate_into(&mut analytic);

    let mut tracker = Tracker::new();
    let mut work = store.clone();
    for id in store.ids() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            tracker.observe(analytic.get(id).grad.data()[j], plus, minus, base_sig, h);
        }
    }
    Ok(tracker.report())
}
