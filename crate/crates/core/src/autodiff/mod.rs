//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation together with the values its
//! backward rule needs. [`Graph::backward`] walks the record in reverse and
//! accumulates gradients into the [`ParamStore`] the parameters came from.

mod graph;
mod param;
mod tensor;

pub use graph::{bce, sigmoid_scalar, Graph, Var, BCE_EPS, COSINE_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;
    use crate::error::Result;
    use crate::scalar::Scalar;

    /// Worst relative error between backward gradients and central differences
    /// over every parameter entry. `floor` bounds the denominator from below.
    pub fn max_rel_error<S: Scalar>(
        store: &mut ParamStore<S>,
        h: f64,
        floor: f64,
        build: impl Fn(&mut Graph<S>, &ParamStore<S>) -> Result<Var>,
    ) -> f64 {
        store.zero_grads();
        let mut g = Graph::new();
        let loss = build(&mut g, store).unwrap();
        g.backward(loss, store).unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        let mut worst: f64 = 0.0;
        for id in ids {
            for k in 0..store.get(id).value.len() {
                let orig = store.get(id).value.data()[k];
                let analytic = store.get(id).grad.data()[k].as_f64();
                let mut eval = |v: S| {
                    store.get_mut(id).value.data_mut()[k] = v;
                    let mut g = Graph::new();
                    let l = build(&mut g, store).unwrap();
                    g.value(l).item().as_f64()
                };
                let plus = eval(orig + S::lit(h));
                let minus = eval(orig - S::lit(h));
                store.get_mut(id).value.data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(floor);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
        worst
    }
}
