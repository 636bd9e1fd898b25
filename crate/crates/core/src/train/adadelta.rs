use crate::autodiff::{ParamGrads, ParamSet, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaDelta {
    pub rho: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl Default for AdaDelta {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-6,
            learning_rate: 1.0,
        }
    }
}

/// Running averages of squared gradients and squared updates.
#[derive(Clone, Debug)]
pub struct AdaDeltaState<T> {
    pub sq_grad: Vec<Vec<T>>,
    pub sq_update: Vec<Vec<T>>,
}

impl<T: Real> AdaDeltaState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.tensor.numel()])
            .collect();
        Self {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

impl AdaDelta {
    /// One update over every trainable parameter; parameters without a
    /// gradient buffer are stepped with a zero gradient. A non-finite
    /// gradient anywhere rejects the whole step and leaves everything as it
    /// was.
    pub fn step<T: Real>(
        &self,
        params: &mut ParamSet<T>,
        grads: &ParamGrads<T>,
        state: &mut AdaDeltaState<T>,
    ) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(params.get(id).name.clone()));
            }
        }
        let rho = T::of(self.rho);
        let one_minus = T::one() - rho;
        let eps = T::of(self.epsilon);
        let lr = T::of(self.learning_rate);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.get(id).trainable {
                continue;
            }
            let g = grads.get(id);
            let eg = &mut state.sq_grad[id.0];
            let ed = &mut state.sq_update[id.0];
            let theta = params.tensor_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                eg[i] = rho * eg[i] + one_minus * gi * gi;
                let delta = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * gi;
                ed[i] = rho * ed[i] + one_minus * delta * delta;
                theta[i] += lr * delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn setup() -> (ParamSet<f64>, crate::autodiff::ParamId) {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::vector(vec![0.5, -1.5]), true);
        (p, id)
    }

    fn grads_for(params: &ParamSet<f64>, id: crate::autodiff::ParamId, g: &[f64]) -> ParamGrads<f64> {
        // sum(w * g) has gradient g
        let mut tape = Tape::with_params(params);
        let w = tape.param(id);
        let c = tape.constant_vec(g.to_vec());
        let p = tape.mul(w, c).unwrap();
        let l = tape.sum(p);
        let mut grads = ParamGrads::new(params);
        tape.backward_into(l, &mut grads).unwrap();
        grads
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut params, id) = setup();
        let before = params.clone();
        let mut state = AdaDeltaState::new(&params);
        let grads = grads_for(&params, id, &[0.0, 0.0]);
        for _ in 0..5 {
            AdaDelta::default().step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params, before);
        let empty = ParamGrads::new(&params);
        AdaDelta::default().step(&mut params, &empty, &mut state).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_magnitude() {
        let (mut params, id) = setup();
        let mut state = AdaDeltaState::new(&params);
        let grads = grads_for(&params, id, &[1.0, 1.0]);
        AdaDelta::default().step(&mut params, &grads, &mut state).unwrap();
        let expect = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((expect - -4.47e-3).abs() < 1e-5);
        let w = params.tensor(id).data();
        assert!((w[0] - (0.5 + expect)).abs() < 1e-15);
        assert!((w[1] - (-1.5 + expect)).abs() < 1e-15);
        // equal gradients give equal updates
        assert_eq!(state.sq_update[0][0], state.sq_update[0][1]);
        assert_eq!(state.sq_grad[0][0], state.sq_grad[0][1]);
        assert!(state.sq_grad[0].iter().chain(&state.sq_update[0]).all(|&v| v >= 0.0));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut params, id) = setup();
        let before = params.clone();
        let mut state = AdaDeltaState::new(&params);
        let grads = grads_for(&params, id, &[f64::NAN, 1.0]);
        let err = AdaDelta::default().step(&mut params, &grads, &mut state).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(params, before);
    }
}
