//! Adam optimizer with bias correction, β1 = 0.9 and β2 = 0.99.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor4;

pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.99;
pub const DEFAULT_EPS: f32 = 1e-8;

/// First/second-moment estimates, parallel to the parameter store order.
pub struct AdamState {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, _, t)| Tensor4::zeros(t.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            step: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            m,
            v,
        }
    }

    pub fn moments(&self, index: usize) -> (&Tensor4, &Tensor4) {
        (&self.m[index], &self.v[index])
    }

    /// Restores moments (checkpoint loading); shapes must match.
    pub fn set_moments(&mut self, index: usize, m: Tensor4, v: Tensor4) -> Result<()> {
        if !self.m[index].same_shape(&m) || !self.v[index].same_shape(&v) {
            return Err(Error::Checkpoint(format!(
                "optimizer moment shape mismatch at parameter index {index}"
            )));
        }
        self.m[index] = m;
        self.v[index] = v;
        Ok(())
    }

    /// One optimizer step. `grads` is indexed like the store; `None` entries
    /// (parameters disconnected from this loss) are left untouched.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor4>],
        lr: f32,
    ) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "adam_step".into(),
                detail: format!("learning rate must be positive, got {lr}"),
            });
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 / (1.0 - (self.beta1 as f64).powf(t)) as f32;
        let c2 = 1.0 / (1.0 - (self.beta2 as f64).powf(t)) as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, grad) in grads.iter().enumerate() {
            let Some(gt) = grad else { continue };
            let id = store.id_at(i);
            if gt.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient {
                    param: store.name(id).to_string(),
                });
            }
            let p = store.value_mut(id);
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            for (((pv, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(gt.data())
                .zip(md.iter_mut())
                .zip(vd.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m * c1;
                let vhat = *v * c2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Shape4;

    fn one_param_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", Tensor4::full(Shape4::new(1, 1, 1, 1), v))
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut store = one_param_store(1.5);
        let mut adam = AdamState::new(&store);
        let grads = vec![Some(Tensor4::zeros(Shape4::new(1, 1, 1, 1)))];
        for _ in 0..5 {
            adam.apply(&mut store, &grads, 1e-3).unwrap();
        }
        let id = store.id_of("p").unwrap();
        assert_eq!(store.value(id).data()[0], 1.5);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With bias correction, step 1 moves by lr·g/(|g| + ε) ≈ lr.
        let mut store = one_param_store(0.0);
        let mut adam = AdamState::new(&store);
        let g = 0.37f32;
        let grads = vec![Some(Tensor4::full(Shape4::new(1, 1, 1, 1), g))];
        let lr = 2.5e-4;
        adam.apply(&mut store, &grads, lr).unwrap();
        let id = store.id_of("p").unwrap();
        let moved = -store.value(id).data()[0];
        assert!(
            (moved - lr).abs() < 1e-7,
            "first-step move {moved} vs lr {lr}"
        );
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = one_param_store(0.0);
        let mut adam = AdamState::new(&store);
        let grads = vec![Some(Tensor4::from_raw(
            Shape4::new(1, 1, 1, 1),
            vec![f32::NAN],
        ))];
        match adam.apply(&mut store, &grads, 1e-3) {
            Err(Error::NanGradient { param }) => assert_eq!(param, "p"),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut store = one_param_store(0.25);
            let mut adam = AdamState::new(&store);
            for k in 0..50 {
                let g = ((k * 7919 % 13) as f32 - 6.0) / 6.0;
                let grads = vec![Some(Tensor4::full(Shape4::new(1, 1, 1, 1), g))];
                adam.apply(&mut store, &grads, 1e-3).unwrap();
            }
            let id = store.id_of("p").unwrap();
            store.value(id).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hand_evaluated_two_step_recurrence() {
        // g constant 1.0, lr 0.1: step1 moves lr exactly (up to ε);
        // step2: m̂ = v̂ = 1 again for constant gradient → another lr step.
        let mut store = one_param_store(0.0);
        let mut adam = AdamState::new(&store);
        let grads = vec![Some(Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0))];
        adam.apply(&mut store, &grads, 0.1).unwrap();
        adam.apply(&mut store, &grads, 0.1).unwrap();
        let id = store.id_of("p").unwrap();
        let v = store.value(id).data()[0];
        assert!((v + 0.2).abs() < 1e-5, "two constant-gradient steps: {v}");
    }
}
