use super::{lit, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Adaptive-moment optimizer over every entry of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

/// Serializable optimizer moments, flattened per parameter.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |s: &ParamStore<T>| {
            (0..s.len())
                .map(|i| Tensor::zeros(s.get(i).raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: zeros(store),
            v: zeros(store),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "gradient list does not match store");
        self.step += 1;
        let t = self.step as f64;
        let b1: T = lit(self.beta1);
        let b2: T = lit(self.beta2);
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let step_size: T = lit(self.lr * bc2.sqrt() / bc1.max(f64::MIN_POSITIVE));
        let eps: T = lit(self.eps * bc2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(i);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p = *p - step_size * *m / (v.sqrt() + eps);
                });
        }
    }

    pub fn state(&self) -> AdamState {
        let flat = |xs: &Vec<Tensor<T>>| {
            xs.iter()
                .map(|t| t.iter().map(|x| x.to_f64().unwrap()).collect())
                .collect()
        };
        AdamState {
            step: self.step,
            m: flat(&self.m),
            v: flat(&self.v),
        }
    }

    pub fn load_state(&mut self, state: &AdamState) -> Result<(), String> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err("optimizer state does not match parameter count".into());
        }
        for (dst, src) in self.m.iter_mut().zip(&state.m).chain(self.v.iter_mut().zip(&state.v)) {
            if dst.len() != src.len() {
                return Err("optimizer state tensor size mismatch".into());
            }
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = lit(s);
            }
        }
        self.step = state.step;
        Ok(())
    }
}
