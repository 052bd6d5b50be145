//! Convolutional critic used both for generator pretraining and as the weak
//! discriminator of the alpha trainer.

use crate::autograd::{lit, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::io::{sha256_hex, Container};
use crate::nn::{Bind, Conv, Init, Linear};
use crate::rng::substream;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CRITIC_CONTAINER: &str = "critic";

/// What a critic was trained for. Trainer refuses pretraining critics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticRole {
    Pretrain,
    Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub resolution: usize,
    /// Width of the first stage; doubles per halving up to `max_width`.
    pub base_width: usize,
    pub max_width: usize,
}

impl CriticSpec {
    pub fn new(resolution: usize, base_width: usize, max_width: usize) -> Self {
        Self {
            resolution,
            base_width,
            max_width,
        }
    }

    fn stages(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    fn width(&self, stage: usize) -> usize {
        (self.base_width << stage).min(self.max_width)
    }
}

/// 1x1 from-RGB, then conv3x3 + average-pool stages down to 4x4, then a
/// two-layer head producing one logit per image.
#[derive(Clone, Debug)]
pub struct Critic<T: Scalar> {
    pub spec: CriticSpec,
    pub role: CriticRole,
    pub store: ParamStore<T>,
    from_rgb: Conv,
    stages: Vec<Conv>,
    last: Conv,
    fc: Linear,
    out: Linear,
}

impl<T: Scalar> Critic<T> {
    pub fn new(spec: CriticSpec, role: CriticRole, seed: u64) -> Result<Self> {
        if spec.resolution < 8 || !spec.resolution.is_power_of_two() {
            return invalid("critic resolution must be a power of two >= 8");
        }
        if spec.base_width == 0 || spec.max_width == 0 {
            return invalid("critic widths must be positive");
        }
        let mut rng = substream(seed, "critic_init", 0);
        let mut store = ParamStore::new();
        let c0 = spec.width(0);
        let from_rgb = Conv::new(&mut store, "from_rgb", 3, c0, 1, 1, true, Init::Normal, &mut rng);
        let mut stages = Vec::new();
        for s in 0..spec.stages() {
            let (ci, co) = (spec.width(s), spec.width(s + 1));
            stages.push(Conv::new(&mut store, &format!("stage{s}"), ci, co, 3, 1, true, Init::Normal, &mut rng));
        }
        let cl = spec.width(spec.stages());
        let last = Conv::new(&mut store, "last", cl, cl, 3, 1, true, Init::Normal, &mut rng);
        let fc = Linear::new(&mut store, "fc", cl * 16, cl, 0.0, 1.0, Init::Normal, &mut rng);
        let out = Linear::new(&mut store, "out", cl, 1, 0.0, 1.0, Init::Normal, &mut rng);
        Ok(Self {
            spec,
            role,
            store,
            from_rgb,
            stages,
            last,
            fc,
            out,
        })
    }

    fn act(t: &Tape<T>, x: Var) -> Var {
        t.mul_scalar(t.leaky_relu(x, lit(0.2)), lit(2f64.sqrt()))
    }

    /// Logits `[N, 1]` for images `[N, 3, m, m]`.
    pub fn forward_with(&self, b: &Bind<T>, x: Var) -> Var {
        let t = b.tape;
        let mut h = Self::act(t, self.from_rgb.forward(b, x));
        for conv in &self.stages {
            h = Self::act(t, conv.forward(b, h));
            h = t.avg_pool(h, 2);
        }
        h = Self::act(t, self.last.forward(b, h));
        let s = t.shape(h);
        h = t.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        h = Self::act(t, self.fc.forward(b, h));
        self.out.forward(b, h)
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var, trainable: bool) -> Var {
        self.forward_with(&Bind::new(tape, &self.store, trainable), x)
    }

    /// Logits for a batch of images, without recording gradients.
    pub fn logits(&self, images: &Tensor<T>) -> Vec<f64> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.forward(&tape, x, false);
        tape.value(y).iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&("critic", &self.spec)).unwrap();
        for (name, t) in self.store.iter() {
            bytes.extend_from_slice(name.as_bytes());
            for x in t.iter() {
                bytes.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "spec": self.spec,
            "role": self.role,
            "fingerprint": self.fingerprint(),
        });
        let mut c = Container::new(CRITIC_CONTAINER, meta);
        for (name, t) in self.store.iter() {
            c.push(name, t);
        }
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        if c.kind != CRITIC_CONTAINER {
            return Err(Error::format(path, format!("expected a critic, found '{}'", c.kind)));
        }
        let spec: CriticSpec =
            serde_json::from_value(c.meta["spec"].clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let role: CriticRole =
            serde_json::from_value(c.meta["role"].clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let mut critic = Self::new(spec, role, 0)?;
        if critic.store.len() != c.tensors.len() {
            return Err(Error::format(path, "critic tensor count mismatch"));
        }
        for (i, (name, t)) in c.tensors.iter().enumerate() {
            if critic.store.name(i) != name || critic.store.get(i).shape() != t.shape() {
                return Err(Error::format(path, format!("unexpected critic tensor {name}")));
            }
            *critic.store.get_mut(i) = t.mapv(lit::<T>);
        }
        Ok(critic)
    }
}

/// Finite-difference R1 surrogate. Its parameter gradient approximates
/// `gamma/2 * grad_theta mean ||grad_x D(x)||^2` through the directional
/// difference `(D(x + eps g) - D(x - eps g)) / (2 eps)` with `g = grad_x D`
/// held fixed. Returns the surrogate loss var and the penalty value.
pub fn r1_surrogate<T: Scalar>(critic: &Critic<T>, tape: &Tape<T>, real: &Tensor<T>, gamma: f64) -> (Var, f64) {
    let n = real.shape()[0];
    let probe = Tape::new();
    let x = probe.leaf(real.clone());
    let logits = critic.forward(&probe, x, false);
    let grads = probe.backward(probe.sum(logits));
    let g = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(real.raw_dim()));
    let sq: f64 = g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
    let penalty = 0.5 * gamma * sq / n as f64;
    let rms = (sq / g.len() as f64).sqrt();
    let eps = T::epsilon().to_f64().unwrap().sqrt() / (rms + 1e-12);
    let step = g.mapv(|v| v * lit(eps));
    let plus = tape.constant(real + &step);
    let minus = tape.constant(real - &step);
    let lp = critic.forward(tape, plus, true);
    let lm = critic.forward(tape, minus, true);
    let diff = tape.sum(tape.sub(lp, lm));
    (tape.mul_scalar(diff, lit(gamma / (2.0 * eps * n as f64))), penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    #[test]
    fn logits_are_finite_and_seeded() {
        let spec = CriticSpec::new(16, 4, 8);
        let a = Critic::<f64>::new(spec.clone(), CriticRole::Alpha, 3).unwrap();
        let b = Critic::<f64>::new(spec, CriticRole::Alpha, 3).unwrap();
        let x = normal_tensor::<f64>(&mut substream(1, "x", 0), &[2, 3, 16, 16]);
        let la = a.logits(&x);
        assert_eq!(la.len(), 2);
        assert!(la.iter().all(|v| v.is_finite()));
        assert_eq!(la, b.logits(&x));
    }

    #[test]
    fn r1_surrogate_matches_exact_parameter_gradient() {
        // Exact reference: gradient of 0.5*gamma*||g||^2/n by central
        // differences over a few parameters.
        let spec = CriticSpec::new(8, 2, 2);
        let critic = Critic::<f64>::new(spec, CriticRole::Alpha, 5).unwrap();
        let real = normal_tensor::<f64>(&mut substream(2, "x", 0), &[2, 3, 8, 8]);
        let gamma = 1.0;
        let tape = Tape::new();
        let (loss, _) = r1_surrogate(&critic, &tape, &real, gamma);
        let grads = tape.backward(loss).for_store(&critic.store);
        let penalty = |c: &Critic<f64>| {
            let t = Tape::new();
            let x = t.leaf(real.clone());
            let y = c.forward(&t, x, false);
            let g = t.backward(t.sum(y)).wrt(x).unwrap().clone();
            0.5 * gamma * g.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let idx = critic.store.index_of("fc.weight").unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in 0..5 {
            let mut p = critic.clone();
            p.store.get_mut(idx).as_slice_mut().unwrap()[j] += h;
            let mut m = critic.clone();
            m.store.get_mut(idx).as_slice_mut().unwrap()[j] -= h;
            let fd = (penalty(&p) - penalty(&m)) / (2.0 * h);
            let an = *grads[idx].as_ref().unwrap().iter().nth(j).unwrap();
            worst = worst.max((fd - an).abs() / (fd.abs().max(1e-3)));
        }
        assert!(worst < 1e-3, "relative error {worst}");
    }
}
