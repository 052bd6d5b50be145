//! Alpha network: per-layer 1x1 compression of generator features,
//! upsampling to the output grid, a 1x1 fusion stack and a squeezed sigmoid.

use crate::autograd::{lit, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::io::Container;
use crate::nn::{Bind, Conv, Init};
use crate::rng::substream;
use crate::stylegen::{FeatureStack, GeneratorSpec};
use ndarray::{s, Array2, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ALPHA_CONTAINER: &str = "alpha";

/// Mask values are kept in `[EPS, 1 - EPS]`, strictly inside the unit interval.
pub const MASK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    LeakyRelu,
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaNetSpec {
    pub selected_layers: Vec<usize>,
    /// Width after compression; capped at each layer's channel count.
    pub compress_channels: usize,
    pub hidden_channels: usize,
    pub upsample: Upsample,
    pub nonlinearity: Nonlinearity,
    pub output_resolution: usize,
}

impl AlphaNetSpec {
    pub fn new(selected_layers: Vec<usize>, output_resolution: usize) -> Self {
        Self {
            selected_layers,
            compress_channels: 32,
            hidden_channels: 32,
            upsample: Upsample::Nearest,
            nonlinearity: Nonlinearity::LeakyRelu,
            output_resolution,
        }
    }

    /// Only the finest generator layer feeds the network.
    pub fn last_layer_only(gen: &GeneratorSpec) -> Self {
        Self::new(vec![gen.n_layers() - 1], gen.resolution)
    }

    pub fn validate(&self, gen: &GeneratorSpec) -> Result<()> {
        if self.selected_layers.is_empty() {
            return invalid("alpha network needs at least one input layer");
        }
        for &k in &self.selected_layers {
            if k >= gen.n_layers() {
                return Err(Error::MissingLayer {
                    layer: k,
                    detail: format!("generator has {} layers", gen.n_layers()),
                });
            }
        }
        let mut sorted = self.selected_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.selected_layers {
            return invalid("selected layers must be strictly increasing");
        }
        if self.compress_channels == 0 || self.hidden_channels == 0 {
            return invalid("channel counts must be at least 1");
        }
        if self.output_resolution != gen.resolution {
            return invalid(format!(
                "mask resolution {} differs from generator output {}",
                self.output_resolution, gen.resolution
            ));
        }
        Ok(())
    }
}

/// Soft foreground probabilities for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub values: Array2<f64>,
}

impl SoftMask {
    /// `1` where the value is at least `t`.
    pub fn threshold(&self, t: f64) -> Array2<u8> {
        threshold(&self.values, t)
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

pub fn threshold(values: &Array2<f64>, t: f64) -> Array2<u8> {
    values.mapv(|v| u8::from(v >= t))
}

#[derive(Clone, Debug)]
pub struct AlphaNet<T: Scalar> {
    pub spec: AlphaNetSpec,
    /// Fingerprint of the generator the network reads from.
    pub generator: String,
    pub store: ParamStore<T>,
    /// Fixed per-channel `(shift, scale)` applied to each input layer before
    /// compression; identity until [`AlphaNet::calibrate`] is called.
    input_norm: Vec<(Tensor<T>, Tensor<T>)>,
    widths: Vec<usize>,
    compress: Vec<Conv>,
    hidden: Conv,
    head: Conv,
}

impl<T: Scalar> AlphaNet<T> {
    /// Fresh network; the head starts at zero so the initial mask is 0.5.
    pub fn build(gen: &GeneratorSpec, generator_fingerprint: &str, spec: AlphaNetSpec, seed: u64) -> Result<Self> {
        spec.validate(gen)?;
        let mut rng = substream(seed, "alpha_init", 0);
        let mut store = ParamStore::new();
        let mut compress = Vec::new();
        let mut widths = Vec::new();
        for &k in &spec.selected_layers {
            let src = gen.channels[k];
            let w = spec.compress_channels.min(src);
            widths.push(w);
            compress.push(Conv::plain(&mut store, &format!("compress{k}"), src, w, 1, 1, true, Init::Normal, &mut rng));
        }
        let total: usize = widths.iter().sum();
        let hidden = Conv::plain(&mut store, "hidden", total, spec.hidden_channels, 1, 1, true, Init::Normal, &mut rng);
        let head = Conv::plain(&mut store, "head", spec.hidden_channels, 1, 1, 1, true, Init::Zero, &mut rng);
        let input_norm = spec
            .selected_layers
            .iter()
            .map(|&k| {
                let c = gen.channels[k];
                (Tensor::zeros(IxDyn(&[1, c, 1, 1])), Tensor::ones(IxDyn(&[1, c, 1, 1])))
            })
            .collect();
        Ok(Self {
            spec,
            generator: generator_fingerprint.to_string(),
            store,
            input_norm,
            widths,
            compress,
            hidden,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn compressed_widths(&self) -> &[usize] {
        &self.widths
    }

    /// Sets the input standardization from captured features: each channel
    /// is shifted by its mean and divided by its standard deviation (channels
    /// with no spread keep scale 1). This is a fixed affine map in front of
    /// the 1x1 compression, so it changes the conditioning, not the function class.
    pub fn calibrate(&mut self, gen: &GeneratorSpec, features: &FeatureStack<T>) -> Result<()> {
        let feats = self.gather(gen, features)?;
        for (slot, f) in self.input_norm.iter_mut().zip(&feats) {
            let c = f.shape()[1];
            for ch in 0..c {
                let vals: Vec<f64> = f
                    .index_axis(Axis(1), ch)
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect();
                let n = vals.len().max(1) as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                if !(mean.is_finite() && var.is_finite()) {
                    return Err(Error::NonFinite(format!("calibration features, channel {ch}")));
                }
                let sd = var.sqrt();
                slot.0[[0, ch, 0, 0]] = lit(-mean);
                slot.1[[0, ch, 0, 0]] = lit(if sd > 1e-8 { 1.0 / sd } else { 1.0 });
            }
        }
        Ok(())
    }

    pub fn input_norm(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.input_norm
    }

    fn act(&self, t: &Tape<T>, x: Var) -> Var {
        match self.spec.nonlinearity {
            Nonlinearity::LeakyRelu => t.leaky_relu(x, lit(0.2)),
            Nonlinearity::Relu => t.relu(x),
            Nonlinearity::Tanh => t.tanh(x),
        }
    }

    /// Mask `[N, 1, m, m]` from the selected layers' activations, given in
    /// the order of `spec.selected_layers`.
    pub fn forward_with(&self, b: &Bind<T>, feats: &[Var]) -> Var {
        let t = b.tape;
        let m = self.spec.output_resolution;
        let streams: Vec<Var> = self
            .compress
            .iter()
            .zip(feats)
            .zip(&self.input_norm)
            .map(|((conv, &f), (shift, scale))| {
                let f = t.mul(t.add(f, t.constant(shift.clone())), t.constant(scale.clone()));
                let h = self.act(t, conv.forward(b, f));
                let r = t.shape(h)[2];
                match self.spec.upsample {
                    Upsample::Nearest if r < m => t.upsample_nearest(h, m / r),
                    Upsample::Bilinear if r < m => t.resize_bilinear(h, m, m),
                    _ => h,
                }
            })
            .collect();
        let x = if streams.len() == 1 { streams[0] } else { t.concat(&streams, 1) };
        let h = self.act(t, self.hidden.forward(b, x));
        let logit = self.head.forward(b, h);
        let p = t.sigmoid(logit);
        t.add_scalar(t.mul_scalar(p, lit(1.0 - 2.0 * MASK_EPS)), lit(MASK_EPS))
    }

    pub fn forward(&self, tape: &Tape<T>, feats: &[Var], trainable: bool) -> Var {
        self.forward_with(&Bind::new(tape, &self.store, trainable), feats)
    }

    /// Selected activations from a captured stack, checked for presence and shape.
    pub fn gather(&self, gen: &GeneratorSpec, features: &FeatureStack<T>) -> Result<Vec<Tensor<T>>> {
        self.spec
            .selected_layers
            .iter()
            .map(|&k| {
                let (r, t) = features.layers.get(k).ok_or_else(|| Error::MissingLayer {
                    layer: k,
                    detail: format!("feature stack holds {} captured layers", features.layers.len()),
                })?;
                if *r != gen.layer_resolution(k) || t.shape()[1] != gen.channels[k] {
                    return Err(Error::MissingLayer {
                        layer: k,
                        detail: format!("captured tensor has shape {:?} at resolution {r}", t.shape()),
                    });
                }
                Ok(t.clone())
            })
            .collect()
    }

    /// Raw mask tensor `[N, 1, m, m]` for a captured stack.
    pub fn mask_tensor(&self, gen: &GeneratorSpec, features: &FeatureStack<T>) -> Result<Tensor<T>> {
        let feats = self.gather(gen, features)?;
        let tape = Tape::new();
        let vars: Vec<Var> = feats.into_iter().map(|f| tape.constant(f)).collect();
        let y = self.forward(&tape, &vars, false);
        Ok((*tape.value(y)).clone())
    }

    /// One soft mask per sample in the stack.
    pub fn predict_mask(&self, gen: &GeneratorSpec, features: &FeatureStack<T>) -> Result<Vec<SoftMask>> {
        let y = self.mask_tensor(gen, features)?;
        Ok(y.axis_iter(Axis(0))
            .map(|s| SoftMask {
                values: s.slice(s![0, .., ..]).mapv(|v| v.to_f64().unwrap()),
            })
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "spec": self.spec,
            "generator_fingerprint": self.generator,
            "param_count": self.param_count(),
        });
        let mut c = Container::new(ALPHA_CONTAINER, meta);
        for (n, t) in self.store.iter() {
            c.push(n, t);
        }
        for (&k, (shift, scale)) in self.spec.selected_layers.iter().zip(&self.input_norm) {
            c.push(format!("input_norm{k}.shift"), shift);
            c.push(format!("input_norm{k}.scale"), scale);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container().save(path)
    }

    /// Loads a network and checks that it was trained on `gen_fingerprint`.
    pub fn load(path: &Path, gen: &GeneratorSpec, gen_fingerprint: &str) -> Result<Self> {
        let c = Container::load(path)?;
        Self::from_container(&c, path, gen, gen_fingerprint)
    }

    pub fn from_container(c: &Container, path: &Path, gen: &GeneratorSpec, gen_fingerprint: &str) -> Result<Self> {
        if c.kind != ALPHA_CONTAINER {
            return Err(Error::format(path, format!("expected an alpha checkpoint, found '{}'", c.kind)));
        }
        let stored = c.meta["generator_fingerprint"].as_str().unwrap_or_default();
        if stored != gen_fingerprint {
            return Err(Error::Fingerprint(format!(
                "{} was trained against generator {stored}, not {gen_fingerprint}",
                path.display()
            )));
        }
        let spec: AlphaNetSpec = serde_json::from_value(c.meta["spec"].clone())?;
        let mut net = Self::build(gen, gen_fingerprint, spec, 0)?;
        if net.store.len() + 2 * net.input_norm.len() != c.tensors.len() {
            return Err(Error::format(path, "alpha tensor count mismatch"));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            match c.tensor(name) {
                Some(t) if t.shape() == shape => Ok(t.mapv(lit::<T>)),
                _ => Err(Error::format(path, format!("missing or misshapen alpha tensor {name}"))),
            }
        };
        for i in 0..net.store.len() {
            let t = fetch(net.store.name(i), net.store.get(i).shape())?;
            *net.store.get_mut(i) = t;
        }
        let layers = net.spec.selected_layers.clone();
        for (k, slot) in layers.into_iter().zip(net.input_norm.iter_mut()) {
            let shape = slot.0.shape().to_vec();
            *slot = (fetch(&format!("input_norm{k}.shift"), &shape)?, fetch(&format!("input_norm{k}.scale"), &shape)?);
        }
        Ok(net)
    }
}

/// Largest relative deviation between analytic parameter gradients of
/// `sum(weights * M)` and central differences with step `h`.
pub fn mask_gradient_check(
    net: &AlphaNet<f64>,
    gen: &GeneratorSpec,
    features: &FeatureStack<f64>,
    weights: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let feats = net.gather(gen, features)?;
    let functional = |n: &AlphaNet<f64>, tape: &Tape<f64>, trainable: bool| {
        let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let y = n.forward(tape, &vars, trainable);
        tape.sum(tape.mul(y, tape.constant(weights.clone())))
    };
    let tape = Tape::new();
    let f = functional(net, &tape, true);
    let grads = tape.backward(f).for_store(&net.store);
    let eval = |n: &AlphaNet<f64>| {
        let t = Tape::new();
        let v = functional(n, &t, false);
        t.scalar(v)
    };
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..net.store.len() {
        let analytic: Vec<f64> = match &grads[i] {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; net.store.get(i).len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = *probe.store.get(i).iter().nth(j).unwrap();
            *probe.store.get_mut(i).iter_mut().nth(j).unwrap() = orig + h;
            let fp = eval(&probe);
            *probe.store.get_mut(i).iter_mut().nth(j).unwrap() = orig - h;
            let fm = eval(&probe);
            *probe.store.get_mut(i).iter_mut().nth(j).unwrap() = orig;
            let fd = (fp - fm) / (2.0 * h);
            let scale = a.abs().max(fd.abs());
            if scale > 1e-7 {
                worst = worst.max((a - fd).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Helper for tests and analyses: a random feature stack with the layout of `gen`.
pub fn random_features<T: Scalar>(gen: &GeneratorSpec, n: usize, seed: u64) -> FeatureStack<T> {
    let mut rng = substream(seed, "random_features", 0);
    let layers = (0..gen.n_layers())
        .map(|k| {
            let r = gen.layer_resolution(k);
            (r, crate::rng::normal_tensor::<T>(&mut rng, &[n, gen.channels[k], r, r]))
        })
        .collect();
    let trgb = (0..gen.n_layers())
        .map(|k| {
            let r = gen.layer_resolution(k);
            (r, Tensor::zeros(IxDyn(&[n, 3, r, r])))
        })
        .collect();
    let m = gen.resolution;
    FeatureStack {
        layers,
        trgb,
        image: Tensor::zeros(IxDyn(&[n, 3, m, m])),
    }
}
