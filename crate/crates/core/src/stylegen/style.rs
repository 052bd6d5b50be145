//! The trainable style-based generator.

use super::{Generator, GeneratorKind, GeneratorSpec, SynthControl, SynthOutput};
use crate::autograd::{lit, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::io::sha256_hex;
use crate::nn::{Bind, Init, Linear};
use crate::rng::{normal_tensor, substream};
use ndarray::IxDyn;

#[derive(Clone, Debug)]
struct Block {
    affine: Linear,
    conv: usize,
    c_in: usize,
    noise_strength: usize,
    bias: usize,
    trgb_affine: Linear,
    trgb: usize,
    trgb_bias: usize,
    c_out: usize,
}

/// Mapping MLP, constant input, modulated 3x3 convolutions with per-pixel
/// noise, and a modulated 1x1 tRGB per layer summed through a skip path.
#[derive(Clone, Debug)]
pub struct StyleGenerator<T: Scalar> {
    spec: GeneratorSpec,
    store: ParamStore<T>,
    mapping: Vec<Linear>,
    constant: usize,
    blocks: Vec<Block>,
}

const MAPPING_LR_MUL: f64 = 0.01;

impl<T: Scalar> StyleGenerator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(seed, "generator_init", 0);
        let mut store = ParamStore::new();
        let mut mapping = Vec::new();
        let mut width = spec.z_dim;
        for i in 0..spec.mapping_layers {
            mapping.push(Linear::new(
                &mut store,
                &format!("mapping.{i}"),
                width,
                spec.w_dim,
                0.0,
                MAPPING_LR_MUL,
                Init::Normal,
                &mut rng,
            ));
            width = spec.w_dim;
        }
        let c0 = spec.channels[0];
        let constant = store.push("const", normal_tensor::<T>(&mut rng, &[1, c0, 4, 4]));
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (k, &c_out) in spec.channels.iter().enumerate() {
            let affine = Linear::new(&mut store, &format!("b{k}.affine"), spec.w_dim, c_in, 1.0, 1.0, Init::Normal, &mut rng);
            let conv = store.push(format!("b{k}.conv"), normal_tensor::<T>(&mut rng, &[c_out, c_in, 3, 3]));
            let noise_strength = store.push(format!("b{k}.noise_strength"), Tensor::zeros(IxDyn(&[1, 1, 1, 1])));
            let bias = store.push(format!("b{k}.bias"), Tensor::zeros(IxDyn(&[1, c_out, 1, 1])));
            let trgb_affine =
                Linear::new(&mut store, &format!("b{k}.trgb_affine"), spec.w_dim, c_out, 1.0, 1.0, Init::Normal, &mut rng);
            let trgb = store.push(format!("b{k}.trgb"), normal_tensor::<T>(&mut rng, &[3, c_out, 1, 1]));
            let trgb_bias = store.push(format!("b{k}.trgb_bias"), Tensor::zeros(IxDyn(&[1, 3, 1, 1])));
            blocks.push(Block {
                affine,
                conv,
                c_in,
                noise_strength,
                bias,
                trgb_affine,
                trgb,
                trgb_bias,
                c_out,
            });
            c_in = c_out;
        }
        Ok(Self {
            spec,
            store,
            mapping,
            constant,
            blocks,
        })
    }

    /// Rebuilds the layout for `spec` and installs `store` (checked by name and shape).
    pub fn from_store(spec: GeneratorSpec, store: ParamStore<T>) -> Result<Self> {
        let mut g = Self::new(spec, 0)?;
        if g.store.len() != store.len() {
            return Err(crate::error::Error::Shape(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                store.len(),
                g.store.len()
            )));
        }
        for i in 0..store.len() {
            if g.store.name(i) != store.name(i) || g.store.get(i).shape() != store.get(i).shape() {
                return Err(crate::error::Error::Shape(format!(
                    "tensor {} ({:?}) does not match expected {} ({:?})",
                    store.name(i),
                    store.get(i).shape(),
                    g.store.name(i),
                    g.store.get(i).shape()
                )));
            }
        }
        g.store = store;
        Ok(g)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn set_w_mean(&mut self, w_mean: Vec<f64>) {
        self.spec.w_mean = Some(w_mean);
    }

    pub fn mapping_with(&self, b: &Bind<T>, z: Var) -> Var {
        let t = b.tape;
        // Normalize each z to unit second moment.
        let ms = t.mean_axes(t.square(z), &[1]);
        let inv = t.powf(t.add_scalar(ms, lit(1e-8)), lit(-0.5));
        let mut x = t.mul(z, inv);
        for layer in &self.mapping {
            x = layer.forward(b, x);
            x = t.mul_scalar(t.leaky_relu(x, lit(0.2)), lit(2f64.sqrt()));
        }
        x
    }

    fn modulated(&self, b: &Bind<T>, x: Var, style: Var, weight: Var, demod: bool) -> Var {
        let t = b.tape;
        let xs = t.shape(x);
        let (n, c_in) = (xs[0], xs[1]);
        let ws = t.shape(weight);
        let (c_out, k) = (ws[0], ws[2]);
        let s4 = t.reshape(style, &[n, c_in, 1, 1]);
        let y = t.conv2d(t.mul(x, s4), weight, 1, (k - 1) / 2);
        if !demod {
            return y;
        }
        let wsq = t.sum_axes(t.square(weight), &[2, 3]);
        let wsq = t.permute(t.reshape(wsq, &[c_out, c_in]), &[1, 0]);
        let d = t.matmul(t.square(style), wsq);
        let d = t.powf(t.add_scalar(d, lit(1e-8)), lit(-0.5));
        t.mul(y, t.reshape(d, &[n, c_out, 1, 1]))
    }

    pub fn synthesis_with(&self, b: &Bind<T>, styles: &[Var], noise: &[Var], ctl: &SynthControl<T>) -> SynthOutput {
        let t = b.tape;
        let n = t.shape(styles[0])[0];
        let c0 = self.spec.channels[0];
        let ones = t.constant(Tensor::from_elem(IxDyn(&[n, 1, 1, 1]), T::one()));
        let mut x = t.mul(ones, b.p(self.constant));
        debug_assert_eq!(t.shape(x), vec![n, c0, 4, 4]);
        let mut img: Option<Var> = None;
        let mut activations = Vec::new();
        let mut trgbs = Vec::new();
        for (k, blk) in self.blocks.iter().enumerate() {
            if k > 0 {
                x = t.upsample_nearest(x, 2);
            }
            let s = blk.affine.forward(b, styles[k]);
            let w = t.mul_scalar(b.p(blk.conv), lit(1.0 / ((blk.c_in * 9) as f64).sqrt()));
            let mut y = self.modulated(b, x, s, w, true);
            y = t.add(y, t.mul(noise[k], b.p(blk.noise_strength)));
            y = t.add(y, b.p(blk.bias));
            y = t.mul_scalar(t.leaky_relu(y, lit(0.2)), lit(2f64.sqrt()));
            let a = ctl.finish(t, k, y);
            activations.push(a);
            let src = ctl.trgb_source(t, k, a);
            let ts = blk.trgb_affine.forward(b, styles[k]);
            let tw = t.mul_scalar(b.p(blk.trgb), lit(1.0 / (blk.c_out as f64).sqrt()));
            let rgb = t.add(self.modulated(b, src, ts, tw, false), b.p(blk.trgb_bias));
            trgbs.push(rgb);
            img = Some(match img {
                None => rgb,
                Some(prev) => t.add(t.upsample_nearest(prev, 2), rgb),
            });
            x = a;
        }
        SynthOutput {
            activations,
            trgb: trgbs,
            image: t.tanh(img.unwrap()),
        }
    }
}

impl<T: Scalar> Generator<T> for StyleGenerator<T> {
    fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Style
    }

    fn mapping(&self, tape: &Tape<T>, z: Var) -> Var {
        self.mapping_with(&Bind::new(tape, &self.store, false), z)
    }

    fn synthesis(&self, tape: &Tape<T>, styles: &[Var], noise: &[Var], ctl: &SynthControl<T>) -> SynthOutput {
        self.synthesis_with(&Bind::new(tape, &self.store, false), styles, noise, ctl)
    }

    /// Hashes weights at single precision so both precisions agree.
    fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&("style", &self.spec)).unwrap();
        for (name, t) in self.store.iter() {
            bytes.extend_from_slice(name.as_bytes());
            for x in t.iter() {
                bytes.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    fn weights(&self) -> Option<&ParamStore<T>> {
        Some(&self.store)
    }
}
