//! Style-based generators and the types they exchange.
//!
//! A generator maps a latent `z` to a style vector `w`, then renders an image
//! through a ladder of synthesis layers whose resolution doubles from 4x4 up
//! to the output size. Each layer also feeds a tRGB projection; the image is
//! the upsampled sum of those projections. [`FeatureStack`] exposes every
//! per-layer activation and tRGB tensor of one pass.

mod checkpoint;
mod oracle;
pub mod pretrain;
pub mod procedural;
mod style;

pub use checkpoint::{load_generator, save_generator, AnyGenerator, ExternalGeneratorLoader, LayerTap};
pub use oracle::{OracleGenerator, OracleSpec, FOREGROUND_LAYER};
pub use style::StyleGenerator;

use crate::autograd::{lit, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::{normal_vec, substream};
use ndarray::{s, Array2, Array3, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Architecture description plus the fitted mean style vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub resolution: usize,
    /// Channel width of each synthesis layer, coarsest first.
    pub channels: Vec<usize>,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Mean style vector; `None` until fitted.
    pub w_mean: Option<Vec<f64>>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: vec![256, 128, 64, 32, 16],
            z_dim: 128,
            w_dim: 128,
            mapping_layers: 4,
            w_mean: None,
        }
    }
}

impl GeneratorSpec {
    /// Narrow variant with the default ladder, for tests.
    pub fn small(resolution: usize, width: usize) -> Self {
        let n = ladder_len(resolution);
        Self {
            resolution,
            channels: vec![width; n],
            z_dim: 16,
            w_dim: 16,
            mapping_layers: 2,
            w_mean: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn layer_resolution(&self, layer: usize) -> usize {
        4 << layer
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return invalid(format!(
                "output resolution must be a power of two >= 16, got {}",
                self.resolution
            ));
        }
        if self.channels.len() != ladder_len(self.resolution) {
            return invalid(format!(
                "{} channel widths for a {}x{} ladder that needs {}",
                self.channels.len(),
                self.resolution,
                self.resolution,
                ladder_len(self.resolution)
            ));
        }
        if self.channels.contains(&0) || self.z_dim == 0 || self.w_dim == 0 {
            return invalid("zero-sized layer");
        }
        if let Some(m) = &self.w_mean {
            if m.len() != self.w_dim {
                return invalid("w_mean length differs from w_dim");
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("w_mean".into()));
            }
        }
        Ok(())
    }
}

/// Number of synthesis layers for a 4x4 .. `resolution` ladder.
pub fn ladder_len(resolution: usize) -> usize {
    (resolution.max(4).trailing_zeros() as usize).saturating_sub(1)
}

/// Authoritative latent representation of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Latent {
    Z(Vec<f64>),
    W(Vec<f64>),
    /// One style vector per synthesis layer.
    WPlus(Vec<Vec<f64>>),
}

/// Per-layer spatial noise grids.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    pub layers: Vec<Array2<f64>>,
}

impl NoiseBank {
    pub fn zeros(spec: &GeneratorSpec) -> Self {
        Self {
            layers: (0..spec.n_layers())
                .map(|k| {
                    let r = spec.layer_resolution(k);
                    Array2::zeros((r, r))
                })
                .collect(),
        }
    }

    pub fn sample(spec: &GeneratorSpec, seed: u64) -> Self {
        Self {
            layers: (0..spec.n_layers())
                .map(|k| {
                    let r = spec.layer_resolution(k);
                    let mut rng = substream(seed, "noise", k as u64);
                    Array2::from_shape_vec((r, r), normal_vec(&mut rng, r * r)).unwrap()
                })
                .collect(),
        }
    }
}

/// A sample point together with its noise inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub latent: Latent,
    pub noise: NoiseBank,
    pub seed: u64,
}

impl LatentCode {
    /// Standard-normal `z` and noise drawn from the `seed` substreams.
    pub fn sample(spec: &GeneratorSpec, seed: u64) -> Self {
        let z = normal_vec(&mut substream(seed, "z", 0), spec.z_dim);
        Self {
            latent: Latent::Z(z),
            noise: NoiseBank::sample(spec, seed),
            seed,
        }
    }

    pub fn from_w(spec: &GeneratorSpec, w: Vec<f64>, seed: u64) -> Self {
        Self {
            latent: Latent::W(w),
            noise: NoiseBank::sample(spec, seed),
            seed,
        }
    }

    pub fn with_zero_noise(mut self, spec: &GeneratorSpec) -> Self {
        self.noise = NoiseBank::zeros(spec);
        self
    }
}

/// Activations and tRGB outputs captured from one synthesis pass, batched
/// along the first axis.
#[derive(Clone, Debug)]
pub struct FeatureStack<T> {
    /// `(resolution, [N, C, r, r])`, coarsest first.
    pub layers: Vec<(usize, Tensor<T>)>,
    /// `(resolution, [N, 3, r, r])`, parallel to `layers`.
    pub trgb: Vec<(usize, Tensor<T>)>,
    /// `[N, 3, m, m]` in `[-1, 1]`.
    pub image: Tensor<T>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn batch(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.layers.iter().map(|(r, _)| *r).collect()
    }

    /// The `i`-th sample's image as `[3, m, m]`.
    pub fn image_at(&self, i: usize) -> Array3<T> {
        self.image
            .index_axis(Axis(0), i)
            .to_owned()
            .into_dimensionality()
            .unwrap()
    }

    /// Sub-batch `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let cut = |t: &Tensor<T>| t.slice_axis(Axis(0), (start..start + len).into()).to_owned();
        Self {
            layers: self.layers.iter().map(|(r, t)| (*r, cut(t))).collect(),
            trgb: self.trgb.iter().map(|(r, t)| (*r, cut(t))).collect(),
            image: cut(&self.image),
        }
    }
}

/// Interventions applied during synthesis.
#[derive(Clone, Debug, Default)]
pub struct SynthControl<T> {
    /// Layers whose activations are replaced by zeros.
    pub trimmed: BTreeSet<usize>,
    /// Individual channels zeroed per layer (analysis only).
    pub zeroed_channels: Vec<(usize, Vec<usize>)>,
    /// Replaces the tRGB input of one layer (the main path is untouched).
    pub trgb_input: Option<(usize, Tensor<T>)>,
    /// Added to one layer's activation before it is used downstream.
    pub activation_offset: Option<(usize, Tensor<T>)>,
    /// Mark activations as gradient targets.
    pub watch: bool,
}

impl<T: Scalar> SynthControl<T> {
    pub fn none() -> Self {
        Self {
            trimmed: BTreeSet::new(),
            zeroed_channels: Vec::new(),
            trgb_input: None,
            activation_offset: None,
            watch: false,
        }
    }

    /// Applies offset, trim and watch to a freshly computed activation.
    pub fn finish(&self, tape: &Tape<T>, layer: usize, act: Var) -> Var {
        let mut a = act;
        if let Some((l, off)) = &self.activation_offset {
            if *l == layer {
                let o = tape.constant(off.clone());
                a = tape.add(a, o);
            }
        }
        for (l, chans) in &self.zeroed_channels {
            if *l == layer {
                let shape = tape.shape(a);
                let keep = Tensor::from_shape_fn(IxDyn(&[1, shape[1], 1, 1]), |ix| {
                    if chans.contains(&ix[1]) {
                        T::zero()
                    } else {
                        T::one()
                    }
                });
                a = tape.mul(a, tape.constant(keep));
            }
        }
        if self.trimmed.contains(&layer) {
            a = tape.constant(Tensor::zeros(IxDyn(&tape.shape(a))));
        }
        if self.watch {
            a = tape.watch(a);
        }
        a
    }

    pub fn trgb_source(&self, tape: &Tape<T>, layer: usize, act: Var) -> Var {
        match &self.trgb_input {
            Some((l, t)) if *l == layer => tape.constant(t.clone()),
            _ => act,
        }
    }
}

/// Tape handles produced by one synthesis pass.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub activations: Vec<Var>,
    pub trgb: Vec<Var>,
    pub image: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Style,
    Oracle,
    External,
}

/// A frozen generator that can render batches on a tape.
pub trait Generator<T: Scalar>: Send + Sync {
    fn spec(&self) -> &GeneratorSpec;

    fn kind(&self) -> GeneratorKind;

    /// `[N, z_dim] -> [N, w_dim]`.
    fn mapping(&self, tape: &Tape<T>, z: Var) -> Var;

    /// Renders from per-layer styles `[N, w_dim]` and noise `[N, 1, r, r]`.
    fn synthesis(
        &self,
        tape: &Tape<T>,
        styles: &[Var],
        noise: &[Var],
        ctl: &SynthControl<T>,
    ) -> SynthOutput;

    /// Content hash of architecture and weights.
    fn fingerprint(&self) -> String;

    /// Trained weights, when the generator has any.
    fn weights(&self) -> Option<&crate::autograd::ParamStore<T>> {
        None
    }

    /// Layers this generator always zeroes.
    fn trimmed_layers(&self) -> BTreeSet<usize> {
        BTreeSet::new()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Maps a batch of `z` vectors to style vectors.
pub fn map_latents<T: Scalar>(gen: &dyn Generator<T>, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let spec = gen.spec();
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    for z in zs {
        if z.len() != spec.z_dim {
            return Err(Error::Shape(format!("z has {} dims, expected {}", z.len(), spec.z_dim)));
        }
        check_finite(z, "latent z")?;
    }
    let flat: Vec<T> = zs.iter().flatten().map(|&x| lit(x)).collect();
    let tape = Tape::new();
    let zv = tape.constant(Tensor::from_shape_vec(IxDyn(&[zs.len(), spec.z_dim]), flat).unwrap());
    let w = tape.value(gen.mapping(&tape, zv));
    Ok(w.outer_iter()
        .map(|row| row.iter().map(|x| x.to_f64().unwrap()).collect())
        .collect())
}

pub fn map_latent<T: Scalar>(gen: &dyn Generator<T>, z: &[f64]) -> Result<Vec<f64>> {
    Ok(map_latents(gen, &[z.to_vec()])?.remove(0))
}

/// `w_mean + psi * (w - w_mean)`.
pub fn truncate(w: &[f64], w_mean: &[f64], psi: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&psi) {
        return invalid(format!("truncation psi must lie in [0, 1], got {psi}"));
    }
    if w.len() != w_mean.len() {
        return Err(Error::Shape("w and w_mean differ in length".into()));
    }
    if psi == 1.0 {
        return Ok(w.to_vec());
    }
    Ok(w.iter()
        .zip(w_mean)
        .map(|(&x, &m)| m + psi * (x - m))
        .collect())
}

/// Truncation against the generator's fitted mean.
pub fn truncate_for(spec: &GeneratorSpec, w: &[f64], psi: f64) -> Result<Vec<f64>> {
    let mean = spec
        .w_mean
        .as_ref()
        .ok_or_else(|| Error::Invalid("w_mean has not been fitted".into()))?;
    truncate(w, mean, psi)
}

/// Mean style vector over `n` mapped standard-normal draws.
pub fn fit_w_mean<T: Scalar>(gen: &dyn Generator<T>, n: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = gen.spec();
    let mut rng = substream(seed, "w_mean", 0);
    let mut acc = vec![0.0; spec.w_dim];
    let chunk = 1000;
    let mut done = 0;
    while done < n {
        let take = chunk.min(n - done);
        let zs: Vec<Vec<f64>> = (0..take).map(|_| normal_vec(&mut rng, spec.z_dim)).collect();
        for w in map_latents(gen, &zs)? {
            for (a, x) in acc.iter_mut().zip(w) {
                *a += x;
            }
        }
        done += take;
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Per-layer style rows for a batch of codes.
pub fn resolve_styles<T: Scalar>(gen: &dyn Generator<T>, codes: &[LatentCode]) -> Result<Vec<Vec<Vec<f64>>>> {
    let spec = gen.spec();
    let n_layers = spec.n_layers();
    let zs: Vec<Vec<f64>> = codes
        .iter()
        .filter_map(|c| match &c.latent {
            Latent::Z(z) => Some(z.clone()),
            _ => None,
        })
        .collect();
    let mut mapped = map_latents(gen, &zs)?.into_iter();
    let mut per_code = Vec::with_capacity(codes.len());
    for c in codes {
        let layers = match &c.latent {
            Latent::Z(_) => vec![mapped.next().unwrap(); n_layers],
            Latent::W(w) => {
                if w.len() != spec.w_dim {
                    return Err(Error::Shape(format!("w has {} dims, expected {}", w.len(), spec.w_dim)));
                }
                check_finite(w, "latent w")?;
                vec![w.clone(); n_layers]
            }
            Latent::WPlus(ws) => {
                if ws.len() != n_layers {
                    return Err(Error::Shape(format!(
                        "w+ has {} entries but the generator has {} style layers",
                        ws.len(),
                        n_layers
                    )));
                }
                for w in ws {
                    if w.len() != spec.w_dim {
                        return Err(Error::Shape("w+ entry has wrong width".into()));
                    }
                    check_finite(w, "latent w+")?;
                }
                ws.clone()
            }
        };
        per_code.push(layers);
    }
    Ok(per_code)
}

fn style_and_noise_vars<T: Scalar>(
    gen: &dyn Generator<T>,
    tape: &Tape<T>,
    codes: &[LatentCode],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let spec = gen.spec();
    let n = codes.len();
    let per_code = resolve_styles(gen, codes)?;
    let mut styles = Vec::with_capacity(spec.n_layers());
    let mut noise = Vec::with_capacity(spec.n_layers());
    for k in 0..spec.n_layers() {
        let flat: Vec<T> = per_code.iter().flat_map(|l| l[k].iter().map(|&x| lit(x))).collect();
        styles.push(tape.constant(Tensor::from_shape_vec(IxDyn(&[n, spec.w_dim]), flat).unwrap()));
        let r = spec.layer_resolution(k);
        let mut grid = Tensor::<T>::zeros(IxDyn(&[n, 1, r, r]));
        for (i, c) in codes.iter().enumerate() {
            let src = c
                .noise
                .layers
                .get(k)
                .filter(|g| g.dim() == (r, r))
                .ok_or_else(|| Error::Shape(format!("noise bank lacks a {r}x{r} grid for layer {k}")))?;
            grid.slice_mut(s![i, 0, .., ..]).assign(&src.mapv(lit::<T>));
        }
        noise.push(tape.constant(grid));
    }
    Ok((styles, noise))
}

/// Records a synthesis pass for `codes` on `tape`.
pub fn synthesize_on<T: Scalar>(
    gen: &dyn Generator<T>,
    tape: &Tape<T>,
    codes: &[LatentCode],
    ctl: &SynthControl<T>,
) -> Result<SynthOutput> {
    if codes.is_empty() {
        return invalid("empty batch");
    }
    let (styles, noise) = style_and_noise_vars(gen, tape, codes)?;
    Ok(gen.synthesis(tape, &styles, &noise, ctl))
}

pub fn synthesize_with<T: Scalar>(
    gen: &dyn Generator<T>,
    codes: &[LatentCode],
    ctl: &SynthControl<T>,
    capture: bool,
) -> Result<FeatureStack<T>> {
    let tape = Tape::new();
    let out = synthesize_on(gen, &tape, codes, ctl)?;
    Ok(collect(gen.spec(), &tape, &out, capture))
}

/// Renders `codes`; with `capture` every activation and tRGB tensor is kept.
pub fn synthesize<T: Scalar>(gen: &dyn Generator<T>, codes: &[LatentCode], capture: bool) -> Result<FeatureStack<T>> {
    synthesize_with(gen, codes, &SynthControl::none(), capture)
}

pub(crate) fn collect<T: Scalar>(spec: &GeneratorSpec, tape: &Tape<T>, out: &SynthOutput, capture: bool) -> FeatureStack<T> {
    let (layers, trgb) = if capture {
        (
            out.activations
                .iter()
                .enumerate()
                .map(|(k, v)| (spec.layer_resolution(k), (*tape.value(*v)).clone()))
                .collect(),
            out.trgb
                .iter()
                .enumerate()
                .map(|(k, v)| (spec.layer_resolution(k), (*tape.value(*v)).clone()))
                .collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    FeatureStack {
        layers,
        trgb,
        image: (*tape.value(out.image)).clone(),
    }
}
