//! Hand-built generator with analytically known masks.
//!
//! The style vector encodes a background (base colour plus linear gradient)
//! and a soft-edged textured disc (centre, radius, colour). Layer 0 carries the
//! background parameters, layer 1 carries every disc parameter, middle layers
//! forward the disc parameters with their own mask rendering, and the last
//! layer produces the residual that makes the tRGB sum equal the composite.
//! Zeroing layer 1 leaves exactly the background.

use super::{Generator, GeneratorKind, GeneratorSpec, Latent, LatentCode, SynthControl, SynthOutput};
use crate::autograd::{lit, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::io::sha256_hex;
use ndarray::{Array2, Array3, IxDyn};
use serde::{Deserialize, Serialize};

/// The layer whose activations carry the foreground.
pub const FOREGROUND_LAYER: usize = 1;

const WIDTH: usize = 8;
const LATENT: usize = 16;
const GAIN_BASE: f64 = 0.05;
const GAIN_SHAPE: f64 = 0.5;
const GAIN_LAST: f64 = 0.02;
/// Layer 1 stores its scene code at this scale; readers undo it.
const CODE_SCALE: f64 = 0.1;
const CENTRE_SPREAD: f64 = 0.1;
const RADIUS_MEAN: f64 = 0.3;
const RADIUS_SPREAD: f64 = 0.06;
/// Amplitude and frequency (cycles per image side) of the disc texture.
const TEXTURE: f64 = 0.3;
const TEXTURE_FREQ: f64 = 5.0;

fn texture(x: f64, y: f64) -> f64 {
    let f = 2.0 * std::f64::consts::PI * TEXTURE_FREQ;
    TEXTURE * (f * x).sin() * (f * y).sin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub resolution: usize,
    /// Width of the soft edge band, in output pixels.
    pub edge_px: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            edge_px: 2.0,
        }
    }
}

/// Scene parameters decoded from one style vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub base: [f64; 3],
    pub grad: [f64; 2],
    pub centre: [f64; 2],
    pub radius: f64,
    pub colour: [f64; 3],
}

impl Scene {
    pub fn decode(w: &[f64]) -> Self {
        let th = |i: usize| w[i].tanh();
        Self {
            base: [0.55 * th(0), 0.55 * th(1), 0.55 * th(2)],
            grad: [0.35 * th(3), 0.35 * th(4)],
            centre: [0.5 + CENTRE_SPREAD * th(5), 0.5 + CENTRE_SPREAD * th(6)],
            radius: RADIUS_MEAN + RADIUS_SPREAD * th(7),
            colour: [0.6 * th(8), 0.6 * th(9), 0.6 * th(10)],
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleGenerator {
    spec: GeneratorSpec,
    oracle: OracleSpec,
}

impl OracleGenerator {
    pub fn new(oracle: OracleSpec) -> Result<Self> {
        if !oracle.edge_px.is_finite() || oracle.edge_px <= 0.0 {
            return invalid("oracle edge width must be positive");
        }
        let n = super::ladder_len(oracle.resolution);
        let spec = GeneratorSpec {
            resolution: oracle.resolution,
            channels: vec![WIDTH; n],
            z_dim: LATENT,
            w_dim: LATENT,
            mapping_layers: 0,
            // The mapping is the identity, so the population mean is exactly zero.
            w_mean: Some(vec![0.0; LATENT]),
        };
        spec.validate()?;
        Ok(Self { spec, oracle })
    }

    pub fn oracle_spec(&self) -> &OracleSpec {
        &self.oracle
    }

    fn band(&self) -> f64 {
        self.oracle.edge_px / self.oracle.resolution as f64
    }

    /// Style vector of `layer` for `code`.
    fn style_of(&self, code: &LatentCode, layer: usize) -> Vec<f64> {
        match &code.latent {
            Latent::Z(v) | Latent::W(v) => v.clone(),
            Latent::WPlus(ws) => ws[layer].clone(),
        }
    }

    pub fn scene(&self, code: &LatentCode) -> Scene {
        let mut s = Scene::decode(&self.style_of(code, FOREGROUND_LAYER));
        let bg = Scene::decode(&self.style_of(code, self.spec.n_layers() - 1));
        s.base = bg.base;
        s.grad = bg.grad;
        s
    }

    fn coord(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.oracle.resolution as f64
    }

    /// Analytic foreground probability per pixel.
    pub fn true_mask(&self, code: &LatentCode) -> Array2<f64> {
        let s = self.scene(code);
        let m = self.oracle.resolution;
        let b = self.band();
        Array2::from_shape_fn((m, m), |(i, j)| {
            let d = (self.coord(j) - s.centre[0]).hypot(self.coord(i) - s.centre[1]);
            ((s.radius - d) / b).clamp(0.0, 1.0)
        })
    }

    pub fn foreground_render(&self, code: &LatentCode) -> Array3<f64> {
        let s = self.scene(code);
        let m = self.oracle.resolution;
        Array3::from_shape_fn((3, m, m), |(c, i, j)| s.colour[c] + texture(self.coord(j), self.coord(i)))
    }

    pub fn background_render(&self, code: &LatentCode) -> Array3<f64> {
        let s = self.scene(code);
        let m = self.oracle.resolution;
        Array3::from_shape_fn((3, m, m), |(c, i, j)| {
            s.base[c] + s.grad[0] * (self.coord(j) - 0.5) + s.grad[1] * (self.coord(i) - 0.5)
        })
    }

    /// Expected true-mask area under the latent prior.
    pub fn area_prior(&self) -> f64 {
        let b = self.band();
        let n = 8001;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let u: f64 = lo + h * i as f64;
            let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let pdf = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let r = RADIUS_MEAN + RADIUS_SPREAD * u.tanh();
            acc += wt * pdf * std::f64::consts::PI * (r * r - r * b + b * b / 3.0);
        }
        acc * h
    }

    fn grid<T: Scalar>(tape: &Tape<T>, r: usize, axis: usize) -> Var {
        let g = Tensor::from_shape_fn(IxDyn(&[1, 1, r, r]), |ix| lit((ix[2 + axis] as f64 + 0.5) / r as f64));
        tape.constant(g)
    }

    fn col<T: Scalar>(tape: &Tape<T>, w: Var, i: usize) -> Var {
        let n = tape.shape(w)[0];
        tape.reshape(tape.narrow(w, 1, i, 1), &[n, 1, 1, 1])
    }

    fn scaled_tanh<T: Scalar>(tape: &Tape<T>, w: Var, i: usize, scale: f64, shift: f64) -> Var {
        let v = tape.mul_scalar(tape.tanh(Self::col(tape, w, i)), lit(scale));
        tape.add_scalar(v, lit(shift))
    }

    fn spread<T: Scalar>(tape: &Tape<T>, v: Var, r: usize) -> Var {
        tape.add(v, tape.constant(Tensor::zeros(IxDyn(&[1, 1, r, r]))))
    }

    fn pad<T: Scalar>(tape: &Tape<T>, x: Var, channels: usize) -> Var {
        let s = tape.shape(x);
        if s[1] == channels {
            return x;
        }
        let z = tape.constant(Tensor::zeros(IxDyn(&[s[0], channels - s[1], s[2], s[3]])));
        tape.concat(&[x, z], 1)
    }

    /// Background maps `[N, 3, r, r]` and the base colour from a style.
    fn background<T: Scalar>(tape: &Tape<T>, w: Var, r: usize) -> (Var, Var) {
        let base = tape.concat(&(0..3).map(|i| Self::scaled_tanh(tape, w, i, 0.55, 0.0)).collect::<Vec<_>>(), 1);
        let gx = Self::scaled_tanh(tape, w, 3, 0.35, 0.0);
        let gy = Self::scaled_tanh(tape, w, 4, 0.35, 0.0);
        let x = tape.add_scalar(Self::grid(tape, r, 1), lit(-0.5));
        let y = tape.add_scalar(Self::grid(tape, r, 0), lit(-0.5));
        let ramp = tape.add(tape.mul(gx, x), tape.mul(gy, y));
        (tape.add(base, ramp), base)
    }

    /// Soft disc mask `[N, 1, r, r]` from carried `[cx, cy, R, ...]` maps.
    fn disc<T: Scalar>(&self, tape: &Tape<T>, carry: Var, r: usize) -> Var {
        let cx = tape.narrow(carry, 1, 0, 1);
        let cy = tape.narrow(carry, 1, 1, 1);
        let rad = tape.narrow(carry, 1, 2, 1);
        let dx = tape.sub(Self::grid(tape, r, 1), cx);
        let dy = tape.sub(Self::grid(tape, r, 0), cy);
        let d2 = tape.add(tape.square(dx), tape.square(dy));
        let d = tape.sqrt(tape.add_scalar(d2, lit(1e-12)));
        let u = tape.mul_scalar(tape.sub(rad, d), lit(1.0 / self.band()));
        tape.sub(tape.relu(u), tape.relu(tape.add_scalar(u, lit(-1.0))))
    }

    /// Fixed 1x1 projection picking channels `from..from+3` with `gain`.
    fn pick<T: Scalar>(tape: &Tape<T>, x: Var, from: usize, gain: f64) -> Var {
        let w = Tensor::from_shape_fn(IxDyn(&[3, WIDTH, 1, 1]), |ix| {
            if ix[1] == from + ix[0] {
                lit(gain)
            } else {
                T::zero()
            }
        });
        tape.conv2d(x, tape.constant(w), 1, 0)
    }
}

impl<T: Scalar> Generator<T> for OracleGenerator {
    fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Oracle
    }

    fn mapping(&self, _tape: &Tape<T>, z: Var) -> Var {
        z
    }

    fn synthesis(&self, tape: &Tape<T>, styles: &[Var], _noise: &[Var], ctl: &SynthControl<T>) -> SynthOutput {
        let n_layers = self.spec.n_layers();
        let last = n_layers - 1;
        let mut activations = Vec::with_capacity(n_layers);
        let mut trgb = Vec::with_capacity(n_layers);
        let mut image: Option<Var> = None;
        for k in 0..n_layers {
            let r = self.spec.layer_resolution(k);
            let raw = if k == 0 {
                let (_, base) = Self::background(tape, styles[0], 1);
                let gx = Self::scaled_tanh(tape, styles[0], 3, 0.35, 0.0);
                let gy = Self::scaled_tanh(tape, styles[0], 4, 0.35, 0.0);
                Self::pad(tape, Self::spread(tape, tape.concat(&[base, gx, gy], 1), r), WIDTH)
            } else if k == FOREGROUND_LAYER {
                let w = styles[k];
                let mut parts = vec![
                    Self::scaled_tanh(tape, w, 5, CENTRE_SPREAD, 0.5),
                    Self::scaled_tanh(tape, w, 6, CENTRE_SPREAD, 0.5),
                    Self::scaled_tanh(tape, w, 7, RADIUS_SPREAD, RADIUS_MEAN),
                ];
                parts.extend((8..11).map(|i| Self::scaled_tanh(tape, w, i, 0.6, 0.0)));
                let code = tape.mul_scalar(tape.concat(&parts, 1), lit(CODE_SCALE));
                Self::pad(tape, Self::spread(tape, code, r), WIDTH)
            } else {
                let prev = tape.upsample_nearest(activations[k - 1], 2);
                let mut carry = tape.narrow(prev, 1, 0, 6);
                if k - 1 == FOREGROUND_LAYER {
                    carry = tape.mul_scalar(carry, lit(1.0 / CODE_SCALE));
                }
                let mask = self.disc(tape, carry, r);
                if k < last {
                    Self::pad(tape, tape.concat(&[carry, mask], 1), WIDTH)
                } else {
                    let fg = tape.narrow(carry, 1, 3, 3);
                    let (bg, base) = Self::background(tape, styles[k], r);
                    let tex = Tensor::from_shape_fn(IxDyn(&[1, 1, r, r]), |ix| {
                        lit(texture((ix[3] as f64 + 0.5) / r as f64, (ix[2] as f64 + 0.5) / r as f64))
                    });
                    let fg_tex = tape.add(fg, tape.constant(tex));
                    let comp = tape.add(tape.mul(mask, tape.sub(fg_tex, bg)), bg);
                    let coarse = tape.add(tape.mul_scalar(base, lit(GAIN_BASE)), tape.mul_scalar(fg, lit(GAIN_SHAPE)));
                    let residual = tape.mul_scalar(tape.sub(comp, coarse), lit(1.0 / GAIN_LAST));
                    Self::pad(tape, residual, WIDTH)
                }
            };
            let a = ctl.finish(tape, k, raw);
            activations.push(a);
            let src = ctl.trgb_source(tape, k, a);
            let rgb = if k == 0 {
                Self::pick(tape, src, 0, GAIN_BASE)
            } else if k == FOREGROUND_LAYER {
                Self::pick(tape, src, 3, GAIN_SHAPE / CODE_SCALE)
            } else if k < last {
                Self::pick(tape, src, 0, 0.0)
            } else {
                Self::pick(tape, src, 0, GAIN_LAST)
            };
            trgb.push(rgb);
            image = Some(match image {
                None => rgb,
                Some(prev) => tape.add(tape.upsample_nearest(prev, 2), rgb),
            });
        }
        // Identity on the unperturbed range; keeps probed renders inside [-1, 1].
        let img = image.unwrap();
        let clipped = tape.sub(
            tape.relu(tape.add_scalar(img, T::one())),
            tape.relu(tape.add_scalar(img, -T::one())),
        );
        SynthOutput {
            activations,
            trgb,
            image: tape.add_scalar(clipped, -T::one()),
        }
    }

    fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(&("oracle", &self.spec, &self.oracle)).unwrap())
    }
}
