//! tRGB noise probe, SSIM, the layer cutoff rule and feature visualisation.

use crate::autograd::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};
use crate::io::write_rgb8_png;
use crate::rng::{normal_tensor, stream_seed, substream};
use crate::stylegen::{synthesize, synthesize_with, FeatureStack, Generator, LatentCode, SynthControl};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of images in `[-1, 1]`.
pub const SSIM_RANGE: f64 = 2.0;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Valid-mode separable filtering with `taps` along both axes.
fn filter(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w + 1 - k), |(i, j)| (0..k).map(|t| taps[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(i, j)| (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum())
}

fn ssim_channel(a: ArrayView2<f64>, b: ArrayView2<f64>, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let (a, b) = (a.to_owned(), b.to_owned());
    let mu_a = filter(&a, taps);
    let mu_b = filter(&b, taps);
    let aa = filter(&(&a * &a), taps);
    let bb = filter(&(&b * &b), taps);
    let ab = filter(&(&a * &b), taps);
    let mut acc = 0.0;
    for (((((&ma, &mb), &saa), &sbb), &sab), _) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter())
        .zip(bb.iter())
        .zip(ab.iter())
        .zip(0..)
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    acc / mu_a.len() as f64
}

/// Mean SSIM of two `[C, H, W]` images, averaged over channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("ssim of {:?} and {:?}", a.dim(), b.dim())));
    }
    let (c, h, w) = a.dim();
    if c == 0 || h < SSIM_WINDOW || w < SSIM_WINDOW {
        return invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let taps = gaussian_taps();
    let total: f64 = (0..c)
        .map(|ch| ssim_channel(a.index_axis(Axis(0), ch), b.index_axis(Axis(0), ch), &taps))
        .sum();
    Ok(total / c as f64)
}

/// SSIM of single-channel images.
pub fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    ssim(&a.clone().insert_axis(Axis(0)), &b.clone().insert_axis(Axis(0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSsim {
    pub layer: usize,
    pub resolution: usize,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub cutoff: usize,
    pub layers: Vec<usize>,
    /// No qualifying drop: every layer was kept.
    pub flagged: bool,
    pub relative_drop_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrgbProbeReport {
    pub layers: Vec<LayerSsim>,
    pub n_samples: usize,
    pub seed: u64,
    pub generator: String,
    pub selection: Selection,
}

impl TrgbProbeReport {
    pub fn scores(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.ssim).collect()
    }
}

/// What replaces the tRGB input during a probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Standard-normal noise per pixel and channel.
    Noise,
    /// No replacement: a plain re-render.
    Identity,
}

pub const DEFAULT_RELATIVE_DROP: f64 = 0.2;

pub fn probe_codes(spec: &crate::stylegen::GeneratorSpec, n: usize, seed: u64) -> Vec<LatentCode> {
    (0..n)
        .map(|i| LatentCode::sample(spec, stream_seed(seed, "probe_code", i as u64)))
        .collect()
}

/// For each layer, replaces its tRGB input with N(0, I) and reports the
/// average SSIM against the unperturbed render over `n_samples` latents.
pub fn trgb_noise_probe<T: Scalar>(gen: &dyn Generator<T>, n_samples: usize, seed: u64) -> Result<TrgbProbeReport> {
    trgb_probe_with(gen, n_samples, seed, ProbeMode::Noise)
}

pub fn trgb_probe_with<T: Scalar>(gen: &dyn Generator<T>, n_samples: usize, seed: u64, mode: ProbeMode) -> Result<TrgbProbeReport> {
    if n_samples == 0 {
        return invalid("trgb probe needs at least one sample");
    }
    let spec = gen.spec().clone();
    let codes = probe_codes(&spec, n_samples, seed);
    let clean = synthesize(gen, &codes, false)?;
    let clean: Vec<Array3<f64>> = (0..n_samples).map(|i| clean.image_at(i).mapv(|v| v.to_f64().unwrap())).collect();
    let mut layers = Vec::with_capacity(spec.n_layers());
    for k in 0..spec.n_layers() {
        let r = spec.layer_resolution(k);
        let mut ctl = SynthControl::none();
        if mode == ProbeMode::Noise {
            let noise = normal_tensor::<T>(&mut substream(seed, "probe_noise", k as u64), &[n_samples, spec.channels[k], r, r]);
            ctl.trgb_input = Some((k, noise));
        }
        let probed = synthesize_with(gen, &codes, &ctl, false)?;
        let mut total = 0.0;
        for (i, c) in clean.iter().enumerate() {
            total += ssim(c, &probed.image_at(i).mapv(|v| v.to_f64().unwrap()))?;
        }
        layers.push(LayerSsim {
            layer: k,
            resolution: r,
            ssim: total / n_samples as f64,
        });
    }
    let scores: Vec<f64> = layers.iter().map(|l| l.ssim).collect();
    let selection = select_layers(&scores, DEFAULT_RELATIVE_DROP)?;
    Ok(TrgbProbeReport {
        layers,
        n_samples,
        seed,
        generator: gen.fingerprint(),
        selection,
    })
}

/// Selection starts at the first layer whose SSIM is at least
/// `threshold` (relative) below its predecessor's; all finer layers follow.
pub fn select_layers(scores: &[f64], threshold: f64) -> Result<Selection> {
    if scores.len() < 2 {
        return invalid("layer selection needs at least two resolutions");
    }
    if !(0.0..1.0).contains(&threshold) {
        return invalid("relative drop threshold must lie in [0, 1)");
    }
    let cutoff = (1..scores.len()).find(|&k| {
        let prev = scores[k - 1];
        prev > 0.0 && (prev - scores[k]) / prev >= threshold - 1e-12
    });
    let (cutoff, flagged) = match cutoff {
        Some(k) => (k, false),
        None => (0, true),
    };
    if flagged {
        log::warn!("no layer shows a relative SSIM drop of {threshold}; selecting every layer");
    }
    Ok(Selection {
        cutoff,
        layers: (cutoff..scores.len()).collect(),
        flagged,
        relative_drop_threshold: threshold,
    })
}

/// Min-max normalisation to `[0, 1]`. A constant tensor maps to 0.5 and
/// the second return value is `true`.
pub fn normalize_for_viz(x: &Tensor<f64>) -> (Tensor<f64>, bool) {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        log::warn!("constant tensor in normalize_for_viz; filling with 0.5");
        return (x.mapv(|_| 0.5), true);
    }
    (x.mapv(|v| (v - lo) / (hi - lo)), false)
}

/// Writes one row of per-resolution panels for sample `index`: each tRGB
/// tensor normalised and enlarged to the output size, then the image.
pub fn write_trgb_panels<T: Scalar>(stack: &FeatureStack<T>, index: usize, path: &Path) -> Result<()> {
    let m = stack.image.shape()[2];
    let mut panels: Vec<Array3<f64>> = Vec::new();
    for (r, t) in &stack.trgb {
        let sample = t.index_axis(Axis(0), index).mapv(|v| v.to_f64().unwrap());
        let (norm, _) = normalize_for_viz(&sample);
        let norm: Array3<f64> = norm.into_dimensionality().unwrap();
        let f = m / r;
        panels.push(Array3::from_shape_fn((3, m, m), |(c, y, x)| norm[[c, y / f, x / f]]));
    }
    let img = stack.image.index_axis(Axis(0), index).mapv(|v| (v.to_f64().unwrap() + 1.0) * 0.5);
    panels.push(img.into_dimensionality().unwrap());
    let w = m * panels.len();
    let mut data = vec![0u8; w * m * 3];
    for (p, panel) in panels.iter().enumerate() {
        for y in 0..m {
            for x in 0..m {
                for c in 0..3 {
                    data[(y * w + p * m + x) * 3 + c] = (panel[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    write_rgb8_png(path, w, m, &data)
}

/// Per-layer activation energy maps (mean |a| over channels), normalised,
/// for one sample; returned coarsest first.
pub fn activation_maps<T: Scalar>(stack: &FeatureStack<T>, index: usize) -> Vec<Array2<f64>> {
    stack
        .layers
        .iter()
        .map(|(_, t)| {
            let a = t.slice(s![index, .., .., ..]).mapv(|v| v.to_f64().unwrap().abs());
            let mean = a.mean_axis(Axis(0)).unwrap().into_dyn();
            normalize_for_viz(&mean).0.into_dimensionality().unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stylegen::{OracleGenerator, OracleSpec, FOREGROUND_LAYER};
    use proptest::prelude::*;

    /// Direct per-window evaluation with the 2-D Gaussian weights.
    fn ssim_direct(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let g = gaussian_taps();
        let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
        let (h, w) = a.dim();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        ma += g[u] * g[v] * a[[i + u, j + v]];
                        mb += g[u] * g[v] * b[[i + u, j + v]];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let wt = g[u] * g[v];
                        let (da, db) = (a[[i + u, j + v]] - ma, b[[i + u, j + v]] - mb);
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    fn pattern(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let t = normal_tensor::<f64>(&mut substream(seed, "img", 0), &[h, w]);
        t.into_dimensionality::<ndarray::Ix2>().unwrap().mapv(|v| (0.4 * v).tanh())
    }

    #[test]
    fn identity_and_offset_pair() {
        let x = pattern(16, 16, 1);
        assert!((ssim_gray(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Array2::from_elem((16, 16), -0.25);
        let d = c.mapv(|v| v + 0.5);
        let (c1, mu_a, mu_b) = (0.0004, -0.25, 0.25);
        let expect = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
        assert!((ssim_gray(&c, &d).unwrap() - expect).abs() <= 1e-6);
        assert!((ssim_gray(&c, &d).unwrap() - ssim_direct(&c, &d)).abs() <= 1e-6);
    }

    #[test]
    fn agrees_with_direct_formula() {
        for s in 0..4 {
            let a = pattern(20, 17, s);
            let b = pattern(20, 17, s + 10).mapv(|v| v * 0.5) + &a.mapv(|v| v * 0.5);
            let fast = ssim_gray(&a, &b).unwrap();
            assert!((fast - ssim_direct(&a, &b)).abs() <= 1e-6, "seed {s}");
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(ssim_gray(&pattern(16, 16, 0), &pattern(16, 15, 0)).is_err());
        assert!(ssim_gray(&pattern(8, 8, 0), &pattern(8, 8, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_bounded(sa in 0u64..500, sb in 0u64..500) {
            let a = pattern(12, 12, sa);
            let b = pattern(12, 12, sb);
            let ab = ssim_gray(&a, &b).unwrap();
            prop_assert_eq!(ab, ssim_gray(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn selection_is_a_suffix(scores in proptest::collection::vec(-1.0f64..1.0, 2..8), thr in 0.0f64..0.9) {
            let sel = select_layers(&scores, thr).unwrap();
            let expect: Vec<usize> = (sel.cutoff..scores.len()).collect();
            prop_assert_eq!(sel.layers, expect);
        }
    }

    #[test]
    fn selection_rule_examples() {
        let sel = select_layers(&[0.9, 0.9, 0.72, 0.5, 0.4], 0.2).unwrap();
        assert_eq!(sel.layers, vec![2, 3, 4]);
        assert!(!sel.flagged);
        let flat = select_layers(&[0.8, 0.8, 0.8, 0.8], 0.2).unwrap();
        assert_eq!(flat.layers, vec![0, 1, 2, 3]);
        assert!(flat.flagged);
        // A layer scoring 25% above its successor.
        let faces = select_layers(&[0.95, 0.94, 0.9, 0.72, 0.6, 0.5], 0.2).unwrap();
        assert_eq!(faces.cutoff, 3);
    }

    #[test]
    fn normalization_cases() {
        let t = Tensor::from_shape_vec(ndarray::IxDyn(&[3]), vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(normalize_for_viz(&t).0.into_raw_vec_and_offset().0, vec![0.0, 0.5, 1.0]);
        let u = Tensor::from_shape_vec(ndarray::IxDyn(&[4]), vec![0.0, 0.3, 1.0, 0.7]).unwrap();
        assert_eq!(normalize_for_viz(&u).0, u);
        let (c, warned) = normalize_for_viz(&Tensor::from_elem(ndarray::IxDyn(&[2, 2]), 3.0));
        assert!(warned && c.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_probe_scores_one() {
        let o = OracleGenerator::new(OracleSpec {
            resolution: 16,
            edge_px: 1.0,
        })
        .unwrap();
        let r = trgb_probe_with::<f64>(&o, 3, 1, ProbeMode::Identity).unwrap();
        assert!(r.layers.iter().all(|l| l.ssim == 1.0));
        assert!(trgb_noise_probe::<f64>(&o, 0, 1).is_err());
    }

    #[test]
    fn oracle_probe_separates_foreground_layer() {
        let o = OracleGenerator::new(OracleSpec::default()).unwrap();
        let r = trgb_noise_probe::<f32>(&o, 64, 3).unwrap();
        let s = r.scores();
        assert!(s[FOREGROUND_LAYER] < s[s.len() - 1], "{s:?}");
        assert_eq!(r.selection.cutoff, FOREGROUND_LAYER, "{s:?}");
    }
}
