//! Background generator derivation: score synthesis layers by how strongly a
//! background-reconstruction objective pulls on them, then zero the winner.

use crate::autograd::{lit, resize_bilinear, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::io::{file_sha256, read_json, sha256_hex, write_json};
use crate::rng::stream_seed;
use crate::stylegen::{
    load_generator, synthesize, synthesize_on, AnyGenerator, Generator, GeneratorKind, GeneratorSpec, LatentCode,
    SynthControl, SynthOutput,
};
use ndarray::{s, Array3, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// A background patch upsampled to the generator's output size.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundCrop {
    /// `[3, m, m]` in `[-1, 1]`.
    pub image: Array3<f64>,
    pub source: String,
}

impl BackgroundCrop {
    pub fn new(image: Array3<f64>, source: impl Into<String>) -> Result<Self> {
        if image.shape()[0] != 3 || image.shape()[1] != image.shape()[2] {
            return Err(Error::Shape(format!("crop must be [3, m, m], got {:?}", image.shape())));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("background crop".into()));
        }
        if image.iter().any(|v| v.abs() > 1.0) {
            return invalid("background crop values must lie in [-1, 1]");
        }
        Ok(Self {
            image,
            source: source.into(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Norm applied to each channel's gradient map before summing over channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNorm {
    #[default]
    L2,
    L1,
}

impl GradNorm {
    fn apply(self, xs: impl Iterator<Item = f64>) -> f64 {
        match self {
            GradNorm::L2 => xs.map(|v| v * v).sum::<f64>().sqrt(),
            GradNorm::L1 => xs.map(f64::abs).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub crop: usize,
    pub code: usize,
    pub layer_scores: Vec<f64>,
}

/// Per-layer gradient scores averaged over (crop, code) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreReport {
    pub scores: Vec<f64>,
    /// `[layer][channel]`, averaged like `scores`.
    pub channel_scores: Vec<Vec<f64>>,
    /// Highest score; ties go to the lowest layer index.
    pub argmax: usize,
    pub norm: GradNorm,
    pub n_crops: usize,
    pub n_codes: usize,
    pub pairs: Vec<PairScore>,
    /// `(crop, code)` pairs skipped for non-finite gradients.
    pub dropped: Vec<(usize, usize)>,
    pub generator: String,
}

impl LayerScoreReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Gradients of `sum_b ||G(code) - x_b||^2` with respect to every layer
/// activation, one batch row per crop. Entry `[layer]` has shape
/// `[n_crops, C, r, r]`.
pub fn layer_gradients<T: Scalar>(
    gen: &dyn Generator<T>,
    crops: &[BackgroundCrop],
    code: &LatentCode,
) -> Result<Vec<Tensor<T>>> {
    let m = gen.spec().resolution;
    if let Some(c) = crops.iter().find(|c| c.resolution() != m) {
        return Err(Error::Shape(format!(
            "crop '{}' is {}x{}, generator renders {m}x{m}",
            c.source,
            c.resolution(),
            c.resolution()
        )));
    }
    let tape = Tape::new();
    let batch: Vec<LatentCode> = vec![code.clone(); crops.len()];
    let mut ctl = SynthControl::none();
    ctl.watch = true;
    let out = synthesize_on(gen, &tape, &batch, &ctl)?;
    let mut target = Tensor::<T>::zeros(IxDyn(&[crops.len(), 3, m, m]));
    for (i, c) in crops.iter().enumerate() {
        target.slice_mut(s![i, .., .., ..]).assign(&c.image.mapv(lit::<T>));
    }
    let diff = tape.sub(out.image, tape.constant(target));
    let grads = tape.backward(tape.sum(tape.square(diff)));
    Ok(out
        .activations
        .iter()
        .map(|&a| {
            grads
                .wrt(a)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(IxDyn(&tape.shape(a))))
        })
        .collect())
}

/// Scores every synthesis layer by `sum_c ||dL/dT_c||` for the objective
/// `L = ||G(w, n) - x||^2`, averaged over all (crop, code) pairs.
pub fn score_layers<T: Scalar>(
    gen: &dyn Generator<T>,
    crops: &[BackgroundCrop],
    codes: &[LatentCode],
    norm: GradNorm,
) -> Result<LayerScoreReport> {
    if crops.is_empty() {
        return invalid("layer scoring needs at least one background crop");
    }
    if codes.is_empty() {
        return invalid("layer scoring needs at least one latent code");
    }
    let widths = gen.spec().channels.clone();
    let mut channel_acc: Vec<Vec<f64>> = widths.iter().map(|&c| vec![0.0; c]).collect();
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for (j, code) in codes.iter().enumerate() {
        let grads = layer_gradients(gen, crops, code)?;
        for i in 0..crops.len() {
            let per_layer: Vec<Vec<f64>> = grads
                .iter()
                .map(|g| {
                    let row = g.index_axis(Axis(0), i);
                    row.outer_iter()
                        .map(|ch| norm.apply(ch.iter().map(|v| v.to_f64().unwrap())))
                        .collect()
                })
                .collect();
            if per_layer.iter().flatten().any(|v| !v.is_finite()) {
                log::warn!("dropping (crop {i}, code {j}): non-finite gradient");
                dropped.push((i, j));
                continue;
            }
            for (acc, chans) in channel_acc.iter_mut().zip(&per_layer) {
                for (a, v) in acc.iter_mut().zip(chans) {
                    *a += v;
                }
            }
            pairs.push(PairScore {
                crop: i,
                code: j,
                layer_scores: per_layer.iter().map(|c| c.iter().sum()).collect(),
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::NonFinite("every (crop, code) pair produced non-finite gradients".into()));
    }
    let n = pairs.len() as f64;
    let channel_scores: Vec<Vec<f64>> = channel_acc
        .into_iter()
        .map(|c| c.into_iter().map(|v| v / n).collect())
        .collect();
    let scores: Vec<f64> = channel_scores.iter().map(|c| c.iter().sum()).collect();
    Ok(LayerScoreReport {
        argmax: argmax_lowest(&scores),
        scores,
        channel_scores,
        norm,
        n_crops: crops.len(),
        n_codes: codes.len(),
        pairs,
        dropped,
        generator: gen.fingerprint(),
    })
}

/// Channels of `layer` whose score reaches `fraction` of the layer's largest
/// channel score. Analysis only; training zeroes whole layers.
pub fn curate_channels(report: &LayerScoreReport, layer: usize, fraction: f64) -> Result<Vec<usize>> {
    let chans = report
        .channel_scores
        .get(layer)
        .ok_or_else(|| Error::MissingLayer {
            layer,
            detail: "not in score report".into(),
        })?;
    let top = chans.iter().cloned().fold(0.0, f64::max);
    Ok(chans
        .iter()
        .enumerate()
        .filter(|(_, &v)| top > 0.0 && v >= fraction * top)
        .map(|(i, _)| i)
        .collect())
}

/// A base generator with some layers (or channels) forced to zero. Weights
/// are shared with the base, never copied.
#[derive(Clone)]
pub struct TrimmedGenerator<T: Scalar> {
    base: Arc<dyn Generator<T>>,
    layers: BTreeSet<usize>,
    channels: Vec<(usize, Vec<usize>)>,
}

impl<T: Scalar> std::fmt::Debug for TrimmedGenerator<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrimmedGenerator")
            .field("base", &self.base.fingerprint())
            .field("layers", &self.layers)
            .field("channels", &self.channels)
            .finish()
    }
}

fn check_trim_layer(spec: &GeneratorSpec, layer: usize) -> Result<()> {
    let n = spec.n_layers();
    if layer >= n {
        return Err(Error::MissingLayer {
            layer,
            detail: format!("generator has {n} synthesis layers"),
        });
    }
    if layer == n - 1 {
        return invalid(format!(
            "layer {layer} is the final layer; zeroing it would blank the image"
        ));
    }
    Ok(())
}

/// Zeroes every channel of `layer` in `base`.
pub fn trim<T: Scalar>(base: Arc<dyn Generator<T>>, layer: usize) -> Result<TrimmedGenerator<T>> {
    check_trim_layer(base.spec(), layer)?;
    Ok(TrimmedGenerator {
        base,
        layers: [layer].into_iter().collect(),
        channels: Vec::new(),
    })
}

/// Zeroes only the listed channels of `layer` (analysis mode).
pub fn trim_channels<T: Scalar>(
    base: Arc<dyn Generator<T>>,
    layer: usize,
    channels: Vec<usize>,
) -> Result<TrimmedGenerator<T>> {
    check_trim_layer(base.spec(), layer)?;
    let width = base.spec().channels[layer];
    if let Some(c) = channels.iter().find(|&&c| c >= width) {
        return invalid(format!("channel {c} out of range for a {width}-channel layer"));
    }
    Ok(TrimmedGenerator {
        base,
        layers: BTreeSet::new(),
        channels: vec![(layer, channels)],
    })
}

impl<T: Scalar> TrimmedGenerator<T> {
    /// Also zeroes `layer`. Trimming an already trimmed layer is a no-op.
    pub fn trim(&self, layer: usize) -> Result<Self> {
        check_trim_layer(self.base.spec(), layer)?;
        let mut out = self.clone();
        out.layers.insert(layer);
        Ok(out)
    }

    pub fn base(&self) -> &Arc<dyn Generator<T>> {
        &self.base
    }

    pub fn layers(&self) -> &BTreeSet<usize> {
        &self.layers
    }
}

impl<T: Scalar> Generator<T> for TrimmedGenerator<T> {
    fn spec(&self) -> &GeneratorSpec {
        self.base.spec()
    }

    fn kind(&self) -> GeneratorKind {
        self.base.kind()
    }

    fn mapping(&self, tape: &Tape<T>, z: Var) -> Var {
        self.base.mapping(tape, z)
    }

    fn synthesis(&self, tape: &Tape<T>, styles: &[Var], noise: &[Var], ctl: &SynthControl<T>) -> SynthOutput {
        let mut ctl = ctl.clone();
        ctl.trimmed.extend(self.layers.iter().copied());
        ctl.zeroed_channels.extend(self.channels.iter().cloned());
        self.base.synthesis(tape, styles, noise, &ctl)
    }

    fn fingerprint(&self) -> String {
        let tag = serde_json::to_vec(&("trimmed", self.base.fingerprint(), &self.layers, &self.channels)).unwrap();
        sha256_hex(&tag)
    }

    fn weights(&self) -> Option<&ParamStore<T>> {
        self.base.weights()
    }

    fn trimmed_layers(&self) -> BTreeSet<usize> {
        let mut all = self.base.trimmed_layers();
        all.extend(self.layers.iter().copied());
        all
    }
}

/// On-disk form of a background generator: a pointer to the base checkpoint
/// plus the layers to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimDirective {
    pub base_checkpoint: PathBuf,
    pub base_sha256: String,
    pub base_fingerprint: String,
    pub trimmed_layers: Vec<usize>,
    #[serde(default)]
    pub score_report: Option<PathBuf>,
}

impl TrimDirective {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Reads the directive, verifies the base checkpoint is unchanged and
    /// rebuilds the trimmed generator over it.
    pub fn load<T: Scalar>(path: &Path) -> Result<(Self, Arc<AnyGenerator<T>>, TrimmedGenerator<T>)> {
        let d: TrimDirective = read_json(path)?;
        let base_path = if d.base_checkpoint.is_absolute() {
            d.base_checkpoint.clone()
        } else {
            path.parent().unwrap_or(Path::new(".")).join(&d.base_checkpoint)
        };
        let sha = file_sha256(&base_path)?;
        if sha != d.base_sha256 {
            return Err(Error::Fingerprint(format!(
                "{}: base checkpoint hash {sha} differs from the directive's {}",
                base_path.display(),
                d.base_sha256
            )));
        }
        let base = Arc::new(load_generator::<T>(&base_path)?);
        if base.fingerprint() != d.base_fingerprint {
            return Err(Error::Fingerprint(format!(
                "{}: generator fingerprint differs from the directive",
                base_path.display()
            )));
        }
        let Some((&first, rest)) = d.trimmed_layers.split_first() else {
            return Err(Error::format(path, "trim directive lists no layers"));
        };
        let dyn_base: Arc<dyn Generator<T>> = base.clone();
        let mut g = trim(dyn_base, first)?;
        for &l in rest {
            g = g.trim(l)?;
        }
        Ok((d, base, g))
    }
}

/// Where crops are cut from each sampled image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropRule {
    /// Top, bottom, left and right strips of the given width, cycled.
    BorderStrips { width: usize },
    /// Fixed square window.
    Window { top: usize, left: usize, size: usize },
}

impl CropRule {
    pub fn default_for(resolution: usize) -> Self {
        CropRule::BorderStrips {
            width: (resolution / 8).max(1),
        }
    }

    /// `(top, left, height, width)` of crop `i` on an `m x m` image.
    pub fn region(&self, i: usize, m: usize) -> Result<(usize, usize, usize, usize)> {
        match *self {
            CropRule::BorderStrips { width } => {
                if width == 0 || width > m {
                    return invalid(format!("strip width {width} invalid for {m}x{m} images"));
                }
                Ok(match i % 4 {
                    0 => (0, 0, width, m),
                    1 => (m - width, 0, width, m),
                    2 => (0, 0, m, width),
                    _ => (0, m - width, m, width),
                })
            }
            CropRule::Window { top, left, size } => {
                if size == 0 || top + size > m || left + size > m {
                    return invalid(format!("window {size} at ({top}, {left}) leaves the {m}x{m} image"));
                }
                Ok((top, left, size, size))
            }
        }
    }

    fn crops_per_sample(&self) -> usize {
        match self {
            CropRule::BorderStrips { .. } => 4,
            CropRule::Window { .. } => 1,
        }
    }
}

/// Cuts `region` out of `[3, m, m]` and resizes it back to `m x m`.
pub fn crop_and_resize(image: &Array3<f64>, region: (usize, usize, usize, usize)) -> Array3<f64> {
    let (top, left, h, w) = region;
    let m = image.shape()[1];
    let patch = image.slice(s![.., top..top + h, left..left + w]).to_owned().into_dyn();
    resize_bilinear(&patch, m, m).into_dimensionality().unwrap()
}

/// Codes used to render the images crops are cut from.
pub fn crop_source_codes(spec: &GeneratorSpec, n_images: usize, seed: u64) -> Vec<LatentCode> {
    (0..n_images)
        .map(|j| LatentCode::sample(spec, stream_seed(seed, "crop_source", j as u64)))
        .collect()
}

/// Renders samples and cuts `n` background crops following `rule`.
pub fn harvest_crops<T: Scalar>(
    gen: &dyn Generator<T>,
    n: usize,
    rule: CropRule,
    seed: u64,
) -> Result<Vec<BackgroundCrop>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = gen.spec().resolution;
    let per = rule.crops_per_sample();
    let codes = crop_source_codes(gen.spec(), n.div_ceil(per), seed);
    let mut out = Vec::with_capacity(n);
    for chunk in codes.chunks(16) {
        let stack = synthesize(gen, chunk, false)?;
        for (k, code) in chunk.iter().enumerate() {
            let img = stack.image_at(k).mapv(|v| v.to_f64().unwrap().clamp(-1.0, 1.0));
            for c in 0..per {
                if out.len() == n {
                    break;
                }
                let region = rule.region(c, m)?;
                out.push(BackgroundCrop::new(
                    crop_and_resize(&img, region),
                    format!("sample:{}/crop:{c}", code.seed),
                )?);
            }
        }
    }
    Ok(out)
}
