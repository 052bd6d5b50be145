//! Small encoder-decoder with skip connections trained on emitted datasets.

use super::{compute_metrics_batch, load_dataset, Aggregation, LoadedSample, SegReport};
use crate::alpha::MASK_EPS;
use crate::autograd::{lit, Adam, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::io::{self, Container};
use crate::nn::{Bind, Conv, Init};
use crate::rng::{stream_seed, substream};
use ndarray::{s, Array2, Array3, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEGMENTER_CONTAINER: &str = "segmenter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSpec {
    pub base_width: usize,
    /// Number of 2x downsamplings.
    pub depth: usize,
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self { base_width: 8, depth: 2 }
    }
}

impl SegmenterSpec {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.base_width == 0 || self.depth == 0 {
            return invalid("segmenter width and depth must be positive");
        }
        if resolution % (1 << self.depth) != 0 {
            return invalid(format!("resolution {resolution} not divisible by 2^{}", self.depth));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter<T: Scalar> {
    pub spec: SegmenterSpec,
    pub resolution: usize,
    pub store: ParamStore<T>,
    down: Vec<(Conv, Conv)>,
    bottom: Conv,
    up: Vec<Conv>,
    head: Conv,
}

impl<T: Scalar> Segmenter<T> {
    pub fn build(spec: SegmenterSpec, resolution: usize, seed: u64) -> Result<Self> {
        spec.validate(resolution)?;
        let mut rng = substream(seed, "segmenter_init", 0);
        let mut store = ParamStore::new();
        let mut down = Vec::new();
        let mut c_in = 3;
        for l in 0..spec.depth {
            let w = spec.width(l);
            let a = Conv::plain(&mut store, &format!("down{l}a"), c_in, w, 3, 1, true, Init::Normal, &mut rng);
            let b = Conv::plain(&mut store, &format!("down{l}b"), w, w, 3, 1, true, Init::Normal, &mut rng);
            down.push((a, b));
            c_in = w;
        }
        let bw = spec.width(spec.depth);
        let bottom = Conv::plain(&mut store, "bottom", c_in, bw, 3, 1, true, Init::Normal, &mut rng);
        let mut up = Vec::new();
        let mut below = bw;
        for l in (0..spec.depth).rev() {
            let w = spec.width(l);
            up.push(Conv::plain(&mut store, &format!("up{l}"), below + w, w, 3, 1, true, Init::Normal, &mut rng));
            below = w;
        }
        let head = Conv::plain(&mut store, "head", below, 1, 1, 1, true, Init::Normal, &mut rng);
        Ok(Self {
            spec,
            resolution,
            store,
            down,
            bottom,
            up,
            head,
        })
    }

    /// Foreground probabilities `[N, 1, m, m]` for images `[N, 3, m, m]`.
    pub fn forward(&self, tape: &Tape<T>, x: Var, trainable: bool) -> Var {
        let b = Bind::new(tape, &self.store, trainable);
        let act = |v| tape.leaky_relu(v, lit(0.2));
        let mut skips = Vec::new();
        let mut h = x;
        for (ca, cb) in &self.down {
            h = act(ca.forward(&b, h));
            h = act(cb.forward(&b, h));
            skips.push(h);
            h = tape.avg_pool(h, 2);
        }
        h = act(self.bottom.forward(&b, h));
        for conv in &self.up {
            let skip = skips.pop().unwrap();
            h = tape.upsample_nearest(h, 2);
            h = act(conv.forward(&b, tape.concat(&[h, skip], 1)));
        }
        let p = tape.sigmoid(self.head.forward(&b, h));
        tape.add_scalar(tape.mul_scalar(p, lit(1.0 - 2.0 * MASK_EPS)), lit(MASK_EPS))
    }

    fn check_images(&self, images: &[&Array3<f64>]) -> Result<()> {
        let m = self.resolution;
        for img in images {
            if img.dim() != (3, m, m) {
                return Err(Error::Shape(format!("segmenter expects (3, {m}, {m}), got {:?}", img.dim())));
            }
        }
        Ok(())
    }

    pub fn predict(&self, images: &[&Array3<f64>]) -> Result<Vec<Array2<f64>>> {
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let tape = Tape::new();
            let x = tape.constant(stack_images(chunk));
            let p = tape.value(self.forward(&tape, x, false));
            for i in 0..chunk.len() {
                out.push(p.slice(s![i, 0, .., ..]).mapv(|v| v.to_f64().unwrap()));
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({ "spec": self.spec, "resolution": self.resolution });
        let mut c = Container::new(SEGMENTER_CONTAINER, meta);
        for (n, t) in self.store.iter() {
            c.push(n, t);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != SEGMENTER_CONTAINER {
            return Err(Error::format(path, format!("expected a segmenter, found {}", c.kind)));
        }
        let spec: SegmenterSpec = serde_json::from_value(c.meta["spec"].clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let res = c.meta["resolution"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "missing resolution"))? as usize;
        let mut net = Self::build(spec, res, 0)?;
        for i in 0..net.store.len() {
            let name = net.store.name(i).to_string();
            let t = c
                .tensor(&name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
            let dst = net.store.get_mut(i);
            if t.shape() != dst.shape() {
                return Err(Error::format(path, format!("tensor {name} has shape {:?}", t.shape())));
            }
            *dst = t.mapv(lit);
        }
        Ok(net)
    }
}

fn stack_images<T: Scalar>(images: &[&Array3<f64>]) -> Tensor<T> {
    let (c, h, w) = images[0].dim();
    Tensor::from_shape_fn(IxDyn(&[images.len(), c, h, w]), |ix| lit(images[ix[0]][[ix[1], ix[2], ix[3]]]))
}

fn stack_masks<T: Scalar>(masks: &[&Array2<u8>]) -> Tensor<T> {
    let (h, w) = masks[0].dim();
    Tensor::from_shape_fn(IxDyn(&[masks.len(), 1, h, w]), |ix| lit(f64::from(masks[ix[0]][[ix[2], ix[3]]])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub arch: SegmenterSpec,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub min_samples: usize,
    pub seed: u64,
    /// Pair every image with another image's mask (control run).
    pub shuffle_labels: bool,
    pub threshold: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            arch: SegmenterSpec::default(),
            steps: 2000,
            batch: 8,
            lr: 2e-3,
            val_fraction: 0.1,
            min_samples: 100,
            seed: 0,
            shuffle_labels: false,
            threshold: 0.5,
        }
    }
}

/// Binary cross-entropy of predicted probabilities against 0/1 targets.
fn bce<T: Scalar>(tape: &Tape<T>, p: Var, target: Var) -> Var {
    let one_minus_t = tape.rsub_scalar(lit(1.0), target);
    let one_minus_p = tape.rsub_scalar(lit(1.0), p);
    let ll = tape.add(tape.mul(target, tape.ln(p)), tape.mul(one_minus_t, tape.ln(one_minus_p)));
    tape.neg(tape.mean(ll))
}

/// Fits a segmenter to image/mask pairs and reports its final training loss.
pub fn train_segmenter<T: Scalar>(
    train: &[(&Array3<f64>, &Array2<u8>)],
    cfg: &DownstreamConfig,
) -> Result<(Segmenter<T>, Vec<f64>)> {
    if train.is_empty() {
        return invalid("empty training split");
    }
    let res = train[0].0.dim().1;
    let mut net = Segmenter::<T>::build(cfg.arch.clone(), res, cfg.seed)?;
    net.check_images(&train.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let mut adam = Adam::new(&net.store, cfg.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = substream(cfg.seed, "segmenter_batches", 0);
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let imgs: Vec<&Array3<f64>> = idx.iter().map(|&i| train[i].0).collect();
        let msks: Vec<&Array2<u8>> = idx.iter().map(|&i| train[i].1).collect();
        let tape = Tape::new();
        let x = tape.constant(stack_images(&imgs));
        let y = tape.constant(stack_masks(&msks));
        let loss = bce(&tape, net.forward(&tape, x, true), y);
        let l = tape.scalar(loss).to_f64().unwrap();
        if !l.is_finite() {
            return Err(Error::Diverged(format!("segmenter loss {l} at step {step}")));
        }
        losses.push(l);
        let grads = tape.backward(loss).for_store(&net.store);
        adam.step(&mut net.store, &grads);
    }
    Ok((net, losses))
}

/// Train/validation split by a hash of each sample id.
pub fn load_split(dir: &Path, val_fraction: f64, seed: u64) -> Result<(Vec<LoadedSample>, Vec<LoadedSample>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return invalid(format!("val_fraction {val_fraction} outside [0, 1)"));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in load_dataset(dir)? {
        let h = stream_seed(seed, "split", s.row.attempt as u64);
        if (h as f64 / u64::MAX as f64) < val_fraction {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownstreamOutcome {
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub n_train: usize,
    pub n_val: usize,
    pub final_loss: f64,
    pub val: SegReport,
    pub config: DownstreamConfig,
}

pub fn score_segmenter<T: Scalar>(
    net: &Segmenter<T>,
    samples: &[&LoadedSample],
    threshold: f64,
    aggregation: Aggregation,
) -> Result<SegReport> {
    let imgs: Vec<&Array3<f64>> = samples.iter().map(|s| &s.image).collect();
    let preds: Vec<Array2<u8>> = net
        .predict(&imgs)?
        .iter()
        .map(|p| crate::alpha::threshold(p, threshold))
        .collect();
    let gts: Vec<Array2<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    compute_metrics_batch(&preds, &gts, aggregation)
}

/// Trains on a dataset directory and writes `segmenter.ckpt` and `val_report.json`.
pub fn train_downstream<T: Scalar>(dataset: &Path, cfg: &DownstreamConfig, out_dir: &Path) -> Result<DownstreamOutcome> {
    let (train, val) = load_split(dataset, cfg.val_fraction, cfg.seed)?;
    let total = train.len() + val.len();
    if total < cfg.min_samples {
        return invalid(format!("dataset has {total} samples, at least {} required", cfg.min_samples));
    }
    if train.is_empty() || val.is_empty() {
        return invalid(format!("empty split: {} train, {} val", train.len(), val.len()));
    }
    let labels: Vec<&Array2<u8>> = if cfg.shuffle_labels {
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut substream(cfg.seed, "label_shuffle", 0));
        perm.iter().map(|&i| &train[i].mask).collect()
    } else {
        train.iter().map(|s| &s.mask).collect()
    };
    let pairs: Vec<(&Array3<f64>, &Array2<u8>)> = train.iter().map(|s| &s.image).zip(labels).collect();
    let (net, losses) = train_segmenter::<T>(&pairs, cfg)?;
    let val_refs: Vec<&LoadedSample> = val.iter().collect();
    let report = score_segmenter(&net, &val_refs, cfg.threshold, Aggregation::Micro)?;
    io::ensure_dir(out_dir)?;
    let ckpt = out_dir.join("segmenter.ckpt");
    let sha = net.save(&ckpt)?;
    io::write_json(&out_dir.join("val_report.json"), &report)?;
    Ok(DownstreamOutcome {
        checkpoint: ckpt,
        checkpoint_sha256: sha,
        n_train: train.len(),
        n_val: val.len(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        val: report,
        config: cfg.clone(),
    })
}
