//! Labeled dataset emission, segmentation metrics, the downstream segmenter
//! and background swapping.

mod metrics;
mod segmenter;

pub use metrics::{compute_metrics, compute_metrics_batch, Aggregation, PixelCounts, Scores, SegReport};
pub use segmenter::{
    load_split, score_segmenter, train_downstream, train_segmenter, DownstreamConfig, DownstreamOutcome, Segmenter, SegmenterSpec,
};

use crate::alpha::{threshold, AlphaNet};
use crate::autograd::Scalar;
use crate::error::{invalid, Error, Result};
use crate::io::{self, file_sha256, read_gray_png, read_jsonl, read_rgb_png, write_gray_png, write_jsonl, write_rgb8_png, write_rgb_png};
use crate::rng::stream_seed;
use crate::stylegen::{synthesize, Generator, LatentCode, OracleGenerator};
use crate::trainer::{composite_image, truncate_codes};
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const MANIFEST: &str = "manifest.jsonl";

/// Decides whether a drawn sample is kept; `Some(reason)` rejects it.
pub trait Rejector: Send + Sync {
    fn name(&self) -> String;
    fn check(&self, code: &LatentCode, image: &Array3<f64>, soft_mask: &Array2<f64>) -> Option<String>;
}

pub struct AcceptAll;

impl Rejector for AcceptAll {
    fn name(&self) -> String {
        "accept_all".into()
    }

    fn check(&self, _: &LatentCode, _: &Array3<f64>, _: &Array2<f64>) -> Option<String> {
        None
    }
}

/// Rejects oracle samples whose analytic foreground area is outside `[lo, hi]`.
pub struct OracleAreaBand {
    pub oracle: Arc<OracleGenerator>,
    pub lo: f64,
    pub hi: f64,
}

impl Rejector for OracleAreaBand {
    fn name(&self) -> String {
        format!("oracle_area[{}, {}]", self.lo, self.hi)
    }

    fn check(&self, code: &LatentCode, _: &Array3<f64>, _: &Array2<f64>) -> Option<String> {
        let area = self.oracle.true_mask(code).mean().unwrap_or(0.0);
        (area < self.lo || area > self.hi).then(|| format!("true-mask area {area:.4} outside band"))
    }
}

/// Rejects samples whose hardened predicted mask covers a fraction outside `[lo, hi]`.
pub struct MaskAreaBand {
    pub lo: f64,
    pub hi: f64,
    pub threshold: f64,
}

impl Rejector for MaskAreaBand {
    fn name(&self) -> String {
        format!("mask_area[{}, {}]@{}", self.lo, self.hi, self.threshold)
    }

    fn check(&self, _: &LatentCode, _: &Array3<f64>, soft: &Array2<f64>) -> Option<String> {
        let t = self.threshold;
        let area = soft.iter().filter(|&&v| v >= t).count() as f64 / soft.len().max(1) as f64;
        (area < self.lo || area > self.hi).then(|| format!("predicted area {area:.4} outside band"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub psi: f64,
    pub threshold: f64,
    pub seed: u64,
    pub batch: usize,
    /// Also write 8-bit quantized soft masks under `soft/`.
    pub store_soft: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 100,
            psi: 1.0,
            threshold: 0.9,
            seed: 0,
            batch: 8,
            store_soft: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.batch == 0 {
            return invalid("n and batch must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return invalid(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(self.psi.is_finite() && self.psi >= 0.0) {
            return invalid(format!("psi {} must be a non-negative number", self.psi));
        }
        Ok(())
    }
}

/// One manifest row; rejected draws carry a reason and no files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub attempt: usize,
    pub id: Option<String>,
    pub image: Option<String>,
    pub mask: Option<String>,
    pub soft_mask: Option<String>,
    pub latent_seed: u64,
    pub psi: f64,
    pub threshold: f64,
    pub accepted: bool,
    pub reason: Option<String>,
    pub mask_area: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dir: PathBuf,
    pub accepted: usize,
    pub attempts: usize,
    pub rejections: BTreeMap<String, usize>,
    pub rejector: String,
    pub manifest_sha256: String,
    pub generator: String,
    pub alpha: String,
    pub config: SampleConfig,
}

fn reason_key(reason: &str) -> String {
    reason.split(' ').take(2).collect::<Vec<_>>().join(" ")
}

/// Draws samples until `n` are accepted, writing images, hardened masks and
/// `manifest.jsonl` under `out_dir`. Gives up after `10 n` draws.
pub fn sample_labeled<T: Scalar>(
    gen: &dyn Generator<T>,
    alpha: &AlphaNet<T>,
    cfg: &SampleConfig,
    rejector: &dyn Rejector,
    out_dir: &Path,
) -> Result<DatasetSummary> {
    cfg.validate()?;
    let fp = gen.fingerprint();
    if alpha.generator != fp {
        return Err(Error::Fingerprint(format!(
            "alpha network was trained on {}, generator is {fp}",
            alpha.generator
        )));
    }
    let spec = gen.spec();
    let budget = 10 * cfg.n;
    let mut rows = Vec::new();
    let mut accepted = 0;
    let mut rejections = BTreeMap::new();
    let mut attempt = 0;
    while accepted < cfg.n && attempt < budget {
        let k = cfg.batch.min(budget - attempt);
        let codes: Vec<LatentCode> = (attempt..attempt + k)
            .map(|a| LatentCode::sample(spec, stream_seed(cfg.seed, "sample", a as u64)))
            .collect();
        let codes = truncate_codes(gen, codes, cfg.psi)?;
        let fs = synthesize(gen, &codes, true)?;
        let masks = alpha.mask_tensor(spec, &fs)?;
        for (i, code) in codes.iter().enumerate() {
            if accepted == cfg.n {
                break;
            }
            let image = fs.image_at(i).mapv(|v| v.to_f64().unwrap());
            let soft = masks
                .index_axis(Axis(0), i)
                .slice(s![0, .., ..])
                .mapv(|v| v.to_f64().unwrap());
            let hard = threshold(&soft, cfg.threshold);
            let mask_area = hard.iter().map(|&v| v as f64).sum::<f64>() / hard.len() as f64;
            let mut row = LabeledSample {
                attempt,
                id: None,
                image: None,
                mask: None,
                soft_mask: None,
                latent_seed: code.seed,
                psi: cfg.psi,
                threshold: cfg.threshold,
                accepted: false,
                reason: None,
                mask_area,
            };
            match rejector.check(code, &image, &soft) {
                Some(reason) => {
                    *rejections.entry(reason_key(&reason)).or_insert(0) += 1;
                    row.reason = Some(reason);
                }
                None => {
                    let id = format!("{accepted:06}");
                    let img = format!("images/{id}.png");
                    let msk = format!("masks/{id}.png");
                    write_rgb_png(&out_dir.join(&img), &image)?;
                    write_gray_png(&out_dir.join(&msk), &hard.mapv(f64::from))?;
                    if cfg.store_soft {
                        let sm = format!("soft/{id}.png");
                        write_gray_png(&out_dir.join(&sm), &soft)?;
                        row.soft_mask = Some(sm);
                    }
                    row.id = Some(id);
                    row.image = Some(img);
                    row.mask = Some(msk);
                    row.accepted = true;
                    accepted += 1;
                }
            }
            rows.push(row);
            attempt += 1;
        }
    }
    let manifest = out_dir.join(MANIFEST);
    write_jsonl(&manifest, &rows)?;
    if accepted < cfg.n {
        return Err(Error::Rejection(format!(
            "{accepted} of {} samples accepted after {attempt} draws ({}); rejections: {:?}",
            cfg.n,
            rejector.name(),
            rejections
        )));
    }
    log::info!("{accepted} samples in {attempt} draws, rejections {rejections:?}");
    Ok(DatasetSummary {
        dir: out_dir.to_path_buf(),
        accepted,
        attempts: attempt,
        rejections,
        rejector: rejector.name(),
        manifest_sha256: file_sha256(&manifest)?,
        generator: fp,
        alpha: io::sha256_hex(&alpha.to_container().to_bytes()),
        config: cfg.clone(),
    })
}

/// An accepted sample read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub row: LabeledSample,
    pub image: Array3<f64>,
    pub mask: Array2<u8>,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<LabeledSample>> {
    read_jsonl(&dir.join(MANIFEST))
}

/// Accepted samples of a dataset directory, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let mut out = Vec::new();
    for row in read_manifest(dir)? {
        if !row.accepted {
            continue;
        }
        let (Some(img), Some(msk)) = (&row.image, &row.mask) else {
            return Err(Error::format(dir.join(MANIFEST), "accepted row without files"));
        };
        let image = read_rgb_png(&dir.join(img))?;
        let mask = read_gray_png::<f64>(&dir.join(msk))?.mapv(|v| u8::from(v >= 0.5));
        if mask.dim() != (image.dim().1, image.dim().2) {
            return Err(Error::Shape(format!("{msk}: mask and image sizes differ")));
        }
        out.push(LoadedSample { row, image, mask });
    }
    Ok(out)
}

/// Mask used when recompositing over a new background.
pub enum SwapMask<'a, T: Scalar> {
    /// Predicted by an alpha network, optionally hardened at a threshold.
    Alpha { net: &'a AlphaNet<T>, threshold: Option<f64> },
    Ones,
    Given(Array2<f64>),
}

/// Foreground of `code` composited over `bg` (`[3, m, m]`).
pub fn background_swap<T: Scalar>(
    gen: &dyn Generator<T>,
    mask: SwapMask<'_, T>,
    code: &LatentCode,
    bg: &Array3<f64>,
) -> Result<Array3<f64>> {
    let m = gen.spec().resolution;
    if bg.dim() != (3, m, m) {
        return Err(Error::Shape(format!("background {:?}, generator renders (3, {m}, {m})", bg.dim())));
    }
    let capture = matches!(mask, SwapMask::Alpha { .. });
    let fs = synthesize(gen, std::slice::from_ref(code), capture)?;
    let fg = fs.image_at(0).mapv(|v| v.to_f64().unwrap());
    let mask = match mask {
        SwapMask::Alpha { net, threshold: t } => {
            let soft = net.predict_mask(gen.spec(), &fs)?.remove(0).values;
            match t {
                Some(t) => threshold(&soft, t).mapv(f64::from),
                None => soft,
            }
        }
        SwapMask::Ones => Array2::ones((m, m)),
        SwapMask::Given(g) => g,
    };
    composite_image(&fg, bg, &mask)
}

/// Image dimmed to half brightness with false positives painted green and
/// false negatives red; returns interleaved RGB bytes.
pub fn overlay(image: &Array3<f64>, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dim();
    if c != 3 || pred.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "overlay of image {:?} with masks {:?} / {:?}",
            image.dim(),
            pred.dim(),
            gt.dim()
        )));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let paint = match (pred[[y, x]] != 0, gt[[y, x]] != 0) {
                (true, false) => Some([0u8, 255, 0]),
                (false, true) => Some([255, 0, 0]),
                _ => None,
            };
            for ch in 0..3 {
                let v = ((image[[ch, y, x]] + 1.0) * 0.5).clamp(0.0, 1.0);
                out.push(match paint {
                    Some(p) => p[ch],
                    None => (v * 127.5).round() as u8,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &Array3<f64>, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    let (_, h, w) = image.dim();
    write_rgb8_png(path, w, h, &overlay(image, pred, gt)?)
}

/// Scores predicted masks against the oracle's analytic masks (hardened at
/// 0.5) on `n` codes from the `"eval"` stream of `seed`.
pub fn evaluate_oracle<T: Scalar>(
    gen: &dyn Generator<T>,
    oracle: &OracleGenerator,
    alpha: &AlphaNet<T>,
    n: usize,
    seed: u64,
    mask_threshold: f64,
    aggregation: Aggregation,
) -> Result<SegReport> {
    if n == 0 {
        return invalid("need at least one evaluation code");
    }
    let spec = gen.spec();
    let mut preds = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    let chunk = 16;
    for start in (0..n).step_by(chunk) {
        let codes: Vec<LatentCode> = (start..(start + chunk).min(n))
            .map(|i| LatentCode::sample(spec, stream_seed(seed, "eval", i as u64)))
            .collect();
        let fs = synthesize(gen, &codes, true)?;
        for (sm, code) in alpha.predict_mask(spec, &fs)?.into_iter().zip(&codes) {
            preds.push(sm.threshold(mask_threshold));
            gts.push(threshold(&oracle.true_mask(code), 0.5));
        }
    }
    compute_metrics_batch(&preds, &gts, aggregation)
}

/// Pairs prediction and ground-truth mask files by file stem.
pub fn pair_mask_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let list = |d: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut m = BTreeMap::new();
        for e in std::fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let p = e.map_err(|e| Error::io(d, e))?.path();
            if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    m.insert(stem.to_string(), p.clone());
                }
            }
        }
        Ok(m)
    };
    let preds = list(pred_dir)?;
    let gts = list(gt_dir)?;
    let only_pred: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    let only_gt: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return invalid(format!(
            "unmatched ids: only in predictions {only_pred:?}, only in ground truth {only_gt:?}"
        ));
    }
    if preds.is_empty() {
        return invalid(format!("no PNG masks in {}", pred_dir.display()));
    }
    Ok(preds
        .into_iter()
        .map(|(k, p)| {
            let g = gts[&k].clone();
            (k, p, g)
        })
        .collect())
}

/// Metrics over two directories of mask PNGs (foreground where value ≥ 0.5).
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, aggregation: Aggregation) -> Result<SegReport> {
    let pairs = pair_mask_dirs(pred_dir, gt_dir)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (_, p, g) in &pairs {
        preds.push(read_gray_png::<f64>(p)?.mapv(|v| u8::from(v >= 0.5)));
        gts.push(read_gray_png::<f64>(g)?.mapv(|v| u8::from(v >= 0.5)));
    }
    let mut report = compute_metrics_batch(&preds, &gts, aggregation)?;
    report.ids = pairs.into_iter().map(|(k, _, _)| k).collect();
    Ok(report)
}

pub fn save_report(path: &Path, report: &SegReport) -> Result<()> {
    io::write_json(path, report)
}
