//! Acceptance checks, one line per criterion.
//!
//! `GANSEG_ACCEPT_ONLY=formula,ssim` restricts the run to named checks.
//! The toy pipeline only runs with `GANSEG_ACCEPT_SLOW=1`. Adding
//! `GANSEG_TOY_BUDGET=smoke` runs it with tiny budgets as a plumbing check;
//! that line is labelled SMOKE and does not count as a verdict.

use ganseg_core::alpha::{AlphaNet, AlphaNetSpec};
use ganseg_core::autograd::{Scalar, Tape, Tensor, Var};
use ganseg_core::background::{crop_source_codes, harvest_crops, layer_gradients, score_layers, trim, BackgroundCrop, CropRule, GradNorm};
use ganseg_core::dataset_eval::{compute_metrics, compute_metrics_batch, Aggregation, PixelCounts};
use ganseg_core::dataset_eval::{train_downstream, DownstreamConfig, Segmenter};
use ganseg_core::dataset_eval::{evaluate_oracle, sample_labeled, AcceptAll, SampleConfig};
use ganseg_core::layer_select::{ssim, trgb_noise_probe};
use ganseg_core::rng::{normal_tensor, stream_seed, substream, uniform_tensor};
use ganseg_core::stylegen::pretrain::{pretrain_gan, PretrainConfig, PretrainState};
use ganseg_core::stylegen::procedural::{load_images, read_manifest, render, sample_params, write_dataset};
use ganseg_core::stylegen::{
    fit_w_mean, load_generator, map_latent, synthesize, synthesize_with, truncate, Generator, GeneratorSpec, LatentCode, OracleGenerator,
    OracleSpec, StyleGenerator, SynthControl, FOREGROUND_LAYER,
};
use ganseg_core::trainer::{
    area_regs, binary_reg, composite, load_background_images, AlphaFeatures, BgSource, Backgrounds, TrainConfig, TrainState,
};
use ndarray::{Array2, Array3, IxDyn};
use rand::Rng;
use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("GANSEG_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let slow = std::env::var_os("GANSEG_ACCEPT_SLOW").is_some();
    let smoke = toy_smoke();
    let checks: Vec<(&str, &str, fn() -> Check)> = vec![
        ("formula", "formula suites (composite, B/C/E, truncation, metric counts)", formula_suites),
        ("numerical", "numerical suites (alpha and layer-score gradients vs central differences)", numerical_suites),
        ("ssim", "SSIM suite (identity, symmetry, direct-formula oracle)", ssim_suite),
        ("structural", "structural suites (frozen drift, trim, mask range, locality)", structural_suites),
        ("oracle", "oracle end-to-end (layer scoring, trim, alpha training, mIOU >= 0.85)", oracle_end_to_end),
        ("ablation", "ablation ordering (external backgrounds, last-layer-only < default)", ablation_ordering),
        ("toy", "toy pipeline end-to-end (downstream mIOU >= 0.70)", toy_pipeline),
    ];
    let mut failed = 0;
    for (key, title, f) in checks {
        if only.as_ref().is_some_and(|o| !o.iter().any(|k| k == key)) {
            continue;
        }
        if key == "toy" && !slow {
            println!("SKIP  {title}: slow, set GANSEG_ACCEPT_SLOW=1");
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            _ if key == "toy" && smoke => println!("SMOKE {title}: {} [{secs:.1}s]", res.unwrap_or_else(|e| e)),
            Ok(detail) => println!("PASS  {title}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {title}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- formulas

fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    uniform_tensor(&mut substream(seed, "acceptance", 0), shape, lo, hi)
}

fn composite_identities<T: Scalar>() -> Result<(), String> {
    let fg = random_tensor(&[4, 3, 8, 8], 1, -1.0, 1.0).mapv(|v| T::from(v).unwrap());
    let bg = random_tensor(&[4, 3, 8, 8], 2, -1.0, 1.0).mapv(|v| T::from(v).unwrap());
    for (level, want) in [(0.0, &bg), (1.0, &fg)] {
        let tape = Tape::<T>::new();
        let m = tape.constant(Tensor::from_elem(IxDyn(&[4, 1, 8, 8]), T::from(level).unwrap()));
        let out = composite(&tape, tape.constant(fg.clone()), tape.constant(bg.clone()), m).map_err(e)?;
        ensure(*tape.value(out) == *want, format!("M = {level} does not reproduce its source exactly"))?;
    }
    Ok(())
}

fn formula_suites() -> Check {
    composite_identities::<f64>()?;
    composite_identities::<f32>()?;

    let mut rng = substream(3, "regularizer_masks", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..4usize);
        let r = rng.random_range(2..9usize);
        let mask = uniform_tensor::<f64>(&mut rng, &[n, 1, r, r], 0.0, 1.0);
        let phi1: f64 = rng.random_range(0.0..1.0);
        let phi2: f64 = rng.random_range(0.0..1.0);
        let tape = Tape::new();
        let m = tape.constant(mask.clone());
        let b = tape.scalar(binary_reg(&tape, m));
        let (c, ev) = area_regs(&tape, m, phi1, phi2);
        let (c, ev) = (tape.scalar(c), tape.scalar(ev));
        let (mut wb, mut wc, mut we) = (0.0, 0.0, 0.0);
        for img in mask.outer_iter() {
            let v: Vec<f64> = img.iter().copied().collect();
            let k = v.len() as f64;
            wb += v.iter().map(|&x| if x < 0.5 { x } else { 1.0 - x }).sum::<f64>() / k;
            let fg = v.iter().sum::<f64>() / k;
            let bgf = v.iter().map(|x| 1.0 - x).sum::<f64>() / k;
            wc += if phi1 > fg { phi1 - fg } else { 0.0 };
            we += if phi2 > bgf { phi2 - bgf } else { 0.0 };
        }
        let nn = n as f64;
        worst = worst.max((b - wb / nn).abs()).max((c - wc / nn).abs()).max((ev - we / nn).abs());
    }
    ensure(worst <= 1e-12, format!("B/C/E deviate by {worst:e}"))?;

    let spec = GeneratorSpec::small(16, 8);
    let mut g = StyleGenerator::<f64>::new(spec.clone(), 4).map_err(e)?;
    let mean = fit_w_mean::<f64>(&g, 256, 1).map_err(e)?;
    g.set_w_mean(mean.clone());
    let mut trunc_worst: f64 = 0.0;
    for i in 0..16 {
        let z: Vec<f64> = ganseg_core::rng::normal_vec(&mut substream(5, "z", i), spec.z_dim);
        let w = map_latent::<f64>(&g, &z).map_err(e)?;
        ensure(truncate(&w, &mean, 1.0).map_err(e)? == w, "psi = 1 changed w")?;
        ensure(truncate(&w, &mean, 0.0).map_err(e)? == mean, "psi = 0 did not give w_mean")?;
        let half = truncate(&w, &mean, 0.5).map_err(e)?;
        for ((h, a), b) in half.iter().zip(&w).zip(&mean) {
            trunc_worst = trunc_worst.max((h - (b + 0.5 * (a - b))).abs());
        }
    }
    ensure(trunc_worst <= 1e-15, format!("psi = 0.5 off by {trunc_worst:e}"))?;

    let mut rng = substream(6, "metric_pairs", 0);
    for pair in 0..1000 {
        let density: f64 = rng.random_range(0.0..1.0);
        let pred = Array2::from_shape_fn((8, 8), |_| u8::from(rng.random_bool(density)));
        let gt = Array2::from_shape_fn((8, 8), |_| u8::from(rng.random_bool(0.4)));
        let set = |m: &Array2<u8>| -> HashSet<(usize, usize)> { m.indexed_iter().filter(|(_, &v)| v == 1).map(|(ix, _)| ix).collect() };
        let (p, g) = (set(&pred), set(&gt));
        let tp = p.intersection(&g).count() as u64;
        let fp = p.difference(&g).count() as u64;
        let fn_ = g.difference(&p).count() as u64;
        let tn = 64 - p.union(&g).count() as u64;
        let c = PixelCounts::from_masks(&pred, &gt).map_err(e)?;
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), format!("pair {pair}: counts differ"))?;
        let r = compute_metrics(&pred, &gt).map_err(e)?;
        let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let want_fg = ratio(tp, tp + fp + fn_);
        let want_bg = ratio(tn, tn + fp + fn_);
        let want_acc = (tp + tn) as f64 / 64.0;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
        ensure(
            close(r.iou_fg, want_fg) && close(r.iou_bg, want_bg) && close(r.miou, (want_fg + want_bg) / 2.0) && close(r.accuracy, want_acc),
            format!("pair {pair}: scores differ"),
        )?;
    }
    Ok(format!("B/C/E max err {worst:.1e}, truncation max err {trunc_worst:.1e}, 1000 metric pairs exact"))
}

// --------------------------------------------------------------- numerical

fn randomize(store: &mut ganseg_core::autograd::ParamStore<f64>, seed: u64, scale: f64) {
    for i in 0..store.len() {
        let shape = store.get(i).shape().to_vec();
        let t = normal_tensor::<f64>(&mut substream(seed, "randomize", i as u64), &shape);
        *store.get_mut(i) = t.mapv(|v| v * scale);
    }
}

fn alpha_functional(net: &AlphaNet<f64>, tape: &Tape<f64>, feats: &[Tensor<f64>], weights: &Tensor<f64>, trainable: bool) -> Var {
    let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let m = net.forward(tape, &vars, trainable);
    tape.sum(tape.mul(m, tape.constant(weights.clone())))
}

fn numerical_suites() -> Check {
    let spec = GeneratorSpec::small(16, 8);
    let layers: Vec<usize> = (0..spec.n_layers()).collect();
    let mut net = AlphaNet::<f64>::build(&spec, "toy", AlphaNetSpec::new(layers, 16), 7).map_err(e)?;
    randomize(&mut net.store, 8, 0.3);
    let fs = ganseg_core::alpha::random_features::<f64>(&spec, 2, 9);
    let feats = net.gather(&spec, &fs).map_err(e)?;
    let weights = random_tensor(&[2, 1, 16, 16], 10, -1.0, 1.0);
    let tape = Tape::new();
    let f = alpha_functional(&net, &tape, &feats, &weights, true);
    let grads = tape.backward(f).for_store(&net.store);
    let h = 1e-6;
    let mut alpha_worst: f64 = 0.0;
    let mut probed = 0;
    let mut kinks = 0;
    let mut probe = net.clone();
    for i in 0..net.store.len() {
        let n = net.store.get(i).len();
        for j in 0..n {
            let orig = net.store.get(i).as_slice_memory_order().unwrap()[j];
            let mut eval = |v: f64| {
                probe.store.get_mut(i).as_slice_memory_order_mut().unwrap()[j] = v;
                let t = Tape::new();
                let y = alpha_functional(&probe, &t, &feats, &weights, false);
                t.scalar(y)
            };
            let (fp, fm, f0) = (eval(orig + h), eval(orig - h), eval(orig));
            let fd = (fp - fm) / (2.0 * h);
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            // A leaky-ReLU kink inside [orig - h, orig + h] makes the one-sided slopes disagree.
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-3) {
                kinks += 1;
                continue;
            }
            let an = grads[i].as_ref().map_or(0.0, |g| g.as_slice_memory_order().unwrap()[j]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            alpha_worst = alpha_worst.max(rel);
            probed += 1;
        }
    }
    ensure(alpha_worst <= 1e-4, format!("alpha gradient rel err {alpha_worst:e}"))?;
    ensure(kinks * 100 <= probed, format!("{kinks} of {probed} params sit on a kink"))?;

    let g = StyleGenerator::<f64>::new(spec.clone(), 11).map_err(e)?;
    let code = LatentCode::sample(&spec, 12);
    let other = synthesize(&g, &[LatentCode::sample(&spec, 13)], false).map_err(e)?;
    let crop = BackgroundCrop::new(other.image_at(0), "other").map_err(e)?;
    let lg = layer_gradients(&g, std::slice::from_ref(&crop), &code).map_err(e)?;
    let target = crop.image.clone();
    let loss = |layer: usize, idx: &[usize], d: f64| -> Result<f64, String> {
        let mut off = Tensor::<f64>::zeros(lg[layer].raw_dim());
        off[idx] = d;
        let mut ctl = SynthControl::none();
        ctl.activation_offset = Some((layer, off));
        let img: Array3<f64> = synthesize_with(&g, &[code.clone()], &ctl, false).map_err(e)?.image_at(0);
        Ok((&img - &target).mapv(|v| v * v).sum())
    };
    let mut score_worst: f64 = 0.0;
    let mut rng = substream(14, "entries", 0);
    for (layer, gl) in lg.iter().enumerate() {
        let s = gl.shape().to_vec();
        for _ in 0..8 {
            let idx = [0, rng.random_range(0..s[1]), rng.random_range(0..s[2]), rng.random_range(0..s[3])];
            let fd = (loss(layer, &idx, 1e-5)? - loss(layer, &idx, -1e-5)?) / 2e-5;
            let an = gl[&idx[..]];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            score_worst = score_worst.max(rel);
        }
    }
    ensure(score_worst <= 1e-4, format!("layer-score gradient rel err {score_worst:e}"))?;
    Ok(format!(
        "alpha max rel err {alpha_worst:.1e} over {probed} params ({kinks} on a kink), layer-score max rel err {score_worst:.1e}"
    ))
}

// -------------------------------------------------------------------- SSIM

/// Direct SSIM with an explicit 2-D Gaussian window, no separable filtering.
fn ssim_direct(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (c, h, w) = a.dim();
    let k = 11usize;
    let sigma: f64 = 1.5;
    let mut win = Array2::from_shape_fn((k, k), |(u, v)| {
        let du = u as f64 - 5.0;
        let dv = v as f64 - 5.0;
        (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp()
    });
    let s = win.sum();
    win.mapv_inplace(|x| x / s);
    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let pa = |u: usize, v: usize| a[[ch, i + u, j + v]];
                let pb = |u: usize, v: usize| b[[ch, i + u, j + v]];
                let (mut ma, mut mb) = (0.0, 0.0);
                for ((u, v), &wt) in win.indexed_iter() {
                    ma += wt * pa(u, v);
                    mb += wt * pb(u, v);
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for ((u, v), &wt) in win.indexed_iter() {
                    let (da, db) = (pa(u, v) - ma, pb(u, v) - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total += acc / count;
    }
    total / c as f64
}

fn ssim_suite() -> Check {
    let pattern = |c: usize, h: usize, w: usize, f: f64, seed: u64| {
        let noise = random_tensor(&[c, h, w], seed, -0.2, 0.2);
        Array3::from_shape_fn((c, h, w), |(k, i, j)| ((i as f64 * f + k as f64).sin() * (j as f64 * 0.7 * f).cos()) * 0.7 + noise[[k, i, j]])
    };
    let pairs = [
        (pattern(3, 16, 16, 0.4, 1), pattern(3, 16, 16, 0.45, 2)),
        (pattern(1, 24, 20, 0.2, 3), pattern(1, 24, 20, 0.2, 4)),
        (pattern(3, 32, 32, 0.9, 5), pattern(3, 32, 32, 0.1, 6).mapv(|v| -v)),
        (Array3::from_elem((3, 16, 16), -0.2), Array3::from_elem((3, 16, 16), 0.3)),
    ];
    let mut worst: f64 = 0.0;
    for (a, b) in &pairs {
        let ia = ssim(a, a).map_err(e)?;
        ensure((ia - 1.0).abs() <= 1e-12, format!("ssim(a, a) = {ia}"))?;
        let (ab, ba) = (ssim(a, b).map_err(e)?, ssim(b, a).map_err(e)?);
        ensure(ab == ba, format!("ssim not symmetric: {ab} vs {ba}"))?;
        ensure((-1.0..=1.0).contains(&ab), "ssim out of range")?;
        worst = worst.max((ab - ssim_direct(a, b)).abs());
    }
    ensure(worst <= 1e-6, format!("oracle deviation {worst:e}"))?;
    Ok(format!("4 fixed pairs, max deviation from direct formula {worst:.1e}"))
}

// -------------------------------------------------------------- structural

fn structural_suites() -> Check {
    let spec = GeneratorSpec::small(16, 8);
    let g: Arc<dyn Generator<f64>> = Arc::new(StyleGenerator::<f64>::new(spec.clone(), 21).map_err(e)?);
    let before = g.weights().unwrap().clone();
    let bg = Arc::new(trim(g.clone(), 1).map_err(e)?);
    let cfg = TrainConfig {
        batch: 2,
        calibration_samples: 4,
        log_every: 0,
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(cfg, g.clone(), Backgrounds::Generator(bg.clone())).map_err(e)?;
    let a0 = st.alpha.store.clone();
    for _ in 0..100 {
        st.step().map_err(e)?;
    }
    st.assert_frozen().map_err(e)?;
    let after = g.weights().unwrap();
    for i in 0..before.len() {
        let same = before.get(i).iter().zip(after.get(i).iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, format!("generator tensor {} drifted", before.name(i)))?;
    }
    ensure(!st.alpha.store.same_values(&a0), "alpha network did not train")?;

    let codes: Vec<LatentCode> = (0..3).map(|i| LatentCode::sample(&spec, 30 + i)).collect();
    let once = synthesize(bg.as_ref(), &codes, true).map_err(e)?;
    let twice = synthesize(&bg.trim(1).map_err(e)?, &codes, true).map_err(e)?;
    let base = synthesize(g.as_ref(), &codes, true).map_err(e)?;
    ensure(once.image == twice.image, "trimming twice changed the output")?;
    ensure(once.layers[1].1.iter().all(|&v| v == 0.0), "trimmed layer not exactly zero")?;
    ensure(once.layers[0].1 == base.layers[0].1, "layer before the trim changed")?;

    let mut range_ok = true;
    for (seed, scale) in [(1u64, 1.0), (2, 1e2), (3, 1e4)] {
        let mut net = AlphaNet::<f64>::build(&spec, "toy", AlphaNetSpec::new(vec![1, 2], 16), seed).map_err(e)?;
        randomize(&mut net.store, seed, 1.0);
        let fs = ganseg_core::alpha::random_features::<f64>(&spec, 2, seed);
        let mut fs_big = fs.clone();
        for l in fs_big.layers.iter_mut() {
            l.1.mapv_inplace(|v| v * scale);
        }
        let m = net.mask_tensor(&spec, &fs_big).map_err(e)?;
        range_ok &= m.iter().all(|&v| v > 0.0 && v < 1.0);
    }
    ensure(range_ok, "mask left the open unit interval")?;

    let spec64 = GeneratorSpec::small(64, 4);
    let all: Vec<usize> = (0..spec64.n_layers()).collect();
    let mut net = AlphaNet::<f64>::build(&spec64, "toy", AlphaNetSpec::new(all, 64), 5).map_err(e)?;
    randomize(&mut net.store, 6, 0.5);
    let fs = ganseg_core::alpha::random_features::<f64>(&spec64, 1, 7);
    let base_mask = net.mask_tensor(&spec64, &fs).map_err(e)?;
    let r = spec64.layer_resolution(0);
    ensure(r == 4, "coarsest layer is not 4x4")?;
    let block = 64 / r;
    for y in 0..r {
        for x in 0..r {
            let mut p = fs.clone();
            for ch in 0..spec64.channels[0] {
                p.layers[0].1[[0, ch, y, x]] += 1.0;
            }
            let m = net.mask_tensor(&spec64, &p).map_err(e)?;
            let mut inside_changed = false;
            for ((_, _, i, j), (&a, &b)) in base_mask.indexed_iter().map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v)).zip(m.iter()).map(|((ix, a), b)| (ix, (a, b))) {
                let inside = i / block == y && j / block == x;
                if inside {
                    inside_changed |= a != b;
                } else {
                    ensure(a.to_bits() == b.to_bits(), format!("site ({y}, {x}) leaked to pixel ({i}, {j})"))?;
                }
            }
            ensure(inside_changed, format!("site ({y}, {x}) did not affect its block"))?;
        }
    }
    Ok("100 frozen steps bit-identical, trim idempotent and exact, masks in (0, 1) up to 1e4 feature scale, 16 sites without leakage".into())
}

// ------------------------------------------------------------------ oracle

const ORACLE_RES: usize = 32;
const EVAL_CODES: usize = 256;
const EVAL_SEED: u64 = 9_000;

struct OracleSetup {
    gen: Arc<dyn Generator<f32>>,
    oracle: OracleGenerator,
    bg: Backgrounds<f32>,
    layers: Vec<usize>,
    argmax: usize,
}

fn oracle_setup() -> Result<OracleSetup, String> {
    let oracle = OracleGenerator::new(OracleSpec {
        resolution: ORACLE_RES,
        edge_px: 1.0,
    })
    .map_err(e)?;
    let spec = Generator::<f64>::spec(&oracle).clone();
    let probe = trgb_noise_probe::<f64>(&oracle, 16, 1).map_err(e)?;
    let crops = harvest_crops::<f64>(&oracle, 16, CropRule::default_for(ORACLE_RES), 2).map_err(e)?;
    let codes = crop_source_codes(&spec, 8, 3);
    let report = score_layers::<f64>(&oracle, &crops, &codes, GradNorm::L2).map_err(e)?;
    let gen: Arc<dyn Generator<f32>> = Arc::new(oracle.clone());
    let bg = Backgrounds::Generator(Arc::new(trim(gen.clone(), report.argmax).map_err(e)?) as Arc<dyn Generator<f32>>);
    Ok(OracleSetup {
        gen,
        oracle,
        bg,
        layers: probe.selection.layers,
        argmax: report.argmax,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Default,
    External,
    LastLayer,
}

fn external_backgrounds(dir: &Path) -> Result<Vec<Array3<f64>>, String> {
    for i in 0..64 {
        let (img, _) = render(&sample_params(77, i), ORACLE_RES);
        ganseg_core::io::write_rgb_png(&dir.join(format!("{i:03}.png")), &img).map_err(e)?;
    }
    load_background_images(dir, ORACLE_RES).map_err(e)
}

fn train_oracle(setup: &OracleSetup, variant: Variant, seed: u64, external: &Arc<Vec<Array3<f64>>>) -> Result<(f64, AlphaNet<f32>), String> {
    let mut cfg = TrainConfig {
        seed,
        selected_layers: setup.layers.clone(),
        log_every: 0,
        ..TrainConfig::oracle()
    };
    let bg = match variant {
        Variant::External => {
            cfg.bg_source = BgSource::ExternalImages;
            cfg.bg_dir = Some("external".into());
            Backgrounds::Images(external.clone())
        }
        _ => setup.bg.clone(),
    };
    if variant == Variant::LastLayer {
        cfg.alpha_features = AlphaFeatures::LastLayerOnly;
    }
    let mut st = TrainState::new(cfg, setup.gen.clone(), bg).map_err(e)?;
    while st.step < st.cfg.iterations {
        st.step().map_err(e)?;
    }
    st.assert_frozen().map_err(e)?;
    let report = evaluate_oracle(setup.gen.as_ref(), &setup.oracle, &st.alpha, EVAL_CODES, EVAL_SEED, 0.9, Aggregation::Macro).map_err(e)?;
    Ok((report.miou, st.alpha))
}

fn oracle_end_to_end() -> Check {
    let setup = oracle_setup()?;
    ensure(setup.argmax == FOREGROUND_LAYER, format!("scoring picked layer {}, expected {FOREGROUND_LAYER}", setup.argmax))?;
    let none = Arc::new(Vec::new());
    let (miou, alpha) = train_oracle(&setup, Variant::Default, 0, &none)?;
    ensure(miou >= 0.85, format!("mIOU {miou:.4} < 0.85"))?;

    // Swapping in new backgrounds leaves pixels the hardened mask marks as background untouched
    // only in the new background; foreground pixels keep the source image.
    let spec = setup.gen.spec().clone();
    let codes: Vec<LatentCode> = (0..8).map(|i| LatentCode::sample(&spec, stream_seed(EVAL_SEED, "swap", i))).collect();
    let fs = synthesize(setup.gen.as_ref(), &codes, true).map_err(e)?;
    let masks = alpha.predict_mask(&spec, &fs).map_err(e)?;
    let mut fg_kept = true;
    for (i, m) in masks.iter().enumerate() {
        let hard = m.threshold(0.9);
        let src: Array3<f64> = fs.image_at(i).mapv(|v| v as f64);
        let new_bg = setup.oracle.background_render(&LatentCode::sample(&spec, 500 + i as u64));
        let out = ganseg_core::trainer::composite_image(&src, &new_bg, &hard.mapv(f64::from)).map_err(e)?;
        for ((y, x), &h) in hard.indexed_iter() {
            for c in 0..3 {
                let want = if h == 1 { src[[c, y, x]] } else { new_bg[[c, y, x]] };
                fg_kept &= out[[c, y, x]] == want;
            }
        }
    }
    ensure(fg_kept, "hard-mask swap altered kept pixels")?;
    Ok(format!(
        "scoring argmax layer {}, probe layers {:?}, mIOU {miou:.4} over {EVAL_CODES} held-out latents",
        setup.argmax, setup.layers
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn ablation_ordering() -> Check {
    let setup = oracle_setup()?;
    let dir = tempfile::tempdir().map_err(e)?;
    let external = Arc::new(external_backgrounds(dir.path())?);
    let mut scores = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..3u64 {
        for (k, v) in [Variant::Default, Variant::External, Variant::LastLayer].into_iter().enumerate() {
            scores[k].push(train_oracle(&setup, v, seed, &external)?.0);
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "per-seed mIOU default {} external {} last-layer {}",
        fmt(&scores[0]),
        fmt(&scores[1]),
        fmt(&scores[2])
    );
    let [d, x, l] = scores.map(median);
    ensure(x < d && l < d, format!("median ordering violated (default {d:.3}, external {x:.3}, last-layer {l:.3}); {detail}"))?;
    Ok(format!("medians default {d:.3} > external {x:.3}, last-layer {l:.3}; {detail}"))
}

// -------------------------------------------------------------------- toy

fn toy_smoke() -> bool {
    std::env::var("GANSEG_TOY_BUDGET").is_ok_and(|v| v == "smoke")
}

struct ToyBudget {
    spec: GeneratorSpec,
    n_images: usize,
    held_out: usize,
    pretrain: PretrainConfig,
    alpha_iterations: usize,
    alpha_batch: usize,
    samples: usize,
    downstream: DownstreamConfig,
}

impl ToyBudget {
    fn full() -> Self {
        Self {
            spec: GeneratorSpec::default(),
            n_images: 4000,
            held_out: 200,
            pretrain: PretrainConfig::default(),
            alpha_iterations: 2000,
            alpha_batch: 8,
            samples: 2000,
            downstream: DownstreamConfig::default(),
        }
    }

    fn smoke() -> Self {
        Self {
            spec: GeneratorSpec::small(64, 8),
            n_images: 32,
            held_out: 8,
            pretrain: PretrainConfig {
                steps: 3,
                batch: 4,
                critic_base_width: 8,
                critic_max_width: 16,
                w_mean_samples: 64,
                ..PretrainConfig::default()
            },
            alpha_iterations: 3,
            alpha_batch: 2,
            samples: 12,
            downstream: DownstreamConfig {
                steps: 2,
                batch: 2,
                min_samples: 10,
                val_fraction: 0.25,
                ..DownstreamConfig::default()
            },
        }
    }
}

fn toy_pipeline() -> Check {
    let b = if toy_smoke() { ToyBudget::smoke() } else { ToyBudget::full() };
    let m = b.spec.resolution;
    let root = tempfile::tempdir().map_err(e)?;
    let (data_dir, held_dir) = (root.path().join("shapes"), root.path().join("held_out"));
    write_dataset(&data_dir, b.n_images, m, 1).map_err(e)?;
    write_dataset(&held_dir, b.held_out, m, 2).map_err(e)?;
    let data = load_images(&data_dir, m).map_err(e)?;
    let st = PretrainState::<f32>::new(b.spec.clone(), &b.pretrain, 3).map_err(e)?;
    let (out, _) = pretrain_gan(st, &data, &b.pretrain, &root.path().join("gan"), serde_json::json!({})).map_err(e)?;
    let gen: Arc<dyn Generator<f32>> = Arc::new(load_generator::<f32>(&out.checkpoint).map_err(e)?);
    let spec = gen.spec().clone();

    let probe = trgb_noise_probe(gen.as_ref(), 64, 4).map_err(e)?;
    let crops = harvest_crops(gen.as_ref(), 32, CropRule::default_for(m), 5).map_err(e)?;
    let report = score_layers(gen.as_ref(), &crops, &crop_source_codes(&spec, 8, 6), GradNorm::L2).map_err(e)?;
    let bg: Arc<dyn Generator<f32>> = Arc::new(trim(gen.clone(), report.argmax).map_err(e)?);
    let cfg = TrainConfig {
        selected_layers: probe.selection.layers.clone(),
        seed: 7,
        iterations: b.alpha_iterations,
        batch: b.alpha_batch,
        log_every: 0,
        ..TrainConfig::oracle()
    };
    let mut st = TrainState::new(cfg, gen.clone(), Backgrounds::Generator(bg)).map_err(e)?;
    ganseg_core::trainer::run_training(&mut st, &root.path().join("alpha")).map_err(e)?;

    let ds = root.path().join("labeled");
    let scfg = SampleConfig {
        n: b.samples,
        seed: 8,
        ..SampleConfig::default()
    };
    sample_labeled(gen.as_ref(), &st.alpha, &scfg, &AcceptAll, &ds).map_err(e)?;
    let dcfg = DownstreamConfig { seed: 9, ..b.downstream };
    let down = train_downstream::<f32>(&ds, &dcfg, &root.path().join("seg")).map_err(e)?;
    let seg = Segmenter::<f32>::load(&down.checkpoint).map_err(e)?;

    let records = read_manifest(&held_dir).map_err(e)?;
    let images = load_images(&held_dir, m).map_err(e)?;
    let gts: Vec<Array2<u8>> = records.iter().map(|r| render(&r.params, m).1.mapv(|v| u8::from(v >= 0.5))).collect();
    let refs: Vec<&Array3<f64>> = images.iter().collect();
    let preds: Vec<Array2<u8>> = seg.predict(&refs).map_err(e)?.iter().map(|p| p.mapv(|v| u8::from(v >= 0.5))).collect();
    let rep = compute_metrics_batch(&preds, &gts, Aggregation::Micro).map_err(e)?;
    let detail = format!(
        "trimmed layer {}, alpha layers {:?}, downstream mIOU {:.4} on {} held-out shapes",
        report.argmax,
        probe.selection.layers,
        rep.miou,
        gts.len()
    );
    ensure(rep.miou >= 0.70, format!("{detail} (< 0.70)"))?;
    Ok(detail)
}
