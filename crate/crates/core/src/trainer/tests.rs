use super::*;
use crate::background::trim;
use crate::rng::uniform_tensor;
use crate::stylegen::{GeneratorSpec, OracleGenerator, OracleSpec, StyleGenerator, FOREGROUND_LAYER};
use ndarray::Array2;
use proptest::prelude::*;

fn oracle(res: usize) -> Arc<dyn Generator<f64>> {
    let spec = OracleSpec {
        resolution: res,
        edge_px: 1.0,
    };
    Arc::new(OracleGenerator::new(spec).unwrap())
}

fn trimmed(gen: &Arc<dyn Generator<f64>>) -> Backgrounds<f64> {
    Backgrounds::Generator(Arc::new(trim(gen.clone(), FOREGROUND_LAYER).unwrap()))
}

fn quick(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        batch: 2,
        calibration_samples: 4,
        log_every: 0,
        ..cfg
    }
}

fn state(cfg: TrainConfig) -> TrainState<f64> {
    let g = oracle(16);
    let bg = trimmed(&g);
    TrainState::new(cfg, g, bg).unwrap()
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    uniform_tensor(&mut substream(seed, "trainer_test", 0), shape, lo, hi)
}

#[test]
fn composite_endpoints_are_exact() {
    let fg = random(&[3, 3, 8, 8], 1, -1.0, 1.0);
    let bg = random(&[3, 3, 8, 8], 2, -1.0, 1.0);
    for (level, want) in [(0.0, &bg), (1.0, &fg)] {
        let tape = Tape::new();
        let m = tape.constant(Tensor::from_elem(IxDyn(&[3, 1, 8, 8]), level));
        let out = composite(&tape, tape.constant(fg.clone()), tape.constant(bg.clone()), m).unwrap();
        let got = tape.value(out);
        assert!(got.iter().zip(want.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let fg3 = fg.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap();
    let bg3 = bg.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap();
    assert_eq!(composite_image(&fg3, &bg3, &Array2::zeros((8, 8))).unwrap(), bg3);
    assert_eq!(composite_image(&fg3, &bg3, &Array2::ones((8, 8))).unwrap(), fg3);
}

#[test]
fn composite_single_precision_endpoints() {
    let fg = random(&[1, 3, 4, 4], 3, -1.0, 1.0).mapv(|v| v as f32);
    let bg = random(&[1, 3, 4, 4], 4, -1.0, 1.0).mapv(|v| v as f32);
    let tape = Tape::<f32>::new();
    let one = tape.constant(Tensor::from_elem(IxDyn(&[1, 1, 4, 4]), 1.0f32));
    let out = composite(&tape, tape.constant(fg.clone()), tape.constant(bg), one).unwrap();
    assert_eq!(*tape.value(out), fg);
}

#[test]
fn composite_rejects_bad_shapes() {
    let tape = Tape::<f64>::new();
    let fg = tape.constant(Tensor::zeros(IxDyn(&[2, 3, 4, 4])));
    let bg = tape.constant(Tensor::zeros(IxDyn(&[2, 3, 4, 4])));
    let m = tape.constant(Tensor::zeros(IxDyn(&[2, 1, 4, 5])));
    assert!(matches!(composite(&tape, fg, bg, m), Err(Error::Shape(_))));
    let m3 = tape.constant(Tensor::zeros(IxDyn(&[2, 3, 4, 4])));
    assert!(composite(&tape, fg, bg, m3).is_err());
    let a = Array3::zeros((3, 4, 4));
    assert!(composite_image(&a, &a, &Array2::zeros((4, 3))).is_err());
}

fn regs(mask: &Tensor<f64>, phi1: f64, phi2: f64) -> (f64, f64, f64) {
    let tape = Tape::new();
    let m = tape.constant(mask.clone());
    let b = binary_reg(&tape, m);
    let (c, e) = area_regs(&tape, m, phi1, phi2);
    (tape.scalar(b), tape.scalar(c), tape.scalar(e))
}

#[test]
fn regularizer_examples() {
    let m = Tensor::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![0.2, 0.9]).unwrap();
    assert!((regs(&m, 0.25, 0.25).0 - 0.15).abs() < 1e-15);
    let low = Tensor::from_elem(IxDyn(&[1, 1, 4, 4]), 0.1);
    assert!((regs(&low, 0.25, 0.25).1 - 0.15).abs() < 1e-15);
    let half = Tensor::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5);
    let (_, c, e) = regs(&half, 0.25, 0.25);
    assert_eq!((c, e), (0.0, 0.0));
    let ones = Tensor::from_elem(IxDyn(&[1, 1, 4, 4]), 1.0);
    let (b, c, e) = regs(&ones, 0.25, 0.25);
    assert_eq!((b, c), (0.0, 0.0));
    assert!((e - 0.25).abs() < 1e-15);
}

#[test]
fn regularizers_match_direct_arithmetic() {
    let mut rng = substream(11, "masks", 0);
    for i in 0..1000 {
        let n = rng.random_range(1..4usize);
        let r = rng.random_range(1..7usize);
        let mask = uniform_tensor::<f64>(&mut rng, &[n, 1, r, r], 0.0, 1.0);
        let (phi1, phi2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (b, c, e) = regs(&mask, phi1, phi2);
        let per = (r * r) as f64;
        let mut want_b = 0.0;
        let (mut want_c, mut want_e) = (0.0, 0.0);
        for k in 0..n {
            let vals: Vec<f64> = mask.index_axis(Axis(0), k).iter().copied().collect();
            want_b += vals.iter().map(|&v| v.min(1.0 - v)).sum::<f64>();
            let area = vals.iter().sum::<f64>() / per;
            want_c += (phi1 - area).max(0.0);
            want_e += (phi2 - vals.iter().map(|v| 1.0 - v).sum::<f64>() / per).max(0.0);
        }
        want_b /= n as f64 * per;
        want_c /= n as f64;
        want_e /= n as f64;
        for (got, want, name) in [(b, want_b, "B"), (c, want_c, "C"), (e, want_e, "E")] {
            assert!((got - want).abs() <= 1e-12, "mask {i}: {name} {got} vs {want}");
        }
    }
}

proptest! {
    #[test]
    fn regularizers_are_bounded(vals in proptest::collection::vec(0.0f64..=1.0, 1..40), phi1 in 0.0f64..=1.0, phi2 in 0.0f64..=1.0) {
        let n = vals.len();
        let m = Tensor::from_shape_vec(IxDyn(&[1, 1, 1, n]), vals).unwrap();
        let (b, c, e) = regs(&m, phi1, phi2);
        prop_assert!((0.0..=0.5).contains(&b));
        prop_assert!((0.0..=phi1).contains(&c));
        prop_assert!((0.0..=phi2).contains(&e));
    }
}

#[test]
fn recipe_echoes() {
    let f = TrainConfig::ffhq();
    assert_eq!((f.lambda1, f.iterations, f.adv_weight, f.lr, f.batch), (1.2, 1000, 0.1, 2e-4, 8));
    let c = TrainConfig::lsun_car();
    assert_eq!((c.lambda1, c.lambda2, c.psi, c.iterations, c.lr), (20.0, 20.0, 0.3, 250, 2e-3));
    let o = TrainConfig::oracle();
    assert_eq!((o.lambda1, o.adv_weight, o.lr, o.batch), (1.2, 0.1, 2e-4, 8));
    assert!(o.iterations <= 2000);
    for cfg in [f, c, o] {
        cfg.validate().unwrap();
    }
}

#[test]
fn toml_round_trip_and_validation() {
    let cfg = TrainConfig {
        bg_source: BgSource::ExternalImages,
        bg_dir: Some(PathBuf::from("bgs")),
        alpha_features: AlphaFeatures::LastLayerOnly,
        selected_layers: vec![2, 3],
        critic_lr: Some(1e-3),
        ..TrainConfig::lsun_car()
    };
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let partial = TrainConfig::from_toml("lambda1 = 3.0\nbatch = 4\n").unwrap();
    assert_eq!((partial.lambda1, partial.batch, partial.lr), (3.0, 4, 2e-4));
    for bad in ["psi = 1.5", "phi1 = -0.1", "lambda2 = -1.0", "batch = 0", "lr = 0.0", "bg_source = \"external_images\"", "unknown = 1"] {
        assert!(TrainConfig::from_toml(bad).is_err(), "{bad} accepted");
    }
}

#[test]
fn ramps() {
    let cfg = TrainConfig {
        reg_delay: 10,
        reg_warmup: 4,
        binary_delay: 0,
        binary_warmup: 0,
        ..TrainConfig::default()
    };
    let area: Vec<f64> = [0, 9, 10, 12, 14, 100].iter().map(|&s| cfg.area_ramp(s)).collect();
    assert_eq!(area, vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0]);
    assert_eq!(cfg.binary_ramp(0), 1.0);
}

#[test]
fn streams_are_disjoint_and_backgrounds_do_not_touch_foregrounds() {
    let g = oracle(16);
    let spec = AlphaNetSpec::new(vec![1, 2], 16);
    let seeds = StreamSeeds::from_seed(3);
    assert!(seeds.fg != seeds.bg && seeds.bg != seeds.real && seeds.fg != seeds.real);
    let a = draw_batch(g.as_ref(), &trimmed(&g), &spec, seeds, 4, 3, 1.0).unwrap();
    let imgs = Backgrounds::Images(Arc::new(vec![Array3::zeros((3, 16, 16))]));
    let b = draw_batch(g.as_ref(), &imgs, &spec, seeds, 4, 3, 1.0).unwrap();
    assert_eq!(a.fg, b.fg);
    assert_eq!(a.real, b.real);
    let fg_seeds: Vec<u64> = a.fg_codes.iter().map(|c| c.seed).collect();
    assert!(a.bg_codes.iter().all(|c| !fg_seeds.contains(&c.seed)));
    assert_ne!(a.fg, a.real);
    let next = draw_batch(g.as_ref(), &trimmed(&g), &spec, seeds, 5, 3, 1.0).unwrap();
    assert_ne!(a.fg, next.fg);
}

#[test]
fn one_step_updates_alpha_and_critic_only() {
    let mut st = state(quick(TrainConfig::default()));
    let (a0, d0) = (st.alpha.store.clone(), st.critic.store.clone());
    let rec = st.step().unwrap();
    assert_eq!(rec.step, 0);
    assert!(!st.alpha.store.same_values(&a0));
    assert!(!st.critic.store.same_values(&d0));
    assert!(rec.adv_a.is_finite() && rec.adv_d.is_finite());
    assert!(rec.r1.is_some());
    st.assert_frozen().unwrap();
}

#[test]
fn frozen_generators_do_not_drift() {
    let spec = GeneratorSpec::small(16, 8);
    let g: Arc<dyn Generator<f64>> = Arc::new(StyleGenerator::new(spec, 5).unwrap());
    let before = g.weights().unwrap().clone();
    let bg = trimmed(&g);
    let mut st = TrainState::new(quick(TrainConfig::default()), g.clone(), bg).unwrap();
    for _ in 0..100 {
        st.step().unwrap();
    }
    st.assert_frozen().unwrap();
    let after = g.weights().unwrap();
    for i in 0..before.len() {
        let same = before.get(i).iter().zip(after.get(i).iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} drifted", before.name(i));
    }
}

#[test]
fn pretraining_critic_is_refused() {
    let mut st = state(quick(TrainConfig::default()));
    let pre = Critic::<f64>::new(CriticSpec::new(16, 8, 32), CriticRole::Pretrain, 1).unwrap();
    assert!(matches!(st.set_critic(pre, &[]), Err(Error::Fingerprint(_))));
    let fresh = Critic::<f64>::new(CriticSpec::new(16, 8, 32), CriticRole::Alpha, 2).unwrap();
    let fp = fresh.fingerprint();
    assert!(matches!(st.set_critic(fresh.clone(), &[fp]), Err(Error::Fingerprint(_))));
    st.set_critic(fresh, &[]).unwrap();
}

fn strip_time(mut r: TrainRecord) -> TrainRecord {
    r.wall_ms = 0.0;
    r
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut st = state(quick(TrainConfig { seed: 9, ..TrainConfig::default() }));
        let recs: Vec<TrainRecord> = (0..4).map(|_| strip_time(st.step().unwrap())).collect();
        (recs, st.alpha.store.clone())
    };
    let (r1, a1) = run();
    let (r2, a2) = run();
    assert_eq!(r1, r2);
    assert!(a1.same_values(&a2));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(TrainConfig::default());
    let mut a = state(cfg.clone());
    for _ in 0..3 {
        a.step().unwrap();
    }
    let path = dir.path().join("s.ckpt");
    a.save(&path).unwrap();
    let g = a.generator.clone();
    let mut b = TrainState::load(&path, g.clone(), trimmed(&g)).unwrap();
    assert_eq!(b.step, 3);
    let ra = strip_time(a.step().unwrap());
    let rb = strip_time(b.step().unwrap());
    assert_eq!(ra, rb);
    assert!(a.alpha.store.same_values(&b.alpha.store));
    let other = oracle(32);
    assert!(TrainState::load(&path, other.clone(), trimmed(&other)).is_err());
}

#[test]
fn binary_weight_drives_mask_to_extremes() {
    let cfg = quick(TrainConfig {
        lambda1: 1e3,
        lambda2: 0.0,
        r1_gamma: 0.0,
        lr: 2e-3,
        degenerate_steps: 0,
        ..TrainConfig::default()
    });
    let mut st = state(cfg);
    let recs: Vec<TrainRecord> = (0..200).map(|_| st.step().unwrap()).collect();
    let first = recs[0].binary;
    let last = recs[190..].iter().map(|r| r.binary).sum::<f64>() / 10.0;
    assert!(last < 0.1 * first, "B went from {first} to {last}");
    let early = recs[..50].iter().map(|r| r.binary).sum::<f64>();
    let late = recs[150..].iter().map(|r| r.binary).sum::<f64>();
    assert!(late < early);
}

#[test]
fn area_floor_alone_raises_mask() {
    let cfg = quick(TrainConfig {
        adv_weight: 0.0,
        lambda1: 0.0,
        lambda2: 1.0,
        phi1: 0.6,
        phi2: 0.0,
        lr: 2e-3,
        degenerate_steps: 0,
        ..TrainConfig::default()
    });
    let mut st = state(cfg);
    let start = st.step().unwrap().mask_mean;
    assert!((start - 0.5).abs() < 1e-9);
    let reached = (1..200).any(|_| st.step().unwrap().mask_mean >= 0.6);
    assert!(reached);
}

#[test]
fn degenerate_masks_halt_training() {
    let cfg = quick(TrainConfig {
        degenerate_low: 0.6,
        degenerate_steps: 3,
        iterations: 50,
        ..TrainConfig::default()
    });
    let mut st = state(cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&mut st, dir.path()).unwrap();
    assert!(out.degenerate);
    assert_eq!(out.steps, 3);
    let hist: Vec<TrainRecord> = crate::io::read_jsonl(&out.history).unwrap();
    assert_eq!(hist.len(), 3);
    assert!(hist.iter().all(|r| r.degenerate));
}

#[test]
fn run_training_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut st = state(quick(TrainConfig {
        iterations: 3,
        ..TrainConfig::default()
    }));
    let out = run_training(&mut st, dir.path()).unwrap();
    assert_eq!(out.steps, 3);
    assert!(!out.degenerate);
    let g = st.generator.clone();
    let alpha = AlphaNet::<f64>::load(&out.alpha_checkpoint, g.spec(), &g.fingerprint()).unwrap();
    assert!(alpha.store.same_values(&st.alpha.store));
    let masks = predict_masks(g.as_ref(), &alpha, &stream_codes(g.spec(), 1, 0, 2)).unwrap();
    assert_eq!(masks.len(), 2);
    assert!(masks.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn external_images_must_match_resolution() {
    let g = oracle(16);
    let bad = Backgrounds::Images(Arc::new(vec![Array3::zeros((3, 8, 8))]));
    assert!(matches!(TrainState::new(TrainConfig::default(), g, bad), Err(Error::Shape(_))));
}

#[test]
fn background_folder_loading_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let img = Array3::from_shape_fn((3, 8, 8), |(c, _, _)| c as f64 * 0.5 - 0.5);
    crate::io::write_rgb_png(&dir.path().join("a.png"), &img).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let imgs = load_background_images(dir.path(), 16).unwrap();
    assert_eq!(imgs.len(), 1);
    assert_eq!(imgs[0].dim(), (3, 16, 16));
    let empty = tempfile::tempdir().unwrap();
    assert!(load_background_images(empty.path(), 16).is_err());
}
