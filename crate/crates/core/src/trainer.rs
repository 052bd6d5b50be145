//! Adversarial training of the alpha network against a weak critic, with the
//! generator and its trimmed background copy frozen.

use crate::alpha::{AlphaNet, AlphaNetSpec};
use crate::autograd::{lit, resize_bilinear, Adam, ParamStore, Scalar, Tape, Tensor, Var};
use crate::critic::{r1_surrogate, Critic, CriticRole, CriticSpec};
use crate::error::{invalid, Error, Result};
use crate::io::{ensure_dir, push_adam, read_adam, read_rgb_png, write_json, Container};
use crate::rng::{stream_seed, substream};
use crate::stylegen::{map_latents, synthesize, truncate_for, Generator, GeneratorSpec, Latent, LatentCode};
use ndarray::{s, Array3, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgSource {
    #[default]
    TrimmedGenerator,
    ExternalImages,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaFeatures {
    #[default]
    SelectedLayers,
    LastLayerOnly,
}

/// Training recipe. Serialized as a flat TOML table with these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Truncation of the foreground latent.
    pub psi: f64,
    /// Weight of the binary regularizer B.
    pub lambda1: f64,
    /// Weight of the area regularizers C and E.
    pub lambda2: f64,
    /// Foreground area floor of C.
    pub phi1: f64,
    /// Background area floor of E.
    pub phi2: f64,
    pub adv_weight: f64,
    /// Steps during which the C and E weights are held at 0.
    pub reg_delay: usize,
    /// Steps after the delay over which those weights ramp up linearly.
    pub reg_warmup: usize,
    /// Same schedule for the B weight.
    pub binary_delay: usize,
    pub binary_warmup: usize,
    pub lr: f64,
    /// Critic learning rate; defaults to `lr`.
    pub critic_lr: Option<f64>,
    pub iterations: usize,
    pub batch: usize,
    pub bg_source: BgSource,
    /// Image folder used when `bg_source = "external_images"`.
    pub bg_dir: Option<PathBuf>,
    pub alpha_features: AlphaFeatures,
    /// Generator layers read by the alpha network; empty means all layers.
    pub selected_layers: Vec<usize>,
    /// Generator samples used to standardize the alpha network's inputs; 0 skips it.
    pub calibration_samples: usize,
    /// R1 weight on the critic; 0 turns it off.
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub seed: u64,
    pub critic_base_width: usize,
    pub critic_max_width: usize,
    pub degenerate_low: f64,
    pub degenerate_high: f64,
    pub degenerate_steps: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            psi: 1.0,
            lambda1: 1.2,
            lambda2: 0.0,
            phi1: 0.25,
            phi2: 0.25,
            adv_weight: 0.1,
            reg_delay: 0,
            reg_warmup: 0,
            binary_delay: 0,
            binary_warmup: 0,
            lr: 2e-4,
            critic_lr: None,
            iterations: 1000,
            batch: 8,
            bg_source: BgSource::TrimmedGenerator,
            bg_dir: None,
            alpha_features: AlphaFeatures::SelectedLayers,
            selected_layers: Vec::new(),
            calibration_samples: 32,
            r1_gamma: 1.0,
            r1_interval: 4,
            seed: 0,
            critic_base_width: 8,
            critic_max_width: 32,
            degenerate_low: 0.02,
            degenerate_high: 0.98,
            degenerate_steps: 50,
            log_every: 50,
        }
    }
}

fn ramp(step: usize, delay: usize, warmup: usize) -> f64 {
    if step < delay {
        0.0
    } else if step >= delay + warmup {
        1.0
    } else {
        (step - delay) as f64 / warmup as f64
    }
}

impl TrainConfig {
    /// Face-style recipe: B only, 1k iterations.
    pub fn ffhq() -> Self {
        Self::default()
    }

    /// Car-style recipe: strong B and C/E, heavy truncation, larger steps.
    pub fn lsun_car() -> Self {
        Self {
            psi: 0.3,
            lambda1: 20.0,
            lambda2: 20.0,
            iterations: 250,
            lr: 2e-3,
            ..Self::default()
        }
    }

    /// Recipe for the hand-built oracle generator: the face-style weights
    /// plus area floors, with B switched on once the mask has separated.
    pub fn oracle() -> Self {
        Self {
            lambda2: 1.0,
            phi1: 0.05,
            phi2: 0.5,
            critic_lr: Some(2e-3),
            binary_delay: 1000,
            binary_warmup: 200,
            iterations: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("psi", self.psi), ("phi1", self.phi1), ("phi2", self.phi2)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("adv_weight", self.adv_weight),
            ("r1_gamma", self.r1_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.batch == 0 {
            return invalid("batch must be at least 1");
        }
        if !(self.lr > 0.0) || self.critic_lr.is_some_and(|v| !(v > 0.0)) {
            return invalid("learning rates must be positive");
        }
        if self.bg_source == BgSource::ExternalImages && self.bg_dir.is_none() {
            return invalid("external background source needs bg_dir");
        }
        Ok(())
    }

    /// Multiplier on λ₂ at `step`.
    pub fn area_ramp(&self, step: usize) -> f64 {
        ramp(step, self.reg_delay, self.reg_warmup)
    }

    /// Multiplier on λ₁ at `step`.
    pub fn binary_ramp(&self, step: usize) -> f64 {
        ramp(step, self.binary_delay, self.binary_warmup)
    }

    pub fn critic_lr(&self) -> f64 {
        self.critic_lr.unwrap_or(self.lr)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Alpha network layout implied by the feature choice.
    pub fn alpha_spec(&self, gen: &GeneratorSpec) -> AlphaNetSpec {
        match self.alpha_features {
            AlphaFeatures::LastLayerOnly => AlphaNetSpec::last_layer_only(gen),
            AlphaFeatures::SelectedLayers => {
                let layers = if self.selected_layers.is_empty() {
                    (0..gen.n_layers()).collect()
                } else {
                    self.selected_layers.clone()
                };
                AlphaNetSpec::new(layers, gen.resolution)
            }
        }
    }
}

/// `M * fg + (1 - M) * bg` with the mask broadcast over channels.
pub fn composite<T: Scalar>(tape: &Tape<T>, fg: Var, bg: Var, mask: Var) -> Result<Var> {
    let (f, b, m) = (tape.shape(fg), tape.shape(bg), tape.shape(mask));
    if f != b || m.len() != 4 || m[0] != f[0] || m[1] != 1 || m[2..] != f[2..] {
        return Err(Error::Shape(format!("composite of fg {f:?}, bg {b:?} and mask {m:?}")));
    }
    // Written as a sum of two products so M = 0 and M = 1 reproduce bg and fg exactly.
    let keep = tape.rsub_scalar(T::one(), mask);
    Ok(tape.add(tape.mul(mask, fg), tape.mul(keep, bg)))
}

/// Array form of [`composite`]: `fg, bg` are `[3, m, m]`, `mask` is `[m, m]`.
pub fn composite_image(fg: &Array3<f64>, bg: &Array3<f64>, mask: &ndarray::Array2<f64>) -> Result<Array3<f64>> {
    if fg.dim() != bg.dim() || mask.dim() != (fg.dim().1, fg.dim().2) {
        return Err(Error::Shape(format!(
            "composite of fg {:?}, bg {:?} and mask {:?}",
            fg.dim(),
            bg.dim(),
            mask.dim()
        )));
    }
    Ok(Array3::from_shape_fn(fg.dim(), |(c, y, x)| {
        let m = mask[[y, x]];
        m * fg[[c, y, x]] + (1.0 - m) * bg[[c, y, x]]
    }))
}

/// Mean over pixels (and batch) of `min(M, 1 - M)`.
pub fn binary_reg<T: Scalar>(tape: &Tape<T>, mask: Var) -> Var {
    // min(a, 1 - a) = (1 - |2a - 1|) / 2
    let d = tape.abs(tape.add_scalar(tape.mul_scalar(mask, lit(2.0)), lit(-1.0)));
    tape.mean(tape.mul_scalar(tape.rsub_scalar(T::one(), d), lit(0.5)))
}

/// `(C, E)`: per-image `relu(phi1 - mean M)` and `relu(phi2 - mean(1 - M))`,
/// averaged over the batch.
pub fn area_regs<T: Scalar>(tape: &Tape<T>, mask: Var, phi1: f64, phi2: f64) -> (Var, Var) {
    let area = tape.mean_axes(mask, &[1, 2, 3]);
    let c = tape.relu(tape.rsub_scalar(lit(phi1), area));
    let e = tape.relu(tape.rsub_scalar(lit(phi2), tape.rsub_scalar(T::one(), area)));
    (tape.mean(c), tape.mean(e))
}

/// One training batch: foreground renders with their features, backgrounds
/// and unmodified samples for the critic.
#[derive(Clone, Debug)]
pub struct CompositeBatch<T> {
    pub fg: Tensor<T>,
    pub features: Vec<Tensor<T>>,
    pub bg: Tensor<T>,
    pub real: Tensor<T>,
    pub fg_codes: Vec<LatentCode>,
    pub bg_codes: Vec<LatentCode>,
}

/// Seeds of the three independent sample streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSeeds {
    pub fg: u64,
    pub bg: u64,
    pub real: u64,
}

impl StreamSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            fg: stream_seed(seed, "train_fg", 0),
            bg: stream_seed(seed, "train_bg", 0),
            real: stream_seed(seed, "train_real", 0),
        }
    }
}

/// Codes `step * n .. step * n + n` of a stream.
pub fn stream_codes(spec: &GeneratorSpec, stream: u64, step: usize, n: usize) -> Vec<LatentCode> {
    (0..n)
        .map(|i| LatentCode::sample(spec, stream_seed(stream, "code", (step * n + i) as u64)))
        .collect()
}

/// Replaces `z` latents by truncated `w` latents (`psi = 1` leaves codes as is).
pub fn truncate_codes<T: Scalar>(gen: &dyn Generator<T>, codes: Vec<LatentCode>, psi: f64) -> Result<Vec<LatentCode>> {
    if psi == 1.0 {
        return Ok(codes);
    }
    let zs: Vec<Vec<f64>> = codes
        .iter()
        .map(|c| match &c.latent {
            Latent::Z(z) => Ok(z.clone()),
            _ => invalid("truncation expects z latents"),
        })
        .collect::<Result<_>>()?;
    let ws = map_latents(gen, &zs)?;
    codes
        .into_iter()
        .zip(ws)
        .map(|(mut c, w)| {
            c.latent = Latent::W(truncate_for(gen.spec(), &w, psi)?);
            Ok(c)
        })
        .collect()
}

/// Where composite backgrounds come from.
#[derive(Clone)]
pub enum Backgrounds<T: Scalar> {
    Generator(Arc<dyn Generator<T>>),
    Images(Arc<Vec<Array3<f64>>>),
}

impl<T: Scalar> Backgrounds<T> {
    fn weights(&self) -> Option<&ParamStore<T>> {
        match self {
            Backgrounds::Generator(g) => g.weights(),
            Backgrounds::Images(_) => None,
        }
    }
}

/// Loads every PNG in `dir` (sorted by name), resized to `m x m`.
pub fn load_background_images(dir: &Path, m: usize) -> Result<Vec<Array3<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return invalid(format!("no PNG images in {}", dir.display()));
    }
    paths
        .iter()
        .map(|p| {
            let img: Array3<f64> = read_rgb_png(p)?;
            if img.dim() == (3, m, m) {
                Ok(img)
            } else {
                Ok(resize_bilinear(&img.into_dyn(), m, m).into_dimensionality().unwrap())
            }
        })
        .collect()
}

fn stack<T: Scalar>(images: &[Array3<f64>]) -> Tensor<T> {
    let (c, h, w) = images[0].dim();
    let mut out = Tensor::<T>::zeros(IxDyn(&[images.len(), c, h, w]));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(&img.mapv(lit::<T>));
    }
    out
}

/// Draws batch `step` of all three streams.
pub fn draw_batch<T: Scalar>(
    gen: &dyn Generator<T>,
    bg: &Backgrounds<T>,
    alpha: &AlphaNetSpec,
    seeds: StreamSeeds,
    step: usize,
    n: usize,
    psi: f64,
) -> Result<CompositeBatch<T>> {
    let spec = gen.spec();
    let fg_codes = truncate_codes(gen, stream_codes(spec, seeds.fg, step, n), psi)?;
    let fs = synthesize(gen, &fg_codes, true)?;
    let features = alpha
        .selected_layers
        .iter()
        .map(|&k| fs.layers[k].1.clone())
        .collect();
    let (bg_img, bg_codes) = match bg {
        Backgrounds::Generator(g) => {
            let codes = stream_codes(spec, seeds.bg, step, n);
            (synthesize(g.as_ref(), &codes, false)?.image, codes)
        }
        Backgrounds::Images(images) => {
            let mut rng = substream(seeds.bg, "pick", step as u64);
            let picks: Vec<Array3<f64>> = (0..n).map(|_| images[rng.random_range(0..images.len())].clone()).collect();
            (stack(&picks), Vec::new())
        }
    };
    let real = synthesize(gen, &stream_codes(spec, seeds.real, step, n), false)?.image;
    Ok(CompositeBatch {
        fg: fs.image,
        features,
        bg: bg_img,
        real,
        fg_codes,
        bg_codes,
    })
}

/// Per-step losses and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub adv_a: f64,
    pub adv_d: f64,
    pub binary: f64,
    pub area_c: f64,
    pub area_e: f64,
    pub r1: Option<f64>,
    pub mask_mean: f64,
    pub real_logit: f64,
    pub fake_logit: f64,
    pub degenerate: bool,
    pub wall_ms: f64,
}

const TRAIN_STATE: &str = "alpha_train_state";

/// Mutable training state; the generators are held only behind shared,
/// read-only handles.
pub struct TrainState<T: Scalar> {
    pub cfg: TrainConfig,
    pub generator: Arc<dyn Generator<T>>,
    pub backgrounds: Backgrounds<T>,
    pub alpha: AlphaNet<T>,
    pub critic: Critic<T>,
    pub adam_a: Adam<T>,
    pub adam_d: Adam<T>,
    pub seeds: StreamSeeds,
    pub step: usize,
    degenerate_run: usize,
    frozen_g: Option<ParamStore<T>>,
    frozen_bg: Option<ParamStore<T>>,
}

/// Rejects critics that did not start from scratch for this task.
pub fn check_fresh_critic<T: Scalar>(critic: &Critic<T>, forbidden_fingerprints: &[String]) -> Result<()> {
    if critic.role != CriticRole::Alpha {
        return Err(Error::Fingerprint(
            "critic was trained for generator pretraining; the alpha trainer starts its critic from scratch".into(),
        ));
    }
    let fp = critic.fingerprint();
    if forbidden_fingerprints.contains(&fp) {
        return Err(Error::Fingerprint(format!(
            "critic {fp} matches the generator's pretraining discriminator"
        )));
    }
    Ok(())
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: TrainConfig, generator: Arc<dyn Generator<T>>, backgrounds: Backgrounds<T>) -> Result<Self> {
        cfg.validate()?;
        let spec = generator.spec().clone();
        if let Backgrounds::Images(imgs) = &backgrounds {
            if imgs.is_empty() || imgs.iter().any(|i| i.dim() != (3, spec.resolution, spec.resolution)) {
                return Err(Error::Shape(format!(
                    "background images must be 3x{0}x{0}",
                    spec.resolution
                )));
            }
        }
        if let Backgrounds::Generator(g) = &backgrounds {
            if g.spec().resolution != spec.resolution {
                return Err(Error::Shape("background generator resolution differs".into()));
            }
        }
        if cfg.psi < 1.0 && spec.w_mean.is_none() {
            return invalid("truncation needs a generator with a fitted w_mean");
        }
        let mut alpha = AlphaNet::build(
            &spec,
            &generator.fingerprint(),
            cfg.alpha_spec(&spec),
            stream_seed(cfg.seed, "alpha", 0),
        )?;
        if cfg.calibration_samples > 0 {
            let codes = stream_codes(&spec, stream_seed(cfg.seed, "calibrate", 0), 0, cfg.calibration_samples);
            let codes = truncate_codes(generator.as_ref(), codes, cfg.psi)?;
            alpha.calibrate(&spec, &synthesize(generator.as_ref(), &codes, true)?)?;
        }
        let critic = Critic::new(
            CriticSpec::new(spec.resolution, cfg.critic_base_width, cfg.critic_max_width),
            CriticRole::Alpha,
            stream_seed(cfg.seed, "weak_critic", 0),
        )?;
        let adam_a = Adam::new(&alpha.store, cfg.lr, 0.0, 0.99);
        let adam_d = Adam::new(&critic.store, cfg.critic_lr(), 0.0, 0.99);
        Ok(Self {
            seeds: StreamSeeds::from_seed(cfg.seed),
            frozen_g: generator.weights().cloned(),
            frozen_bg: backgrounds.weights().cloned(),
            cfg,
            generator,
            backgrounds,
            alpha,
            critic,
            adam_a,
            adam_d,
            step: 0,
            degenerate_run: 0,
        })
    }

    /// Swaps in a critic, refusing pretraining critics.
    pub fn set_critic(&mut self, critic: Critic<T>, forbidden_fingerprints: &[String]) -> Result<()> {
        check_fresh_critic(&critic, forbidden_fingerprints)?;
        if critic.spec.resolution != self.generator.spec().resolution {
            return Err(Error::Shape("critic resolution differs from the generator".into()));
        }
        self.adam_d = Adam::new(&critic.store, self.cfg.critic_lr(), 0.0, 0.99);
        self.critic = critic;
        Ok(())
    }

    /// Errors if any frozen weight changed since construction.
    pub fn assert_frozen(&self) -> Result<()> {
        let check = |now: Option<&ParamStore<T>>, then: &Option<ParamStore<T>>, what: &str| match (now, then) {
            (Some(a), Some(b)) if !a.same_values(b) => Err(Error::Invalid(format!("{what} weights drifted"))),
            _ => Ok(()),
        };
        check(self.generator.weights(), &self.frozen_g, "generator")?;
        check(self.backgrounds.weights(), &self.frozen_bg, "background generator")
    }

    fn only_trains(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Result<()> {
        let trained = tape.trainable_stores();
        if trained.len() != 1 || !trained.contains(&store.id()) {
            return Err(Error::Invalid("a frozen network was bound as trainable".into()));
        }
        Ok(())
    }

    /// One critic update followed by one alpha update on the same batch.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let start = Instant::now();
        let cfg = self.cfg.clone();
        let step = self.step;
        let batch = draw_batch(
            self.generator.as_ref(),
            &self.backgrounds,
            &self.alpha.spec,
            self.seeds,
            step,
            cfg.batch,
            cfg.psi,
        )?;

        // Critic on real samples vs. composites from the current mask.
        let tape = Tape::new();
        let feats: Vec<Var> = batch.features.iter().map(|f| tape.constant(f.clone())).collect();
        let mask = self.alpha.forward(&tape, &feats, false);
        let fake = composite(&tape, tape.constant(batch.fg.clone()), tape.constant(batch.bg.clone()), mask)?;
        let fake = tape.constant((*tape.value(fake)).clone());
        let lr = self.critic.forward(&tape, tape.constant(batch.real.clone()), true);
        let lf = self.critic.forward(&tape, fake, true);
        let d_loss = tape.add(tape.mean(tape.softplus(lf)), tape.mean(tape.softplus(tape.neg(lr))));
        let mut total = d_loss;
        let mut r1 = None;
        if cfg.r1_gamma > 0.0 && cfg.r1_interval > 0 && step % cfg.r1_interval == 0 {
            let (sur, pen) = r1_surrogate(&self.critic, &tape, &batch.real, cfg.r1_gamma * cfg.r1_interval as f64);
            total = tape.add(total, sur);
            r1 = Some(pen / cfg.r1_interval as f64);
        }
        self.only_trains(&tape, &self.critic.store)?;
        let adv_d = tape.scalar(d_loss).to_f64().unwrap();
        let real_logit = mean_of(&tape.value(lr));
        let fake_logit = mean_of(&tape.value(lf));
        let grads = tape.backward(total).for_store(&self.critic.store);
        if !adv_d.is_finite() {
            return Err(Error::NonFinite(format!("critic loss at step {step}")));
        }
        self.adam_d.step(&mut self.critic.store, &grads);

        // Alpha network.
        let tape = Tape::new();
        let feats: Vec<Var> = batch.features.iter().map(|f| tape.constant(f.clone())).collect();
        let mask = self.alpha.forward(&tape, &feats, true);
        let img = composite(&tape, tape.constant(batch.fg), tape.constant(batch.bg), mask)?;
        let logits = self.critic.forward(&tape, img, false);
        let adv = tape.mean(tape.softplus(tape.neg(logits)));
        let b = binary_reg(&tape, mask);
        let (c, e) = area_regs(&tape, mask, cfg.phi1, cfg.phi2);
        let mut loss = tape.mul_scalar(adv, lit(cfg.adv_weight));
        loss = tape.add(loss, tape.mul_scalar(b, lit(cfg.binary_ramp(step) * cfg.lambda1)));
        loss = tape.add(loss, tape.mul_scalar(tape.add(c, e), lit(cfg.area_ramp(step) * cfg.lambda2)));
        self.only_trains(&tape, &self.alpha.store)?;
        let value = |v: Var| tape.scalar(v).to_f64().unwrap();
        let (adv_a, binary, area_c, area_e) = (value(adv), value(b), value(c), value(e));
        let mask_mean = mean_of(&tape.value(mask));
        if ![adv_a, binary, area_c, area_e, value(loss)].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("alpha loss at step {step}")));
        }
        let grads = tape.backward(loss).for_store(&self.alpha.store);
        self.adam_a.step(&mut self.alpha.store, &grads);

        let degenerate = mask_mean < cfg.degenerate_low || mask_mean > cfg.degenerate_high;
        self.degenerate_run = if degenerate { self.degenerate_run + 1 } else { 0 };
        self.step += 1;
        Ok(TrainRecord {
            step,
            adv_a,
            adv_d,
            binary,
            area_c,
            area_e,
            r1,
            mask_mean,
            real_logit,
            fake_logit,
            degenerate,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// True once the mask has been saturated for `degenerate_steps` steps.
    pub fn is_degenerate(&self) -> bool {
        self.cfg.degenerate_steps > 0 && self.degenerate_run >= self.cfg.degenerate_steps
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "alpha": self.alpha.to_container().meta,
            "critic": self.critic.to_container().meta,
            "step": self.step,
            "degenerate_run": self.degenerate_run,
            "seeds": self.seeds,
        });
        let mut c = Container::new(TRAIN_STATE, meta);
        for (n, t) in self.alpha.store.iter() {
            c.push(format!("a.{n}"), t);
        }
        for (n, t) in self.critic.store.iter() {
            c.push(format!("d.{n}"), t);
        }
        push_adam(&mut c, "adam_a", &self.adam_a.state());
        push_adam(&mut c, "adam_d", &self.adam_d.state());
        c.save(path)
    }

    /// Restores a saved state over the same generator and backgrounds.
    pub fn load(path: &Path, generator: Arc<dyn Generator<T>>, backgrounds: Backgrounds<T>) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != TRAIN_STATE {
            return Err(Error::format(path, format!("expected alpha training state, found '{}'", c.kind)));
        }
        let cfg: TrainConfig = serde_json::from_value(c.meta["config"].clone())?;
        let stored_fp = c.meta["alpha"]["generator_fingerprint"].as_str().unwrap_or_default();
        if stored_fp != generator.fingerprint() {
            return Err(Error::Fingerprint(format!("{} belongs to another generator", path.display())));
        }
        let mut st = Self::new(cfg, generator, backgrounds)?;
        let fill = |prefix: &str, store: &mut ParamStore<T>| -> Result<()> {
            for i in 0..store.len() {
                let name = format!("{prefix}.{}", store.name(i));
                let t = c.tensor(&name).ok_or_else(|| Error::format(path, format!("missing {name}")))?;
                if t.shape() != store.get(i).shape() {
                    return Err(Error::format(path, format!("shape mismatch for {name}")));
                }
                *store.get_mut(i) = t.mapv(lit::<T>);
            }
            Ok(())
        };
        fill("a", &mut st.alpha.store)?;
        fill("d", &mut st.critic.store)?;
        let (na, nd) = (st.alpha.store.len(), st.critic.store.len());
        st.adam_a
            .load_state(&read_adam(&c, "adam_a", na, path)?)
            .map_err(|e| Error::format(path, e))?;
        st.adam_d
            .load_state(&read_adam(&c, "adam_d", nd, path)?)
            .map_err(|e| Error::format(path, e))?;
        st.step = c.meta["step"].as_u64().unwrap_or(0) as usize;
        st.degenerate_run = c.meta["degenerate_run"].as_u64().unwrap_or(0) as usize;
        Ok(st)
    }
}

fn mean_of<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / t.len() as f64
}

/// Files written by [`run_training`].
#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub alpha_checkpoint: PathBuf,
    pub alpha_sha256: String,
    pub state: PathBuf,
    pub history: PathBuf,
    pub steps: usize,
    /// Set when training stopped on a saturated mask.
    pub degenerate: bool,
}

/// Runs until `cfg.iterations`, appending one history line per step.
/// Non-finite losses dump the state before the error is returned.
pub fn run_training<T: Scalar>(st: &mut TrainState<T>, out_dir: &Path) -> Result<TrainOutcome> {
    ensure_dir(out_dir)?;
    let history = out_dir.join("train_history.jsonl");
    let state_path = out_dir.join("train_state.ckpt");
    let alpha_path = out_dir.join("alpha.ckpt");
    write_json(&out_dir.join("train_config.json"), &st.cfg)?;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(st.step > 0)
        .write(true)
        .truncate(st.step == 0)
        .open(&history)
        .map_err(|e| Error::io(&history, e))?;
    let mut degenerate = false;
    while st.step < st.cfg.iterations {
        let rec = match st.step() {
            Ok(r) => r,
            Err(e) => {
                st.save(&state_path)?;
                return Err(e);
            }
        };
        let line = serde_json::to_string(&rec)?;
        writeln!(file, "{line}").map_err(|e| Error::io(&history, e))?;
        if st.cfg.log_every > 0 && rec.step % st.cfg.log_every == 0 {
            log::info!(
                "alpha step {} adv_a={:.4} adv_d={:.4} B={:.4} C={:.4} E={:.4} mask={:.3}",
                rec.step,
                rec.adv_a,
                rec.adv_d,
                rec.binary,
                rec.area_c,
                rec.area_e,
                rec.mask_mean
            );
        }
        if st.is_degenerate() {
            log::warn!(
                "mask mean outside [{}, {}] for {} steps; halting",
                st.cfg.degenerate_low,
                st.cfg.degenerate_high,
                st.cfg.degenerate_steps
            );
            degenerate = true;
            break;
        }
    }
    file.flush().map_err(|e| Error::io(&history, e))?;
    st.assert_frozen()?;
    st.save(&state_path)?;
    let alpha_sha256 = st.alpha.save(&alpha_path)?;
    Ok(TrainOutcome {
        alpha_checkpoint: alpha_path,
        alpha_sha256,
        state: state_path,
        history,
        steps: st.step,
        degenerate,
    })
}

/// Predicted soft masks `[N, m, m]` for a batch of codes.
pub fn predict_masks<T: Scalar>(
    gen: &dyn Generator<T>,
    alpha: &AlphaNet<T>,
    codes: &[LatentCode],
) -> Result<Vec<ndarray::Array2<f64>>> {
    let fs = synthesize(gen, codes, true)?;
    let m = alpha.mask_tensor(gen.spec(), &fs)?;
    Ok(m.axis_iter(Axis(0))
        .map(|s| s.slice(s![0, .., ..]).mapv(|v| v.to_f64().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests;
