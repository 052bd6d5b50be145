//! Adversarial pretraining of the toy generator on an image folder.

use super::{fit_w_mean, AnyGenerator, GeneratorSpec, NoiseBank, StyleGenerator, SynthControl};
use crate::autograd::{lit, Adam, Scalar, Tape, Tensor, Var};
use crate::critic::{r1_surrogate, Critic, CriticRole, CriticSpec};
use crate::error::{Error, Result};
use crate::io::{push_adam, read_adam, write_jsonl, Container};
use crate::nn::Bind;
use crate::rng::{normal_vec, stream_seed, substream};
use ndarray::{s, Array3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// R1 weight; 0 disables the penalty.
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub critic_base_width: usize,
    pub critic_max_width: usize,
    /// Abort once the critic loss stays below this value ...
    pub divergence_eps: f64,
    /// ... for this many consecutive steps.
    pub divergence_steps: usize,
    pub checkpoint_every: usize,
    pub w_mean_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 16,
            lr: 0.002,
            r1_gamma: 1.0,
            r1_interval: 4,
            critic_base_width: 32,
            critic_max_width: 128,
            divergence_eps: 1e-4,
            divergence_steps: 200,
            checkpoint_every: 1000,
            w_mean_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: Option<f64>,
    pub real_logit: f64,
    pub fake_logit: f64,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct PretrainState<T: Scalar> {
    pub generator: StyleGenerator<T>,
    pub critic: Critic<T>,
    pub adam_g: Adam<T>,
    pub adam_d: Adam<T>,
    pub step: usize,
    pub seed: u64,
    below: usize,
}

const STATE_CONTAINER: &str = "pretrain_state";

impl<T: Scalar> PretrainState<T> {
    pub fn new(spec: GeneratorSpec, cfg: &PretrainConfig, seed: u64) -> Result<Self> {
        let generator = StyleGenerator::new(spec.clone(), stream_seed(seed, "pretrain_g", 0))?;
        let critic = Critic::new(
            CriticSpec::new(spec.resolution, cfg.critic_base_width, cfg.critic_max_width),
            CriticRole::Pretrain,
            stream_seed(seed, "pretrain_d", 0),
        )?;
        let adam_g = Adam::new(generator.store(), cfg.lr, 0.0, 0.99);
        let adam_d = Adam::new(&critic.store, cfg.lr, 0.0, 0.99);
        Ok(Self {
            generator,
            critic,
            adam_g,
            adam_d,
            step: 0,
            seed,
            below: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "spec": <StyleGenerator<T> as super::Generator<T>>::spec(&self.generator),
            "critic": self.critic.to_container().meta,
            "step": self.step,
            "seed": self.seed,
            "below": self.below,
        });
        let mut c = Container::new(STATE_CONTAINER, meta);
        for (n, t) in self.generator.store().iter() {
            c.push(format!("g.{n}"), t);
        }
        for (n, t) in self.critic.store.iter() {
            c.push(format!("d.{n}"), t);
        }
        push_adam(&mut c, "adam_g", &self.adam_g.state());
        push_adam(&mut c, "adam_d", &self.adam_d.state());
        c.save(path)
    }

    pub fn load(path: &Path, cfg: &PretrainConfig) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != STATE_CONTAINER {
            return Err(Error::format(path, format!("expected pretraining state, found '{}'", c.kind)));
        }
        let spec: GeneratorSpec = serde_json::from_value(c.meta["spec"].clone())?;
        let seed = c.meta["seed"].as_u64().ok_or_else(|| Error::format(path, "missing seed"))?;
        let mut st = Self::new(spec, cfg, seed)?;
        let fill = |prefix: &str, store: &mut crate::autograd::ParamStore<T>| -> Result<()> {
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
        fill("g", st.generator.store_mut())?;
        fill("d", &mut st.critic.store)?;
        let ng = st.generator.store().len();
        let nd = st.critic.store.len();
        st.adam_g
            .load_state(&read_adam(&c, "adam_g", ng, path)?)
            .map_err(|e| Error::format(path, e))?;
        st.adam_d
            .load_state(&read_adam(&c, "adam_d", nd, path)?)
            .map_err(|e| Error::format(path, e))?;
        st.step = c.meta["step"].as_u64().unwrap_or(0) as usize;
        st.below = c.meta["below"].as_u64().unwrap_or(0) as usize;
        Ok(st)
    }
}

fn latent_batch<T: Scalar>(spec: &GeneratorSpec, seed: u64, name: &str, step: usize, n: usize) -> (Tensor<T>, Vec<Tensor<T>>) {
    let mut rng = substream(seed, name, step as u64);
    let z: Vec<T> = normal_vec(&mut rng, n * spec.z_dim).into_iter().map(lit).collect();
    let z = Tensor::from_shape_vec(IxDyn(&[n, spec.z_dim]), z).unwrap();
    let banks: Vec<NoiseBank> = (0..n)
        .map(|i| NoiseBank::sample(spec, stream_seed(seed, name, (step * n + i) as u64 + (1 << 40))))
        .collect();
    let noise = (0..spec.n_layers())
        .map(|k| {
            let r = spec.layer_resolution(k);
            let mut t = Tensor::<T>::zeros(IxDyn(&[n, 1, r, r]));
            for (i, b) in banks.iter().enumerate() {
                t.slice_mut(s![i, 0, .., ..]).assign(&b.layers[k].mapv(lit::<T>));
            }
            t
        })
        .collect();
    (z, noise)
}

/// Records `G(z, noise)` on `tape` with the generator weights bound as given.
pub fn render_batch<T: Scalar>(gen: &StyleGenerator<T>, b: &Bind<T>, z: &Tensor<T>, noise: &[Tensor<T>]) -> Var {
    let t = b.tape;
    let w = gen.mapping_with(b, t.constant(z.clone()));
    let styles = vec![w; noise.len()];
    let nv: Vec<Var> = noise.iter().map(|n| t.constant(n.clone())).collect();
    gen.synthesis_with(b, &styles, &nv, &SynthControl::none()).image
}

fn real_batch<T: Scalar>(data: &[Array3<f64>], seed: u64, step: usize, n: usize) -> Tensor<T> {
    let (c, h, w) = data[0].dim();
    let mut rng = substream(seed, "pretrain_real", step as u64);
    let mut out = Tensor::<T>::zeros(IxDyn(&[n, c, h, w]));
    for i in 0..n {
        let j = rng.random_range(0..data.len());
        out.slice_mut(s![i, .., .., ..]).assign(&data[j].mapv(lit::<T>));
    }
    out
}

fn mean_of<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / t.len() as f64
}

/// One critic update followed by one generator update.
pub fn pretrain_step<T: Scalar>(st: &mut PretrainState<T>, data: &[Array3<f64>], cfg: &PretrainConfig) -> Result<PretrainLog> {
    let spec = super::Generator::<T>::spec(&st.generator).clone();
    let step = st.step;
    let n = cfg.batch;
    let real = real_batch::<T>(data, st.seed, step, n);

    // Critic.
    let (z, noise) = latent_batch::<T>(&spec, st.seed, "pretrain_zd", step, n);
    let fake = {
        let tape = Tape::new();
        let img = render_batch(&st.generator, &Bind::new(&tape, st.generator.store(), false), &z, &noise);
        (*tape.value(img)).clone()
    };
    let tape = Tape::new();
    let lr = st.critic.forward(&tape, tape.constant(real.clone()), true);
    let lf = st.critic.forward(&tape, tape.constant(fake), true);
    let d_loss = tape.add(tape.mean(tape.softplus(lf)), tape.mean(tape.softplus(tape.neg(lr))));
    let mut total = d_loss;
    let mut r1 = None;
    if cfg.r1_gamma > 0.0 && cfg.r1_interval > 0 && step % cfg.r1_interval == 0 {
        let (sur, pen) = r1_surrogate(&st.critic, &tape, &real, cfg.r1_gamma * cfg.r1_interval as f64);
        total = tape.add(total, sur);
        r1 = Some(pen / cfg.r1_interval as f64);
    }
    let real_logit = mean_of(&tape.value(lr));
    let fake_logit = mean_of(&tape.value(lf));
    let d_val = tape.scalar(d_loss).to_f64().unwrap();
    let grads = tape.backward(total).for_store(&st.critic.store);
    st.adam_d.step(&mut st.critic.store, &grads);

    // Generator.
    let (z, noise) = latent_batch::<T>(&spec, st.seed, "pretrain_zg", step, n);
    let tape = Tape::new();
    let img = render_batch(&st.generator, &Bind::new(&tape, st.generator.store(), true), &z, &noise);
    let lg = st.critic.forward(&tape, img, false);
    let g_loss = tape.mean(tape.softplus(tape.neg(lg)));
    let g_val = tape.scalar(g_loss).to_f64().unwrap();
    let grads = tape.backward(g_loss).for_store(st.generator.store());
    st.adam_g.step(st.generator.store_mut(), &grads);

    if !d_val.is_finite() || !g_val.is_finite() {
        return Err(Error::NonFinite(format!("pretraining losses at step {step}")));
    }
    st.below = if d_val < cfg.divergence_eps { st.below + 1 } else { 0 };
    st.step += 1;
    Ok(PretrainLog {
        step,
        d_loss: d_val,
        g_loss: g_val,
        r1,
        real_logit,
        fake_logit,
    })
}

/// Files produced by a pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub state: PathBuf,
    pub log: PathBuf,
    pub checkpoint_sha256: String,
}

/// Trains until `cfg.steps`, then fits `w_mean` and writes the checkpoint.
/// On divergence the current state and a checkpoint are still written
/// before the error is returned.
pub fn pretrain_gan<T: Scalar>(
    mut st: PretrainState<T>,
    data: &[Array3<f64>],
    cfg: &PretrainConfig,
    out_dir: &Path,
    config_echo: serde_json::Value,
) -> Result<(PretrainOutcome, PretrainState<T>)> {
    let m = super::Generator::<T>::spec(&st.generator).resolution;
    if data.is_empty() {
        return Err(Error::Invalid("pretraining dataset is empty".into()));
    }
    if data.iter().any(|d| d.dim() != (3, m, m)) {
        return Err(Error::Shape(format!("dataset images must be 3x{m}x{m}")));
    }
    if cfg.batch == 0 {
        return Err(Error::Invalid("batch must be at least 1".into()));
    }
    crate::io::ensure_dir(out_dir)?;
    let state_path = out_dir.join("pretrain_state.ckpt");
    let ckpt_path = out_dir.join("generator.ckpt");
    let log_path = out_dir.join("pretrain_log.jsonl");
    let mut log: Vec<PretrainLog> = if log_path.exists() && st.step > 0 {
        crate::io::read_jsonl::<PretrainLog>(&log_path)?
            .into_iter()
            .filter(|r| r.step < st.step)
            .collect()
    } else {
        Vec::new()
    };
    let finish = |st: &PretrainState<T>, log: &[PretrainLog]| -> Result<String> {
        write_jsonl(&log_path, log)?;
        st.save(&state_path)?;
        let mut g = st.generator.clone();
        let mean = fit_w_mean::<T>(&g, cfg.w_mean_samples.max(1), st.seed)?;
        g.set_w_mean(mean);
        let mut echo = config_echo.clone();
        echo["discriminator_fingerprint"] = serde_json::json!(st.critic.fingerprint());
        echo["steps_completed"] = serde_json::json!(st.step);
        super::save_generator(&AnyGenerator::Style(g), &ckpt_path, echo)
    };
    while st.step < cfg.steps {
        let rec = match pretrain_step(&mut st, data, cfg) {
            Ok(r) => r,
            Err(e) => {
                finish(&st, &log)?;
                return Err(e);
            }
        };
        if rec.step % 100 == 0 {
            log::info!(
                "pretrain step {} d={:.4} g={:.4} real={:.3} fake={:.3}",
                rec.step,
                rec.d_loss,
                rec.g_loss,
                rec.real_logit,
                rec.fake_logit
            );
        }
        log.push(rec);
        if st.below >= cfg.divergence_steps {
            finish(&st, &log)?;
            return Err(Error::Diverged(format!(
                "critic loss below {} for {} consecutive steps (step {})",
                cfg.divergence_eps, cfg.divergence_steps, st.step
            )));
        }
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 {
            write_jsonl(&log_path, &log)?;
            st.save(&state_path)?;
        }
    }
    let sha = finish(&st, &log)?;
    Ok((
        PretrainOutcome {
            checkpoint: ckpt_path,
            state: state_path,
            log: log_path,
            checkpoint_sha256: sha,
        },
        st,
    ))
}

/// Fraction of held-out real images scored positive plus generated images
/// scored negative, over `n` of each.
pub fn critic_accuracy<T: Scalar>(
    critic: &Critic<T>,
    gen: &StyleGenerator<T>,
    held_out: &[Array3<f64>],
    n: usize,
    seed: u64,
) -> f64 {
    let spec = super::Generator::<T>::spec(gen).clone();
    let real = real_batch::<T>(held_out, seed, 0, n);
    let (z, noise) = latent_batch::<T>(&spec, seed, "critic_eval", 0, n);
    let tape = Tape::new();
    let fake = (*tape.value(render_batch(gen, &Bind::new(&tape, gen.store(), false), &z, &noise))).clone();
    let correct = critic.logits(&real).iter().filter(|&&l| l > 0.0).count()
        + critic.logits(&fake).iter().filter(|&&l| l <= 0.0).count();
    correct as f64 / (2 * n) as f64
}
