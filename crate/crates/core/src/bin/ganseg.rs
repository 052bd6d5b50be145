//! Command-line entry point for the segmentation pipeline.
//!
//! Every verb writes under a fresh `--out-dir/<verb>[-k]/`, registers its outputs in
//! `--out-dir/pipeline.json` and prints a JSON summary on stdout. Failures
//! print `{"error": {...}}` on stderr and exit nonzero.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ganseg_core::alpha::{threshold, AlphaNet};
use ganseg_core::autograd::Scalar;
use ganseg_core::background::{
    crop_source_codes, harvest_crops, score_layers, trim, CropRule, GradNorm, LayerScoreReport, TrimDirective, TrimmedGenerator,
};
use ganseg_core::dataset_eval::{
    compute_metrics_batch, evaluate_dirs, evaluate_oracle, sample_labeled, save_report, train_downstream, write_overlay, AcceptAll,
    Aggregation, DownstreamConfig, MaskAreaBand, OracleAreaBand, Rejector, SampleConfig, SegReport, Segmenter, SwapMask,
};
use ganseg_core::io::{ensure_dir, file_sha256, write_gray_png, write_json, write_rgb_png};
use ganseg_core::layer_select::{activation_maps, trgb_noise_probe, write_trgb_panels, TrgbProbeReport, DEFAULT_RELATIVE_DROP};
use ganseg_core::pipeline::{PipelineManifest, Precision};
use ganseg_core::rng::stream_seed;
use ganseg_core::stylegen::pretrain::{pretrain_gan, PretrainConfig, PretrainState};
use ganseg_core::stylegen::procedural::{load_images, read_manifest as read_shapes, render, write_dataset};
use ganseg_core::stylegen::{
    load_generator, save_generator, synthesize, AnyGenerator, Generator, GeneratorSpec, LatentCode, OracleGenerator, OracleSpec,
};
use ganseg_core::trainer::{load_background_images, run_training, Backgrounds, BgSource, TrainConfig, TrainState};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser, Debug)]
#[command(name = "ganseg", version, about = "Foreground/background segmentation from a frozen generator")]
struct Cli {
    /// Flat TOML file with the verb's configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "single")]
    precision: PrecisionArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy generator on procedural shapes, or emit the oracle generator.
    Pretrain(PretrainArgs),
    /// tRGB noise probe and/or background layer scoring.
    Analyze(AnalyzeArgs),
    /// Zero one layer of a generator and write the trim directive.
    DeriveBg(DeriveBgArgs),
    /// Train the alpha network against a fresh critic.
    TrainAlpha(TrainAlphaArgs),
    /// Emit a labeled dataset from generator samples and predicted masks.
    Sample(SampleArgs),
    /// Train the downstream segmenter on an emitted dataset.
    TrainDownstream(DownstreamArgs),
    /// Score masks: directories, oracle ground truth, or a segmenter on procedural images.
    Evaluate(EvaluateArgs),
    /// Composite predicted foregrounds over new backgrounds.
    SwapBg(SwapArgs),
    /// Write sample grids, tRGB panels, activation maps and mask overlays.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Skip training and write the hand-built oracle generator.
    #[arg(long)]
    oracle: bool,
    /// Directory of training PNGs; procedural shapes are generated when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    trgb_probe: bool,
    #[arg(long)]
    bg_score: bool,
}

#[derive(Args, Debug)]
struct DeriveBgArgs {
    #[arg(long)]
    generator: PathBuf,
    /// Layer score report from `analyze --bg-score`; its argmax is trimmed.
    #[arg(long, conflicts_with = "layer")]
    scores: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainAlphaArgs {
    #[arg(long)]
    generator: PathBuf,
    /// Trim directive from `derive-bg`.
    #[arg(long)]
    background: Option<PathBuf>,
    /// Probe report from `analyze --trgb-probe`; fills `selected_layers` when the config leaves it empty.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long, value_enum)]
    bg_source: Option<BgSourceArg>,
    #[arg(long)]
    bg_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BgSourceArg {
    Generator,
    External,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    alpha: PathBuf,
}

#[derive(Args, Debug)]
struct DownstreamArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, requires = "gt_dir")]
    pred_dir: Option<PathBuf>,
    #[arg(long, requires = "pred_dir")]
    gt_dir: Option<PathBuf>,
    /// Oracle generator checkpoint (with --alpha).
    #[arg(long, requires = "alpha")]
    generator: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<PathBuf>,
    /// Segmenter checkpoint (with --images).
    #[arg(long, requires = "images")]
    segmenter: Option<PathBuf>,
    /// Procedural dataset directory with true masks.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SwapArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    alpha: PathBuf,
    #[arg(long)]
    background: PathBuf,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    alpha: Option<PathBuf>,
}

// ------------------------------------------------------------- configs

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct PretrainExtra {
    /// Procedural images generated when no data directory is given.
    n_images: usize,
    data_dir: Option<PathBuf>,
    /// Soft edge width of the oracle disc (oracle mode only).
    oracle_edge_px: f64,
    seed: u64,
}

impl Default for PretrainExtra {
    fn default() -> Self {
        Self {
            n_images: 4000,
            data_dir: None,
            oracle_edge_px: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnalyzeConfig {
    probe_samples: usize,
    relative_drop: f64,
    score_crops: usize,
    score_codes: usize,
    grad_norm: GradNorm,
    /// Border strip width; `None` uses one eighth of the resolution.
    crop_border: Option<usize>,
    seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            probe_samples: 64,
            relative_drop: DEFAULT_RELATIVE_DROP,
            score_crops: 32,
            score_codes: 8,
            grad_norm: GradNorm::L2,
            crop_border: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PreviewConfig {
    previews: usize,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RejectorKind {
    AcceptAll,
    MaskArea,
    OracleArea,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RejectConfig {
    rejector: RejectorKind,
    area_lo: f64,
    area_hi: f64,
}

impl Default for RejectConfig {
    fn default() -> Self {
        Self {
            rejector: RejectorKind::AcceptAll,
            area_lo: 0.02,
            area_hi: 0.98,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    aggregation: Aggregation,
    /// Oracle mode: number of held-out latents.
    n: usize,
    /// Hardening threshold for alpha masks (oracle mode) and segmenter outputs.
    threshold: f64,
    overlays: usize,
    seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Macro,
            n: 256,
            threshold: 0.9,
            overlays: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SwapConfig {
    n: usize,
    /// Harden the predicted mask; `None` composites with the soft mask.
    threshold: Option<f64>,
    seed: u64,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            n: 8,
            threshold: Some(0.9),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VizConfig {
    n: usize,
    threshold: f64,
    seed: u64,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            n: 8,
            threshold: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

/// Config file as a key table; missing `--config` means all defaults.
fn read_table(path: Option<&Path>) -> anyhow::Result<toml::Table> {
    let Some(p) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
    text.parse::<toml::Table>().with_context(|| format!("config {} is not a flat TOML table", p.display()))
}

/// Removes the keys `C` knows from `table` and deserializes them over
/// `C::default()`.
fn take<C: Serialize + DeserializeOwned + Default>(table: &mut toml::Table) -> anyhow::Result<C> {
    let Value::Object(mut merged) = serde_json::to_value(C::default())? else {
        bail!("configuration section is not a table");
    };
    let keys: Vec<String> = merged.keys().cloned().collect();
    for k in keys {
        if let Some(v) = table.remove(&k) {
            merged.insert(k, serde_json::to_value(v)?);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| ganseg_core::Error::Config(e.to_string()).into())
}

fn finish_table(table: toml::Table) -> anyhow::Result<()> {
    if !table.is_empty() {
        let keys: Vec<&String> = table.keys().collect();
        bail!(ganseg_core::Error::Config(format!("unknown keys {keys:?}")));
    }
    Ok(())
}

fn parse_config<C: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<C> {
    let mut t = read_table(path)?;
    let c = take(&mut t)?;
    finish_table(t)?;
    Ok(c)
}

// ------------------------------------------------------------ plumbing

struct Ctx {
    manifest: PipelineManifest,
    precision: Precision,
    verb: &'static str,
    seed: Option<u64>,
    out: Option<PathBuf>,
    outputs: Vec<Value>,
}

impl Ctx {
    /// Output directory of this invocation: `<verb>`, or `<verb>-2`, `<verb>-3`
    /// ... when earlier runs already wrote there, so recorded artifacts are
    /// never overwritten.
    fn dir(&mut self) -> anyhow::Result<PathBuf> {
        if let Some(d) = &self.out {
            return Ok(d.clone());
        }
        let root = self.manifest.root().to_path_buf();
        let used = |d: &Path| d.exists() && std::fs::read_dir(d).map(|mut r| r.next().is_some()).unwrap_or(true);
        let mut d = root.join(self.verb);
        let mut k = 2;
        while used(&d) {
            d = root.join(format!("{}-{k}", self.verb));
            k += 1;
        }
        ensure_dir(&d)?;
        self.out = Some(d.clone());
        Ok(d)
    }

    fn register(&mut self, path: &Path, config: &Value, seed: u64, parents: &[String]) -> anyhow::Result<String> {
        let id = self
            .manifest
            .register(self.verb, path, config.clone(), Some(seed), Some(self.precision), parents.to_vec())?;
        self.outputs.push(json!({"id": id, "path": path}));
        Ok(id)
    }
}

fn load_gen<T: Scalar>(ctx: &mut Ctx, path: &Path) -> anyhow::Result<(Arc<AnyGenerator<T>>, String)> {
    let id = ctx.manifest.input(path)?;
    let g = load_generator::<T>(path).with_context(|| format!("loading generator {}", path.display()))?;
    Ok((Arc::new(g), id))
}

fn load_alpha<T: Scalar>(ctx: &mut Ctx, path: &Path, gen: &dyn Generator<T>) -> anyhow::Result<(AlphaNet<T>, String)> {
    let id = ctx.manifest.input(path)?;
    let a = AlphaNet::load(path, gen.spec(), &gen.fingerprint()).with_context(|| format!("loading alpha network {}", path.display()))?;
    Ok((a, id))
}

fn oracle_of<T: Scalar>(g: &AnyGenerator<T>) -> Option<OracleGenerator> {
    match g {
        AnyGenerator::Oracle(o) => Some(o.clone()),
        AnyGenerator::Style(_) => None,
    }
}

fn codes(spec: &GeneratorSpec, n: usize, seed: u64, stream: &str) -> Vec<LatentCode> {
    (0..n).map(|i| LatentCode::sample(spec, stream_seed(seed, stream, i as u64))).collect()
}

fn to_f64<T: Scalar>(a: &Array3<T>) -> Array3<f64> {
    a.mapv(|v| v.to_f64().unwrap())
}

/// Side-by-side strip of `[3, m, m]` images.
fn write_strip(path: &Path, panels: &[Array3<f64>]) -> anyhow::Result<()> {
    let m = panels[0].shape()[1];
    let strip = Array3::from_shape_fn((3, m, m * panels.len()), |(c, y, x)| panels[x / m][[c, y, x % m]]);
    write_rgb_png(path, &strip)?;
    Ok(())
}

fn gray_to_rgb(mask: &Array2<f64>) -> Array3<f64> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((3, h, w), |(_, y, x)| mask[[y, x]] * 2.0 - 1.0)
}

// ------------------------------------------------------------- verbs

fn cmd_pretrain<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &PretrainArgs) -> anyhow::Result<Value> {
    let mut table = read_table(cfg_path)?;
    let default_widths = !table.contains_key("channels");
    let mut spec: GeneratorSpec = take(&mut table)?;
    if default_widths {
        // Keep the default coarse-to-fine widths, one per ladder step.
        let n = ganseg_core::stylegen::ladder_len(spec.resolution);
        let d = GeneratorSpec::default().channels;
        spec.channels = (0..n).map(|i| d[i.min(d.len() - 1)]).collect();
    }
    let pcfg: PretrainConfig = take(&mut table)?;
    let mut extra: PretrainExtra = take(&mut table)?;
    finish_table(table)?;
    let seed = ctx.seed.unwrap_or(extra.seed);
    extra.seed = seed;
    if args.data_dir.is_some() {
        extra.data_dir = args.data_dir.clone();
    }
    let dir = ctx.dir()?;
    let ckpt = dir.join("generator.ckpt");
    if args.oracle {
        let os = OracleSpec {
            resolution: spec.resolution,
            edge_px: extra.oracle_edge_px,
        };
        let echo = json!({"oracle": os.resolution, "edge_px": os.edge_px});
        let g = OracleGenerator::new(os)?;
        save_generator::<T>(&AnyGenerator::Oracle(g), &ckpt, echo.clone())?;
        ctx.register(&ckpt, &echo, seed, &[])?;
        return Ok(echo);
    }
    spec.w_mean = None;
    let (data_dir, parents) = match &extra.data_dir {
        Some(d) => (d.clone(), vec![ctx.manifest.input(d)?]),
        None => {
            let d = dir.join("shapes");
            write_dataset(&d, extra.n_images, spec.resolution, stream_seed(seed, "shapes", 0))?;
            let id = ctx.register(&d, &json!({"n_images": extra.n_images, "resolution": spec.resolution}), seed, &[])?;
            (d, vec![id])
        }
    };
    let data = load_images(&data_dir, spec.resolution)?;
    let echo = json!({"generator": spec, "pretrain": pcfg, "extra": extra});
    let st = PretrainState::<T>::new(spec, &pcfg, seed)?;
    let (out, _) = pretrain_gan(st, &data, &pcfg, &dir, echo.clone())?;
    ctx.register(&out.checkpoint, &echo, seed, &parents)?;
    Ok(echo)
}

fn cmd_analyze<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &AnalyzeArgs) -> anyhow::Result<Value> {
    let mut cfg: AnalyzeConfig = parse_config(cfg_path)?;
    if !args.trgb_probe && !args.bg_score {
        return usage("analyze needs --trgb-probe and/or --bg-score");
    }
    if args.trgb_probe && cfg.probe_samples == 0 {
        return usage("probe_samples must be at least 1");
    }
    if args.bg_score && (cfg.score_crops == 0 || cfg.score_codes == 0) {
        return usage("score_crops and score_codes must be at least 1");
    }
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let (gen, gid) = load_gen::<T>(ctx, &args.generator)?;
    let spec = gen.spec().clone();
    let dir = ctx.dir()?;
    let echo = serde_json::to_value(&cfg)?;
    let mut seeds = json!({});
    if args.trgb_probe {
        let s = stream_seed(cfg.seed, "trgb_probe", 0);
        let mut report = trgb_noise_probe(gen.as_ref(), cfg.probe_samples, s)?;
        if cfg.relative_drop != DEFAULT_RELATIVE_DROP {
            report.selection = ganseg_core::layer_select::select_layers(&report.scores(), cfg.relative_drop)?;
        }
        let path = dir.join("trgb_probe.json");
        write_json(&path, &report)?;
        let fs = synthesize(gen.as_ref(), &codes(&spec, 1, s, "panel"), true)?;
        let panel = dir.join("trgb_panels.png");
        write_trgb_panels(&fs, 0, &panel)?;
        ctx.register(&path, &echo, cfg.seed, std::slice::from_ref(&gid))?;
        seeds["trgb_probe"] = json!(s);
    }
    if args.bg_score {
        let s = stream_seed(cfg.seed, "bg_score", 0);
        let rule = match cfg.crop_border {
            Some(width) => CropRule::BorderStrips { width },
            None => CropRule::default_for(spec.resolution),
        };
        let crops = harvest_crops(gen.as_ref(), cfg.score_crops, rule, s)?;
        let cs = crop_source_codes(&spec, cfg.score_codes, stream_seed(s, "codes", 0));
        let report = score_layers(gen.as_ref(), &crops, &cs, cfg.grad_norm)?;
        let path = dir.join("layer_scores.json");
        report.save(&path)?;
        ctx.register(&path, &echo, cfg.seed, std::slice::from_ref(&gid))?;
        seeds["bg_score"] = json!(s);
    }
    Ok(json!({"config": echo, "seeds": seeds}))
}

fn cmd_derive_bg<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &DeriveBgArgs) -> anyhow::Result<Value> {
    let mut cfg: PreviewConfig = parse_config(cfg_path)?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let (gen, gid) = load_gen::<T>(ctx, &args.generator)?;
    let mut parents = vec![gid];
    let (layer, report_path) = match (&args.scores, args.layer) {
        (Some(p), _) => {
            parents.push(ctx.manifest.input(p)?);
            let r = LayerScoreReport::load(p)?;
            if r.generator != gen.fingerprint() {
                bail!(ganseg_core::Error::Fingerprint(format!("{} was computed on another generator", p.display())));
            }
            (r.argmax, Some(std::fs::canonicalize(p)?))
        }
        (None, Some(l)) => (l, None),
        (None, None) => return usage("derive-bg needs --scores or --layer"),
    };
    let base: Arc<dyn Generator<T>> = gen.clone();
    let bg = trim(base, layer)?;
    let dir = ctx.dir()?;
    let directive = TrimDirective {
        base_checkpoint: std::fs::canonicalize(&args.generator)?,
        base_sha256: file_sha256(&args.generator)?,
        base_fingerprint: gen.fingerprint(),
        trimmed_layers: vec![layer],
        score_report: report_path,
    };
    let path = dir.join("background.json");
    directive.save(&path)?;
    let spec = gen.spec().clone();
    let cs = codes(&spec, cfg.previews.max(1), cfg.seed, "preview");
    let full = synthesize(gen.as_ref(), &cs, false)?;
    let bgs = synthesize(&bg, &cs, false)?;
    for i in 0..cfg.previews {
        write_strip(&dir.join(format!("preview_{i:03}.png")), &[to_f64(&full.image_at(i)), to_f64(&bgs.image_at(i))])?;
    }
    let echo = json!({"layer": layer, "previews": cfg.previews, "seed": cfg.seed});
    ctx.register(&path, &echo, cfg.seed, &parents)?;
    Ok(echo)
}

fn cmd_train_alpha<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &TrainAlphaArgs) -> anyhow::Result<Value> {
    let mut cfg: TrainConfig = match cfg_path {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    match args.bg_source {
        Some(BgSourceArg::External) => cfg.bg_source = BgSource::ExternalImages,
        Some(BgSourceArg::Generator) => cfg.bg_source = BgSource::TrimmedGenerator,
        None => {}
    }
    if let Some(d) = &args.bg_dir {
        cfg.bg_dir = Some(d.clone());
    }
    let (gen, gid) = load_gen::<T>(ctx, &args.generator)?;
    let mut parents = vec![gid];
    if let Some(p) = &args.probe {
        parents.push(ctx.manifest.input(p)?);
        let report: TrgbProbeReport = ganseg_core::io::read_json(p)?;
        if report.generator != gen.fingerprint() {
            bail!(ganseg_core::Error::Fingerprint(format!("{} was computed on another generator", p.display())));
        }
        if cfg.selected_layers.is_empty() {
            cfg.selected_layers = report.selection.layers;
        }
    }
    cfg.validate()?;
    let spec = gen.spec().clone();
    let generator: Arc<dyn Generator<T>> = gen.clone();
    let backgrounds = match cfg.bg_source {
        BgSource::ExternalImages => {
            let d = cfg.bg_dir.clone().ok_or_else(|| Usage("external backgrounds need --bg-dir".into()))?;
            parents.push(ctx.manifest.input(&d)?);
            Backgrounds::Images(Arc::new(load_background_images(&d, spec.resolution)?))
        }
        BgSource::TrimmedGenerator => {
            let Some(p) = &args.background else {
                return usage("train-alpha needs --background (or --bg-source external)");
            };
            parents.push(ctx.manifest.input(p)?);
            let (_, base, bg): (_, _, TrimmedGenerator<T>) = TrimDirective::load(p)?;
            if base.fingerprint() != gen.fingerprint() {
                bail!(ganseg_core::Error::Fingerprint(format!("{} trims another generator", p.display())));
            }
            Backgrounds::Generator(Arc::new(bg))
        }
    };
    let dir = ctx.dir()?;
    let mut st = TrainState::new(cfg.clone(), generator, backgrounds)?;
    let out = run_training(&mut st, &dir)?;
    let echo = serde_json::to_value(&cfg)?;
    ctx.register(&out.alpha_checkpoint, &echo, cfg.seed, &parents)?;
    Ok(json!({"config": echo, "steps": out.steps, "degenerate": out.degenerate}))
}

fn cmd_sample<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &SampleArgs) -> anyhow::Result<Value> {
    let mut table = read_table(cfg_path)?;
    let mut cfg: SampleConfig = take(&mut table)?;
    let rej: RejectConfig = take(&mut table)?;
    finish_table(table)?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let (gen, gid) = load_gen::<T>(ctx, &args.generator)?;
    let (alpha, aid) = load_alpha(ctx, &args.alpha, gen.as_ref())?;
    let rejector: Box<dyn Rejector> = match rej.rejector {
        RejectorKind::AcceptAll => Box::new(AcceptAll),
        RejectorKind::MaskArea => Box::new(MaskAreaBand {
            lo: rej.area_lo,
            hi: rej.area_hi,
            threshold: cfg.threshold,
        }),
        RejectorKind::OracleArea => {
            let oracle = oracle_of(&gen).ok_or_else(|| Usage("oracle_area rejection needs the oracle generator".into()))?;
            Box::new(OracleAreaBand {
                oracle: Arc::new(oracle),
                lo: rej.area_lo,
                hi: rej.area_hi,
            })
        }
    };
    let dir = ctx.dir()?.join("dataset");
    let summary = sample_labeled(gen.as_ref(), &alpha, &cfg, rejector.as_ref(), &dir)?;
    let echo = json!({"sample": cfg, "reject": rej});
    ctx.register(&dir, &echo, cfg.seed, &[gid, aid])?;
    Ok(json!({"config": echo, "accepted": summary.accepted, "attempts": summary.attempts, "rejections": summary.rejections}))
}

fn cmd_train_downstream<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &DownstreamArgs) -> anyhow::Result<Value> {
    let mut cfg: DownstreamConfig = parse_config(cfg_path)?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let did = ctx.manifest.input(&args.dataset)?;
    let dir = ctx.dir()?;
    let out = train_downstream::<T>(&args.dataset, &cfg, &dir)?;
    let echo = serde_json::to_value(&cfg)?;
    ctx.register(&out.checkpoint, &echo, cfg.seed, &[did])?;
    Ok(json!({"config": echo, "n_train": out.n_train, "n_val": out.n_val, "val_miou": out.val.miou}))
}

fn cmd_evaluate<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &EvaluateArgs) -> anyhow::Result<Value> {
    let mut cfg: EvalConfig = parse_config(cfg_path)?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let dir = ctx.dir()?;
    let (report, parents, mode): (SegReport, Vec<String>, &str) = if let (Some(p), Some(g)) = (&args.pred_dir, &args.gt_dir) {
        let parents = vec![ctx.manifest.input(p)?, ctx.manifest.input(g)?];
        (evaluate_dirs(p, g, cfg.aggregation)?, parents, "directories")
    } else if let (Some(gp), Some(ap)) = (&args.generator, &args.alpha) {
        let (gen, gid) = load_gen::<T>(ctx, gp)?;
        let (alpha, aid) = load_alpha(ctx, ap, gen.as_ref())?;
        let oracle = oracle_of(&gen).ok_or_else(|| Usage("ground-truth evaluation needs the oracle generator".into()))?;
        let report = evaluate_oracle(gen.as_ref(), &oracle, &alpha, cfg.n, cfg.seed, cfg.threshold, cfg.aggregation)?;
        let cs = codes(gen.spec(), cfg.overlays.min(cfg.n), cfg.seed, "eval");
        if !cs.is_empty() {
            let fs = synthesize(gen.as_ref(), &cs, true)?;
            for (i, (m, c)) in alpha.predict_mask(gen.spec(), &fs)?.iter().zip(&cs).enumerate() {
                let gt = threshold(&oracle.true_mask(c), 0.5);
                write_overlay(&dir.join(format!("overlay_{i:03}.png")), &to_f64(&fs.image_at(i)), &m.threshold(cfg.threshold), &gt)?;
            }
        }
        (report, vec![gid, aid], "oracle")
    } else if let (Some(sp), Some(ip)) = (&args.segmenter, &args.images) {
        let parents = vec![ctx.manifest.input(sp)?, ctx.manifest.input(ip)?];
        let seg = Segmenter::<T>::load(sp)?;
        let records = read_shapes(ip)?;
        let images = load_images(ip, seg.resolution)?;
        let gts: Vec<Array2<u8>> = records.iter().map(|r| threshold(&render(&r.params, seg.resolution).1, 0.5)).collect();
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        let preds: Vec<Array2<u8>> = seg.predict(&refs)?.iter().map(|p| threshold(p, cfg.threshold)).collect();
        for i in 0..cfg.overlays.min(preds.len()) {
            write_overlay(&dir.join(format!("overlay_{i:03}.png")), &images[i], &preds[i], &gts[i])?;
        }
        let mut report = compute_metrics_batch(&preds, &gts, cfg.aggregation)?;
        report.ids = records.into_iter().map(|r| r.id).collect();
        (report, parents, "segmenter")
    } else {
        return usage("evaluate needs --pred-dir/--gt-dir, --generator/--alpha, or --segmenter/--images");
    };
    let path = dir.join("eval_report.json");
    save_report(&path, &report)?;
    let echo = json!({"mode": mode, "eval": cfg});
    ctx.register(&path, &echo, cfg.seed, &parents)?;
    Ok(json!({
        "config": echo,
        "miou": report.miou,
        "iou_fg": report.iou_fg,
        "iou_bg": report.iou_bg,
        "f1": report.f1,
        "accuracy": report.accuracy,
    }))
}

fn cmd_swap_bg<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &SwapArgs) -> anyhow::Result<Value> {
    let mut cfg: SwapConfig = parse_config(cfg_path)?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let (gen, gid) = load_gen::<T>(ctx, &args.generator)?;
    let (alpha, aid) = load_alpha(ctx, &args.alpha, gen.as_ref())?;
    let bid = ctx.manifest.input(&args.background)?;
    let (_, base, bg): (_, _, TrimmedGenerator<T>) = TrimDirective::load(&args.background)?;
    if base.fingerprint() != gen.fingerprint() {
        bail!(ganseg_core::Error::Fingerprint(format!("{} trims another generator", args.background.display())));
    }
    let spec = gen.spec().clone();
    let fg_codes = codes(&spec, cfg.n, cfg.seed, "swap_fg");
    let bg_codes = codes(&spec, cfg.n, cfg.seed, "swap_bg");
    let dir = ctx.dir()?.join("images");
    ensure_dir(&dir)?;
    for (i, (fc, bc)) in fg_codes.iter().zip(&bg_codes).enumerate() {
        let source = to_f64(&synthesize(gen.as_ref(), std::slice::from_ref(fc), false)?.image_at(0));
        let new_bg = to_f64(&synthesize(&bg, std::slice::from_ref(bc), false)?.image_at(0));
        let mask = SwapMask::Alpha {
            net: &alpha,
            threshold: cfg.threshold,
        };
        let out = ganseg_core::dataset_eval::background_swap(gen.as_ref(), mask, fc, &new_bg)?;
        write_strip(&dir.join(format!("swap_{i:03}.png")), &[source, new_bg, out])?;
    }
    let echo = serde_json::to_value(&cfg)?;
    ctx.register(&dir, &echo, cfg.seed, &[gid, aid, bid])?;
    Ok(json!({"config": echo}))
}

fn cmd_viz<T: Scalar>(ctx: &mut Ctx, cfg_path: Option<&Path>, args: &VizArgs) -> anyhow::Result<Value> {
    let mut cfg: VizConfig = parse_config(cfg_path)?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let (gen, gid) = load_gen::<T>(ctx, &args.generator)?;
    let mut parents = vec![gid];
    let alpha = match &args.alpha {
        Some(p) => {
            let (a, id) = load_alpha(ctx, p, gen.as_ref())?;
            parents.push(id);
            Some(a)
        }
        None => None,
    };
    let spec = gen.spec().clone();
    let cs = codes(&spec, cfg.n.max(1), cfg.seed, "viz");
    let fs = synthesize(gen.as_ref(), &cs, true)?;
    let masks = match &alpha {
        Some(a) => Some(a.predict_mask(&spec, &fs)?),
        None => None,
    };
    let dir = ctx.dir()?.join("images");
    ensure_dir(&dir)?;
    let m = spec.resolution;
    for i in 0..cfg.n {
        let img = to_f64(&fs.image_at(i));
        write_trgb_panels(&fs, i, &dir.join(format!("trgb_{i:03}.png")))?;
        let acts: Vec<Array3<f64>> = activation_maps(&fs, i)
            .iter()
            .map(|a| {
                let f = m / a.nrows();
                gray_to_rgb(&Array2::from_shape_fn((m, m), |(y, x)| a[[y / f, x / f]]))
            })
            .collect();
        write_strip(&dir.join(format!("activations_{i:03}.png")), &acts)?;
        match &masks {
            Some(ms) => {
                let soft = &ms[i].values;
                let hard = ms[i].threshold(cfg.threshold).mapv(f64::from);
                write_gray_png(&dir.join(format!("mask_{i:03}.png")), soft)?;
                let fg = Array3::from_shape_fn(img.raw_dim(), |(c, y, x)| img[[c, y, x]] * hard[[y, x]]);
                write_strip(&dir.join(format!("sample_{i:03}.png")), &[img, gray_to_rgb(soft), fg])?;
            }
            None => write_rgb_png(&dir.join(format!("sample_{i:03}.png")), &img)?,
        }
    }
    let echo = serde_json::to_value(&cfg)?;
    ctx.register(&dir, &echo, cfg.seed, &parents)?;
    Ok(json!({"config": echo}))
}

fn run<T: Scalar>(cli: &Cli, ctx: &mut Ctx) -> anyhow::Result<Value> {
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain::<T>(ctx, cfg, a),
        Command::Analyze(a) => cmd_analyze::<T>(ctx, cfg, a),
        Command::DeriveBg(a) => cmd_derive_bg::<T>(ctx, cfg, a),
        Command::TrainAlpha(a) => cmd_train_alpha::<T>(ctx, cfg, a),
        Command::Sample(a) => cmd_sample::<T>(ctx, cfg, a),
        Command::TrainDownstream(a) => cmd_train_downstream::<T>(ctx, cfg, a),
        Command::Evaluate(a) => cmd_evaluate::<T>(ctx, cfg, a),
        Command::SwapBg(a) => cmd_swap_bg::<T>(ctx, cfg, a),
        Command::Viz(a) => cmd_viz::<T>(ctx, cfg, a),
    }
}

fn verb_name(c: &Command) -> &'static str {
    match c {
        Command::Pretrain(_) => "pretrain",
        Command::Analyze(_) => "analyze",
        Command::DeriveBg(_) => "derive-bg",
        Command::TrainAlpha(_) => "train-alpha",
        Command::Sample(_) => "sample",
        Command::TrainDownstream(_) => "train-downstream",
        Command::Evaluate(_) => "evaluate",
        Command::SwapBg(_) => "swap-bg",
        Command::Viz(_) => "viz",
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if err.downcast_ref::<Usage>().is_some() {
        return "usage";
    }
    use ganseg_core::Error as E;
    match err.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Invalid(_)) => "invalid",
        Some(E::Shape(_)) => "shape",
        Some(E::NonFinite(_)) => "non_finite",
        Some(E::MissingLayer { .. }) => "missing_layer",
        Some(E::Fingerprint(_)) => "fingerprint",
        Some(E::Diverged(_)) => "diverged",
        Some(E::Degenerate(_)) => "degenerate",
        Some(E::Rejection(_)) => "rejection",
        Some(E::Io { .. }) => "io",
        Some(E::Format { .. }) => "format",
        Some(E::Config(_)) => "config",
        Some(E::Json(_)) => "json",
        None if err.chain().any(|c| c.is::<std::io::Error>()) => "io",
        None if err.chain().any(|c| c.is::<toml::de::Error>()) => "config",
        None => "other",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let precision = match cli.precision {
        PrecisionArg::Single => Precision::Single,
        PrecisionArg::Double => Precision::Double,
    };
    let verb = verb_name(&cli.command);
    let result = (|| -> anyhow::Result<Value> {
        let manifest = PipelineManifest::open(&cli.out_dir)?;
        let mut ctx = Ctx {
            manifest,
            precision,
            verb,
            seed: cli.seed,
            out: None,
            outputs: Vec::new(),
        };
        let detail = match precision {
            Precision::Single => run::<f32>(&cli, &mut ctx)?,
            Precision::Double => run::<f64>(&cli, &mut ctx)?,
        };
        ctx.manifest.save()?;
        let dir = ctx.dir()?;
        let record = json!({"verb": verb, "dir": dir, "precision": precision, "outputs": ctx.outputs, "detail": detail});
        write_json(&dir.join("record.json"), &record)?;
        Ok(record)
    })();
    match result {
        Ok(record) => {
            println!("{record}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let kind = error_kind(&err);
            let body = json!({"error": {"verb": verb, "kind": kind, "message": format!("{err:#}")}});
            eprintln!("{body}");
            if kind == "usage" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
