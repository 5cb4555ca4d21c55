//! Command-line pipeline: `synth`, `align`, `ndvi`, `autolabel`, `stats`,
//! `train`, `infer`, `eval`, `render` and `bench`.
//!
//! Settings resolve as flags, then the `--config` JSON file, then built-in
//! defaults. Every random choice derives from `--seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::autolabel::{generate_mask, AutolabelConfig, Connectivity};
use crate::balance::{accumulate_stats, compute_class_weights, ClassWeights, WeightsFile};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, FrameOutput};
use crate::imgcore::{
    class, compute_ndvi, render_mask, render_probability, write_band_image, write_label_mask,
    write_probability_map, write_rgb_png, Band, BitDepth, LabelMask, MultispectralFrame,
};
use crate::manifest::{DatasetManifest, PlotType, Split};
use crate::net::{checkpoint, infer, train, NetworkConfig, Tensor, TrainConfig, TrainingSet};
use crate::register::{estimate_rigid, estimate_translation, Registration, SearchParams, Transform2D};
use crate::synth::{derive_seed, generate_dataset, FieldConfig, PlotCounts};

/// Optional settings file; every section falls back to its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub field: FieldConfig,
    pub counts: Option<PlotCounts>,
    pub search: SearchParams,
    pub autolabel: AutolabelConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

const DEFAULT_COUNTS: PlotCounts = PlotCounts {
    crop: 10,
    weed: 10,
    mixed: 5,
};

#[derive(Debug, Parser)]
#[command(name = "cropweed", version, about = "Multispectral crop/weed segmentation pipeline")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON settings file (flags take precedence).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth and a manifest.
    Synth(SynthArgs),
    /// Register bands onto the reference band, then crop to common coverage.
    Align(AlignArgs),
    /// Add an NDVI band to every frame.
    Ndvi(IoArgs),
    /// Label single-species training frames from NDVI.
    Autolabel(AutolabelArgs),
    /// Class statistics and balancing weights of the training masks.
    Stats(StatsArgs),
    /// Train the network on the training split.
    Train(TrainArgs),
    /// Predict probabilities and labels.
    Infer(InferArgs),
    /// Score predictions against masks.
    Eval(EvalArgs),
    /// Colour-coded PNG renders of masks, predictions and probabilities.
    Render(IoArgs),
    /// Forward-pass timing for 1, 2 and 3 input channels.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub weed: Option<usize>,
    #[arg(long)]
    pub mixed: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Red band offset in pixels, `dx,dy`.
    #[arg(long, value_parser = parse_pair)]
    pub misalign: Option<(f64, f64)>,
    /// Red band rotation in degrees.
    #[arg(long)]
    pub misalign_deg: Option<f64>,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let a = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, default_value = "nir")]
    pub reference: String,
    /// Reuse a saved registration instead of estimating one.
    #[arg(long)]
    pub registration: Option<PathBuf>,
    /// Frame used to estimate the registration (default: first entry).
    #[arg(long)]
    pub calibrate_on: Option<String>,
    /// Estimate translation only.
    #[arg(long)]
    pub translation_only: bool,
    #[arg(long, default_value_t = 0)]
    pub margin: u32,
    /// Cropped sides are trimmed to a multiple of this.
    #[arg(long, default_value_t = 4)]
    pub multiple: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Debug, Args)]
pub struct AutolabelArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub sharpen: Option<f64>,
    #[arg(long)]
    pub min_blob: Option<usize>,
    #[arg(long)]
    pub connectivity: Option<ConnectivityArg>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Weights JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Weights JSON from `stats`; computed from the training masks if absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Train with unit class weights.
    #[arg(long, conflicts_with = "weights")]
    pub uniform_weights: bool,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Loss and class-accuracy history JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn admits(self, split: Split) -> bool {
        match self {
            SplitArg::Train => split == Split::Train,
            SplitArg::Test => split == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Report file stem.
    #[arg(long, default_value = "report")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// JSON report to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the summary printed on success.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidConfig(e.to_string().trim().to_string()))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match &cli.command {
        Command::Synth(a) => synth(a, &cfg, cli.seed),
        Command::Align(a) => align(a, &cfg),
        Command::Ndvi(a) => ndvi(a),
        Command::Autolabel(a) => autolabel(a, &cfg),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train_cmd(a, &cfg, cli.seed),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Render(a) => render(a),
        Command::Bench(a) => bench(a, &cfg, cli.seed),
    }
}

/// One-line, machine-parseable description of an error.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} code={} message={:?}", e.kind(), e.code(), msg)
}

fn synth(a: &SynthArgs, cfg: &PipelineConfig, seed: u64) -> Result<String> {
    let mut field = cfg.field.clone();
    field.seed = seed;
    if let Some(w) = a.width {
        field.width = w;
    }
    if let Some(h) = a.height {
        field.height = h;
    }
    if let Some(n) = a.noise {
        field.noise_sigma = n;
    }
    let (dx, dy) = a.misalign.unwrap_or((field.band_misalignment.tx, field.band_misalignment.ty));
    let theta = a
        .misalign_deg
        .map_or(field.band_misalignment.theta, f64::to_radians);
    field.band_misalignment = Transform2D::new(dx, dy, theta);
    let base = cfg.counts.unwrap_or(DEFAULT_COUNTS);
    let counts = PlotCounts {
        crop: a.crop.unwrap_or(base.crop),
        weed: a.weed.unwrap_or(base.weed),
        mixed: a.mixed.unwrap_or(base.mixed),
    };
    let m = generate_dataset(&field, counts, &a.out)?;
    Ok(format!(
        "synth: {} frames ({} train, {} test) in {}",
        m.entries.len(),
        m.entries_in(Split::Train).count(),
        m.entries_in(Split::Test).count(),
        a.out.display()
    ))
}

fn band_key(b: &Band) -> String {
    b.name().to_ascii_lowercase()
}

/// Frame with the named band first.
fn reference_first(frame: &MultispectralFrame, reference: &str) -> Result<MultispectralFrame> {
    let r = Band::from_name(reference);
    let first = frame.band(&r).ok_or_else(|| Error::BandMismatch {
        expected: reference.to_string(),
        found: format!("frame {} lacks it", frame.frame_id()),
    })?;
    let mut bands = vec![first.clone()];
    bands.extend(frame.bands().iter().filter(|b| *b.band() != r).cloned());
    MultispectralFrame::new(frame.frame_id(), bands)
}

fn save_band(frame_id: &str, b: &crate::imgcore::BandImage, out: &Path, dir: &str) -> Result<PathBuf> {
    let key = band_key(b.band());
    let rel = PathBuf::from(format!("{dir}/{frame_id}_{key}.pgm"));
    write_band_image(b, out.join(&rel), BitDepth::Sixteen)?;
    Ok(out.join(rel))
}

fn align(a: &AlignArgs, cfg: &PipelineConfig) -> Result<String> {
    let mut m = DatasetManifest::load(&a.io.manifest)?;
    let out = &a.io.out;
    let registration = match &a.registration {
        Some(p) => Registration::load(p)?,
        None => {
            let entry = match &a.calibrate_on {
                Some(id) => m
                    .entry(id)
                    .ok_or_else(|| Error::Manifest(format!("no frame {id:?} to calibrate on")))?,
                None => m.entries.first().ok_or(Error::EmptyInput("manifest has no frames"))?,
            };
            let frame = reference_first(&m.load_frame(entry)?, &a.reference)?;
            let reference = &frame.bands()[0];
            let mut transforms = BTreeMap::new();
            for b in &frame.bands()[1..] {
                let t = if a.translation_only {
                    estimate_translation(reference, b, &cfg.search)?
                } else {
                    estimate_rigid(reference, b, &cfg.search)?
                };
                transforms.insert(b.band().name().to_string(), t);
            }
            Registration {
                reference: reference.band().name().to_string(),
                transforms,
                intrinsics: None,
                search: cfg.search,
            }
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    registration.save(out.join("registration.json"))?;
    let mut sizes = Vec::new();
    for i in 0..m.entries.len() {
        let entry = m.entries[i].clone();
        let frame = reference_first(&m.load_frame(&entry)?, &registration.reference)?;
        let (warped, region) = registration.apply(&frame, a.margin)?;
        let r = region.to_multiple(a.multiple)?;
        let (ox, oy) = (r.x - region.x, r.y - region.y);
        let mut bands = BTreeMap::new();
        for b in warped.bands() {
            let cropped = b.crop(ox, oy, r.width, r.height)?;
            bands.insert(band_key(b.band()), save_band(&entry.frame_id, &cropped, out, "frames")?);
        }
        let mask = match m.load_mask(&entry)? {
            Some(mask) => {
                let path = out.join(format!("masks/{}.png", entry.frame_id));
                write_label_mask(&mask.crop(r.x, r.y, r.width, r.height)?, &path)?;
                Some(path)
            }
            None => None,
        };
        let e = &mut m.entries[i];
        e.bands = bands;
        e.mask = mask;
        e.prediction = None;
        e.probabilities = None;
        sizes.push((r.width, r.height));
    }
    m.save(out.join("manifest.json"))?;
    let ts: Vec<String> = registration
        .transforms
        .iter()
        .map(|(k, t)| format!("{k}: tx={:.3} ty={:.3} theta={:.4}deg", t.tx, t.ty, t.theta.to_degrees()))
        .collect();
    Ok(format!(
        "align: {} frames cropped to {:?}; {}",
        sizes.len(),
        sizes.first().copied().unwrap_or_default(),
        ts.join(", ")
    ))
}

fn frame_ndvi(frame: &MultispectralFrame) -> Result<crate::imgcore::BandImage> {
    if let Some(b) = frame.band(&Band::Ndvi) {
        return Ok(b.clone());
    }
    let get = |b: Band| {
        frame.band(&b).ok_or_else(|| Error::BandMismatch {
            expected: b.to_string(),
            found: format!("frame {} lacks it", frame.frame_id()),
        })
    };
    compute_ndvi(get(Band::Nir)?, get(Band::Red)?)
}

fn ndvi(a: &IoArgs) -> Result<String> {
    let mut m = DatasetManifest::load(&a.manifest)?;
    for i in 0..m.entries.len() {
        let frame = m.load_frame(&m.entries[i])?;
        let ndvi = frame_ndvi(&frame)?;
        let path = save_band(frame.frame_id(), &ndvi, &a.out, "ndvi")?;
        m.entries[i].bands.insert("ndvi".into(), path);
    }
    m.save(a.out.join("manifest.json"))?;
    Ok(format!("ndvi: {} frames", m.entries.len()))
}

fn autolabel(a: &AutolabelArgs, cfg: &PipelineConfig) -> Result<String> {
    let mut al = cfg.autolabel;
    if let Some(s) = a.sigma {
        al.blur_sigma = s;
    }
    if let Some(s) = a.sharpen {
        al.sharpen_amount = s;
    }
    if let Some(n) = a.min_blob {
        al.min_blob_pixels = n;
    }
    if let Some(c) = a.connectivity {
        al.connectivity = match c {
            ConnectivityArg::Four => Connectivity::Four,
            ConnectivityArg::Eight => Connectivity::Eight,
        };
    }
    if let Some(b) = a.bins {
        al.otsu_bins = b;
    }
    al.validate()?;
    let mut m = DatasetManifest::load(&a.io.manifest)?;
    let mut labelled = 0;
    for i in 0..m.entries.len() {
        let entry = &m.entries[i];
        if entry.split != Split::Train {
            continue;
        }
        al.vegetation_class = match entry.plot_type {
            PlotType::Crop => class::CROP,
            PlotType::Weed => class::WEED,
            PlotType::Mixed => {
                return Err(Error::Manifest(format!(
                    "train frame {:?} is a mixed plot; automatic labels need single-species plots",
                    entry.frame_id
                )))
            }
        };
        let mask = generate_mask(&frame_ndvi(&m.load_frame(entry)?)?, &al)?;
        let path = a.io.out.join(format!("labels/{}.png", entry.frame_id));
        write_label_mask(&mask, &path)?;
        m.entries[i].mask = Some(path);
        labelled += 1;
    }
    m.save(a.io.out.join("manifest.json"))?;
    Ok(format!("autolabel: {labelled} training frames labelled"))
}

fn train_masks(m: &DatasetManifest) -> Result<Vec<LabelMask>> {
    m.entries_in(Split::Train)
        .map(|e| {
            m.load_mask(e)?
                .ok_or_else(|| Error::Manifest(format!("train frame {:?} has no mask", e.frame_id)))
        })
        .collect()
}

fn stats(a: &StatsArgs) -> Result<String> {
    let m = DatasetManifest::load(&a.manifest)?;
    let masks = train_masks(&m)?;
    let stats = accumulate_stats(&masks)?;
    let weights = compute_class_weights(&stats)?;
    let file = WeightsFile { stats, weights };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&file)? + "\n").map_err(|e| Error::io(&a.out, e))?;
    Ok(format!(
        "stats: {} frames, weights bg={:.4} crop={:.4} weed={:.4}",
        stats.image_count, weights.w[0], weights.w[1], weights.w[2]
    ))
}

fn train_cmd(a: &TrainArgs, cfg: &PipelineConfig, seed: u64) -> Result<String> {
    let m = DatasetManifest::load(&a.manifest)?;
    let mut net_cfg = cfg.network.clone();
    let mut tc = cfg.train.clone();
    if let Some(c) = a.channels {
        net_cfg.in_channels = c;
        net_cfg.input_mean.clear();
        net_cfg.input_std.clear();
    }
    if let Some(v) = a.iterations {
        tc.max_iterations = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.batch {
        tc.batch_size = v;
    }
    if let Some(v) = a.weight_decay {
        tc.weight_decay = v;
    }
    if let Some(v) = a.momentum {
        tc.momentum = v;
    }
    if let Some(v) = a.log_every {
        tc.log_every = v;
    }
    net_cfg.seed = seed;
    let masks = train_masks(&m)?;
    net_cfg.class_weights = if a.uniform_weights {
        ClassWeights::uniform()
    } else if let Some(p) = &a.weights {
        ClassWeights::load(p)?
    } else {
        compute_class_weights(&accumulate_stats(&masks)?)?
    };
    let samples = m
        .entries_in(Split::Train)
        .zip(masks)
        .map(|(e, mask)| Ok((m.load_frame(e)?, mask)))
        .collect::<Result<Vec<_>>>()?;
    let data = TrainingSet::new(&samples, net_cfg.in_channels)?;
    let outcome = train(&data, &net_cfg, &tc, derive_seed(seed, 1))?;
    checkpoint::save(&outcome.network, &a.out)?;
    if let Some(h) = &a.history {
        if let Some(dir) = h.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(h, serde_json::to_string_pretty(&outcome.history)? + "\n").map_err(|e| Error::io(h, e))?;
    }
    let last = outcome.history.last();
    Ok(format!(
        "train: {} iterations on {} frames, final loss {:.5}, class accuracy {:.4}",
        tc.max_iterations,
        data.len(),
        last.map_or(f64::NAN, |r| r.loss),
        last.map_or(f64::NAN, |r| r.class_accuracy)
    ))
}

fn infer_cmd(a: &InferArgs) -> Result<String> {
    let mut m = DatasetManifest::load(&a.io.manifest)?;
    let network = checkpoint::load(&a.model)?;
    let mut done = 0;
    for i in 0..m.entries.len() {
        if !a.split.admits(m.entries[i].split) {
            continue;
        }
        let frame = m.load_frame(&m.entries[i])?;
        let pm = infer(&frame, &network)?;
        let id = frame.frame_id();
        let pred_path = a.io.out.join(format!("predictions/{id}.png"));
        let prob_path = a.io.out.join(format!("probabilities/{id}.prob"));
        write_label_mask(&pm.argmax_labels(), &pred_path)?;
        write_probability_map(&pm, &prob_path)?;
        let e = &mut m.entries[i];
        e.prediction = Some(pred_path);
        e.probabilities = Some(prob_path);
        done += 1;
    }
    m.save(a.io.out.join("manifest.json"))?;
    Ok(format!("infer: {done} frames"))
}

fn eval_cmd(a: &EvalArgs) -> Result<String> {
    let m = DatasetManifest::load(&a.io.manifest)?;
    let mut outputs = Vec::new();
    let mut truths = Vec::new();
    for e in m.entries.iter().filter(|e| a.split.admits(e.split)) {
        let truth = m
            .load_mask(e)?
            .ok_or_else(|| Error::Manifest(format!("frame {:?} has no mask to score against", e.frame_id)))?;
        let output = match m.load_probabilities(e)? {
            Some(pm) => FrameOutput {
                prediction: match m.load_prediction(e)? {
                    Some(p) => p,
                    None => pm.argmax_labels(),
                },
                probabilities: Some(pm),
            },
            None => FrameOutput {
                prediction: m.load_prediction(e)?.ok_or_else(|| {
                    Error::Manifest(format!("frame {:?} has no prediction", e.frame_id))
                })?,
                probabilities: None,
            },
        };
        outputs.push(output);
        truths.push(truth);
    }
    let report = evaluate_dataset(&outputs, &truths)?;
    report.write(&a.io.out, &a.name)?;
    let f1 = report.scores.f1;
    Ok(format!(
        "eval: {} frames, f1 bg={:.4} crop={:.4} weed={:.4}",
        report.frames, f1[0], f1[1], f1[2]
    ))
}

fn render(a: &IoArgs) -> Result<String> {
    let m = DatasetManifest::load(&a.manifest)?;
    let mut written = 0;
    for e in &m.entries {
        let id = &e.frame_id;
        if let Some(mask) = m.load_mask(e)? {
            write_rgb_png(&render_mask(&mask), a.out.join(format!("{id}_mask.png")))?;
            written += 1;
        }
        if let Some(pred) = m.load_prediction(e)? {
            write_rgb_png(&render_mask(&pred), a.out.join(format!("{id}_pred.png")))?;
            written += 1;
        }
        if let Some(pm) = m.load_probabilities(e)? {
            write_rgb_png(&render_probability(&pm)?, a.out.join(format!("{id}_prob.png")))?;
            written += 1;
        }
    }
    Ok(format!("render: {written} images"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub in_channels: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn bench_rows(repeats: usize, size: usize, base: &NetworkConfig, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for c in 1..=3 {
        let mut cfg = base.clone().with_in_channels(c);
        cfg.input_mean.clear();
        cfg.input_std.clear();
        cfg.seed = derive_seed(seed, c as u64);
        let net = crate::net::Network::new(cfg)?;
        let x = Tensor::from_fn([1, c, size, size], |i| ((i * 2_654_435_761) % 1000) as f64 / 1000.0);
        net.predict(&x)?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(net.predict(&x)?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / repeats as f64;
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            in_channels: c,
            repeats,
            mean_ms: mean,
            median_ms: percentile(&times, 0.5),
            p95_ms: percentile(&times, 0.95),
        });
    }
    Ok(rows)
}

fn bench(a: &BenchArgs, cfg: &PipelineConfig, seed: u64) -> Result<String> {
    let rows = bench_rows(a.repeats, a.size, &cfg.network, seed)?;
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&rows)? + "\n").map_err(|e| Error::io(p, e))?;
    }
    let mut s = format!(
        "bench: {}x{} forward pass, {} repeats\nchannels  mean_ms  median_ms  p95_ms",
        a.size, a.size, a.repeats
    );
    for r in &rows {
        s += &format!("\n{:>8} {:>8.3} {:>10.3} {:>7.3}", r.in_channels, r.mean_ms, r.median_ms, r.p95_ms);
    }
    Ok(s)
}
