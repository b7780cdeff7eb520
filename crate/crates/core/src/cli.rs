//! Command-line front end of the `vvclip` binary.
//!
//! Exit codes: 0 success, 1 I/O or file-format failure, 2 usage or
//! configuration error, 3 numeric failure.
//!
//! Manifests are UTF-8 text with one tab-separated record per line:
//!
//! ```text
//! <image path>\t<mask path or ->\t<class>\t<label 0|1>
//! ```
//!
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image_io::{load_mask, preprocess_file, render_map, write_raw_map};
use crate::metrics::{self, MaskedMap, SweepMode};
use crate::pipeline::{localize, LocalizeOptions, Model};
use crate::prompts::{build_token_pair, PromptBank, TextTokenPair};
use crate::tokenizer::TokenizerSpec;
use crate::tta::{trace_csv, TtaConfig};
use crate::vision::EncodeMode;
use crate::weights::make_synthetic_model;

#[derive(Debug, Parser)]
#[command(name = "vvclip", version, about = "Zero-shot anomaly localization with CLIP-style models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized model archive.
    Synth(SynthArgs),
    /// Encode a prompt bank into a text-token archive.
    Prompts(PromptsArgs),
    /// Score one image and write its anomaly map.
    Localize(LocalizeArgs),
    /// Evaluate a manifest and write a metrics report.
    Eval(EvalArgs),
    /// Compare encode modes, value-path start layers and prompt tiers.
    Ablate(AblateArgs),
    /// Time the per-image pipeline.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model archive.
    #[arg(long)]
    pub model: PathBuf,
    /// Config JSON overriding the one stored in the archive.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        Model::load(&self.model, self.config.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `tiny` or `vit-b-16-plus`.
    #[arg(long, default_value = "tiny", conflicts_with = "config")]
    pub preset: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Class name; repeat or comma-separate for several classes, in which
    /// case `--out` is a directory receiving `<class>.vvt` files.
    #[arg(long = "class", required = true, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Prompt bank JSON. Defaults to the built-in bank of `--tier`.
    #[arg(long)]
    pub prompts_file: Option<PathBuf>,
    /// Built-in bank: `base`, `cs` or `default`.
    #[arg(long, default_value = "default")]
    pub tier: String,
    /// Tokenizer vocabulary (`token id` per line).
    #[arg(long)]
    pub vocab: PathBuf,
    /// Tokenizer merges (`left right` per line).
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// Readout of patch tokens: qkv, v_last, vv_last or vv_multi.
    #[arg(long, default_value = "vv_multi")]
    pub mode: EncodeMode,
    /// Enable test-time adaptation.
    #[arg(long)]
    pub tta: bool,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    /// Logit temperature; defaults to the model config's.
    #[arg(long)]
    pub tau: Option<f32>,
    /// Absolute noise std; defaults to 0.1 x RMS of the adapted tokens.
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian smoothing of the map in pixels; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    pub smooth: f32,
    /// Fold the highest patch score into the image score.
    #[arg(long)]
    pub fusion: bool,
}

impl RunArgs {
    fn options(&self, seed: u64) -> LocalizeOptions {
        LocalizeOptions {
            mode: self.mode,
            tau: self.tau,
            tta: self.tta.then(|| TtaConfig {
                epochs: self.epochs,
                learning_rate: self.lr,
                noise_sigma: self.sigma,
                seed,
                ..TtaConfig::default()
            }),
            smooth_sigma: self.smooth,
            fusion: self.fusion,
            map_size: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Token archive, or a directory of `<class>.vvt` archives.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Class used to pick an archive when `--tokens` is a directory.
    #[arg(long = "class")]
    pub class: Option<String>,
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// 16-bit PGM output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Raw little-endian f32 grid output.
    #[arg(long)]
    pub out_raw: Option<PathBuf>,
    /// CSV of adaptation losses (requires `--tta`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Subset of auroc, f1max, pro, aupr.
    #[arg(long, value_delimiter = ',', default_value = "auroc,f1max,pro,aupr")]
    pub metrics: Vec<String>,
    #[arg(long, default_value_t = 0.3)]
    pub fpr_limit: f64,
    /// Evaluate maps and masks at this square size instead of the
    /// original resolution.
    #[arg(long)]
    pub eval_size: Option<usize>,
    /// JSON report; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Token archive or directory used when no tiers are given.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Prompt tiers as `name=path` pairs, e.g. `base=t/base,cs=t/cs`.
    #[arg(long, value_delimiter = ',')]
    pub tiers: Vec<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "qkv,v_last,vv_last,vv_multi")]
    pub modes: Vec<EncodeMode>,
    /// Start layers for additional vv_multi rows.
    #[arg(long, value_delimiter = ',')]
    pub vv_start_sweep: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub fpr_limit: f64,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON table; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long = "class")]
    pub class: Option<String>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Prompts(a) => prompts(a),
        Command::Localize(a) => localize_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<i32> {
    let config = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => match a.preset.as_str() {
            "tiny" => ModelConfig::tiny(),
            "vit-b-16-plus" => ModelConfig::default(),
            other => return Err(Error::Config(format!("unknown preset `{other}` (tiny, vit-b-16-plus)"))),
        },
    };
    make_synthetic_model(&config, a.seed)?.save(&a.out)?;
    Ok(0)
}

fn prompts(a: PromptsArgs) -> Result<i32> {
    let model = a.model.load()?;
    let tokenizer = TokenizerSpec::from_files(&a.vocab, &a.merges, model.config.context_length)?;
    if tokenizer.vocab_size() > model.config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens, model vocabulary only {}",
            tokenizer.vocab_size(),
            model.config.vocab_size
        )));
    }
    let bank_text = match &a.prompts_file {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let several = a.classes.len() > 1;
    if several {
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    }
    for class in &a.classes {
        let bank = match &bank_text {
            Some(text) => PromptBank::from_json(text, class)?,
            None => PromptBank::builtin(&a.tier, class)?,
        };
        let pair = build_token_pair(&bank, &tokenizer, &model.store, &model.config)?;
        let mut store = pair.to_store();
        store.set_metadata("class", class.clone());
        let path = if several { a.out.join(format!("{class}.vvt")) } else { a.out.clone() };
        store.save(&path)?;
    }
    Ok(0)
}

/// Token pairs resolved per class, loaded lazily.
struct TokenSource {
    path: PathBuf,
    cache: BTreeMap<String, TextTokenPair>,
}

impl TokenSource {
    fn new(path: PathBuf) -> Self {
        TokenSource {
            path,
            cache: BTreeMap::new(),
        }
    }

    fn get(&mut self, class: Option<&str>) -> Result<&TextTokenPair> {
        let key = if self.path.is_dir() {
            class
                .ok_or_else(|| Error::Config(format!("{} is a directory; pass --class", self.path.display())))?
                .to_string()
        } else {
            String::new()
        };
        if !self.cache.contains_key(&key) {
            let file = if key.is_empty() {
                self.path.clone()
            } else {
                self.path.join(format!("{key}.vvt"))
            };
            self.cache.insert(key.clone(), TextTokenPair::load(&file)?);
        }
        Ok(&self.cache[&key])
    }
}

fn localize_cmd(a: LocalizeArgs) -> Result<i32> {
    if a.trace.is_some() && !a.run.tta {
        return Err(Error::Config("--trace requires --tta".into()));
    }
    let model = a.model.load()?;
    let mut tokens = TokenSource::new(a.tokens.clone());
    let pair = tokens.get(a.class.as_deref())?;
    let image = preprocess_file(&a.image, &model.config)?;
    let loc = localize(&model, &image, pair, &a.run.options(a.run.seed))?;
    if let Some(p) = &a.out {
        render_map(&loc.map, p)?;
    }
    if let Some(p) = &a.out_raw {
        write_raw_map(&loc.map, p)?;
    }
    if let (Some(p), Some(trace)) = (&a.trace, &loc.trace) {
        write(p, trace_csv(trace))?;
    }
    println!("{}", loc.image_score);
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub class: String,
    pub label: bool,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| Error::Config(format!("{}:{}: {why}", path.display(), n + 1));
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let label = match f[3].trim() {
            "0" => false,
            "1" => true,
            _ => return Err(bad("label must be 0 or 1")),
        };
        let mask = (f[1] != "-").then(|| base.join(f[1]));
        if label != mask.is_some() {
            return Err(bad("label 1 requires a mask and label 0 takes `-`"));
        }
        out.push(ManifestEntry {
            image: base.join(f[0]),
            mask,
            class: f[2].to_string(),
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} lists no images", path.display())));
    }
    Ok(out)
}

/// Nearest-neighbour resize of a binary mask with half-pixel centers.
fn resize_mask(mask: &[bool], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<bool> {
    let pick = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, h, out_h);
        for x in 0..out_w {
            out.push(mask[sy * w + pick(x, w, out_w)]);
        }
    }
    out
}

struct ImageResult {
    image_score: f32,
    map: Vec<f32>,
    mask: Vec<bool>,
    height: usize,
    width: usize,
}

#[derive(Clone, Debug)]
struct EvalSetup {
    opts: LocalizeOptions,
    run: RunArgs,
    eval_size: Option<usize>,
    fpr_limit: f64,
}

fn evaluate_entry(
    model: &Model,
    pair: &TextTokenPair,
    entry: &ManifestEntry,
    index: usize,
    setup: &EvalSetup,
) -> Result<ImageResult> {
    let image = preprocess_file(&entry.image, &model.config)?;
    let mut opts = setup.opts.clone();
    if let Some(cfg) = &mut opts.tta {
        cfg.seed = setup.run.seed.wrapping_add(index as u64);
    }
    let (oh, ow) = (image.original_height, image.original_width);
    let (h, w) = setup.eval_size.map_or((oh, ow), |s| (s, s));
    opts.map_size = Some((h, w));
    let loc = localize(model, &image, pair, &opts)?;
    let mask = match &entry.mask {
        None => vec![false; h * w],
        Some(p) => {
            let (mh, mw, m) = load_mask(p)?;
            if (mh, mw) != (oh, ow) {
                return Err(Error::Input(format!(
                    "mask {} is {mh}x{mw}, image is {oh}x{ow}",
                    p.display()
                )));
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::Input(format!("mask {} of an anomalous image is empty", p.display())));
            }
            if (h, w) == (oh, ow) {
                m
            } else {
                resize_mask(&m, oh, ow, h, w)
            }
        }
    };
    Ok(ImageResult {
        image_score: loc.image_score,
        map: loc.map.scores.into_data(),
        mask,
        height: h,
        width: w,
    })
}

#[derive(Debug, Serialize)]
struct ClassReport {
    class: String,
    images: usize,
    pixel: BTreeMap<String, Option<f64>>,
    image: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Serialize)]
struct Failure {
    index: usize,
    image: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    mode: EncodeMode,
    tta: bool,
    seed: u64,
    fpr_limit: f64,
    f1_sweep: SweepMode,
    classes: Vec<ClassReport>,
    mean: ClassMeans,
    failures: Vec<Failure>,
}

#[derive(Debug, Serialize)]
struct ClassMeans {
    pixel: BTreeMap<String, Option<f64>>,
    image: BTreeMap<String, Option<f64>>,
}

const PIXEL_METRICS: [&str; 3] = ["auroc", "f1max", "pro"];
const IMAGE_METRICS: [&str; 3] = ["auroc", "f1max", "aupr"];

fn check_metrics(names: &[String]) -> Result<()> {
    for n in names {
        if !["auroc", "f1max", "pro", "aupr"].contains(&n.as_str()) {
            return Err(Error::Config(format!("unknown metric `{n}` (auroc, f1max, pro, aupr)")));
        }
    }
    Ok(())
}

/// Metric name to value; null where the metric is undefined.
type MetricMap = BTreeMap<String, Option<f64>>;

fn class_metrics(results: &[&ImageResult], selected: &[String], fpr_limit: f64) -> (MetricMap, MetricMap, SweepMode) {
    let wanted = |m: &str| selected.iter().any(|s| s == m);
    let mut pixel = BTreeMap::new();
    let mut image = BTreeMap::new();
    let mut sweep = SweepMode::Exact;
    let scores: Vec<f32> = results.iter().flat_map(|r| r.map.iter().copied()).collect();
    let labels: Vec<bool> = results.iter().flat_map(|r| r.mask.iter().copied()).collect();
    for m in PIXEL_METRICS.iter().filter(|m| wanted(m)) {
        let v = match *m {
            "auroc" => metrics::auroc(&scores, &labels),
            "f1max" => {
                let (v, mode) = metrics::f1max_with_mode(&scores, &labels);
                sweep = mode;
                v
            }
            _ => {
                let maps: Vec<MaskedMap> = results
                    .iter()
                    .map(|r| MaskedMap {
                        scores: &r.map,
                        mask: &r.mask,
                        height: r.height,
                        width: r.width,
                    })
                    .collect();
                metrics::pro_multi(&maps, fpr_limit)
            }
        };
        pixel.insert(m.to_string(), v);
    }
    let s: Vec<f32> = results.iter().map(|r| r.image_score).collect();
    let l: Vec<bool> = results.iter().map(|r| r.mask.iter().any(|&v| v)).collect();
    for m in IMAGE_METRICS.iter().filter(|m| wanted(m)) {
        let v = match *m {
            "auroc" => metrics::auroc(&s, &l),
            "f1max" => metrics::f1max(&s, &l),
            _ => metrics::aupr(&s, &l),
        };
        image.insert(m.to_string(), v);
    }
    (pixel, image, sweep)
}

/// Mean over classes where the metric is defined; null if none is.
fn mean_of(classes: &[ClassReport], pick: impl Fn(&ClassReport) -> &BTreeMap<String, Option<f64>>) -> BTreeMap<String, Option<f64>> {
    let mut out = BTreeMap::new();
    if let Some(first) = classes.first() {
        for key in pick(first).keys() {
            let vals: Vec<f64> = classes.iter().filter_map(|c| pick(c)[key]).collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            out.insert(key.clone(), mean);
        }
    }
    out
}

struct EvalOutcome {
    report: EvalReport,
    failed_error: Option<Error>,
}

fn evaluate(model: &Model, tokens: &Path, entries: &[ManifestEntry], setup: &EvalSetup, selected: &[String]) -> Result<EvalOutcome> {
    let mut source = TokenSource::new(tokens.to_path_buf());
    let mut classes: Vec<String> = entries.iter().map(|e| e.class.clone()).collect();
    classes.sort();
    classes.dedup();
    let mut pairs = BTreeMap::new();
    for c in &classes {
        pairs.insert(c.clone(), source.get(Some(c))?.clone());
    }
    let results: Vec<Result<ImageResult>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| evaluate_entry(model, &pairs[&e.class], e, i, setup))
        .collect();

    let mut failures = Vec::new();
    let mut first_error = None;
    for (i, r) in results.iter().enumerate() {
        if let Err(e) = r {
            eprintln!("warning: {}: {e}", entries[i].image.display());
            failures.push(Failure {
                index: i,
                image: entries[i].image.display().to_string(),
                error: e.to_string(),
            });
        }
    }
    let mut sweep = SweepMode::Exact;
    let mut reports = Vec::new();
    for c in &classes {
        let ok: Vec<&ImageResult> = entries
            .iter()
            .zip(&results)
            .filter(|(e, _)| &e.class == c)
            .filter_map(|(_, r)| r.as_ref().ok())
            .collect();
        let (pixel, image, s) = class_metrics(&ok, selected, setup.fpr_limit);
        if s == SweepMode::Quantile {
            sweep = s;
        }
        reports.push(ClassReport {
            class: c.clone(),
            images: ok.len(),
            pixel,
            image,
        });
    }
    // More than 1% failed images fails the run.
    if failures.len() * 100 > entries.len() {
        let idx = failures[0].index;
        first_error = results.into_iter().nth(idx).and_then(|r| r.err());
    }
    let mean = ClassMeans {
        pixel: mean_of(&reports, |c| &c.pixel),
        image: mean_of(&reports, |c| &c.image),
    };
    Ok(EvalOutcome {
        report: EvalReport {
            mode: setup.opts.mode,
            tta: setup.run.tta,
            seed: setup.run.seed,
            fpr_limit: setup.fpr_limit,
            f1_sweep: sweep,
            classes: reports,
            mean,
            failures,
        },
        failed_error: first_error,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| x.to_string())
}

fn eval_csv(r: &EvalReport) -> String {
    let mut cols: Vec<String> = Vec::new();
    if let Some(c) = r.classes.first() {
        cols.extend(c.pixel.keys().map(|k| format!("pixel_{k}")));
        cols.extend(c.image.keys().map(|k| format!("image_{k}")));
    }
    let mut s = format!("class,images,{}\n", cols.join(","));
    let row = |name: &str, n: String, p: &BTreeMap<String, Option<f64>>, i: &BTreeMap<String, Option<f64>>| {
        let vals: Vec<String> = p.values().chain(i.values()).map(|v| fmt_opt(*v)).collect();
        format!("{name},{n},{}\n", vals.join(","))
    };
    for c in &r.classes {
        s.push_str(&row(&c.class, c.images.to_string(), &c.pixel, &c.image));
    }
    s.push_str(&row("mean", String::new(), &r.mean.pixel, &r.mean.image));
    s
}

fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    check_metrics(&a.metrics)?;
    if !(a.fpr_limit > 0.0 && a.fpr_limit <= 1.0) {
        return Err(Error::Config("--fpr-limit must lie in (0, 1]".into()));
    }
    let model = a.model.load()?;
    let entries = read_manifest(&a.manifest)?;
    let setup = EvalSetup {
        opts: a.run.options(a.run.seed),
        run: a.run.clone(),
        eval_size: a.eval_size,
        fpr_limit: a.fpr_limit,
    };
    let outcome = evaluate(&model, &a.tokens, &entries, &setup, &a.metrics)?;
    let json = serde_json::to_string_pretty(&outcome.report)?;
    write(&a.out, json + "\n")?;
    write(&csv_path(&a.out), eval_csv(&outcome.report))?;
    match outcome.failed_error {
        Some(e) => {
            eprintln!("error: {} of {} images failed", outcome.report.failures.len(), entries.len());
            Ok(e.exit_code())
        }
        None => Ok(0),
    }
}

#[derive(Debug, Serialize)]
struct AblationRow {
    label: String,
    tier: String,
    mode: EncodeMode,
    vv_start_layer: Option<usize>,
    pixel_auroc: Option<f64>,
    pixel_f1max: Option<f64>,
    pixel_pro: Option<f64>,
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let base = a.model.load()?;
    let entries = read_manifest(&a.manifest)?;
    let mut tiers: Vec<(String, PathBuf)> = Vec::new();
    for t in &a.tiers {
        let (name, path) = t
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("tier `{t}` is not name=path")))?;
        tiers.push((name.to_string(), PathBuf::from(path)));
    }
    if tiers.is_empty() {
        let tokens = a
            .tokens
            .clone()
            .ok_or_else(|| Error::Config("pass --tokens or --tiers".into()))?;
        tiers.push(("default".to_string(), tokens));
    }
    let mut configs: Vec<(EncodeMode, Option<usize>)> = a.modes.iter().map(|&m| (m, None)).collect();
    for &s in &a.vv_start_sweep {
        if s >= base.config.vision_layers {
            return Err(Error::Config(format!(
                "vv start layer {s} outside 0..{}",
                base.config.vision_layers
            )));
        }
        configs.push((EncodeMode::VvMulti, Some(s)));
    }
    let selected: Vec<String> = PIXEL_METRICS.iter().map(|s| s.to_string()).collect();
    let run = RunArgs {
        mode: EncodeMode::VvMulti,
        tta: false,
        epochs: 0,
        lr: 1e-3,
        tau: None,
        sigma: None,
        seed: a.seed,
        smooth: 0.0,
        fusion: false,
    };
    let mut rows = Vec::new();
    let mut code = 0;
    for (tier, path) in &tiers {
        for &(mode, start) in &configs {
            let model = match start {
                Some(s) => Model {
                    config: ModelConfig {
                        vv_start_layer: s,
                        ..base.config.clone()
                    },
                    store: base.store.clone(),
                },
                None => base.clone(),
            };
            let setup = EvalSetup {
                opts: LocalizeOptions {
                    mode,
                    ..run.options(a.seed)
                },
                run: run.clone(),
                eval_size: a.eval_size,
                fpr_limit: a.fpr_limit,
            };
            let out = evaluate(&model, path, &entries, &setup, &selected)?;
            if let Some(e) = out.failed_error {
                code = code.max(e.exit_code());
            }
            let label = match start {
                Some(s) => format!("{tier}/{mode}@{s}"),
                None => format!("{tier}/{mode}"),
            };
            let p = &out.report.mean.pixel;
            rows.push(AblationRow {
                label,
                tier: tier.clone(),
                mode,
                vv_start_layer: if mode == EncodeMode::VvMulti {
                    Some(model.config.vv_start_layer)
                } else {
                    None
                },
                pixel_auroc: p["auroc"],
                pixel_f1max: p["f1max"],
                pixel_pro: p["pro"],
            });
        }
    }
    let mut csv = String::from("label,tier,mode,vv_start_layer,pixel_auroc,pixel_f1max,pixel_pro\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.tier,
            r.mode,
            r.vv_start_layer.map_or(String::new(), |s| s.to_string()),
            fmt_opt(r.pixel_auroc),
            fmt_opt(r.pixel_f1max),
            fmt_opt(r.pixel_pro)
        ));
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&json!({ "rows": rows }))? + "\n")?;
        write(&csv_path(out), &csv)?;
    }
    Ok(code)
}

fn timing(samples: &[f64]) -> Value {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    json!({ "mean_ms": mean, "std_ms": var.sqrt() })
}

fn bench(a: BenchArgs) -> Result<i32> {
    if a.iters == 0 {
        return Err(Error::Config("--iters must be at least 1".into()));
    }
    let model = a.model.load()?;
    let mut tokens = TokenSource::new(a.tokens.clone());
    let pair = tokens.get(a.class.as_deref())?.clone();
    let image = preprocess_file(&a.image, &model.config)?;
    let time = |opts: &LocalizeOptions| -> Result<Vec<f64>> {
        for _ in 0..a.warmup {
            localize(&model, &image, &pair, opts)?;
        }
        (0..a.iters)
            .map(|_| {
                let t = Instant::now();
                localize(&model, &image, &pair, opts)?;
                Ok(t.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    };
    let tfa_opts = RunArgs { tta: false, ..a.run.clone() }.options(a.run.seed);
    let tfa = timing(&time(&tfa_opts)?);
    let mut report = json!({
        "mode": a.run.mode,
        "iters": a.iters,
        "mean_ms": tfa["mean_ms"],
        "std_ms": tfa["std_ms"],
        "tta": Value::Null,
    });
    if a.run.tta {
        let mut t = timing(&time(&a.run.options(a.run.seed))?);
        t["epochs"] = json!(a.run.epochs);
        report["tta"] = t;
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        write(out, &text)?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "# header\na.png\t-\tbottle\t0\n\nsub/b.png\tsub/b_mask.png\tbottle\t1\n").unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].mask.as_deref(), Some(dir.path().join("sub/b_mask.png").as_path()));
        assert!(m[1].label && !m[0].label);
        fs::write(&p, "a.png\t-\tbottle\t1\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Config(_))));
        fs::write(&p, "a.png\t-\tbottle\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Config(_))));
    }

    #[test]
    fn mask_resize_nearest() {
        let m = [true, false, false, true];
        assert_eq!(resize_mask(&m, 2, 2, 4, 4).iter().filter(|&&v| v).count(), 8);
        assert_eq!(resize_mask(&m, 2, 2, 2, 2), m.to_vec());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
