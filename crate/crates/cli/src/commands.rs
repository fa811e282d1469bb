use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use morphscope::features::{load_features, save_features, FeatureSet};
use morphscope::metrics::{cell_metrics, det_curve, labeled_scores, read_scores_csv, write_scores_csv, Label, ScoreRecord};
use morphscope::pipeline::{extract_manifest, FeatureCache};
use morphscope::protocol::{
    aggregate_stats, emit_report, load_manifest, run_grid, DatasetManifest, FeatureSource, GridConfig, GridReport,
    ManifestRecord, MorphAlgorithm, Processing, ReportFormat, Split, StatsMode, StdConvention,
};
use morphscope::svm::{load_model, save_model, train, TrainingSet};
use morphscope::tensor::Matrix;
use morphscope::tsne::{layout_points, read_layout_csv, tsne_embed, write_layout_csv, LayoutPoint};
use morphscope::viz::{emit_svg, series_csv, PlotData, PlotStyle};
use morphscope::vit::Encoder;
use morphscope::weights::{load_weights, save_weights, validate_schema, PositionalMode, ViTConfig, WeightBundle};
use morphscope::{Error, Result};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::config::{pick, write_metadata, EncoderFlags, PreprocessFlags, RunConfig, SvmFlags, TsneFlags};
use crate::{Cli, Command};

const DEFAULT_SEED: u64 = 42;

/// Parses enum flags through their serde names, e.g. `MIPGAN-I`.
fn serde_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

impl SplitChoice {
    fn accepts(self, split: Split) -> bool {
        match self {
            SplitChoice::All => true,
            SplitChoice::Train => split == Split::Train,
            SplitChoice::Test => split == Split::Test,
        }
    }
}

/// Which manifest records a command works on.
#[derive(Debug, Clone, Args)]
pub struct RecordFilter {
    /// Keep only this morphing algorithm's morphs (bona fide images are kept).
    #[arg(long, value_parser = serde_name::<MorphAlgorithm>)]
    pub algorithm: Option<MorphAlgorithm>,
    /// Keep only this processing type.
    #[arg(long, value_parser = serde_name::<Processing>)]
    pub processing: Option<Processing>,
    /// Seed of the split assignment for records without an explicit split.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

impl RecordFilter {
    fn select<'m>(&self, manifest: &'m DatasetManifest, split: SplitChoice, cfg: &RunConfig) -> Vec<&'m ManifestRecord> {
        let splits = manifest.resolved_splits(pick(self.split_seed, cfg.split_seed, DEFAULT_SEED));
        manifest
            .records
            .iter()
            .zip(splits)
            .filter(|(r, s)| {
                split.accepts(*s)
                    && self.processing.is_none_or(|p| r.processing == p)
                    && (r.label == Label::Bona || self.algorithm.is_none_or(|a| r.morph_algorithm == a))
            })
            .map(|(r, _)| r)
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Weights file (MSW1).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// JSON-lines dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature cache file to write (MSF1).
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder threads; output does not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Ignore MORPHSCOPE_CACHE.
    #[arg(long)]
    pub no_cache: bool,
    #[command(flatten)]
    pub preprocess: PreprocessFlags,
    #[command(flatten)]
    pub encoder: EncoderFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Feature cache file (MSF1).
    #[arg(long)]
    pub features: PathBuf,
    /// JSON-lines dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model file to write (MSM1).
    #[arg(long)]
    pub out: PathBuf,
    /// Records to train on.
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitChoice,
    #[command(flatten)]
    pub filter: RecordFilter,
    #[command(flatten)]
    pub svm: SvmFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model file (MSM1).
    #[arg(long)]
    pub model: PathBuf,
    /// Feature cache file (MSF1).
    #[arg(long)]
    pub features: PathBuf,
    /// JSON-lines dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score CSV to write (image_id,label,score).
    #[arg(long)]
    pub scores_out: PathBuf,
    /// Metrics JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// DET curve CSV to write.
    #[arg(long)]
    pub det_out: Option<PathBuf>,
    /// Records to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    #[command(flatten)]
    pub filter: RecordFilter,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Feature cache file (MSF1).
    #[arg(long)]
    pub features: PathBuf,
    /// JSON-lines dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Grid JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a formatted report (csv, json or markdown).
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Report format: csv, json or markdown.
    #[arg(long, default_value = "markdown")]
    pub report_format: ReportFormat,
    /// Standard deviation convention for the report: population or sample.
    #[arg(long)]
    pub std: Option<StdConvention>,
    /// Training threads; output does not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seed of the split assignment for records without an explicit split.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub svm: SvmFlags,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Grid JSON written by `grid`.
    #[arg(long)]
    pub grid: PathBuf,
    /// Cells to pool: all, inter or intra.
    #[arg(long)]
    pub mode: Option<StatsMode>,
    /// Standard deviation convention: population or sample.
    #[arg(long)]
    pub std: Option<StdConvention>,
    /// Summary JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    /// Feature cache file (MSF1).
    #[arg(long)]
    pub features: PathBuf,
    /// Manifest used to group points by morphing algorithm.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Layout CSV to write (image_id,x,y,group).
    #[arg(long)]
    pub out: PathBuf,
    /// Records to embed when a manifest is given.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitChoice,
    #[command(flatten)]
    pub filter: RecordFilter,
    #[command(flatten)]
    pub tsne: TsneFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Det,
    Boxplot,
    Scatter,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Plot type.
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Score CSVs (det), grid JSONs (boxplot) or layout CSVs (scatter).
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// SVG file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of every plotted series.
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
    /// Title drawn above the plot.
    #[arg(long, default_value = "")]
    pub title: String,
    /// Boxplot cells to pool: all, inter or intra.
    #[arg(long)]
    pub mode: Option<StatsMode>,
    /// SVG width in pixels.
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    /// SVG height in pixels.
    #[arg(long, default_value_t = 480)]
    pub height: u32,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Weights file (MSW1); defaults to the config "weights" entry.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderFlags,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Weights file to write (MSW1).
    #[arg(long)]
    pub out: PathBuf,
    /// Input image side in pixels.
    #[arg(long, default_value_t = 384)]
    pub image_side: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 32)]
    pub patch_side: usize,
    /// Token width.
    #[arg(long, default_value_t = 1024)]
    pub hidden_dim: usize,
    /// Number of encoder blocks.
    #[arg(long, default_value_t = 24)]
    pub depth: usize,
    /// Attention heads per block.
    #[arg(long, default_value_t = 16)]
    pub heads: usize,
    /// MLP hidden width.
    #[arg(long, default_value_t = 4096)]
    pub mlp_dim: usize,
    #[command(flatten)]
    pub encoder: EncoderFlags,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.out_dir.is_some() {
        cfg.out_dir = cli.out_dir.clone();
    }
    let seed = pick(cli.seed, cfg.seed, DEFAULT_SEED);
    match cli.command {
        Command::Extract(a) => extract(a, &cfg),
        Command::Train(a) => train_cmd(a, &cfg, seed),
        Command::Eval(a) => eval(a, &cfg),
        Command::Grid(a) => grid(a, &cfg, seed),
        Command::Stats(a) => stats(a, &cfg),
        Command::Tsne(a) => tsne(a, &cfg, seed),
        Command::Plot(a) => plot(a, &cfg),
        Command::ValidateWeights(a) => validate(a, &cfg),
        Command::InitWeights(a) => init(a, &cfg, seed),
    }
}

fn weights_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.weights.clone())
        .ok_or_else(|| Error::Argument("no weights file given (--weights or config \"weights\")".into()))
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Argument(format!("{} does not exist", path.display())))
    }
}

fn extract(a: ExtractArgs, cfg: &RunConfig) -> Result<()> {
    let weights = weights_path(&a.weights, cfg)?;
    let manifest = load_manifest(existing(&a.manifest)?)?;
    let bundle = load_weights(existing(&weights)?)?;
    let mut vit = bundle.config.clone();
    a.encoder.apply(cfg, &mut vit);
    let encoder = Encoder::new(&bundle, &vit)?;
    let preprocess = a.preprocess.resolve(cfg, vit.image_side);
    let cache = if a.no_cache { None } else { FeatureCache::from_env()? };
    let workers = pick(a.workers, cfg.workers, 1);
    let (set, stats) = extract_manifest(&manifest, &encoder, &preprocess, workers, cache.as_ref())?;
    let out = cfg.output(&a.out)?;
    save_features(&set, &out)?;
    println!(
        "wrote {} feature vectors of dim {} to {} ({} encoded, {} from cache)",
        set.len(),
        set.dim(),
        out.display(),
        stats.encoded,
        stats.cached
    );
    let settings = json!({
        "weights": weights,
        "manifest": a.manifest,
        "encoder": vit,
        "preprocess": preprocess,
    });
    write_metadata("extract", None, &settings, Some(&out))
}

fn features_matrix(set: &FeatureSet, records: &[&ManifestRecord]) -> Result<Matrix> {
    let rows: Vec<&[f32]> = records.iter().map(|r| set.feature(r)).collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

fn train_cmd(a: TrainArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let manifest = load_manifest(existing(&a.manifest)?)?;
    let set = load_features(existing(&a.features)?)?;
    let records = a.filter.select(&manifest, a.split, cfg);
    if records.is_empty() {
        return Err(Error::Data("no manifest records match the filter".into()));
    }
    let y = records.iter().map(|r| r.label.sign()).collect();
    let data = TrainingSet::new(features_matrix(&set, &records)?, y)?;
    let params = a.svm.resolve(cfg, seed);
    let model = train(&data, &params)?;
    let out = cfg.output(&a.out)?;
    save_model(&model, &out)?;
    if !model.converged {
        eprintln!("warning: solver stopped after {} sweeps without converging", model.iterations);
    }
    println!("trained on {} records in {} sweeps; model written to {}", data.len(), model.iterations, out.display());
    let settings = json!({
        "features": a.features,
        "manifest": a.manifest,
        "split": format!("{:?}", a.split).to_lowercase(),
        "algorithm": a.filter.algorithm,
        "processing": a.filter.processing,
        "split_seed": pick(a.filter.split_seed, cfg.split_seed, DEFAULT_SEED),
        "svm": params,
    });
    write_metadata("train", Some(seed), &settings, Some(&out))
}

fn eval(a: EvalArgs, cfg: &RunConfig) -> Result<()> {
    let model = load_model(existing(&a.model)?)?;
    let manifest = load_manifest(existing(&a.manifest)?)?;
    let set = load_features(existing(&a.features)?)?;
    let records = a.filter.select(&manifest, a.split, cfg);
    let mut scores = Vec::with_capacity(records.len());
    for r in &records {
        scores.push(ScoreRecord { image_id: r.path.clone(), label: r.label, score: model.score(set.feature(r)?)? });
    }
    let scores_out = cfg.output(&a.scores_out)?;
    write_scores_csv(&scores, BufWriter::new(File::create(&scores_out)?))?;
    let labeled = labeled_scores(&scores);
    let m = cell_metrics(&labeled)?;
    println!(
        "D-EER {:.2}%  BPCER@MACER=5% {:.2}%  BPCER@MACER=10% {:.2}%  ({} bona fide, {} morphs)",
        m.d_eer,
        m.bpcer_at_5,
        m.bpcer_at_10,
        labeled.bona.len(),
        labeled.morph.len()
    );
    if let Some(p) = &a.out {
        let body = json!({"metrics": m, "n_bona": labeled.bona.len(), "n_morph": labeled.morph.len()});
        fs::write(cfg.output(p)?, serde_json::to_string_pretty(&body)? + "\n")?;
    }
    if let Some(p) = &a.det_out {
        det_curve(&labeled)?.write_csv(&mut BufWriter::new(File::create(cfg.output(p)?)?))?;
    }
    let settings = json!({
        "model": a.model,
        "features": a.features,
        "manifest": a.manifest,
        "split": format!("{:?}", a.split).to_lowercase(),
        "algorithm": a.filter.algorithm,
        "processing": a.filter.processing,
        "split_seed": pick(a.filter.split_seed, cfg.split_seed, DEFAULT_SEED),
    });
    write_metadata("eval", None, &settings, Some(&scores_out))
}

fn grid(a: GridArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let manifest = load_manifest(existing(&a.manifest)?)?;
    let set = load_features(existing(&a.features)?)?;
    let config = GridConfig {
        svm: a.svm.resolve(cfg, seed),
        split_seed: pick(a.split_seed, cfg.split_seed, DEFAULT_SEED),
        workers: pick(a.workers, cfg.workers, 1),
    };
    let report = run_grid(&manifest, &set, &config)?;
    let out = cfg.output(&a.out)?;
    fs::write(&out, report.to_json()?)?;
    println!(
        "{} algorithms x {} processing types: {} cells written to {}",
        report.algorithms.len(),
        report.grids.len(),
        report.cell_count(),
        out.display()
    );
    if let Some(p) = &a.report_out {
        let conv = pick(a.std, cfg.std_convention, StdConvention::Population);
        let mut stats = Vec::new();
        for mode in [StatsMode::All, StatsMode::Inter, StatsMode::Intra] {
            // A single-algorithm grid has no inter cells.
            if let Ok(s) = aggregate_stats(&report, mode, conv) {
                stats.push(s);
            }
        }
        fs::write(cfg.output(p)?, emit_report(&report, &stats, a.report_format)?)?;
    }
    let settings = json!({
        "features": a.features,
        "manifest": a.manifest,
        "svm": config.svm,
        "split_seed": config.split_seed,
    });
    write_metadata("grid", Some(seed), &settings, Some(&out))
}

fn stats(a: StatsArgs, cfg: &RunConfig) -> Result<()> {
    let text = fs::read_to_string(existing(&a.grid)?)?;
    let report = GridReport::from_json(&text)?;
    let mode = pick(a.mode, cfg.stats_mode, StatsMode::All);
    let conv = pick(a.std, cfg.std_convention, StdConvention::Population);
    let summary = aggregate_stats(&report, mode, conv)?;
    for p in &summary.per_processing {
        println!("{}: mean={:.2} std={:.2} n={}", p.processing, p.mean, p.std, p.count);
    }
    let out = match &a.out {
        Some(p) => {
            let out = cfg.output(p)?;
            fs::write(&out, serde_json::to_string_pretty(&summary)? + "\n")?;
            Some(out)
        }
        None => None,
    };
    let settings = json!({"grid": a.grid, "mode": mode, "std": conv});
    write_metadata("stats", None, &settings, out.as_deref())
}

fn tsne(a: TsneArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let set = load_features(existing(&a.features)?)?;
    let (ids, groups): (Vec<String>, Vec<String>) = match &a.manifest {
        Some(m) => {
            let manifest = load_manifest(existing(m)?)?;
            a.filter
                .select(&manifest, a.split, cfg)
                .into_iter()
                .map(|r| {
                    let g = match r.label {
                        Label::Bona => "bona fide".to_string(),
                        Label::Morph => r.morph_algorithm.to_string(),
                    };
                    (r.path.clone(), g)
                })
                .unzip()
        }
        None => set.records().iter().map(|r| (r.id.clone(), "unlabeled".to_string())).unzip(),
    };
    let rows: Vec<&[f32]> = ids
        .iter()
        .map(|id| set.get(id).map(|f| f.values.as_slice()).ok_or_else(|| Error::Data(format!("no features for {id}"))))
        .collect::<Result<_>>()?;
    let x = Matrix::from_rows(&rows)?;
    let params = a.tsne.resolve(cfg, seed);
    let result = tsne_embed(&x, &params)?;
    let points = layout_points(&result, &ids, &groups)?;
    let out = cfg.output(&a.out)?;
    write_layout_csv(&points, BufWriter::new(File::create(&out)?))?;
    println!("embedded {} points (final KL {:.4}) into {}", points.len(), result.final_kl(), out.display());
    let settings = json!({"features": a.features, "manifest": a.manifest, "tsne": params});
    write_metadata("tsne", Some(seed), &settings, Some(&out))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn plot(a: PlotArgs, cfg: &RunConfig) -> Result<()> {
    let mode = pick(a.mode, cfg.stats_mode, StatsMode::All);
    let data = match a.kind {
        PlotKind::Det => {
            let mut curves = Vec::new();
            for p in &a.input {
                let scores = read_scores_csv(File::open(existing(p)?)?)?;
                curves.push((stem(p), det_curve(&labeled_scores(&scores))?));
            }
            PlotData::Det(curves)
        }
        PlotKind::Boxplot => {
            let mut groups = Vec::new();
            for p in &a.input {
                let report = GridReport::from_json(&fs::read_to_string(existing(p)?)?)?;
                for g in &report.grids {
                    let values: Vec<f64> = g
                        .cells
                        .iter()
                        .filter(|c| match mode {
                            StatsMode::All => true,
                            StatsMode::Inter => !c.is_intra(),
                            StatsMode::Intra => c.is_intra(),
                        })
                        .map(|c| c.d_eer)
                        .collect();
                    let name = if a.input.len() > 1 { format!("{} {}", stem(p), g.processing) } else { g.processing.to_string() };
                    groups.push((name, values));
                }
            }
            PlotData::Boxplot(groups)
        }
        PlotKind::Scatter => {
            let mut points: Vec<LayoutPoint> = Vec::new();
            for p in &a.input {
                points.extend(read_layout_csv(File::open(existing(p)?)?)?);
            }
            PlotData::Scatter(points)
        }
    };
    let style = PlotStyle { width: a.width, height: a.height, title: a.title.clone() };
    let svg = emit_svg(&data, &style)?;
    let out = cfg.output(&a.out)?;
    fs::write(&out, svg)?;
    if let Some(p) = &a.csv_out {
        fs::write(cfg.output(p)?, series_csv(&data)?)?;
    }
    println!("wrote {} plot to {}", data.kind(), out.display());
    let settings = json!({"kind": data.kind(), "inputs": a.input, "mode": mode, "style": style});
    write_metadata("plot", None, &settings, Some(&out))
}

fn validate(a: ValidateArgs, cfg: &RunConfig) -> Result<()> {
    let weights = weights_path(&a.weights, cfg)?;
    let bundle = load_weights(existing(&weights)?)?;
    let mut vit = bundle.config.clone();
    a.encoder.apply(cfg, &mut vit);
    vit.validate()?;
    let report = validate_schema(&bundle, &vit);
    for v in &report.violations {
        println!("{v}");
    }
    let blocking: Vec<String> = report.blocking().map(ToString::to_string).collect();
    let settings = json!({"weights": weights, "encoder": vit});
    write_metadata("validate-weights", None, &settings, None)?;
    if !blocking.is_empty() {
        return Err(Error::Schema(format!("{} blocking problem(s): {}", blocking.len(), blocking.join("; "))));
    }
    println!("ok: {} tensors, {} parameters", bundle.len(), bundle.parameter_count());
    Ok(())
}

fn init(a: InitArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let mut vit = ViTConfig {
        image_side: a.image_side,
        patch_side: a.patch_side,
        hidden_dim: a.hidden_dim,
        depth: a.depth,
        heads: a.heads,
        mlp_dim: a.mlp_dim,
        positional_mode: PositionalMode::Learned,
        ..ViTConfig::default()
    };
    a.encoder.apply(cfg, &mut vit);
    let bundle = WeightBundle::random(&vit, seed)?;
    let out = cfg.output(&a.out)?;
    save_weights(&bundle, &out)?;
    println!("wrote {} parameters to {}", bundle.parameter_count(), out.display());
    write_metadata("init-weights", Some(seed), &json!({"encoder": vit}), Some(&out))
}
