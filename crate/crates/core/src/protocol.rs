//! Dataset manifests, the leave-one-out cross-dataset grid and its summary
//! statistics.
//!
//! For every processing type, one SVM is trained per morphing algorithm on
//! that algorithm's training morphs plus the bona fide training images of
//! the same processing type. Each model is then tested against every
//! algorithm's test split of the same processing type. Processing types are
//! never mixed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::metrics::{cell_metrics, Label, LabeledScores};
use crate::preprocess::BBox;
use crate::svm::{train, LinearModel, SvmParams, TrainingSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MorphAlgorithm {
    #[serde(rename = "Landmark-I")]
    LandmarkI,
    #[serde(rename = "Landmark-II")]
    LandmarkII,
    #[serde(rename = "StyleGAN-IWBF")]
    StyleGanIwbf,
    #[serde(rename = "MIPGAN-I")]
    MipganI,
    #[serde(rename = "MIPGAN-II")]
    MipganII,
    #[serde(rename = "none")]
    None,
}

impl MorphAlgorithm {
    pub const ATTACKS: [MorphAlgorithm; 5] = [
        MorphAlgorithm::LandmarkI,
        MorphAlgorithm::LandmarkII,
        MorphAlgorithm::StyleGanIwbf,
        MorphAlgorithm::MipganI,
        MorphAlgorithm::MipganII,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MorphAlgorithm::LandmarkI => "Landmark-I",
            MorphAlgorithm::LandmarkII => "Landmark-II",
            MorphAlgorithm::StyleGanIwbf => "StyleGAN-IWBF",
            MorphAlgorithm::MipganI => "MIPGAN-I",
            MorphAlgorithm::MipganII => "MIPGAN-II",
            MorphAlgorithm::None => "none",
        }
    }
}

impl std::fmt::Display for MorphAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Processing {
    Digital,
    PrintScan,
    PrintScanCompressed,
}

impl Processing {
    pub const ALL: [Processing; 3] =
        [Processing::Digital, Processing::PrintScan, Processing::PrintScanCompressed];

    pub fn as_str(self) -> &'static str {
        match self {
            Processing::Digital => "digital",
            Processing::PrintScan => "print-scan",
            Processing::PrintScanCompressed => "print-scan-compressed",
        }
    }
}

impl std::fmt::Display for Processing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub label: Label,
    #[serde(default = "no_algorithm")]
    pub morph_algorithm: MorphAlgorithm,
    pub processing: Processing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

fn no_algorithm() -> MorphAlgorithm {
    MorphAlgorithm::None
}

impl ManifestRecord {
    pub fn bbox(&self) -> Option<BBox> {
        self.bbox.map(|[x, y, w, h]| BBox::new(x, y, w, h))
    }
}

/// Validated manifest. Relative image paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { base_dir: base_dir.into(), records };
        m.validate()?;
        Ok(m)
    }

    /// Parses JSON lines; blank lines are skipped.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Schema(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Self::new(base_dir, records)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Data(format!("duplicate manifest path {}", r.path)));
            }
            match (r.label, r.morph_algorithm) {
                (Label::Bona, MorphAlgorithm::None) | (Label::Morph, _) => {}
                (Label::Bona, alg) => {
                    return Err(Error::Data(format!(
                        "bona fide record {} carries morph algorithm {alg}",
                        r.path
                    )))
                }
            }
            if r.label == Label::Morph && r.morph_algorithm == MorphAlgorithm::None {
                return Err(Error::Data(format!("morph record {} has no morph algorithm", r.path)));
            }
            if let Some([_, _, w, h]) = r.bbox {
                if !(w > 0.0 && h > 0.0) {
                    return Err(Error::Data(format!("record {} has a degenerate bbox", r.path)));
                }
            }
        }
        // Explicitly split bona fide subjects must not straddle train and test.
        let mut subject_split: BTreeMap<(Processing, &str), Split> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.label == Label::Bona) {
            if let (Some(s), Some(split)) = (r.subject.as_deref(), r.split) {
                if let Some(prev) = subject_split.insert((r.processing, s), split) {
                    if prev != split {
                        return Err(Error::Data(format!(
                            "bona fide subject {s} appears in both train and test ({})",
                            r.processing
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Attack algorithms present, in canonical order.
    pub fn algorithms(&self) -> Vec<MorphAlgorithm> {
        let set: BTreeSet<_> = self
            .records
            .iter()
            .filter(|r| r.label == Label::Morph)
            .map(|r| r.morph_algorithm)
            .collect();
        set.into_iter().collect()
    }

    pub fn processing_types(&self) -> Vec<Processing> {
        let set: BTreeSet<_> = self.records.iter().map(|r| r.processing).collect();
        set.into_iter().collect()
    }

    /// Split of every record: explicit where given, otherwise by the seeded
    /// policy of [`assign_splits`].
    pub fn resolved_splits(&self, seed: u64) -> Vec<Split> {
        assign_splits(&self.records, seed)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, base)
}

/// Fills in missing splits.
///
/// Records are grouped by (label, algorithm, processing). Within a group,
/// when subject ids exist the subjects are shuffled with `seed` and the first
/// half goes to train, so no subject lands on both sides; otherwise the
/// records themselves are shuffled and halved.
pub fn assign_splits(records: &[ManifestRecord], seed: u64) -> Vec<Split> {
    let mut out: Vec<Option<Split>> = records.iter().map(|r| r.split).collect();
    let mut groups: BTreeMap<(Label, MorphAlgorithm, Processing), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.split.is_none() {
            groups.entry((r.label, r.morph_algorithm, r.processing)).or_default().push(i);
        }
    }
    for (key, idx) in groups {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ group_salt(key));
        let with_subjects = idx.iter().all(|&i| records[i].subject.is_some());
        if with_subjects {
            let mut subjects: Vec<&str> = idx
                .iter()
                .map(|&i| records[i].subject.as_deref().unwrap_or_default())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            subjects.shuffle(&mut rng);
            let train: HashSet<&str> = subjects[..subjects.len().div_ceil(2)].iter().copied().collect();
            for &i in &idx {
                let s = records[i].subject.as_deref().unwrap_or_default();
                out[i] = Some(if train.contains(s) { Split::Train } else { Split::Test });
            }
        } else {
            let mut order = idx.clone();
            order.shuffle(&mut rng);
            let cut = order.len().div_ceil(2);
            for (k, &i) in order.iter().enumerate() {
                out[i] = Some(if k < cut { Split::Train } else { Split::Test });
            }
        }
    }
    out.into_iter().map(|s| s.unwrap_or(Split::Test)).collect()
}

fn group_salt((label, alg, proc_): (Label, MorphAlgorithm, Processing)) -> u64 {
    (label as u64) << 16 | (alg as u64) << 8 | proc_ as u64
}

/// Metrics of one (train algorithm, test algorithm) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train: MorphAlgorithm,
    pub test: MorphAlgorithm,
    pub d_eer: f64,
    pub bpcer_at_5: f64,
    pub bpcer_at_10: f64,
    #[serde(default)]
    pub n_bona: usize,
    #[serde(default)]
    pub n_morph: usize,
}

impl GridCell {
    pub fn is_intra(&self) -> bool {
        self.train == self.test
    }
}

/// The k×k grid of one processing type, row-major by train algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingGrid {
    pub processing: Processing,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub algorithms: Vec<MorphAlgorithm>,
    pub grids: Vec<ProcessingGrid>,
    #[serde(default)]
    pub svm: Option<SvmParams>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GridReport {
    /// Builds a D-EER-only report (BPCER fields zero) from a row-major
    /// `k × k` matrix per processing type.
    pub fn from_d_eer(algorithms: Vec<MorphAlgorithm>, grids: &[(Processing, Vec<f64>)]) -> Result<Self> {
        let k = algorithms.len();
        let mut out = Vec::new();
        for (p, values) in grids {
            if values.len() != k * k {
                return Err(Error::Shape(format!("{} D-EER values for a {k}x{k} grid", values.len())));
            }
            let cells = values
                .iter()
                .enumerate()
                .map(|(i, &d)| GridCell {
                    train: algorithms[i / k],
                    test: algorithms[i % k],
                    d_eer: d,
                    bpcer_at_5: 0.0,
                    bpcer_at_10: 0.0,
                    n_bona: 0,
                    n_morph: 0,
                })
                .collect();
            out.push(ProcessingGrid { processing: *p, cells });
        }
        let report = Self { algorithms, grids: out, svm: None, seed: None };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.algorithms.len();
        for g in &self.grids {
            if g.cells.len() != k * k {
                return Err(Error::Data(format!(
                    "{} grid has {} cells, expected {}",
                    g.processing,
                    g.cells.len(),
                    k * k
                )));
            }
            for (i, c) in g.cells.iter().enumerate() {
                if c.train != self.algorithms[i / k] || c.test != self.algorithms[i % k] {
                    return Err(Error::Data(format!("{} grid cells are out of order", g.processing)));
                }
                for v in [c.d_eer, c.bpcer_at_5, c.bpcer_at_10] {
                    if !(0.0..=100.0).contains(&v) {
                        return Err(Error::Data(format!("metric {v} outside [0, 100]")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self, p: Processing) -> Option<&ProcessingGrid> {
        self.grids.iter().find(|g| g.processing == p)
    }

    pub fn cell_count(&self) -> usize {
        self.grids.iter().map(|g| g.cells.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("grid JSON: {e}")))?;
        r.validate()?;
        Ok(r)
    }
}

/// Where features for the grid come from.
pub trait FeatureSource: Sync {
    fn feature(&self, record: &ManifestRecord) -> Result<&[f32]>;
}

impl FeatureSource for FeatureSet {
    fn feature(&self, record: &ManifestRecord) -> Result<&[f32]> {
        self.get(&record.path)
            .map(|f| f.values.as_slice())
            .ok_or_else(|| Error::Data(format!("no features for {}", record.path)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub svm: SvmParams,
    /// Seed of the split policy for records without an explicit split.
    pub split_seed: u64,
    pub workers: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { svm: SvmParams::default(), split_seed: 42, workers: 1 }
    }
}

struct Partition<'a> {
    bona_train: Vec<&'a ManifestRecord>,
    bona_test: Vec<&'a ManifestRecord>,
    morph_train: BTreeMap<MorphAlgorithm, Vec<&'a ManifestRecord>>,
    morph_test: BTreeMap<MorphAlgorithm, Vec<&'a ManifestRecord>>,
}

fn partition<'a>(
    manifest: &'a DatasetManifest,
    splits: &[Split],
    processing: Processing,
    algorithms: &[MorphAlgorithm],
) -> Result<Partition<'a>> {
    let mut part = Partition {
        bona_train: Vec::new(),
        bona_test: Vec::new(),
        morph_train: BTreeMap::new(),
        morph_test: BTreeMap::new(),
    };
    for (r, &split) in manifest.records.iter().zip(splits) {
        if r.processing != processing {
            continue;
        }
        match (r.label, split) {
            (Label::Bona, Split::Train) => part.bona_train.push(r),
            (Label::Bona, Split::Test) => part.bona_test.push(r),
            (Label::Morph, Split::Train) => part.morph_train.entry(r.morph_algorithm).or_default().push(r),
            (Label::Morph, Split::Test) => part.morph_test.entry(r.morph_algorithm).or_default().push(r),
        }
    }
    if part.bona_train.is_empty() || part.bona_test.is_empty() {
        return Err(Error::Protocol(format!(
            "cell (bona fide, {processing}) needs both train and test images"
        )));
    }
    for &a in algorithms {
        for (name, map) in [("train", &part.morph_train), ("test", &part.morph_test)] {
            if map.get(&a).is_none_or(Vec::is_empty) {
                return Err(Error::Protocol(format!("cell ({a}, {processing}) has no {name} morphs")));
            }
        }
    }
    Ok(part)
}

fn training_set(source: &dyn FeatureSource, records: &[&ManifestRecord]) -> Result<TrainingSet> {
    let mut rows = Vec::with_capacity(records.len());
    let mut y = Vec::with_capacity(records.len());
    for r in records {
        rows.push(source.feature(r)?.to_vec());
        y.push(r.label.sign());
    }
    TrainingSet::new(Matrix::from_rows(&rows)?, y)
}

fn score_records(model: &LinearModel, source: &dyn FeatureSource, records: &[&ManifestRecord]) -> Result<LabeledScores> {
    let mut s = LabeledScores::default();
    for r in records {
        s.push(r.label, model.score(source.feature(r)?)?);
    }
    Ok(s)
}

/// Runs the full cross-dataset protocol.
pub fn run_grid(manifest: &DatasetManifest, source: &dyn FeatureSource, config: &GridConfig) -> Result<GridReport> {
    let algorithms = manifest.algorithms();
    if algorithms.is_empty() {
        return Err(Error::Protocol("manifest has no morph records".into()));
    }
    let splits = manifest.resolved_splits(config.split_seed);
    let processing = manifest.processing_types();
    let mut parts = Vec::new();
    for &p in &processing {
        parts.push(partition(manifest, &splits, p, &algorithms)?);
    }

    // One job per (processing, train algorithm); cells are merged in order.
    let jobs: Vec<(usize, MorphAlgorithm)> = (0..processing.len())
        .flat_map(|pi| algorithms.iter().map(move |&a| (pi, a)))
        .collect();
    let run_job = |&(pi, train_alg): &(usize, MorphAlgorithm)| -> Result<Vec<GridCell>> {
        let part = &parts[pi];
        let mut train_records: Vec<&ManifestRecord> = part.morph_train[&train_alg].clone();
        train_records.extend(&part.bona_train);
        let model = train(&training_set(source, &train_records)?, &config.svm)?;
        algorithms
            .iter()
            .map(|&test_alg| {
                let mut test_records: Vec<&ManifestRecord> = part.morph_test[&test_alg].clone();
                test_records.extend(&part.bona_test);
                // Structural guard: never pair processing types.
                debug_assert!(test_records.iter().chain(&train_records).all(|r| r.processing == processing[pi]));
                let scores = score_records(&model, source, &test_records)?;
                let m = cell_metrics(&scores)?;
                Ok(GridCell {
                    train: train_alg,
                    test: test_alg,
                    d_eer: m.d_eer,
                    bpcer_at_5: m.bpcer_at_5,
                    bpcer_at_10: m.bpcer_at_10,
                    n_bona: scores.bona.len(),
                    n_morph: scores.morph.len(),
                })
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let rows: Vec<Vec<GridCell>> = pool.install(|| jobs.par_iter().map(run_job).collect::<Result<_>>())?;

    let k = algorithms.len();
    let grids = processing
        .iter()
        .enumerate()
        .map(|(pi, &p)| ProcessingGrid {
            processing: p,
            cells: rows[pi * k..(pi + 1) * k].iter().flatten().cloned().collect(),
        })
        .collect();
    let report = GridReport { algorithms, grids, svm: Some(config.svm.clone()), seed: Some(config.split_seed) };
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    All,
    Inter,
    Intra,
}

impl std::str::FromStr for StatsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "inter" => Ok(Self::Inter),
            "intra" => Ok(Self::Intra),
            other => Err(Error::Argument(format!("unknown stats mode {other:?}"))),
        }
    }
}

/// Standard deviation convention. Population matches the published tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StdConvention {
    #[default]
    Population,
    Sample,
}

impl std::str::FromStr for StdConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" => Ok(Self::Population),
            "sample" => Ok(Self::Sample),
            other => Err(Error::Argument(format!("unknown std convention {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingStats {
    pub processing: Processing,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub mode: StatsMode,
    pub convention: StdConvention,
    pub per_processing: Vec<ProcessingStats>,
}

pub fn mean_std(values: &[f64], convention: StdConvention) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let denom = match convention {
        StdConvention::Population => n,
        StdConvention::Sample => n - 1.0,
    };
    let std = if denom > 0.0 { (ss / denom).sqrt() } else { 0.0 };
    (mean, std)
}

/// Mean and standard deviation of the D-EER cells selected by `mode`.
pub fn aggregate_stats(grid: &GridReport, mode: StatsMode, convention: StdConvention) -> Result<StatsSummary> {
    grid.validate()?;
    let mut per_processing = Vec::new();
    for g in &grid.grids {
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
        if values.is_empty() {
            return Err(Error::Data(format!(
                "{} grid has no cells for mode {mode:?}",
                g.processing
            )));
        }
        let (mean, std) = mean_std(&values, convention);
        per_processing.push(ProcessingStats { processing: g.processing, count: values.len(), mean, std });
    }
    Ok(StatsSummary { mode, convention, per_processing })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Argument(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize)]
struct JsonReport<'a> {
    grid: &'a GridReport,
    stats: &'a [StatsSummary],
}

/// Serializes the grid and statistics deterministically.
pub fn emit_report(grid: &GridReport, stats: &[StatsSummary], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(&JsonReport { grid, stats })? + "\n"),
        ReportFormat::Csv => {
            let mut out = String::from("processing,train,test,d_eer,bpcer_at_5,bpcer_at_10\n");
            for g in &grid.grids {
                for c in &g.cells {
                    let _ = writeln!(
                        out,
                        "{},{},{},{:.4},{:.4},{:.4}",
                        g.processing, c.train, c.test, c.d_eer, c.bpcer_at_5, c.bpcer_at_10
                    );
                }
            }
            Ok(out)
        }
        ReportFormat::Markdown => Ok(markdown(grid, stats)),
    }
}

fn markdown(grid: &GridReport, stats: &[StatsSummary]) -> String {
    let k = grid.algorithms.len();
    let mut out = String::new();
    for (ti, train) in grid.algorithms.iter().enumerate() {
        let _ = writeln!(out, "### Training morphing type: {train}\n");
        let mut header = String::from("| Testing morphing type |");
        let mut rule = String::from("|---|");
        for g in &grid.grids {
            let p = g.processing;
            let _ = write!(header, " {p} D-EER (%) | {p} BPCER@MACER=5% | {p} BPCER@MACER=10% |");
            rule.push_str("---:|---:|---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for (si, test) in grid.algorithms.iter().enumerate() {
            let mark = if ti == si { " (intra)" } else { "" };
            let _ = write!(out, "| {test}{mark} |");
            for g in &grid.grids {
                let c = &g.cells[ti * k + si];
                let _ = write!(out, " {:.2} | {:.2} | {:.2} |", c.d_eer, c.bpcer_at_5, c.bpcer_at_10);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    for s in stats {
        let _ = writeln!(out, "### D-EER statistics ({:?}, {:?} std)\n", s.mode, s.convention);
        let mut header = String::from("|");
        let mut rule = String::from("|");
        let mut row = String::from("|");
        for p in &s.per_processing {
            let _ = write!(header, " {} mean | {} std |", p.processing, p.processing);
            rule.push_str("---:|---:|");
            let _ = write!(row, " {:.2} | {:.2} |", p.mean, p.std);
        }
        let _ = writeln!(out, "{header}\n{rule}\n{row}\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, label: Label, alg: MorphAlgorithm) -> ManifestRecord {
        ManifestRecord {
            path: path.into(),
            label,
            morph_algorithm: alg,
            processing: Processing::Digital,
            bbox: None,
            split: None,
            subject: None,
        }
    }

    #[test]
    fn minimal_manifest_loads() {
        let text = r#"{"path":"a.png","label":"bona","processing":"digital"}
{"path":"b.png","label":"morph","morph_algorithm":"MIPGAN-I","processing":"digital","bbox":[1,2,30,40],"split":"test"}
"#;
        let m = DatasetManifest::parse(text, "/data").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].bbox(), Some(BBox::new(1.0, 2.0, 30.0, 40.0)));
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/a.png"));
        assert_eq!(m.algorithms(), vec![MorphAlgorithm::MipganI]);
    }

    #[test]
    fn unknown_processing_is_schema_error() {
        let text = r#"{"path":"a.png","label":"bona","processing":"fax"}"#;
        assert!(matches!(DatasetManifest::parse(text, "."), Err(Error::Schema(_))));
        let text = r#"{"path":"a.png","label":"morph","morph_algorithm":"FaceFusion","processing":"digital"}"#;
        assert!(matches!(DatasetManifest::parse(text, "."), Err(Error::Schema(_))));
    }

    #[test]
    fn inconsistent_records_are_data_errors() {
        let text = r#"{"path":"a.png","label":"bona","morph_algorithm":"MIPGAN-I","processing":"digital"}"#;
        assert!(matches!(DatasetManifest::parse(text, "."), Err(Error::Data(_))));
        let r = rec("a.png", Label::Bona, MorphAlgorithm::None);
        assert!(matches!(DatasetManifest::new(".", vec![r.clone(), r]), Err(Error::Data(_))));
        let m = rec("m.png", Label::Morph, MorphAlgorithm::None);
        assert!(matches!(DatasetManifest::new(".", vec![m]), Err(Error::Data(_))));
    }

    #[test]
    fn straddling_subject_is_rejected() {
        let mut a = rec("a.png", Label::Bona, MorphAlgorithm::None);
        a.subject = Some("s1".into());
        a.split = Some(Split::Train);
        let mut b = a.clone();
        b.path = "b.png".into();
        b.split = Some(Split::Test);
        assert!(matches!(DatasetManifest::new(".", vec![a, b]), Err(Error::Data(_))));
    }

    #[test]
    fn subject_split_is_disjoint() {
        let records: Vec<_> = (0..40)
            .map(|i| {
                let mut r = rec(&format!("{i}.png"), Label::Bona, MorphAlgorithm::None);
                r.subject = Some(format!("s{}", i % 9));
                r
            })
            .collect();
        let splits = assign_splits(&records, 7);
        let mut by_subject: BTreeMap<&str, BTreeSet<bool>> = BTreeMap::new();
        for (r, s) in records.iter().zip(&splits) {
            by_subject.entry(r.subject.as_deref().unwrap()).or_default().insert(*s == Split::Train);
        }
        assert!(by_subject.values().all(|v| v.len() == 1));
        assert!(splits.contains(&Split::Train) && splits.contains(&Split::Test));
        assert_eq!(splits, assign_splits(&records, 7));
    }

    #[test]
    fn random_split_halves_and_honours_explicit() {
        let mut records: Vec<_> =
            (0..11).map(|i| rec(&format!("{i}.png"), Label::Bona, MorphAlgorithm::None)).collect();
        records[0].split = Some(Split::Test);
        let splits = assign_splits(&records, 1);
        assert_eq!(splits[0], Split::Test);
        assert_eq!(splits[1..].iter().filter(|s| **s == Split::Train).count(), 5);
    }

    fn digital_values() -> Vec<f64> {
        vec![
            0.51, 23.50, 2.57, 11.15, 8.40, //
            14.92, 10.63, 22.64, 23.67, 29.67, //
            5.15, 37.91, 0.00, 21.61, 18.01, //
            7.38, 32.76, 8.92, 0.51, 2.57, //
            7.20, 35.33, 14.07, 0.86, 0.69,
        ]
    }

    #[test]
    fn stats_modes_partition_cells() {
        let g = GridReport::from_d_eer(MorphAlgorithm::ATTACKS.to_vec(), &[(Processing::Digital, digital_values())])
            .unwrap();
        let all = aggregate_stats(&g, StatsMode::All, StdConvention::Population).unwrap();
        let inter = aggregate_stats(&g, StatsMode::Inter, StdConvention::Population).unwrap();
        let intra = aggregate_stats(&g, StatsMode::Intra, StdConvention::Population).unwrap();
        assert_eq!(
            (all.per_processing[0].count, inter.per_processing[0].count, intra.per_processing[0].count),
            (25, 20, 5)
        );
        let weighted = inter.per_processing[0].mean * 20.0 / 25.0 + intra.per_processing[0].mean * 5.0 / 25.0;
        assert!((all.per_processing[0].mean - weighted).abs() < 1e-9);
    }

    #[test]
    fn std_conventions() {
        let (m, p) = mean_std(&[1.0, 3.0], StdConvention::Population);
        let (_, s) = mean_std(&[1.0, 3.0], StdConvention::Sample);
        assert_eq!((m, p), (2.0, 1.0));
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_algorithm_grid_has_no_inter_cells() {
        let g = GridReport::from_d_eer(vec![MorphAlgorithm::MipganI], &[(Processing::Digital, vec![3.0])]).unwrap();
        assert!(aggregate_stats(&g, StatsMode::Inter, StdConvention::Population).is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let g = GridReport::from_d_eer(MorphAlgorithm::ATTACKS.to_vec(), &[(Processing::Digital, digital_values())])
            .unwrap();
        let stats = vec![aggregate_stats(&g, StatsMode::All, StdConvention::Population).unwrap()];
        for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Markdown] {
            assert_eq!(emit_report(&g, &stats, f).unwrap(), emit_report(&g, &stats, f).unwrap());
        }
        let csv = emit_report(&g, &stats, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 26);
        let md = emit_report(&g, &stats, ReportFormat::Markdown).unwrap();
        assert!(md.contains("| Landmark-I (intra) | 0.51 |"));
        let back = GridReport::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
