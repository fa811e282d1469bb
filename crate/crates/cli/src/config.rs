//! JSON run configuration, flag merging and run metadata.

use std::fs;
use std::path::{Path, PathBuf};

use morphscope::preprocess::{Normalization, PreprocessConfig};
use morphscope::protocol::{StatsMode, StdConvention};
use morphscope::svm::{ClassWeighting, SvmParams};
use morphscope::tsne::TsneParams;
use morphscope::weights::PositionalMode;
use morphscope::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Settings file. Every field is optional; command-line flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,

    pub margin: Option<f64>,
    pub norm_mean: Option<[f32; 3]>,
    pub norm_std: Option<[f32; 3]>,
    pub positional_mode: Option<PositionalMode>,
    pub final_layer_norm: Option<bool>,

    pub c: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub standardize: Option<bool>,
    pub class_weighting: Option<ClassWeighting>,
    pub split_seed: Option<u64>,

    pub stats_mode: Option<StatsMode>,
    pub std_convention: Option<StdConvention>,

    pub perplexity: Option<f64>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub early_exaggeration: Option<f64>,
    pub pca_dims: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Argument(format!("config {}: {e}", path.display())))
    }

    /// Output location: relative paths land under `out_dir` when set.
    pub fn output(&self, path: &Path) -> Result<PathBuf> {
        let full = match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(parent) = full.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        Ok(full)
    }
}

pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct PreprocessFlags {
    /// Extra context around the face box, as a fraction of its longer side.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Per-channel normalization mean, e.g. 0.5,0.5,0.5.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub norm_mean: Option<Vec<f32>>,
    /// Per-channel normalization standard deviation.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub norm_std: Option<Vec<f32>>,
}

fn triple(v: Option<Vec<f32>>) -> Option<[f32; 3]> {
    v.and_then(|v| v.try_into().ok())
}

impl PreprocessFlags {
    pub fn resolve(&self, cfg: &RunConfig, side: usize) -> PreprocessConfig {
        let base = Normalization::default();
        PreprocessConfig {
            side,
            margin: pick(self.margin, cfg.margin, 0.0),
            normalization: Normalization {
                mean: pick(triple(self.norm_mean.clone()), cfg.norm_mean, base.mean),
                std: pick(triple(self.norm_std.clone()), cfg.norm_std, base.std),
            },
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct EncoderFlags {
    /// Position embedding: learned or sinusoidal.
    #[arg(long)]
    pub positional_mode: Option<PositionalMode>,
    /// Skip the final layer norm before reading the class token.
    #[arg(long)]
    pub no_final_ln: bool,
}

impl EncoderFlags {
    pub fn apply(&self, cfg: &RunConfig, vit: &mut morphscope::weights::ViTConfig) {
        vit.positional_mode = pick(self.positional_mode, cfg.positional_mode, vit.positional_mode);
        vit.final_layer_norm = if self.no_final_ln { false } else { cfg.final_layer_norm.unwrap_or(vit.final_layer_norm) };
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SvmFlags {
    /// Soft-margin penalty.
    #[arg(long)]
    pub c: Option<f64>,
    /// Stopping tolerance on the projected gradient.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Maximum solver sweeps.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Standardize features before training.
    #[arg(long)]
    pub standardize: bool,
    /// Reweight C by inverse class frequency.
    #[arg(long)]
    pub balanced: bool,
}

impl SvmFlags {
    pub fn resolve(&self, cfg: &RunConfig, seed: u64) -> SvmParams {
        let d = SvmParams::default();
        SvmParams {
            c: pick(self.c, cfg.c, d.c),
            tol: pick(self.tol, cfg.tol, d.tol),
            max_iter: pick(self.max_iter, cfg.max_iter, d.max_iter),
            seed,
            standardize: self.standardize || cfg.standardize.unwrap_or(d.standardize),
            class_weighting: if self.balanced {
                ClassWeighting::Balanced
            } else {
                cfg.class_weighting.unwrap_or(d.class_weighting)
            },
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TsneFlags {
    /// Target perplexity of the input affinities (default 30).
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// Gradient descent iterations (default 1000).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Step size (default 200).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Affinity exaggeration for the first 250 iterations (default 12).
    #[arg(long)]
    pub early_exaggeration: Option<f64>,
    /// Reduce features to this many principal components first.
    #[arg(long)]
    pub pca_dims: Option<usize>,
}

impl TsneFlags {
    pub fn resolve(&self, cfg: &RunConfig, seed: u64) -> TsneParams {
        let d = TsneParams::default();
        TsneParams {
            perplexity: pick(self.perplexity, cfg.perplexity, d.perplexity),
            iterations: pick(self.iterations, cfg.iterations, d.iterations),
            learning_rate: pick(self.learning_rate, cfg.learning_rate, d.learning_rate),
            early_exaggeration: pick(self.early_exaggeration, cfg.early_exaggeration, d.early_exaggeration),
            pca_dims: self.pca_dims.or(cfg.pca_dims),
            seed,
            ..d
        }
    }
}

/// Record written alongside every run's outputs.
#[derive(Debug, Serialize)]
pub struct Metadata<'a, S: Serialize> {
    pub command: &'a str,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub settings: &'a S,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub morphscope: &'static str,
    pub weights_format: &'static str,
    pub features_format: &'static str,
    pub model_format: &'static str,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            morphscope: env!("CARGO_PKG_VERSION"),
            weights_format: "MSW1",
            features_format: "MSF1",
            model_format: "MSM1",
        }
    }
}

/// Writes `<output>.meta.json`, or prints the record to stderr when the
/// command has no file output.
pub fn write_metadata<S: Serialize>(command: &str, seed: Option<u64>, settings: &S, output: Option<&Path>) -> Result<()> {
    let canonical = serde_json::to_vec(settings)?;
    let meta = Metadata {
        command,
        config_hash: hex::encode(Sha256::digest(&canonical)),
        seed,
        versions: Versions::default(),
        settings,
    };
    match output {
        Some(out) => {
            let mut name = out.as_os_str().to_owned();
            name.push(".meta.json");
            fs::write(PathBuf::from(name), serde_json::to_string_pretty(&meta)? + "\n")?;
        }
        None => eprintln!("{}", serde_json::to_string(&meta)?),
    }
    Ok(())
}
