//! Vision transformer encoder: patch embedding, pre-LN encoder blocks and
//! class-token feature extraction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::ImageTensor;
use crate::tensor::{gelu_in_place, layer_norm_rows, linear, matmul, softmax_in_place, Matrix};
use crate::weights::{validate_schema, PositionalMode, ViTConfig, WeightBundle};

/// Token matrix of one encoder stage; row 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub layer_index: usize,
}

/// Class-token embedding of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn new(id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature vector has non-finite values".into()));
        }
        Ok(Self { id: id.into(), values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Splits a `side × side × 3` image into flattened patches.
///
/// Patches are taken row-major over the grid; inside a patch the order is
/// row, column, channel.
pub fn patchify(image: &ImageTensor, config: &ViTConfig) -> Result<Matrix> {
    let side = config.image_side;
    if image.height() != side || image.width() != side {
        return Err(Error::Shape(format!(
            "encoder expects {side}x{side}x3 input, got {}x{}x3",
            image.height(),
            image.width()
        )));
    }
    let p = config.patch_side;
    let grid = config.grid_side();
    let src = image.data();
    let mut data = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                let start = ((gy * p + py) * side + gx * p) * 3;
                data.extend_from_slice(&src[start..start + p * 3]);
            }
        }
    }
    Matrix::new(config.num_patches(), config.patch_dim(), data)
}

/// Fixed sine/cosine position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Matrix> {
    if !d.is_multiple_of(2) {
        return Err(Error::Shape(format!("sinusoidal positions need an even dim, got {d}")));
    }
    Ok(Matrix::from_fn(n, d, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    }))
}

/// Builds `z_0`: class token followed by projected patches, plus positions.
pub fn embed(patches: &Matrix, bundle: &WeightBundle, config: &ViTConfig) -> Result<TokenSequence> {
    let n = config.num_patches();
    let d = config.hidden_dim;
    if patches.shape() != (n, config.patch_dim()) {
        return Err(Error::Shape(format!(
            "expected {n}x{} patches, got {:?}",
            config.patch_dim(),
            patches.shape()
        )));
    }
    let projected = linear(
        patches,
        bundle.tensor("embed.patch.weight")?,
        bundle.vector("embed.patch.bias")?,
    )?;
    let cls = bundle.vector("cls_token")?;
    if cls.len() != d {
        return Err(Error::Schema(format!("cls_token has {} values, expected {d}", cls.len())));
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(cls);
    data.extend_from_slice(projected.data());
    let mut tokens = Matrix::new(n + 1, d, data)?;
    let positions = match config.positional_mode {
        PositionalMode::Learned => bundle.tensor("pos_embed")?.clone(),
        PositionalMode::Sinusoidal => sinusoidal_positions(n + 1, d)?,
    };
    tokens.add_assign(&positions)?;
    Ok(TokenSequence { tokens, layer_index: 0 })
}

/// Borrowed parameters of one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub ln1_gamma: &'a [f32],
    pub ln1_beta: &'a [f32],
    pub q_weight: &'a Matrix,
    pub q_bias: &'a [f32],
    pub k_weight: &'a Matrix,
    pub k_bias: &'a [f32],
    pub v_weight: &'a Matrix,
    pub v_bias: &'a [f32],
    pub out_weight: &'a Matrix,
    pub out_bias: &'a [f32],
    pub ln2_gamma: &'a [f32],
    pub ln2_beta: &'a [f32],
    pub fc1_weight: &'a Matrix,
    pub fc1_bias: &'a [f32],
    pub fc2_weight: &'a Matrix,
    pub fc2_bias: &'a [f32],
}

impl<'a> LayerParams<'a> {
    pub fn from_bundle(bundle: &'a WeightBundle, layer: usize) -> Result<Self> {
        let t = |s: &str| bundle.tensor(&format!("blocks.{layer}.{s}"));
        let v = |s: &str| bundle.vector(&format!("blocks.{layer}.{s}"));
        Ok(Self {
            ln1_gamma: v("ln1.gamma")?,
            ln1_beta: v("ln1.beta")?,
            q_weight: t("attn.q.weight")?,
            q_bias: v("attn.q.bias")?,
            k_weight: t("attn.k.weight")?,
            k_bias: v("attn.k.bias")?,
            v_weight: t("attn.v.weight")?,
            v_bias: v("attn.v.bias")?,
            out_weight: t("attn.out.weight")?,
            out_bias: v("attn.out.bias")?,
            ln2_gamma: v("ln2.gamma")?,
            ln2_beta: v("ln2.beta")?,
            fc1_weight: t("mlp.fc1.weight")?,
            fc1_bias: v("mlp.fc1.bias")?,
            fc2_weight: t("mlp.fc2.weight")?,
            fc2_bias: v("mlp.fc2.bias")?,
        })
    }
}

/// Multi-head scaled dot-product self-attention followed by the output
/// projection. When `probs` is given, each head's `tokens × tokens`
/// attention matrix is appended to it.
pub fn multi_head_attention(
    x: &Matrix,
    params: &LayerParams<'_>,
    heads: usize,
    mut probs: Option<&mut Vec<Matrix>>,
) -> Result<Matrix> {
    let d = x.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("{d} dims cannot be split into {heads} heads")));
    }
    let head_dim = d / heads;
    let q = linear(x, params.q_weight, params.q_bias)?;
    let k = linear(x, params.k_weight, params.k_bias)?;
    let v = linear(x, params.v_weight, params.v_bias)?;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut context = Matrix::zeros(x.rows(), d);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.columns(lo, hi);
        let kh_t = k.columns(lo, hi).transpose();
        let vh = v.columns(lo, hi);
        let mut scores = matmul(&qh, &kh_t)?;
        for row in scores.data_mut().chunks_exact_mut(x.rows()) {
            for s in row.iter_mut() {
                *s *= scale;
            }
            softmax_in_place(row);
        }
        let out = matmul(&scores, &vh)?;
        context.set_columns(lo, &out);
        if let Some(sink) = probs.as_deref_mut() {
            sink.push(scores);
        }
    }
    linear(&context, params.out_weight, params.out_bias)
}

/// One pre-LN block: `z' = MSA(LN1(z)) + z`, `out = MLP(LN2(z')) + z'`.
pub fn encoder_block(
    z: &TokenSequence,
    params: &LayerParams<'_>,
    config: &ViTConfig,
    probs: Option<&mut Vec<Matrix>>,
) -> Result<TokenSequence> {
    let eps = config.ln_eps;
    let normed = layer_norm_rows(&z.tokens, params.ln1_gamma, params.ln1_beta, eps)?;
    let mut mid = multi_head_attention(&normed, params, config.heads, probs)?;
    mid.add_assign(&z.tokens)?;

    let normed = layer_norm_rows(&mid, params.ln2_gamma, params.ln2_beta, eps)?;
    let mut hidden = linear(&normed, params.fc1_weight, params.fc1_bias)?;
    gelu_in_place(hidden.data_mut());
    let mut out = linear(&hidden, params.fc2_weight, params.fc2_bias)?;
    out.add_assign(&mid)?;
    Ok(TokenSequence { tokens: out, layer_index: z.layer_index + 1 })
}

/// Receives `(layer, per-head attention probabilities)` after each block.
pub type AttentionSink<'a> = &'a mut dyn FnMut(usize, &[Matrix]);

/// Inference engine over a validated bundle.
#[derive(Debug, Clone, Copy)]
pub struct Encoder<'a> {
    bundle: &'a WeightBundle,
    config: &'a ViTConfig,
}

impl<'a> Encoder<'a> {
    /// Checks that every tensor `config` needs is present with the right shape.
    pub fn new(bundle: &'a WeightBundle, config: &'a ViTConfig) -> Result<Self> {
        config.validate()?;
        let report = validate_schema(bundle, config);
        let problems: Vec<String> = report.blocking().map(|v| v.to_string()).collect();
        if !problems.is_empty() {
            return Err(Error::Schema(problems.join("; ")));
        }
        Ok(Self { bundle, config })
    }

    pub fn config(&self) -> &ViTConfig {
        self.config
    }

    pub fn bundle(&self) -> &WeightBundle {
        self.bundle
    }

    /// Runs the whole stack and returns the final token matrix (after the
    /// optional final layer norm). `attention` receives `(layer, probs)`
    /// for every block when set.
    pub fn forward(
        &self,
        image: &ImageTensor,
        attention: Option<AttentionSink<'_>>,
    ) -> Result<TokenSequence> {
        let patches = patchify(image, self.config)?;
        let z0 = embed(&patches, self.bundle, self.config)?;
        self.forward_tokens(z0, attention)
    }

    pub fn forward_tokens(
        &self,
        z0: TokenSequence,
        mut attention: Option<AttentionSink<'_>>,
    ) -> Result<TokenSequence> {
        let mut z = z0;
        let mut probs = Vec::new();
        for layer in 0..self.config.depth {
            let params = LayerParams::from_bundle(self.bundle, layer)?;
            probs.clear();
            let sink = attention.is_some().then_some(&mut probs);
            z = encoder_block(&z, &params, self.config, sink)?;
            if let Some(cb) = attention.as_mut() {
                cb(layer, &probs);
            }
        }
        if self.config.final_layer_norm {
            z.tokens = layer_norm_rows(
                &z.tokens,
                self.bundle.vector("final_ln.gamma")?,
                self.bundle.vector("final_ln.beta")?,
                self.config.ln_eps,
            )?;
        }
        Ok(z)
    }

    /// Class-token output for one preprocessed image.
    pub fn extract_cls(&self, id: &str, image: &ImageTensor) -> Result<FeatureVector> {
        let z = self.forward(image, None)?;
        FeatureVector::new(id, z.tokens.row(0).to_vec())
    }

    /// Encodes a batch on `workers` threads. Output order follows input order
    /// and does not depend on the worker count.
    pub fn extract_batch(&self, items: &[(String, ImageTensor)], workers: usize) -> Result<Vec<FeatureVector>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
        pool.install(|| {
            items
                .par_iter()
                .map(|(id, img)| self.extract_cls(id, img))
                .collect()
        })
    }
}

/// `embed → blocks → final LN → row 0` for one image.
pub fn extract_cls(image: &ImageTensor, bundle: &WeightBundle, config: &ViTConfig) -> Result<FeatureVector> {
    Encoder::new(bundle, config)?.extract_cls("", image)
}
