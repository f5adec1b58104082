//! Toy-scale ViT forward pass with pluggable attention.
//!
//! Blocks are pre-norm: `x + MHSA(LN(x))`, then `x + MLP(LN(x))` with an
//! exact (erf) GELU. The class token is prepended to the patch tokens and
//! the classifier reads it after a final layer norm.

mod image;
mod weights;

pub use image::Image;
pub use weights::{teacher_attention_name, Tensor, WeightFile, WEIGHT_FILE_MAGIC, WEIGHT_FILE_VERSION};

use serde::{Deserialize, Serialize};

use crate::attention::{linformer_mhsa, multi_head_attention, AttentionHeadParams};
use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::predictor::{ConnectivityMask, PredictorConfig, PredictorParams};
use crate::rng::{uniform_matrix, SeededRng};
use crate::sparse_mhsa::{sparsifiner_mhsa, HeadStats, SparsifinerOptions};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
    pub predictor: PredictorConfig,
    /// Token-axis rank of the Linformer projections stored with the model.
    /// `None` means Linformer mode runs with identity projections.
    #[serde(default)]
    pub linformer_rank: Option<usize>,
}

impl ModelConfig {
    /// DeiT-S geometry: 224 px images, 16 px patches, 384 wide, 6 heads,
    /// 12 layers (197 tokens).
    pub fn deit_small() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            d_model: 384,
            n_heads: 6,
            n_layers: 12,
            mlp_ratio: 4.0,
            n_classes: 1000,
            predictor: PredictorConfig {
                n_down: 32,
                tau: 0.05,
                budget: 197,
            },
            linformer_rank: None,
        }
    }

    /// A small model that runs in milliseconds.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2.0,
            n_classes: 4,
            predictor: PredictorConfig {
                n_down: 4,
                tau: 0.05,
                budget: 17,
            },
            linformer_rank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes == 0 {
            return bad("n_classes must be at least 1".into());
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.hidden_dim() == 0 {
            return bad(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        let p = &self.predictor;
        if p.n_down == 0 {
            return bad("predictor n_down must be at least 1".into());
        }
        if !(p.tau > 0.0 && p.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", p.tau));
        }
        if p.budget == 0 || p.budget > self.n_tokens() {
            return bad(format!("budget must lie in [1, {}], got {}", self.n_tokens(), p.budget));
        }
        if self.linformer_rank == Some(0) {
            return bad("linformer rank must be at least 1".into());
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `(image_size / patch_size)² + 1`.
    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Layer norm parameters, each `1 × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: DenseMatrix,
    pub beta: DenseMatrix,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: DenseMatrix::filled(1, d, 1.0).expect("finite"),
            beta: DenseMatrix::zeros(1, d),
        }
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if self.gamma.cols() != x.cols() || self.beta.cols() != x.cols() {
            return Err(dim_mismatch(
                "layer_norm",
                format!("{} features", self.gamma.cols()),
                format!("{}", x.cols()),
            ));
        }
        let d = x.cols() as f64;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma.get(0, j) + self.beta.get(0, j);
            }
        }
        Ok(out)
    }
}

/// Token-axis projections for Linformer mode, each `k × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinformerProjections {
    pub e_proj: DenseMatrix,
    pub f_proj: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<AttentionHeadParams>,
    pub w_o: DenseMatrix,
    pub predictor: PredictorParams,
    pub mlp_in: DenseMatrix,
    pub mlp_out: DenseMatrix,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub linformer: Option<LinformerProjections>,
}

/// `n_tokens × d_model` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: DenseMatrix,
}

impl TokenSequence {
    pub fn new(tokens: DenseMatrix) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Which attention implementation the blocks use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMode {
    Dense,
    Sparsifiner(SparsifinerOptions),
    Linformer,
}

impl AttentionMode {
    pub fn sparsifiner() -> Self {
        Self::Sparsifiner(SparsifinerOptions::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::Sparsifiner(_) => "sparsifiner",
            Self::Linformer => "linformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `patch_dim × d_model`, patch pixels flattened row, column, channel.
    pub patch_proj: DenseMatrix,
    pub patch_bias: DenseMatrix,
    pub cls_token: DenseMatrix,
    pub pos_embed: DenseMatrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNorm,
    pub head: DenseMatrix,
    pub head_bias: DenseMatrix,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Splits the image into non-overlapping patches, projects them, prepends
/// the class token and adds positional embeddings.
pub fn patch_embed(
    image: &Image,
    cfg: &ModelConfig,
    patch_proj: &DenseMatrix,
    patch_bias: &DenseMatrix,
    pos_embed: &DenseMatrix,
    cls_token: &DenseMatrix,
) -> Result<TokenSequence> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(dim_mismatch(
            "patch_embed",
            format!("{s}x{s} image", s = cfg.image_size),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    let (g, p, d) = (cfg.grid(), cfg.patch_size, cfg.d_model);
    if patch_proj.shape() != (cfg.patch_dim(), d)
        || patch_bias.shape() != (1, d)
        || cls_token.shape() != (1, d)
        || pos_embed.shape() != (cfg.n_tokens(), d)
    {
        return Err(dim_mismatch(
            "patch_embed",
            format!("projection {}x{d}, bias/cls 1x{d}, pos {}x{d}", cfg.patch_dim(), cfg.n_tokens()),
            format!(
                "projection {}x{}, bias {}x{}, cls {}x{}, pos {}x{}",
                patch_proj.rows(),
                patch_proj.cols(),
                patch_bias.rows(),
                patch_bias.cols(),
                cls_token.rows(),
                cls_token.cols(),
                pos_embed.rows(),
                pos_embed.cols()
            ),
        ));
    }
    let mut patches = Vec::with_capacity(g * g * cfg.patch_dim());
    for py in 0..g {
        for px in 0..g {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        patches.push(image.pixel(py * p + y, px * p + x, c));
                    }
                }
            }
        }
    }
    let patches = DenseMatrix::new(g * g, cfg.patch_dim(), patches)?;
    let mut projected = patches.matmul(patch_proj)?;
    for i in 0..projected.rows() {
        for (v, b) in projected.row_mut(i).iter_mut().zip(patch_bias.row(0)) {
            *v += b;
        }
    }
    let tokens = DenseMatrix::vstack(&[cls_token.clone(), projected])?.add(pos_embed)?;
    Ok(TokenSequence::new(tokens))
}

fn mlp(x: &DenseMatrix, p: &LayerParams) -> Result<DenseMatrix> {
    let mut h = x.matmul(&p.mlp_in)?;
    for v in h.data_mut() {
        *v = gelu(*v);
    }
    h.matmul(&p.mlp_out)
}

/// Per-layer record of a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Normalised block input fed to attention.
    pub attn_input: DenseMatrix,
    /// Sparse mode only.
    pub stats: Vec<HeadStats>,
    /// Sparse mode only.
    pub masks: Vec<ConnectivityMask>,
}

pub fn transformer_block(x: &TokenSequence, p: &LayerParams, mode: AttentionMode) -> Result<TokenSequence> {
    transformer_block_traced(x, p, mode).map(|(t, _)| t)
}

pub fn transformer_block_traced(
    x: &TokenSequence,
    p: &LayerParams,
    mode: AttentionMode,
) -> Result<(TokenSequence, LayerTrace)> {
    let normed = p.norm1.apply(&x.tokens)?;
    let mut trace = LayerTrace {
        attn_input: normed.clone(),
        stats: Vec::new(),
        masks: Vec::new(),
    };
    let attn = match mode {
        AttentionMode::Dense => multi_head_attention(&normed, &p.heads, &p.w_o)?,
        AttentionMode::Sparsifiner(opts) => {
            let r = sparsifiner_mhsa(&normed, &p.heads, &p.predictor, &p.w_o, opts)?;
            trace.stats = r.stats;
            trace.masks = r.masks;
            r.out
        }
        AttentionMode::Linformer => match &p.linformer {
            Some(l) => linformer_mhsa(&normed, &p.heads, &l.e_proj, &l.f_proj, &p.w_o)?,
            None => {
                let eye = DenseMatrix::identity(normed.rows());
                linformer_mhsa(&normed, &p.heads, &eye, &eye, &p.w_o)?
            }
        },
    };
    let x1 = x.tokens.add(&attn)?;
    let x2 = x1.add(&mlp(&p.norm2.apply(&x1)?, p)?)?;
    Ok((TokenSequence::new(x2), trace))
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub scores: Vec<f64>,
    /// Tokens after the last block, before the final norm.
    pub tokens: DenseMatrix,
    pub layers: Vec<LayerTrace>,
}

impl ForwardOutput {
    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// Class scores for `image`.
pub fn forward_classify(image: &Image, model: &Model, mode: AttentionMode) -> Result<Vec<f64>> {
    model.forward(image, mode).map(|o| o.scores)
}

impl Model {
    /// Seeded random model. Weights are `U(-1/√fan_in, 1/√fan_in)`; layer
    /// norms start at identity; the sparse basis `w_up` is drawn from
    /// `[0, 1/√n_down)` so every connectivity score starts positive.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let (d, n, dh) = (config.d_model, config.n_tokens(), config.d_head());
        let hidden = config.hidden_dim();
        let fan = |rng: &mut SeededRng, rows, cols, fan_in: usize| {
            uniform_matrix(rng, rows, cols, 1.0 / (fan_in as f64).sqrt())
        };

        let patch_proj = fan(&mut rng, config.patch_dim(), d, config.patch_dim());
        let patch_bias = fan(&mut rng, 1, d, config.patch_dim());
        let cls_token = uniform_matrix(&mut rng, 1, d, 0.02);
        let pos_embed = uniform_matrix(&mut rng, n, d, 0.02);

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let heads = (0..config.n_heads)
                .map(|_| {
                    AttentionHeadParams::new(fan(&mut rng, d, dh, d), fan(&mut rng, d, dh, d), fan(&mut rng, d, dh, d))
                })
                .collect::<Result<Vec<_>>>()?;
            let w_o = fan(&mut rng, d, d, d);
            let pc = config.predictor;
            let w_down = fan(&mut rng, pc.n_down, n, n);
            let bound = 1.0 / (pc.n_down as f64).sqrt();
            let w_up = DenseMatrix::from_fn(pc.n_down, n, |_, _| rng.uniform(0.0, bound))?;
            let predictor = PredictorParams::new(w_down, CsrMatrix::from_dense(&w_up), pc.tau, pc.budget)?;
            let mlp_in = fan(&mut rng, d, hidden, d);
            let mlp_out = fan(&mut rng, hidden, d, hidden);
            let linformer = config.linformer_rank.map(|k| LinformerProjections {
                e_proj: fan(&mut rng, k, n, n),
                f_proj: fan(&mut rng, k, n, n),
            });
            layers.push(LayerParams {
                heads,
                w_o,
                predictor,
                mlp_in,
                mlp_out,
                norm1: LayerNorm::identity(d),
                norm2: LayerNorm::identity(d),
                linformer,
            });
        }
        let head = fan(&mut rng, d, config.n_classes, d);
        let head_bias = DenseMatrix::zeros(1, config.n_classes);
        Ok(Self {
            patch_proj,
            patch_bias,
            cls_token,
            pos_embed,
            layers,
            final_norm: LayerNorm::identity(d),
            head,
            head_bias,
            config,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.config.n_tokens()
    }

    pub fn embed(&self, image: &Image) -> Result<TokenSequence> {
        patch_embed(image, &self.config, &self.patch_proj, &self.patch_bias, &self.pos_embed, &self.cls_token)
    }

    pub fn forward(&self, image: &Image, mode: AttentionMode) -> Result<ForwardOutput> {
        let mut x = self.embed(image)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, trace) = transformer_block_traced(&x, layer, mode)?;
            x = next;
            layers.push(trace);
        }
        let normed = self.final_norm.apply(&x.tokens)?;
        let cls = normed.select_rows(&[0])?;
        let scores = cls.matmul(&self.head)?.add(&self.head_bias)?.into_data();
        Ok(ForwardOutput {
            scores,
            tokens: x.tokens,
            layers,
        })
    }

    /// Same model with every layer's predictor budget replaced.
    pub fn with_budget(&self, budget: usize) -> Result<Self> {
        let mut m = self.clone();
        for l in &mut m.layers {
            l.predictor = l.predictor.with_budget(budget)?;
        }
        m.config.predictor.budget = budget;
        Ok(m)
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let mut m = self.clone();
        for l in &mut m.layers {
            l.predictor = l.predictor.with_tau(tau)?;
        }
        m.config.predictor.tau = tau;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        WeightFile::from_model(self).write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        WeightFile::read(path)?.to_model()
    }
}
