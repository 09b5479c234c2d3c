//! Full network assembly: embed, fuse positions, one multi-head attention
//! block, squeeze-excite gating, global average pooling, and a two-class
//! softmax head. Forward, hand-derived backward, and the binary model file.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_dual, AttentionHeadParams, MultiHeadCtx, MultiHeadParams,
};
use crate::error::{Error, Result};
use crate::pe::{fuse_add, fuse_concat, fuse_concat_backward, FusionMode, PeCache};
use crate::se::{squeeze_excite_dual, SeCtx, SeParams};
use crate::tensor::{
    masked_average_pool_backward, relu, relu_backward, softmax_rows, softmax_rows_backward,
    DualResult, Matrix,
};
use crate::text::{
    EmbedCache, EmbeddingTable, Label, SparseGrads, TokenRef, VocabOptions, Vocabulary,
};

pub const N_CLASSES: usize = 2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters. `d_model` is derived: `d_emb + d_pe` under
/// concat fusion, `d_emb` under add fusion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_pe: usize,
    pub heads: usize,
    pub fusion: FusionMode,
    pub se_reduction: usize,
    /// Feed-forward inner width; `None` resolves to `4 * d_model`.
    pub ffn_width: Option<usize>,
    pub use_ffn: bool,
    pub use_residual_norm: bool,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 384,
            d_pe: 384,
            heads: 12,
            fusion: FusionMode::Concat,
            se_reduction: 4,
            ffn_width: None,
            use_ffn: true,
            use_residual_norm: true,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => self.d_emb + self.d_pe,
            FusionMode::Add => self.d_emb,
        }
    }

    pub fn resolved_ffn_width(&self) -> usize {
        self.ffn_width.unwrap_or(4 * self.d_model())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 {
            return Err(Error::Config("d_emb must be positive".into()));
        }
        if self.d_pe < 2 || self.d_pe % 2 != 0 {
            return Err(Error::Config(format!(
                "d_pe must be even and at least 2, got {}",
                self.d_pe
            )));
        }
        if self.fusion == FusionMode::Add && self.d_pe != self.d_emb {
            return Err(Error::Config(format!(
                "add fusion needs d_pe == d_emb, got {} and {}",
                self.d_pe, self.d_emb
            )));
        }
        let d_model = self.d_model();
        if self.heads == 0 || d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide d_model {d_model}",
                self.heads
            )));
        }
        if self.se_reduction == 0 || d_model % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {} must divide d_model {d_model}",
                self.se_reduction
            )));
        }
        if self.resolved_ffn_width() == 0 {
            return Err(Error::Config("ffn_width must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Per-feature gain and offset, both 1×d.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub offset: Matrix,
}

impl LayerNormParams {
    pub fn new(gain: Matrix, offset: Matrix) -> Result<Self> {
        if gain.rows() != 1 || gain.shape() != offset.shape() {
            return Err(Error::shape("layer_norm_params", gain.shape(), offset.shape()));
        }
        Ok(LayerNormParams { gain, offset })
    }

    /// Unit gain, zero offset.
    pub fn identity(width: usize) -> Result<Self> {
        LayerNormParams::new(
            Matrix::from_fn(1, width, |_, _| 1.0)?,
            Matrix::zeros(1, width)?,
        )
    }

    pub fn width(&self) -> usize {
        self.gain.cols()
    }
}

pub struct LayerNormCtx {
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

pub struct LayerNormGrads {
    pub x: Matrix,
    pub gain: Matrix,
    pub offset: Matrix,
}

/// Row-wise layer normalization: y = gain ⊙ (x − μ)/√(σ² + ε) + offset.
pub fn layer_norm_dual(x: &Matrix, params: &LayerNormParams) -> Result<DualResult<LayerNormCtx>> {
    let d = x.cols();
    if params.width() != d {
        return Err(Error::shape("layer_norm", x.shape(), params.gain.shape()));
    }
    let mut x_hat = vec![0.0; x.rows() * d];
    let mut out = vec![0.0; x.rows() * d];
    let mut inv_std = Vec::with_capacity(x.rows());
    let dinv = 1.0 / d as f64;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() * dinv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() * dinv;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let normed = (row[j] - mean) * inv;
            x_hat[i * d + j] = normed;
            out[i * d + j] = params.gain.get(0, j) * normed + params.offset.get(0, j);
        }
    }
    Ok(DualResult {
        output: Matrix::new(x.rows(), d, out)?,
        ctx: LayerNormCtx {
            x_hat: Matrix::new(x.rows(), d, x_hat)?,
            inv_std,
        },
    })
}

impl LayerNormCtx {
    pub fn backward(&self, params: &LayerNormParams, upstream: &Matrix) -> Result<LayerNormGrads> {
        if upstream.shape() != self.x_hat.shape() {
            return Err(Error::shape("layer_norm_backward", self.x_hat.shape(), upstream.shape()));
        }
        let (n, d) = self.x_hat.shape();
        let dinv = 1.0 / d as f64;
        let mut dx = vec![0.0; n * d];
        let mut dgain = vec![0.0; d];
        let mut doffset = vec![0.0; d];
        for i in 0..n {
            let up = upstream.row(i);
            let xh = self.x_hat.row(i);
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for j in 0..d {
                let g = up[j] * params.gain.get(0, j);
                g_mean += g;
                gx_mean += g * xh[j];
                dgain[j] += up[j] * xh[j];
                doffset[j] += up[j];
            }
            g_mean *= dinv;
            gx_mean *= dinv;
            let inv = self.inv_std[i];
            for j in 0..d {
                let g = up[j] * params.gain.get(0, j);
                dx[i * d + j] = inv * (g - g_mean - xh[j] * gx_mean);
            }
        }
        Ok(LayerNormGrads {
            x: Matrix::new(n, d, dx)?,
            gain: Matrix::new(1, d, dgain)?,
            offset: Matrix::new(1, d, doffset)?,
        })
    }
}

/// Every trainable array. Optional pieces mirror the config flags.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub embedding: EmbeddingTable,
    pub attention: MultiHeadParams,
    pub ln1: Option<LayerNormParams>,
    pub ffn_w1: Option<Matrix>,
    pub ffn_w2: Option<Matrix>,
    pub ln2: Option<LayerNormParams>,
    pub se: SeParams,
    pub classifier_w: Matrix,
    pub classifier_b: Matrix,
}

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Result<Matrix> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::new(rows, cols, data)
}

impl ModelParams {
    /// Seeded init: uniform ±1/√fan_in projections, unit norm gains, zero
    /// biases and offsets. The draw order is fixed for reproducibility.
    pub fn init<R: Rng>(
        config: &ModelConfig,
        vocab_size: usize,
        bucket_count: usize,
        rng: &mut R,
    ) -> Result<ModelParams> {
        config.validate()?;
        let d_model = config.d_model();
        let d_k = d_model / config.heads;
        let embedding = EmbeddingTable::init(vocab_size, bucket_count, config.d_emb, rng)?;
        let mut heads = Vec::with_capacity(config.heads);
        for _ in 0..config.heads {
            heads.push(AttentionHeadParams::new(
                uniform_init(rng, d_model, d_k, d_model)?,
                uniform_init(rng, d_model, d_k, d_model)?,
                uniform_init(rng, d_model, d_k, d_model)?,
            )?);
        }
        let attention = MultiHeadParams::new(heads, uniform_init(rng, d_model, d_model, d_model)?)?;
        let ln1 = if config.use_residual_norm {
            Some(LayerNormParams::identity(d_model)?)
        } else {
            None
        };
        let (ffn_w1, ffn_w2) = if config.use_ffn {
            let width = config.resolved_ffn_width();
            (
                Some(uniform_init(rng, d_model, width, d_model)?),
                Some(uniform_init(rng, width, d_model, width)?),
            )
        } else {
            (None, None)
        };
        let ln2 = if config.use_ffn && config.use_residual_norm {
            Some(LayerNormParams::identity(d_model)?)
        } else {
            None
        };
        let bottleneck = d_model / config.se_reduction;
        let se = SeParams::new(
            uniform_init(rng, d_model, bottleneck, d_model)?,
            uniform_init(rng, bottleneck, d_model, bottleneck)?,
        )?;
        let classifier_w = uniform_init(rng, d_model, N_CLASSES, d_model)?;
        let classifier_b = Matrix::zeros(1, N_CLASSES)?;
        Ok(ModelParams {
            embedding,
            attention,
            ln1,
            ffn_w1,
            ffn_w2,
            ln2,
            se,
            classifier_w,
            classifier_b,
        })
    }

    /// Densely updated arrays in a fixed order with their stable names.
    /// Embedding tables are excluded; they update sparsely.
    pub fn dense_entries(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, head) in self.attention.heads().iter().enumerate() {
            out.push((format!("attention.head{i:02}.wq"), &head.wq));
            out.push((format!("attention.head{i:02}.wk"), &head.wk));
            out.push((format!("attention.head{i:02}.wv"), &head.wv));
        }
        out.push(("attention.wo".to_string(), &self.attention.wo));
        if let Some(ln) = &self.ln1 {
            out.push(("ln1.gain".to_string(), &ln.gain));
            out.push(("ln1.offset".to_string(), &ln.offset));
        }
        if let Some(w) = &self.ffn_w1 {
            out.push(("ffn.w1".to_string(), w));
        }
        if let Some(w) = &self.ffn_w2 {
            out.push(("ffn.w2".to_string(), w));
        }
        if let Some(ln) = &self.ln2 {
            out.push(("ln2.gain".to_string(), &ln.gain));
            out.push(("ln2.offset".to_string(), &ln.offset));
        }
        out.push(("se.w1".to_string(), &self.se.w_fc1));
        out.push(("se.w2".to_string(), &self.se.w_fc2));
        out.push(("classifier.w".to_string(), &self.classifier_w));
        out.push(("classifier.b".to_string(), &self.classifier_b));
        out
    }

    pub fn dense_entries_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        let (heads, wo) = self.attention.split_mut();
        for (i, head) in heads.iter_mut().enumerate() {
            let AttentionHeadParams { wq, wk, wv } = head;
            out.push((format!("attention.head{i:02}.wq"), wq));
            out.push((format!("attention.head{i:02}.wk"), wk));
            out.push((format!("attention.head{i:02}.wv"), wv));
        }
        out.push(("attention.wo".to_string(), wo));
        if let Some(ln) = &mut self.ln1 {
            out.push(("ln1.gain".to_string(), &mut ln.gain));
            out.push(("ln1.offset".to_string(), &mut ln.offset));
        }
        if let Some(w) = &mut self.ffn_w1 {
            out.push(("ffn.w1".to_string(), w));
        }
        if let Some(w) = &mut self.ffn_w2 {
            out.push(("ffn.w2".to_string(), w));
        }
        if let Some(ln) = &mut self.ln2 {
            out.push(("ln2.gain".to_string(), &mut ln.gain));
            out.push(("ln2.offset".to_string(), &mut ln.offset));
        }
        out.push(("se.w1".to_string(), &mut self.se.w_fc1));
        out.push(("se.w2".to_string(), &mut self.se.w_fc2));
        out.push(("classifier.w".to_string(), &mut self.classifier_w));
        out.push(("classifier.b".to_string(), &mut self.classifier_b));
        out
    }

    /// Every stored array, embedding tables included, in serialization order.
    pub fn named_arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embedding.word".to_string(), &self.embedding.word),
            ("embedding.ngram".to_string(), &self.embedding.ngram),
        ];
        out.extend(self.dense_entries());
        out
    }
}

/// Gradients keyed like the parameter arrays: dense by name, embeddings by
/// touched row.
#[derive(Debug, Default)]
pub struct ModelGrads {
    pub dense: BTreeMap<String, Matrix>,
    pub embedding: SparseGrads,
}

impl ModelGrads {
    pub fn accumulate(&mut self, other: ModelGrads) -> Result<()> {
        for (name, grad) in other.dense {
            match self.dense.entry(name) {
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    let sum = e.get().add(&grad)?;
                    e.insert(sum);
                }
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(grad);
                }
            }
        }
        self.embedding.accumulate(other.embedding);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.dense.values_mut() {
            for v in grad.data_mut() {
                *v *= factor;
            }
        }
        for row in self.embedding.word.values_mut().chain(self.embedding.ngram.values_mut()) {
            for v in row {
                *v *= factor;
            }
        }
    }
}

/// Softmax output of one forward pass. Class order is {negative, positive}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOutput {
    pub logits: [f64; N_CLASSES],
    pub probs: [f64; N_CLASSES],
}

impl ModelOutput {
    pub fn label(&self) -> Label {
        if self.probs[1] > self.probs[0] {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    embed: EmbedCache,
    attn: MultiHeadCtx,
    ln1: Option<LayerNormCtx>,
    ffn_input: Matrix,
    ffn_pre: Option<Matrix>,
    ffn_hidden: Option<Matrix>,
    ln2: Option<LayerNormCtx>,
    se: SeCtx,
    pooled: Matrix,
    probs: Matrix,
    seq_len: usize,
}

/// A complete classifier: configuration, vocabulary, trained arrays, and the
/// positional table cache.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ModelParams,
    pe: PeCache,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, params: ModelParams) -> Result<Model> {
        config.validate()?;
        validate_params(&config, &vocab, &params)?;
        let pe = PeCache::new(config.d_pe, config.max_len)?;
        Ok(Model { config, vocab, params, pe })
    }

    /// Fresh model with seeded parameter init.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, vocab.len(), vocab.bucket_count(), &mut rng)?;
        Model::new(config, vocab, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn forward(&self, tokens: &[TokenRef]) -> Result<ModelOutput> {
        self.forward_cached(tokens).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, tokens: &[TokenRef]) -> Result<(ModelOutput, ForwardCache)> {
        self.forward_inner(tokens, true)
    }

    /// Diagnostic forward with the positional table zeroed out. With no
    /// positions the network is permutation-invariant after pooling.
    pub fn forward_no_pe(&self, tokens: &[TokenRef]) -> Result<ModelOutput> {
        self.forward_inner(tokens, false).map(|(out, _)| out)
    }

    /// Normalizes, tokenizes, and classifies raw text.
    pub fn predict(&self, text: &str) -> Result<ModelOutput> {
        let tokens = crate::text::tokenize(&crate::text::normalize(text));
        if tokens.is_empty() {
            return Err(Error::InvalidInput("no tokens after normalization".into()));
        }
        self.forward(&self.vocab.encode(&tokens))
    }

    fn forward_inner(&self, tokens: &[TokenRef], use_pe: bool) -> Result<(ModelOutput, ForwardCache)> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot classify an empty token sequence".into()));
        }
        let tokens = if tokens.len() > self.config.max_len {
            log::warn!(
                "sequence of {} tokens truncated to max_len {}",
                tokens.len(),
                self.config.max_len
            );
            &tokens[..self.config.max_len]
        } else {
            tokens
        };
        let n = tokens.len();
        let (embedded, embed_cache) = self.params.embedding.embed(tokens)?;
        let pe = if use_pe {
            self.pe.prefix(n)?
        } else {
            Matrix::zeros(n, self.config.d_pe)?
        };
        let x0 = match self.config.fusion {
            FusionMode::Concat => fuse_concat(&embedded, &pe)?,
            FusionMode::Add => fuse_add(&embedded, &pe)?,
        };

        let attn = multi_head_dual(&x0, &self.params.attention, None)?;
        let (r1, ln1_ctx) = if let Some(ln) = &self.params.ln1 {
            let normed = layer_norm_dual(&x0.add(&attn.output)?, ln)?;
            (normed.output, Some(normed.ctx))
        } else {
            (attn.output.clone(), None)
        };

        let (r2, ffn_pre, ffn_hidden, ln2_ctx) = if self.config.use_ffn {
            let w1 = self.params.ffn_w1.as_ref().expect("ffn weights present when use_ffn");
            let w2 = self.params.ffn_w2.as_ref().expect("ffn weights present when use_ffn");
            let pre = r1.matmul(w1)?;
            let hidden = relu(&pre)?;
            let f = hidden.matmul(w2)?;
            if let Some(ln) = &self.params.ln2 {
                let normed = layer_norm_dual(&r1.add(&f)?, ln)?;
                (normed.output, Some(pre), Some(hidden), Some(normed.ctx))
            } else {
                (f, Some(pre), Some(hidden), None)
            }
        } else {
            (r1.clone(), None, None, None)
        };

        let se = squeeze_excite_dual(&r2, &self.params.se, None)?;
        let pooled = crate::tensor::global_average_pool(&se.output)?;
        let logits_m = pooled.matmul(&self.params.classifier_w)?.add(&self.params.classifier_b)?;
        let probs_m = softmax_rows(&logits_m)?;
        let output = ModelOutput {
            logits: [logits_m.get(0, 0), logits_m.get(0, 1)],
            probs: [probs_m.get(0, 0), probs_m.get(0, 1)],
        };
        let cache = ForwardCache {
            embed: embed_cache,
            attn: attn.ctx,
            ln1: ln1_ctx,
            ffn_input: r1,
            ffn_pre,
            ffn_hidden,
            ln2: ln2_ctx,
            se: se.ctx,
            pooled,
            probs: probs_m,
            seq_len: n,
        };
        Ok((output, cache))
    }

    /// Chains a loss gradient with respect to the output probabilities back
    /// through the whole network.
    pub fn backward_from(&self, cache: &ForwardCache, dprobs: [f64; N_CLASSES]) -> Result<ModelGrads> {
        let dprobs = Matrix::new(1, N_CLASSES, dprobs.to_vec())?;
        let dlogits = softmax_rows_backward(&cache.probs, &dprobs)?;

        let d_classifier_w = cache.pooled.matmul_at(&dlogits)?;
        let d_classifier_b = dlogits.clone();
        let dpooled = dlogits.matmul_bt(&self.params.classifier_w)?;
        let dse_out = masked_average_pool_backward(&dpooled, cache.seq_len, None)?;

        let se_grads = cache.se.backward(&self.params.se, &dse_out)?;
        let dr2 = se_grads.x;

        let mut dense: BTreeMap<String, Matrix> = BTreeMap::new();

        let dr1 = if self.config.use_ffn {
            let w1 = self.params.ffn_w1.as_ref().expect("ffn weights present when use_ffn");
            let w2 = self.params.ffn_w2.as_ref().expect("ffn weights present when use_ffn");
            let pre = cache.ffn_pre.as_ref().expect("ffn cache present when use_ffn");
            let hidden = cache.ffn_hidden.as_ref().expect("ffn cache present when use_ffn");
            let (df, residual) = if let Some(ln) = &self.params.ln2 {
                let ctx = cache.ln2.as_ref().expect("ln2 cache present");
                let g = ctx.backward(ln, &dr2)?;
                dense.insert("ln2.gain".into(), g.gain);
                dense.insert("ln2.offset".into(), g.offset);
                (g.x.clone(), Some(g.x))
            } else {
                (dr2, None)
            };
            let d_w2 = hidden.matmul_at(&df)?;
            let dhidden = df.matmul_bt(w2)?;
            let dpre = relu_backward(pre, &dhidden)?;
            let d_w1 = cache.ffn_input.matmul_at(&dpre)?;
            let mut dr1 = dpre.matmul_bt(w1)?;
            if let Some(res) = residual {
                dr1 = dr1.add(&res)?;
            }
            dense.insert("ffn.w1".into(), d_w1);
            dense.insert("ffn.w2".into(), d_w2);
            dr1
        } else {
            dr2
        };

        let (da, residual) = if let Some(ln) = &self.params.ln1 {
            let ctx = cache.ln1.as_ref().expect("ln1 cache present");
            let g = ctx.backward(ln, &dr1)?;
            dense.insert("ln1.gain".into(), g.gain);
            dense.insert("ln1.offset".into(), g.offset);
            (g.x.clone(), Some(g.x))
        } else {
            (dr1, None)
        };

        let attn_grads = cache.attn.backward(&self.params.attention, &da)?;
        let mut dx0 = attn_grads.x;
        if let Some(res) = residual {
            dx0 = dx0.add(&res)?;
        }
        for (i, head) in attn_grads.heads.into_iter().enumerate() {
            dense.insert(format!("attention.head{i:02}.wq"), head.wq);
            dense.insert(format!("attention.head{i:02}.wk"), head.wk);
            dense.insert(format!("attention.head{i:02}.wv"), head.wv);
        }
        dense.insert("attention.wo".into(), attn_grads.wo);

        let d_embedded = match self.config.fusion {
            FusionMode::Concat => fuse_concat_backward(&dx0, self.config.d_emb)?.0,
            FusionMode::Add => dx0,
        };
        let embedding = cache.embed.backward(&d_embedded)?;

        dense.insert("se.w1".into(), se_grads.w_fc1);
        dense.insert("se.w2".into(), se_grads.w_fc2);
        dense.insert("classifier.w".into(), d_classifier_w);
        dense.insert("classifier.b".into(), d_classifier_b);

        Ok(ModelGrads { dense, embedding })
    }
}

fn validate_params(config: &ModelConfig, vocab: &Vocabulary, params: &ModelParams) -> Result<()> {
    let d_model = config.d_model();
    let check = |ok: bool, what: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("parameters do not match config: {what}")))
        }
    };
    check(params.embedding.d_emb() == config.d_emb, "embedding width")?;
    check(params.embedding.word.rows() == vocab.len(), "word table rows")?;
    check(params.embedding.ngram.rows() == vocab.bucket_count(), "n-gram table rows")?;
    check(params.attention.d_model() == d_model, "attention width")?;
    check(params.attention.head_count() == config.heads, "head count")?;
    check(params.ln1.is_some() == config.use_residual_norm, "ln1 presence")?;
    check(
        params.ln2.is_some() == (config.use_residual_norm && config.use_ffn),
        "ln2 presence",
    )?;
    check(params.ffn_w1.is_some() == config.use_ffn, "ffn presence")?;
    check(params.ffn_w2.is_some() == config.use_ffn, "ffn presence")?;
    if let Some(w1) = &params.ffn_w1 {
        check(w1.shape() == (d_model, config.resolved_ffn_width()), "ffn.w1 shape")?;
    }
    if let Some(w2) = &params.ffn_w2 {
        check(w2.shape() == (config.resolved_ffn_width(), d_model), "ffn.w2 shape")?;
    }
    if let Some(ln) = &params.ln1 {
        check(ln.width() == d_model, "ln1 width")?;
    }
    if let Some(ln) = &params.ln2 {
        check(ln.width() == d_model, "ln2 width")?;
    }
    check(params.se.d_model() == d_model, "gate width")?;
    check(params.se.reduction_ratio() == config.se_reduction, "reduction ratio")?;
    check(params.classifier_w.shape() == (d_model, N_CLASSES), "classifier weights")?;
    check(params.classifier_b.shape() == (1, N_CLASSES), "classifier bias")?;
    Ok(())
}

const MODEL_MAGIC: &[u8; 8] = b"ATNSENT1";
const MODEL_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const MAX_NAME_BYTES: u32 = 1 << 16;
const MAX_WORD_BYTES: u32 = 1 << 20;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    model: ModelConfig,
    vocab: VocabOptions,
}

impl Model {
    /// Writes the binary container: magic, version, length-prefixed header
    /// JSON, the vocabulary in id order, then every named array as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        let header = FileHeader {
            model: self.config.clone(),
            vocab: self.vocab.options().clone(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Data(format!("encoding model header: {e}")))?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())?;
        w.write_all(&header_json)?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        for (word, count) in self.vocab.entries() {
            w.write_all(&(word.len() as u32).to_le_bytes())?;
            w.write_all(word.as_bytes())?;
            w.write_all(&count.to_le_bytes())?;
        }
        let arrays = self.params.named_arrays();
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for (name, matrix) in arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32, 2])?;
            w.write_all(&(matrix.rows() as u32).to_le_bytes())?;
            w.write_all(&(matrix.cols() as u32).to_le_bytes())?;
            for &v in matrix.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let file = std::fs::File::open(path)?;
        let mut r = OffsetReader { inner: BufReader::new(file), offset: 0 };
        let mut magic = [0u8; 8];
        r.read_exact_at(&mut magic, "magic")?;
        if &magic != MODEL_MAGIC {
            return Err(format_err(0, "bad magic, not a model file"));
        }
        let version = r.read_u32("version")?;
        if version != MODEL_VERSION {
            return Err(format_err(
                8,
                format!("unsupported format version {version}; supported: {MODEL_VERSION}"),
            ));
        }
        let header_len = r.read_u32("header length")?;
        let header_at = r.offset;
        let header_bytes = r.read_vec(header_len as usize, "header json")?;
        let header: FileHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| format_err(header_at, format!("malformed header json: {e}")))?;

        let word_count = r.read_u32("vocabulary size")?;
        let mut entries = Vec::with_capacity(word_count as usize);
        for _ in 0..word_count {
            let at = r.offset;
            let len = r.read_u32("word length")?;
            if len > MAX_WORD_BYTES {
                return Err(format_err(at, format!("word length {len} exceeds limit")));
            }
            let bytes = r.read_vec(len as usize, "word bytes")?;
            let word = String::from_utf8(bytes)
                .map_err(|e| format_err(at, format!("word is not utf-8: {e}")))?;
            let count = r.read_u64("word count")?;
            entries.push((word, count));
        }
        let vocab = Vocabulary::from_entries(entries, header.vocab);

        let array_count = r.read_u32("array count")?;
        let mut arrays: BTreeMap<String, Matrix> = BTreeMap::new();
        for _ in 0..array_count {
            let at = r.offset;
            let name_len = r.read_u32("array name length")?;
            if name_len > MAX_NAME_BYTES {
                return Err(format_err(at, format!("name length {name_len} exceeds limit")));
            }
            let name = String::from_utf8(r.read_vec(name_len as usize, "array name")?)
                .map_err(|e| format_err(at, format!("array name is not utf-8: {e}")))?;
            let dtype = r.read_u8("dtype tag")?;
            if dtype != DTYPE_F32 {
                return Err(format_err(at, format!("array {name}: unknown dtype tag {dtype}")));
            }
            let rank = r.read_u8("rank")?;
            if rank != 2 {
                return Err(format_err(at, format!("array {name}: rank {rank}, expected 2")));
            }
            let rows = r.read_u32("rows")? as usize;
            let cols = r.read_u32("cols")? as usize;
            let data_at = r.offset;
            let count = rows.checked_mul(cols).ok_or_else(|| {
                format_err(at, format!("array {name}: dimension overflow"))
            })?;
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 4];
            for _ in 0..count {
                r.read_exact_at(&mut buf, "array payload")?;
                data.push(f64::from(f32::from_le_bytes(buf)));
            }
            let matrix = Matrix::new(rows, cols, data)
                .map_err(|e| format_err(data_at, format!("array {name}: {e}")))?;
            if arrays.insert(name.clone(), matrix).is_some() {
                return Err(format_err(at, format!("duplicate array {name}")));
            }
        }
        let params = assemble_params(&header.model, &mut arrays)?;
        if let Some(extra) = arrays.keys().next() {
            return Err(format_err(r.offset, format!("unexpected array {extra}")));
        }
        Model::new(header.model, vocab, params)
    }
}

fn assemble_params(config: &ModelConfig, arrays: &mut BTreeMap<String, Matrix>) -> Result<ModelParams> {
    config.validate()?;
    let mut take = |name: String| -> Result<Matrix> {
        arrays
            .remove(&name)
            .ok_or_else(|| format_err(0, format!("missing array {name}")))
    };
    let embedding = EmbeddingTable::new(
        take("embedding.word".into())?,
        take("embedding.ngram".into())?,
    )?;
    let mut heads = Vec::with_capacity(config.heads);
    for i in 0..config.heads {
        heads.push(AttentionHeadParams::new(
            take(format!("attention.head{i:02}.wq"))?,
            take(format!("attention.head{i:02}.wk"))?,
            take(format!("attention.head{i:02}.wv"))?,
        )?);
    }
    let attention = MultiHeadParams::new(heads, take("attention.wo".into())?)?;
    let ln1 = if config.use_residual_norm {
        Some(LayerNormParams::new(take("ln1.gain".into())?, take("ln1.offset".into())?)?)
    } else {
        None
    };
    let (ffn_w1, ffn_w2) = if config.use_ffn {
        (Some(take("ffn.w1".into())?), Some(take("ffn.w2".into())?))
    } else {
        (None, None)
    };
    let ln2 = if config.use_ffn && config.use_residual_norm {
        Some(LayerNormParams::new(take("ln2.gain".into())?, take("ln2.offset".into())?)?)
    } else {
        None
    };
    let se = SeParams::new(take("se.w1".into())?, take("se.w2".into())?)?;
    let classifier_w = take("classifier.w".into())?;
    let classifier_b = take("classifier.b".into())?;
    Ok(ModelParams {
        embedding,
        attention,
        ln1,
        ffn_w1,
        ffn_w2,
        ln2,
        se,
        classifier_w,
        classifier_b,
    })
}

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::ModelFormat { offset, reason: reason.into() }
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|e| format_err(at, format!("reading {what}: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.read_exact_at(&mut buf, what)?;
        Ok(buf[0])
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact_at(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read_exact_at(&mut buf, what)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn read_vec(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.read_exact_at(&mut buf, what)?;
        Ok(buf)
    }
}
