//! Scaled dot-product attention and multi-head self-attention over a single
//! sequence, with padding masks and hand-derived backward passes.

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, softmax_rows_backward, DualResult, Matrix};

/// Additive bias applied to masked key columns before the softmax.
const MASK_BIAS: f64 = -1e9;

/// Per-position validity for padded sequences. At least one position must be
/// valid, so attention rows always have probability mass to distribute.
#[derive(Debug, Clone)]
pub struct PadMask {
    valid: Vec<bool>,
}

impl PadMask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if valid.is_empty() {
            return Err(Error::InvalidInput("empty padding mask".into()));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::InvalidInput(
                "padding mask has no valid positions".into(),
            ));
        }
        Ok(PadMask { valid })
    }

    pub fn all_valid(len: usize) -> Result<Self> {
        PadMask::new(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// Projections for one attention head. `wq`/`wk` map the model dimension to
/// the key dimension, `wv` to the value dimension; key and value widths match
/// here (both `d_model / h`).
#[derive(Debug, Clone)]
pub struct AttentionHeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionHeadParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        if wq.shape() != wk.shape() || wq.shape() != wv.shape() {
            return Err(Error::Config(format!(
                "attention head projections disagree: Wq {:?}, Wk {:?}, Wv {:?}",
                wq.shape(),
                wk.shape(),
                wv.shape()
            )));
        }
        Ok(AttentionHeadParams { wq, wk, wv })
    }
}

/// All heads plus the output mixing matrix `Wo` of shape `h·d_v × d_model`.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    heads: Vec<AttentionHeadParams>,
    pub wo: Matrix,
}

impl MultiHeadParams {
    pub fn new(heads: Vec<AttentionHeadParams>, wo: Matrix) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Config("multi-head attention needs at least one head".into()));
        }
        let shape = heads[0].wq.shape();
        if heads.iter().any(|h| h.wq.shape() != shape) {
            return Err(Error::Config("attention heads must share one shape".into()));
        }
        let (d_model, d_v) = shape;
        if d_model % heads.len() != 0 || d_model / heads.len() != d_v {
            return Err(Error::Config(format!(
                "head width {d_v} must equal d_model {d_model} / h {}",
                heads.len()
            )));
        }
        if wo.rows() != heads.len() * d_v || wo.cols() != d_model {
            return Err(Error::Config(format!(
                "Wo must be {}x{d_model}, got {}x{}",
                heads.len() * d_v,
                wo.rows(),
                wo.cols()
            )));
        }
        Ok(MultiHeadParams { heads, wo })
    }

    pub fn heads(&self) -> &[AttentionHeadParams] {
        &self.heads
    }

    // Mutable access for optimizer updates; callers keep shapes intact.
    pub fn heads_mut(&mut self) -> &mut [AttentionHeadParams] {
        &mut self.heads
    }

    // Disjoint mutable borrows of the heads and the mixing matrix.
    pub fn split_mut(&mut self) -> (&mut [AttentionHeadParams], &mut Matrix) {
        (&mut self.heads, &mut self.wo)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].wq.rows()
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].wq.cols()
    }
}

fn check_sdp_shapes(q: &Matrix, k: &Matrix, v: &Matrix, mask: Option<&PadMask>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape("scaled_dot_product q/k", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("scaled_dot_product k/v", k.shape(), v.shape()));
    }
    if let Some(m) = mask {
        if m.len() != k.rows() {
            return Err(Error::InvalidInput(format!(
                "mask has {} positions for {} keys",
                m.len(),
                k.rows()
            )));
        }
    }
    Ok(())
}

/// Attention weight matrix `softmax(Q·Kᵀ / denom + mask bias)`, exposed with
/// an explicit denominator so scaling behaviour itself is testable. Masked
/// columns receive a large negative bias before the softmax.
pub fn attention_weights(
    q: &Matrix,
    k: &Matrix,
    mask: Option<&PadMask>,
    denom: f64,
) -> Result<Matrix> {
    check_sdp_shapes(q, k, k, mask)?;
    if !(denom.is_finite() && denom > 0.0) {
        return Err(Error::InvalidInput(format!("invalid attention scale denominator {denom}")));
    }
    let mut scores = q.matmul_bt(k)?.scale(1.0 / denom)?;
    if let Some(m) = mask {
        let cols = scores.cols();
        let data = scores.data_mut();
        for (j, &ok) in m.valid().iter().enumerate() {
            if !ok {
                for i in 0..data.len() / cols {
                    data[i * cols + j] += MASK_BIAS;
                }
            }
        }
    }
    softmax_rows(&scores)
}

/// Scaled dot-product attention (single head). The denominator is the square
/// root of the key dimension actually passed in, so a standalone call with
/// full-width `q`,`k`,`v` scales by `√d_model` while per-head use inside
/// [`multi_head`] scales by `√d_k`.
pub fn scaled_dot_product(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&PadMask>,
) -> Result<Matrix> {
    check_sdp_shapes(q, k, v, mask)?;
    let weights = attention_weights(q, k, mask, (q.cols() as f64).sqrt())?;
    weights.matmul(v)
}

/// Activations captured by the scaled dot-product forward pass.
pub struct SdpCtx {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
    denom: f64,
}

pub struct SdpGrads {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl SdpCtx {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn backward(&self, upstream: &Matrix) -> Result<SdpGrads> {
        // Out = A·V with A = softmax(S), S = Q·Kᵀ/denom (+ mask bias).
        let dv = self.weights.matmul_at(upstream)?;
        let da = upstream.matmul_bt(&self.v)?;
        let ds = softmax_rows_backward(&self.weights, &da)?;
        let dq = ds.matmul(&self.k)?.scale(1.0 / self.denom)?;
        let dk = ds.matmul_at(&self.q)?.scale(1.0 / self.denom)?;
        Ok(SdpGrads { q: dq, k: dk, v: dv })
    }
}

pub fn scaled_dot_product_dual(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&PadMask>,
) -> Result<DualResult<SdpCtx>> {
    check_sdp_shapes(q, k, v, mask)?;
    let denom = (q.cols() as f64).sqrt();
    let weights = attention_weights(q, k, mask, denom)?;
    let output = weights.matmul(v)?;
    Ok(DualResult {
        output,
        ctx: SdpCtx {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights,
            denom,
        },
    })
}

/// Multi-head self-attention: every head projects the same input sequence,
/// attends, and the concatenated head outputs are mixed by `Wo`. Heads are
/// evaluated in a fixed order and combined by concatenation only, so the
/// result does not depend on evaluation order.
pub fn multi_head(x: &Matrix, params: &MultiHeadParams, mask: Option<&PadMask>) -> Result<Matrix> {
    Ok(multi_head_dual(x, params, mask)?.output)
}

/// Per-head activations captured by the multi-head forward pass.
pub struct MultiHeadCtx {
    x: Matrix,
    heads: Vec<SdpCtx>,
    concat: Matrix,
}

pub struct MultiHeadGrads {
    pub heads: Vec<HeadGrads>,
    pub wo: Matrix,
    pub x: Matrix,
}

pub struct HeadGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

pub fn multi_head_dual(
    x: &Matrix,
    params: &MultiHeadParams,
    mask: Option<&PadMask>,
) -> Result<DualResult<MultiHeadCtx>> {
    if x.cols() != params.d_model() {
        return Err(Error::shape("multi_head", x.shape(), params.heads[0].wq.shape()));
    }
    let mut head_ctxs = Vec::with_capacity(params.head_count());
    let mut concat: Option<Matrix> = None;
    for head in &params.heads {
        let q = x.matmul(&head.wq)?;
        let k = x.matmul(&head.wk)?;
        let v = x.matmul(&head.wv)?;
        let dual = scaled_dot_product_dual(&q, &k, &v, mask)?;
        concat = Some(match concat {
            None => dual.output,
            Some(acc) => crate::tensor::concat_cols(&acc, &dual.output)?,
        });
        head_ctxs.push(dual.ctx);
    }
    let concat = concat.expect("at least one head by construction");
    let output = concat.matmul(&params.wo)?;
    Ok(DualResult {
        output,
        ctx: MultiHeadCtx {
            x: x.clone(),
            heads: head_ctxs,
            concat,
        },
    })
}

impl MultiHeadCtx {
    /// Attention weights of one head, for inspection in tests and reports.
    pub fn head_weights(&self, i: usize) -> &Matrix {
        self.heads[i].weights()
    }

    pub fn backward(&self, params: &MultiHeadParams, upstream: &Matrix) -> Result<MultiHeadGrads> {
        let d_v = params.d_k();
        let dwo = self.concat.matmul_at(upstream)?;
        let dconcat = upstream.matmul_bt(&params.wo)?;

        let mut dx = Matrix::zeros(self.x.rows(), self.x.cols())?;
        let mut head_grads = Vec::with_capacity(self.heads.len());
        for (i, (ctx, head)) in self.heads.iter().zip(&params.heads).enumerate() {
            let (dhead, _) = slice_cols(&dconcat, i * d_v, d_v)?;
            let g = ctx.backward(&dhead)?;
            // Q = X·Wq etc., so each projection contributes to dX.
            dx = dx
                .add(&g.q.matmul_bt(&head.wq)?)?
                .add(&g.k.matmul_bt(&head.wk)?)?
                .add(&g.v.matmul_bt(&head.wv)?)?;
            head_grads.push(HeadGrads {
                wq: self.x.matmul_at(&g.q)?,
                wk: self.x.matmul_at(&g.k)?,
                wv: self.x.matmul_at(&g.v)?,
            });
        }
        Ok(MultiHeadGrads {
            heads: head_grads,
            wo: dwo,
            x: dx,
        })
    }
}

// Column window [start, start+width); returns (window, width) for callers that
// iterate head blocks.
fn slice_cols(m: &Matrix, start: usize, width: usize) -> Result<(Matrix, usize)> {
    if start + width > m.cols() {
        return Err(Error::InvalidInput(format!(
            "column window {}..{} out of range for {} columns",
            start,
            start + width,
            m.cols()
        )));
    }
    let mut data = Vec::with_capacity(m.rows() * width);
    for i in 0..m.rows() {
        data.extend_from_slice(&m.row(i)[start..start + width]);
    }
    Ok((Matrix::new(m.rows(), width, data)?, width))
}
