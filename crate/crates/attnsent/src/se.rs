//! Feature gating over the embedding dimension: pool the sequence, squeeze it
//! through a bottleneck, and rescale every feature by a sigmoid gate shared
//! across positions.

use crate::error::{Error, Result};
use crate::tensor::{
    masked_average_pool, masked_average_pool_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, DualResult, Matrix,
};
use crate::attention::PadMask;

/// Bottleneck weights. `w_fc1` is `d_model × d_model/r`, `w_fc2` the reverse;
/// the reduction ratio `r` is implied by the shapes.
#[derive(Debug, Clone)]
pub struct SeParams {
    pub w_fc1: Matrix,
    pub w_fc2: Matrix,
}

impl SeParams {
    pub fn new(w_fc1: Matrix, w_fc2: Matrix) -> Result<Self> {
        let d_model = w_fc1.rows();
        let bottleneck = w_fc1.cols();
        if d_model % bottleneck != 0 {
            return Err(Error::Config(format!(
                "reduction ratio must divide the model width: {d_model} features, bottleneck {bottleneck}"
            )));
        }
        if w_fc2.shape() != (bottleneck, d_model) {
            return Err(Error::Config(format!(
                "gate weights disagree: W_fc1 {:?} needs W_fc2 {:?}, got {:?}",
                w_fc1.shape(),
                (bottleneck, d_model),
                w_fc2.shape()
            )));
        }
        Ok(SeParams { w_fc1, w_fc2 })
    }

    pub fn d_model(&self) -> usize {
        self.w_fc1.rows()
    }

    pub fn reduction_ratio(&self) -> usize {
        self.w_fc1.rows() / self.w_fc1.cols()
    }
}

fn check_input(x: &Matrix, params: &SeParams, mask: Option<&PadMask>) -> Result<()> {
    if x.cols() != params.d_model() {
        return Err(Error::shape("squeeze_excite", x.shape(), params.w_fc1.shape()));
    }
    if let Some(m) = mask {
        if m.len() != x.rows() {
            return Err(Error::InvalidInput(format!(
                "mask has {} positions for {} rows",
                m.len(),
                x.rows()
            )));
        }
    }
    Ok(())
}

/// The gate vector `g = sigmoid(relu(s·W_fc1)·W_fc2)` where `s` is the masked
/// column mean of `x`. Every entry lies in (0,1).
pub fn se_gate(x: &Matrix, params: &SeParams, mask: Option<&PadMask>) -> Result<Matrix> {
    check_input(x, params, mask)?;
    let s = masked_average_pool(x, mask.map(|m| m.valid()))?;
    let hidden = relu(&s.matmul(&params.w_fc1)?)?;
    sigmoid(&hidden.matmul(&params.w_fc2)?)
}

/// Rescales every feature column of `x` by the shared gate.
pub fn squeeze_excite(x: &Matrix, params: &SeParams, mask: Option<&PadMask>) -> Result<Matrix> {
    Ok(squeeze_excite_dual(x, params, mask)?.output)
}

/// Activations captured by the squeeze-excite forward pass.
pub struct SeCtx {
    x: Matrix,
    squeezed: Matrix,
    pre_relu: Matrix,
    hidden: Matrix,
    gate: Matrix,
    valid: Option<Vec<bool>>,
}

pub struct SeGrads {
    pub x: Matrix,
    pub w_fc1: Matrix,
    pub w_fc2: Matrix,
}

pub fn squeeze_excite_dual(
    x: &Matrix,
    params: &SeParams,
    mask: Option<&PadMask>,
) -> Result<DualResult<SeCtx>> {
    check_input(x, params, mask)?;
    let valid = mask.map(|m| m.valid().to_vec());
    let squeezed = masked_average_pool(x, valid.as_deref())?;
    let pre_relu = squeezed.matmul(&params.w_fc1)?;
    let hidden = relu(&pre_relu)?;
    let gate = sigmoid(&hidden.matmul(&params.w_fc2)?)?;
    let output = scale_columns(x, &gate)?;
    Ok(DualResult {
        output,
        ctx: SeCtx {
            x: x.clone(),
            squeezed,
            pre_relu,
            hidden,
            gate,
            valid,
        },
    })
}

impl SeCtx {
    pub fn gate(&self) -> &Matrix {
        &self.gate
    }

    pub fn backward(&self, params: &SeParams, upstream: &Matrix) -> Result<SeGrads> {
        // y[i][j] = x[i][j] · g[j]; the gate itself depends on x through the
        // squeeze, so dX has a direct term and a pooled term.
        let dx_direct = scale_columns(upstream, &self.gate)?;
        let mut dgate = vec![0.0; self.gate.cols()];
        for i in 0..upstream.rows() {
            for (j, d) in dgate.iter_mut().enumerate() {
                *d += upstream.get(i, j) * self.x.get(i, j);
            }
        }
        let dgate = Matrix::new(1, self.gate.cols(), dgate)?;
        let dpre_gate = sigmoid_backward(&self.gate, &dgate)?;
        let dw_fc2 = self.hidden.matmul_at(&dpre_gate)?;
        let dhidden = dpre_gate.matmul_bt(&params.w_fc2)?;
        let dpre_relu = relu_backward(&self.pre_relu, &dhidden)?;
        let dw_fc1 = self.squeezed.matmul_at(&dpre_relu)?;
        let dsqueezed = dpre_relu.matmul_bt(&params.w_fc1)?;
        let dx_pooled =
            masked_average_pool_backward(&dsqueezed, self.x.rows(), self.valid.as_deref())?;
        Ok(SeGrads {
            x: dx_direct.add(&dx_pooled)?,
            w_fc1: dw_fc1,
            w_fc2: dw_fc2,
        })
    }
}

// out[i][j] = x[i][j] * gate[0][j]
fn scale_columns(x: &Matrix, gate: &Matrix) -> Result<Matrix> {
    if gate.rows() != 1 || gate.cols() != x.cols() {
        return Err(Error::shape("scale_columns", x.shape(), gate.shape()));
    }
    Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * gate.get(0, j))
}
