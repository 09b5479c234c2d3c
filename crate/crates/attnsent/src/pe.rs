//! Sinusoidal positional encoding and the two ways of fusing it with token
//! embeddings: elementwise addition and column concatenation.
//!
//! Positions are 1-based. Even columns hold `sin(pos / 10000^(2i/d_pe))`,
//! odd columns the matching `cos`, so the encoding for a prefix of a longer
//! sequence is exactly the prefix of the longer encoding.

use crate::error::{Error, Result};
use crate::tensor::{concat_cols, split_cols, Matrix};
use serde::{Deserialize, Serialize};

/// How positional information enters the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `z = E + PE`; requires the encoding width to equal the embedding width.
    Add,
    /// `z = [E | PE]`; the model width becomes `d_emb + d_pe`.
    Concat,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Add => write!(f, "add"),
            FusionMode::Concat => write!(f, "concat"),
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?}, expected \"add\" or \"concat\""
            ))),
        }
    }
}

fn check_width(d_pe: usize) -> Result<()> {
    if d_pe < 2 || d_pe % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width must be even and at least 2, got {d_pe}"
        )));
    }
    Ok(())
}

/// Sinusoidal encoding table for `length` positions and an even width `d_pe`.
pub fn sinusoidal_pe(length: usize, d_pe: usize) -> Result<Matrix> {
    if length == 0 {
        return Err(Error::InvalidInput("positional encoding needs length >= 1".into()));
    }
    check_width(d_pe)?;
    let mut data = Vec::with_capacity(length * d_pe);
    for p in 0..length {
        let position = (p + 1) as f64;
        for i in 0..d_pe / 2 {
            let freq = 10000f64.powf(-(2.0 * i as f64) / d_pe as f64);
            let arg = position * freq;
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Matrix::new(length, d_pe, data)
}

/// Precomputed encoding rows, built once at model construction and read-only
/// afterwards. Requests beyond the cached length are computed on the fly.
#[derive(Debug, Clone)]
pub struct PeCache {
    d_pe: usize,
    table: Matrix,
}

impl PeCache {
    pub fn new(d_pe: usize, max_len: usize) -> Result<Self> {
        Ok(PeCache {
            d_pe,
            table: sinusoidal_pe(max_len.max(1), d_pe)?,
        })
    }

    pub fn d_pe(&self) -> usize {
        self.d_pe
    }

    /// Encoding for the first `length` positions.
    pub fn prefix(&self, length: usize) -> Result<Matrix> {
        if length > self.table.rows() {
            return sinusoidal_pe(length, self.d_pe);
        }
        let mut data = Vec::with_capacity(length * self.d_pe);
        for p in 0..length {
            data.extend_from_slice(self.table.row(p));
        }
        Matrix::new(length, self.d_pe, data)
    }
}

/// Additive fusion: embeddings and positional encoding carry equal weight.
pub fn fuse_add(embeddings: &Matrix, pe: &Matrix) -> Result<Matrix> {
    if embeddings.shape() != pe.shape() {
        return Err(Error::shape("fuse_add", embeddings.shape(), pe.shape()));
    }
    embeddings.add(pe)
}

/// Concatenative fusion: embedding columns first, encoding columns second,
/// letting downstream projections weight the two differently.
pub fn fuse_concat(embeddings: &Matrix, pe: &Matrix) -> Result<Matrix> {
    if embeddings.rows() != pe.rows() {
        return Err(Error::shape("fuse_concat", embeddings.shape(), pe.shape()));
    }
    concat_cols(embeddings, pe)
}

/// Gradient of [`fuse_concat`] with respect to the embedding block; the
/// positional block has no trainable parameters, so its gradient is returned
/// only for inspection.
pub fn fuse_concat_backward(upstream: &Matrix, d_emb: usize) -> Result<(Matrix, Matrix)> {
    split_cols(upstream, d_emb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_position_matches_direct_evaluation() {
        let pe = sinusoidal_pe(1, 8).unwrap();
        assert!((pe.get(0, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(0, 1) - 1f64.cos()).abs() < 1e-15);
        assert!((pe.get(0, 0) - 0.841471).abs() < 1e-6);
        assert!((pe.get(0, 1) - 0.540302).abs() < 1e-6);
    }

    #[test]
    fn entries_stay_in_unit_range() {
        let pe = sinusoidal_pe(50, 16).unwrap();
        assert!(pe.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal_pe(4, 7).is_err());
        assert!(sinusoidal_pe(4, 0).is_err());
    }

    #[test]
    fn longer_table_extends_shorter_exactly() {
        let short = sinusoidal_pe(10, 12).unwrap();
        let long = sinusoidal_pe(64, 12).unwrap();
        for p in 0..10 {
            assert_eq!(short.row(p), long.row(p));
        }
    }

    #[test]
    fn cache_prefixes_and_extends() {
        let cache = PeCache::new(8, 16).unwrap();
        let direct = sinusoidal_pe(5, 8).unwrap();
        assert_eq!(cache.prefix(5).unwrap(), direct);
        // Beyond the cached window the rows are recomputed, not truncated.
        let extended = cache.prefix(32).unwrap();
        assert_eq!(extended.rows(), 32);
        let direct32 = sinusoidal_pe(32, 8).unwrap();
        assert_eq!(extended, direct32);
    }

    #[test]
    fn add_fusion_examples() {
        let pe = sinusoidal_pe(3, 4).unwrap();
        let zero = Matrix::zeros(3, 4).unwrap();
        assert_eq!(fuse_add(&zero, &pe).unwrap(), pe);
        let neg = pe.scale(-1.0).unwrap();
        assert_eq!(fuse_add(&neg, &pe).unwrap(), zero);
        assert!(fuse_add(&Matrix::zeros(3, 6).unwrap(), &pe).is_err());
    }

    #[test]
    fn concat_fusion_layout_and_recovery() {
        let e = Matrix::from_fn(3, 8, |i, j| (i * 8 + j) as f64).unwrap();
        let pe = sinusoidal_pe(3, 8).unwrap();
        let fused = fuse_concat(&e, &pe).unwrap();
        assert_eq!(fused.shape(), (3, 16));
        for i in 0..3 {
            assert_eq!(&fused.row(i)[..8], e.row(i));
            assert_eq!(&fused.row(i)[8..], pe.row(i));
        }
        let (back_e, back_pe) = fuse_concat_backward(&fused, 8).unwrap();
        assert_eq!(back_e, e);
        assert_eq!(back_pe, pe);

        let zeros = Matrix::zeros(3, 8).unwrap();
        let fused_zero = fuse_concat(&zeros, &pe).unwrap();
        for i in 0..3 {
            assert!(fused_zero.row(i)[..8].iter().all(|&v| v == 0.0));
            assert_eq!(&fused_zero.row(i)[8..], pe.row(i));
        }
    }
}
