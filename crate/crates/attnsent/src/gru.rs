//! Minimal gated recurrent unit, the sequential baseline for the latency
//! comparison. Forward only with seeded random weights: latency depends on
//! shapes, not trained values.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Matrix};

pub const DEFAULT_HIDDEN_UNITS: usize = 1024;

/// Update/reset/candidate projections: input `d×u`, recurrent `u×u`,
/// bias `1×u` each.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_update: Matrix,
    pub u_update: Matrix,
    pub b_update: Matrix,
    pub w_reset: Matrix,
    pub u_reset: Matrix,
    pub b_reset: Matrix,
    pub w_cand: Matrix,
    pub u_cand: Matrix,
    pub b_cand: Matrix,
}

impl GruParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_update: Matrix,
        u_update: Matrix,
        b_update: Matrix,
        w_reset: Matrix,
        u_reset: Matrix,
        b_reset: Matrix,
        w_cand: Matrix,
        u_cand: Matrix,
        b_cand: Matrix,
    ) -> Result<GruParams> {
        let (d, u) = w_update.shape();
        for (name, m, want) in [
            ("w_reset", &w_reset, (d, u)),
            ("w_cand", &w_cand, (d, u)),
            ("u_update", &u_update, (u, u)),
            ("u_reset", &u_reset, (u, u)),
            ("u_cand", &u_cand, (u, u)),
            ("b_update", &b_update, (1, u)),
            ("b_reset", &b_reset, (1, u)),
            ("b_cand", &b_cand, (1, u)),
        ] {
            if m.shape() != want {
                return Err(Error::Config(format!(
                    "gru {name} has shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        Ok(GruParams {
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_cand,
            u_cand,
            b_cand,
        })
    }

    /// Uniform ±1/√fan_in weights, zero biases, fixed draw order.
    pub fn init<R: Rng>(d: usize, u: usize, rng: &mut R) -> Result<GruParams> {
        if d == 0 || u == 0 {
            return Err(Error::Config(format!("gru dims must be positive, got d={d}, u={u}")));
        }
        let mut draw = |rows: usize, cols: usize, fan_in: usize| -> Result<Matrix> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix::new(rows, cols, data)
        };
        let w_update = draw(d, u, d)?;
        let u_update = draw(u, u, u)?;
        let w_reset = draw(d, u, d)?;
        let u_reset = draw(u, u, u)?;
        let w_cand = draw(d, u, d)?;
        let u_cand = draw(u, u, u)?;
        GruParams::new(
            w_update,
            u_update,
            Matrix::zeros(1, u)?,
            w_reset,
            u_reset,
            Matrix::zeros(1, u)?,
            w_cand,
            u_cand,
            Matrix::zeros(1, u)?,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.w_update.rows()
    }

    pub fn hidden_units(&self) -> usize {
        self.w_update.cols()
    }
}

// dst = x·W + bias, accumulated row-by-row so the inner loop stays contiguous.
fn affine(dst: &mut [f64], x: &[f64], w: &Matrix, bias: &Matrix) {
    dst.copy_from_slice(bias.row(0));
    for (i, &xv) in x.iter().enumerate() {
        for (d, &wv) in dst.iter_mut().zip(w.row(i)) {
            *d += xv * wv;
        }
    }
}

fn accumulate(dst: &mut [f64], x: &[f64], w: &Matrix) {
    for (i, &xv) in x.iter().enumerate() {
        for (d, &wv) in dst.iter_mut().zip(w.row(i)) {
            *d += xv * wv;
        }
    }
}

/// Final hidden state after scanning the rows of `x` in order, from h = 0:
/// z = σ(x_t W_z + h U_z + b_z), r = σ(x_t W_r + h U_r + b_r),
/// h̃ = tanh(x_t W_c + (r∘h) U_c + b_c), h ← z∘h + (1−z)∘h̃.
/// Strictly sequential over timesteps; that is the point of the baseline.
pub fn gru_forward(x: &Matrix, params: &GruParams) -> Result<Vec<f64>> {
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::InvalidInput("gru_forward needs at least one timestep".into()));
    }
    if d != params.input_dim() {
        return Err(Error::shape("gru_forward", x.shape(), params.w_update.shape()));
    }
    let u = params.hidden_units();
    let mut h = vec![0.0; u];
    let mut update = vec![0.0; u];
    let mut reset = vec![0.0; u];
    let mut cand = vec![0.0; u];
    let mut gated_h = vec![0.0; u];
    for t in 0..n {
        let x_t = x.row(t);
        affine(&mut update, x_t, &params.w_update, &params.b_update);
        accumulate(&mut update, &h, &params.u_update);
        for v in update.iter_mut() {
            *v = sigmoid_scalar(*v);
        }
        affine(&mut reset, x_t, &params.w_reset, &params.b_reset);
        accumulate(&mut reset, &h, &params.u_reset);
        for v in reset.iter_mut() {
            *v = sigmoid_scalar(*v);
        }
        for j in 0..u {
            gated_h[j] = reset[j] * h[j];
        }
        affine(&mut cand, x_t, &params.w_cand, &params.b_cand);
        accumulate(&mut cand, &gated_h, &params.u_cand);
        for v in cand.iter_mut() {
            *v = v.tanh();
        }
        for j in 0..u {
            h[j] = update[j] * h[j] + (1.0 - update[j]) * cand[j];
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gru_forward"));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(d: usize, u: usize, seed: u64) -> GruParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GruParams::init(d, u, &mut rng).unwrap()
    }

    fn random_input(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_weights_and_input_keep_hidden_state_at_zero() {
        let zeros = |r, c| Matrix::zeros(r, c).unwrap();
        let params = GruParams::new(
            zeros(3, 4),
            zeros(4, 4),
            zeros(1, 4),
            zeros(3, 4),
            zeros(4, 4),
            zeros(1, 4),
            zeros(3, 4),
            zeros(4, 4),
            zeros(1, 4),
        )
        .unwrap();
        let h = gru_forward(&zeros(5, 3), &params).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_carries_the_initial_state() {
        // z ≈ 1 makes every step h ← h, so h stays at its zero start even
        // though the candidate path is active.
        let mut params = random_params(3, 4, 1);
        params.b_update = Matrix::from_fn(1, 4, |_, _| 40.0).unwrap();
        let h = gru_forward(&random_input(6, 3, 2), &params).unwrap();
        assert!(h.iter().all(|&v| v.abs() < 1e-10), "{h:?}");
    }

    #[test]
    fn two_step_recurrence_matches_hand_oracle() {
        let params = random_params(2, 2, 3);
        let x = random_input(2, 2, 4);
        let h = gru_forward(&x, &params).unwrap();

        // Scalar re-evaluation of the recurrence, no shared kernels.
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_ref = [0.0f64; 2];
        for t in 0..2 {
            let xt = [x.get(t, 0), x.get(t, 1)];
            let mut z = [0.0f64; 2];
            let mut r = [0.0f64; 2];
            let mut c = [0.0f64; 2];
            for j in 0..2 {
                let mut zv = params.b_update.get(0, j);
                let mut rv = params.b_reset.get(0, j);
                for i in 0..2 {
                    zv += xt[i] * params.w_update.get(i, j) + h_ref[i] * params.u_update.get(i, j);
                    rv += xt[i] * params.w_reset.get(i, j) + h_ref[i] * params.u_reset.get(i, j);
                }
                z[j] = sigma(zv);
                r[j] = sigma(rv);
            }
            for j in 0..2 {
                let mut cv = params.b_cand.get(0, j);
                for i in 0..2 {
                    cv += xt[i] * params.w_cand.get(i, j)
                        + r[i] * h_ref[i] * params.u_cand.get(i, j);
                }
                c[j] = cv.tanh();
            }
            for j in 0..2 {
                h_ref[j] = z[j] * h_ref[j] + (1.0 - z[j]) * c[j];
            }
        }
        for j in 0..2 {
            assert!((h[j] - h_ref[j]).abs() < 1e-12, "unit {j}: {} vs {}", h[j], h_ref[j]);
        }
    }

    #[test]
    fn reversing_the_input_changes_the_final_state() {
        let params = random_params(4, 6, 5);
        let x = random_input(5, 4, 6);
        let reversed =
            Matrix::from_fn(5, 4, |i, j| x.get(4 - i, j)).unwrap();
        let fwd = gru_forward(&x, &params).unwrap();
        let bwd = gru_forward(&reversed, &params).unwrap();
        let delta: f64 = fwd
            .iter()
            .zip(&bwd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(delta > 1e-8, "recurrence must be order-sensitive, delta {delta}");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let params = random_params(3, 4, 7);
        assert!(gru_forward(&Matrix::zeros(2, 5).unwrap(), &params).is_err());
        // A zero-timestep input is unrepresentable: Matrix rejects 0×d.
        assert!(Matrix::zeros(0, 3).is_err());
        let bad = GruParams::new(
            Matrix::zeros(3, 4).unwrap(),
            Matrix::zeros(4, 4).unwrap(),
            Matrix::zeros(1, 4).unwrap(),
            Matrix::zeros(3, 5).unwrap(),
            Matrix::zeros(4, 4).unwrap(),
            Matrix::zeros(1, 4).unwrap(),
            Matrix::zeros(3, 4).unwrap(),
            Matrix::zeros(4, 4).unwrap(),
            Matrix::zeros(1, 4).unwrap(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = random_params(3, 4, 9);
        let b = random_params(3, 4, 9);
        assert_eq!(a.w_update.data(), b.w_update.data());
        assert_eq!(a.u_cand.data(), b.u_cand.data());
        assert_eq!(a.input_dim(), 3);
        assert_eq!(a.hidden_units(), 4);
        assert!(a.b_update.data().iter().all(|&v| v == 0.0));
    }
}
