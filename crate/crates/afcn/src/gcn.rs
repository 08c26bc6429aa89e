//! Unified adjacency fusion and symmetric-normalized graph convolution over
//! the stacked multi-band node set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const DEGREE_EPS: f64 = 1e-6;

/// Per-layer weight matrices; layer dims run [N, hidden…, out].
#[derive(Clone, Debug)]
pub struct GcnParams<P> {
    pub layers: Vec<P>,
}

/// Glorot-style uniform initialization for the given layer dims.
pub fn init_gcn(dims: &[usize], seed: u64) -> Result<GcnParams<Tensor>> {
    if dims.len() < 2 {
        return Err(Error::Config("GCN needs at least one layer".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push(Tensor::new(vec![fan_in, fan_out], data)?);
    }
    Ok(GcnParams { layers })
}

/// `A_unified = A_intra + λ·A_cross`, differentiable through λ and the
/// cross-band parameters.
pub fn build_unified(tape: &mut Tape, intra: Var, cross: Var, lambda: Var) -> Var {
    let scaled = tape.mul_scalar(cross, lambda);
    tape.add(intra, scaled)
}

/// `D^(−1/2)·A·D^(−1/2)` with D_ii = Σ_j |A_ij| + ε. Absolute-value degrees
/// keep the normalization real for signed adjacencies; ε guards isolated
/// nodes. Differentiable w.r.t. A.
pub fn normalize_adjacency(tape: &mut Tape, a: Var) -> Var {
    let abs_a = tape.abs(a);
    let deg = tape.row_sums(abs_a);
    let deg_eps = tape.add_const(deg, DEGREE_EPS);
    let sqrt_deg = tape.sqrt(deg_eps);
    let inv_sqrt = tape.recip(sqrt_deg);
    let rows_scaled = tape.mul_col(a, inv_sqrt);
    tape.mul_row(rows_scaled, inv_sqrt)
}

/// Stacked graph convolutions: H⁽ⁱ⁾ = ReLU(Â·H⁽ⁱ⁻¹⁾·W⁽ⁱ⁾), with the last
/// layer left linear so readout embeddings are not confined to the positive
/// orthant.
pub fn gcn_forward(
    tape: &mut Tape,
    a_unified: Var,
    h0: Var,
    params: &GcnParams<Var>,
    final_activation: bool,
) -> Result<Var> {
    let norm = normalize_adjacency(tape, a_unified);
    let mut h = h0;
    let n_layers = params.layers.len();
    for (i, w) in params.layers.iter().enumerate() {
        let prop = tape.matmul(norm, h)?;
        let lin = tape.matmul(prop, *w).map_err(|e| {
            Error::Config(format!("GCN layer {i} dimension mismatch: {e}"))
        })?;
        h = if i + 1 < n_layers || final_activation {
            tape.relu(lin)
        } else {
            lin
        };
    }
    Ok(h)
}
