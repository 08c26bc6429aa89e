//! Per-band mean readout and the MLP classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// One-hidden-layer MLP over the concatenated band embeddings.
#[derive(Clone, Debug)]
pub struct HeadParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

pub fn init_head(in_dim: usize, hidden: usize, n_classes: usize, seed: u64) -> HeadParams<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(vec![fan_in, fan_out], data).unwrap()
    };
    HeadParams {
        w1: layer(in_dim, hidden, &mut rng),
        b1: Tensor::zeros(vec![hidden]),
        w2: layer(hidden, n_classes, &mut rng),
        b2: Tensor::zeros(vec![n_classes]),
    }
}

/// Column means of each of `n_bands` equal row blocks of Z, preserving the
/// band stack order.
pub fn readout(tape: &mut Tape, z: Var, n_bands: usize) -> Var {
    tape.block_row_mean(z, n_bands)
}

/// Linear → ReLU → linear over the flattened band embeddings; returns
/// unnormalized logits of length c (softmax lives in the loss).
pub fn classify(tape: &mut Tape, bands: Var, params: &HeadParams<Var>) -> Result<Var> {
    let (b, d) = {
        let v = tape.value(bands);
        (v.rows(), v.cols())
    };
    let flat = tape.reshape(bands, vec![1, b * d]);
    let lin1 = tape.matmul(flat, params.w1)?;
    let pre1 = tape.add_row(lin1, params.b1);
    let h = tape.relu(pre1);
    let lin2 = tape.matmul(h, params.w2)?;
    let logits_row = tape.add_row(lin2, params.b2);
    let c = tape.value(logits_row).cols();
    Ok(tape.reshape(logits_row, vec![c]))
}
