//! Learnable cascade decomposition of ROI time series into low/high sub-band
//! pairs.
//!
//! Level k applies a shared dilated low-pass convolution (dilation 2^(k−1))
//! followed by LeakyReLU; the high band is a second convolution of the
//! residual between the level's input and its activated low-pass output,
//! with no activation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-level filter pair, shared across all ROIs and subjects.
///
/// Generic over storage so the same struct describes owned parameters
/// (`Tensor`) and their tape bindings (`Var`).
#[derive(Clone, Debug)]
pub struct DecomposerParams<P> {
    pub low_kernels: Vec<P>,
    pub high_kernels: Vec<P>,
    pub leaky_slope: f64,
}

impl<P> DecomposerParams<P> {
    pub fn levels(&self) -> usize {
        self.low_kernels.len()
    }
}

/// Initialize K filter pairs: low kernels start as a normalized box filter,
/// high kernels near an identity kernel, both plus N(0, σ²) noise.
pub fn init_decomposer(
    k_levels: usize,
    w_low: usize,
    w_high: usize,
    sigma: f64,
    leaky_slope: f64,
    seed: u64,
) -> Result<DecomposerParams<Tensor>> {
    if k_levels < 1 {
        return Err(Error::Config("decomposition level K must be ≥ 1".to_string()));
    }
    if w_low % 2 == 0 || w_high % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel widths must be odd, got w_low={w_low}, w_high={w_high}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut low_kernels = Vec::with_capacity(k_levels);
    let mut high_kernels = Vec::with_capacity(k_levels);
    for _ in 0..k_levels {
        let low: Vec<f64> = (0..w_low)
            .map(|_| 1.0 / w_low as f64 + sigma * gauss(&mut rng))
            .collect();
        let high: Vec<f64> = (0..w_high)
            .map(|j| {
                let ident = if j == w_high / 2 { 1.0 } else { 0.0 };
                ident + sigma * gauss(&mut rng)
            })
            .collect();
        low_kernels.push(Tensor::new(vec![w_low], low)?);
        high_kernels.push(Tensor::new(vec![w_high], high)?);
    }
    Ok(DecomposerParams { low_kernels, high_kernels, leaky_slope })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Decompose an N×T signal into the 2K band stack, ordered
/// [L¹, H¹, L², H², …]. Each band is an N×T node on the tape.
pub fn decompose(
    tape: &mut Tape,
    x: Var,
    params: &DecomposerParams<Var>,
) -> Result<Vec<Var>> {
    let k_levels = params.levels();
    if k_levels < 1 {
        return Err(Error::Config("decomposition level K must be ≥ 1".to_string()));
    }
    let mut bands = Vec::with_capacity(2 * k_levels);
    let mut low_prev = x;
    for k in 0..k_levels {
        let dilation = 1usize << k;
        let conv = tape.conv1d_rows(low_prev, params.low_kernels[k], dilation)?;
        let low = tape.leaky_relu(conv, params.leaky_slope);
        let residual = tape.sub(low_prev, low);
        let high = tape.conv1d_rows(residual, params.high_kernels[k], 1)?;
        bands.push(low);
        bands.push(high);
        low_prev = low;
    }
    Ok(bands)
}
