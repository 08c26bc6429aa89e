//! Cross-entropy, band-diversity, and cross-band sparsity losses.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Tape, Var};

const NORM_EPS: f64 = 1e-8;

/// Trade-off weights on the diversity and sparsity terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.1, lambda2: 0.001 }
    }
}

/// `−log softmax(logits)[label]`, max-stabilized.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    tape.softmax_ce(logits, label)
}

/// Mean pairwise cosine similarity over the 2K band embeddings: pushing it
/// down spreads the bands apart. Norms are guarded at ε so zero vectors
/// contribute cosine 0.
pub fn diversity_loss(tape: &mut Tape, bands: Var) -> Var {
    let b = tape.value(bands).rows();
    assert!(b >= 2, "diversity loss needs at least two bands");
    let rows: Vec<Var> = (0..b).map(|i| tape.slice_rows(bands, i, i + 1)).collect();
    let norms: Vec<Var> = rows
        .iter()
        .map(|&r| {
            let sq = tape.mul(r, r);
            let s = tape.sum(sq);
            let n = tape.sqrt(s);
            tape.max_const(n, NORM_EPS)
        })
        .collect();
    let mut terms = Vec::new();
    for i in 0..b {
        for j in (i + 1)..b {
            let prod = tape.mul(rows[i], rows[j]);
            let dot = tape.sum(prod);
            let denom = tape.mul(norms[i], norms[j]);
            let inv = tape.recip(denom);
            terms.push(tape.mul(dot, inv));
        }
    }
    let total = tape.add_n(&terms);
    // ordered-pair mean: each unordered pair counts twice
    tape.scale(total, 2.0 / (b * (b - 1)) as f64)
}

/// Mean entrywise L1 norm of the cross-band blocks, normalized by N² per
/// block so the weight is insensitive to K and N.
pub fn sparsity_loss(tape: &mut Tape, blocks: &[(usize, usize, Var)], n: usize) -> Var {
    assert!(!blocks.is_empty(), "sparsity loss needs cross-band blocks");
    let sums: Vec<Var> = blocks.iter().map(|&(_, _, b)| tape.abs_sum(b)).collect();
    let total = tape.add_n(&sums);
    tape.scale(total, 1.0 / (blocks.len() * n * n) as f64)
}

/// `L_total = L_ce + λ₁·L_div + λ₂·L_sparse`; absent terms drop out.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    div: Option<Var>,
    sparse: Option<Var>,
    weights: &LossWeights,
) -> Var {
    let mut terms = vec![ce];
    if let Some(d) = div {
        terms.push(tape.scale(d, weights.lambda1));
    }
    if let Some(s) = sparse {
        terms.push(tape.scale(s, weights.lambda2));
    }
    tape.add_n(&terms)
}
