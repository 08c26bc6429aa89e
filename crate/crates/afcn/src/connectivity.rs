//! Per-band Pearson connectivity, thresholding into block-diagonal intra-band
//! structure, and learned cross-band coupling blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const EPS: f64 = 1e-8;

/// Differentiable Pearson correlation of an N×T signal on the tape.
///
/// Rows are centered and divided by their standard deviation (floored at ε),
/// then correlated as Z·Zᵀ/T. Gradient flows back into the band signal.
pub fn pearson(tape: &mut Tape, band: Var) -> Result<Var> {
    let (_, t) = {
        let v = tape.value(band);
        (v.rows(), v.cols())
    };
    if t < 2 {
        return Err(Error::Config("pearson needs T ≥ 2".to_string()));
    }
    let inv_t = 1.0 / t as f64;
    let sums = tape.row_sums(band);
    let means = tape.scale(sums, inv_t);
    let centered = tape.sub_col(band, means);
    let sq = tape.mul(centered, centered);
    let var_sums = tape.row_sums(sq);
    let vars = tape.scale(var_sums, inv_t);
    let stds = tape.sqrt(vars);
    let guarded = tape.max_const(stds, EPS);
    let inv_std = tape.recip(guarded);
    let z = tape.mul_col(centered, inv_std);
    let prod = tape.matmul_nt(z, z)?;
    Ok(tape.scale(prod, inv_t))
}

/// Forward-only Pearson matrix of an N×T tensor.
pub fn pearson_matrix(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let c = pearson(&mut tape, v).expect("pearson on plain tensor");
    tape.value(c).clone()
}

/// Statistics-driven cutoff: τ = μ + β·σ over off-diagonal |corr| entries.
/// Strict inequality; the diagonal (self-connection) is always retained.
pub fn dynamic_threshold(corr: &Tensor, beta: f64) -> (Tensor, f64) {
    let n = corr.rows();
    let mut abs_vals = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                abs_vals.push(corr.get2(i, j).abs());
            }
        }
    }
    let count = abs_vals.len().max(1) as f64;
    let mu = abs_vals.iter().sum::<f64>() / count;
    let var = abs_vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
    let tau = mu + beta * var.sqrt();

    let mut mask = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let keep = i == j || corr.get2(i, j).abs() > tau;
            mask.set2(i, j, if keep { 1.0 } else { 0.0 });
        }
    }
    (mask, tau)
}

/// Fixed-fraction baseline: keep the top ⌈q·N(N−1)⌉ off-diagonal entries by
/// |corr|, ties broken toward lexicographically smaller (i, j). Diagonal kept.
pub fn fixed_threshold_top_q(corr: &Tensor, q: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&q) || q == 0.0 {
        return Err(Error::Config(format!("top-q fraction must be in (0,1), got {q}")));
    }
    let n = corr.rows();
    let total = n * (n - 1);
    let keep = ((q * total as f64).ceil() as usize).min(total);

    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(total);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                entries.push((i, j, corr.get2(i, j).abs()));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut mask = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        mask.set2(i, i, 1.0);
    }
    for &(i, j, _) in entries.iter().take(keep) {
        mask.set2(i, j, 1.0);
    }
    Ok(mask)
}

/// Kronecker direct sum of per-band blocks on the tape. Each block is the
/// correlation matrix masked elementwise (values, not binary), unless
/// `binary` restores the literal 0/1 reading.
pub fn assemble_intra(
    tape: &mut Tape,
    corrs: &[Var],
    masks: &[Tensor],
    binary: bool,
) -> Var {
    assert_eq!(corrs.len(), masks.len());
    let n = masks[0].rows();
    let grid = corrs.len();
    let mut entries = Vec::with_capacity(grid);
    for (k, (&c, mask)) in corrs.iter().zip(masks).enumerate() {
        let block = if binary {
            tape.constant(mask.clone())
        } else {
            let m = tape.constant(mask.clone());
            tape.mul(c, m)
        };
        entries.push((k, k, block));
    }
    tape.assemble_blocks(n, grid, &entries)
}

/// Band-indexed source/target projections for cross-band coupling. One
/// source and one target matrix per band, reused across ordered pairs.
#[derive(Clone, Debug)]
pub struct CrossBandParams<P> {
    pub w_src: Vec<P>,
    pub w_tgt: Vec<P>,
}

impl<P> CrossBandParams<P> {
    pub fn n_bands(&self) -> usize {
        self.w_src.len()
    }
}

/// Fan-in scaled uniform(−1/√N, 1/√N) initialization of all 2·2K projection
/// matrices, each N×d.
pub fn init_cross_params(n_bands: usize, n: usize, d: usize, seed: u64) -> Result<CrossBandParams<Tensor>> {
    if d < 1 {
        return Err(Error::Config("attention dimension d must be ≥ 1".to_string()));
    }
    let bound = 1.0 / (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Tensor {
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    };
    let w_src = (0..n_bands).map(|_| draw(&mut rng)).collect();
    let w_tgt = (0..n_bands).map(|_| draw(&mut rng)).collect();
    Ok(CrossBandParams { w_src, w_tgt })
}

/// Dual-projection bilinear coupling: for every ordered band pair (s, m) with
/// s ≠ m, block(s,m) = (C⁽ˢ⁾·W_src⁽ˢ⁾)·(C⁽ᵐ⁾·W_tgt⁽ᵐ⁾)ᵀ, placed off-diagonal;
/// diagonal blocks stay zero. Returns the assembled matrix plus the
/// individual blocks (reused by the sparsity penalty).
pub fn cross_attention(
    tape: &mut Tape,
    corrs: &[Var],
    params: &CrossBandParams<Var>,
) -> Result<(Var, Vec<(usize, usize, Var)>)> {
    let n_bands = corrs.len();
    if params.n_bands() != n_bands {
        return Err(Error::Config(format!(
            "cross-band params cover {} bands, got {n_bands} correlation matrices",
            params.n_bands()
        )));
    }
    let n = tape.value(corrs[0]).rows();
    // source/target projections depend on one band each; compute once
    let mut src = Vec::with_capacity(n_bands);
    let mut tgt = Vec::with_capacity(n_bands);
    for k in 0..n_bands {
        src.push(tape.matmul(corrs[k], params.w_src[k])?);
        tgt.push(tape.matmul(corrs[k], params.w_tgt[k])?);
    }
    let mut blocks = Vec::new();
    for s in 0..n_bands {
        for m in 0..n_bands {
            if s == m {
                continue;
            }
            let block = tape.matmul_nt(src[s], tgt[m])?;
            blocks.push((s, m, block));
        }
    }
    let assembled = tape.assemble_blocks(n, n_bands, &blocks);
    Ok((assembled, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pearson_identical_rows_correlate_to_one() {
        let row: Vec<f64> = vec![1.0, 3.0, -2.0, 0.5, 4.0, -1.0, 2.0, 0.0];
        let mut data = row.clone();
        data.extend(&row);
        let c = pearson_matrix(&Tensor::new(vec![2, 8], data).unwrap());
        assert!((c.get2(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pearson_negated_rows_correlate_to_minus_one() {
        let row: Vec<f64> = vec![1.0, 3.0, -2.0, 0.5, 4.0, -1.0, 2.0, 0.0];
        let mut data = row.clone();
        data.extend(row.iter().map(|v| -v));
        let c = pearson_matrix(&Tensor::new(vec![2, 8], data).unwrap());
        assert!((c.get2(0, 1) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn pearson_matches_covariance_oracle() {
        // 3 ROIs, T=5, hand-picked integers; spreadsheet-style covariance
        let x = Tensor::new(
            vec![3, 5],
            vec![1.0, 2.0, 4.0, 3.0, 5.0, 2.0, 1.0, 3.0, 5.0, 4.0, 9.0, 7.0, 5.0, 3.0, 1.0],
        )
        .unwrap();
        let c = pearson_matrix(&x);
        let oracle = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov = a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / n;
            let sa = (a.iter().map(|u| (u - ma) * (u - ma)).sum::<f64>() / n).sqrt();
            let sb = (b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n).sqrt();
            cov / (sa.max(EPS) * sb.max(EPS))
        };
        let rows: Vec<&[f64]> = (0..3).map(|i| &x.data()[i * 5..(i + 1) * 5]).collect();
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (c.get2(i, j) - oracle(rows[i], rows[j])).abs() < 1e-12,
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn pearson_symmetric_unit_diagonal_bounded() {
        let c = pearson_matrix(&rand_matrix(vec![6, 40], 3));
        for i in 0..6 {
            assert!((c.get2(i, i) - 1.0).abs() < 1e-6);
            for j in 0..6 {
                assert!((c.get2(i, j) - c.get2(j, i)).abs() < 1e-9);
                assert!(c.get2(i, j).abs() <= 1.0 + 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let x = rand_matrix(vec![4, 32], 17);
            let mut scaled = x.clone();
            for v in scaled.data_mut() {
                *v = scale * *v + shift;
            }
            let c1 = pearson_matrix(&x);
            let c2 = pearson_matrix(&scaled);
            prop_assert!(c1.max_abs_diff(&c2) < 1e-9);
        }

        #[test]
        fn dynamic_mask_invariant_under_offdiag_scaling(c in 1e-3f64..1e3) {
            let corr = pearson_matrix(&rand_matrix(vec![5, 30], 23));
            let mut scaled = corr.clone();
            for i in 0..5 {
                for j in 0..5 {
                    if i != j {
                        let v = scaled.get2(i, j);
                        scaled.set2(i, j, c * v);
                    }
                }
            }
            let (m1, _) = dynamic_threshold(&corr, 0.5);
            let (m2, _) = dynamic_threshold(&scaled, 0.5);
            prop_assert_eq!(m1.data(), m2.data());
        }
    }

    #[test]
    fn dynamic_threshold_equal_offdiag_keeps_only_diagonal() {
        let n = 4;
        let mut corr = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in 0..n {
                // 0.25 is exactly representable, so μ and σ come out exact
                corr.set2(i, j, if i == j { 1.0 } else { 0.25 });
            }
        }
        let (mask, tau) = dynamic_threshold(&corr, 0.5);
        assert_eq!(tau, 0.25);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(mask.get2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dynamic_threshold_matches_hand_enumeration() {
        // 4×4 symmetric correlation with hand-computed μ and σ
        let vals = [
            [1.0, 0.8, 0.1, -0.5],
            [0.8, 1.0, 0.3, 0.2],
            [0.1, 0.3, 1.0, -0.9],
            [-0.5, 0.2, -0.9, 1.0],
        ];
        let mut corr = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                corr.set2(i, j, vals[i][j]);
            }
        }
        let mut abs: Vec<f64> = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    abs.push(vals[i][j].abs());
                }
            }
        }
        let mu = abs.iter().sum::<f64>() / 12.0;
        let sigma = (abs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 12.0).sqrt();
        let tau = mu + 0.5 * sigma;
        let (mask, got_tau) = dynamic_threshold(&corr, 0.5);
        assert!((got_tau - tau).abs() < 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j || vals[i][j].abs() > tau { 1.0 } else { 0.0 };
                assert_eq!(mask.get2(i, j), want, "({i},{j})");
            }
        }
    }

    #[test]
    fn top_q_keeps_expected_count() {
        let corr = pearson_matrix(&rand_matrix(vec![4, 30], 5));
        let mask = fixed_threshold_top_q(&corr, 0.25).unwrap();
        let off: f64 = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| mask.get2(i, j))
            .sum();
        assert_eq!(off as usize, 3); // ⌈0.25·12⌉
    }

    #[test]
    fn top_q_near_one_keeps_everything() {
        let corr = pearson_matrix(&rand_matrix(vec![4, 30], 6));
        let mask = fixed_threshold_top_q(&corr, 0.999).unwrap();
        assert!(mask.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn top_q_tie_prefers_lexicographic() {
        let mut corr = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            corr.set2(i, i, 1.0);
        }
        // two equal magnitudes at the keep boundary: (0,1)/(1,0) at 0.5 and
        // (0,2)/(2,0) at 0.5; keep 1 of 6 → only (0,1) survives
        corr.set2(0, 1, 0.5);
        corr.set2(1, 0, 0.5);
        corr.set2(0, 2, 0.5);
        corr.set2(2, 0, 0.5);
        let mask = fixed_threshold_top_q(&corr, 0.1).unwrap(); // ⌈0.6⌉ = 1
        assert_eq!(mask.get2(0, 1), 1.0);
        assert_eq!(mask.get2(0, 2), 0.0);
        assert_eq!(mask.get2(1, 0), 0.0);
    }

    #[test]
    fn assemble_intra_is_block_diagonal() {
        let mut tape = Tape::new();
        let a = rand_matrix(vec![2, 2], 1);
        let b = rand_matrix(vec![2, 2], 2);
        let ca = tape.constant(a.clone());
        let cb = tape.constant(b.clone());
        let ones = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let out = assemble_intra(&mut tape, &[ca, cb], &[ones.clone(), ones], false);
        let v = tape.value(out);
        assert_eq!(v.shape(), &[4, 4]);
        // block round-trip
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(v.get2(i, j), a.get2(i, j));
                assert_eq!(v.get2(2 + i, 2 + j), b.get2(i, j));
                assert_eq!(v.get2(i, 2 + j), 0.0);
                assert_eq!(v.get2(2 + i, j), 0.0);
            }
        }
    }

    #[test]
    fn cross_attention_zero_weights_zero_output() {
        let mut tape = Tape::new();
        let corrs: Vec<Var> = (0..2)
            .map(|s| {
                let c = pearson_matrix(&rand_matrix(vec![3, 20], s));
                tape.constant(c)
            })
            .collect();
        let zero = Tensor::zeros(vec![3, 4]);
        let params = CrossBandParams {
            w_src: vec![tape.param(&zero), tape.param(&zero)],
            w_tgt: vec![tape.param(&zero), tape.param(&zero)],
        };
        let (out, _) = cross_attention(&mut tape, &corrs, &params).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_attention_matches_hand_product() {
        // K=1 (bands L¹,H¹), N=2, d=1, hand-picked values
        let c0 = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let c1 = Tensor::new(vec![2, 2], vec![1.0, -0.2, -0.2, 1.0]).unwrap();
        let ws0 = Tensor::new(vec![2, 1], vec![2.0, 1.0]).unwrap();
        let ws1 = Tensor::new(vec![2, 1], vec![0.5, -1.0]).unwrap();
        let wt0 = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let wt1 = Tensor::new(vec![2, 1], vec![-0.5, 2.0]).unwrap();

        let mut tape = Tape::new();
        let v0 = tape.constant(c0.clone());
        let v1 = tape.constant(c1.clone());
        let params = CrossBandParams {
            w_src: vec![tape.param(&ws0), tape.param(&ws1)],
            w_tgt: vec![tape.param(&wt0), tape.param(&wt1)],
        };
        let (out, _) = cross_attention(&mut tape, &[v0, v1], &params).unwrap();
        let v = tape.value(out);

        // hand matmul: S0 = C0·Ws0, M1 = C1·Wt1, block(0,1) = S0·M1ᵀ
        let s0 = [
            c0.get2(0, 0) * 2.0 + c0.get2(0, 1) * 1.0,
            c0.get2(1, 0) * 2.0 + c0.get2(1, 1) * 1.0,
        ];
        let m1 = [
            c1.get2(0, 0) * -0.5 + c1.get2(0, 1) * 2.0,
            c1.get2(1, 0) * -0.5 + c1.get2(1, 1) * 2.0,
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((v.get2(i, 2 + j) - s0[i] * m1[j]).abs() < 1e-12);
            }
        }
        // diagonal blocks zero
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(v.get2(i, j), 0.0);
                assert_eq!(v.get2(2 + i, 2 + j), 0.0);
            }
        }
    }

    #[test]
    fn cross_attention_blocks_are_asymmetric() {
        let mut tape = Tape::new();
        let corrs: Vec<Var> = (0..2)
            .map(|s| tape.constant(pearson_matrix(&rand_matrix(vec![3, 20], 40 + s))))
            .collect();
        let p = init_cross_params(2, 3, 4, 77).unwrap();
        let params = CrossBandParams {
            w_src: p.w_src.iter().map(|t| tape.param(t)).collect(),
            w_tgt: p.w_tgt.iter().map(|t| tape.param(t)).collect(),
        };
        let (out, _) = cross_attention(&mut tape, &corrs, &params).unwrap();
        let v = tape.value(out);
        let mut differs = false;
        for i in 0..3 {
            for j in 0..3 {
                if (v.get2(i, 3 + j) - v.get2(3 + j, i)).abs() > 1e-9 {
                    differs = true;
                }
            }
        }
        assert!(differs, "block(s,m) should not equal block(m,s)ᵀ for generic weights");
    }

    #[test]
    fn init_cross_params_shapes_and_determinism() {
        let a = init_cross_params(4, 116, 8, 3).unwrap();
        let b = init_cross_params(4, 116, 8, 3).unwrap();
        assert_eq!(a.w_src.len(), 4);
        assert_eq!(a.w_src[0].shape(), &[116, 8]);
        for (x, y) in a.w_src.iter().zip(&b.w_src) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        use crate::tensor::finite_diff_check;
        let c0 = pearson_matrix(&rand_matrix(vec![3, 24], 50));
        let c1 = pearson_matrix(&rand_matrix(vec![3, 24], 51));
        let init = init_cross_params(2, 3, 2, 52).unwrap();

        let run = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let v0 = tape.constant(c0.clone());
            let v1 = tape.constant(c1.clone());
            let params = CrossBandParams {
                w_src: vec![tape.param(&ps[0]), tape.param(&ps[1])],
                w_tgt: vec![tape.param(&ps[2]), tape.param(&ps[3])],
            };
            let (out, _) = cross_attention(&mut tape, &[v0, v1], &params).unwrap();
            let sq = tape.mul(out, out);
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            let grads = params
                .w_src
                .iter()
                .chain(&params.w_tgt)
                .map(|v| tape.grad(*v).unwrap())
                .collect();
            (tape.value(loss).item(), grads)
        };
        let mut flat = vec![
            init.w_src[0].clone(),
            init.w_src[1].clone(),
            init.w_tgt[0].clone(),
            init.w_tgt[1].clone(),
        ];
        let (_, grads) = run(&flat);
        let err = finite_diff_check(&mut flat, &grads, |ps| run(ps).0, 1e-5, 60, 13);
        assert!(err < 1e-4, "cross-attention FD error {err}");
    }
}
