//! End-to-end optimization: Adam with L2 weight decay, early stopping on
//! validation AUROC, and k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{split_kfold, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{bind, forward_subject, init_model, ModelParams};
use crate::tensor::{Tape, Tensor};

/// Adam moment buffers, aligned with `ModelParams::tensors()`.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One Adam update with bias correction. Weight decay enters as an additive
/// L2 gradient term `wd·p` before the moment update (classic Adam-with-L2,
/// not decoupled).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) {
    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for k in 0..p.len() {
            let grad = g.data()[k] + weight_decay * p.data()[k];
            let mk = b1 * m.data()[k] + (1.0 - b1) * grad;
            let vk = b2 * v.data()[k] + (1.0 - b2) * grad * grad;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Mann–Whitney AUROC in percent. Binary uses class-1 scores with ties at
/// 1/2; multiclass macro-averages one-vs-rest over classes present. Errors
/// when only one class is present.
pub fn auroc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() < 2 {
        return Err(Error::Data("auroc needs ≥ 2 scored samples".to_string()));
    }
    let n_classes = scores[0].len();
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Data("auroc undefined with a single class present".to_string()));
    }
    if n_classes == 2 {
        return Ok(binary_auroc(scores.iter().map(|s| s[1]), labels, 1) * 100.0);
    }
    let mut total = 0.0;
    let mut counted = 0;
    for &c in &distinct {
        total += binary_auroc(scores.iter().map(|s| s[c]), labels, c);
        counted += 1;
    }
    Ok(total / counted as f64 * 100.0)
}

fn binary_auroc(scores: impl Iterator<Item = f64>, labels: &[usize], positive: usize) -> f64 {
    let scores: Vec<f64> = scores.collect();
    let mut pairs = 0.0;
    let mut wins = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != positive {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == positive {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| argmax(s) == l)
        .count();
    correct as f64 / labels.len() as f64 * 100.0
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub div: f64,
    pub sparse: f64,
    pub val_acc: f64,
    /// NaN when validation AUROC was undefined that epoch.
    pub val_auroc: f64,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub test_acc: f64,
    pub test_auroc: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRow>,
    pub params: ModelParams,
}

fn class_weights(dataset: &Dataset, idx: &[usize], enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; dataset.n_classes];
    }
    let mut counts = vec![0usize; dataset.n_classes];
    for &i in idx {
        counts[dataset.subjects[i].label] += 1;
    }
    let total: usize = counts.iter().sum();
    let k = counts.iter().filter(|&&c| c > 0).count() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total as f64 / (k * c as f64)
            }
        })
        .collect()
}

/// Softmax class scores for a set of subjects under fixed parameters.
pub fn score_subjects(
    dataset: &Dataset,
    idx: &[usize],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let weights = cfg.weights();
    let mut scores = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &dataset.subjects[i];
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params);
        let out = forward_subject(&mut tape, &bound, &cfg.model, &weights, &s.x, s.label, 1.0, None)?;
        scores.push(Tape::softmax_values(tape.value(out.logits)));
        labels.push(s.label);
    }
    Ok((scores, labels))
}

/// Train on an explicit split. Loops epochs of seeded-shuffled minibatches;
/// after each epoch the validation AUROC drives checkpointing and early
/// stopping; the best-validation checkpoint (never the final epoch) is
/// evaluated on the test shard.
pub fn train_fold_with_split(
    dataset: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    fold: usize,
    fold_seed: u64,
) -> Result<FoldResult> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Config(format!("fold {fold}: empty split shard")));
    }
    let weights = cfg.weights();
    let ce_w = class_weights(dataset, &split.train, cfg.losses.class_weighted);

    let mut params = init_model(&cfg.model, dataset.atlas_size, dataset.n_classes, fold_seed)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed.wrapping_add(0x5eed));

    let mut best_params = params.clone();
    let mut best_auroc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs_since_best = 0;
    let mut rows = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);

        let mut sum_total = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_div = 0.0;
        let mut sum_sparse = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            let mut totals = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &dataset.subjects[i];
                let out = forward_subject(
                    &mut tape,
                    &bound,
                    &cfg.model,
                    &weights,
                    &s.x,
                    s.label,
                    ce_w[s.label],
                    None,
                )?;
                sum_total += tape.value(out.total).item();
                sum_ce += tape.value(out.ce).item();
                sum_div += out.div.map_or(0.0, |d| tape.value(d).item());
                sum_sparse += out.sparse.map_or(0.0, |s| tape.value(s).item());
                totals.push(out.total);
            }
            let batch_sum = tape.add_n(&totals);
            let batch_loss = tape.scale(batch_sum, 1.0 / batch.len() as f64);
            tape.backward(batch_loss)?;
            let grads = bound.collect_grads(&tape, &params);
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                cfg.optim.lr,
                cfg.optim.weight_decay,
                (cfg.optim.beta1, cfg.optim.beta2),
                cfg.optim.eps,
            );
        }
        let n_train = split.train.len() as f64;

        let (val_scores, val_labels) = score_subjects(dataset, &split.val, &params, cfg)?;
        let val_acc = accuracy(&val_scores, &val_labels);
        let val_auroc = auroc(&val_scores, &val_labels);

        rows.push(EpochRow {
            epoch,
            train_loss: sum_total / n_train,
            ce: sum_ce / n_train,
            div: sum_div / n_train,
            sparse: sum_sparse / n_train,
            val_acc,
            val_auroc: *val_auroc.as_ref().unwrap_or(&f64::NAN),
        });

        // undefined AUROC (single-class shard) skips the early-stop update
        if let Ok(a) = val_auroc {
            if a > best_auroc {
                best_auroc = a;
                best_epoch = epoch;
                best_params = params.clone();
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
            }
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    let (test_scores, test_labels) = score_subjects(dataset, &split.test, &best_params, cfg)?;
    let test_acc = accuracy(&test_scores, &test_labels);
    let test_auroc = auroc(&test_scores, &test_labels)?;

    Ok(FoldResult {
        fold,
        test_acc,
        test_auroc,
        best_epoch,
        epochs: rows,
        params: best_params,
    })
}

/// Train one fold of k-fold CV using the dataset's stratified shards.
/// Folds re-seed as `base_seed + fold` so they are independent and
/// parallel-safe.
pub fn train_fold(dataset: &Dataset, fold: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    let split = split_kfold(dataset, cfg.folds, fold, cfg.seed)?;
    train_fold_with_split(dataset, &split, cfg, fold, cfg.seed.wrapping_add(fold as u64))
}

#[derive(Clone, Debug)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_auroc: f64,
    pub std_auroc: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run all folds; honors `AFCN_THREADS` for fold-level parallelism (per-fold
/// seeding makes parallel and sequential execution produce identical
/// summaries).
pub fn run_cv(dataset: &Dataset, cfg: &TrainConfig) -> Result<CvSummary> {
    let threads: usize = std::env::var("AFCN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
        .max(1);
    let folds: Vec<FoldResult> = if threads <= 1 {
        (0..cfg.folds)
            .map(|f| train_fold(dataset, f, cfg).map_err(|e| fold_err(f, e)))
            .collect::<Result<_>>()?
    } else {
        run_folds_parallel(dataset, cfg, threads)?
    };
    let accs: Vec<f64> = folds.iter().map(|f| f.test_acc).collect();
    let aurocs: Vec<f64> = folds.iter().map(|f| f.test_auroc).collect();
    let (mean_acc, std_acc) = mean_std(&accs);
    let (mean_auroc, std_auroc) = mean_std(&aurocs);
    Ok(CvSummary { folds, mean_acc, std_acc, mean_auroc, std_auroc })
}

fn fold_err(fold: usize, e: Error) -> Error {
    Error::Data(format!("fold {fold}: {e}"))
}

fn run_folds_parallel(dataset: &Dataset, cfg: &TrainConfig, threads: usize) -> Result<Vec<FoldResult>> {
    let mut results: Vec<Option<Result<FoldResult>>> = (0..cfg.folds).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<&mut [Option<Result<FoldResult>>]> =
            results.chunks_mut(cfg.folds.div_ceil(threads)).collect();
        let mut start = 0;
        for chunk in chunks {
            let len = chunk.len();
            let first = start;
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let f = first + off;
                    *slot = Some(train_fold(dataset, f, cfg).map_err(|e| fold_err(f, e)));
                }
            });
            start += len;
        }
    });
    results.into_iter().map(|r| r.unwrap()).collect()
}

/// CSV of per-epoch training diagnostics for one fold.
pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,train_loss,ce,div,sparse,val_acc,val_auroc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.ce, r.div, r.sparse, r.val_acc, r.val_auroc
        ));
    }
    out
}

/// CSV of per-fold test metrics with mean/std footer rows.
pub fn cv_summary_csv(summary: &CvSummary) -> String {
    let mut out = String::from("fold,test_acc,test_auroc,best_epoch\n");
    for f in &summary.folds {
        out.push_str(&format!("{},{},{},{}\n", f.fold, f.test_acc, f.test_auroc, f.best_epoch));
    }
    out.push_str(&format!("mean,{},{},\n", summary.mean_acc, summary.mean_auroc));
    out.push_str(&format!("std,{},{},\n", summary.std_acc, summary.std_auroc));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth_band_dataset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            folds: 3,
            model: ModelConfig {
                attn_dim: 4,
                gcn_hidden: 8,
                gcn_out: 8,
                mlp_hidden: 16,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_grad_only_weight_decay_shrinkage() {
        let cfg = tiny_cfg();
        let mut params = init_model(&cfg.model, 4, 2, 1).unwrap();
        let before: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let grads: Vec<Tensor> = before.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let mut state = AdamState::new(&params);
        let lr = 1e-3;
        adam_step(&mut params, &grads, &mut state, lr, 1e-2, (0.9, 0.999), 1e-8);
        // with constant gradient wd·x the first Adam step is ≈ lr·sign(x),
        // so check direction (toward zero) and bound, not strict shrinkage
        for (b, a) in before.iter().zip(params.tensors()) {
            for (x, y) in b.data().iter().zip(a.data()) {
                if *x == 0.0 {
                    assert_eq!(*y, 0.0);
                } else {
                    let step = y - x;
                    assert!(step * x < 0.0, "step should oppose {x}, got {step}");
                    assert!(step.abs() <= lr * 1.0001, "step {step} exceeds lr bound");
                }
            }
        }
    }

    #[test]
    fn adam_matches_three_step_hand_recursion() {
        // single scalar parameter, constant gradient; independent recursion
        let (lr, wd, b1, b2, eps) = (0.1, 0.0, 0.9, 0.999, 1e-8);
        let g = 0.5;
        let mut p_hand = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_pow(b1, t));
            let v_hat = v / (1.0 - b1_pow(b2, t));
            p_hand -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        fn b1_pow(b: f64, t: u32) -> f64 {
            b.powi(t as i32)
        }

        let cfg = tiny_cfg();
        let mut params = init_model(&cfg.model, 4, 2, 1).unwrap();
        params.lambda = Tensor::scalar(2.0);
        let mut state = AdamState::new(&params);
        let grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let names = params.names();
                if names[i] == "lambda" {
                    Tensor::scalar(g)
                } else {
                    Tensor::zeros(t.shape().to_vec())
                }
            })
            .collect();
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut state, lr, wd, (b1, b2), eps);
        }
        assert!((params.lambda.item() - p_hand).abs() < 1e-12);
    }

    #[test]
    fn adam_identical_params_stay_identical() {
        let g = Tensor::new(vec![2], vec![0.3, 0.3]).unwrap();
        let cfg = tiny_cfg();
        let mut params = init_model(&cfg.model, 4, 2, 1).unwrap();
        params.head.b2 = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let mut state = AdamState::new(&params);
        let grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if params.names()[i] == "head.b2" {
                    g.clone()
                } else {
                    Tensor::zeros(t.shape().to_vec())
                }
            })
            .collect();
        adam_step(&mut params, &grads, &mut state, 1e-3, 1e-4, (0.9, 0.999), 1e-8);
        assert_eq!(params.head.b2.data()[0], params.head.b2.data()[1]);
    }

    #[test]
    fn auroc_perfect_separation() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.2, 0.8], vec![0.1, 0.9]];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 100.0);
    }

    #[test]
    fn auroc_chance_level_on_label_independent_scores() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let p: f64 = rng.gen_range(0.0..1.0);
                vec![1.0 - p, p]
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - 50.0).abs() < 5.0, "chance AUROC {a}");
    }

    #[test]
    fn auroc_tie_case_matches_pairwise_oracle() {
        // 6 samples, one tied score across classes
        let s = [0.9, 0.7, 0.5, 0.5, 0.3, 0.1];
        let labels = vec![1, 1, 1, 0, 0, 0];
        let scores: Vec<Vec<f64>> = s.iter().map(|&p| vec![1.0 - p, p]).collect();
        // enumerate all pos/neg pairs by hand
        let mut wins = 0.0;
        for i in 0..3 {
            for j in 3..6 {
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
        let want = wins / 9.0 * 100.0;
        assert_eq!(auroc(&scores, &labels).unwrap(), want);
    }

    #[test]
    fn auroc_single_class_errors() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2]];
        assert!(auroc(&scores, &[0, 0]).is_err());
    }

    #[test]
    fn zero_epochs_returns_untrained_metrics() {
        let (ds, _) = synth_band_dataset(12, 8, 64, 2, 0.3, 3).unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..tiny_cfg() };
        let r = train_fold(&ds, 0, &cfg).unwrap();
        assert_eq!(r.best_epoch, 0);
        assert!(r.epochs.is_empty());
        assert!(r.test_acc.is_finite());
    }

    #[test]
    fn train_fold_is_deterministic() {
        let (ds, _) = synth_band_dataset(12, 6, 64, 2, 0.3, 3).unwrap();
        let cfg = TrainConfig { max_epochs: 2, ..tiny_cfg() };
        let a = train_fold(&ds, 0, &cfg).unwrap();
        let b = train_fold(&ds, 0, &cfg).unwrap();
        assert_eq!(a.test_acc, b.test_acc);
        assert_eq!(a.test_auroc, b.test_auroc);
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
    }

    #[test]
    fn early_stopping_bounds_epoch_count() {
        let (ds, _) = synth_band_dataset(12, 6, 64, 2, 0.3, 3).unwrap();
        let cfg = TrainConfig { max_epochs: 100, patience: 3, ..tiny_cfg() };
        let r = train_fold(&ds, 0, &cfg).unwrap();
        assert!(
            r.epochs.len() <= r.best_epoch + cfg.patience,
            "{} epochs vs best {} + patience {}",
            r.epochs.len(),
            r.best_epoch,
            cfg.patience
        );
    }

    #[test]
    fn cv_summary_mean_std_arithmetic() {
        let mk = |fold: usize, acc: f64| FoldResult {
            fold,
            test_acc: acc,
            test_auroc: acc,
            best_epoch: 1,
            epochs: vec![],
            params: init_model(&tiny_cfg().model, 4, 2, 0).unwrap(),
        };
        let folds = vec![mk(0, 70.0), mk(1, 80.0)];
        let accs: Vec<f64> = folds.iter().map(|f| f.test_acc).collect();
        let (mean, std) = mean_std(&accs);
        assert_eq!(mean, 75.0);
        assert_eq!(std, 5.0);
    }

    #[test]
    fn parallel_and_sequential_cv_agree() {
        let (ds, _) = synth_band_dataset(12, 6, 64, 2, 0.3, 3).unwrap();
        let cfg = TrainConfig { max_epochs: 1, ..tiny_cfg() };
        std::env::remove_var("AFCN_THREADS");
        let seq = run_cv(&ds, &cfg).unwrap();
        std::env::set_var("AFCN_THREADS", "2");
        let par = run_cv(&ds, &cfg).unwrap();
        std::env::remove_var("AFCN_THREADS");
        assert_eq!(cv_summary_csv(&seq), cv_summary_csv(&par));
    }
}
