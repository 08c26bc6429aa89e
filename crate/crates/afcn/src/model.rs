//! End-to-end model: parameter container, tape binding, and the per-subject
//! forward pass from raw signal to weighted loss.

use crate::config::{DtMode, ModelConfig};
use crate::connectivity::{
    self, assemble_intra, cross_attention, dynamic_threshold, fixed_threshold_top_q, pearson,
    CrossBandParams,
};
use crate::decompose::{decompose, init_decomposer, DecomposerParams};
use crate::error::{Error, Result};
use crate::gcn::{build_unified, gcn_forward, init_gcn, GcnParams};
use crate::head::{classify, init_head, readout, HeadParams};
use crate::losses::{cross_entropy, diversity_loss, sparsity_loss, total_loss, LossWeights};
use crate::tensor::{Tape, Tensor, Var};

/// All learnable tensors of one model instance.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub decomposer: DecomposerParams<Tensor>,
    pub cross: CrossBandParams<Tensor>,
    pub lambda: Tensor,
    pub gcn: GcnParams<Tensor>,
    pub head: HeadParams<Tensor>,
}

/// Tape handles for one forward pass, aligned with [`ModelParams::tensors`].
pub struct BoundModel {
    pub decomposer: DecomposerParams<Var>,
    pub cross: CrossBandParams<Var>,
    pub lambda: Var,
    pub gcn: GcnParams<Var>,
    pub head: HeadParams<Var>,
}

impl ModelParams {
    /// Flat view in a fixed order shared by binding, gradient collection,
    /// optimizer state, and checkpoints.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        out.extend(self.decomposer.low_kernels.iter());
        out.extend(self.decomposer.high_kernels.iter());
        out.extend(self.cross.w_src.iter());
        out.extend(self.cross.w_tgt.iter());
        out.push(&self.lambda);
        out.extend(self.gcn.layers.iter());
        out.extend([&self.head.w1, &self.head.b1, &self.head.w2, &self.head.b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.decomposer.low_kernels.iter_mut());
        out.extend(self.decomposer.high_kernels.iter_mut());
        out.extend(self.cross.w_src.iter_mut());
        out.extend(self.cross.w_tgt.iter_mut());
        out.push(&mut self.lambda);
        out.extend(self.gcn.layers.iter_mut());
        out.extend([
            &mut self.head.w1,
            &mut self.head.b1,
            &mut self.head.w2,
            &mut self.head.b2,
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.decomposer.low_kernels.len() {
            out.push(format!("dec.low.{i}"));
        }
        for i in 0..self.decomposer.high_kernels.len() {
            out.push(format!("dec.high.{i}"));
        }
        for i in 0..self.cross.w_src.len() {
            out.push(format!("cross.src.{i}"));
        }
        for i in 0..self.cross.w_tgt.len() {
            out.push(format!("cross.tgt.{i}"));
        }
        out.push("lambda".to_string());
        for i in 0..self.gcn.layers.len() {
            out.push(format!("gcn.{i}"));
        }
        out.extend(["head.w1", "head.b1", "head.w2", "head.b2"].map(String::from));
        out
    }

    pub fn n_bands(&self) -> usize {
        if self.decomposer.low_kernels.is_empty() {
            1
        } else {
            2 * self.decomposer.low_kernels.len()
        }
    }
}

/// Register every parameter as a tape leaf, in `tensors()` order.
pub fn bind(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    BoundModel {
        decomposer: DecomposerParams {
            low_kernels: params.decomposer.low_kernels.iter().map(|t| tape.param(t)).collect(),
            high_kernels: params.decomposer.high_kernels.iter().map(|t| tape.param(t)).collect(),
            leaky_slope: params.decomposer.leaky_slope,
        },
        cross: CrossBandParams {
            w_src: params.cross.w_src.iter().map(|t| tape.param(t)).collect(),
            w_tgt: params.cross.w_tgt.iter().map(|t| tape.param(t)).collect(),
        },
        lambda: tape.param(&params.lambda),
        gcn: GcnParams {
            layers: params.gcn.layers.iter().map(|t| tape.param(t)).collect(),
        },
        head: HeadParams {
            w1: tape.param(&params.head.w1),
            b1: tape.param(&params.head.b1),
            w2: tape.param(&params.head.w2),
            b2: tape.param(&params.head.b2),
        },
    }
}

impl BoundModel {
    /// Gradients in `tensors()` order; parameters the loss never touched get
    /// zero gradients.
    pub fn collect_grads(&self, tape: &Tape, params: &ModelParams) -> Vec<Tensor> {
        let vars = self.vars();
        vars.iter()
            .zip(params.tensors())
            .map(|(v, t)| {
                tape.grad(**v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    fn vars(&self) -> Vec<&Var> {
        let mut out: Vec<&Var> = Vec::new();
        out.extend(self.decomposer.low_kernels.iter());
        out.extend(self.decomposer.high_kernels.iter());
        out.extend(self.cross.w_src.iter());
        out.extend(self.cross.w_tgt.iter());
        out.push(&self.lambda);
        out.extend(self.gcn.layers.iter());
        out.extend([&self.head.w1, &self.head.b1, &self.head.w2, &self.head.b2]);
        out
    }
}

/// Seeded initialization of all parameter groups for the configured shapes.
pub fn init_model(cfg: &ModelConfig, n_roi: usize, n_classes: usize, seed: u64) -> Result<ModelParams> {
    let n_bands = if cfg.single_band { 1 } else { 2 * cfg.k_levels };
    let decomposer = if cfg.single_band {
        DecomposerParams { low_kernels: vec![], high_kernels: vec![], leaky_slope: cfg.leaky_slope }
    } else {
        init_decomposer(cfg.k_levels, cfg.w_low, cfg.w_high, cfg.init_noise, cfg.leaky_slope, seed)?
    };
    let cross = if n_bands > 1 {
        connectivity::init_cross_params(n_bands, n_roi, cfg.attn_dim, seed.wrapping_add(1))?
    } else {
        CrossBandParams { w_src: vec![], w_tgt: vec![] }
    };
    let gcn = init_gcn(&[n_roi, cfg.gcn_hidden, cfg.gcn_out], seed.wrapping_add(2))?;
    let head = init_head(n_bands * cfg.gcn_out, cfg.mlp_hidden, n_classes, seed.wrapping_add(3));
    Ok(ModelParams {
        decomposer,
        cross,
        lambda: Tensor::scalar(cfg.lambda_init),
        gcn,
        head,
    })
}

/// Everything the trainer needs from one subject's forward pass.
pub struct SubjectForward {
    pub total: Var,
    pub ce: Var,
    pub div: Option<Var>,
    pub sparse: Option<Var>,
    pub logits: Var,
    pub a_unified: Var,
    /// Per-band masks actually used (handy for freezing in gradient checks).
    pub masks: Vec<Tensor>,
}

fn band_mask(corr: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    match cfg.dt_mode {
        DtMode::Dynamic => Ok(dynamic_threshold(corr, cfg.dt_beta).0),
        DtMode::Fixed25 => fixed_threshold_top_q(corr, cfg.top_q),
    }
}

/// Full forward pass for one subject: decompose, correlate, threshold,
/// couple, propagate, read out, classify, and combine the losses.
///
/// `ce_weight` scales the cross-entropy term (1.0 unless class weighting is
/// enabled). `frozen_masks` substitutes precomputed threshold masks so the
/// loss is a smooth function of the parameters during finite-difference
/// verification; normally pass `None`.
pub fn forward_subject(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    weights: &LossWeights,
    x: &Tensor,
    label: usize,
    ce_weight: f64,
    frozen_masks: Option<&[Tensor]>,
) -> Result<SubjectForward> {
    let n = x.rows();
    let xv = tape.constant(x.clone());

    let bands: Vec<Var> = if cfg.single_band {
        vec![xv]
    } else {
        decompose(tape, xv, &bound.decomposer)?
    };
    let n_bands = bands.len();

    let corrs: Vec<Var> = bands
        .iter()
        .map(|&b| pearson(tape, b))
        .collect::<Result<_>>()?;

    let masks: Vec<Tensor> = match frozen_masks {
        Some(m) => {
            if m.len() != n_bands {
                return Err(Error::Config(format!(
                    "expected {n_bands} frozen masks, got {}",
                    m.len()
                )));
            }
            m.to_vec()
        }
        None => corrs
            .iter()
            .map(|&c| band_mask(tape.value(c), cfg))
            .collect::<Result<_>>()?,
    };

    let intra = assemble_intra(tape, &corrs, &masks, cfg.intra_binary);

    let (a_unified, cross_blocks) = if n_bands > 1 {
        let (cross, blocks) = cross_attention(tape, &corrs, &bound.cross)?;
        (build_unified(tape, intra, cross, bound.lambda), blocks)
    } else {
        (intra, Vec::new())
    };

    let h0 = tape.concat_rows(&corrs);
    let z = gcn_forward(tape, a_unified, h0, &bound.gcn, cfg.final_activation)?;
    let band_emb = readout(tape, z, n_bands);
    let logits = classify(tape, band_emb, &bound.head)?;

    let ce_raw = cross_entropy(tape, logits, label)?;
    let ce = if (ce_weight - 1.0).abs() > 0.0 {
        tape.scale(ce_raw, ce_weight)
    } else {
        ce_raw
    };
    let div = if n_bands > 1 && weights.lambda1 > 0.0 {
        Some(diversity_loss(tape, band_emb))
    } else {
        None
    };
    let sparse = if !cross_blocks.is_empty() && weights.lambda2 > 0.0 {
        Some(sparsity_loss(tape, &cross_blocks, n))
    } else {
        None
    };
    let total = total_loss(tape, ce, div, sparse, weights);

    Ok(SubjectForward { total, ce, div, sparse, logits, a_unified, masks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth_band_dataset;
    use crate::tensor::finite_diff_check;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            attn_dim: 4,
            gcn_hidden: 8,
            gcn_out: 8,
            mlp_hidden: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_shapes_and_structure() {
        let cfg = small_cfg();
        let weights = LossWeights::default();
        let (ds, _) = synth_band_dataset(2, 8, 64, 2, 0.3, 3).unwrap();
        let params = init_model(&cfg, 8, 2, 7).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let out = forward_subject(
            &mut tape,
            &bound,
            &cfg,
            &weights,
            &ds.subjects[0].x,
            ds.subjects[0].label,
            1.0,
            None,
        )
        .unwrap();
        assert_eq!(tape.value(out.a_unified).shape(), &[32, 32]);
        assert_eq!(tape.value(out.logits).shape(), &[2]);
        assert_eq!(out.masks.len(), 4);
        assert!(tape.value(out.total).item().is_finite());
    }

    #[test]
    fn single_band_forward_runs() {
        let cfg = ModelConfig { single_band: true, ..small_cfg() };
        let weights = LossWeights::default();
        let (ds, _) = synth_band_dataset(2, 8, 64, 2, 0.3, 3).unwrap();
        let params = init_model(&cfg, 8, 2, 7).unwrap();
        assert_eq!(params.n_bands(), 1);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let out = forward_subject(
            &mut tape,
            &bound,
            &cfg,
            &weights,
            &ds.subjects[0].x,
            0,
            1.0,
            None,
        )
        .unwrap();
        assert!(out.div.is_none());
        assert!(out.sparse.is_none());
        assert_eq!(tape.value(out.a_unified).shape(), &[8, 8]);
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        // moderate instance; the acceptance suite runs the spec-sized one
        let cfg = ModelConfig {
            attn_dim: 3,
            gcn_hidden: 4,
            gcn_out: 4,
            mlp_hidden: 6,
            ..ModelConfig::default()
        };
        let weights = LossWeights::default();
        let (ds, _) = synth_band_dataset(2, 4, 64, 2, 0.3, 5).unwrap();
        let x = ds.subjects[0].x.clone();
        let params = init_model(&cfg, 4, 2, 11).unwrap();
        let names = params.names();

        // freeze masks from the unperturbed parameters
        let masks = {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            forward_subject(&mut tape, &bound, &cfg, &weights, &x, 0, 1.0, None)
                .unwrap()
                .masks
        };

        let rebuild = |flat: &[Tensor]| -> ModelParams {
            let mut p = params.clone();
            for (dst, src) in p.tensors_mut().into_iter().zip(flat) {
                *dst = src.clone();
            }
            p
        };
        let run = |flat: &[Tensor]| -> (f64, Vec<Tensor>) {
            let p = rebuild(flat);
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &p);
            let out =
                forward_subject(&mut tape, &bound, &cfg, &weights, &x, 0, 1.0, Some(&masks))
                    .unwrap();
            tape.backward(out.total).unwrap();
            (tape.value(out.total).item(), bound.collect_grads(&tape, &p))
        };

        let mut flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        assert_eq!(flat.len(), names.len());
        let (_, grads) = run(&flat);
        let err = finite_diff_check(&mut flat, &grads, |ps| run(ps).0, 1e-5, 80, 23);
        assert!(err < 1e-4, "full-model FD error {err}");
    }
}
