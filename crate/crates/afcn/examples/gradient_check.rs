//! Verify the analytic gradients of the full model against central finite
//! differences on a small random instance.
//!
//! Threshold masks are frozen at their unperturbed values so the loss is a
//! smooth function of the parameters during probing.

use afcn::config::ModelConfig;
use afcn::data::synth_band_dataset;
use afcn::losses::LossWeights;
use afcn::model::{bind, forward_subject, init_model, ModelParams};
use afcn::tensor::{finite_diff_check, Tape, Tensor};

fn main() {
    let cfg = ModelConfig {
        attn_dim: 4,
        gcn_hidden: 8,
        gcn_out: 8,
        mlp_hidden: 16,
        ..ModelConfig::default()
    };
    let weights = LossWeights::default();
    let (ds, _) = synth_band_dataset(2, 8, 64, 2, 0.3, 11).unwrap();
    let x = ds.subjects[0].x.clone();
    let params = init_model(&cfg, 8, 2, 21).unwrap();

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
        let out = forward_subject(&mut tape, &bound, &cfg, &weights, &x, 0, 1.0, Some(&masks))
            .unwrap();
        tape.backward(out.total).unwrap();
        (tape.value(out.total).item(), bound.collect_grads(&tape, &p))
    };

    let mut flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let (loss, grads) = run(&flat);
    let n_params: usize = flat.iter().map(|t| t.len()).sum();
    println!("loss {loss:.6} over {n_params} parameters");

    let err = finite_diff_check(&mut flat, &grads, |ps| run(ps).0, 1e-5, 120, 99);
    println!("max relative gradient error over 120 probes: {err:.3e}");
    assert!(err < 1e-4, "gradient check failed");
    println!("gradient check passed");
}
