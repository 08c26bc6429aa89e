//! Decompose a synthetic subject into its learned sub-bands and report how
//! the signal energy splits across them.

use afcn::data::synth_band_dataset;
use afcn::decompose::{decompose, init_decomposer, DecomposerParams};
use afcn::tensor::{Tape, Tensor, Var};

fn band_energy(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

fn main() {
    let (ds, truth) = synth_band_dataset(4, 8, 128, 2, 0.3, 5).unwrap();
    let params = init_decomposer(2, 5, 3, 0.01, 0.01, 1).unwrap();

    println!("planted bands (cycles/sample): {:?}", truth.bands);
    for s in &ds.subjects {
        let mut tape = Tape::new();
        let bound = DecomposerParams::<Var> {
            low_kernels: params.low_kernels.iter().map(|t| tape.param(t)).collect(),
            high_kernels: params.high_kernels.iter().map(|t| tape.param(t)).collect(),
            leaky_slope: params.leaky_slope,
        };
        let xv = tape.constant(s.x.clone());
        let bands = decompose(&mut tape, xv, &bound).unwrap();
        let names = ["L1", "H1", "L2", "H2"];
        let energies: Vec<String> = bands
            .iter()
            .zip(names)
            .map(|(b, n)| format!("{n}={:.1}", band_energy(tape.value(*b))))
            .collect();
        println!(
            "subject {} (class {}): band energies {}",
            s.subject_id,
            s.label,
            energies.join(" ")
        );
    }
}
