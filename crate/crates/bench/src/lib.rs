//! Inputs shared by the benchmark targets.

use whiskers::fourier::{modes_up_to, FourierSeries};
use whiskers::jet::ParamJet;
use whiskers::model::ModelData;
use whiskers::num_complex::Complex64;

/// Real series with every mode up to `cap` present and geometric decay.
pub fn dense_series(dim: usize, cap: u32, decay: f64) -> FourierSeries {
    let mut s = FourierSeries::zero(dim, cap);
    for k in modes_up_to(dim, cap) {
        let size: i32 = k.iter().map(|c| c.abs()).sum();
        let phase = k.iter().enumerate().map(|(i, &c)| (i as f64 + 1.0) * c as f64).sum::<f64>();
        s.set_term(k, Complex64::from_polar(decay.powi(size), 0.0) * Complex64::new(1.0, 0.1 * phase));
    }
    s
}

/// Embedding of the benchmark map solved to order `j`, with the model.
pub fn solved_benchmark(j: usize, cap: u32) -> (ModelData, ParamJet) {
    let model = whiskers::fixtures::benchmark_map(cap);
    let (sol, _) = whiskers::solve_to_order(&model, j, &whiskers::EngineOptions::default()).expect("benchmark solves");
    (model, sol.k)
}
