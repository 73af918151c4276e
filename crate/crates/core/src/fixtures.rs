//! Reference models shared by tests, benchmarks, the acceptance suite and
//! the command line front end.

use crate::error::Result;
use crate::fourier::{FourierSeries, FrequencyVector};
use crate::jet::{compose_all, invert_tangent_identity, Jet, Substitution};
use crate::model::{DynamicsKind, ModelData};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

/// Synthetic map with `d = 1`, `m = 1`, `N = P = 2`, golden rotation and
/// one Fourier mode per coefficient.
pub fn benchmark_map(cap: u32) -> ModelData {
    let c = |v| FourierSeries::constant(1, cap, v);
    let mut model = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 1, cap);
    model.a = &c(1.0) + &FourierSeries::cos_mode(1, cap, &[1], 0.3);
    model.b[0][0] = &c(0.5) + &FourierSeries::sin_mode(1, cap, &[1], 0.2);
    model.f_n.add_term(vec![1, 1], &FourierSeries::cos_mode(1, cap, &[1], 0.1));
    model.h_p[0].add_term(vec![2, 0], &c(0.2));
    model.tail_x.add_term(vec![3, 0], &FourierSeries::sin_mode(1, cap, &[1], 0.15));
    model.tail_y[0].add_term(vec![3, 0], &c(0.4));
    model
}

/// Map `(x, θ) ↦ (x − x² + b x³, θ + ω)` with `m = 0`.
pub fn normal_form_map(b: f64, cap: u32) -> ModelData {
    let mut model = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 0, cap);
    model.tail_x.add_term(vec![3], &FourierSeries::constant(1, cap, b));
    model
}

/// Random real trigonometric polynomial with modes `|k| ≤ 2`.
fn random_series(rng: &mut ChaCha8Rng, cap: u32, amp: f64) -> FourierSeries {
    let mut s = FourierSeries::constant(1, cap, rng.random_range(-amp..amp));
    for k in 1..=2 {
        let z = Complex64::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp)) / 2.0;
        s.add_term(vec![k], z);
        s.add_term(vec![-k], z.conj());
    }
    s
}

/// Random change `T(x, θ) = (x + Σ t_l(θ) x^l, θ + Σ s_l(θ) x^l)` that is
/// tangent to the identity, with `l ≥ 2` in both components.
pub fn random_tangent_change(seed: u64, deg: usize, cap: u32) -> (Jet, Jet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tx = Jet::variable(0, 1, deg, 1, cap);
    let mut tt = Jet::zero(1, deg, 1, cap);
    for l in 2..=4u32 {
        tx.add_term(vec![l], &random_series(&mut rng, cap, 0.2));
    }
    for l in 2..=3u32 {
        tt.add_term(vec![l], &random_series(&mut rng, cap, 0.1));
    }
    (tx, tt)
}

/// `T ∘ F ∘ T^{-1}` for a map model with `m = 0`, `d = 1`, through degree
/// `deg`.
pub fn conjugate_map(model: &ModelData, tx: &Jet, tt: &Jet, deg: usize) -> Result<ModelData> {
    let f = model.full_jets(deg);
    let (inv_v, inv_t) = invert_tangent_identity(std::slice::from_ref(tx), std::slice::from_ref(tt))?;
    let inner = compose_all(
        &f,
        &Substitution {
            vars: &inv_v,
            theta_dev: &inv_t,
            shift: None,
        },
    )?;
    // F∘T^{-1} sends θ to θ + ω + dev
    let dev = &inv_t[0] + &inner[1];
    let outer = compose_all(
        &[tx.clone(), tt.clone()],
        &Substitution {
            vars: std::slice::from_ref(&inner[0]),
            theta_dev: std::slice::from_ref(&dev),
            shift: Some(model.freq.omega.as_slice()),
        },
    )?;
    let jets = vec![outer[0].clone(), &dev + &outer[1]];
    ModelData::from_full_jets(
        DynamicsKind::Map,
        model.n,
        model.p_declared,
        model.freq.clone(),
        0,
        &jets,
        Some(deg),
        model.params.clone(),
    )
}

/// Normal form with invariant `b0` conjugated by a random change.
pub fn conjugacy_fixture(b0: f64, seed: u64, deg: usize, cap: u32) -> Result<ModelData> {
    let (tx, tt) = random_tangent_change(seed, deg, cap);
    conjugate_map(&normal_form_map(b0, cap), &tx, &tt, deg)
}

/// Parameters of the autonomous toy field `ẋ = −x²`, `ẏ = B x y + e x³`,
/// `θ̇ = ω + c x²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyField {
    pub b: f64,
    pub e: f64,
    pub c: f64,
}

impl Default for ToyField {
    fn default() -> Self {
        ToyField { b: 1.5, e: 0.3, c: 0.2 }
    }
}

fn binomial(alpha: f64, l: usize) -> f64 {
    (0..l).fold(1.0, |acc, i| acc * (alpha - i as f64) / (i + 1) as f64)
}

impl ToyField {
    pub fn flow_model(&self, cap: u32) -> ModelData {
        let c = |v| FourierSeries::constant(1, cap, v);
        let mut model = ModelData::new(DynamicsKind::Flow, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 1, cap);
        model.b[0][0] = c(self.b);
        model.tail_y[0].add_term(vec![3, 0], &c(self.e));
        model.h_p[0].add_term(vec![2, 0], &c(self.c));
        model
    }

    /// Coefficients of `x/(1 + x)`.
    pub fn time_one_x(deg: usize) -> BTreeMap<usize, f64> {
        (1..=deg).map(|l| (l, if l % 2 == 1 { 1.0 } else { -1.0 })).collect()
    }

    /// Exact time-one map re-expanded through degree `deg`.
    pub fn time_one_map(&self, deg: usize, cap: u32) -> Result<ModelData> {
        let nv = 2;
        let c = |v| FourierSeries::constant(1, cap, v);
        let mut fx = Jet::zero(nv, deg, 1, cap);
        for (l, v) in ToyField::time_one_x(deg) {
            fx.add_term(vec![l as u32, 0], &c(v));
        }
        let mut fy = Jet::zero(nv, deg, 1, cap);
        for l in 0..deg {
            fy.add_term(vec![l as u32, 1], &c(binomial(self.b, l)));
        }
        // e x² [(1+x)^B − (1+x)^{−2}] / (B + 2)
        for l in 0..=deg.saturating_sub(2) {
            let inv2 = if l % 2 == 0 { (l + 1) as f64 } else { -((l + 1) as f64) };
            let v = self.e * (binomial(self.b, l) - inv2) / (self.b + 2.0);
            fy.add_term(vec![(l + 2) as u32, 0], &c(v));
        }
        let mut ft = Jet::zero(nv, deg, 1, cap);
        for l in 2..=deg {
            let v = if l % 2 == 0 { self.c } else { -self.c };
            ft.add_term(vec![l as u32, 0], &c(v));
        }
        ModelData::from_full_jets(
            DynamicsKind::Map,
            2,
            2,
            FrequencyVector::new(vec![golden()], vec![]),
            1,
            &[fx, fy, ft],
            Some(deg),
            vec![],
        )
    }

    /// Extra reduced-dynamics terms making `R_x = x/(1 + x)` on the map path.
    pub fn prescribed_map_terms(deg: usize) -> BTreeMap<usize, f64> {
        ToyField::time_one_x(deg)
            .into_iter()
            .filter(|&(l, _)| l > 3)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conjugacy_fixture_is_valid() {
        let m = conjugacy_fixture(0.7, 1, 9, 32).unwrap();
        assert!(m.validate().is_empty(), "{:?}", m.validate());
        assert!((m.a_bar() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn time_one_map_matches_flow() {
        let toy = ToyField::default();
        let map = toy.time_one_map(12, 8).unwrap();
        let ev = crate::dynamics::MapEvaluator::new(&map).unwrap();
        let flow = toy.flow_model(8);
        let s0 = [0.02, 0.01, 0.3];
        let o = crate::dynamics::integrate_flow(&flow, &s0, (0.0, 1.0), 1e-13, None).unwrap();
        let s1 = ev.step(&s0);
        for i in 0..3 {
            assert!((s1[i] - o.last().state[i]).abs() < 1e-12, "{i}: {} vs {}", s1[i], o.last().state[i]);
        }
    }
}
