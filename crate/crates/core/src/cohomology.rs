//! Order-by-order solution of the invariance equation `F∘K = K∘R` (maps) or
//! `X∘K = DK·Y + ∂_τK·ν` (fields).

use crate::error::{Error, Result};
use crate::fourier::{sd_solve_flow, sd_solve_map, FourierSeries, DEFAULT_DIVISOR_FLOOR};
use crate::jet::{compose_reduced, jet_compose, Jet, ParamJet};
use crate::model::{DynamicsKind, ModelData, ReducedDynamics};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Values for the coefficients the invariance equation leaves undetermined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreeChoicePolicy {
    /// Averaged `x^N` coefficient of `K_x`.
    #[serde(default)]
    pub kbar_x_n: f64,
    /// Averaged `x^l` coefficients of the angle deviation when `P < N`.
    #[serde(default)]
    pub kbar_theta: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub divisor_floor: f64,
    /// Absolute bound, relative to the model scale, on error coefficients
    /// that must vanish after a step.
    pub order_tolerance: f64,
    /// Largest accepted norm of `(B̄ + jā)^{-1}`.
    pub block_cap: f64,
    pub choices: FreeChoicePolicy,
    /// Prescribed extra `x^l` terms of the reduced `x` dynamics, `l > N`,
    /// `l ≠ 2N − 1`.
    pub prescribed_x: BTreeMap<usize, f64>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            divisor_floor: DEFAULT_DIVISOR_FLOOR,
            order_tolerance: 1e-9,
            block_cap: 1e10,
            choices: FreeChoicePolicy::default(),
            prescribed_x: BTreeMap::new(),
        }
    }
}

/// Record of the free constants actually used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreeChoices {
    pub kbar_x_n: Option<f64>,
    pub kbar_theta: BTreeMap<usize, Vec<f64>>,
}

/// Coefficients fixed at one step `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub j: usize,
    pub kbar_x: f64,
    pub ktilde_x: FourierSeries,
    pub kbar_y: Vec<f64>,
    pub ktilde_y: Vec<FourierSeries>,
    pub kbar_theta: Vec<f64>,
    pub ktilde_theta: Vec<FourierSeries>,
    /// New `x^{j+N−1}` coefficient of the reduced dynamics, if any.
    pub r_x: Option<f64>,
    /// New `x^{j+P−2}` angle correction, if any.
    pub r_theta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSolution {
    pub kind: DynamicsKind,
    pub n: usize,
    pub p: usize,
    pub j: usize,
    /// Jet degree of `k` (`j + N`).
    pub degree: usize,
    pub k: ParamJet,
    pub reduced: ReducedDynamics,
    pub free_choices: FreeChoices,
    pub steps: Vec<StepRecord>,
}

impl ManifoldSolution {
    /// Averaged part of the `x^l` coefficient of `K_x`.
    pub fn kbar_x(&self, l: usize) -> f64 {
        self.k.x.x_coeff(l).average().re
    }

    pub fn ktilde_x(&self, l: usize) -> FourierSeries {
        self.k.x.x_coeff(l).oscillatory()
    }

    pub fn kbar_y(&self, l: usize) -> Vec<f64> {
        self.k.y.iter().map(|j| j.x_coeff(l).average().re).collect()
    }

    pub fn ktilde_y(&self, l: usize) -> Vec<FourierSeries> {
        self.k.y.iter().map(|j| j.x_coeff(l).oscillatory()).collect()
    }

    pub fn kbar_theta(&self, l: usize) -> Vec<f64> {
        self.k.theta.iter().map(|j| j.x_coeff(l).average().re).collect()
    }

    pub fn ktilde_theta(&self, l: usize) -> Vec<FourierSeries> {
        self.k.theta.iter().map(|j| j.x_coeff(l).oscillatory()).collect()
    }

    pub fn b(&self) -> Option<f64> {
        self.reduced.b
    }

    pub fn is_real_symmetric(&self, tol: f64) -> bool {
        self.k.is_real_symmetric(tol)
    }
}

/// Invariance error as jets in `x`, with the orders below which it must
/// vanish after step `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorJet {
    pub x: Jet,
    pub y: Vec<Jet>,
    pub theta: Vec<Jet>,
    /// `(j + N, j + N, min(j + P − 1, j + N − 1))`.
    pub declared_order: (usize, usize, usize),
}

impl ErrorJet {
    /// First coefficient violating the declared orders by more than `tol`.
    pub fn first_violation(&self, tol: f64) -> Option<(String, usize, f64)> {
        let (qx, qy, qt) = self.declared_order;
        let scan = |name: String, j: &Jet, q: usize| {
            (0..q.min(j.deg() + 1))
                .map(|l| (l, j.x_coeff(l).strip_norm(0.0)))
                .find(|(_, v)| *v > tol)
                .map(|(l, v)| (name, l, v))
        };
        if let Some(v) = scan("x".into(), &self.x, qx) {
            return Some(v);
        }
        for (i, j) in self.y.iter().enumerate() {
            if let Some(v) = scan(format!("y{i}"), j, qy) {
                return Some(v);
            }
        }
        for (i, j) in self.theta.iter().enumerate() {
            if let Some(v) = scan(format!("theta{i}"), j, qt) {
                return Some(v);
            }
        }
        None
    }

    /// `|E|` sampled at `(x_i, θ_l)`, one row per `x`, one column per angle
    /// sample, stacked component-wise as `[x, y.., θ..]`.
    pub fn sample(&self, xs: &[f64], thetas: &[Vec<f64>]) -> Vec<Vec<Vec<Complex64>>> {
        let comps: Vec<&Jet> = std::iter::once(&self.x).chain(&self.y).chain(&self.theta).collect();
        comps
            .iter()
            .map(|c| {
                xs.iter()
                    .map(|&x| thetas.iter().map(|t| c.evaluate(&[x], t)).collect())
                    .collect()
            })
            .collect()
    }
}

/// Exact jet of the invariance error of `sol` through `sol.degree`.
pub fn invariance_error(model: &ModelData, sol: &ManifoldSolution) -> Result<ErrorJet> {
    let w = sol.degree;
    let (m, d) = (model.m, model.d());
    let f = model.full_jets(w);
    let k = sol.k.with_deg(w);
    let fk = jet_compose(&f, &k, None)?;
    let (x, y, theta) = match model.kind {
        DynamicsKind::Map => {
            let kr = compose_reduced(&k, &sol.reduced)?;
            let x = &fk[0] - &kr.x;
            let y = (0..m).map(|i| &fk[1 + i] - &kr.y[i]).collect();
            let theta = (0..d)
                .map(|i| &(&k.theta[i] + &fk[1 + m + i]) - &kr.theta[i])
                .collect();
            (x, y, theta)
        }
        DynamicsKind::Flow => {
            let (dim, cap) = (model.torus_dim(), model.order_cap);
            let yx = sol.reduced.x_jet(w, dim, cap);
            let r = sol.reduced.theta_jets(w, dim, cap);
            let full = model.freq.full();
            let speeds: Vec<Jet> = (0..dim)
                .map(|a| {
                    let c = Jet::constant(1, w, FourierSeries::constant(dim, cap, full[a]));
                    if a < d {
                        &c + &r[a]
                    } else {
                        c
                    }
                })
                .collect();
            let lie = |c: &Jet| -> Jet {
                let mut acc = &c.derivative_var(0) * &yx;
                for (a, s) in speeds.iter().enumerate() {
                    acc = &acc + &(&c.derivative_theta(a) * s);
                }
                acc
            };
            let x = &fk[0] - &lie(&k.x);
            let y = (0..m).map(|i| &fk[1 + i] - &lie(&k.y[i])).collect();
            let theta = (0..d)
                .map(|i| &(&fk[1 + m + i] - &r[i]) - &lie(&k.theta[i]))
                .collect();
            (x, y, theta)
        }
    };
    let j = sol.j;
    Ok(ErrorJet {
        x,
        y,
        theta,
        declared_order: (j + model.n, j + model.n, (j + model.p - 1).min(j + model.n - 1)),
    })
}

/// Runs the order-by-order construction for one model.
pub struct Engine<'a> {
    model: &'a ModelData,
    opts: EngineOptions,
    tol: f64,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a ModelData, opts: EngineOptions) -> Result<Self> {
        let violations = model.validate();
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Hypothesis(text.join("; ")));
        }
        let n = model.n;
        for &l in opts.prescribed_x.keys() {
            if l <= n || l == 2 * n - 1 {
                return Err(Error::Invalid(format!(
                    "reduced dynamics term x^{l} cannot be prescribed"
                )));
            }
        }
        let scale = model
            .full_jets(model.available_degree(n + 1))
            .iter()
            .map(|j| j.iter().map(|(_, s)| s.strip_norm(0.0)).fold(0.0, f64::max))
            .fold(model.a.strip_norm(0.0), f64::max)
            .max(1.0);
        let tol = opts.order_tolerance * scale;
        Ok(Engine { model, opts, tol })
    }

    pub fn model(&self) -> &ModelData {
        self.model
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    fn sd(&self, h: &FourierSeries) -> Result<FourierSeries> {
        let h = h.oscillatory();
        match self.model.kind {
            DynamicsKind::Map => sd_solve_map(&h, &self.model.freq, self.opts.divisor_floor),
            DynamicsKind::Flow => sd_solve_flow(&h, &self.model.freq, self.opts.divisor_floor),
        }
    }

    fn constant(&self, v: f64) -> FourierSeries {
        FourierSeries::constant(self.model.torus_dim(), self.model.order_cap, v)
    }

    fn checked_error(&self, sol: &ManifoldSolution) -> Result<ErrorJet> {
        let e = invariance_error(self.model, sol)?;
        if let Some((component, order, norm)) = e.first_violation(self.tol) {
            return Err(Error::OrderRegression {
                step: sol.j,
                component,
                order,
                norm,
            });
        }
        Ok(e)
    }

    /// `K = (x + K̃ x^N, 0, θ)`, `R_x = x − ā x^N`.
    pub fn base_step(&self) -> Result<(ManifoldSolution, ErrorJet)> {
        let model = self.model;
        let n = model.n;
        let w = model.available_degree(n + 1);
        if w < n + 1 {
            return Err(Error::DegreeOverflow {
                requested: n + 1,
                known: w,
            });
        }
        let (dim, cap) = (model.torus_dim(), model.order_cap);
        let mut k = ParamJet::identity(model.m, model.d(), w, dim, cap);
        let ktilde = self.sd(&model.a)?.scale(-1.0);
        k.x.add_term(vec![n as u32], &ktilde);
        let mut reduced = ReducedDynamics::new(model.kind, n, model.a_bar(), model.freq.omega.clone());
        reduced.extra_x = self.opts.prescribed_x.clone();
        let sol = ManifoldSolution {
            kind: model.kind,
            n,
            p: model.p,
            j: 1,
            degree: w,
            k,
            reduced,
            free_choices: FreeChoices::default(),
            steps: vec![StepRecord {
                j: 1,
                kbar_x: 0.0,
                ktilde_x: ktilde,
                kbar_y: vec![0.0; model.m],
                ktilde_y: vec![FourierSeries::zero(dim, cap); model.m],
                kbar_theta: vec![0.0; model.d()],
                ktilde_theta: vec![FourierSeries::zero(dim, cap); model.d()],
                r_x: Some(-model.a_bar()),
                r_theta: None,
            }],
        };
        let e = self.checked_error(&sol)?;
        Ok((sol, e))
    }

    /// Step `j = prev.j + 1`; `e_prev` must be the invariance error of `prev`.
    pub fn extend_order(&self, prev: &ManifoldSolution, e_prev: &ErrorJet) -> Result<(ManifoldSolution, ErrorJet)> {
        let model = self.model;
        let (n, p, m, d) = (model.n, model.p, model.m, model.d());
        let j = prev.j + 1;
        let w = j + n;
        let known = model.available_degree(w);
        if known < w {
            return Err(Error::DegreeOverflow { requested: w, known });
        }
        let a_bar = model.a_bar();
        let mut sol = prev.clone();
        sol.j = j;
        sol.degree = w;
        sol.k = sol.k.with_deg(w);
        let lj = j as u32;
        let ly = (j + n - 1) as u32;

        // y block at x^{j+N−1}
        let mut kbar_y = vec![0.0; m];
        let mut ktilde_y = Vec::with_capacity(m);
        if m > 0 {
            let ey: Vec<FourierSeries> = e_prev.y.iter().map(|e| e.x_coeff(j + n - 1)).collect();
            let ebar = DVector::from_iterator(m, ey.iter().map(|s| s.average().re));
            let block = model.b_bar() + DMatrix::identity(m, m) * (j as f64 * a_bar);
            let inv = block.try_inverse().ok_or(Error::SingularBlock {
                order: j,
                norm: f64::INFINITY,
            })?;
            let norm = inv.norm();
            if !(norm <= self.opts.block_cap) {
                return Err(Error::SingularBlock { order: j, norm });
            }
            let sol_y = -(&inv * ebar);
            kbar_y = sol_y.iter().copied().collect();
            for i in 0..m {
                let mut rhs = ey[i].oscillatory();
                for (kk, &v) in kbar_y.iter().enumerate() {
                    rhs += &model.b[i][kk].oscillatory().scale(v);
                }
                let kt = self.sd(&rhs)?;
                sol.k.y[i].add_term(vec![lj], &self.constant(kbar_y[i]));
                sol.k.y[i].add_term(vec![ly], &kt);
                ktilde_y.push(kt);
            }
        }

        // angle block at x^{j+P−2}
        let lt = j + p - 2;
        let mut kbar_theta = vec![0.0; d];
        let mut ktilde_theta = Vec::with_capacity(d);
        let mut r_theta = None;
        if d > 0 {
            let et: Vec<FourierSeries> = e_prev.theta.iter().map(|e| e.x_coeff(lt)).collect();
            if p == n {
                for i in 0..d {
                    kbar_theta[i] = -et[i].average().re / ((j - 1) as f64 * a_bar);
                }
            } else {
                let r: Vec<f64> = et.iter().map(|s| s.average().re).collect();
                sol.reduced.theta_terms.insert(lt, r.clone());
                r_theta = Some(r);
                if let Some(v) = self.opts.choices.kbar_theta.get(&(j - 1)) {
                    if v.len() != d {
                        return Err(Error::DimensionMismatch("free angle choice length".into()));
                    }
                    kbar_theta.copy_from_slice(v);
                }
                sol.free_choices.kbar_theta.insert(j - 1, kbar_theta.clone());
            }
            for i in 0..d {
                let kt = self.sd(&et[i])?;
                sol.k.theta[i].add_term(vec![(j - 1) as u32], &self.constant(kbar_theta[i]));
                sol.k.theta[i].add_term(vec![lt as u32], &kt);
                ktilde_theta.push(kt);
            }
        }

        // x block: the recomputed error supplies every coupling term
        let e_mid = invariance_error(model, &sol)?;
        let psi = e_mid.x.x_coeff(j + n - 1);
        let psi_bar = psi.average().re;
        let mut r_x = None;
        let kbar_x = if j == n {
            sol.reduced.b = Some(psi_bar);
            r_x = Some(psi_bar);
            sol.free_choices.kbar_x_n = Some(self.opts.choices.kbar_x_n);
            self.opts.choices.kbar_x_n
        } else {
            -psi_bar / ((j as f64 - n as f64) * a_bar)
        };
        let rhs = &psi.oscillatory() - &model.a.oscillatory().scale(n as f64 * kbar_x);
        let ktilde_x = self.sd(&rhs)?;
        sol.k.x.add_term(vec![lj], &self.constant(kbar_x));
        sol.k.x.add_term(vec![ly], &ktilde_x);

        sol.steps.push(StepRecord {
            j,
            kbar_x,
            ktilde_x,
            kbar_y,
            ktilde_y,
            kbar_theta,
            ktilde_theta,
            r_x,
            r_theta,
        });
        let e = self.checked_error(&sol)?;
        Ok((sol, e))
    }

    /// Steps `1..=j_max`, calling `on_step` after each.
    pub fn solve_with<F>(&self, j_max: usize, mut on_step: F) -> Result<(ManifoldSolution, ErrorJet)>
    where
        F: FnMut(&ManifoldSolution, &ErrorJet) -> Result<()>,
    {
        if j_max == 0 {
            return Err(Error::Invalid("order must be at least 1".into()));
        }
        let (mut sol, mut e) = self.base_step()?;
        on_step(&sol, &e)?;
        while sol.j < j_max {
            let (s, err) = self.extend_order(&sol, &e)?;
            sol = s;
            e = err;
            on_step(&sol, &e)?;
        }
        Ok((sol, e))
    }

    pub fn solve(&self, j_max: usize) -> Result<(ManifoldSolution, ErrorJet)> {
        self.solve_with(j_max, |_, _| Ok(()))
    }
}

/// First step of the construction.
pub fn base_step(model: &ModelData, opts: &EngineOptions) -> Result<(ManifoldSolution, ErrorJet)> {
    Engine::new(model, opts.clone())?.base_step()
}

/// One induction step for a map model.
pub fn extend_order(
    model: &ModelData,
    sol: &ManifoldSolution,
    e_prev: &ErrorJet,
    opts: &EngineOptions,
) -> Result<(ManifoldSolution, ErrorJet)> {
    if model.kind != DynamicsKind::Map {
        return Err(Error::Invalid("extend_order expects a map model".into()));
    }
    Engine::new(model, opts.clone())?.extend_order(sol, e_prev)
}

/// One induction step for a vector-field model.
pub fn extend_order_flow(
    model: &ModelData,
    sol: &ManifoldSolution,
    e_prev: &ErrorJet,
    opts: &EngineOptions,
) -> Result<(ManifoldSolution, ErrorJet)> {
    if model.kind != DynamicsKind::Flow {
        return Err(Error::Invalid("extend_order_flow expects a vector-field model".into()));
    }
    Engine::new(model, opts.clone())?.extend_order(sol, e_prev)
}

pub fn solve_to_order(model: &ModelData, j: usize, opts: &EngineOptions) -> Result<(ManifoldSolution, ErrorJet)> {
    Engine::new(model, opts.clone())?.solve(j)
}

/// For `m = 0` and `P ≥ N`: the invariant `b` of the normal form
/// `x − ā x^N + b x^{2N−1}` and the conjugating jet at order `j ≥ N`.
pub fn conjugate_normal_form(model: &ModelData, j: usize, opts: &EngineOptions) -> Result<(f64, ParamJet)> {
    if model.m != 0 {
        return Err(Error::Hypothesis("normal form conjugation needs m = 0".into()));
    }
    if model.p_declared < model.n {
        return Err(Error::Hypothesis("normal form conjugation needs P ≥ N".into()));
    }
    let (sol, _) = solve_to_order(model, j.max(model.n), opts)?;
    let b = sol.reduced.b.expect("b is fixed once j ≥ N");
    Ok((b, sol.k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::FrequencyVector;

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    fn c(v: f64) -> FourierSeries {
        FourierSeries::constant(1, 32, v)
    }

    fn benchmark() -> ModelData {
        let mut model = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 1, 32);
        model.a = &c(1.0) + &FourierSeries::cos_mode(1, 32, &[1], 0.3);
        model.b[0][0] = &c(0.5) + &FourierSeries::sin_mode(1, 32, &[1], 0.2);
        model.f_n.add_term(vec![1, 1], &FourierSeries::cos_mode(1, 32, &[1], 0.1));
        model.h_p[0].add_term(vec![2, 0], &c(0.2));
        model.tail_x.add_term(vec![3, 0], &FourierSeries::sin_mode(1, 32, &[1], 0.15));
        model.tail_y[0].add_term(vec![3, 0], &c(0.4));
        model
    }

    #[test]
    fn constant_average_gives_no_oscillation() {
        let mut model = benchmark();
        model.a = c(1.3);
        let (sol, e) = base_step(&model, &EngineOptions::default()).unwrap();
        assert!(sol.ktilde_x(2).is_zero());
        assert!(e.x.x_coeff(2).strip_norm(0.0) <= 1e-12);
    }

    #[test]
    fn base_step_solves_difference_equation() {
        let mut model = benchmark();
        model.a = &c(1.0) + &FourierSeries::cos_mode(1, 32, &[1], 1.0);
        let (sol, e) = base_step(&model, &EngineOptions::default()).unwrap();
        let kt = sol.ktilde_x(2);
        let res = &(&kt.rotate(&[golden()]) - &kt) + &model.a.oscillatory();
        let worst = (0..256).map(|i| res.evaluate(&[i as f64 / 256.0]).norm()).fold(0.0, f64::max);
        assert!(worst <= 1e-12);
        assert!(e.x.x_coeff(2).strip_norm(0.0) <= 1e-12);
        assert_eq!(sol.reduced.x_polynomial(), BTreeMap::from([(1, 1.0), (2, -1.0)]));
    }

    #[test]
    fn y_block_scalar_formula() {
        // ā = 1, B̄ = 1, Ē_y = 0.3 at x^{N+1} for j = 2
        let mut model = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 1, 8);
        model.tail_y[0].add_term(vec![3, 0], &FourierSeries::constant(1, 8, 0.3));
        let (sol, e) = base_step(&model, &EngineOptions::default()).unwrap();
        assert!((e.y[0].x_coeff(3).average().re - 0.3).abs() < 1e-15);
        let (sol2, _) = extend_order(&model, &sol, &e, &EngineOptions::default()).unwrap();
        assert!((sol2.kbar_y(2)[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn flow_y_block_scalar_formula() {
        // ā = 1, B̄ = 2, Ē_y = 1 at x^{N+2} for j = 3
        let mut model = ModelData::new(DynamicsKind::Flow, 2, 2, FrequencyVector::new(vec![1.0], vec![]), 1, 8);
        model.b[0][0] = FourierSeries::constant(1, 8, 2.0);
        model.tail_y[0].add_term(vec![4, 0], &FourierSeries::constant(1, 8, 1.0));
        let opts = EngineOptions::default();
        let (s1, e1) = base_step(&model, &opts).unwrap();
        let (s2, e2) = extend_order_flow(&model, &s1, &e1, &opts).unwrap();
        assert!((e2.y[0].x_coeff(4).average().re - 1.0).abs() < 1e-15);
        let (s3, _) = extend_order_flow(&model, &s2, &e2, &opts).unwrap();
        assert!((s3.kbar_y(3)[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn flow_base_single_mode() {
        let freq = FrequencyVector::new(vec![golden()], vec![2f64.sqrt()]);
        let mut model = ModelData::new(DynamicsKind::Flow, 2, 2, freq, 1, 8);
        model.a = &FourierSeries::constant(2, 8, 1.0) + &FourierSeries::cos_mode(2, 8, &[1, -1], 0.4);
        let (sol, e) = base_step(&model, &EngineOptions::default()).unwrap();
        let kt = sol.ktilde_x(2);
        let div = Complex64::new(0.0, std::f64::consts::TAU * (golden() - 2f64.sqrt()));
        assert!((kt.coeff(&[1, -1]) + Complex64::new(0.2, 0.0) / div).norm() < 1e-15);
        assert!(e.x.x_coeff(2).strip_norm(0.0) < 1e-13);
    }

    #[test]
    fn zero_nonlinearity_gives_zero_oscillation() {
        let mut model = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 1, 8);
        model.tail_x.add_term(vec![3, 0], &FourierSeries::constant(1, 8, 0.5));
        model.tail_y[0].add_term(vec![3, 0], &FourierSeries::constant(1, 8, 0.25));
        let (sol, _) = solve_to_order(&model, 4, &EngineOptions::default()).unwrap();
        for l in 0..=sol.degree {
            assert!(sol.ktilde_x(l).is_zero() && sol.ktilde_y(l)[0].is_zero() && sol.ktilde_theta(l)[0].is_zero());
        }
        assert_eq!(sol.b(), Some(0.5));
        assert!((sol.kbar_y(2)[0] + 0.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn orders_and_lower_coefficients_are_stable() {
        let model = benchmark();
        let engine = Engine::new(&model, EngineOptions::default()).unwrap();
        let mut history: Vec<ManifoldSolution> = Vec::new();
        engine
            .solve_with(5, |s, e| {
                assert!(e.first_violation(1e-10).is_none());
                history.push(s.clone());
                Ok(())
            })
            .unwrap();
        for pair in history.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let diff = &b.k.x - &a.k.x.with_deg(b.degree);
            assert!(diff.vanishes_to(b.j, 1e-14));
            for i in 0..1 {
                assert!((&b.k.y[i] - &a.k.y[i].with_deg(b.degree)).vanishes_to(b.j, 1e-14));
                assert!((&b.k.theta[i] - &a.k.theta[i].with_deg(b.degree)).vanishes_to(b.j - 1, 1e-14));
            }
            assert!(b.reduced.theta_terms.is_empty());
            assert!(b.is_real_symmetric(1e-13));
        }
        let last = history.last().unwrap();
        assert_eq!(last.reduced.x_polynomial().len(), 3);
    }

    #[test]
    fn small_p_uses_angle_corrections() {
        let mut model = ModelData::new(DynamicsKind::Map, 3, 1, FrequencyVector::new(vec![golden()], vec![]), 0, 16);
        model.h_p[0].add_term(vec![1], &(&FourierSeries::constant(1, 16, 0.3) + &FourierSeries::cos_mode(1, 16, &[1], 0.2)));
        model.tail_theta[0].add_term(vec![2], &FourierSeries::sin_mode(1, 16, &[2], 0.1));
        model.tail_x.add_term(vec![4], &FourierSeries::cos_mode(1, 16, &[1], 0.2));
        let (sol, e) = solve_to_order(&model, 5, &EngineOptions::default()).unwrap();
        assert!(e.first_violation(1e-10).is_none());
        assert_eq!(sol.reduced.theta_terms[&1], vec![0.3]);
        assert_eq!(e.declared_order, (8, 8, 5));
    }

    #[test]
    fn corrupted_coefficient_is_detected() {
        let model = benchmark();
        let (mut sol, _) = solve_to_order(&model, 3, &EngineOptions::default()).unwrap();
        sol.k.x.add_term(vec![3], &c(1e-3));
        let e = invariance_error(&model, &sol).unwrap();
        let (comp, order, _) = e.first_violation(1e-9).unwrap();
        assert_eq!((comp.as_str(), order), ("x", 4));
    }

    #[test]
    fn exact_polynomial_toy() {
        // F = K ∘ R ∘ K^{-1} for K_x = x + 0.3 x^3, R_x = x − x^2 + 0.5 x^3
        let deg = 9;
        let x = Jet::variable(0, 1, deg, 1, 8);
        let cst = |v| FourierSeries::constant(1, 8, v);
        let kx = &x + &Jet::monomial(vec![3], cst(0.3), deg);
        let rx = &(&x - &Jet::monomial(vec![2], cst(1.0), deg)) + &Jet::monomial(vec![3], cst(0.5), deg);
        let (kinv, _) = crate::jet::invert_tangent_identity(&[kx.clone()], &[]).unwrap();
        let step = rx.compose(&crate::jet::Substitution { vars: &kinv, theta_dev: &[], shift: None }).unwrap();
        let fx = kx.compose(&crate::jet::Substitution { vars: std::slice::from_ref(&step), theta_dev: &[], shift: None }).unwrap();
        let jets = vec![fx, Jet::zero(1, deg, 1, 8)];
        let model = ModelData::from_full_jets(
            DynamicsKind::Map,
            2,
            2,
            FrequencyVector::new(vec![golden()], vec![]),
            0,
            &jets,
            Some(deg),
            vec![],
        )
        .unwrap();
        let mut sol = solve_to_order(&model, 3, &EngineOptions::default()).unwrap().0;
        sol.k.x = kx.with_deg(sol.degree);
        sol.reduced.b = Some(0.5);
        let e = invariance_error(&model, &sol).unwrap();
        assert!(e.x.max_abs() < 1e-11);
    }
}
