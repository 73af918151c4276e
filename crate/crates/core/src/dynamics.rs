//! Orbits of full models: map iteration and an adaptive Dormand–Prince 5(4)
//! integrator with dense output.

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::model::{DynamicsKind, ModelData, ReducedDynamics, POLYNOMIAL_DEGREE};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSample {
    /// Step index for maps, time for flows.
    pub t: f64,
    pub state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub samples: Vec<OrbitSample>,
    pub labels: Vec<String>,
    pub integrator: String,
    pub step_policy: String,
    pub tolerance: Option<f64>,
    /// Index of the first sample outside the domain, if the run stopped early.
    pub left_domain: Option<usize>,
    pub steps_taken: usize,
}

impl Orbit {
    pub fn last(&self) -> &OrbitSample {
        self.samples.last().expect("orbit has at least the initial sample")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{:.17e}", s.t);
            for v in &s.state {
                let _ = write!(out, ",{:.17e}", v);
            }
            out.push('\n');
        }
        out
    }
}

/// Region `|(x, y)| ≤ rho`, optionally with `x ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub rho: f64,
    pub nonnegative_x: bool,
}

impl Domain {
    pub fn contains(&self, x: f64, y: &[f64]) -> bool {
        let r = (x * x + y.iter().map(|v| v * v).sum::<f64>()).sqrt();
        r.is_finite() && r <= self.rho && (!self.nonnegative_x || x >= 0.0)
    }
}

fn state_labels(m: usize, d: usize, d_prime: usize) -> Vec<String> {
    let mut l = vec!["x".to_string()];
    l.extend((0..m).map(|i| format!("y{i}")));
    l.extend((0..d).map(|i| format!("theta{i}")));
    l.extend((0..d_prime).map(|i| format!("tau{i}")));
    l
}

/// Pointwise evaluation of a full map model on states `[x, y.., θ..]`.
#[derive(Clone, Debug)]
pub struct MapEvaluator {
    jets: Vec<Jet>,
    m: usize,
    omega: Vec<f64>,
}

impl MapEvaluator {
    pub fn new(model: &ModelData) -> Result<Self> {
        if model.kind != DynamicsKind::Map {
            return Err(Error::Invalid("map evaluator needs a map model".into()));
        }
        Ok(MapEvaluator {
            jets: model.full_jets(POLYNOMIAL_DEGREE),
            m: model.m,
            omega: model.freq.omega.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        1 + self.m + self.omega.len()
    }

    /// Image of `state`; angles are lifted, not reduced mod 1.
    pub fn step(&self, state: &[f64]) -> Vec<f64> {
        let nv = 1 + self.m;
        let vars = &state[..nv];
        let theta = &state[nv..];
        let mut out = Vec::with_capacity(state.len());
        for j in &self.jets[..nv] {
            out.push(j.evaluate(vars, theta).re);
        }
        for (i, t) in theta.iter().enumerate() {
            out.push(t + self.omega[i] + self.jets[nv + i].evaluate(vars, theta).re);
        }
        out
    }
}

/// Iterates a full map model `k` times, stopping early outside `domain`.
pub fn iterate_map(model: &ModelData, state0: &[f64], k: usize, domain: Option<&Domain>) -> Result<Orbit> {
    let ev = MapEvaluator::new(model)?;
    if state0.len() != ev.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state of length {} for a model with {} components",
            state0.len(),
            ev.dim()
        )));
    }
    let mut samples = vec![OrbitSample {
        t: 0.0,
        state: state0.to_vec(),
    }];
    let mut left = None;
    let mut s = state0.to_vec();
    for step in 1..=k {
        s = ev.step(&s);
        samples.push(OrbitSample {
            t: step as f64,
            state: s.clone(),
        });
        if let Some(dom) = domain {
            if !dom.contains(s[0], &s[1..1 + model.m]) {
                left = Some(step);
                break;
            }
        }
    }
    Ok(Orbit {
        steps_taken: samples.len() - 1,
        samples,
        labels: state_labels(model.m, model.d(), 0),
        integrator: "map iteration".into(),
        step_policy: "unit".into(),
        tolerance: None,
        left_domain: left,
    })
}

/// Iterates of the reduced `x` dynamics at a complex start point.
pub fn iterate_reduced(r: &ReducedDynamics, x0: Complex64, k: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(k + 1);
    let mut x = x0;
    out.push(x);
    for _ in 0..k {
        x = r.step_complex(x);
        out.push(x);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h0: Option<f64>,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Fixed step size, disabling error control.
    pub fixed_step: Option<f64>,
}

impl IntegratorOptions {
    pub fn with_tol(tol: f64) -> Self {
        IntegratorOptions {
            rtol: tol,
            atol: tol,
            ..Default::default()
        }
    }

    pub fn fixed(h: f64) -> Self {
        IntegratorOptions {
            fixed_step: Some(h),
            ..Default::default()
        }
    }
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-10,
            atol: 1e-10,
            h0: None,
            h_min: 1e-14,
            h_max: f64::INFINITY,
            max_steps: 10_000_000,
            fixed_step: None,
        }
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Dense-output polynomial of one accepted step.
struct Dense {
    t0: f64,
    h: f64,
    r: [Vec<f64>; 5],
}

impl Dense {
    fn eval(&self, t: f64) -> Vec<f64> {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        (0..self.r[0].len())
            .map(|i| {
                self.r[0][i] + s * (self.r[1][i] + s1 * (self.r[2][i] + s * (self.r[3][i] + s1 * self.r[4][i])))
            })
            .collect()
    }
}

/// Integrates `y' = f(t, y)` from `t0` to `t_end`. Samples are recorded at
/// every accepted step, or only at `sample_times` (via dense output) when
/// given. `in_domain` stops the run early.
pub fn integrate<F, G>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &IntegratorOptions,
    sample_times: Option<&[f64]>,
    mut in_domain: G,
) -> Result<Orbit>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    G: FnMut(f64, &[f64]) -> bool,
{
    let n = y0.len();
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let span = (t_end - t0).abs();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    f(t, &y, &mut k[0]);

    let mut samples = Vec::new();
    let mut pending: Vec<f64> = sample_times.map(|s| s.to_vec()).unwrap_or_default();
    let mut next_sample = 0;
    if sample_times.is_none() {
        samples.push(OrbitSample { t, state: y.clone() });
    }
    while next_sample < pending.len() && (pending[next_sample] - t0) * dir <= 0.0 {
        samples.push(OrbitSample {
            t: pending[next_sample],
            state: y.clone(),
        });
        next_sample += 1;
    }

    let scale = |a: f64, b: f64| opts.atol + opts.rtol * a.abs().max(b.abs());
    let mut h = match (opts.fixed_step, opts.h0) {
        (Some(h), _) => h,
        (None, Some(h)) => h,
        (None, None) => {
            let d0 = rms(&y, |i| y[i] / scale(y[i], y[i]));
            let d1 = rms(&k[0], |i| k[0][i] / scale(y[i], y[i]));
            let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            h.min(span.max(1e-300))
        }
    }
    .min(opts.h_max);

    let mut left = None;
    let mut steps = 0usize;
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut fac_old: f64 = 1e-4;
    while (t_end - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            return Err(Error::StepUnderflow { t, h });
        }
        let last = (t + dir * h - t_end) * dir >= 0.0;
        let hs = if last { (t_end - t).abs() } else { h };
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                tmp[i] = y[i] + dir * hs * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            f(t + dir * C[s] * hs, &tmp, &mut tail[0]);
        }
        // stage 7 evaluates f at the 5th-order solution
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(6) {
                acc += A[6][j] * kj[i];
            }
            ynew[i] = y[i] + dir * hs * acc;
        }
        let mut k7 = vec![0.0; n];
        f(t + dir * hs, &ynew, &mut k7);
        k[6] = k7;

        let err = if opts.fixed_step.is_some() {
            0.0
        } else {
            rms(&ynew, |i| {
                let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum();
                hs * e / scale(y[i], ynew[i])
            })
        };
        if !err.is_finite() && opts.fixed_step.is_none() {
            h = hs * 0.2;
            if h < opts.h_min {
                return Err(Error::StepUnderflow { t, h });
            }
            continue;
        }
        if err <= 1.0 {
            steps += 1;
            let tnew = if last { t_end } else { t + dir * hs };
            let dense = Dense {
                t0: t,
                h: tnew - t,
                r: [
                    y.clone(),
                    (0..n).map(|i| ynew[i] - y[i]).collect(),
                    (0..n).map(|i| dir * hs * k[0][i] - (ynew[i] - y[i])).collect(),
                    (0..n)
                        .map(|i| (ynew[i] - y[i]) - dir * hs * k[6][i] - (dir * hs * k[0][i] - (ynew[i] - y[i])))
                        .collect(),
                    (0..n)
                        .map(|i| dir * hs * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>())
                        .collect(),
                ],
            };
            while next_sample < pending.len() && (pending[next_sample] - tnew) * dir <= 0.0 {
                samples.push(OrbitSample {
                    t: pending[next_sample],
                    state: dense.eval(pending[next_sample]),
                });
                next_sample += 1;
            }
            t = tnew;
            y.copy_from_slice(&ynew);
            k[0] = k[6].clone();
            if sample_times.is_none() {
                samples.push(OrbitSample { t, state: y.clone() });
            }
            if !in_domain(t, &y) {
                left = Some(steps);
                break;
            }
            if opts.fixed_step.is_none() {
                // PI step control
                let fac = 0.9 * err.max(1e-10).powf(-0.17) * fac_old.powf(0.04);
                fac_old = err.max(1e-4);
                h = (hs * fac.clamp(0.2, 10.0)).min(opts.h_max);
            }
        } else {
            h = hs * (0.9 * err.powf(-0.2)).max(0.2);
            if h < opts.h_min * t.abs().max(1.0) {
                return Err(Error::StepUnderflow { t, h });
            }
        }
    }
    pending.truncate(next_sample);
    Ok(Orbit {
        steps_taken: steps,
        samples,
        labels: (0..n).map(|i| format!("s{i}")).collect(),
        integrator: "Dormand-Prince 5(4)".into(),
        step_policy: if opts.fixed_step.is_some() {
            "fixed".into()
        } else {
            "adaptive".into()
        },
        tolerance: opts.fixed_step.map_or(Some(opts.rtol), |_| None),
        left_domain: left,
    })
}

fn rms(v: &[f64], term: impl Fn(usize) -> f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    ((0..v.len()).map(|i| term(i).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Pointwise evaluation of a full field model on states `[x, y.., θ.., τ..]`.
#[derive(Clone, Debug)]
pub struct FieldEvaluator {
    jets: Vec<Jet>,
    m: usize,
    full: Vec<f64>,
    d: usize,
}

impl FieldEvaluator {
    pub fn new(model: &ModelData) -> Result<Self> {
        if model.kind != DynamicsKind::Flow {
            return Err(Error::Invalid("field evaluator needs a flow model".into()));
        }
        Ok(FieldEvaluator {
            jets: model.full_jets(POLYNOMIAL_DEGREE),
            m: model.m,
            full: model.freq.full(),
            d: model.d(),
        })
    }

    pub fn dim(&self) -> usize {
        1 + self.m + self.full.len()
    }

    pub fn eval(&self, s: &[f64], out: &mut [f64]) {
        let nv = 1 + self.m;
        let (vars, angles) = s.split_at(nv);
        for (o, j) in out.iter_mut().zip(&self.jets[..nv]) {
            *o = j.evaluate(vars, angles).re;
        }
        for a in 0..self.full.len() {
            let h = if a < self.d {
                self.jets[nv + a].evaluate(vars, angles).re
            } else {
                0.0
            };
            out[nv + a] = self.full[a] + h;
        }
    }
}

/// Integrates a full field model over `t_span` with tolerance `tol`.
pub fn integrate_flow(
    model: &ModelData,
    state0: &[f64],
    t_span: (f64, f64),
    tol: f64,
    sample_times: Option<&[f64]>,
) -> Result<Orbit> {
    let ev = FieldEvaluator::new(model)?;
    if state0.len() != ev.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state of length {} for a field of dimension {}",
            state0.len(),
            ev.dim()
        )));
    }
    let mut orbit = integrate(
        |_, s, out| ev.eval(s, out),
        t_span.0,
        state0,
        t_span.1,
        &IntegratorOptions::with_tol(tol),
        sample_times,
        |_, s| s.iter().all(|v| v.is_finite()),
    )?;
    orbit.labels = state_labels(model.m, model.d(), model.freq.d_prime());
    Ok(orbit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{FourierSeries, FrequencyVector};

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    #[test]
    fn quadratic_decay_closed_form() {
        let o = integrate(
            |_, y, dy| dy[0] = -y[0] * y[0],
            0.0,
            &[1.0],
            1.0,
            &IntegratorOptions::with_tol(1e-12),
            None,
            |_, _| true,
        )
        .unwrap();
        assert!((o.last().state[0] - 0.5).abs() < 1e-11);
        assert_eq!(o.last().t, 1.0);
    }

    #[test]
    fn dense_output_matches_closed_form() {
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.35).collect();
        let o = integrate(
            |_, y, dy| dy[0] = -y[0] * y[0],
            0.0,
            &[1.0],
            7.0,
            &IntegratorOptions::with_tol(1e-11),
            Some(&times),
            |_, _| true,
        )
        .unwrap();
        assert_eq!(o.samples.len(), times.len());
        for s in &o.samples {
            assert!((s.state[0] - 1.0 / (1.0 + s.t)).abs() < 1e-9, "t={}", s.t);
        }
    }

    #[test]
    fn fixed_step_order_is_five() {
        let err = |h: f64| {
            let o = integrate(
                |t, y, dy| dy[0] = y[0] * t.cos(),
                0.0,
                &[1.0],
                4.0,
                &IntegratorOptions::fixed(h),
                None,
                |_, _| true,
            )
            .unwrap();
            (o.last().state[0] - 4f64.sin().exp()).abs()
        };
        let (e1, e2) = (err(0.04), err(0.02));
        let slope = (e1 / e2).log2();
        assert!((slope - 5.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn kepler_parabola_energy() {
        let kepler = |_: f64, s: &[f64], ds: &mut [f64]| {
            let r3 = (s[0] * s[0] + s[1] * s[1]).powf(1.5);
            ds[0] = s[2];
            ds[1] = s[3];
            ds[2] = -s[0] / r3;
            ds[3] = -s[1] / r3;
        };
        let s0 = [1.0, 0.0, 0.0, 2f64.sqrt()];
        let o = integrate(kepler, 0.0, &s0, 1e3, &IntegratorOptions::with_tol(1e-13), None, |_, _| true).unwrap();
        for smp in &o.samples {
            let s = &smp.state;
            let e = 0.5 * (s[2] * s[2] + s[3] * s[3]) - 1.0 / (s[0] * s[0] + s[1] * s[1]).sqrt();
            assert!(e.abs() < 1e-9, "energy {e} at t={}", smp.t);
        }
    }

    #[test]
    fn quasiperiodic_self_convergence() {
        let nu = golden();
        let field = move |t: f64, s: &[f64], ds: &mut [f64]| {
            let tau = nu * t;
            ds[0] = -s[0] * s[0] * (1.0 + 0.3 * (std::f64::consts::TAU * tau).cos());
            ds[1] = s[0] * s[1];
        };
        let adaptive = integrate(field, 0.0, &[0.5, 0.1], 5.0, &IntegratorOptions::with_tol(1e-12), None, |_, _| true).unwrap();
        let reference = integrate(field, 0.0, &[0.5, 0.1], 5.0, &IntegratorOptions::fixed(1e-3), None, |_, _| true).unwrap();
        for i in 0..2 {
            assert!((adaptive.last().state[i] - reference.last().state[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn torus_point_is_rotated() {
        let mut model = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 1, 8);
        model.a = &model.a + &FourierSeries::cos_mode(1, 8, &[1], 0.4);
        let o = iterate_map(&model, &[0.0, 0.0, 0.25], 50, None).unwrap();
        for (k, s) in o.samples.iter().enumerate() {
            assert_eq!(s.state[0], 0.0);
            assert_eq!(s.state[1], 0.0);
            assert!((s.state[2] - (0.25 + k as f64 * golden())).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_exit_is_flagged() {
        let model = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 1, 8);
        let dom = Domain { rho: 0.1, nonnegative_x: true };
        let o = iterate_map(&model, &[0.05, 0.01, 0.0], 10_000, Some(&dom)).unwrap();
        // y grows like exp(Σ x_k) ~ k, so the orbit leaves the ball
        assert!(o.left_domain.is_some());
    }

    #[test]
    fn flow_model_integrates_quadratic_decay() {
        let model = ModelData::new(DynamicsKind::Flow, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 0, 8);
        let o = integrate_flow(&model, &[1.0, 0.0], (0.0, 1.0), 1e-12, None).unwrap();
        assert!((o.last().state[0] - 0.5).abs() < 1e-10);
        assert!((o.last().state[1] - golden()).abs() < 1e-10);
    }
}
