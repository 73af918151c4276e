//! Numerical checks of computed manifolds: decay orders of the true
//! invariance residual, sector bounds of the reduced dynamics, and forward
//! orbits of points on or near the manifold.

pub mod dd;

use crate::cohomology::ManifoldSolution;
use crate::dynamics::{iterate_map, iterate_reduced, Domain, MapEvaluator, Orbit};
use crate::error::{Error, Result};
use crate::fourier::FourierSeries;
use crate::jet::Jet;
use crate::model::{DynamicsKind, ModelData, ReducedDynamics, POLYNOMIAL_DEGREE};
use dd::{Cdd, Dd, TAU};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub x_min: f64,
    pub x_max: f64,
    pub n_samples: usize,
    /// Grid points per angle dimension.
    pub theta_samples: usize,
    pub slope_slack: f64,
    /// Number of times the window is shrunk on `WindowTooWide` by
    /// [`fit_error_orders_auto`].
    pub max_shrinks: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            x_min: 1e-3,
            x_max: 1e-2,
            n_samples: 12,
            theta_samples: 16,
            slope_slack: 0.1,
            max_shrinks: 4,
        }
    }
}

impl FitOptions {
    pub fn window(x_min: f64, x_max: f64) -> Self {
        FitOptions {
            x_min,
            x_max,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    pub component: String,
    /// `+∞` when the residual vanishes identically on the samples.
    pub fitted_slope: f64,
    pub target_order: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub x: f64,
    /// Sup over the angle grid of `|E|`, one entry per component.
    pub sup: Vec<f64>,
    /// Residual change caused by perturbing the coefficients of `K` at the
    /// level of their last bits; samples below it carry no order information.
    #[serde(default)]
    pub floor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub components: Vec<ComponentFit>,
    pub x_window: (f64, f64),
    pub theta_samples: usize,
    pub slope_slack: f64,
    pub samples: Vec<ResidualSample>,
}

impl OrderReport {
    pub fn pass(&self) -> bool {
        self.components.iter().all(|c| c.pass)
    }

    pub fn component(&self, name: &str) -> Option<&ComponentFit> {
        self.components.iter().find(|c| c.component == name)
    }

    /// `x` followed by `|E|` per component.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x");
        for c in &self.components {
            let _ = write!(out, ",E_{}", c.component);
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{:.17e}", s.x);
            for v in &s.sup {
                let _ = write!(out, ",{:.17e}", v);
            }
            out.push('\n');
        }
        out
    }
}

fn series_dd(s: &FourierSeries, theta: &[Dd]) -> Cdd {
    let mut acc = Cdd::ZERO;
    for (k, c) in s.iter() {
        let mut phase = Dd::ZERO;
        for (t, &ki) in theta.iter().zip(k) {
            if ki != 0 {
                phase = phase + t.mul_f64(ki as f64);
            }
        }
        acc = acc + Cdd::from(*c) * Cdd::cis_turns(phase);
    }
    acc
}

/// Derivative of `s` along the angle axis `axis`.
fn series_dd_axis(s: &FourierSeries, theta: &[Dd], axis: usize) -> Cdd {
    let mut acc = Cdd::ZERO;
    for (k, c) in s.iter() {
        if k[axis] == 0 {
            continue;
        }
        let mut phase = Dd::ZERO;
        for (t, &ki) in theta.iter().zip(k) {
            if ki != 0 {
                phase = phase + t.mul_f64(ki as f64);
            }
        }
        let w = TAU.mul_f64(k[axis] as f64);
        let ic = Cdd {
            re: -Dd::new(c.im),
            im: Dd::new(c.re),
        };
        acc = acc + ic.scale(w) * Cdd::cis_turns(phase);
    }
    acc
}

fn monomial_dd(e: &[u32], vars: &[Cdd]) -> Cdd {
    let mut m = Cdd::ONE;
    for (&p, v) in e.iter().zip(vars) {
        if p > 0 {
            m = m * v.powi(p);
        }
    }
    m
}

fn jet_dd(j: &Jet, vars: &[Cdd], theta: &[Dd]) -> Cdd {
    let mut acc = Cdd::ZERO;
    for (e, s) in j.iter() {
        acc = acc + series_dd(s, theta) * monomial_dd(e, vars);
    }
    acc
}

/// `∂_x` of a jet in the single variable `x`.
fn jet_dd_dx(j: &Jet, x: Cdd, theta: &[Dd]) -> Cdd {
    let mut acc = Cdd::ZERO;
    for (e, s) in j.iter() {
        let l = e[0];
        if l == 0 {
            continue;
        }
        acc = acc + (series_dd(s, theta) * x.powi(l - 1)).scale(Dd::new(l as f64));
    }
    acc
}

fn jet_dd_axis(j: &Jet, vars: &[Cdd], theta: &[Dd], axis: usize) -> Cdd {
    let mut acc = Cdd::ZERO;
    for (e, s) in j.iter() {
        acc = acc + series_dd_axis(s, theta, axis) * monomial_dd(e, vars);
    }
    acc
}

fn poly_dd(c: &std::collections::BTreeMap<usize, f64>, x: Dd) -> Dd {
    c.iter().fold(Dd::ZERO, |acc, (&l, &v)| acc + x.powi(l as u32).mul_f64(v))
}

fn theta_poly_dd(r: &ReducedDynamics, x: Dd, i: usize) -> Dd {
    r.theta_terms
        .iter()
        .fold(Dd::ZERO, |acc, (&l, v)| acc + x.powi(l as u32).mul_f64(v[i]))
}

/// Evaluates the true invariance residual of a solution against the full
/// model polynomial, in double-double precision.
pub struct Residual<'a> {
    model: &'a ModelData,
    sol: &'a ManifoldSolution,
    jets: Vec<Jet>,
}

impl<'a> Residual<'a> {
    pub fn new(model: &'a ModelData, sol: &'a ManifoldSolution) -> Result<Self> {
        if model.kind != sol.kind {
            return Err(Error::Invalid("solution and model are of different kinds".into()));
        }
        if sol.k.y.len() != model.m || sol.k.theta.len() != model.d() {
            return Err(Error::DimensionMismatch("solution components do not match the model".into()));
        }
        Ok(Residual {
            model,
            sol,
            jets: model.full_jets(POLYNOMIAL_DEGREE),
        })
    }

    pub fn component_names(&self) -> Vec<String> {
        let mut v = vec!["x".to_string()];
        v.extend((0..self.model.m).map(|i| format!("y{i}")));
        v.extend((0..self.model.d()).map(|i| format!("theta{i}")));
        v
    }

    /// Residual components `[E_x, E_y.., E_θ..]` at `(x, θ)`.
    pub fn at(&self, x: f64, theta: &[f64]) -> Vec<Complex64> {
        let th: Vec<Dd> = theta.iter().map(|&t| Dd::new(t)).collect();
        let out = match self.model.kind {
            DynamicsKind::Map => self.map_residual(Dd::new(x), &th),
            DynamicsKind::Flow => self.flow_residual(Dd::new(x), &th),
        };
        out.into_iter().map(Cdd::to_c64).collect()
    }

    fn eval_k(&self, x: Cdd, theta: &[Dd]) -> Vec<Cdd> {
        let k = &self.sol.k;
        std::iter::once(&k.x)
            .chain(&k.y)
            .chain(&k.theta)
            .map(|j| jet_dd(j, &[x], theta))
            .collect()
    }

    fn image_angles(&self, kv: &[Cdd], theta: &[Dd]) -> Vec<Dd> {
        let (m, d) = (self.model.m, self.model.d());
        theta
            .iter()
            .enumerate()
            .map(|(a, &t)| if a < d { t + kv[1 + m + a].re } else { t })
            .collect()
    }

    fn map_residual(&self, x: Dd, theta: &[Dd]) -> Vec<Cdd> {
        let (m, d) = (self.model.m, self.model.d());
        let r = &self.sol.reduced;
        let kv = self.eval_k(Cdd::real(x), theta);
        let angles = self.image_angles(&kv, theta);
        let fk: Vec<Cdd> = self.jets.iter().map(|j| jet_dd(j, &kv[..1 + m], &angles)).collect();
        let rx = poly_dd(&r.x_polynomial(), x);
        let rtheta: Vec<Dd> = (0..d)
            .map(|i| theta[i] + Dd::new(r.omega[i]) + theta_poly_dd(r, x, i))
            .collect();
        let kr = self.eval_k(Cdd::real(rx), &rtheta);
        let mut out = Vec::with_capacity(1 + m + d);
        for i in 0..1 + m {
            out.push(fk[i] - kr[i]);
        }
        for i in 0..d {
            let c = 1 + m + i;
            out.push(kv[c] + fk[c] - Cdd::real(theta_poly_dd(r, x, i)) - kr[c]);
        }
        out
    }

    fn flow_residual(&self, x: Dd, theta: &[Dd]) -> Vec<Cdd> {
        let (m, d) = (self.model.m, self.model.d());
        let r = &self.sol.reduced;
        let full = self.model.freq.full();
        let xc = Cdd::real(x);
        let kv = self.eval_k(xc, theta);
        let angles = self.image_angles(&kv, theta);
        let fk: Vec<Cdd> = self.jets.iter().map(|j| jet_dd(j, &kv[..1 + m], &angles)).collect();
        let yx = Cdd::real(poly_dd(&r.x_polynomial(), x));
        let speeds: Vec<Cdd> = (0..full.len())
            .map(|a| {
                let base = Dd::new(full[a]);
                Cdd::real(if a < d { base + theta_poly_dd(r, x, a) } else { base })
            })
            .collect();
        let k = &self.sol.k;
        let comps: Vec<&Jet> = std::iter::once(&k.x).chain(&k.y).chain(&k.theta).collect();
        let lie = |j: &Jet| -> Cdd {
            let mut acc = jet_dd_dx(j, xc, theta) * yx;
            for (a, s) in speeds.iter().enumerate() {
                acc = acc + jet_dd_axis(j, &[xc], theta, a) * *s;
            }
            acc
        };
        let mut out = Vec::with_capacity(1 + m + d);
        for (i, c) in comps.iter().enumerate() {
            let mut e = fk[i] - lie(c);
            if i > m {
                e = e - Cdd::real(theta_poly_dd(r, x, i - 1 - m));
            }
            out.push(e);
        }
        out
    }
}

fn theta_grid(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let mut grid = vec![Vec::new()];
    for _ in 0..dim {
        grid = grid
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |i| {
                    let mut q = p.clone();
                    q.push(i as f64 / n as f64);
                    q
                })
            })
            .collect();
    }
    grid
}

fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Below this multiple of `x` a double-double residual is rounding noise.
const DD_FLOOR: f64 = 1e-28;

/// Multiple of the coefficient-perturbation response treated as noise.
const ROUNDING_MARGIN: f64 = 4.0;

/// Copy of `sol` with every stored coefficient moved by a couple of ulps,
/// with alternating signs. The identity part of `K_x` is left exact.
fn nudged(sol: &ManifoldSolution) -> ManifoldSolution {
    let bump = |j: &Jet, skip_linear: bool| -> Jet {
        let mut out = j.clone();
        for (i, (e, c)) in j.iter().enumerate() {
            if skip_linear && e[0] == 1 {
                let one = c.average();
                let rest = c.oscillatory();
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let mut v = rest.scale(1.0 + sign * 2.0 * f64::EPSILON);
                v.add_term(vec![0; c.dim()], one);
                out.set_term(e.clone(), v);
                continue;
            }
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            out.set_term(e.clone(), c.scale(1.0 + sign * 2.0 * f64::EPSILON));
        }
        out
    };
    let mut s = sol.clone();
    s.k.x = bump(&sol.k.x, true);
    s.k.y = sol.k.y.iter().map(|j| bump(j, false)).collect();
    s.k.theta = sol.k.theta.iter().map(|j| bump(j, false)).collect();
    s
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Fits the decay order of each residual component on a log-spaced window.
pub fn fit_error_orders(model: &ModelData, sol: &ManifoldSolution, opts: &FitOptions) -> Result<OrderReport> {
    if !(opts.x_min > 0.0 && opts.x_max > opts.x_min) || opts.n_samples < 3 || opts.theta_samples == 0 {
        return Err(Error::Invalid(format!(
            "bad fit window [{}, {}] with {} samples",
            opts.x_min, opts.x_max, opts.n_samples
        )));
    }
    let res = Residual::new(model, sol)?;
    let nudged_sol = nudged(sol);
    let nudged_res = Residual::new(model, &nudged_sol)?;
    let names = res.component_names();
    let grid = theta_grid(model.torus_dim(), opts.theta_samples);
    let xs = log_space(opts.x_min, opts.x_max, opts.n_samples);
    let samples: Vec<ResidualSample> = xs
        .iter()
        .map(|&x| {
            let mut sup = vec![0.0f64; names.len()];
            let mut floor = vec![0.0f64; names.len()];
            for t in &grid {
                let e = res.at(x, t);
                let en = nudged_res.at(x, t);
                for c in 0..names.len() {
                    sup[c] = sup[c].max(e[c].norm());
                    floor[c] = floor[c].max(ROUNDING_MARGIN * (en[c] - e[c]).norm());
                }
            }
            ResidualSample { x, sup, floor }
        })
        .collect();

    let (j, n, p) = (sol.j, model.n, model.p);
    let mut components = Vec::with_capacity(names.len());
    for (c, name) in names.iter().enumerate() {
        let target = if c <= model.m { j + n } else { (j + p - 1).min(j + n - 1) };
        let all_zero = samples.iter().all(|s| s.sup[c] == 0.0);
        let slope = if all_zero {
            f64::INFINITY
        } else {
            let pts: Vec<(f64, f64)> = samples
                .iter()
                .filter(|s| s.sup[c] > (DD_FLOOR * s.x).max(s.floor[c]))
                .map(|s| (s.x.ln(), s.sup[c].ln()))
                .collect();
            if pts.len() < 3 {
                return Err(Error::WindowTooWide {
                    x_min: opts.x_min,
                    x_max: opts.x_max,
                });
            }
            least_squares_slope(&pts)
        };
        components.push(ComponentFit {
            component: name.clone(),
            fitted_slope: slope,
            target_order: target,
            pass: slope >= target as f64 - opts.slope_slack,
        });
    }
    Ok(OrderReport {
        components,
        x_window: (opts.x_min, opts.x_max),
        theta_samples: opts.theta_samples,
        slope_slack: opts.slope_slack,
        samples,
    })
}

/// [`fit_error_orders`], moving the lower end of the window up by half its
/// log-width each time the residual sinks to the rounding floor.
pub fn fit_error_orders_auto(model: &ModelData, sol: &ManifoldSolution, opts: &FitOptions) -> Result<OrderReport> {
    let mut o = opts.clone();
    let mut shrinks = 0;
    loop {
        match fit_error_orders(model, sol, &o) {
            Err(Error::WindowTooWide { .. }) if shrinks < opts.max_shrinks => {
                o.x_min = (o.x_min * o.x_max).sqrt();
                shrinks += 1;
            }
            r => return r,
        }
    }
}

/// `S(β, ρ) = { x : |arg x| < β/2, 0 < |x| ≤ ρ }`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub beta: f64,
    pub rho: f64,
}

impl Default for Sector {
    fn default() -> Self {
        Sector {
            beta: std::f64::consts::FRAC_PI_3,
            rho: 0.1,
        }
    }
}

impl Sector {
    pub fn contains(&self, x: Complex64) -> bool {
        let r = x.norm();
        r > 0.0 && r <= self.rho && x.arg().abs() < self.beta / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub steps: usize,
    /// Smallest `bound_k − |x_k|` over the run.
    pub min_slack: f64,
    /// Largest `|x_k| / bound_k`.
    pub max_ratio: f64,
    pub final_iterate: Complex64,
    /// `(k (N−1) ā)^α |x_k|` at the last step; tends to 1 for real starts.
    pub scaled_final: f64,
}

/// Iterates `R_x` from `x0` and checks the algebraic decay bound
/// `|x_k| ≤ |x0| / [1 + k (ā − η)(N − 1)|x0|^{N−1}]^{1/(N−1)}` and sector
/// invariance at every step.
pub fn sector_decay_check(
    r: &ReducedDynamics,
    x0: Complex64,
    k_steps: usize,
    eta: f64,
    sector: &Sector,
) -> Result<DecayReport> {
    if r.kind != DynamicsKind::Map {
        return Err(Error::Invalid("sector check needs reduced map dynamics".into()));
    }
    if !(eta > 0.0 && eta < r.a_bar) {
        return Err(Error::Invalid(format!("eta = {eta} must lie in (0, {})", r.a_bar)));
    }
    if r.n < 2 {
        return Err(Error::Invalid("degeneracy order must be at least 2".into()));
    }
    if !sector.contains(x0) {
        return Err(Error::EscapedSector { k: 0 });
    }
    let nm1 = (r.n - 1) as f64;
    let alpha = 1.0 / nm1;
    let r0 = x0.norm();
    let lead = (r.a_bar - eta) * nm1 * r0.powf(nm1);
    let iterates = iterate_reduced(r, x0, k_steps);
    let mut min_slack = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    for (k, x) in iterates.iter().enumerate().skip(1) {
        if !sector.contains(*x) {
            return Err(Error::EscapedSector { k });
        }
        let bound = r0 / (1.0 + k as f64 * lead).powf(alpha);
        let modulus = x.norm();
        if modulus > bound {
            return Err(Error::BoundViolated { k, modulus, bound });
        }
        min_slack = min_slack.min(bound - modulus);
        max_ratio = max_ratio.max(modulus / bound);
    }
    let last = *iterates.last().expect("initial iterate");
    Ok(DecayReport {
        steps: k_steps,
        min_slack,
        max_ratio,
        final_iterate: last,
        scaled_final: (k_steps as f64 * nm1 * r.a_bar).powf(alpha) * last.norm(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    pub stayed: bool,
    pub left_at: Option<usize>,
    /// Normal distance `max_i |y_i − K_y,i(u, φ)|` at each orbit point.
    pub distances: Vec<f64>,
    pub orbit: Orbit,
}

impl MembershipReport {
    pub fn require_stays(&self) -> Result<()> {
        match self.left_at {
            Some(k) => Err(Error::OrbitLeftDomain { k }),
            None => Ok(()),
        }
    }
}

/// Projection of states onto the manifold along the fibers of `(x, θ)`.
pub struct FiberProjector {
    k: Vec<Jet>,
    dx: Vec<Jet>,
    dth: Vec<Vec<Jet>>,
    m: usize,
    d: usize,
}

impl FiberProjector {
    pub fn new(sol: &ManifoldSolution) -> Self {
        let k: Vec<Jet> = std::iter::once(sol.k.x.clone())
            .chain(sol.k.y.iter().cloned())
            .chain(sol.k.theta.iter().cloned())
            .collect();
        let d = sol.k.theta.len();
        let dim = sol.k.x.dim();
        FiberProjector {
            dx: k.iter().map(|j| j.derivative_var(0)).collect(),
            dth: k.iter().map(|j| (0..dim).map(|a| j.derivative_theta(a)).collect()).collect(),
            m: sol.k.y.len(),
            d,
            k,
        }
    }

    /// Solves `K_x(u, φ) = x`, `φ + K_θ-deviation(u, φ) = θ` by Newton's
    /// method; returns `(u, φ)`.
    pub fn project(&self, x: f64, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (m, d) = (self.m, self.d);
        let n = 1 + d;
        let mut u = x;
        let mut phi = theta.to_vec();
        for _ in 0..60 {
            let z = [u];
            let mut f = vec![self.k[0].evaluate(&z, &phi).re - x];
            for i in 0..d {
                let diff = phi[i] + self.k[1 + m + i].evaluate(&z, &phi).re - theta[i];
                f.push(diff - diff.round());
            }
            let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
            let rows: Vec<usize> = std::iter::once(0).chain((0..d).map(|i| 1 + m + i)).collect();
            for (r, &c) in rows.iter().enumerate() {
                jac[(r, 0)] = self.dx[c].evaluate(&z, &phi).re;
                for a in 0..d {
                    jac[(r, 1 + a)] = self.dth[c][a].evaluate(&z, &phi).re + if r == 1 + a { 1.0 } else { 0.0 };
                }
            }
            let step = jac.lu().solve(&nalgebra::DVector::from_vec(f.clone()))?;
            u -= step[0];
            for a in 0..d {
                phi[a] -= step[1 + a];
            }
            if step.amax() <= 1e-15 * (1.0 + u.abs()) {
                return Some((u, phi));
            }
        }
        None
    }

    pub fn normal_distance(&self, state: &[f64]) -> f64 {
        let (m, d) = (self.m, self.d);
        match self.project(state[0], &state[1 + m..1 + m + d]) {
            Some((u, phi)) => (0..m)
                .map(|i| (state[1 + i] - self.k[1 + i].evaluate(&[u], &phi).re).abs())
                .fold(0.0, f64::max),
            None => f64::INFINITY,
        }
    }
}

/// Iterates the full map from `point` for `horizon` steps, tracking whether
/// the orbit stays in `domain` and its distance to the computed manifold.
pub fn stable_set_membership(
    model: &ModelData,
    sol: &ManifoldSolution,
    point: &[f64],
    horizon: usize,
    domain: &Domain,
) -> Result<MembershipReport> {
    if model.kind != DynamicsKind::Map {
        return Err(Error::Invalid("membership check needs a map model".into()));
    }
    let ev = MapEvaluator::new(model)?;
    if point.len() != ev.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point of length {} for a model with {} components",
            point.len(),
            ev.dim()
        )));
    }
    if !domain.contains(point[0], &point[1..1 + model.m]) {
        return Err(Error::OrbitLeftDomain { k: 0 });
    }
    let orbit = iterate_map(model, point, horizon, Some(domain))?;
    let proj = FiberProjector::new(sol);
    let distances = orbit.samples.iter().map(|s| proj.normal_distance(&s.state)).collect();
    Ok(MembershipReport {
        stayed: orbit.left_domain.is_none(),
        left_at: orbit.left_domain,
        distances,
        orbit,
    })
}
