//! Planar restricted problem near parabolic infinity: potential expansion,
//! McGehee-type chart, builders for field models in hypothesis form, and an
//! escape demonstration.

use crate::cohomology::ManifoldSolution;
use crate::dynamics::{integrate, IntegratorOptions, Orbit};
use crate::error::{Error, Result};
use crate::fourier::{FourierSeries, FrequencyVector};
use crate::jet::{compose_all, Jet, Substitution};
use crate::model::{DynamicsKind, FlowModel, ModelData};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt::Write;
use std::path::Path;

/// Primaries moving quasiperiodically in the plane, positions `q_j(ω t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimarySystem {
    pub masses: Vec<f64>,
    /// `(x, y)` coordinate series of each primary, angles in turns.
    pub motions: Vec<[FourierSeries; 2]>,
    pub omega: Vec<f64>,
    pub order_cap: u32,
}

/// Relative tolerance of the center-of-mass identity.
pub const COM_TOLERANCE: f64 = 1e-12;

type ModeTable = Vec<(Vec<i32>, f64, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub x: ModeTable,
    pub y: ModeTable,
}

/// On-disk form of a [`PrimarySystem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimaryFile {
    pub masses: Vec<f64>,
    pub omega: Vec<f64>,
    pub order_cap: u32,
    pub motions: Vec<MotionRecord>,
}

fn series_from_table(dim: usize, cap: u32, t: &ModeTable) -> Result<FourierSeries> {
    let mut s = FourierSeries::zero(dim, cap);
    for (k, re, im) in t {
        if k.len() != dim {
            return Err(Error::DimensionMismatch(format!("mode {k:?} on a torus of dimension {dim}")));
        }
        s.add_term(k.clone(), Complex64::new(*re, *im));
    }
    Ok(s)
}

fn table_from_series(s: &FourierSeries) -> ModeTable {
    s.iter().map(|(k, c)| (k.clone(), c.re, c.im)).collect()
}

impl PrimarySystem {
    pub fn new(masses: Vec<f64>, motions: Vec<[FourierSeries; 2]>, omega: Vec<f64>, order_cap: u32) -> Result<Self> {
        if masses.is_empty() || masses.len() != motions.len() {
            return Err(Error::DimensionMismatch("one motion per mass is required".into()));
        }
        if masses.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Hypothesis("masses must be positive".into()));
        }
        if omega.is_empty() {
            return Err(Error::Invalid("at least one frequency is required".into()));
        }
        for q in &motions {
            if q.iter().any(|s| s.dim() != omega.len()) {
                return Err(Error::DimensionMismatch("motion series live on a torus of the wrong dimension".into()));
            }
        }
        let sys = PrimarySystem {
            masses,
            motions,
            omega,
            order_cap,
        };
        let scale = sys
            .masses
            .iter()
            .zip(&sys.motions)
            .map(|(m, q)| m * (q[0].strip_norm(0.0) + q[1].strip_norm(0.0)))
            .fold(sys.total_mass(), f64::max);
        for c in 0..2 {
            let mut sum = FourierSeries::zero(sys.dim(), order_cap);
            for (m, q) in sys.masses.iter().zip(&sys.motions) {
                sum = &sum + &q[c].scale(*m);
            }
            let err = sum.strip_norm(0.0);
            if err > COM_TOLERANCE * scale {
                return Err(Error::Hypothesis(format!(
                    "center of mass is not fixed: |Σ m_j q_j| = {err:e}"
                )));
            }
        }
        Ok(sys)
    }

    /// One primary of mass `mass` resting at the origin.
    pub fn single(mass: f64, omega: Vec<f64>) -> Result<Self> {
        let d = omega.len();
        PrimarySystem::new(vec![mass], vec![[FourierSeries::zero(d, 8), FourierSeries::zero(d, 8)]], omega, 8)
    }

    /// Two primaries on circles about their barycenter, with separation 1
    /// and angular frequency `2π ω` (one revolution per `1/ω` time units).
    pub fn circular_pair(m1: f64, m2: f64, omega: f64, order_cap: u32) -> Result<Self> {
        let total = m1 + m2;
        let (r1, r2) = (m2 / total, m1 / total);
        let circle = |r: f64| {
            [
                FourierSeries::cos_mode(1, order_cap, &[1], r),
                FourierSeries::sin_mode(1, order_cap, &[1], r),
            ]
        };
        PrimarySystem::new(vec![m1, m2], vec![circle(r1), circle(-r2)], vec![omega], order_cap)
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Positions of the primaries at time `t`.
    pub fn positions(&self, t: f64) -> Vec<[f64; 2]> {
        let phi: Vec<f64> = self.omega.iter().map(|w| w * t).collect();
        self.motions
            .iter()
            .map(|q| [q[0].evaluate(&phi).re, q[1].evaluate(&phi).re])
            .collect()
    }

    /// `V(z, t) = Σ_j m_j / |z − q_j(ω t)|`.
    pub fn potential(&self, z: [f64; 2], t: f64) -> f64 {
        self.positions(t)
            .iter()
            .zip(&self.masses)
            .map(|(q, m)| m / ((z[0] - q[0]).hypot(z[1] - q[1])))
            .sum()
    }

    /// `∇V` at `z`.
    pub fn acceleration(&self, z: [f64; 2], t: f64) -> [f64; 2] {
        let mut a = [0.0; 2];
        for (q, m) in self.positions(t).iter().zip(&self.masses) {
            let (dx, dy) = (z[0] - q[0], z[1] - q[1]);
            let r3 = (dx * dx + dy * dy).powf(1.5);
            a[0] -= m * dx / r3;
            a[1] -= m * dy / r3;
        }
        a
    }

    pub fn to_file(&self) -> PrimaryFile {
        PrimaryFile {
            masses: self.masses.clone(),
            omega: self.omega.clone(),
            order_cap: self.order_cap,
            motions: self
                .motions
                .iter()
                .map(|q| MotionRecord {
                    x: table_from_series(&q[0]),
                    y: table_from_series(&q[1]),
                })
                .collect(),
        }
    }

    pub fn from_file(f: &PrimaryFile) -> Result<Self> {
        let d = f.omega.len();
        let motions = f
            .motions
            .iter()
            .map(|r| {
                Ok([
                    series_from_table(d, f.order_cap, &r.x)?,
                    series_from_table(d, f.order_cap, &r.y)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        PrimarySystem::new(f.masses.clone(), motions, f.omega.clone(), f.order_cap)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let f: PrimaryFile = serde_json::from_str(&text)?;
        PrimarySystem::from_file(&f)
    }
}

/// Coefficients of `(1 − z)^{−1/2} = Σ c_l z^l`.
pub fn binomial_half(n: usize) -> Vec<f64> {
    let mut c = vec![1.0; n + 1];
    for l in 1..=n {
        c[l] = c[l - 1] * (2 * l - 1) as f64 / (2 * l) as f64;
    }
    c
}

/// Expansion of the potential in `ρ = 1/r` through `ρ^degree`. The result
/// is a jet in one variable whose coefficients live on `T^{1+d}`: the first
/// angle is the polar angle in turns, the rest are the primaries' phases.
pub fn expand_potential(sys: &PrimarySystem, degree: usize) -> Result<Jet> {
    if degree < 1 {
        return Err(Error::Invalid("potential degree must be at least 1".into()));
    }
    let d = sys.dim();
    let cap = sys.order_cap;
    let dim = 1 + d;
    let smax = degree - 1;
    let c = binomial_half(smax);
    let i = Complex64::new(0.0, 1.0);
    let mut jet = Jet::zero(1, degree, dim, cap);
    for (m, q) in sys.masses.iter().zip(&sys.motions) {
        let z = &q[0] + &q[1].scale(i);
        let zb = &q[0] - &q[1].scale(i);
        let pow = |s: &FourierSeries| {
            let mut p = vec![FourierSeries::constant(d, cap, 1.0)];
            for l in 1..=smax {
                let next = p[l - 1].mul_truncated(s).0;
                p.push(next);
            }
            p
        };
        let (zp, zbp) = (pow(&z), pow(&zb));
        for s in 0..=smax {
            let mut coeff = FourierSeries::zero(dim, cap);
            for l in 0..=s {
                let k = s - l;
                let prod = zp[l].mul_truncated(&zbp[k]).0.scale(m * c[l] * c[k]);
                // e^{−i(l−k)θ}: polar-angle mode k − l
                let n = k as i32 - l as i32;
                for (mode, v) in prod.iter() {
                    let mut kk = Vec::with_capacity(dim);
                    kk.push(n);
                    kk.extend_from_slice(mode);
                    coeff.add_term(kk, *v);
                }
            }
            jet.add_term(vec![(s + 1) as u32], &coeff);
        }
    }
    jet.prune(1e-300);
    Ok(jet)
}

/// Polar state of the massless body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarState {
    pub r: f64,
    /// Polar angle in radians.
    pub theta: f64,
    /// Radial velocity.
    pub y: f64,
    /// Angular momentum.
    pub g: f64,
}

impl PolarState {
    pub fn to_cartesian(&self) -> [f64; 4] {
        let (s, c) = self.theta.sin_cos();
        let vt = self.g / self.r;
        [
            self.r * c,
            self.r * s,
            self.y * c - vt * s,
            self.y * s + vt * c,
        ]
    }

    pub fn from_cartesian(s: &[f64]) -> Self {
        let r = s[0].hypot(s[1]);
        PolarState {
            r,
            theta: s[1].atan2(s[0]),
            y: (s[0] * s[2] + s[1] * s[3]) / r,
            g: s[0] * s[3] - s[1] * s[2],
        }
    }
}

/// McGehee state `(x, y, θ, G)` with `r = 2/x²`, plus the torus phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McGeheeState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub g: f64,
    pub phi: Vec<f64>,
}

impl McGeheeState {
    pub fn from_polar(p: &PolarState, phi: Vec<f64>) -> Self {
        McGeheeState {
            x: (2.0 / p.r).sqrt(),
            y: p.y,
            theta: p.theta,
            g: p.g,
            phi,
        }
    }

    pub fn to_polar(&self) -> PolarState {
        PolarState {
            r: 2.0 / (self.x * self.x),
            theta: self.theta,
            y: self.y,
            g: self.g,
        }
    }
}

/// Changes of variables between polar coordinates and the model variables
/// `(v, u, α̃, G̃)` of the restricted field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedChart {
    pub mass: f64,
    /// Reference angle `α₀` (radians) and angular momentum `G₀`.
    pub alpha0: f64,
    pub g0: f64,
    /// `x = x_scale · X`, `y = y_scale · Y`.
    pub x_scale: f64,
    pub y_scale: f64,
    /// `α = θ + angle_shear · G · Y`.
    pub angle_shear: f64,
}

impl RestrictedChart {
    pub fn new(mass: f64, alpha0: f64, g0: f64) -> Self {
        RestrictedChart {
            mass,
            alpha0,
            g0,
            x_scale: mass.powf(-1.0 / 6.0),
            y_scale: mass.powf(1.0 / 3.0),
            angle_shear: mass.powf(-2.0 / 3.0),
        }
    }

    /// `[v, u, α̃, G̃]` of a polar state (requires `r > 0`).
    pub fn to_model(&self, p: &PolarState) -> [f64; 4] {
        let xs = (2.0 / p.r).sqrt() / self.x_scale;
        let ys = p.y / self.y_scale;
        let alpha = p.theta + self.angle_shear * p.g * ys;
        let mut da = alpha - self.alpha0;
        da -= std::f64::consts::TAU * (da / std::f64::consts::TAU).round();
        [
            (xs + ys) / 2.0,
            (xs - ys) / 2.0,
            da / xs,
            (p.g - self.g0) / xs,
        ]
    }

    pub fn to_polar(&self, w: &[f64]) -> PolarState {
        let (v, u, at, gt) = (w[0], w[1], w[2], w[3]);
        let xs = u + v;
        let ys = v - u;
        let g = self.g0 + xs * gt;
        let alpha = self.alpha0 + xs * at;
        let x = self.x_scale * xs;
        PolarState {
            r: 2.0 / (x * x),
            theta: alpha - self.angle_shear * g * ys,
            y: self.y_scale * ys,
            g,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedOptions {
    /// Degree of the field jets in the model variables.
    pub degree: usize,
    pub alpha0: f64,
    pub g0: f64,
    /// Drop every term beyond the leading parabolic part.
    pub truncate_tail: bool,
}

impl Default for RestrictedOptions {
    fn default() -> Self {
        RestrictedOptions {
            degree: 12,
            alpha0: 0.0,
            g0: 1.0,
            truncate_tail: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedInfo {
    /// Degree of the leading parabolic term read off the jet.
    pub n_computed: usize,
    /// Degree stated alongside the original construction.
    pub n_stated: usize,
    pub a: f64,
    pub potential_degree: usize,
}

fn exp_series(z: Complex64, powers: &[Jet]) -> Jet {
    let mut acc = powers[0].clone();
    let mut f = Complex64::new(1.0, 0.0);
    for (k, p) in powers.iter().enumerate().skip(1) {
        f = f * z / k as f64;
        acc = &acc + &p.scale(f);
    }
    acc
}

/// Restricted problem near infinity as a field in `(v, u, α̃, G̃)` with time
/// angles `φ = ω t`; `v` is the parabolic direction of the stable whisker.
pub fn build_restricted_field(
    sys: &PrimarySystem,
    opts: &RestrictedOptions,
) -> Result<(FlowModel, RestrictedChart, RestrictedInfo)> {
    let deg = opts.degree;
    if deg < 5 {
        return Err(Error::Invalid("restricted field needs degree at least 5".into()));
    }
    let mass = sys.total_mass();
    let chart = RestrictedChart::new(mass, opts.alpha0, opts.g0);
    let (dim, cap) = (sys.dim(), sys.order_cap);
    let nv = 4;
    // one extra degree survives the division by X below
    let wdeg = deg + 1;
    let var = |i| Jet::variable(i, nv, wdeg, dim, cap);
    let cst = |c: Complex64| Jet::constant(nv, wdeg, FourierSeries::constant(dim, cap, c));
    let real = |c: f64| cst(Complex64::new(c, 0.0));
    let (xs, ys, at, gt) = (var(0), var(1), var(2), var(3));
    let g = &real(opts.g0) + &(&xs * &gt);
    let c = chart.angle_shear;
    let x6 = chart.x_scale.powi(6);

    let xdot = (&xs.powi(3) * &ys).scale(-0.25);
    let mut ydot = xs.powi(4).scale(-0.25);
    let mut atdot = (&(&at * &xs.powi(2)) * &ys).scale(0.25);
    let mut gtdot = (&(&gt * &xs.powi(2)) * &ys).scale(0.25);
    let pot_degree = deg / 2 + 1;
    if !opts.truncate_tail {
        let pot = expand_potential(sys, pot_degree)?;
        // θ − α₀ as a jet
        let s = &(&xs * &at) - &(&ys * &g).scale(c);
        let mut spow = vec![real(1.0)];
        for k in 1..=wdeg {
            let next = &spow[k - 1] * &s;
            spow.push(next);
        }
        let rho = xs.powi(2).scale(chart.x_scale * chart.x_scale / 2.0);
        let mut w_theta = Jet::zero(nv, wdeg, dim, cap);
        let mut w_r = Jet::zero(nv, wdeg, dim, cap);
        for (e, series) in pot.iter() {
            let l = e[0];
            if l < 2 {
                continue;
            }
            let mut by_mode: std::collections::BTreeMap<i32, FourierSeries> = Default::default();
            for (k, v) in series.iter() {
                by_mode
                    .entry(k[0])
                    .or_insert_with(|| FourierSeries::zero(dim, cap))
                    .add_term(k[1..].to_vec(), *v);
            }
            let rl = rho.powi(l);
            let rl1 = &rl * &rho;
            for (n, a) in by_mode {
                let phase = Complex64::from_polar(1.0, n as f64 * opts.alpha0);
                let en = exp_series(Complex64::new(0.0, n as f64), &spow).scale(phase).scale_series(&a);
                w_theta = &w_theta + &(&en * &rl).scale(Complex64::new(0.0, n as f64));
                w_r = &w_r + &(&en * &rl1).scale(-(l as f64));
            }
        }
        let centrifugal = &(&g * &g) * &xs.powi(6).scale(x6 / 8.0);
        let radial = &centrifugal + &w_r;
        ydot = &ydot + &radial.scale(1.0 / chart.y_scale);
        let alphadot = &(&w_theta * &ys).scale(c) + &(&g * &radial).scale(c / chart.y_scale);
        atdot = &atdot.with_deg(deg) + &alphadot.divide_by_var(0, 1e-12)?;
        gtdot = &gtdot.with_deg(deg) + &w_theta.divide_by_var(0, 1e-12)?;
    }

    // X = v + u, Y = v − u
    let var = |i| Jet::variable(i, nv, deg, dim, cap);
    let (v, u) = (var(0), var(1));
    let sub_vars = [&v + &u, &v - &u, var(2), var(3)];
    let fields = [
        (&xdot + &ydot).scale(0.5).with_deg(deg),
        (&xdot - &ydot).scale(0.5).with_deg(deg),
        atdot.with_deg(deg),
        gtdot.with_deg(deg),
    ];
    let mut jets = compose_all(
        &fields,
        &Substitution {
            vars: &sub_vars,
            theta_dev: &[],
            shift: None,
        },
    )?;
    for j in &mut jets {
        *j = j.map_coeffs(|s| s.real_part());
        j.prune(1e-15);
    }
    let mut n_computed = 0;
    let mut a = 0.0;
    for l in 1..=deg {
        let cf = jets[0].coeff(&[l as u32, 0, 0, 0]).average().re;
        if cf != 0.0 {
            n_computed = l;
            a = -cf;
            break;
        }
    }
    if n_computed < 2 {
        return Err(Error::Hypothesis("no parabolic leading term in the restricted field".into()));
    }
    let freq = FrequencyVector::new(vec![], sys.omega.clone());
    let data = ModelData::from_full_jets(
        DynamicsKind::Flow,
        n_computed,
        n_computed,
        freq,
        3,
        &jets,
        Some(deg),
        vec![opts.alpha0, opts.g0],
    )?;
    let model = FlowModel::new(data)?;
    Ok((
        model,
        chart,
        RestrictedInfo {
            n_computed,
            n_stated: 6,
            a,
            potential_degree: pot_degree,
        },
    ))
}

/// Polar-coordinate vector field of the massless body, `(ṙ, θ̇, ẏ, Ġ)`.
pub fn polar_field(sys: &PrimarySystem, p: &PolarState, t: f64) -> PolarState {
    let (s, c) = p.theta.sin_cos();
    let z = [p.r * c, p.r * s];
    let acc = sys.acceleration(z, t);
    let ar = acc[0] * c + acc[1] * s;
    let at = -acc[0] * s + acc[1] * c;
    PolarState {
        r: p.y,
        theta: p.g / (p.r * p.r),
        y: p.g * p.g / p.r.powi(3) + ar,
        g: p.r * at,
    }
}

/// One tail term of the full-problem final system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEntry {
    /// One of `q`, `p`, `alpha`, `G`, `rho<i>`, `phi<i>`.
    pub component: String,
    /// Exponents of `(q, p, α̃, G̃, ρ̃_1..ρ̃_d)`.
    pub monomial: Vec<u32>,
    pub mode: Vec<i32>,
    pub re: f64,
    pub im: f64,
}

/// Externally supplied data of a KAM torus of the inner bodies together
/// with the tails of the final system around it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusData {
    /// Frequencies `ω⁰` of the torus.
    pub omega: Vec<f64>,
    pub order_cap: u32,
    /// Degree through which the tails are known.
    pub known_degree: usize,
    /// Reduced mass of the escaping body and the masses in its scaling.
    pub mu_n: f64,
    pub m_n: f64,
    pub big_m_n: f64,
    /// Angular momentum of the inner bodies on the torus.
    pub inner_angular_momentum: f64,
    #[serde(default)]
    pub tails: Vec<TailEntry>,
}

impl TorusData {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonInfo {
    pub n: usize,
    pub p: usize,
    pub a: f64,
    pub theta_n0: f64,
    pub g_n0: f64,
    /// Total angular momentum on the torus, inner part plus `G_n⁰`.
    pub total_angular_momentum: f64,
}

/// Final system of the full problem in `(q, p, α̃, G̃, ρ̃, φ)` with declared
/// `N = 4`, `P = 6`, `a = 1/4`; tails come from `data`.
pub fn build_full_skeleton(
    data: &TorusData,
    theta_n0: f64,
    g_n0: f64,
    degree: usize,
) -> Result<(FlowModel, SkeletonInfo)> {
    const N: usize = 4;
    const P: usize = 6;
    let d = data.omega.len();
    if d == 0 {
        return Err(Error::InsufficientTorusData("no torus frequencies".into()));
    }
    if !(data.mu_n > 0.0 && data.m_n > 0.0 && data.big_m_n > 0.0) {
        return Err(Error::InsufficientTorusData("masses must be positive".into()));
    }
    if degree < 2 * N - 1 {
        return Err(Error::Invalid(format!("skeleton degree {degree} is below 2N − 1 = 7")));
    }
    if degree > data.known_degree {
        return Err(Error::InsufficientTorusData(format!(
            "tails known through degree {} but degree {degree} requested",
            data.known_degree
        )));
    }
    let m = 3 + d;
    let nv = 1 + m;
    let cap = data.order_cap;
    let var = |i| Jet::variable(i, nv, degree, d, cap);
    let (q, p) = (var(0), var(1));
    let s = &q + &p;
    let s2 = s.powi(2);
    let s3 = &s2 * &s;
    let diff = &q - &p;
    let mut jets = vec![
        (&s3 * &q).scale(-0.25),
        (&s3 * &p).scale(0.25),
        (&(&s2 * &diff) * &var(2)).scale(0.25),
        (&(&s2 * &diff) * &var(3)).scale(0.25),
    ];
    for i in 0..d {
        jets.push((&(&s2 * &diff) * &var(4 + i)).scale(1.5));
    }
    for _ in 0..d {
        jets.push(Jet::zero(nv, degree, d, cap));
    }
    for t in &data.tails {
        let (slot, min_order) = match t.component.as_str() {
            "q" => (0, N + 2),
            "p" => (1, N + 2),
            "alpha" => (2, N + 1),
            "G" => (3, N + 1),
            c if c.starts_with("rho") => (4 + tail_index(c, 3, d)?, N + 1),
            c if c.starts_with("phi") => (1 + m + tail_index(c, 3, d)?, P),
            c => return Err(Error::Invalid(format!("unknown tail component {c}"))),
        };
        if t.monomial.len() != nv || t.mode.len() != d {
            return Err(Error::DimensionMismatch(format!("tail entry {t:?}")));
        }
        let order: u32 = t.monomial.iter().sum();
        if (order as usize) < min_order {
            return Err(Error::Hypothesis(format!(
                "tail term of {} has order {order}, below {min_order}",
                t.component
            )));
        }
        let mut c = FourierSeries::zero(d, cap);
        c.add_term(t.mode.clone(), Complex64::new(t.re, t.im));
        jets[slot].add_term(t.monomial.clone(), &c);
    }
    let freq = FrequencyVector::new(data.omega.clone(), vec![]);
    let model = ModelData::from_full_jets(
        DynamicsKind::Flow,
        N,
        P,
        freq,
        m,
        &jets,
        Some(degree),
        vec![theta_n0, g_n0],
    )?;
    let model = FlowModel::new(model)?;
    Ok((
        model,
        SkeletonInfo {
            n: N,
            p: P,
            a: 0.25,
            theta_n0,
            g_n0,
            total_angular_momentum: data.inner_angular_momentum + g_n0,
        },
    ))
}

fn tail_index(c: &str, prefix: usize, d: usize) -> Result<usize> {
    let i: usize = c[prefix..]
        .parse()
        .map_err(|_| Error::Invalid(format!("bad tail component {c}")))?;
    if i >= d {
        return Err(Error::DimensionMismatch(format!("tail component {c} with d = {d}")));
    }
    Ok(i)
}

/// Time since pericenter on the parabola through `p` about mass `mass`.
pub fn parabolic_time_since_pericenter(mass: f64, p: &PolarState) -> f64 {
    let q = p.g * p.g / (2.0 * mass);
    if q <= 0.0 {
        // radial parabola: r = (9 M t² / 2)^{1/3}
        return p.y.signum() * (2.0 * p.r.powi(3) / (9.0 * mass)).sqrt();
    }
    let dd = (p.r / q - 1.0).max(0.0).sqrt() * p.y.signum();
    (2.0 * q.powi(3) / mass).sqrt() * (dd + dd.powi(3) / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeOptions {
    pub x0: f64,
    /// Initial torus phase; the start time is `t = 0`.
    pub phi0: Vec<f64>,
    pub horizon: f64,
    pub tol: f64,
    /// Law-ratio window `[t_lo, t_hi]` in elapsed time.
    pub window: (f64, f64),
    pub law_tolerance: f64,
    /// Radial-velocity offset of the control orbit.
    pub control_offset: f64,
    pub samples: usize,
}

impl Default for EscapeOptions {
    fn default() -> Self {
        EscapeOptions {
            x0: 0.05,
            phi0: vec![],
            horizon: 1e4,
            tol: 1e-12,
            window: (1e3, 1e4),
            law_tolerance: 0.02,
            control_offset: -0.05,
            samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeRow {
    pub t: f64,
    pub r: f64,
    pub y: f64,
    pub energy: f64,
    pub law_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSummary {
    pub rows: Vec<EscapeRow>,
    /// Range of the law ratio over the window.
    pub law_min: f64,
    pub law_max: f64,
    pub law_ok: bool,
    pub final_y: f64,
    pub final_energy: f64,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub initial: PolarState,
    /// Time since pericenter of the osculating parabola at the start.
    pub epoch_offset: f64,
    pub manifold: OrbitSummary,
    pub control: OrbitSummary,
    pub control_fails_law: bool,
}

impl EscapeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("orbit,t,r,y,energy,law_ratio\n");
        for (name, s) in [("manifold", &self.manifold), ("control", &self.control)] {
            for r in &s.rows {
                let _ = writeln!(
                    out,
                    "{name},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                    r.t, r.r, r.y, r.energy, r.law_ratio
                );
            }
        }
        out
    }
}

fn run_orbit(sys: &PrimarySystem, start: &PolarState, epoch: f64, opts: &EscapeOptions) -> Result<(OrbitSummary, Orbit)> {
    let n = opts.samples.max(2);
    let (a, b) = (opts.window.0.max(1e-3), opts.horizon);
    let mut times: Vec<f64> = (0..n)
        .map(|i| (a.ln() + (b.ln() - a.ln()) * i as f64 / (n - 1) as f64).exp().min(b))
        .collect();
    times.insert(0, 0.0);
    let field = |t: f64, s: &[f64], ds: &mut [f64]| {
        let acc = sys.acceleration([s[0], s[1]], t);
        ds[0] = s[2];
        ds[1] = s[3];
        ds[2] = acc[0];
        ds[3] = acc[1];
    };
    let mass = sys.total_mass();
    let result = integrate(
        field,
        0.0,
        &start.to_cartesian(),
        opts.horizon,
        &IntegratorOptions::with_tol(opts.tol),
        Some(&times),
        |_, s| s[0].hypot(s[1]) > 1e-6,
    );
    let orbit = match result {
        Ok(o) => o,
        Err(Error::StepUnderflow { .. }) => {
            return Ok((
                OrbitSummary {
                    rows: vec![],
                    law_min: f64::NAN,
                    law_max: f64::NAN,
                    law_ok: false,
                    final_y: f64::NAN,
                    final_energy: f64::NAN,
                    completed: false,
                },
                Orbit {
                    samples: vec![],
                    labels: vec![],
                    integrator: String::new(),
                    step_policy: String::new(),
                    tolerance: None,
                    left_domain: Some(0),
                    steps_taken: 0,
                },
            ))
        }
        Err(e) => return Err(e),
    };
    let rows: Vec<EscapeRow> = orbit
        .samples
        .iter()
        .map(|smp| {
            let s = &smp.state;
            let p = PolarState::from_cartesian(s);
            let v2 = s[2] * s[2] + s[3] * s[3];
            let energy = 0.5 * v2 - sys.potential([s[0], s[1]], smp.t);
            let tau = smp.t + epoch;
            let law = p.r / (4.5 * mass * tau * tau).cbrt();
            EscapeRow {
                t: smp.t,
                r: p.r,
                y: p.y,
                energy,
                law_ratio: law,
            }
        })
        .collect();
    let in_window: Vec<f64> = rows
        .iter()
        .filter(|r| r.t >= opts.window.0 && r.t <= opts.window.1)
        .map(|r| r.law_ratio)
        .collect();
    let law_min = in_window.iter().cloned().fold(f64::INFINITY, f64::min);
    let law_max = in_window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let completed = orbit.left_domain.is_none() && orbit.samples.len() == times.len();
    let last = rows.last().cloned();
    Ok((
        OrbitSummary {
            law_ok: completed
                && !in_window.is_empty()
                && (law_min - 1.0).abs() <= opts.law_tolerance
                && (law_max - 1.0).abs() <= opts.law_tolerance,
            law_min,
            law_max,
            final_y: last.as_ref().map_or(f64::NAN, |r| r.y),
            final_energy: last.as_ref().map_or(f64::NAN, |r| r.energy),
            completed,
            rows,
        },
        orbit,
    ))
}

/// Starts on the computed whisker at `x0`, integrates the untransformed
/// equations, and compares with a control orbit pushed off the manifold.
pub fn escape_demo(
    sys: &PrimarySystem,
    chart: &RestrictedChart,
    sol: &ManifoldSolution,
    opts: &EscapeOptions,
) -> Result<(EscapeReport, Orbit)> {
    if !(opts.x0 > 0.0) {
        return Err(Error::Invalid("x0 must be positive".into()));
    }
    let phi0 = if opts.phi0.is_empty() {
        vec![0.0; sys.dim()]
    } else {
        opts.phi0.clone()
    };
    if phi0.len() != sol.k.x.dim() || sol.k.y.len() != 3 {
        return Err(Error::DimensionMismatch("solution does not belong to a restricted field".into()));
    }
    let (v, y, _) = sol.k.evaluate(opts.x0, &phi0);
    let w = [v.re, y[0].re, y[1].re, y[2].re];
    let start = chart.to_polar(&w);
    let epoch = parabolic_time_since_pericenter(sys.total_mass(), &start);
    let (manifold, orbit) = run_orbit(sys, &start, epoch, opts)?;
    let mut off = start;
    off.y += opts.control_offset;
    let (control, _) = run_orbit(sys, &off, epoch, opts)?;
    let control_fails_law = !control.law_ok;
    Ok((
        EscapeReport {
            initial: start,
            epoch_offset: epoch,
            manifold,
            control,
            control_fails_law,
        },
        orbit,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohomology::{solve_to_order, EngineOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    #[test]
    fn binomial_coefficients() {
        let c = binomial_half(4);
        assert_eq!(c[0], 1.0);
        assert_eq!(c[1], 0.5);
        assert_eq!(c[2], 0.375);
        assert!((c[4] - 35.0 / 128.0).abs() < 1e-16);
    }

    #[test]
    fn single_primary_potential_is_kepler() {
        let sys = PrimarySystem::single(2.0, vec![1.0]).unwrap();
        let v = expand_potential(&sys, 6).unwrap();
        assert_eq!(v.coeff(&[1]).average().re, 2.0);
        for l in 2..=6u32 {
            assert!(v.coeff(&[l]).is_zero(), "order {l}");
        }
    }

    #[test]
    fn center_of_mass_removes_dipole() {
        let sys = PrimarySystem::circular_pair(0.3, 0.7, golden(), 16).unwrap();
        let v = expand_potential(&sys, 4).unwrap();
        assert!((v.coeff(&[1]).average().re - 1.0).abs() < 1e-15);
        assert!(v.coeff(&[2]).strip_norm(0.0) < 1e-15);
    }

    #[test]
    fn off_center_system_is_rejected() {
        let q = [FourierSeries::constant(1, 8, 0.5), FourierSeries::zero(1, 8)];
        let err = PrimarySystem::new(vec![1.0], vec![q], vec![1.0], 8).unwrap_err();
        assert!(matches!(err, Error::Hypothesis(_)));
    }

    #[test]
    fn quadrupole_matches_direct_sum() {
        let sys = PrimarySystem::circular_pair(0.5, 0.5, golden(), 16).unwrap();
        let v = expand_potential(&sys, 3).unwrap();
        let w3 = v.coeff(&[3]);
        let r = 1e3;
        for i in 0..8 {
            for j in 0..5 {
                let th = i as f64 / 8.0;
                let t = j as f64 * 0.37 / golden();
                let z = [r * (std::f64::consts::TAU * th).cos(), r * (std::f64::consts::TAU * th).sin()];
                let direct = (sys.potential(z, t) - 1.0 / r) * r.powi(3);
                let series = w3.evaluate(&[th, golden() * t]).re;
                assert!((direct - series).abs() < 1e-5 * series.abs().max(1e-3), "{direct} vs {series}");
            }
        }
    }

    #[test]
    fn chart_round_trip() {
        let chart = RestrictedChart::new(1.7, 0.4, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = PolarState {
                r: rng.random_range(50.0..5000.0),
                theta: rng.random_range(-0.5..1.2),
                y: rng.random_range(-0.2..0.2),
                g: rng.random_range(0.5..1.5),
            };
            let q = chart.to_polar(&chart.to_model(&p));
            assert!((q.r - p.r).abs() <= 1e-10 * p.r);
            assert!((q.theta - p.theta).abs() < 1e-10);
            assert!((q.y - p.y).abs() < 1e-10);
            assert!((q.g - p.g).abs() < 1e-10);
        }
    }

    #[test]
    fn restricted_leading_coefficient() {
        let sys = PrimarySystem::circular_pair(0.5, 0.5, golden(), 12).unwrap();
        let (model, _, info) = build_restricted_field(&sys, &RestrictedOptions::default()).unwrap();
        assert_eq!(info.a, 0.25);
        assert_eq!(info.n_computed, 4);
        assert_eq!(model.a_bar(), 0.25);
        assert!(model.validate().is_empty(), "{:?}", model.validate());
    }

    #[test]
    fn truncated_tail_decouples() {
        let sys = PrimarySystem::circular_pair(0.5, 0.5, golden(), 12).unwrap();
        let opts = RestrictedOptions {
            truncate_tail: true,
            ..Default::default()
        };
        let (model, _, _) = build_restricted_field(&sys, &opts).unwrap();
        for j in &model.full_jets(12)[..2] {
            for (e, s) in j.iter() {
                assert_eq!(e[2] + e[3], 0, "coupling monomial {e:?}");
                assert!(s.oscillatory().is_zero());
            }
        }
    }

    #[test]
    fn restricted_field_matches_pushforward() {
        let sys = PrimarySystem::circular_pair(0.4, 0.6, golden(), 16).unwrap();
        let opts = RestrictedOptions {
            degree: 14,
            alpha0: 0.3,
            g0: 0.8,
            truncate_tail: false,
        };
        let (model, chart, _) = build_restricted_field(&sys, &opts).unwrap();
        let ev = crate::dynamics::FieldEvaluator::new(&model).unwrap();
        let p = PolarState {
            r: 2.0 / 0.06f64.powi(2),
            theta: 0.31,
            y: 0.05,
            g: 0.81,
        };
        let t = 0.7;
        let w = chart.to_model(&p);
        let mut state = w.to_vec();
        state.push(golden() * t);
        let mut f = vec![0.0; 5];
        ev.eval(&state, &mut f);
        let dp = polar_field(&sys, &p, t);
        let h = 1e-3;
        let shift = |s: f64| PolarState {
            r: p.r + s * dp.r,
            theta: p.theta + s * dp.theta,
            y: p.y + s * dp.y,
            g: p.g + s * dp.g,
        };
        let (wp, wm) = (chart.to_model(&shift(h)), chart.to_model(&shift(-h)));
        for i in 0..4 {
            let fd = (wp[i] - wm[i]) / (2.0 * h);
            assert!((fd - f[i]).abs() < 1e-8, "component {i}: {fd} vs {}", f[i]);
        }
    }

    fn skeleton_data(tails: Vec<TailEntry>) -> TorusData {
        TorusData {
            omega: vec![golden(), 2f64.sqrt() - 1.0],
            order_cap: 8,
            known_degree: 12,
            mu_n: 1.0,
            m_n: 1.0,
            big_m_n: 1.0,
            inner_angular_momentum: 0.4,
            tails,
        }
    }

    #[test]
    fn skeleton_declares_leading_data() {
        let data = skeleton_data(vec![TailEntry {
            component: "q".into(),
            monomial: vec![7, 0, 0, 0, 0, 0],
            mode: vec![0, 0],
            re: 0.3,
            im: 0.0,
        }]);
        let (model, info) = build_full_skeleton(&data, 0.0, 0.5, 10).unwrap();
        assert_eq!((info.n, info.p, info.a), (4, 6, 0.25));
        assert_eq!((model.n, model.p_declared, model.a_bar()), (4, 6, 0.25));
        assert!((info.total_angular_momentum - 0.9).abs() < 1e-15);
        assert!(model.validate().is_empty(), "{:?}", model.validate());
        let (sol, _) = solve_to_order(&model, 4, &EngineOptions::default()).unwrap();
        let poly = sol.reduced.x_polynomial();
        assert_eq!(poly.keys().cloned().collect::<Vec<_>>(), vec![4, 7]);
        assert_eq!(poly[&4], -0.25);
        assert!((poly[&7] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn skeleton_without_tails_is_pure() {
        let (model, _) = build_full_skeleton(&skeleton_data(vec![]), 0.0, 0.5, 8).unwrap();
        let (sol, _) = solve_to_order(&model, 1, &EngineOptions::default()).unwrap();
        assert_eq!(sol.reduced.x_polynomial().into_iter().collect::<Vec<_>>(), vec![(4, -0.25)]);
    }

    #[test]
    fn skeleton_needs_known_degree() {
        let err = build_full_skeleton(&skeleton_data(vec![]), 0.0, 0.5, 14).unwrap_err();
        assert!(matches!(err, Error::InsufficientTorusData(_)));
    }

    #[test]
    fn barker_time_matches_integration() {
        // from pericenter q = 0.5 (G = 1, M = 1) the parabola reaches r at the Barker time
        let p0 = PolarState { r: 0.5, theta: 0.0, y: 0.0, g: 1.0 };
        let sys = PrimarySystem::single(1.0, vec![1.0]).unwrap();
        let o = integrate(
            |t, s, ds| {
                let a = sys.acceleration([s[0], s[1]], t);
                ds.copy_from_slice(&[s[2], s[3], a[0], a[1]]);
            },
            0.0,
            &p0.to_cartesian(),
            50.0,
            &IntegratorOptions::with_tol(1e-12),
            None,
            |_, _| true,
        )
        .unwrap();
        let end = PolarState::from_cartesian(&o.last().state);
        assert!((parabolic_time_since_pericenter(1.0, &end) - 50.0).abs() < 1e-7);
    }

    #[test]
    fn kepler_escape_follows_parabolic_law() {
        let sys = PrimarySystem::single(1.0, vec![golden()]).unwrap();
        let (model, chart, _) = build_restricted_field(&sys, &RestrictedOptions::default()).unwrap();
        let (sol, _) = solve_to_order(&model, 6, &EngineOptions::default()).unwrap();
        let (rep, _) = escape_demo(&sys, &chart, &sol, &EscapeOptions::default()).unwrap();
        assert!(rep.manifold.law_ok);
        assert!(rep.manifold.final_energy.abs() <= 1e-4);
        assert!(rep.control_fails_law);
    }
}
