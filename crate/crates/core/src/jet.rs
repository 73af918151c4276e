//! Fourier–Taylor jets: truncated Taylor expansions in `(x, y_1, ..., y_m)`
//! whose coefficients are Fourier series on a common torus.

use crate::error::{Error, Result};
use crate::fourier::FourierSeries;
use crate::model::{DynamicsKind, ReducedDynamics};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

pub type Exponent = Vec<u32>;

fn total(e: &[u32]) -> usize {
    e.iter().map(|&v| v as usize).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "JetRecord", try_from = "JetRecord")]
pub struct Jet {
    nvars: usize,
    deg: usize,
    dim: usize,
    order_cap: u32,
    terms: BTreeMap<Exponent, FourierSeries>,
}

/// On-disk layout: `(l, k, series)` records for the monomial `x^l y^k`.
#[derive(Serialize, Deserialize)]
struct JetRecord {
    m: usize,
    deg: usize,
    dim: usize,
    order_cap: u32,
    terms: Vec<(u32, Vec<u32>, FourierSeries)>,
}

impl From<Jet> for JetRecord {
    fn from(j: Jet) -> Self {
        JetRecord {
            m: j.nvars - 1,
            deg: j.deg,
            dim: j.dim,
            order_cap: j.order_cap,
            terms: j
                .terms
                .into_iter()
                .map(|(e, s)| (e[0], e[1..].to_vec(), s))
                .collect(),
        }
    }
}

impl TryFrom<JetRecord> for Jet {
    type Error = String;

    fn try_from(r: JetRecord) -> std::result::Result<Self, String> {
        let mut j = Jet::zero(r.m + 1, r.deg, r.dim, r.order_cap);
        for (l, k, s) in r.terms {
            if k.len() != r.m {
                return Err(format!("y-exponent {k:?} does not have length {}", r.m));
            }
            if s.dim() != r.dim {
                return Err("coefficient on a different torus".into());
            }
            let mut e = vec![l];
            e.extend(k);
            if total(&e) > r.deg {
                return Err(format!("monomial {e:?} exceeds degree {}", r.deg));
            }
            j.add_term(e, &s);
        }
        Ok(j)
    }
}

impl Jet {
    pub fn zero(nvars: usize, deg: usize, dim: usize, order_cap: u32) -> Self {
        assert!(nvars >= 1, "a jet has at least the x variable");
        Jet {
            nvars,
            deg,
            dim,
            order_cap,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, deg: usize, c: FourierSeries) -> Self {
        let mut j = Self::zero(nvars, deg, c.dim(), c.order_cap());
        j.add_term(vec![0; nvars], &c);
        j
    }

    /// The coordinate function of variable `i`.
    pub fn variable(i: usize, nvars: usize, deg: usize, dim: usize, order_cap: u32) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Self::monomial(e, FourierSeries::constant(dim, order_cap, 1.0), deg)
    }

    pub fn monomial(e: Exponent, c: FourierSeries, deg: usize) -> Self {
        let mut j = Self::zero(e.len(), deg, c.dim(), c.order_cap());
        j.add_term(e, &c);
        j
    }

    /// Univariate jet `Σ c_l x^l`.
    pub fn univariate<I>(deg: usize, dim: usize, order_cap: u32, coeffs: I) -> Self
    where
        I: IntoIterator<Item = (usize, FourierSeries)>,
    {
        let mut j = Self::zero(1, deg, dim, order_cap);
        for (l, c) in coeffs {
            j.add_term(vec![l as u32], &c);
        }
        j
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Number of `y` variables.
    pub fn m(&self) -> usize {
        self.nvars - 1
    }

    pub fn deg(&self) -> usize {
        self.deg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order_cap(&self) -> u32 {
        self.order_cap
    }

    pub fn is_zero(&self) -> bool {
        self.terms.values().all(|s| s.is_zero())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Exponent, &FourierSeries)> {
        self.terms.iter()
    }

    pub fn term(&self, e: &[u32]) -> Option<&FourierSeries> {
        self.terms.get(e)
    }

    pub fn coeff(&self, e: &[u32]) -> FourierSeries {
        self.terms
            .get(e)
            .cloned()
            .unwrap_or_else(|| FourierSeries::zero(self.dim, self.order_cap))
    }

    /// Coefficient of `x^l` in a univariate jet.
    pub fn x_coeff(&self, l: usize) -> FourierSeries {
        debug_assert_eq!(self.nvars, 1);
        self.coeff(&[l as u32])
    }

    pub fn zero_series(&self) -> FourierSeries {
        FourierSeries::zero(self.dim, self.order_cap)
    }

    pub fn add_term(&mut self, e: Exponent, c: &FourierSeries) {
        assert_eq!(e.len(), self.nvars, "exponent length mismatch");
        assert_eq!(c.dim(), self.dim, "coefficient on a different torus");
        if total(&e) > self.deg || c.is_empty() {
            return;
        }
        match self.terms.get_mut(&e) {
            Some(s) => {
                *s += c;
                if s.is_empty() {
                    self.terms.remove(&e);
                }
            }
            None => {
                self.terms.insert(e, c.with_cap(self.order_cap));
            }
        }
    }

    pub fn set_term(&mut self, e: Exponent, c: FourierSeries) {
        assert_eq!(e.len(), self.nvars);
        if total(&e) > self.deg {
            return;
        }
        if c.is_empty() {
            self.terms.remove(&e);
        } else {
            self.terms.insert(e, c.with_cap(self.order_cap));
        }
    }

    pub fn with_deg(&self, deg: usize) -> Self {
        let mut j = self.clone();
        j.deg = deg;
        j.terms.retain(|e, _| total(e) <= deg);
        j
    }

    pub fn with_cap(&self, order_cap: u32) -> Self {
        let mut j = Self::zero(self.nvars, self.deg, self.dim, order_cap);
        for (e, s) in &self.terms {
            j.add_term(e.clone(), &s.with_cap(order_cap));
        }
        j
    }

    /// Highest total degree carrying a stored coefficient.
    pub fn max_term_degree(&self) -> Option<usize> {
        self.terms.keys().map(|e| total(e)).max()
    }

    /// Lowest total degree whose coefficients have strip norm above `tol`.
    pub fn min_degree(&self, tol: f64) -> Option<usize> {
        self.terms
            .iter()
            .filter(|(_, s)| s.strip_norm(0.0) > tol)
            .map(|(e, _)| total(e))
            .min()
    }

    /// No coefficient of total degree below `q` exceeds `tol` in strip norm.
    pub fn vanishes_to(&self, q: usize, tol: f64) -> bool {
        self.terms
            .iter()
            .all(|(e, s)| total(e) >= q || s.strip_norm(0.0) <= tol)
    }

    /// Sum of strip norms of the coefficients of total degree `n`.
    pub fn degree_norm(&self, n: usize) -> f64 {
        self.terms
            .iter()
            .filter(|(e, _)| total(e) == n)
            .map(|(_, s)| s.strip_norm(0.0))
            .sum()
    }

    /// Terms with total degree in `lo..=hi`.
    pub fn degree_range(&self, lo: usize, hi: usize) -> Self {
        let mut j = Self::zero(self.nvars, self.deg, self.dim, self.order_cap);
        for (e, s) in &self.terms {
            let t = total(e);
            if t >= lo && t <= hi {
                j.terms.insert(e.clone(), s.clone());
            }
        }
        j
    }

    pub fn homogeneous(&self, n: usize) -> Self {
        self.degree_range(n, n)
    }

    pub fn scale(&self, f: impl Into<Complex64>) -> Self {
        let f = f.into();
        let mut j = Self::zero(self.nvars, self.deg, self.dim, self.order_cap);
        if f == Complex64::new(0.0, 0.0) {
            return j;
        }
        j.terms = self.terms.iter().map(|(e, s)| (e.clone(), s.scale(f))).collect();
        j
    }

    /// Multiplies every coefficient by the series `c`.
    pub fn scale_series(&self, c: &FourierSeries) -> Self {
        let mut j = Self::zero(self.nvars, self.deg, self.dim, self.order_cap.min(c.order_cap()));
        for (e, s) in &self.terms {
            j.add_term(e.clone(), &(s * c));
        }
        j
    }

    pub fn map_coeffs<F: Fn(&FourierSeries) -> FourierSeries>(&self, f: F) -> Self {
        let mut j = Self::zero(self.nvars, self.deg, self.dim, self.order_cap);
        for (e, s) in &self.terms {
            j.add_term(e.clone(), &f(s));
        }
        j
    }

    pub fn rotate(&self, step: &[f64]) -> Self {
        self.map_coeffs(|s| s.rotate(step))
    }

    pub fn average_part(&self) -> Self {
        self.map_coeffs(|s| FourierSeries::constant(s.dim(), s.order_cap(), s.average()))
    }

    pub fn oscillatory_part(&self) -> Self {
        self.map_coeffs(|s| s.oscillatory())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.nvars != other.nvars || self.dim != other.dim {
            return Err(Error::DimensionMismatch(format!(
                "jets in {} vars on T^{} and {} vars on T^{}",
                self.nvars, self.dim, other.nvars, other.dim
            )));
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut j = self.with_deg(self.deg.min(other.deg));
        j.order_cap = self.order_cap.min(other.order_cap);
        for (e, s) in &other.terms {
            j.add_term(e.clone(), s);
        }
        Ok(j)
    }

    /// Cauchy product truncated at the smaller degree.
    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let deg = self.deg.min(other.deg);
        let mut j = Self::zero(self.nvars, deg, self.dim, self.order_cap.min(other.order_cap));
        let mut e = vec![0u32; self.nvars];
        for (ea, sa) in &self.terms {
            let da = total(ea);
            if da > deg {
                continue;
            }
            for (eb, sb) in &other.terms {
                if da + total(eb) > deg {
                    continue;
                }
                for i in 0..self.nvars {
                    e[i] = ea[i] + eb[i];
                }
                let p = sa * sb;
                match j.terms.get_mut(&e) {
                    Some(s) => *s += &p,
                    None => {
                        if !p.is_empty() {
                            j.terms.insert(e.clone(), p);
                        }
                    }
                }
            }
        }
        j.terms.retain(|_, s| !s.is_empty());
        Ok(j)
    }

    pub fn powi(&self, n: u32) -> Self {
        let mut acc = Jet::constant(
            self.nvars,
            self.deg,
            FourierSeries::constant(self.dim, self.order_cap, 1.0),
        );
        for _ in 0..n {
            acc = &acc * self;
        }
        acc
    }

    /// `∂/∂v_i` for variable `i` (0 is `x`).
    pub fn derivative_var(&self, i: usize) -> Self {
        let mut j = Self::zero(self.nvars, self.deg, self.dim, self.order_cap);
        for (e, s) in &self.terms {
            if e[i] > 0 {
                let mut f = e.clone();
                f[i] -= 1;
                j.add_term(f, &s.scale(e[i] as f64));
            }
        }
        j
    }

    /// Derivative along torus angle `axis`, acting on the coefficients.
    pub fn derivative_theta(&self, axis: usize) -> Self {
        self.map_coeffs(|s| s.derivative(axis))
    }

    /// `Σ_i v_i ∂_{θ_i}` acting on the coefficients.
    pub fn directional_theta(&self, v: &[f64]) -> Self {
        self.map_coeffs(|s| s.directional_derivative(v))
    }

    pub fn evaluate(&self, vars: &[f64], theta: &[f64]) -> Complex64 {
        let z: Vec<Complex64> = vars.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.evaluate_complex(&z, theta)
    }

    pub fn evaluate_complex(&self, vars: &[Complex64], theta: &[f64]) -> Complex64 {
        assert_eq!(vars.len(), self.nvars);
        self.terms
            .iter()
            .map(|(e, s)| {
                let mono: Complex64 = e
                    .iter()
                    .zip(vars)
                    .map(|(&p, v)| v.powu(p))
                    .product();
                s.evaluate(theta) * mono
            })
            .sum()
    }

    pub fn is_real_symmetric(&self, tol: f64) -> bool {
        self.terms.values().all(|s| s.is_real_symmetric(tol))
    }

    pub fn prune(&mut self, tol: f64) {
        for s in self.terms.values_mut() {
            s.prune(tol);
        }
        self.terms.retain(|_, s| !s.is_empty());
    }

    /// Largest coefficient modulus.
    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|s| s.max_abs()).fold(0.0, f64::max)
    }

    /// Exact division by variable `i`. Terms free of that variable must have
    /// strip norm at most `tol`; they are discarded.
    pub fn divide_by_var(&self, i: usize, tol: f64) -> Result<Self> {
        let mut j = Self::zero(self.nvars, self.deg.saturating_sub(1), self.dim, self.order_cap);
        for (e, s) in &self.terms {
            if e[i] == 0 {
                if s.strip_norm(0.0) > tol {
                    return Err(Error::Invalid(format!(
                        "monomial {e:?} is not divisible by variable {i}"
                    )));
                }
                continue;
            }
            let mut f = e.clone();
            f[i] -= 1;
            j.add_term(f, s);
        }
        Ok(j)
    }

    /// Substitutes jets for the variables and shifted, perturbed angles for
    /// the torus argument: `self(vars(z), θ + shift + theta_dev(z))`.
    pub fn compose(&self, sub: &Substitution<'_>) -> Result<Jet> {
        compose_one(self, sub, &mut CompositionCache::default())
    }
}

impl Add for &Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        self.try_add(rhs).expect("incompatible jets")
    }
}

impl Sub for &Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        self.try_add(&rhs.scale(-1.0)).expect("incompatible jets")
    }
}

impl AddAssign<&Jet> for Jet {
    fn add_assign(&mut self, rhs: &Jet) {
        *self = &*self + rhs;
    }
}

impl SubAssign<&Jet> for Jet {
    fn sub_assign(&mut self, rhs: &Jet) {
        *self = &*self - rhs;
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for &Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.try_mul(rhs).expect("incompatible jets")
    }
}

/// Inner data for [`Jet::compose`].
#[derive(Clone, Copy, Debug)]
pub struct Substitution<'a> {
    /// One jet per variable of the outer jet, all in the same variables.
    pub vars: &'a [Jet],
    /// Deviations added to the leading torus angles; each vanishes at the origin.
    pub theta_dev: &'a [Jet],
    /// Rotation applied to the outer coefficients before the deviation.
    pub shift: Option<&'a [f64]>,
}

#[derive(Default)]
struct CompositionCache {
    monomials: HashMap<Exponent, Jet>,
    dev_powers: HashMap<Exponent, Jet>,
}

fn ensure_power(cache: &mut HashMap<Exponent, Jet>, e: &[u32], base: &[Jet]) {
    if cache.contains_key(e) {
        return;
    }
    let i = e.iter().position(|&v| v > 0).expect("unit power is seeded");
    let mut prev = e.to_vec();
    prev[i] -= 1;
    ensure_power(cache, &prev, base);
    let m = &cache[&prev] * &base[i];
    cache.insert(e.to_vec(), m);
}

/// Lowest degree present in `j`; `None` for the zero jet.
fn order_of(j: &Jet) -> Option<usize> {
    j.terms
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(e, _)| total(e))
        .min()
}

fn compose_one(outer: &Jet, sub: &Substitution<'_>, cache: &mut CompositionCache) -> Result<Jet> {
    if sub.vars.len() != outer.nvars {
        return Err(Error::DimensionMismatch(format!(
            "{} substitutions for {} variables",
            sub.vars.len(),
            outer.nvars
        )));
    }
    let proto = sub
        .vars
        .first()
        .ok_or_else(|| Error::Invalid("empty substitution".into()))?;
    let (nv, deg, dim) = (proto.nvars, proto.deg, proto.dim);
    let cap = outer.order_cap.min(proto.order_cap);
    for j in sub.vars.iter().chain(sub.theta_dev) {
        if j.nvars != nv || j.dim != dim {
            return Err(Error::DimensionMismatch("inner jets disagree".into()));
        }
    }
    if outer.dim != dim {
        return Err(Error::DimensionMismatch(format!(
            "outer coefficients on T^{}, inner on T^{}",
            outer.dim, dim
        )));
    }
    if sub.theta_dev.len() > dim {
        return Err(Error::DimensionMismatch("more angle deviations than angles".into()));
    }
    let var_orders: Vec<Option<usize>> = sub.vars.iter().map(order_of).collect();
    let dev_orders: Vec<Option<usize>> = sub.theta_dev.iter().map(order_of).collect();
    if var_orders.iter().chain(&dev_orders).any(|o| *o == Some(0)) {
        return Err(Error::Invalid("substituted jets must vanish at the origin".into()));
    }
    let deg = deg.min(sub.vars.iter().chain(sub.theta_dev).map(|j| j.deg).min().unwrap_or(deg));
    let min_order = var_orders.iter().flatten().copied().min();
    if outer.deg < deg {
        if let Some(mu) = min_order {
            if (outer.deg + 1) * mu <= deg {
                return Err(Error::DegreeOverflow {
                    requested: deg,
                    known: outer.deg,
                });
            }
        }
    }

    let one = Jet::constant(nv, deg, FourierSeries::constant(dim, cap, 1.0));
    cache.monomials.entry(vec![0; outer.nvars]).or_insert_with(|| one.clone());
    cache.dev_powers.entry(vec![0; sub.theta_dev.len()]).or_insert_with(|| one.clone());
    let dev_min = dev_orders.iter().flatten().copied().min();

    let mut result = Jet::zero(nv, deg, dim, cap);
    for (e, c) in &outer.terms {
        let mut low = 0usize;
        let mut vanishes = false;
        for (p, o) in e.iter().zip(&var_orders) {
            if *p > 0 {
                match o {
                    Some(o) => low += *p as usize * o,
                    None => vanishes = true,
                }
            }
        }
        if vanishes || low > deg {
            continue;
        }
        ensure_power(&mut cache.monomials, e, sub.vars);
        let c = match sub.shift {
            Some(step) => c.rotate(step),
            None => c.clone(),
        };
        let budget = deg - low;
        let coeff = expand_angles(&c, sub.theta_dev, dev_min, budget, nv, deg, cap, cache);
        let term = &coeff * &cache.monomials[e];
        result = &result + &term;
    }
    Ok(result)
}

/// Taylor expansion `Σ_α ∂^α c / α! · dev^α` through degree `budget`.
#[allow(clippy::too_many_arguments)]
fn expand_angles(
    c: &FourierSeries,
    devs: &[Jet],
    dev_min: Option<usize>,
    budget: usize,
    nv: usize,
    deg: usize,
    cap: u32,
    cache: &mut CompositionCache,
) -> Jet {
    let mut out = Jet::zero(nv, deg, c.dim(), cap);
    out.add_term(vec![0; nv], c);
    let Some(mu) = dev_min else {
        return out;
    };
    let max_total = budget / mu;
    if max_total == 0 {
        return out;
    }
    let mut alpha = vec![0u32; devs.len()];
    expand_rec(c, devs, 0, &mut alpha, 1.0, max_total, &mut out, cache);
    out
}

#[allow(clippy::too_many_arguments)]
fn expand_rec(
    c: &FourierSeries,
    devs: &[Jet],
    axis: usize,
    alpha: &mut Exponent,
    factorial: f64,
    remaining: usize,
    out: &mut Jet,
    cache: &mut CompositionCache,
) {
    if axis == devs.len() {
        if alpha.iter().all(|&a| a == 0) || c.is_empty() {
            return;
        }
        ensure_power(&mut cache.dev_powers, alpha, devs);
        let term = cache.dev_powers[alpha.as_slice()].scale_series(&c.scale(1.0 / factorial));
        *out = &*out + &term;
        return;
    }
    let mut d = c.clone();
    let mut fact = factorial;
    for n in 0..=remaining {
        if d.is_empty() {
            break;
        }
        alpha[axis] = n as u32;
        expand_rec(&d, devs, axis + 1, alpha, fact, remaining - n, out, cache);
        d = d.derivative(axis);
        fact *= (n + 1) as f64;
    }
    alpha[axis] = 0;
}

/// Composes several outer jets with one shared substitution.
pub fn compose_all(outer: &[Jet], sub: &Substitution<'_>) -> Result<Vec<Jet>> {
    let mut cache = CompositionCache::default();
    outer.iter().map(|f| compose_one(f, sub, &mut cache)).collect()
}

/// A parameterization `K(x, θ)` stored as univariate jets in `x`; the angle
/// components hold the deviation `K_θ − θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamJet {
    pub x: Jet,
    pub y: Vec<Jet>,
    pub theta: Vec<Jet>,
}

impl ParamJet {
    /// `K(x, θ) = (x, 0, θ)`.
    pub fn identity(m: usize, d: usize, deg: usize, dim: usize, order_cap: u32) -> Self {
        ParamJet {
            x: Jet::variable(0, 1, deg, dim, order_cap),
            y: vec![Jet::zero(1, deg, dim, order_cap); m],
            theta: vec![Jet::zero(1, deg, dim, order_cap); d],
        }
    }

    pub fn deg(&self) -> usize {
        self.x.deg()
    }

    pub fn with_deg(&self, deg: usize) -> Self {
        ParamJet {
            x: self.x.with_deg(deg),
            y: self.y.iter().map(|j| j.with_deg(deg)).collect(),
            theta: self.theta.iter().map(|j| j.with_deg(deg)).collect(),
        }
    }

    pub fn components(&self) -> impl Iterator<Item = &Jet> {
        std::iter::once(&self.x).chain(&self.y).chain(&self.theta)
    }

    /// Checks the unit linear term of `K_x` and the vanishing orders of the
    /// other components.
    pub fn check_structure(&self, tol: f64) -> Result<()> {
        let one = FourierSeries::constant(self.x.dim(), self.x.order_cap(), 1.0);
        if self.x.x_coeff(0).strip_norm(0.0) > tol
            || (&self.x.x_coeff(1) - &one).strip_norm(0.0) > tol
        {
            return Err(Error::Invalid("K_x must be x plus higher order terms".into()));
        }
        if !self.y.iter().all(|j| j.vanishes_to(2, tol)) {
            return Err(Error::Invalid("K_y must vanish to second order".into()));
        }
        if !self.theta.iter().all(|j| j.vanishes_to(1, tol)) {
            return Err(Error::Invalid("angle deviation must vanish at x = 0".into()));
        }
        Ok(())
    }

    /// `(K_x, K_y, K_θ − θ)` at a point.
    pub fn evaluate(&self, x: f64, theta: &[f64]) -> (Complex64, Vec<Complex64>, Vec<Complex64>) {
        let z = [x];
        (
            self.x.evaluate(&z, theta),
            self.y.iter().map(|j| j.evaluate(&z, theta)).collect(),
            self.theta.iter().map(|j| j.evaluate(&z, theta)).collect(),
        )
    }

    pub fn is_real_symmetric(&self, tol: f64) -> bool {
        self.components().all(|j| j.is_real_symmetric(tol))
    }
}

/// `F ∘ K`: each model component, a jet in `(x, y)`, evaluated along the
/// parameterization, with the torus argument `θ + shift + (K_θ − θ)`.
pub fn jet_compose(f: &[Jet], k: &ParamJet, theta_shift: Option<&[f64]>) -> Result<Vec<Jet>> {
    let vars: Vec<Jet> = std::iter::once(k.x.clone()).chain(k.y.iter().cloned()).collect();
    compose_all(
        f,
        &Substitution {
            vars: &vars,
            theta_dev: &k.theta,
            shift: theta_shift,
        },
    )
}

/// `K ∘ R` for a reduced map `R`. Angle components of the result are
/// deviations from `θ + ω`.
pub fn compose_reduced(k: &ParamJet, r: &ReducedDynamics) -> Result<ParamJet> {
    if r.kind != DynamicsKind::Map {
        return Err(Error::Invalid("composition needs a reduced map".into()));
    }
    let deg = k.deg();
    let (dim, cap) = (k.x.dim(), k.x.order_cap());
    let rx = [r.x_jet(deg, dim, cap)];
    let rt = r.theta_jets(deg, dim, cap);
    let sub = Substitution {
        vars: &rx,
        theta_dev: &rt,
        shift: Some(&r.omega),
    };
    let mut cache = CompositionCache::default();
    let x = compose_one(&k.x, &sub, &mut cache)?;
    let y = k
        .y
        .iter()
        .map(|j| compose_one(j, &sub, &mut cache))
        .collect::<Result<Vec<_>>>()?;
    let theta = k
        .theta
        .iter()
        .zip(&rt)
        .map(|(j, r)| Ok(&compose_one(j, &sub, &mut cache)? + r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamJet { x, y, theta })
}

/// Inverse of a tangent-to-identity change `T(z, θ) = (z + t(z, θ), θ + s(z, θ))`
/// given as jets `[t_z..., s...]` in the variables `z`. Returns the same
/// layout for `T^{-1}`.
pub fn invert_tangent_identity(t_vars: &[Jet], t_theta: &[Jet]) -> Result<(Vec<Jet>, Vec<Jet>)> {
    let n = t_vars.len();
    let proto = t_vars
        .first()
        .ok_or_else(|| Error::Invalid("empty change of variables".into()))?;
    let (deg, dim, cap) = (proto.deg(), proto.dim(), proto.order_cap());
    let id: Vec<Jet> = (0..n).map(|i| Jet::variable(i, n, deg, dim, cap)).collect();
    let dev_t: Vec<Jet> = t_vars.iter().zip(&id).map(|(t, i)| t - i).collect();
    let mut sv = id.clone();
    let mut st: Vec<Jet> = vec![Jet::zero(n, deg, dim, cap); t_theta.len()];
    for _ in 0..=deg {
        let sub = Substitution {
            vars: &sv,
            theta_dev: &st,
            shift: None,
        };
        let dz = compose_all(&dev_t, &sub)?;
        let dt = compose_all(t_theta, &sub)?;
        let next_v: Vec<Jet> = id.iter().zip(&dz).map(|(i, d)| i - d).collect();
        let next_t: Vec<Jet> = dt.iter().map(|d| -d).collect();
        let done = next_v == sv && next_t == st;
        sv = next_v;
        st = next_t;
        if done {
            break;
        }
    }
    Ok((sv, st))
}

impl ReducedDynamics {
    /// `R_x` (maps) or `Y_x` (fields) as a univariate jet.
    pub fn x_jet(&self, deg: usize, dim: usize, order_cap: u32) -> Jet {
        let coeffs = self
            .x_polynomial()
            .into_iter()
            .map(|(l, v)| (l, FourierSeries::constant(dim, order_cap, v)));
        Jet::univariate(deg, dim, order_cap, coeffs)
    }

    /// Angle corrections `Σ_l r_l x^l`, one jet per angle.
    pub fn theta_jets(&self, deg: usize, dim: usize, order_cap: u32) -> Vec<Jet> {
        (0..self.omega.len())
            .map(|i| {
                Jet::univariate(
                    deg,
                    dim,
                    order_cap,
                    self.theta_terms
                        .iter()
                        .map(|(&l, v)| (l, FourierSeries::constant(dim, order_cap, v[i]))),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c1(v: f64) -> FourierSeries {
        FourierSeries::constant(1, 16, v)
    }

    fn x_jet(deg: usize) -> Jet {
        Jet::variable(0, 1, deg, 1, 16)
    }

    #[test]
    fn square_of_x() {
        let x = x_jet(4);
        let sq = &x * &x;
        assert_eq!(sq, Jet::monomial(vec![2], c1(1.0), 4));
    }

    #[test]
    fn single_term_product() {
        let a = FourierSeries::cos_mode(1, 16, &[1], 1.0);
        let b = FourierSeries::sin_mode(1, 16, &[2], 0.5);
        let p = &Jet::monomial(vec![1], a.clone(), 5) * &Jet::monomial(vec![1], b.clone(), 5);
        assert_eq!(p.len(), 1);
        assert!((&p.coeff(&[2]) - &(&a * &b)).max_abs() < 1e-16);
    }

    #[test]
    fn derivatives() {
        let x3 = Jet::monomial(vec![3], c1(1.0), 5);
        assert_eq!(x3.derivative_var(0), Jet::monomial(vec![2], c1(3.0), 5));
        let cx = Jet::monomial(vec![1], FourierSeries::cos_mode(1, 16, &[1], 1.0), 5);
        let d = cx.derivative_theta(0);
        let expected = FourierSeries::sin_mode(1, 16, &[1], -std::f64::consts::TAU);
        assert!((&d.coeff(&[1]) - &expected).max_abs() < 1e-15);
    }

    #[test]
    fn identity_composition() {
        let deg = 6;
        let mut k = ParamJet::identity(1, 1, deg, 1, 16);
        k.x.add_term(vec![2], &FourierSeries::cos_mode(1, 16, &[1], 0.3));
        k.y[0].add_term(vec![3], &c1(0.7));
        k.theta[0].add_term(vec![1], &c1(-0.2));
        let f = vec![
            Jet::variable(0, 2, deg, 1, 16),
            Jet::variable(1, 2, deg, 1, 16),
        ];
        let out = jet_compose(&f, &k, None).unwrap();
        assert_eq!(out[0], k.x);
        assert_eq!(out[1], k.y[0]);
    }

    #[test]
    fn simple_polynomial_composition() {
        let deg = 5;
        let f = &x_jet(deg) - &Jet::monomial(vec![2], c1(1.0), deg);
        let k = ParamJet::identity(0, 1, deg, 1, 16);
        let out = jet_compose(&[f.clone()], &k, None).unwrap();
        assert_eq!(out[0], f);
    }

    #[test]
    fn symbolic_low_order_expansion() {
        // F_x = x − a(θ)x², K_x = x + c x² with a = 1 + 0.4 cos 2πθ.
        let deg = 3;
        let a = &c1(1.0) + &FourierSeries::cos_mode(1, 16, &[1], 0.4);
        let f = &x_jet(deg) - &Jet::monomial(vec![2], a.clone(), deg);
        let mut k = ParamJet::identity(0, 1, deg, 1, 16);
        k.x.add_term(vec![2], &c1(0.25));
        let out = jet_compose(&[f], &k, None).unwrap().remove(0);
        // hand expansion: x + (c − a) x² − 2 a c x³
        assert!((&out.coeff(&[1]) - &c1(1.0)).max_abs() < 1e-15);
        assert!((&out.coeff(&[2]) - &(&c1(0.25) - &a)).max_abs() < 1e-15);
        assert!((&out.coeff(&[3]) - &a.scale(-0.5)).max_abs() < 1e-15);
    }

    #[test]
    fn reduced_composition_cases() {
        let mut r = ReducedDynamics::new(DynamicsKind::Map, 2, 1.0, vec![0.3]);
        let k = ParamJet::identity(0, 1, 5, 1, 16);
        let out = compose_reduced(&k, &r).unwrap();
        assert_eq!(out.x, &x_jet(5) - &Jet::monomial(vec![2], c1(1.0), 5));

        r.a_bar = 0.0;
        let mut k = ParamJet::identity(0, 1, 5, 1, 16);
        let s = FourierSeries::cos_mode(1, 16, &[1], 1.0);
        k.x.add_term(vec![3], &s);
        let out = compose_reduced(&k, &r).unwrap();
        assert_eq!(out.x.coeff(&[3]), s.rotate(&[0.3]));
    }

    #[test]
    fn degree_overflow() {
        let f = Jet::monomial(vec![1], c1(1.0), 2);
        let k = ParamJet::identity(0, 1, 4, 1, 16);
        assert!(matches!(
            jet_compose(&[f], &k, None),
            Err(Error::DegreeOverflow { .. })
        ));
    }

    #[test]
    fn inverse_of_tangent_identity() {
        let deg = 6;
        let x = Jet::variable(0, 1, deg, 1, 16);
        let t = &x + &Jet::monomial(vec![2], FourierSeries::cos_mode(1, 16, &[1], 0.5), deg);
        let s = Jet::monomial(vec![2], FourierSeries::sin_mode(1, 16, &[1], 0.2), deg);
        let (iv, it) = invert_tangent_identity(&[t.clone()], &[s.clone()]).unwrap();
        let sub = Substitution {
            vars: &iv,
            theta_dev: &it,
            shift: None,
        };
        let back_x = t.compose(&sub).unwrap();
        let back_t = &it[0] + &s.compose(&sub).unwrap();
        assert!((&back_x - &x).max_abs() < 1e-12);
        assert!(back_t.max_abs() < 1e-12);
    }

    #[test]
    fn serde_layout() {
        let j = Jet::monomial(vec![2, 1], FourierSeries::constant(1, 2, 0.5), 3);
        let text = serde_json::to_string(&j).unwrap();
        assert_eq!(
            text,
            r#"{"m":1,"deg":3,"dim":1,"order_cap":2,"terms":[[2,[1],{"dim":1,"order_cap":2,"terms":[[[0],0.5,0.0]]}]]}"#
        );
        assert_eq!(serde_json::from_str::<Jet>(&text).unwrap(), j);
    }

    fn random_jet(nvars: usize, deg: usize) -> impl Strategy<Value = Jet> {
        let exps: Vec<Exponent> = all_exponents(nvars, deg);
        let n = exps.len();
        proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), n).prop_map(
            move |vals| {
                let mut j = Jet::zero(nvars, deg, 1, 64);
                for (e, (a, b, c)) in exps.iter().zip(vals) {
                    let s = &(&FourierSeries::constant(1, 64, a)
                        + &FourierSeries::cos_mode(1, 64, &[1], b))
                        + &FourierSeries::sin_mode(1, 64, &[2], c);
                    j.add_term(e.clone(), &s);
                }
                j
            },
        )
    }

    fn all_exponents(nvars: usize, deg: usize) -> Vec<Exponent> {
        let mut out = vec![vec![]];
        for _ in 0..nvars {
            out = out
                .into_iter()
                .flat_map(|e: Exponent| {
                    let used = total(&e);
                    (0..=(deg - used) as u32).map(move |p| {
                        let mut f = e.clone();
                        f.push(p);
                        f
                    })
                })
                .collect();
        }
        out
    }

    fn sub_k(inner: &Jet) -> Substitution<'_> {
        Substitution { vars: std::slice::from_ref(inner), theta_dev: &[], shift: None }
    }

    fn small_jet(deg: usize) -> impl Strategy<Value = Jet> {
        random_jet(1, deg).prop_map(move |mut j| {
            j.set_term(vec![0], FourierSeries::zero(1, 64));
            j
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn product_evaluates_pointwise(a in random_jet(2, 6), b in random_jet(2, 6)) {
            let deg = 12;
            let (a, b) = (a.with_deg(deg), b.with_deg(deg));
            let p = &a * &b;
            for i in 0..8 {
                for l in 0..8 {
                    let z = [0.1 + 0.05 * i as f64, -0.2 + 0.03 * l as f64];
                    let t = [l as f64 / 8.0];
                    let lhs = p.evaluate(&z, &t);
                    let rhs = a.evaluate(&z, &t) * b.evaluate(&z, &t);
                    prop_assert!((lhs - rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
                }
            }
        }

        #[test]
        fn x_derivative_matches_finite_difference(a in random_jet(2, 6)) {
            let d = a.derivative_var(0);
            let h = 1e-5;
            for i in 0..4 {
                let z = [0.2 + 0.1 * i as f64, 0.3];
                let t = [0.125 * i as f64];
                let fd = (a.evaluate(&[z[0] + h, z[1]], &t) - a.evaluate(&[z[0] - h, z[1]], &t)) / (2.0 * h);
                let ex = d.evaluate(&z, &t);
                prop_assert!((fd - ex).norm() <= 1e-7 * ex.norm().max(1.0));
            }
        }

        #[test]
        fn leibniz_rule(a in random_jet(1, 5), b in random_jet(1, 5)) {
            let (a, b) = (a.with_deg(10), b.with_deg(10));
            for axis in [None, Some(0usize)] {
                let der = |j: &Jet| match axis {
                    None => j.derivative_var(0),
                    Some(ax) => j.derivative_theta(ax),
                };
                let lhs = der(&(&a * &b));
                let rhs = &(&der(&a) * &b) + &(&a * &der(&b));
                prop_assert!((&lhs - &rhs).max_abs() <= 1e-13 * rhs.max_abs().max(1.0));
            }
        }

        #[test]
        fn composition_is_associative(f in random_jet(1, 5), k in small_jet(5), r in small_jet(5)) {
            let deg = 5;
            let fk = f.compose(&sub_k(&k)).unwrap();
            let lhs = fk.compose(&sub_k(&r)).unwrap();
            let kr = k.compose(&sub_k(&r)).unwrap();
            let rhs = f.compose(&sub_k(&kr)).unwrap();
            prop_assert_eq!(lhs.deg(), deg);
            prop_assert!((&lhs - &rhs).max_abs() <= 1e-11 * rhs.max_abs().max(1.0), "diff {} scale {}", (&lhs - &rhs).max_abs(), rhs.max_abs());
        }

        #[test]
        fn composition_evaluates_pointwise(f in random_jet(2, 4), k in small_jet(8), y in small_jet(8), dev in small_jet(8)) {
            let deg = 8;
            let f = f.with_deg(deg);
            let y = y.map_coeffs(|s| s.scale(0.3));
            let dev = dev.map_coeffs(|s| s.scale(0.1));
            let pj = ParamJet { x: k.clone(), y: vec![y.clone()], theta: vec![dev.clone()] };
            let out = jet_compose(&[f.clone()], &pj, Some(&[0.21])).unwrap().remove(0);
            for i in 0..4 {
                let x = 0.002 * (i + 1) as f64;
                let t = [0.1 + 0.2 * i as f64];
                let kx = k.evaluate(&[x], &t);
                let ky = y.evaluate(&[x], &t);
                let kd = dev.evaluate(&[x], &t);
                let ang = t[0] + 0.21 + kd.re;
                let direct = f.evaluate_complex(&[kx, ky], &[ang]);
                let via = out.evaluate(&[x], &t);
                prop_assert!((direct - via).norm() <= 1e-10 * direct.norm().max(1e-3), "{} vs {}", direct, via);
            }
        }
    }
}
